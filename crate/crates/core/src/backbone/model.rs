use std::collections::BTreeMap;
use std::io::Read;

use rand::Rng;

use super::params::{BackboneParams, Trainable, BLOCK_BASE, BLOCK_FIELDS, CLS, PATCH_B, PATCH_W, POS};
use super::BackboneConfig;
use crate::diffcore::{Element, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::prompts::Prompt;
use crate::raster::Image;

/// Per-layer key/value prefixes already placed on a tape, keyed by 1-indexed
/// layer. Each value is `[prefix_len, embed_dim]`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PrefixVars {
    pub blocks: BTreeMap<usize, (Var, Var)>,
}

/// Tape handles of one transformer block.
#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub ln1_gamma: Var,
    pub ln1_beta: Var,
    pub qkv_weight: Var,
    pub qkv_bias: Var,
    pub proj_weight: Var,
    pub proj_bias: Var,
    pub ln2_gamma: Var,
    pub ln2_beta: Var,
    pub fc1_weight: Var,
    pub fc1_bias: Var,
    pub fc2_weight: Var,
    pub fc2_bias: Var,
}

impl BlockVars {
    fn from_slice(v: &[Var]) -> Self {
        Self {
            ln1_gamma: v[0],
            ln1_beta: v[1],
            qkv_weight: v[2],
            qkv_bias: v[3],
            proj_weight: v[4],
            proj_bias: v[5],
            ln2_gamma: v[6],
            ln2_beta: v[7],
            fc1_weight: v[8],
            fc1_bias: v[9],
            fc2_weight: v[10],
            fc2_bias: v[11],
        }
    }
}

/// Patch tokens with a prepended class token and positional embeddings:
/// `[num_patches + 1, embed_dim]`.
pub fn patch_embed<T: Element>(
    tape: &mut Tape<T>,
    cfg: &BackboneConfig,
    vars: &[Var],
    image: &Image,
) -> Result<Var> {
    let want = (cfg.image_size, cfg.image_size, cfg.channels);
    if image.dims() != want {
        return Err(Error::Shape {
            context: "patch_embed".into(),
            expected: format!("{want:?}"),
            actual: format!("{:?}", image.dims()),
        });
    }
    let p = cfg.patch_size;
    let side = cfg.image_size / p;
    let mut rows = Vec::with_capacity(cfg.num_patches() * cfg.patch_dim());
    for py in 0..side {
        for px in 0..side {
            for dy in 0..p {
                let y = py * p + dy;
                let start = (y * cfg.image_size + px * p) * cfg.channels;
                rows.extend(
                    image.data()[start..start + p * cfg.channels]
                        .iter()
                        .map(|&v| T::from_f64_lossy(v as f64)),
                );
            }
        }
    }
    let patches = tape.constant(Tensor::new([cfg.num_patches(), cfg.patch_dim()], rows)?);
    let proj = tape.matmul(patches, vars[PATCH_W])?;
    let proj = tape.add(proj, vars[PATCH_B])?;
    let tokens = tape.concat(&[vars[CLS], proj], 0)?;
    Ok(tape.add(tokens, vars[POS])?)
}

/// Pre-norm attention sub-block `h + Proj(MSA(LN(h)))` where keys and values
/// are prefixed by `prefix` while queries come from `h` only, so the token
/// count is unchanged. Prefixes are split across heads the same way as the
/// projected keys and values.
pub fn msa_prefix<T: Element>(
    tape: &mut Tape<T>,
    h: Var,
    prefix: Option<(Var, Var)>,
    block: &BlockVars,
    heads: usize,
) -> Result<Var> {
    let m = tape.shape(h)[1];
    if let Some((pk, pv)) = prefix {
        let (sk, sv) = (tape.shape(pk).to_vec(), tape.shape(pv).to_vec());
        if sk.len() != 2 || sk != sv || sk[1] != m {
            return Err(Error::Shape {
                context: "msa_prefix".into(),
                expected: format!("key/value prefixes [l, {m}] of equal length"),
                actual: format!("{sk:?} / {sv:?}"),
            });
        }
    }
    let d = m / heads;
    let scale = T::one() / T::from_usize(d).unwrap().sqrt();

    let x = tape.layer_norm(h, block.ln1_gamma, block.ln1_beta)?;
    let qkv = tape.matmul(x, block.qkv_weight)?;
    let qkv = tape.add(qkv, block.qkv_bias)?;
    let mut head_outputs = Vec::with_capacity(heads);
    for head in 0..heads {
        let q = tape.slice(qkv, 1, head * d, d)?;
        let mut k = tape.slice(qkv, 1, m + head * d, d)?;
        let mut v = tape.slice(qkv, 1, 2 * m + head * d, d)?;
        if let Some((pk, pv)) = prefix {
            let pk_h = tape.slice(pk, 1, head * d, d)?;
            let pv_h = tape.slice(pv, 1, head * d, d)?;
            k = tape.concat(&[pk_h, k], 0)?;
            v = tape.concat(&[pv_h, v], 0)?;
        }
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, scale)?;
        let attn = tape.softmax(scores)?;
        head_outputs.push(tape.matmul(attn, v)?);
    }
    let merged = if heads == 1 {
        head_outputs[0]
    } else {
        tape.concat(&head_outputs, 1)?
    };
    let out = tape.matmul(merged, block.proj_weight)?;
    let out = tape.add(out, block.proj_bias)?;
    Ok(tape.add(h, out)?)
}

fn mlp<T: Element>(tape: &mut Tape<T>, h: Var, block: &BlockVars) -> Result<Var> {
    let x = tape.layer_norm(h, block.ln2_gamma, block.ln2_beta)?;
    let x = tape.matmul(x, block.fc1_weight)?;
    let x = tape.add(x, block.fc1_bias)?;
    let x = tape.gelu(x)?;
    let x = tape.matmul(x, block.fc2_weight)?;
    let x = tape.add(x, block.fc2_bias)?;
    Ok(tape.add(h, x)?)
}

/// Configuration plus weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub params: BackboneParams,
}

impl Backbone {
    pub fn new<R: Rng + ?Sized>(config: BackboneConfig, rng: &mut R) -> Result<Self> {
        let params = BackboneParams::init(&config, rng)?;
        Ok(Self { config, params })
    }

    pub fn from_checkpoint<R: Read>(config: BackboneConfig, reader: R) -> Result<Self> {
        let params = BackboneParams::from_reader(&config, reader)?;
        Ok(Self { config, params })
    }

    pub fn bind<T: Element>(&self, tape: &mut Tape<T>, trainable: Trainable) -> Vec<Var> {
        self.params.bind(tape, trainable)
    }

    fn check_plan(&self, prompt: Option<&PrefixVars>, layers: &[usize], what: &str) -> Result<()> {
        if let Some(p) = prompt {
            let mut want: Vec<usize> = layers.to_vec();
            want.sort_unstable();
            let got: Vec<usize> = p.blocks.keys().copied().collect();
            if got != want {
                return Err(Error::PromptLayout(format!("{what} covers layers {got:?}, plan is {want:?}")));
            }
        }
        Ok(())
    }

    /// Logits `[1, num_classes]` for one image. `vars` comes from
    /// [`Backbone::bind`] on the same tape.
    pub fn forward<T: Element>(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        image: &Image,
        dip: Option<&PrefixVars>,
        dsp: Option<&PrefixVars>,
    ) -> Result<Var> {
        let cfg = &self.config;
        self.check_plan(dip, &cfg.dip_layers, "domain-invariant prompt")?;
        self.check_plan(dsp, &cfg.dsp_layers, "domain-specific prompt")?;
        let mut h = patch_embed(tape, cfg, vars, image)?;
        for layer in 1..=cfg.depth {
            let base = BLOCK_BASE + (layer - 1) * BLOCK_FIELDS;
            let block = BlockVars::from_slice(&vars[base..base + BLOCK_FIELDS]);
            let prefix = dip
                .and_then(|p| p.blocks.get(&layer))
                .or_else(|| dsp.and_then(|p| p.blocks.get(&layer)))
                .copied();
            h = msa_prefix(tape, h, prefix, &block, cfg.heads)?;
            h = mlp(tape, h, &block)?;
        }
        let norm = self.params.norm_index();
        let cls = tape.slice(h, 0, 0, 1)?;
        let cls = tape.layer_norm(cls, vars[norm], vars[norm + 1])?;
        let head = self.params.head_index();
        let logits = tape.matmul(cls, vars[head])?;
        Ok(tape.add(logits, vars[head + 1])?)
    }

    /// Gradient-free logits for one image.
    pub fn logits(&self, image: &Image, dip: Option<&Prompt>, dsp: Option<&Prompt>) -> Result<Vec<f32>> {
        let mut tape = Tape::<f32>::new();
        let vars = self.bind(&mut tape, Trainable::NONE);
        let dip = dip.map(|p| p.bind(&mut tape, false));
        let dsp = dsp.map(|p| p.bind(&mut tape, false));
        let out = self.forward(&mut tape, &vars, image, dip.as_ref(), dsp.as_ref())?;
        Ok(tape.value(out).data().to_vec())
    }

    pub fn predict(&self, image: &Image, dip: Option<&Prompt>, dsp: Option<&Prompt>) -> Result<usize> {
        Ok(argmax(&self.logits(image, dip, dsp)?))
    }
}

/// Index of the largest value, lowest index on ties.
pub(crate) fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
