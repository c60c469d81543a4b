//! Key/value prefix prompts and the prompt bank.

mod bank;

use std::collections::BTreeMap;
use std::hash::{DefaultHasher, Hash, Hasher};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, PrefixVars};
use crate::diffcore::{Element, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub use bank::{BankEntry, BankSidecar, PromptBank};

/// Half-width of the uniform prompt initialization.
pub const INIT_BOUND: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptKind {
    /// Shared across domains.
    Dip,
    /// One per domain.
    Dsp,
}

impl PromptKind {
    pub fn layers(self, cfg: &BackboneConfig) -> Vec<usize> {
        let mut layers = match self {
            PromptKind::Dip => cfg.dip_layers.clone(),
            PromptKind::Dsp => cfg.dsp_layers.clone(),
        };
        layers.sort_unstable();
        layers
    }

    /// Length of the flattened vector of a prompt of this kind.
    pub fn flat_len(self, cfg: &BackboneConfig) -> usize {
        self.layers(cfg).len() * 2 * cfg.prompt_half_len * cfg.embed_dim
    }
}

/// Per-layer `(key prefix, value prefix)` pairs, each `[half_len, width]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Prompt {
    pub kind: PromptKind,
    pub half_len: usize,
    pub width: usize,
    pub blocks: BTreeMap<usize, (Tensor, Tensor)>,
}

impl Prompt {
    /// Fresh prompt with entries drawn i.i.d. from `U(-0.05, 0.05)`.
    pub fn init<R: Rng + ?Sized>(kind: PromptKind, cfg: &BackboneConfig, rng: &mut R) -> Self {
        let (l, m) = (cfg.prompt_half_len, cfg.embed_dim);
        let blocks = kind
            .layers(cfg)
            .into_iter()
            .map(|layer| {
                let k = Tensor::uniform([l, m], -INIT_BOUND, INIT_BOUND, rng);
                let v = Tensor::uniform([l, m], -INIT_BOUND, INIT_BOUND, rng);
                (layer, (k, v))
            })
            .collect();
        Self {
            kind,
            half_len: l,
            width: m,
            blocks,
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.blocks.len() * 2 * self.half_len * self.width
    }

    /// Ascending layer, key before value, row-major.
    pub fn flatten(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.num_parameters());
        for (k, v) in self.blocks.values() {
            out.extend_from_slice(k.data());
            out.extend_from_slice(v.data());
        }
        out
    }

    pub fn unflatten(kind: PromptKind, cfg: &BackboneConfig, flat: &[f32]) -> Result<Self> {
        let want = kind.flat_len(cfg);
        if flat.len() != want {
            return Err(Error::Shape {
                context: "unflatten prompt".into(),
                expected: format!("{want} values"),
                actual: format!("{}", flat.len()),
            });
        }
        let (l, m) = (cfg.prompt_half_len, cfg.embed_dim);
        let mut chunks = flat.chunks_exact(l * m);
        let blocks = kind
            .layers(cfg)
            .into_iter()
            .map(|layer| {
                let k = Tensor::new([l, m], chunks.next().unwrap().to_vec()).expect("chunk size");
                let v = Tensor::new([l, m], chunks.next().unwrap().to_vec()).expect("chunk size");
                (layer, (k, v))
            })
            .collect();
        Ok(Self {
            kind,
            half_len: l,
            width: m,
            blocks,
        })
    }

    /// Checks the layer plan and block shapes against `cfg`.
    pub fn validate(&self, cfg: &BackboneConfig) -> Result<()> {
        let layers: Vec<usize> = self.blocks.keys().copied().collect();
        if layers != self.kind.layers(cfg) {
            return Err(Error::PromptLayout(format!(
                "{:?} prompt covers layers {layers:?}, plan is {:?}",
                self.kind,
                self.kind.layers(cfg)
            )));
        }
        let want = [cfg.prompt_half_len, cfg.embed_dim];
        for (layer, (k, v)) in &self.blocks {
            if k.shape() != want || v.shape() != want {
                return Err(Error::Shape {
                    context: format!("prompt block at layer {layer}"),
                    expected: format!("{want:?}"),
                    actual: format!("{:?} / {:?}", k.shape(), v.shape()),
                });
            }
        }
        Ok(())
    }

    /// Places the prompt on `tape`. Returns the prefixes and the leaves in
    /// flatten order.
    pub fn bind_with_leaves<T: Element>(&self, tape: &mut Tape<T>, requires_grad: bool) -> (PrefixVars, Vec<Var>) {
        let mut prefix = PrefixVars::default();
        let mut leaves = Vec::with_capacity(2 * self.blocks.len());
        for (&layer, (k, v)) in &self.blocks {
            let kv = tape.leaf(T::lift(k), requires_grad);
            let vv = tape.leaf(T::lift(v), requires_grad);
            leaves.extend([kv, vv]);
            prefix.blocks.insert(layer, (kv, vv));
        }
        (prefix, leaves)
    }

    pub fn bind<T: Element>(&self, tape: &mut Tape<T>, requires_grad: bool) -> PrefixVars {
        self.bind_with_leaves(tape, requires_grad).0
    }

    /// Mutable tensors in flatten order.
    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.blocks.values_mut().flat_map(|(k, v)| [k, v])
    }

    pub fn named_tensors(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        self.blocks
            .iter()
            .flat_map(|(layer, (k, v))| [(format!("{prefix}/L{layer}/k"), k), (format!("{prefix}/L{layer}/v"), v)])
            .collect()
    }

    /// Inverse of [`Prompt::named_tensors`]. `None` if any block is absent.
    pub fn from_tensors(
        kind: PromptKind,
        cfg: &BackboneConfig,
        prefix: &str,
        tensors: &BTreeMap<String, Tensor>,
    ) -> Result<Option<Self>> {
        let mut blocks = BTreeMap::new();
        for layer in kind.layers(cfg) {
            let k = tensors.get(&format!("{prefix}/L{layer}/k"));
            let v = tensors.get(&format!("{prefix}/L{layer}/v"));
            let (Some(k), Some(v)) = (k, v) else {
                return Ok(None);
            };
            blocks.insert(layer, (k.clone(), v.clone()));
        }
        let p = Prompt {
            kind,
            half_len: cfg.prompt_half_len,
            width: cfg.embed_dim,
            blocks,
        };
        p.validate(cfg)?;
        Ok(Some(p))
    }

    pub fn checksum(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.kind.hash(&mut h);
        for (layer, (k, v)) in &self.blocks {
            layer.hash(&mut h);
            for x in k.data().iter().chain(v.data()) {
                x.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }
}

/// Splits a flat `[L]` tape variable into prefix blocks laid out like
/// [`Prompt::flatten`].
pub fn prefix_from_flat<T: Element>(
    tape: &mut Tape<T>,
    flat: Var,
    kind: PromptKind,
    cfg: &BackboneConfig,
) -> Result<PrefixVars> {
    let want = kind.flat_len(cfg);
    if tape.shape(flat) != [want] {
        return Err(Error::Shape {
            context: "prefix_from_flat".into(),
            expected: format!("[{want}]"),
            actual: format!("{:?}", tape.shape(flat)),
        });
    }
    let (l, m) = (cfg.prompt_half_len, cfg.embed_dim);
    let mut prefix = PrefixVars::default();
    for (i, layer) in kind.layers(cfg).into_iter().enumerate() {
        let k = tape.slice(flat, 0, 2 * i * l * m, l * m)?;
        let v = tape.slice(flat, 0, (2 * i + 1) * l * m, l * m)?;
        let k = tape.reshape(k, &[l, m])?;
        let v = tape.reshape(v, &[l, m])?;
        prefix.blocks.insert(layer, (k, v));
    }
    Ok(prefix)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_dsp_shape() {
        let cfg = BackboneConfig::default();
        let p = Prompt::init(PromptKind::Dsp, &cfg, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(p.blocks.keys().copied().collect::<Vec<_>>(), vec![3, 4]);
        assert_eq!(p.blocks[&3].0.shape(), &[5, 64]);
        assert_eq!(p.num_parameters(), 1280);
        assert_eq!(p.flatten().len(), 1280);
        assert!(p.flatten().iter().all(|v| v.abs() < 0.05));
        p.validate(&cfg).unwrap();
    }

    #[test]
    fn init_is_seeded() {
        let cfg = BackboneConfig::default();
        let a = Prompt::init(PromptKind::Dip, &cfg, &mut ChaCha8Rng::seed_from_u64(9));
        let b = Prompt::init(PromptKind::Dip, &cfg, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn flatten_round_trip_and_order() {
        let cfg = BackboneConfig {
            embed_dim: 4,
            heads: 2,
            prompt_half_len: 2,
            ..Default::default()
        };
        let p = Prompt::init(PromptKind::Dip, &cfg, &mut ChaCha8Rng::seed_from_u64(2));
        let flat = p.flatten();
        assert_eq!(&flat[..8], p.blocks[&1].0.data());
        assert_eq!(&flat[8..16], p.blocks[&1].1.data());
        assert_eq!(&flat[16..24], p.blocks[&2].0.data());
        assert_eq!(Prompt::unflatten(PromptKind::Dip, &cfg, &flat).unwrap(), p);
        assert!(Prompt::unflatten(PromptKind::Dip, &cfg, &flat[1..]).is_err());
    }

    #[test]
    fn tape_split_matches_unflatten() {
        let cfg = BackboneConfig {
            embed_dim: 4,
            heads: 2,
            prompt_half_len: 3,
            ..Default::default()
        };
        let p = Prompt::init(PromptKind::Dsp, &cfg, &mut ChaCha8Rng::seed_from_u64(5));
        let mut tape = Tape::<f32>::new();
        let flat = tape.constant(Tensor::new([p.num_parameters()], p.flatten()).unwrap());
        let prefix = prefix_from_flat(&mut tape, flat, PromptKind::Dsp, &cfg).unwrap();
        for (layer, (k, v)) in &p.blocks {
            let (kv, vv) = prefix.blocks[layer];
            assert_eq!(tape.value(kv), k);
            assert_eq!(tape.value(vv), v);
        }
    }
}
