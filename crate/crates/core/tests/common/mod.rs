#![allow(dead_code)]

//! Independent oracles and tiny fixtures shared by the integration tests and
//! the acceptance harness.

use dipt_core::backbone::{Backbone, BackboneConfig, BlockVars, Trainable};
use dipt_core::diffcore::{grad_check, Tape, Tensor, TensorError, Var};
use dipt_core::fourier::{amplitude, average_amplitude};
use dipt_core::gat::{refine_on_tape, GatParams};
use dipt_core::prompts::{prefix_from_flat, Prompt, PromptBank, PromptKind};
use dipt_core::raster::Image;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

pub fn random_image<R: Rng>(h: usize, w: usize, c: usize, rng: &mut R) -> Image {
    Image::new(h, w, c, (0..h * w * c).map(|_| rng.random::<f32>()).collect()).unwrap()
}

/// m=8, depth 2, 2 heads, one DIP layer and one DSP layer, `L = 32`.
pub fn tiny_config() -> BackboneConfig {
    BackboneConfig {
        image_size: 16,
        patch_size: 8,
        embed_dim: 8,
        depth: 2,
        heads: 2,
        mlp_ratio: 2,
        dip_layers: vec![1],
        dsp_layers: vec![2],
        prompt_half_len: 2,
        ..BackboneConfig::default()
    }
}

fn as_tensor_error(e: dipt_core::error::Error) -> TensorError {
    TensorError::InvalidArgument(e.to_string())
}

// ---------------------------------------------------------------------------
// brute-force metric oracles

pub fn naive_bwt(r: &[Vec<f64>], n: usize) -> f64 {
    let mut s = 0.0;
    let mut count = 0usize;
    for i in 2..=n {
        for j in 1..i {
            s += r[i - 1][j - 1] - r[j - 1][j - 1];
            count += 1;
        }
    }
    s / count as f64
}

pub fn naive_il(r: &[Vec<f64>], n: usize) -> f64 {
    let mut s = 0.0;
    let mut count = 0usize;
    for i in 1..=n {
        for j in 1..=i {
            s += r[i - 1][j - 1];
            count += 1;
        }
    }
    s / count as f64
}

pub fn naive_ftu(r: &[Vec<f64>], n: usize) -> f64 {
    let mut s = 0.0;
    let mut count = 0usize;
    for i in 1..=n {
        for j in i + 1..=n {
            s += r[i - 1][j - 1];
            count += 1;
        }
    }
    s / count as f64
}

pub fn naive_ms(theta: &[u64]) -> f64 {
    let ratios: Vec<f64> = theta.iter().map(|&t| theta[0] as f64 / t as f64).collect();
    let m = ratios.iter().sum::<f64>() / ratios.len() as f64;
    if m > 1.0 {
        1.0
    } else {
        m
    }
}

pub fn naive_aams(theta: &[u64]) -> f64 {
    let mut s = 0.0;
    for &t in theta {
        s += (t as i128 - theta[0] as i128).abs() as f64;
    }
    s / theta.len() as f64
}

// ---------------------------------------------------------------------------
// dense attention oracle

/// Raw parameters of one attention sub-block in `f64`.
pub struct RawBlock {
    pub ln_g: Vec<f64>,
    pub ln_b: Vec<f64>,
    /// `[m, 3m]` row-major.
    pub qkv_w: Vec<f64>,
    pub qkv_b: Vec<f64>,
    /// `[m, m]` row-major.
    pub proj_w: Vec<f64>,
    pub proj_b: Vec<f64>,
}

impl RawBlock {
    pub fn random<R: Rng>(m: usize, rng: &mut R) -> Self {
        let mut v = |n: usize, scale: f64| (0..n).map(|_| scale * rng.random_range(-1.0..1.0)).collect::<Vec<_>>();
        Self {
            ln_g: v(m, 1.0).iter().map(|x| 1.0 + 0.5 * x).collect(),
            ln_b: v(m, 0.3),
            qkv_w: v(m * 3 * m, 0.5),
            qkv_b: v(3 * m, 0.2),
            proj_w: v(m * m, 0.5),
            proj_b: v(m, 0.2),
        }
    }

    /// Places the block on a tape. The MLP fields are unused by the
    /// attention sub-block and get placeholders.
    pub fn bind(&self, tape: &mut Tape<f64>, m: usize) -> BlockVars {
        let mut leaf = |shape: &[usize], data: &[f64]| tape.leaf(Tensor::new(shape.to_vec(), data.to_vec()).unwrap(), false);
        let ln1_gamma = leaf(&[m], &self.ln_g);
        let ln1_beta = leaf(&[m], &self.ln_b);
        let qkv_weight = leaf(&[m, 3 * m], &self.qkv_w);
        let qkv_bias = leaf(&[3 * m], &self.qkv_b);
        let proj_weight = leaf(&[m, m], &self.proj_w);
        let proj_bias = leaf(&[m], &self.proj_b);
        let unused = leaf(&[1], &[0.0]);
        BlockVars {
            ln1_gamma,
            ln1_beta,
            qkv_weight,
            qkv_bias,
            proj_weight,
            proj_bias,
            ln2_gamma: unused,
            ln2_beta: unused,
            fc1_weight: unused,
            fc1_bias: unused,
            fc2_weight: unused,
            fc2_bias: unused,
        }
    }
}

/// Pre-norm attention with an explicit `(l + n) × n` score matrix per head,
/// written with plain loops.
pub fn dense_attention(
    h: &[f64],
    n: usize,
    m: usize,
    prefix: Option<(&[f64], &[f64], usize)>,
    block: &RawBlock,
    heads: usize,
) -> Vec<f64> {
    let mut x = vec![0.0; n * m];
    for t in 0..n {
        let row = &h[t * m..(t + 1) * m];
        let mean = row.iter().sum::<f64>() / m as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
        for c in 0..m {
            x[t * m + c] = (row[c] - mean) / (var + 1e-5).sqrt() * block.ln_g[c] + block.ln_b[c];
        }
    }
    let mut q = vec![vec![0.0; m]; n];
    let mut k = Vec::new();
    let mut v = Vec::new();
    let l = prefix.map_or(0, |p| p.2);
    if let Some((pk, pv, l)) = prefix {
        for t in 0..l {
            k.push(pk[t * m..(t + 1) * m].to_vec());
            v.push(pv[t * m..(t + 1) * m].to_vec());
        }
    }
    for t in 0..n {
        let mut proj = vec![0.0; 3 * m];
        for o in 0..3 * m {
            let mut s = block.qkv_b[o];
            for i in 0..m {
                s += x[t * m + i] * block.qkv_w[i * 3 * m + o];
            }
            proj[o] = s;
        }
        q[t] = proj[..m].to_vec();
        k.push(proj[m..2 * m].to_vec());
        v.push(proj[2 * m..].to_vec());
    }
    let d = m / heads;
    let mut merged = vec![0.0; n * m];
    for hd in 0..heads {
        for t in 0..n {
            let mut scores = vec![0.0; l + n];
            for (s, kr) in scores.iter_mut().zip(&k) {
                *s = (0..d).map(|c| q[t][hd * d + c] * kr[hd * d + c]).sum::<f64>() / (d as f64).sqrt();
            }
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..d {
                merged[t * m + hd * d + c] = e.iter().zip(&v).map(|(w, vr)| w / z * vr[hd * d + c]).sum();
            }
        }
    }
    let mut out = h.to_vec();
    for t in 0..n {
        for o in 0..m {
            let mut s = block.proj_b[o];
            for i in 0..m {
                s += merged[t * m + i] * block.proj_w[i * m + o];
            }
            out[t * m + o] += s;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// graph attention oracle

/// Star-graph refine with scalar loops: `e = leaky(a_c·Wu + a_n·Wv)`,
/// softmax, then the α-weighted sum of `W·node`.
pub fn scalar_refine(w: &[f32], a: &[f32], dip: &[f32], dsps: &[Vec<f32>]) -> Vec<f64> {
    let l = dip.len();
    let apply = |x: &[f32]| -> Vec<f64> {
        (0..l)
            .map(|r| (0..l).map(|c| w[r * l + c] as f64 * x[c] as f64).sum())
            .collect()
    };
    let wu = apply(dip);
    let nodes: Vec<Vec<f64>> = std::iter::once(wu.clone()).chain(dsps.iter().map(|p| apply(p))).collect();
    let center: f64 = (0..l).map(|i| a[i] as f64 * wu[i]).sum();
    let e: Vec<f64> = nodes
        .iter()
        .map(|wv| {
            let s = center + (0..l).map(|i| a[l + i] as f64 * wv[i]).sum::<f64>();
            if s > 0.0 {
                s
            } else {
                0.2 * s
            }
        })
        .collect();
    let mx = e.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ex: Vec<f64> = e.iter().map(|x| (x - mx).exp()).collect();
    let z: f64 = ex.iter().sum();
    let mut out = vec![0.0; l];
    for (alpha, node) in ex.iter().map(|x| x / z).zip(&nodes) {
        for i in 0..l {
            out[i] += alpha * node[i];
        }
    }
    out
}

// ---------------------------------------------------------------------------
// end-to-end gradient checks on the tiny model

pub struct TinyWorld {
    pub model: Backbone,
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub dip: Prompt,
    pub bank: PromptBank,
}

/// A random tiny model with a two-entry bank over random 16×16 images.
pub fn tiny_world(seed: u64) -> TinyWorld {
    let mut r = rng(seed);
    let cfg = tiny_config();
    let mut model = Backbone::new(cfg.clone(), &mut r).unwrap();
    model.params.freeze_trunk();
    let images: Vec<Image> = (0..4).map(|_| random_image(16, 16, 3, &mut r)).collect();
    let labels = vec![0, 1, 1, 0];
    let dip = Prompt::init(PromptKind::Dip, &cfg, &mut r);
    let mut bank = PromptBank::new();
    for t in 0..2 {
        let key = average_amplitude(&images[2 * t..2 * t + 2], t + 1).unwrap();
        bank.append_entry(&cfg, key, Prompt::init(PromptKind::Dsp, &cfg, &mut r)).unwrap();
    }
    bank.set_dip(&cfg, dip.clone()).unwrap();
    TinyWorld {
        model,
        images,
        labels,
        dip,
        bank,
    }
}

fn flat64(p: &Prompt) -> Vec<f64> {
    p.flatten().iter().map(|&v| v as f64).collect()
}

/// Joint step-one loss over `[DIP | DSP | head W | head b]`.
pub fn step_one_grad_error(world: &TinyWorld, h: f64) -> f64 {
    let cfg = &world.model.config;
    let len = PromptKind::Dip.flat_len(cfg);
    let head = world.model.params.head_index();
    let hw = world.model.params.tensors().nth(head).unwrap().1.clone();
    let hb = world.model.params.tensors().nth(head + 1).unwrap().1.clone();
    let dsp = &world.bank.entries()[0].dsp;
    let mut point = flat64(&world.dip);
    point.extend(flat64(dsp));
    point.extend(hw.data().iter().map(|&v| v as f64));
    point.extend(hb.data().iter().map(|&v| v as f64));
    let n = point.len();
    let point = Tensor::new([n], point).unwrap();
    let f = |tape: &mut Tape<f64>, x: Var| -> Result<Var, TensorError> {
        let mut vars = world.model.bind(tape, Trainable::NONE);
        let dip_flat = tape.slice(x, 0, 0, len)?;
        let dsp_flat = tape.slice(x, 0, len, len)?;
        let w = tape.slice(x, 0, 2 * len, hw.numel())?;
        vars[head] = tape.reshape(w, hw.shape())?;
        vars[head + 1] = tape.slice(x, 0, 2 * len + hw.numel(), hb.numel())?;
        let dip = prefix_from_flat(tape, dip_flat, PromptKind::Dip, cfg).map_err(as_tensor_error)?;
        let dsp = prefix_from_flat(tape, dsp_flat, PromptKind::Dsp, cfg).map_err(as_tensor_error)?;
        batch_ce(tape, world, &vars, Some(&dip), |_| Some(dsp.clone()))
    };
    grad_check(f, &point, h).unwrap()
}

/// Fresh-DSP loss with the previous DIP fixed.
pub fn dsp_grad_error(world: &TinyWorld, h: f64) -> f64 {
    let cfg = &world.model.config;
    let point = Tensor::new([PromptKind::Dsp.flat_len(cfg)], flat64(&world.bank.entries()[1].dsp)).unwrap();
    let f = |tape: &mut Tape<f64>, x: Var| -> Result<Var, TensorError> {
        let vars = world.model.bind(tape, Trainable::NONE);
        let dip = world.dip.bind(tape, false);
        let dsp = prefix_from_flat(tape, x, PromptKind::Dsp, cfg).map_err(as_tensor_error)?;
        batch_ce(tape, world, &vars, Some(&dip), |_| Some(dsp.clone()))
    };
    grad_check(f, &point, h).unwrap()
}

/// Graph-refining loss over `[W | a]`, each sample paired with the DSP its
/// amplitude retrieves.
pub fn gat_grad_error(world: &TinyWorld, params: &GatParams, h: f64) -> f64 {
    let cfg = &world.model.config;
    let l = params.node_len();
    let mut point: Vec<f64> = params.w.data().iter().map(|&v| v as f64).collect();
    point.extend(params.a.data().iter().map(|&v| v as f64));
    let point = Tensor::new([l * l + 2 * l], point).unwrap();
    let mut nodes = flat64(&world.dip);
    for e in world.bank.entries() {
        nodes.extend(flat64(&e.dsp));
    }
    let nodes = Tensor::new([1 + world.bank.entries().len(), l], nodes).unwrap();
    let choices: Vec<usize> = world
        .images
        .iter()
        .map(|img| world.bank.select_dsp(&amplitude(img).unwrap()).unwrap())
        .collect();
    let f = |tape: &mut Tape<f64>, x: Var| -> Result<Var, TensorError> {
        let vars = world.model.bind(tape, Trainable::NONE);
        let w = tape.slice(x, 0, 0, l * l)?;
        let w = tape.reshape(w, &[l, l])?;
        let a = tape.slice(x, 0, l * l, 2 * l)?;
        let nv = tape.constant(nodes.clone());
        let flat = refine_on_tape(tape, w, a, nv).map_err(as_tensor_error)?;
        let dip = prefix_from_flat(tape, flat, PromptKind::Dip, cfg).map_err(as_tensor_error)?;
        let dsps: Vec<_> = world.bank.entries().iter().map(|e| e.dsp.bind(tape, false)).collect();
        batch_ce(tape, world, &vars, Some(&dip), |i| Some(dsps[choices[i]].clone()))
    };
    grad_check(f, &point, h).unwrap()
}

fn batch_ce(
    tape: &mut Tape<f64>,
    world: &TinyWorld,
    vars: &[Var],
    dip: Option<&dipt_core::backbone::PrefixVars>,
    dsp_for: impl Fn(usize) -> Option<dipt_core::backbone::PrefixVars>,
) -> Result<Var, TensorError> {
    let mut logits = Vec::new();
    for (i, img) in world.images.iter().enumerate() {
        let dsp = dsp_for(i);
        logits.push(world.model.forward(tape, vars, img, dip, dsp.as_ref()).map_err(as_tensor_error)?);
    }
    let stacked = tape.concat(&logits, 0)?;
    tape.cross_entropy(stacked, &world.labels)
}

/// Perturbed GAT parameters so that attention is not uniform.
pub fn random_gat_params<R: Rng>(l: usize, rng: &mut R) -> GatParams {
    let mut p = GatParams::init(l, rng);
    for v in p.a.data_mut() {
        *v = rng.random_range(-0.5..0.5);
    }
    p
}

// ---------------------------------------------------------------------------
// primitive gradient checks

/// One randomized `grad_check` per primitive at the given step. Shapes are
/// drawn with every axis ≤ `max_axis`.
pub fn primitive_errors<R: Rng>(rng: &mut R, max_axis: usize, h: f64) -> Vec<(&'static str, f64)> {
    let mut dim = |lo: usize| rng.random_range(lo..=max_axis.max(lo));
    let (r, c, k) = (dim(1), dim(2), dim(1));
    let mut out = Vec::new();
    let mut check = |name: &'static str, shape: &[usize], f: &dyn Fn(&mut Tape<f64>, Var) -> Result<Var, TensorError>, rng: &mut R| {
        let p = random_tensor(shape, rng);
        out.push((name, grad_check(f, &p, h).unwrap()));
    };
    let wmat = random_tensor(&[c, k], rng);
    let other = random_tensor(&[r, c], rng);
    let bias = random_tensor(&[c], rng);
    let weights = random_tensor(&[r, c], rng);
    let labels: Vec<usize> = (0..r).map(|_| rng.random_range(0..c)).collect();
    // Weighted sums give every output coordinate its own cotangent.
    let reduce = |tape: &mut Tape<f64>, y: Var| -> Result<Var, TensorError> {
        let shape = tape.shape(y).to_vec();
        let n: usize = shape.iter().product();
        let wts = Tensor::from_fn(shape, |i| ((i * 7919) % 13) as f64 / 13.0 - 0.4 + 1e-3 * n as f64);
        let wv = tape.constant(wts);
        let p = tape.mul(y, wv)?;
        tape.sum(p)
    };
    check("matmul", &[r, c], &|t, x| {
        let w = t.constant(wmat.clone());
        let y = t.matmul(x, w)?;
        reduce(t, y)
    }, rng);
    check("matmul_rhs", &[c, k], &|t, x| {
        let a = t.constant(other.clone());
        let y = t.matmul(a, x)?;
        reduce(t, y)
    }, rng);
    check("add_broadcast", &[c], &|t, x| {
        let a = t.constant(other.clone());
        let y = t.add(a, x)?;
        reduce(t, y)
    }, rng);
    check("mul", &[r, c], &|t, x| {
        let a = t.constant(weights.clone());
        let y = t.mul(x, a)?;
        let y = t.mul(y, x)?;
        reduce(t, y)
    }, rng);
    check("scale", &[r, c], &|t, x| {
        let y = t.scale(x, -1.7)?;
        reduce(t, y)
    }, rng);
    check("concat", &[r, c], &|t, x| {
        let a = t.constant(other.clone());
        let y = t.concat(&[a, x, a], 0)?;
        let y = t.mul(y, y)?;
        reduce(t, y)
    }, rng);
    check("slice", &[r, c], &|t, x| {
        let y = t.slice(x, 1, 1, c - 1)?;
        let y = t.mul(y, y)?;
        reduce(t, y)
    }, rng);
    check("reshape", &[r, c], &|t, x| {
        let y = t.reshape(x, &[c, r])?;
        let w = t.constant(random_like(&[r, k]));
        let y = t.matmul(y, w)?;
        reduce(t, y)
    }, rng);
    check("transpose", &[r, c], &|t, x| {
        let y = t.transpose(x)?;
        let w = t.constant(random_like(&[r, k]));
        let y = t.matmul(y, w)?;
        reduce(t, y)
    }, rng);
    check("softmax", &[r, c], &|t, x| {
        let y = t.softmax(x)?;
        reduce(t, y)
    }, rng);
    check("layer_norm", &[r, c], &|t, x| {
        let g = t.constant(bias.clone());
        let b = t.constant(bias.clone());
        let y = t.layer_norm(x, g, b)?;
        reduce(t, y)
    }, rng);
    check("layer_norm_affine", &[c], &|t, x| {
        let a = t.constant(other.clone());
        let y = t.layer_norm(a, x, x)?;
        reduce(t, y)
    }, rng);
    check("gelu", &[r, c], &|t, x| {
        let y = t.gelu(x)?;
        reduce(t, y)
    }, rng);
    check("leaky_relu", &[r, c], &|t, x| {
        let y = t.leaky_relu(x, 0.2)?;
        reduce(t, y)
    }, rng);
    check("cross_entropy", &[r, c], &|t, x| t.cross_entropy(x, &labels), rng);
    check("mean", &[r, c], &|t, x| {
        let y = t.mul(x, x)?;
        t.mean(y)
    }, rng);
    out
}

fn random_like(shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_fn(shape.to_vec(), |i| ((i * 37 + n) % 11) as f64 / 11.0 - 0.5)
}
