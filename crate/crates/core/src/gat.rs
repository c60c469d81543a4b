//! Single-head graph attention over the prompt graph. The graph is a star
//! centered on the domain-invariant prompt: only DIP-centered coefficients
//! are computed, and the refined DIP is the attention-weighted sum of the
//! transformed nodes with no output nonlinearity.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, Trainable};
use crate::diffcore::{Adam, AdamParam, Element, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::fourier::{amplitude, style_augment};
use crate::prompts::{prefix_from_flat, Prompt, PromptBank, PromptKind};
use crate::raster::{Dataset, Image};

pub const LEAKY_SLOPE: f32 = 0.2;
/// Standard deviation of the noise added to the identity when initializing `W`.
pub const W_INIT_STD: f64 = 0.01;

/// `W` is `[L, L]`, `a` is `[2L]` with the center half first.
#[derive(Clone, Debug, PartialEq)]
pub struct GatParams {
    pub w: Tensor,
    pub a: Tensor,
}

impl GatParams {
    /// `W = I + N(0, 0.01²)`, `a = 0`.
    pub fn init<R: Rng + ?Sized>(l: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, W_INIT_STD).expect("valid std");
        let w = Tensor::from_fn([l, l], |i| {
            let eye = if i / l == i % l { 1.0 } else { 0.0 };
            (eye + normal.sample(rng)) as f32
        });
        Self {
            w,
            a: Tensor::zeros([2 * l]),
        }
    }

    /// `W = I`, `a = 0`.
    pub fn identity(l: usize) -> Self {
        Self {
            w: Tensor::from_fn([l, l], |i| if i / l == i % l { 1.0 } else { 0.0 }),
            a: Tensor::zeros([2 * l]),
        }
    }

    pub fn node_len(&self) -> usize {
        self.w.shape()[0]
    }
}

/// Flattened prompts: the previous DIP at the center and one node per DSP.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptGraph {
    pub dip_node: Vec<f32>,
    pub dsp_nodes: Vec<Vec<f32>>,
}

impl PromptGraph {
    pub fn new(previous_dip: &Prompt, bank: &PromptBank) -> Result<Self> {
        let graph = Self {
            dip_node: previous_dip.flatten(),
            dsp_nodes: bank.entries().iter().map(|e| e.dsp.flatten()).collect(),
        };
        graph.check(graph.dip_node.len())?;
        Ok(graph)
    }

    pub fn len(&self) -> usize {
        1 + self.dsp_nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    fn check(&self, l: usize) -> Result<()> {
        if self.dsp_nodes.is_empty() {
            return Err(Error::Empty("prompt graph neighbor set".into()));
        }
        for n in std::iter::once(&self.dip_node).chain(&self.dsp_nodes) {
            if n.len() != l {
                return Err(Error::Shape {
                    context: "prompt graph node".into(),
                    expected: format!("length {l}"),
                    actual: format!("{}", n.len()),
                });
            }
        }
        Ok(())
    }

    /// `[1 + t, L]` with the center in row 0.
    pub fn node_matrix(&self) -> Tensor {
        let mut data = self.dip_node.clone();
        for n in &self.dsp_nodes {
            data.extend_from_slice(n);
        }
        Tensor::new([self.len(), self.dip_node.len()], data).expect("checked node lengths")
    }
}

fn check_params(params: &GatParams, graph: &PromptGraph) -> Result<usize> {
    let l = params.node_len();
    if params.w.shape() != [l, l] || params.a.shape() != [2 * l] {
        return Err(Error::Shape {
            context: "GAT parameters".into(),
            expected: format!("W [{l}, {l}] and a [{}]", 2 * l),
            actual: format!("{:?} / {:?}", params.w.shape(), params.a.shape()),
        });
    }
    graph.check(l)?;
    Ok(l)
}

fn transform(w: &[f32], l: usize, node: &[f32]) -> Vec<f64> {
    (0..l)
        .map(|r| {
            w[r * l..(r + 1) * l]
                .iter()
                .zip(node)
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum()
        })
        .collect()
}

fn leaky(x: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        LEAKY_SLOPE as f64 * x
    }
}

fn transformed(params: &GatParams, graph: &PromptGraph, l: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let w = params.w.data();
    (
        transform(w, l, &graph.dip_node),
        graph.dsp_nodes.iter().map(|n| transform(w, l, n)).collect(),
    )
}

fn coefficients_of(a: &[f32], l: usize, center: &[f64], nodes: &[&[f64]]) -> Vec<f64> {
    let s_center: f64 = a[..l].iter().zip(center).map(|(&x, y)| x as f64 * y).sum();
    nodes
        .iter()
        .map(|n| leaky(s_center + a[l..].iter().zip(n.iter()).map(|(&x, y)| x as f64 * y).sum::<f64>()))
        .collect()
}

/// Self coefficient `e_II` and neighbor coefficients `e_IS`.
pub fn coefficients(params: &GatParams, graph: &PromptGraph) -> Result<(f32, Vec<f32>)> {
    let l = check_params(params, graph)?;
    let (center, nodes) = transformed(params, graph, l);
    let mut all: Vec<&[f64]> = vec![&center];
    all.extend(nodes.iter().map(|n| n.as_slice()));
    let e = coefficients_of(params.a.data(), l, &center, &all);
    Ok((e[0] as f32, e[1..].iter().map(|&v| v as f32).collect()))
}

/// Softmax over the self coefficient and the neighbor coefficients.
pub fn normalize(e_self: f32, e_neighbors: &[f32]) -> Result<(f32, Vec<f32>)> {
    if !e_self.is_finite() || e_neighbors.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite attention coefficient".into()));
    }
    let max = e_neighbors.iter().fold(e_self, |m, &v| m.max(v)) as f64;
    let exp_self = (e_self as f64 - max).exp();
    let exps: Vec<f64> = e_neighbors.iter().map(|&v| (v as f64 - max).exp()).collect();
    let total = exp_self + exps.iter().sum::<f64>();
    Ok((
        (exp_self / total) as f32,
        exps.iter().map(|e| (e / total) as f32).collect(),
    ))
}

/// Refined DIP vector `α_II·W·p_I + Σ α_IS^i·W·p_s^i`.
pub fn refine(params: &GatParams, graph: &PromptGraph) -> Result<Vec<f32>> {
    let l = check_params(params, graph)?;
    let (center, nodes) = transformed(params, graph, l);
    let mut all: Vec<&[f64]> = vec![&center];
    all.extend(nodes.iter().map(|n| n.as_slice()));
    let e = coefficients_of(params.a.data(), l, &center, &all);
    if e.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite attention coefficient".into()));
    }
    let max = e.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let exps: Vec<f64> = e.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let mut out = vec![0.0f64; l];
    for (node, ex) in all.iter().zip(&exps) {
        let alpha = ex / total;
        for (o, v) in out.iter_mut().zip(node.iter()) {
            *o += alpha * v;
        }
    }
    Ok(out.into_iter().map(|v| v as f32).collect())
}

/// Differentiable refine. `nodes` is `[1 + t, L]` with the center in row 0;
/// returns a `[L]` variable.
pub fn refine_on_tape<T: Element>(tape: &mut Tape<T>, w: Var, a: Var, nodes: Var) -> Result<Var> {
    let shape = tape.shape(nodes).to_vec();
    let (n, l) = (shape[0], shape[1]);
    let wt = tape.transpose(w)?;
    let h = tape.matmul(nodes, wt)?;
    let a_center = tape.slice(a, 0, 0, l)?;
    let a_center = tape.reshape(a_center, &[l, 1])?;
    let a_node = tape.slice(a, 0, l, l)?;
    let a_node = tape.reshape(a_node, &[l, 1])?;
    let h_center = tape.slice(h, 0, 0, 1)?;
    let s_center = tape.matmul(h_center, a_center)?;
    let s_center = tape.reshape(s_center, &[1])?;
    let s_node = tape.matmul(h, a_node)?;
    let e = tape.add(s_node, s_center)?;
    let e = tape.reshape(e, &[1, n])?;
    let e = tape.leaky_relu(e, T::from_f64_lossy(LEAKY_SLOPE as f64))?;
    let alpha = tape.softmax(e)?;
    let out = tape.matmul(alpha, h)?;
    Ok(tape.reshape(out, &[l])?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GatTrainReport {
    pub epoch_losses: Vec<f32>,
    /// Mean loss on `D_t ∪ D_t^sa` from the last epoch, before and after training.
    pub loss_before: f32,
    pub loss_after: f32,
}

#[derive(Clone, Copy, Debug)]
pub struct GatTrainOptions {
    pub epochs: usize,
    pub lr: f32,
    pub batch_size: usize,
}

/// Real samples plus one style-augmented copy each, with per-sample
/// DSP choices.
pub(crate) struct AugmentedSet {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub choices: Vec<usize>,
}

pub(crate) fn augmented_set<R: Rng + ?Sized>(
    bank: &PromptBank,
    data: &Dataset,
    real_choices: &[usize],
    rng: &mut R,
) -> Result<AugmentedSet> {
    let keys: Vec<_> = bank.entries().iter().map(|e| &e.key.amplitude).collect();
    let mut images = data.images.clone();
    let mut labels = data.labels.clone();
    let mut choices = real_choices.to_vec();
    for (img, y) in data.iter() {
        let (aug, _) = style_augment(img, &keys, rng)?;
        choices.push(bank.select_dsp(&amplitude(&aug)?)?);
        images.push(aug);
        labels.push(y);
    }
    Ok(AugmentedSet {
        images,
        labels,
        choices,
    })
}

/// Mean cross-entropy of a batch with the DIP given as a flat variable.
fn batch_loss(
    tape: &mut Tape<f32>,
    model: &Backbone,
    bank: &PromptBank,
    dip_flat: Var,
    set: &AugmentedSet,
    batch: &[usize],
) -> Result<Var> {
    let vars = model.bind(tape, Trainable::NONE);
    let dip = prefix_from_flat(tape, dip_flat, PromptKind::Dip, &model.config)?;
    let mut dsp_cache = vec![None; bank.time_step()];
    let mut logits = Vec::with_capacity(batch.len());
    let mut labels = Vec::with_capacity(batch.len());
    for &i in batch {
        let j = set.choices[i];
        if dsp_cache[j].is_none() {
            dsp_cache[j] = Some(bank.entries()[j].dsp.bind(tape, false));
        }
        let dsp = dsp_cache[j].as_ref().unwrap();
        logits.push(model.forward(tape, &vars, &set.images[i], Some(&dip), Some(dsp))?);
        labels.push(set.labels[i]);
    }
    let stacked = tape.concat(&logits, 0)?;
    Ok(tape.cross_entropy(stacked, &labels)?)
}

fn mean_loss(
    params: &GatParams,
    nodes: &Tensor,
    model: &Backbone,
    bank: &PromptBank,
    set: &AugmentedSet,
    batch_size: usize,
) -> Result<f32> {
    let idx: Vec<usize> = (0..set.images.len()).collect();
    let mut total = 0.0f64;
    for batch in idx.chunks(batch_size) {
        let mut tape = Tape::<f32>::new();
        let w = tape.constant(params.w.clone());
        let a = tape.constant(params.a.clone());
        let n = tape.constant(nodes.clone());
        let flat = refine_on_tape(&mut tape, w, a, n)?;
        let loss = batch_loss(&mut tape, model, bank, flat, set, batch)?;
        total += tape.value(loss).item()? as f64 * batch.len() as f64;
    }
    Ok((total / set.images.len() as f64) as f32)
}

/// Trains `W` and `a` so that the refined DIP works with whichever DSP each
/// sample retrieves. Every epoch draws a fresh style-augmented copy of
/// `data` from the bank keys. Returns the trained parameters and the final
/// refined DIP.
pub fn train_gat<R: Rng + ?Sized>(
    mut params: GatParams,
    bank: &PromptBank,
    previous_dip: &Prompt,
    model: &Backbone,
    data: &Dataset,
    opts: GatTrainOptions,
    rng: &mut R,
) -> Result<(GatParams, Prompt, GatTrainReport)> {
    if data.is_empty() {
        return Err(Error::Empty("GAT training data".into()));
    }
    if bank.time_step() < 2 {
        return Err(Error::Data("GAT refining needs at least two bank entries".into()));
    }
    let graph = PromptGraph::new(previous_dip, bank)?;
    check_params(&params, &graph)?;
    let nodes = graph.node_matrix();
    let real_choices = data
        .images
        .iter()
        .map(|img| bank.select_dsp(&amplitude(img)?))
        .collect::<Result<Vec<_>>>()?;

    let mut adam = Adam::default();
    let mut epoch_losses = Vec::with_capacity(opts.epochs);
    let mut last_set = None;
    let mut loss_before = None;
    for epoch in 0..opts.epochs {
        let set = augmented_set(bank, data, &real_choices, rng)?;
        if loss_before.is_none() {
            loss_before = Some(mean_loss(&params, &nodes, model, bank, &set, opts.batch_size)?);
        }
        let mut order: Vec<usize> = (0..set.images.len()).collect();
        order.shuffle(rng);
        let mut total = 0.0f64;
        for batch in order.chunks(opts.batch_size) {
            let mut tape = Tape::<f32>::new();
            let w = tape.leaf(params.w.clone(), true);
            let a = tape.leaf(params.a.clone(), true);
            let n = tape.constant(nodes.clone());
            let flat = refine_on_tape(&mut tape, w, a, n)?;
            let loss = batch_loss(&mut tape, model, bank, flat, &set, batch)?;
            let value = tape.value(loss).item()?;
            if !value.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    what: "GAT loss".into(),
                });
            }
            total += value as f64 * batch.len() as f64;
            tape.backward(loss)?;
            let (gw, ga) = (tape.grad(w).unwrap().clone(), tape.grad(a).unwrap().clone());
            adam.step(
                &mut [
                    AdamParam {
                        name: "gat.W",
                        value: &mut params.w,
                        grad: &gw,
                    },
                    AdamParam {
                        name: "gat.a",
                        value: &mut params.a,
                        grad: &ga,
                    },
                ],
                opts.lr,
            )?;
        }
        epoch_losses.push((total / set.images.len() as f64) as f32);
        last_set = Some(set);
    }
    let (loss_before, loss_after) = match (loss_before, last_set) {
        (Some(before), Some(set)) => (before, mean_loss(&params, &nodes, model, bank, &set, opts.batch_size)?),
        _ => (f32::NAN, f32::NAN),
    };
    let dip = Prompt::unflatten(PromptKind::Dip, &model.config, &refine(&params, &graph)?)?;
    Ok((
        params,
        dip,
        GatTrainReport {
            epoch_losses,
            loss_before,
            loss_after,
        },
    ))
}
