//! The domain-incremental training loop: joint prompt and head training on
//! the first domain, then per domain a fresh domain-specific prompt followed
//! by graph-attention refining of the shared prompt on style-augmented data.

mod stream;

use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, ParamGroup, Trainable};
use crate::container;
use crate::diffcore::{Adam, AdamParam, Tape};
use crate::error::{Error, Result};
use crate::fourier::{amplitude, average_amplitude};
use crate::gat::{train_gat, GatParams, GatTrainOptions, GatTrainReport};
use crate::metrics::{accuracy, AccuracyMatrix, MemoryLog};
use crate::prompts::{Prompt, PromptBank, PromptKind};
use crate::raster::{Dataset, Image};

pub use stream::{DomainSplits, DomainStream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs_step1: usize,
    pub epochs_dsp: usize,
    pub epochs_gat: usize,
    pub batch_size: usize,
    /// Joint DIP + DSP + head training at the first step.
    pub lr_step1: f32,
    /// Fresh domain-specific prompts at later steps.
    pub lr_dsp: f32,
    /// Graph attention refining at later steps.
    pub lr_later: f32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs_step1: 20,
            epochs_dsp: 20,
            epochs_gat: 10,
            batch_size: 32,
            lr_step1: 7.5e-4,
            lr_dsp: 7.5e-4,
            lr_later: 1e-4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        for (name, lr) in [
            ("lr_step1", self.lr_step1),
            ("lr_dsp", self.lr_dsp),
            ("lr_later", self.lr_later),
        ] {
            if !(lr > 0.0) || !lr.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {lr}")));
            }
        }
        Ok(())
    }
}

/// Which parameters a prompt-tuning pass updates. The trunk never is.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Fit {
    pub dip: bool,
    pub dsp: bool,
    pub head: bool,
}

/// Cross-entropy training of prompts (and optionally the head) on a frozen
/// trunk. Returns the mean loss of every epoch.
#[allow(clippy::too_many_arguments)]
pub fn fit_prompts(
    model: &mut Backbone,
    dip: &mut Prompt,
    dsp: &mut Prompt,
    fit: Fit,
    data: &Dataset,
    epochs: usize,
    lr: f32,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f32>> {
    if !model.params.trunk_frozen() {
        return Err(Error::Config("the trunk must be frozen before prompt tuning".into()));
    }
    if fit.head && model.params.head_frozen() {
        return Err(Error::Config("the classification head is frozen".into()));
    }
    if data.is_empty() {
        return Err(Error::Empty("training split".into()));
    }
    let head = model.params.head_index();
    let dip_names: Vec<String> = dip.named_tensors("dip").into_iter().map(|(n, _)| n).collect();
    let dsp_names: Vec<String> = dsp.named_tensors("dsp").into_iter().map(|(n, _)| n).collect();
    let mut adam = Adam::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        order.shuffle(rng);
        let mut total = 0.0f64;
        for batch in order.chunks(batch_size) {
            let mut tape = Tape::<f32>::new();
            let vars = model.bind(
                &mut tape,
                Trainable {
                    trunk: false,
                    head: fit.head,
                },
            );
            let (dip_vars, dip_leaves) = dip.bind_with_leaves(&mut tape, fit.dip);
            let (dsp_vars, dsp_leaves) = dsp.bind_with_leaves(&mut tape, fit.dsp);
            let mut logits = Vec::with_capacity(batch.len());
            let mut labels = Vec::with_capacity(batch.len());
            for &i in batch {
                logits.push(model.forward(&mut tape, &vars, &data.images[i], Some(&dip_vars), Some(&dsp_vars))?);
                labels.push(data.labels[i]);
            }
            let stacked = tape.concat(&logits, 0)?;
            let loss = tape.cross_entropy(stacked, &labels)?;
            let value = tape.value(loss).item()?;
            if !value.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    what: "prompt-tuning loss".into(),
                });
            }
            total += value as f64 * batch.len() as f64;
            tape.backward(loss)?;

            let mut leaves = Vec::new();
            if fit.dip {
                leaves.extend(&dip_leaves);
            }
            if fit.dsp {
                leaves.extend(&dsp_leaves);
            }
            if fit.head {
                leaves.extend([vars[head], vars[head + 1]]);
            }
            let grads: Vec<_> = leaves
                .iter()
                .map(|&v| tape.grad(v).cloned().expect("trainable leaf has a gradient"))
                .collect();
            let mut grads = grads.iter();
            let mut params = Vec::with_capacity(leaves.len());
            if fit.dip {
                for (value, name) in dip.tensors_mut().zip(&dip_names) {
                    params.push(AdamParam {
                        name,
                        value,
                        grad: grads.next().unwrap(),
                    });
                }
            }
            if fit.dsp {
                for (value, name) in dsp.tensors_mut().zip(&dsp_names) {
                    params.push(AdamParam {
                        name,
                        value,
                        grad: grads.next().unwrap(),
                    });
                }
            }
            if fit.head {
                for entry in &mut model.params.entries[head..head + 2] {
                    params.push(AdamParam {
                        name: &entry.name,
                        value: &mut entry.tensor,
                        grad: grads.next().unwrap(),
                    });
                }
            }
            adam.step(&mut params, lr)?;
        }
        losses.push((total / data.len() as f64) as f32);
    }
    Ok(losses)
}

fn eval_pool() -> &'static rayon::ThreadPool {
    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        let threads = std::env::var("DIPT_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .unwrap_or(0);
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .expect("evaluation thread pool")
    })
}

/// Applies `predict` to every image, fanning out over the evaluation pool
/// (capped by `DIPT_THREADS`). Output order matches input order.
pub fn predict_all<F>(images: &[Image], predict: F) -> Result<Vec<usize>>
where
    F: Fn(&Image) -> Result<usize> + Sync,
{
    eval_pool().install(|| images.par_iter().map(&predict).collect())
}

/// Label of one image: retrieve the closest domain-specific prompt by
/// amplitude similarity and run it together with the latest shared prompt.
pub fn infer(model: &Backbone, bank: &PromptBank, image: &Image) -> Result<usize> {
    let j = bank.select_dsp(&amplitude(image)?)?;
    model.predict(image, bank.dip(), Some(&bank.entries()[j].dsp))
}

pub fn infer_batch(model: &Backbone, bank: &PromptBank, images: &[Image]) -> Result<Vec<usize>> {
    predict_all(images, |img| infer(model, bank, img))
}

pub fn evaluate(model: &Backbone, bank: &PromptBank, data: &Dataset) -> Result<f64> {
    accuracy(&infer_batch(model, bank, &data.images)?, &data.labels)
}

/// Accuracy with a fixed pair of prompts and no retrieval.
pub fn evaluate_fixed(model: &Backbone, dip: Option<&Prompt>, dsp: Option<&Prompt>, data: &Dataset) -> Result<f64> {
    let preds = predict_all(&data.images, |img| model.predict(img, dip, dsp))?;
    accuracy(&preds, &data.labels)
}

/// Trains DIP, DSP-1 and the head jointly on the first domain, builds the
/// bank `{p_I, [k_1, p_s^1]}` and freezes the head.
pub fn train_step_one(
    model: &mut Backbone,
    stream: &DomainStream,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(PromptBank, Vec<f32>)> {
    let data = stream.train_split(1)?;
    let mut dip = Prompt::init(PromptKind::Dip, &model.config, rng);
    let mut dsp = Prompt::init(PromptKind::Dsp, &model.config, rng);
    let fit = Fit {
        dip: true,
        dsp: true,
        head: true,
    };
    let losses = fit_prompts(
        model,
        &mut dip,
        &mut dsp,
        fit,
        data,
        cfg.epochs_step1,
        cfg.lr_step1,
        cfg.batch_size,
        rng,
    )?;
    let key = average_amplitude(&data.images, 1)?;
    let mut bank = PromptBank::new();
    bank.append_entry(&model.config, key, dsp)?;
    bank.set_dip(&model.config, dip)?;
    model.params.freeze_head();
    Ok((bank, losses))
}

/// A fresh domain-specific prompt trained with the bank's DIP held fixed.
pub fn train_dsp(
    model: &Backbone,
    bank: &PromptBank,
    data: &Dataset,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Prompt, Vec<f32>)> {
    let mut dip = bank.dip().cloned().ok_or_else(|| Error::Empty("prompt bank DIP".into()))?;
    if !model.params.head_frozen() {
        return Err(Error::Config("the head must be frozen after the first step".into()));
    }
    let mut dsp = Prompt::init(PromptKind::Dsp, &model.config, rng);
    let mut frozen = model.clone();
    let fit = Fit {
        dip: false,
        dsp: true,
        head: false,
    };
    let losses = fit_prompts(
        &mut frozen,
        &mut dip,
        &mut dsp,
        fit,
        data,
        cfg.epochs_dsp,
        cfg.lr_dsp,
        cfg.batch_size,
        rng,
    )?;
    Ok((dsp, losses))
}

/// Computes `k_t` from the raw domain data, appends `[k_t, p_s^t]`, trains a
/// freshly initialized GAT on `D_t` plus its style-augmented copy and
/// overwrites the bank DIP with the refined prompt.
pub fn refine_step(
    model: &Backbone,
    bank: &mut PromptBank,
    data: &Dataset,
    dsp: Prompt,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<GatTrainReport> {
    let previous = bank.dip().cloned().ok_or_else(|| Error::Empty("prompt bank DIP".into()))?;
    let t = bank.time_step() + 1;
    let key = average_amplitude(&data.images, t)?;
    bank.append_entry(&model.config, key, dsp)?;
    let l = PromptKind::Dip.flat_len(&model.config);
    if l != PromptKind::Dsp.flat_len(&model.config) {
        return Err(Error::Config(
            "graph refining needs DIP and DSP to cover the same number of layers".into(),
        ));
    }
    let params = GatParams::init(l, rng);
    let opts = GatTrainOptions {
        epochs: cfg.epochs_gat,
        lr: cfg.lr_later,
        batch_size: cfg.batch_size,
    };
    let (_, dip, report) = train_gat(params, bank, &previous, model, data, opts, rng)?;
    bank.set_dip(&model.config, dip)?;
    Ok(report)
}

/// Checksums recorded during a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Audit {
    /// Trunk checksum before the run and after every step.
    pub trunk: Vec<u64>,
    /// Head checksum after every step.
    pub head: Vec<u64>,
    /// Checksums of all bank entries after every step.
    pub entries: Vec<Vec<u64>>,
    pub isolation_violations: Vec<String>,
}

impl Audit {
    pub fn trunk_constant(&self) -> bool {
        self.trunk.windows(2).all(|w| w[0] == w[1])
    }

    pub fn head_constant_after_step_one(&self) -> bool {
        self.head.windows(2).all(|w| w[0] == w[1])
    }

    /// Every entry keeps the checksum it had when it was appended.
    pub fn entries_stable(&self) -> bool {
        self.entries.windows(2).all(|w| w[1].len() == w[0].len() + 1 && w[1][..w[0].len()] == w[0][..])
    }

    pub fn isolated(&self) -> bool {
        self.isolation_violations.is_empty()
    }
}

pub struct DilRun {
    pub model: Backbone,
    pub bank: PromptBank,
    pub r: AccuracyMatrix,
    pub memory: MemoryLog,
    pub audit: Audit,
    pub gat_reports: Vec<GatTrainReport>,
    /// The shared prompt in force after every step.
    pub dip_history: Vec<Prompt>,
}

fn eval_row(stream: &DomainStream, mut acc: impl FnMut(&Dataset) -> Result<f64>) -> Result<Vec<f64>> {
    (0..stream.num_domains())
        .map(|j| acc(stream.test_split(j).expect("column within the stream")))
        .collect()
}

/// The full loop over the stream. After every step all domains, including
/// future and held-out ones, are evaluated to fill one row of `R`.
pub fn run_dil(mut model: Backbone, stream: &DomainStream, cfg: &TrainConfig) -> Result<DilRun> {
    cfg.validate()?;
    stream.reset();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut audit = Audit::default();
    audit.trunk.push(model.params.checksum(ParamGroup::Trunk));
    let mut rows = Vec::new();
    let mut memory = MemoryLog::default();
    let mut gat_reports = Vec::new();
    let mut dip_history = Vec::new();
    let mut bank = PromptBank::new();
    let checkpoint_bytes = model.params.encoded_len();
    for _ in 0..stream.num_train_domains() {
        let t = stream.advance()?;
        let mut step = |model: &mut Backbone, bank: &mut PromptBank, rng: &mut ChaCha8Rng| -> Result<()> {
            if t == 1 {
                let (b, _) = train_step_one(model, stream, cfg, rng)?;
                *bank = b;
            } else {
                let data = stream.train_split(t)?;
                let (dsp, _) = train_dsp(model, bank, data, cfg, rng)?;
                gat_reports.push(refine_step(model, bank, data, dsp, cfg, rng)?);
            }
            rows.push(eval_row(stream, |d| evaluate(model, bank, d))?);
            Ok(())
        };
        step(&mut model, &mut bank, &mut rng).map_err(Error::at_step(t))?;
        audit.trunk.push(model.params.checksum(ParamGroup::Trunk));
        audit.head.push(model.params.checksum(ParamGroup::Head));
        audit.entries.push(bank.entries().iter().map(|e| e.checksum()).collect());
        memory.theta.push((bank.bank_bytes() + checkpoint_bytes) as u64);
        dip_history.extend(bank.dip().cloned());
    }
    audit.isolation_violations = stream.violations();
    let n = stream.num_train_domains();
    Ok(DilRun {
        model,
        bank,
        r: AccuracyMatrix::new(rows, n)?,
        memory,
        audit,
        gat_reports,
        dip_history,
    })
}

pub struct SeqFtRun {
    pub model: Backbone,
    pub dip: Prompt,
    pub dsp: Prompt,
    pub r: AccuracyMatrix,
    pub memory: MemoryLog,
}

/// Baseline: one DIP, one DSP and the head trained on each domain in turn,
/// with no bank, retrieval, graph refining or augmentation.
pub fn baseline_seq_finetune(mut model: Backbone, stream: &DomainStream, cfg: &TrainConfig) -> Result<SeqFtRun> {
    cfg.validate()?;
    stream.reset();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dip = Prompt::init(PromptKind::Dip, &model.config, &mut rng);
    let mut dsp = Prompt::init(PromptKind::Dsp, &model.config, &mut rng);
    let fit = Fit {
        dip: true,
        dsp: true,
        head: true,
    };
    let mut rows = Vec::new();
    let mut memory = MemoryLog::default();
    for _ in 0..stream.num_train_domains() {
        let t = stream.advance()?;
        let data = stream.train_split(t).map_err(Error::at_step(t))?;
        let (epochs, lr) = if t == 1 {
            (cfg.epochs_step1, cfg.lr_step1)
        } else {
            (cfg.epochs_dsp, cfg.lr_dsp)
        };
        fit_prompts(&mut model, &mut dip, &mut dsp, fit, data, epochs, lr, cfg.batch_size, &mut rng)
            .map_err(Error::at_step(t))?;
        rows.push(eval_row(stream, |d| evaluate_fixed(&model, Some(&dip), Some(&dsp), d)).map_err(Error::at_step(t))?);
        let prompts = [dip.named_tensors("dip"), dsp.named_tensors("dsp")].concat();
        let bytes = container::encoded_len(prompts.iter().map(|(n, t)| (n.as_str(), *t)));
        memory.theta.push((bytes + model.params.encoded_len()) as u64);
    }
    let n = stream.num_train_domains();
    Ok(SeqFtRun {
        model,
        dip,
        dsp,
        r: AccuracyMatrix::new(rows, n)?,
        memory,
    })
}
