use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::model::argmax;
use super::params::Trainable;
use super::{Backbone, BackboneConfig};
use crate::diffcore::{Adam, AdamParam, Tape};
use crate::error::{Error, Result};
use crate::raster::Dataset;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainOptions {
    pub epochs: usize,
    pub lr: f32,
    pub batch_size: usize,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr: 1e-3,
            batch_size: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub epoch_losses: Vec<f32>,
    pub train_accuracy: f64,
}

/// Trains every parameter with cross-entropy, then freezes the trunk. The
/// head stays trainable.
pub fn pretrain<R: Rng + ?Sized>(
    config: BackboneConfig,
    data: &Dataset,
    opts: &PretrainOptions,
    rng: &mut R,
) -> Result<(Backbone, PretrainReport)> {
    if data.is_empty() {
        return Err(Error::Empty("pretraining dataset".into()));
    }
    if opts.batch_size == 0 || !(opts.lr > 0.0) {
        return Err(Error::Config("pretraining needs batch_size > 0 and lr > 0".into()));
    }
    let mut model = Backbone::new(config, rng)?;
    let mut adam = Adam::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs {
        order.shuffle(rng);
        let mut total = 0.0f64;
        for batch in order.chunks(opts.batch_size) {
            let mut tape = Tape::<f32>::new();
            let vars = model.bind(&mut tape, Trainable::ALL);
            let mut logits = Vec::with_capacity(batch.len());
            let mut labels = Vec::with_capacity(batch.len());
            for &i in batch {
                logits.push(model.forward(&mut tape, &vars, &data.images[i], None, None)?);
                labels.push(data.labels[i]);
            }
            let stacked = tape.concat(&logits, 0)?;
            let loss = tape.cross_entropy(stacked, &labels)?;
            let value = tape.value(loss).item()?;
            if !value.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    what: "pretraining loss".into(),
                });
            }
            total += value as f64 * batch.len() as f64;
            tape.backward(loss)?;
            let grads: Vec<_> = vars.iter().map(|&v| tape.grad(v).cloned()).collect();
            let mut updates = Vec::with_capacity(vars.len());
            for (entry, grad) in model.params.entries.iter_mut().zip(&grads) {
                let grad = grad.as_ref().expect("all parameters require grad");
                updates.push(AdamParam {
                    name: &entry.name,
                    value: &mut entry.tensor,
                    grad,
                });
            }
            adam.step(&mut updates, opts.lr)?;
        }
        epoch_losses.push((total / data.len() as f64) as f32);
    }
    model.params.freeze_trunk();
    let correct = data
        .iter()
        .map(|(img, y)| model.logits(img, None, None).map(|l| (argmax(&l) == y) as usize))
        .sum::<Result<usize>>()?;
    Ok((
        model,
        PretrainReport {
            epoch_losses,
            train_accuracy: correct as f64 / data.len() as f64,
        },
    ))
}
