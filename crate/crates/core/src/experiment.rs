//! Whole-experiment configuration and the per-seed pipeline shared by the
//! command line front end and the acceptance harness.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{pretrain, Backbone, BackboneConfig, PretrainOptions, PretrainReport};
use crate::datagen::{make_stream, pretrain_dataset, SyntheticStreamConfig};
use crate::error::{Error, Result};
use crate::metrics::{AccuracyMatrix, MemoryLog, Report};
use crate::trainer::{baseline_seq_finetune, run_dil, DilRun, SeqFtRun, TrainConfig};

/// One JSON document describing a complete experiment. Every field has a
/// default, so `{}` is a valid config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub backbone: BackboneConfig,
    /// `train.seed` is replaced by each entry of `seeds`.
    pub train: TrainConfig,
    pub stream: SyntheticStreamConfig,
    pub pretrain: PretrainOptions,
    /// Seeds the pretraining data and initialization.
    pub pretrain_seed: u64,
    /// Each seed picks a stream and the training RNG.
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub include_heldout_ftu: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            train: TrainConfig::default(),
            stream: SyntheticStreamConfig::default(),
            pretrain: PretrainOptions::default(),
            pretrain_seed: 1000,
            seeds: vec![0, 1, 2],
            out_dir: PathBuf::from("runs"),
            include_heldout_ftu: false,
        }
    }
}

impl ExperimentConfig {
    /// Smaller backbone (embed 32, patch 8, depth 4) and test splits sized
    /// so three seeds of both methods fit a single-core CPU budget.
    pub fn desk() -> Self {
        Self {
            backbone: BackboneConfig {
                embed_dim: 32,
                depth: 4,
                patch_size: 8,
                mlp_ratio: 2,
                heads: 4,
                ..BackboneConfig::default()
            },
            stream: SyntheticStreamConfig {
                val_samples: 16,
                test_samples: 128,
                ..SyntheticStreamConfig::default()
            },
            pretrain: PretrainOptions {
                epochs: 15,
                ..PretrainOptions::default()
            },
            ..Self::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.train.validate()?;
        self.stream.validate()?;
        if self.stream.image_size != self.backbone.image_size {
            return Err(Error::Config(format!(
                "stream image_size {} differs from backbone image_size {}",
                self.stream.image_size, self.backbone.image_size
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        Ok(())
    }

    pub fn train_for(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.train.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Ours,
    Seqft,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Ours => "ours",
            Method::Seqft => "seqft",
        }
    }
}

pub fn pretrain_backbone(cfg: &ExperimentConfig) -> Result<(Backbone, PretrainReport)> {
    let data = pretrain_dataset(&cfg.stream, cfg.pretrain_seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.pretrain_seed);
    pretrain(cfg.backbone.clone(), &data, &cfg.pretrain, &mut rng)
}

pub enum MethodRun {
    Ours(DilRun),
    Seqft(SeqFtRun),
}

impl MethodRun {
    pub fn r(&self) -> &AccuracyMatrix {
        match self {
            MethodRun::Ours(run) => &run.r,
            MethodRun::Seqft(run) => &run.r,
        }
    }

    pub fn memory(&self) -> &MemoryLog {
        match self {
            MethodRun::Ours(run) => &run.memory,
            MethodRun::Seqft(run) => &run.memory,
        }
    }

    pub fn model(&self) -> &Backbone {
        match self {
            MethodRun::Ours(run) => &run.model,
            MethodRun::Seqft(run) => &run.model,
        }
    }
}

/// Runs one method on the stream of `seed`, starting from `pretrained`.
pub fn run_method(cfg: &ExperimentConfig, pretrained: &Backbone, method: Method, seed: u64) -> Result<(MethodRun, Report)> {
    let stream = make_stream(&cfg.stream, seed)?;
    let train = cfg.train_for(seed);
    let run = match method {
        Method::Ours => MethodRun::Ours(run_dil(pretrained.clone(), &stream, &train)?),
        Method::Seqft => MethodRun::Seqft(baseline_seq_finetune(pretrained.clone(), &stream, &train)?),
    };
    let report = Report::build(run.r(), run.memory(), seed, cfg.include_heldout_ftu)?;
    Ok((run, report))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Population standard deviation; 0 for a single run.
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

/// Mean and spread of per-seed reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub runs: usize,
    pub seeds: Vec<u64>,
    #[serde(rename = "N")]
    pub n: usize,
    pub acc_last: Vec<Stat>,
    /// Final-step accuracy averaged over the training domains.
    pub avg_acc: Stat,
    pub il: Stat,
    pub bwt: Stat,
    pub ftu: Stat,
    pub ftu_heldout: Stat,
    pub ms: Stat,
    pub aams_bytes: Stat,
}

impl Aggregate {
    pub fn from_reports(reports: &[Report]) -> Result<Self> {
        let first = reports.first().ok_or_else(|| Error::Empty("report list".into()))?;
        if reports.iter().any(|r| r.n != first.n || r.acc_last.len() != first.acc_last.len()) {
            return Err(Error::Data("reports disagree on the domain layout".into()));
        }
        let stat = |f: &dyn Fn(&Report) -> f64| Stat::of(&reports.iter().map(f).collect::<Vec<_>>());
        let n = first.n;
        Ok(Self {
            runs: reports.len(),
            seeds: reports.iter().map(|r| r.seed).collect(),
            n,
            acc_last: (0..first.acc_last.len()).map(|j| stat(&|r| r.acc_last[j])).collect(),
            avg_acc: stat(&|r| r.acc_last[..n].iter().sum::<f64>() / n as f64),
            il: stat(&|r| r.il),
            bwt: stat(&|r| r.bwt),
            ftu: stat(&|r| r.ftu),
            ftu_heldout: stat(&|r| r.ftu_heldout),
            ms: stat(&|r| r.ms),
            aams_bytes: stat(&|r| r.aams_bytes),
        })
    }

    /// One aligned row per label, accuracies in percent.
    pub fn table(rows: &[(String, Aggregate)]) -> String {
        let Some((_, first)) = rows.first() else {
            return String::new();
        };
        let mut header = vec!["method".to_string()];
        header.extend((0..first.acc_last.len()).map(|j| {
            if j < first.n {
                format!("D{}", j + 1)
            } else {
                format!("H{}", j + 1 - first.n)
            }
        }));
        header.extend(["Avg", "IL", "BWT", "FTU", "MS"].map(String::from));
        let pct = |s: &Stat| format!("{:.2}±{:.2}", 100.0 * s.mean, 100.0 * s.std);
        let mut lines = vec![header];
        for (label, agg) in rows {
            let mut cells = vec![label.clone()];
            cells.extend(agg.acc_last.iter().map(pct));
            cells.extend([&agg.avg_acc, &agg.il, &agg.bwt, &agg.ftu].map(pct));
            cells.push(format!("{:.4}±{:.4}", agg.ms.mean, agg.ms.std));
            lines.push(cells);
        }
        let cols = lines[0].len();
        let widths: Vec<usize> = (0..cols)
            .map(|c| lines.iter().map(|l| l.get(c).map_or(0, |s| s.chars().count())).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for line in &lines {
            let cells: Vec<String> = line.iter().zip(&widths).map(|(s, w)| format!("{s:>w$}")).collect();
            let _ = writeln!(out, "{}", cells.join("  ").trim_end());
        }
        out
    }
}
