//! Accuracy-matrix and memory metrics of a domain-incremental run.
//!
//! `R[i][j]` is the accuracy after training step `i + 1` on domain `j + 1`.
//! The first `N` columns are the training domains in arrival order; any
//! further columns are held-out domains that are never trained on.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
    n: usize,
}

impl AccuracyMatrix {
    /// `rows` must be `N × D` with `D ≥ N` and entries in `[0, 1]`.
    pub fn new(rows: Vec<Vec<f64>>, n: usize) -> Result<Self> {
        if rows.len() != n || n == 0 {
            return Err(Error::Shape {
                context: "accuracy matrix".into(),
                expected: format!("{n} rows (one per training step, at least one)"),
                actual: format!("{}", rows.len()),
            });
        }
        let d = rows[0].len();
        if d < n || rows.iter().any(|r| r.len() != d) {
            return Err(Error::Shape {
                context: "accuracy matrix".into(),
                expected: format!("equal-length rows with at least {n} columns"),
                actual: format!("{:?}", rows.iter().map(Vec::len).collect::<Vec<_>>()),
            });
        }
        if rows.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Data("accuracies must lie in [0, 1]".into()));
        }
        Ok(Self { rows, n })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn num_columns(&self) -> usize {
        self.rows[0].len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// 0-indexed entry.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.rows[i][j]
    }
}

/// Byte counts `θ_1..θ_N` of everything kept for the next step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MemoryLog {
    pub theta: Vec<u64>,
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::Empty("prediction list".into()));
    }
    if predictions.len() != labels.len() {
        return Err(Error::Shape {
            context: "accuracy".into(),
            expected: format!("{} labels", predictions.len()),
            actual: format!("{}", labels.len()),
        });
    }
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / predictions.len() as f64)
}

fn need_two(r: &AccuracyMatrix, what: &str) -> Result<usize> {
    if r.n < 2 {
        return Err(Error::Data(format!("{what} needs at least two training domains")));
    }
    Ok(r.n)
}

/// Backward transfer: mean change on earlier domains relative to the
/// accuracy right after learning them.
pub fn bwt(r: &AccuracyMatrix) -> Result<f64> {
    let n = need_two(r, "BWT")?;
    let mut sum = 0.0;
    for i in 1..n {
        for j in 0..i {
            sum += r.get(i, j) - r.get(j, j);
        }
    }
    Ok(2.0 * sum / (n * (n - 1)) as f64)
}

/// Mean accuracy over every `(step, seen domain)` pair.
pub fn il(r: &AccuracyMatrix) -> Result<f64> {
    let n = r.n;
    let mut sum = 0.0;
    for i in 0..n {
        for j in 0..=i {
            sum += r.get(i, j);
        }
    }
    Ok(2.0 * sum / (n * (n + 1)) as f64)
}

/// Forward transfer: mean accuracy on training domains not yet learned.
///
/// With `include_heldout`, the held-out columns of each row are averaged
/// into one extra not-yet-learned column per row, and the normalization
/// counts it.
pub fn ftu(r: &AccuracyMatrix, include_heldout: bool) -> Result<f64> {
    let n = need_two(r, "FTU")?;
    let mut sum = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            sum += r.get(i, j);
        }
    }
    let pairs = (n * (n - 1) / 2) as f64;
    let heldout = r.num_columns() - n;
    if !include_heldout || heldout == 0 {
        return Ok(sum / pairs);
    }
    for row in &r.rows {
        sum += row[n..].iter().sum::<f64>() / heldout as f64;
    }
    Ok(sum / (pairs + n as f64))
}

fn check_theta(theta: &[u64]) -> Result<()> {
    if theta.is_empty() {
        return Err(Error::Empty("memory log".into()));
    }
    if theta.contains(&0) {
        return Err(Error::Data("memory sizes must be positive".into()));
    }
    Ok(())
}

/// Model-size efficiency `min(1, mean θ_1/θ_i)`.
pub fn ms(theta: &[u64]) -> Result<f64> {
    check_theta(theta)?;
    let first = theta[0] as f64;
    let mean = theta.iter().map(|&t| first / t as f64).sum::<f64>() / theta.len() as f64;
    Ok(mean.min(1.0))
}

/// Average additional memory `mean |θ_i − θ_1|`, in bytes.
pub fn aams(theta: &[u64]) -> Result<f64> {
    check_theta(theta)?;
    let first = theta[0] as f64;
    Ok(theta.iter().map(|&t| (t as f64 - first).abs()).sum::<f64>() / theta.len() as f64)
}

/// Per-seed metrics document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    #[serde(rename = "R")]
    pub r: Vec<Vec<f64>>,
    #[serde(rename = "N")]
    pub n: usize,
    pub acc_last: Vec<f64>,
    pub bwt: f64,
    pub il: f64,
    pub ftu: f64,
    pub ftu_heldout: f64,
    pub ms: f64,
    pub aams_bytes: f64,
    pub seed: u64,
}

impl Report {
    /// `include_heldout` selects which FTU reading fills the `ftu` field;
    /// `ftu_heldout` always carries the extended reading.
    pub fn build(r: &AccuracyMatrix, memory: &MemoryLog, seed: u64, include_heldout: bool) -> Result<Self> {
        let ftu_literal = ftu(r, false)?;
        let ftu_extended = ftu(r, true)?;
        Ok(Self {
            r: r.rows.clone(),
            n: r.n,
            acc_last: r.rows[r.n - 1].clone(),
            bwt: bwt(r)?,
            il: il(r)?,
            ftu: if include_heldout { ftu_extended } else { ftu_literal },
            ftu_heldout: ftu_extended,
            ms: ms(&memory.theta)?,
            aams_bytes: aams(&memory.theta)?,
            seed,
        })
    }
}
