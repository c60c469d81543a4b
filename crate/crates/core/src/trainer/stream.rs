use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::error::{Error, Result};
use crate::raster::Dataset;

/// Train/val/test splits of one domain.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DomainSplits {
    pub name: String,
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Ordered training domains plus held-out domains, with an access contract
/// on training splits: after [`DomainStream::advance`] moves the cursor to
/// step `t`, only domain `t`'s training split is readable. Every refused read
/// is logged.
#[derive(Debug, Default)]
pub struct DomainStream {
    domains: Vec<DomainSplits>,
    heldout: Vec<DomainSplits>,
    cursor: AtomicUsize,
    violations: Mutex<Vec<String>>,
}

impl DomainStream {
    pub fn new(domains: Vec<DomainSplits>, heldout: Vec<DomainSplits>) -> Self {
        Self {
            domains,
            heldout,
            cursor: AtomicUsize::new(0),
            violations: Mutex::new(Vec::new()),
        }
    }

    pub fn num_train_domains(&self) -> usize {
        self.domains.len()
    }

    pub fn num_heldout(&self) -> usize {
        self.heldout.len()
    }

    /// Training domains followed by held-out domains.
    pub fn num_domains(&self) -> usize {
        self.domains.len() + self.heldout.len()
    }

    /// Current time step (0 before the first `advance`).
    pub fn step(&self) -> usize {
        self.cursor.load(Ordering::SeqCst)
    }

    /// Moves to the next domain and returns the new 1-indexed step.
    pub fn advance(&self) -> Result<usize> {
        let next = self.step() + 1;
        if next > self.domains.len() {
            return Err(Error::Data(format!("stream has only {} domains", self.domains.len())));
        }
        self.cursor.store(next, Ordering::SeqCst);
        Ok(next)
    }

    /// Rewinds the cursor so the stream can be replayed from step 1.
    pub fn reset(&self) {
        self.cursor.store(0, Ordering::SeqCst);
    }

    /// Training split of 1-indexed domain `t`; refused unless `t` is the
    /// current step.
    pub fn train_split(&self, t: usize) -> Result<&Dataset> {
        let step = self.step();
        if t != step || t == 0 || t > self.domains.len() {
            let msg = format!("read of D_{t} training data at step {step}");
            self.violations.lock().expect("violation log").push(msg.clone());
            return Err(Error::Isolation(msg));
        }
        Ok(&self.domains[t - 1].train)
    }

    pub fn val_split(&self, t: usize) -> Option<&Dataset> {
        self.domains.get(t.checked_sub(1)?).map(|d| &d.val)
    }

    /// Test split of column `j` (0-indexed over training then held-out
    /// domains). Test data is always readable.
    pub fn test_split(&self, j: usize) -> Option<&Dataset> {
        self.domains.iter().chain(&self.heldout).nth(j).map(|d| &d.test)
    }

    pub fn domain_names(&self) -> Vec<String> {
        self.domains.iter().chain(&self.heldout).map(|d| d.name.clone()).collect()
    }

    pub fn violations(&self) -> Vec<String> {
        self.violations.lock().expect("violation log").clone()
    }

    /// All splits, bypassing the access contract. For data export and
    /// analysis outside a training run.
    pub fn all_domains(&self) -> impl Iterator<Item = &DomainSplits> {
        self.domains.iter().chain(&self.heldout)
    }
}
