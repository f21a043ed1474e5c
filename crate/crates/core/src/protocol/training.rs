use super::{AttackHooks, TrainConfig, VflSystem};
use crate::diffcore::Rng;
use crate::error::{Error, Result};
use crate::harness::data::SplitDataset;
use crate::protocol::ArchConfig;

/// `batch_size` distinct indices from `0..n`.
pub fn sample_batch(n: usize, batch_size: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    if batch_size == 0 || batch_size > n {
        return Err(Error::config(format!(
            "batch size {batch_size} is not within 1..={n}"
        )));
    }
    Ok(rng.choose_distinct(n, batch_size))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean round loss over the epoch.
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    /// `(party, dataset-mean KL)` per bottleneck on the training set.
    pub kl_bounds: Vec<(usize, f64)>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    pub epochs: Vec<EpochMetrics>,
}

impl MetricsLog {
    pub fn last(&self) -> Option<&EpochMetrics> {
        self.epochs.last()
    }
}

pub(crate) fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    pred.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / labels.len() as f64
}

/// Trains a fresh system for `config.epochs` epochs of `⌈n / batch⌉`
/// rounds, each on an independently sampled batch.
pub fn run_training(
    data: &SplitDataset,
    arch: &ArchConfig,
    config: &TrainConfig,
    hooks: &mut dyn AttackHooks,
) -> Result<(VflSystem, MetricsLog)> {
    let mut sys = VflSystem::new(data, arch, config)?;
    let n = data.n_train();
    if config.batch_size > n {
        return Err(Error::config(format!(
            "batch size {} exceeds {n} training samples",
            config.batch_size
        )));
    }
    let mut batch_rng = Rng::named(config.seed, "batch");
    let rounds = n.div_ceil(config.batch_size);
    let mut log = MetricsLog::default();
    for epoch in 0..config.epochs {
        let mut loss_sum = 0.0;
        for batch in 0..rounds {
            let idx = sample_batch(n, config.batch_size, &mut batch_rng)?;
            let out = sys.train_round(&idx, hooks)?;
            if !out.loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch,
                    loss: out.loss,
                });
            }
            loss_sum += out.loss;
        }
        sys.end_epoch();
        hooks.end_epoch(epoch);
        let train_pred = sys.predict(&data.train, &[])?;
        let test_pred = sys.predict(&data.test, &[])?;
        log.epochs.push(EpochMetrics {
            epoch,
            train_loss: loss_sum / rounds as f64,
            train_acc: accuracy(&train_pred, &data.train_labels),
            test_acc: accuracy(&test_pred, &data.test_labels),
            kl_bounds: sys.kl_bounds(&data.train)?,
        });
    }
    if let Some(id) = hooks.attacker() {
        if let Some(p) = sys.passive(id) {
            hooks.after_training(&p.model, p.vib.as_ref());
        }
    }
    Ok((sys, log))
}
