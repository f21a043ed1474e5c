//! The training engine: parties, messages, rounds, and the epoch loop.
//!
//! Parties run in-process and talk through explicit message values. The
//! message layer is where gradient defenses transform outgoing rows and
//! where attack hooks observe and tamper.

mod system;
mod training;

use std::cell::RefCell;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::defenses::DefenseConfig;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::models::{MlpModel, VibLayer};

pub use system::{argmax, ActiveParty, LossBreakdown, PassiveParty, RoundOutcome, VflSystem};
pub use training::{run_training, sample_batch, EpochMetrics, MetricsLog};

/// Which gradient information a passive party can observe.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Visibility {
    /// Per-sample rows `∂ℓ/∂H_i` are visible.
    #[default]
    SampleLevel,
    /// Only the batch gradient of the party's own parameters is visible.
    BatchLevelOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HeadConfig {
    SoftmaxOfSum,
    Trainable {
        #[serde(default)]
        hidden: Vec<usize>,
    },
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig::SoftmaxOfSum
    }
}

/// Network shapes shared by every party.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    /// Hidden widths of each local model; empty gives a single affine layer.
    #[serde(default = "default_hidden")]
    pub local_hidden: Vec<usize>,
    /// Width of each local output; the class count when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub local_output: Option<usize>,
    #[serde(default)]
    pub head: HeadConfig,
}

fn default_hidden() -> Vec<usize> {
    vec![32]
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            local_hidden: default_hidden(),
            local_output: None,
            head: HeadConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_local: f64,
    pub lr_head: f64,
    pub lr_vib: f64,
    /// Per-tensor gradient norm cap on every update; 0 disables it.
    pub max_grad_norm: f64,
    pub visibility: Visibility,
    pub defense: DefenseConfig,
    pub seed: u64,
}

fn default_max_grad_norm() -> f64 {
    5.0
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 64,
            lr_local: 0.1,
            lr_head: 0.1,
            lr_vib: 0.1,
            max_grad_norm: default_max_grad_norm(),
            visibility: Visibility::SampleLevel,
            defense: DefenseConfig::None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        for (name, lr) in [
            ("lr_local", self.lr_local),
            ("lr_head", self.lr_head),
            ("lr_vib", self.lr_vib),
        ] {
            if !(lr > 0.0) || !lr.is_finite() {
                return Err(Error::config(format!("{name} must be positive, got {lr}")));
            }
        }
        if !(self.max_grad_norm >= 0.0) {
            return Err(Error::config(format!(
                "max_grad_norm must be nonnegative, got {}",
                self.max_grad_norm
            )));
        }
        self.defense.validate()
    }

    pub(crate) fn clip(&self) -> Option<f64> {
        (self.max_grad_norm > 0.0).then_some(self.max_grad_norm)
    }
}

/// Outputs a passive party sends to the active party.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalOutputMsg {
    pub party: usize,
    pub indices: Vec<usize>,
    pub outputs: Tensor,
}

/// Gradient rows the active party sends back for one [`LocalOutputMsg`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradientMessage {
    pub party: usize,
    pub indices: Vec<usize>,
    pub per_sample: Tensor,
    pub visibility: Visibility,
}

/// What an attacking passive party gets to see during a round.
#[derive(Debug)]
pub enum Observation<'a> {
    /// Received per-sample gradient rows, before any tampering.
    SampleLevel { indices: &'a [usize], rows: &'a Tensor },
    /// Gradient of the party's own local parameters, `[W0, b0, W1, b1, …]`.
    BatchLevel { batch_size: usize, param_grads: &'a [Tensor] },
}

/// Attack entry points, called at fixed positions of each round.
///
/// Every method defaults to a no-op. Only the party returned by
/// [`AttackHooks::attacker`] is ever hooked.
pub trait AttackHooks {
    fn attacker(&self) -> Option<usize> {
        None
    }

    /// Edits the attacker's batch features before its forward pass.
    fn poison_features(&mut self, _indices: &[usize], _x: &mut Tensor) {}

    /// Edits the attacker's outgoing local outputs.
    fn intercept_output(&mut self, _indices: &[usize], _out: &mut Tensor) {}

    fn observe(&mut self, _obs: Observation<'_>) {}

    /// Rewrites received gradient rows before the local backward pass.
    /// Only called under sample-level visibility.
    fn replace_gradient(&mut self, _indices: &[usize], _rows: &mut Tensor) {}

    /// Multiplier on the attacker's local learning rate.
    fn local_lr_scale(&self) -> f64 {
        1.0
    }

    fn end_epoch(&mut self, _epoch: usize) {}

    /// Called once with the attacker's final local model.
    fn after_training(&mut self, _local: &MlpModel, _vib: Option<&VibLayer>) {}
}

/// Hooks that do nothing.
#[derive(Clone, Copy, Debug, Default)]
pub struct NoAttack;

impl AttackHooks for NoAttack {}

/// Labels held by the active party, with a log of every read.
#[derive(Clone, Debug)]
pub struct LabelStore {
    labels: Vec<usize>,
    classes: usize,
    owner: usize,
    log: RefCell<BTreeMap<(usize, &'static str), usize>>,
}

impl LabelStore {
    pub fn new(labels: Vec<usize>, classes: usize, owner: usize) -> Self {
        Self {
            labels,
            classes,
            owner,
            log: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn owner(&self) -> usize {
        self.owner
    }

    /// Labels at `indices`, recording `(reader, purpose)`.
    pub fn read(&self, reader: usize, purpose: &'static str, indices: &[usize]) -> Vec<usize> {
        *self.log.borrow_mut().entry((reader, purpose)).or_insert(0) += indices.len();
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    /// `((reader, purpose), rows read)` in key order.
    pub fn access_log(&self) -> Vec<((usize, &'static str), usize)> {
        self.log.borrow().iter().map(|(&k, &v)| (k, v)).collect()
    }
}

/// Counts of what attack hooks were shown.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ObservationAudit {
    pub sample_level_rows: usize,
    pub batch_level_grads: usize,
}
