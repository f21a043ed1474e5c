//! Attacks run by a passive party (or, for reconstruction, by the active
//! party) against the training protocol.
//!
//! Hooks here only ever see what [`crate::protocol`] hands to the attacking
//! party: its own features and model, the rows it receives, and its own
//! parameter gradients.

mod cafe;
mod completion;
mod label;
mod poison;

use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::models::{MlpModel, VibLayer};
use crate::protocol::{AttackHooks, Observation};

pub use cafe::{
    cafe_objective, cafe_reconstruct, row_psnr, simulate_observation, write_pgm, write_psnr_csv,
    CafeConfig, CafeObservation, Reconstruction,
};
pub use completion::{aux_subset, mc_attack, mc_infer};
pub use label::{
    bli_count_accuracy, bli_fit, bli_slot_accuracy, dli_infer, ds_infer, flatten_last_layer,
    generate_aux_traces, simulate_last_layer_grad, BliGuess, BliModel, BliTrace, LabelGuess,
    BLI_MIN_TRACES,
};
pub use poison::{
    add_trigger, make_trigger, missing_hook, noisy_sample_poison, select_fraction, BackdoorHook,
    MissingHook, NoisyHook,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum McMode {
    /// Fine-tunes the honestly trained local model.
    #[default]
    Passive,
    /// Also scales up the attacker's local learning rate during training.
    Active,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttackConfig {
    #[default]
    None,
    Dli,
    Ds {
        /// Training index of a sample the attacker knows to be class 1;
        /// the first such sample when absent.
        #[serde(default)]
        known_positive: Option<usize>,
    },
    Bli {
        #[serde(default = "default_bli_hidden")]
        hidden: Vec<usize>,
        /// Simulated traces used to fit the inversion net.
        #[serde(default = "default_aux_traces")]
        aux_traces: usize,
        /// Labeled samples per class the attacker owns for simulation.
        #[serde(default = "default_bli_aux")]
        aux_per_class: usize,
        #[serde(default = "default_fit_epochs")]
        fit_epochs: usize,
    },
    Mc {
        #[serde(default)]
        mode: McMode,
        #[serde(default = "one")]
        aux_per_class: usize,
        #[serde(default = "default_finetune")]
        finetune_epochs: usize,
        /// Local learning-rate multiplier in active mode.
        #[serde(default = "default_gamma_active")]
        gamma: f64,
        #[serde(default = "default_mc_lr")]
        lr: f64,
    },
    BackdoorReplace {
        #[serde(default = "default_trigger_fraction")]
        fraction: f64,
        #[serde(default)]
        target: usize,
        #[serde(default = "one_f")]
        gamma: f64,
        #[serde(default = "one_f")]
        trigger_value: f64,
        #[serde(default = "default_trigger_width")]
        trigger_width: usize,
    },
    NoisySample {
        #[serde(default = "default_trigger_fraction")]
        fraction: f64,
        #[serde(default = "default_noise_std")]
        noise_std: f64,
    },
    Missing {
        #[serde(default = "default_missing")]
        fraction: f64,
    },
    Cafe {
        #[serde(default = "default_cafe_iters")]
        iters: usize,
        #[serde(default = "default_cafe_lr")]
        lr: f64,
        #[serde(default = "default_cafe_batch")]
        batch: usize,
        #[serde(default = "default_cafe_init")]
        init_std: f64,
    },
}

fn default_bli_hidden() -> Vec<usize> {
    vec![64, 64]
}
fn default_aux_traces() -> usize {
    400
}
fn default_bli_aux() -> usize {
    20
}
fn default_fit_epochs() -> usize {
    200
}
fn one() -> usize {
    1
}
fn one_f() -> f64 {
    1.0
}
fn default_finetune() -> usize {
    200
}
fn default_gamma_active() -> f64 {
    10.0
}
fn default_mc_lr() -> f64 {
    0.1
}
fn default_trigger_fraction() -> f64 {
    0.01
}
fn default_trigger_width() -> usize {
    3
}
fn default_noise_std() -> f64 {
    2.0
}
fn default_missing() -> f64 {
    0.25
}
fn default_cafe_iters() -> usize {
    2000
}
fn default_cafe_lr() -> f64 {
    0.05
}
fn default_cafe_batch() -> usize {
    40
}
fn default_cafe_init() -> f64 {
    0.1
}

impl AttackConfig {
    pub fn name(&self) -> &'static str {
        match self {
            AttackConfig::None => "none",
            AttackConfig::Dli => "dli",
            AttackConfig::Ds { .. } => "ds",
            AttackConfig::Bli { .. } => "bli",
            AttackConfig::Mc { mode: McMode::Passive, .. } => "pmc",
            AttackConfig::Mc { mode: McMode::Active, .. } => "amc",
            AttackConfig::BackdoorReplace { .. } => "backdoor",
            AttackConfig::NoisySample { .. } => "noisy",
            AttackConfig::Missing { .. } => "missing",
            AttackConfig::Cafe { .. } => "cafe",
        }
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        let fraction = |f: f64| {
            if f > 0.0 && f <= 1.0 {
                Ok(())
            } else {
                Err(Error::config(format!("attack fraction must lie in (0, 1], got {f}")))
            }
        };
        match self {
            AttackConfig::None | AttackConfig::Dli => Ok(()),
            AttackConfig::Ds { .. } => {
                if classes != 2 {
                    return Err(Error::config(format!(
                        "direction scoring needs a binary task, got {classes} classes"
                    )));
                }
                Ok(())
            }
            AttackConfig::Bli { aux_traces, .. } => {
                if *aux_traces < BLI_MIN_TRACES {
                    return Err(Error::config(format!(
                        "at least {BLI_MIN_TRACES} aux traces are needed, got {aux_traces}"
                    )));
                }
                Ok(())
            }
            AttackConfig::Mc {
                aux_per_class, gamma, lr, ..
            } => {
                if *aux_per_class == 0 {
                    return Err(Error::config("model completion needs at least one aux label per class"));
                }
                if !(*gamma > 0.0) || !(*lr > 0.0) {
                    return Err(Error::config("model completion gamma and lr must be positive"));
                }
                Ok(())
            }
            AttackConfig::BackdoorReplace {
                fraction: f, target, ..
            } => {
                fraction(*f)?;
                if *target >= classes {
                    return Err(Error::config(format!(
                        "backdoor target {target} is not one of {classes} classes"
                    )));
                }
                Ok(())
            }
            AttackConfig::NoisySample { fraction: f, noise_std } => {
                fraction(*f)?;
                if !(*noise_std >= 0.0) {
                    return Err(Error::config("noise std must be nonnegative"));
                }
                Ok(())
            }
            AttackConfig::Missing { fraction: f } => fraction(*f),
            AttackConfig::Cafe { iters, batch, lr, .. } => {
                if *batch == 0 || *iters == 0 || !(*lr > 0.0) {
                    return Err(Error::config("reconstruction needs positive iters, batch and lr"));
                }
                Ok(())
            }
        }
    }
}

/// One label guess made during training.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LeakRecord {
    pub epoch: usize,
    pub index: usize,
    pub guess: LabelGuess,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LeakMethod {
    Dli,
    Ds { known_positive: usize },
}

/// Sample-level label inference from received gradient rows.
#[derive(Clone, Debug)]
pub struct LabelLeakHook {
    pub attacker: usize,
    pub method: LeakMethod,
    pub epoch: usize,
    pub records: Vec<LeakRecord>,
    /// DS batches skipped because the known positive was not in them.
    pub skipped: usize,
}

impl LabelLeakHook {
    pub fn new(attacker: usize, method: LeakMethod) -> Self {
        Self {
            attacker,
            method,
            epoch: 0,
            records: Vec::new(),
            skipped: 0,
        }
    }

    /// Guesses made during `epoch`.
    pub fn epoch_records(&self, epoch: usize) -> impl Iterator<Item = &LeakRecord> {
        self.records.iter().filter(move |r| r.epoch == epoch)
    }
}

impl AttackHooks for LabelLeakHook {
    fn attacker(&self) -> Option<usize> {
        Some(self.attacker)
    }

    fn observe(&mut self, obs: Observation<'_>) {
        let Observation::SampleLevel { indices, rows } = obs else {
            return;
        };
        let guesses = match self.method {
            LeakMethod::Dli => (0..rows.rows()).map(|r| dli_infer(rows.row(r))).collect(),
            LeakMethod::Ds { known_positive } => {
                let Some(p) = indices.iter().position(|&i| i == known_positive) else {
                    self.skipped += 1;
                    return;
                };
                match ds_infer(rows, rows.row(p)) {
                    Ok(g) => g,
                    Err(_) => {
                        self.skipped += 1;
                        return;
                    }
                }
            }
        };
        let epoch = self.epoch;
        self.records.extend(
            indices
                .iter()
                .zip(guesses)
                .map(|(&index, guess)| LeakRecord { epoch, index, guess }),
        );
    }

    fn end_epoch(&mut self, epoch: usize) {
        self.epoch = epoch + 1;
    }
}

/// Batch-level gradient of the attacker's last layer, with the batch it
/// came from.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchTrace {
    pub epoch: usize,
    pub indices: Vec<usize>,
    pub grad: Vec<f64>,
}

/// Records last-layer batch gradients for later inversion.
#[derive(Clone, Debug, Default)]
pub struct BliHook {
    pub attacker: usize,
    pub epoch: usize,
    pub traces: Vec<BatchTrace>,
    current: Vec<usize>,
}

impl BliHook {
    pub fn new(attacker: usize) -> Self {
        Self {
            attacker,
            ..Self::default()
        }
    }
}

impl AttackHooks for BliHook {
    fn attacker(&self) -> Option<usize> {
        Some(self.attacker)
    }

    // the sample ids of a batch are known to every party
    fn poison_features(&mut self, indices: &[usize], _x: &mut Tensor) {
        self.current = indices.to_vec();
    }

    fn observe(&mut self, obs: Observation<'_>) {
        if let Observation::BatchLevel { param_grads, .. } = obs {
            self.traces.push(BatchTrace {
                epoch: self.epoch,
                indices: self.current.clone(),
                grad: flatten_last_layer(param_grads),
            });
        }
    }

    fn end_epoch(&mut self, epoch: usize) {
        self.epoch = epoch + 1;
    }
}

/// Keeps the attacker's final local model; in active mode also speeds up
/// its local training.
#[derive(Clone, Debug)]
pub struct McHook {
    pub attacker: usize,
    pub lr_scale: f64,
    pub snapshot: Option<(MlpModel, Option<VibLayer>)>,
}

impl McHook {
    pub fn new(attacker: usize, lr_scale: f64) -> Self {
        Self {
            attacker,
            lr_scale,
            snapshot: None,
        }
    }
}

impl AttackHooks for McHook {
    fn attacker(&self) -> Option<usize> {
        Some(self.attacker)
    }

    fn local_lr_scale(&self) -> f64 {
        self.lr_scale
    }

    fn after_training(&mut self, local: &MlpModel, vib: Option<&VibLayer>) {
        self.snapshot = Some((local.clone(), vib.cloned()));
    }
}

/// Records one party's parameter gradients for every round it joins.
#[derive(Clone, Debug, Default)]
pub struct GradientCapture {
    pub party: usize,
    pub param_grads: Vec<Vec<Tensor>>,
}

impl GradientCapture {
    pub fn new(party: usize) -> Self {
        Self {
            party,
            param_grads: Vec::new(),
        }
    }
}

impl AttackHooks for GradientCapture {
    fn attacker(&self) -> Option<usize> {
        Some(self.party)
    }

    fn observe(&mut self, obs: Observation<'_>) {
        if let Observation::BatchLevel { param_grads, .. } = obs {
            self.param_grads.push(param_grads.to_vec());
        }
    }
}

/// Fraction of guesses that match the truth, or `None` with no guesses.
pub fn leak_accuracy<'a>(records: impl IntoIterator<Item = &'a LeakRecord>, truth: &[usize]) -> Option<f64> {
    let (mut hit, mut n) = (0usize, 0usize);
    for r in records {
        n += 1;
        hit += usize::from(r.guess.class == truth[r.index]);
    }
    (n > 0).then(|| hit as f64 / n as f64)
}
