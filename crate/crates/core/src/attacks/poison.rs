//! Training-time tampering by a passive party: gradient-replacement
//! backdoor, noisy samples, and missing outputs.

use std::collections::BTreeSet;

use crate::diffcore::{Rng, Tensor};
use crate::protocol::{AttackHooks, Observation};

/// `round(fraction·n)` distinct indices of `0..n`, sorted.
pub fn select_fraction(n: usize, fraction: f64, rng: &mut Rng) -> Vec<usize> {
    let k = ((fraction * n as f64).round() as usize).min(n);
    let mut s = rng.choose_distinct(n, k);
    s.sort_unstable();
    s
}

/// Additive patch: `value` on the first `width` columns, zero elsewhere.
pub fn make_trigger(cols: usize, width: usize, value: f64) -> Vec<f64> {
    (0..cols).map(|j| if j < width { value } else { 0.0 }).collect()
}

/// Adds `trigger` to the listed row positions.
pub fn add_trigger(x: &mut Tensor, rows: &[usize], trigger: &[f64]) {
    for &r in rows {
        for (v, t) in x.row_mut(r).iter_mut().zip(trigger) {
            *v += t;
        }
    }
}

/// Adds `N(0, std²)` noise to the listed row positions. The noise of a row
/// depends only on its key, so a sample is corrupted the same way every
/// time it is drawn.
pub fn noisy_sample_poison(x: &mut Tensor, rows: &[usize], keys: &[u64], std: f64, base: &Rng) {
    for (&r, &k) in rows.iter().zip(keys) {
        let mut rng = base.derive(k);
        for v in x.row_mut(r) {
            *v += std * rng.normal();
        }
    }
}

/// Replaces the listed row positions with zeros.
pub fn missing_hook(out: &mut Tensor, rows: &[usize]) {
    for &r in rows {
        out.row_mut(r).iter_mut().for_each(|v| *v = 0.0);
    }
}

fn positions(indices: &[usize], set: &BTreeSet<usize>) -> Vec<usize> {
    indices
        .iter()
        .enumerate()
        .filter(|(_, i)| set.contains(i))
        .map(|(p, _)| p)
        .collect()
}

/// Gradient-replacement backdoor.
///
/// Triggered samples carry the patch in every forward pass; their received
/// gradient rows are overwritten with `gamma` times the most recent row of
/// a known sample of the target class.
#[derive(Clone, Debug)]
pub struct BackdoorHook {
    pub attacker: usize,
    pub triggered: BTreeSet<usize>,
    pub trigger: Vec<f64>,
    pub known_target: usize,
    pub gamma: f64,
    pub cache: Option<Vec<f64>>,
    pub replaced_rows: usize,
}

impl BackdoorHook {
    pub fn new(attacker: usize, triggered: &[usize], trigger: Vec<f64>, known_target: usize, gamma: f64) -> Self {
        Self {
            attacker,
            triggered: triggered.iter().copied().collect(),
            trigger,
            known_target,
            gamma,
            cache: None,
            replaced_rows: 0,
        }
    }
}

impl AttackHooks for BackdoorHook {
    fn attacker(&self) -> Option<usize> {
        Some(self.attacker)
    }

    fn poison_features(&mut self, indices: &[usize], x: &mut Tensor) {
        add_trigger(x, &positions(indices, &self.triggered), &self.trigger);
    }

    fn observe(&mut self, obs: Observation<'_>) {
        if let Observation::SampleLevel { indices, rows } = obs {
            if let Some(p) = indices.iter().position(|&i| i == self.known_target) {
                self.cache = Some(rows.row(p).to_vec());
            }
        }
    }

    fn replace_gradient(&mut self, indices: &[usize], rows: &mut Tensor) {
        let Some(reference) = &self.cache else {
            return;
        };
        for p in positions(indices, &self.triggered) {
            for (v, r) in rows.row_mut(p).iter_mut().zip(reference) {
                *v = self.gamma * r;
            }
            self.replaced_rows += 1;
        }
    }
}

/// Persistent Gaussian corruption of a fixed sample subset.
#[derive(Clone, Debug)]
pub struct NoisyHook {
    pub attacker: usize,
    pub noisy: BTreeSet<usize>,
    pub std: f64,
    pub base: Rng,
}

impl AttackHooks for NoisyHook {
    fn attacker(&self) -> Option<usize> {
        Some(self.attacker)
    }

    fn poison_features(&mut self, indices: &[usize], x: &mut Tensor) {
        let rows = positions(indices, &self.noisy);
        let keys: Vec<u64> = rows.iter().map(|&p| indices[p] as u64).collect();
        noisy_sample_poison(x, &rows, &keys, self.std, &self.base);
    }
}

/// Zeroes the attacker's outputs for a fixed sample subset every round.
#[derive(Clone, Debug)]
pub struct MissingHook {
    pub attacker: usize,
    pub missing: BTreeSet<usize>,
}

impl AttackHooks for MissingHook {
    fn attacker(&self) -> Option<usize> {
        Some(self.attacker)
    }

    fn intercept_output(&mut self, indices: &[usize], out: &mut Tensor) {
        missing_hook(out, &positions(indices, &self.missing));
    }
}
