//! Gradient-transform baseline defenses and the bottleneck loss assembly.
//!
//! The transforms act on the per-sample gradient rows the active party is
//! about to send to passive parties. The mutual-information defense is not a
//! transform: it changes the model (see [`crate::models::VibLayer`]) and the
//! loss (see [`mid_total_loss`]).

use serde::{Deserialize, Serialize};

use crate::diffcore::{clip_by_norm, Graph, Rng, Tensor, Var};
use crate::error::{Error, Result};

/// Where the bottleneck layer sits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MidPlacement {
    #[default]
    Active,
    Passive,
}

/// Starting point of a bottleneck layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VibInit {
    /// A jittered pass-through: before training, `Z ≈ H`.
    #[default]
    Identity,
    /// Glorot-uniform encoder and decoder.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MidConfig {
    /// Weight applied to every protected party unless `lambdas` is given.
    pub lambda: f64,
    /// Optional per-party weights, one per protected passive party in id order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambdas: Option<Vec<f64>>,
    #[serde(default)]
    pub placement: MidPlacement,
    /// Protected passive party ids; all passive parties when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub protected: Option<Vec<usize>>,
    /// Bottleneck width; defaults to the width of the protected output.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bottleneck: Option<usize>,
    /// Ignored (always random) when the bottleneck is narrower or wider
    /// than the protected output.
    #[serde(default)]
    pub init: VibInit,
}

impl MidConfig {
    pub fn new(lambda: f64, placement: MidPlacement) -> Self {
        Self {
            lambda,
            lambdas: None,
            placement,
            protected: None,
            bottleneck: None,
            init: VibInit::Identity,
        }
    }

    /// `(party id, λ)` for each protected party among `passive_ids`.
    pub fn weights(&self, passive_ids: &[usize]) -> Result<Vec<(usize, f64)>> {
        let ids: Vec<usize> = match &self.protected {
            Some(p) => {
                for id in p {
                    if !passive_ids.contains(id) {
                        return Err(Error::config(format!("party {id} is not a passive party")));
                    }
                }
                p.clone()
            }
            None => passive_ids.to_vec(),
        };
        let out: Vec<(usize, f64)> = match &self.lambdas {
            Some(ls) => {
                if ls.len() != ids.len() {
                    return Err(Error::config(format!(
                        "{} per-party weights for {} protected parties",
                        ls.len(),
                        ids.len()
                    )));
                }
                ids.into_iter().zip(ls.iter().copied()).collect()
            }
            None => ids.into_iter().map(|id| (id, self.lambda)).collect(),
        };
        for &(id, l) in &out {
            if !(l >= 0.0) || !l.is_finite() {
                return Err(Error::config(format!("party {id}: bottleneck weight {l} must be ≥ 0")));
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DefenseConfig {
    #[default]
    None,
    DpGauss {
        clip: f64,
        sigma: f64,
    },
    DpLaplace {
        clip: f64,
        scale: f64,
    },
    GradSparse {
        drop_rate: f64,
    },
    DiscreteGrad {
        bins: usize,
        /// Quantization range; 3× the previous epoch's gradient std when absent.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        clamp: Option<f64>,
    },
    Mid(MidConfig),
}

impl DefenseConfig {
    pub fn name(&self) -> &'static str {
        match self {
            DefenseConfig::None => "none",
            DefenseConfig::DpGauss { .. } => "dp_gauss",
            DefenseConfig::DpLaplace { .. } => "dp_laplace",
            DefenseConfig::GradSparse { .. } => "grad_sparse",
            DefenseConfig::DiscreteGrad { .. } => "discrete_grad",
            DefenseConfig::Mid(_) => "mid",
        }
    }

    pub fn mid(&self) -> Option<&MidConfig> {
        match self {
            DefenseConfig::Mid(m) => Some(m),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(format!("{name} must be positive, got {v}")))
            }
        };
        let nonneg = |name: &str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(format!("{name} must be nonnegative, got {v}")))
            }
        };
        match self {
            DefenseConfig::None => Ok(()),
            DefenseConfig::DpGauss { clip, sigma } => {
                pos("clip", *clip)?;
                nonneg("sigma", *sigma)
            }
            DefenseConfig::DpLaplace { clip, scale } => {
                pos("clip", *clip)?;
                nonneg("scale", *scale)
            }
            DefenseConfig::GradSparse { drop_rate } => {
                if (0.0..1.0).contains(drop_rate) {
                    Ok(())
                } else {
                    Err(Error::config(format!("drop_rate must lie in [0, 1), got {drop_rate}")))
                }
            }
            DefenseConfig::DiscreteGrad { bins, clamp } => {
                if *bins < 2 {
                    return Err(Error::config(format!("bins must be at least 2, got {bins}")));
                }
                match clamp {
                    Some(c) => pos("clamp", *c),
                    None => Ok(()),
                }
            }
            DefenseConfig::Mid(m) => {
                nonneg("lambda", m.lambda)?;
                if let Some(ls) = &m.lambdas {
                    for &l in ls {
                        nonneg("lambda", l)?;
                    }
                }
                if m.bottleneck == Some(0) {
                    return Err(Error::config("bottleneck width must be positive"));
                }
                Ok(())
            }
        }
    }
}

/// Additive noise distribution for [`apply_dp`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Noise {
    Gauss { sigma: f64 },
    Laplace { scale: f64 },
}

impl Noise {
    fn draw(self, rng: &mut Rng) -> f64 {
        match self {
            Noise::Gauss { sigma } => sigma * rng.normal(),
            Noise::Laplace { scale } => rng.laplace(scale),
        }
    }
}

fn dp_row(row: &mut [f64], clip: f64, noise: Noise, rng: &mut Rng) -> Result<()> {
    let clipped = clip_by_norm(&Tensor::vector(row.to_vec()), clip)?;
    for (r, c) in row.iter_mut().zip(clipped.data()) {
        *r = c + noise.draw(rng);
    }
    Ok(())
}

/// Clips each row to 2-norm `clip`, then adds i.i.d. noise per element.
pub fn apply_dp(g: &Tensor, clip: f64, noise: Noise, rng: &mut Rng) -> Result<Tensor> {
    let mut out = g.clone();
    for i in 0..out.rows() {
        dp_row(out.row_mut(i), clip, noise, rng)?;
    }
    Ok(out)
}

/// [`apply_dp`] with an independent stream per row, derived from `base`
/// and that row's key (its sample index). The result for a row does not
/// depend on where the row sits in the batch.
pub fn apply_dp_keyed(g: &Tensor, clip: f64, noise: Noise, base: &Rng, keys: &[u64]) -> Result<Tensor> {
    if keys.len() != g.rows() {
        return Err(Error::shape(format!("{} row keys for {} rows", keys.len(), g.rows())));
    }
    let mut out = g.clone();
    for (i, &k) in keys.iter().enumerate() {
        let mut rng = base.derive(k);
        dp_row(out.row_mut(i), clip, noise, &mut rng)?;
    }
    Ok(out)
}

/// Zeroes the `⌊drop_rate·n⌋` smallest-magnitude entries of a row. Among
/// equal magnitudes the lower index is dropped first; kept entries are
/// untouched.
pub fn apply_grad_sparse(row: &[f64], drop_rate: f64) -> Vec<f64> {
    let n = row.len();
    let drop = ((drop_rate * n as f64).floor() as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    // stable sort keeps index order among ties
    order.sort_by(|&a, &b| row[a].abs().total_cmp(&row[b].abs()));
    let mut out = row.to_vec();
    for &i in &order[..drop] {
        out[i] = 0.0;
    }
    out
}

/// Row-wise [`apply_grad_sparse`] over a matrix.
pub fn apply_grad_sparse_rows(g: &Tensor, drop_rate: f64) -> Tensor {
    let mut out = g.clone();
    for i in 0..out.rows() {
        let r = apply_grad_sparse(g.row(i), drop_rate);
        out.row_mut(i).copy_from_slice(&r);
    }
    out
}

/// Clamps to `[-clamp, clamp]` and snaps to the nearest of `bins` uniform
/// bin centers spanning that interval.
pub fn apply_discrete_grad(g: &Tensor, bins: usize, clamp: f64) -> Result<Tensor> {
    if bins < 2 {
        return Err(Error::Param(format!("bins must be at least 2, got {bins}")));
    }
    if !(clamp > 0.0) {
        return Err(Error::Param(format!("clamp must be positive, got {clamp}")));
    }
    let width = 2.0 * clamp / bins as f64;
    Ok(g.map(|v| {
        let c = v.clamp(-clamp, clamp);
        let k = (((c + clamp) / width).floor() as usize).min(bins - 1);
        -clamp + width * (k as f64 + 0.5)
    }))
}

/// `ce + Σ λ^k·kl^k` on the graph.
pub fn mid_total_loss(g: &mut Graph, ce: Var, kls: &[(f64, Var)]) -> Result<Var> {
    let mut total = ce;
    for &(lambda, kl) in kls {
        if !(lambda >= 0.0) {
            return Err(Error::config(format!("bottleneck weight {lambda} must be ≥ 0")));
        }
        let weighted = g.scale(kl, lambda);
        total = g.add(total, weighted)?;
    }
    Ok(total)
}

/// Value-level twin of [`mid_total_loss`].
pub fn mid_total_loss_value(ce: f64, kls: &[(f64, f64)]) -> Result<f64> {
    let mut total = ce;
    for &(lambda, kl) in kls {
        if !(lambda >= 0.0) {
            return Err(Error::config(format!("bottleneck weight {lambda} must be ≥ 0")));
        }
        total += lambda * kl;
    }
    Ok(total)
}

/// Stateful application of a [`DefenseConfig`] to outgoing gradient rows.
#[derive(Clone, Debug)]
pub struct GradientDefense {
    config: DefenseConfig,
    // running second moment for the quantizer's default range
    sum: f64,
    sum_sq: f64,
    count: usize,
    epoch_clamp: Option<f64>,
}

impl GradientDefense {
    pub fn new(config: DefenseConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            sum: 0.0,
            sum_sq: 0.0,
            count: 0,
            epoch_clamp: None,
        })
    }

    pub fn config(&self) -> &DefenseConfig {
        &self.config
    }

    /// Transforms rows in place. `keys` are the rows' sample indices.
    pub fn apply(&mut self, rows: &mut Tensor, rng: &Rng, keys: &[u64]) -> Result<()> {
        match &self.config {
            DefenseConfig::None | DefenseConfig::Mid(_) => {}
            DefenseConfig::DpGauss { clip, sigma } => {
                *rows = apply_dp_keyed(rows, *clip, Noise::Gauss { sigma: *sigma }, rng, keys)?;
            }
            DefenseConfig::DpLaplace { clip, scale } => {
                *rows = apply_dp_keyed(rows, *clip, Noise::Laplace { scale: *scale }, rng, keys)?;
            }
            DefenseConfig::GradSparse { drop_rate } => {
                *rows = apply_grad_sparse_rows(rows, *drop_rate);
            }
            DefenseConfig::DiscreteGrad { bins, clamp } => {
                for &v in rows.data() {
                    self.sum += v;
                    self.sum_sq += v * v;
                    self.count += 1;
                }
                let range = match (clamp, self.epoch_clamp) {
                    (Some(c), _) => *c,
                    (None, Some(c)) => c,
                    (None, None) => 3.0 * self.running_std(),
                };
                if range > 0.0 {
                    *rows = apply_discrete_grad(rows, *bins, range)?;
                }
            }
        }
        Ok(())
    }

    fn running_std(&self) -> f64 {
        if self.count == 0 {
            return 0.0;
        }
        let n = self.count as f64;
        let mean = self.sum / n;
        (self.sum_sq / n - mean * mean).max(0.0).sqrt()
    }

    /// Fixes the quantizer's default range for the next epoch.
    pub fn end_epoch(&mut self) {
        let s = self.running_std();
        if s > 0.0 {
            self.epoch_clamp = Some(3.0 * s);
        }
        self.sum = 0.0;
        self.sum_sq = 0.0;
        self.count = 0;
    }
}
