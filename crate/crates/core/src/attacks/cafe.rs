//! White-box feature reconstruction by joint gradient and output matching.
//!
//! The attacker knows a passive party's local model (and bottleneck, if
//! any), the gradient rows it sent back for a batch, the outputs it
//! received, and the resulting gradient of the local parameters. Dummy
//! inputs are optimized until replaying the round on them reproduces those
//! observations.

use std::io::Write;
use std::path::Path;

use crate::analysis::psnr;
use crate::diffcore::{Graph, Rng, Tensor, Var};
use crate::error::{Error, Result};
use crate::models::{MlpModel, VibLayer, VibMode, LOG_VAR_BOUND};

/// What the attacker saw for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct CafeObservation {
    /// Local parameter gradient, `[W0, b0, W1, b1, …]`.
    pub param_grads: Vec<Tensor>,
    /// Outputs received from the party.
    pub outputs: Tensor,
    /// Gradient rows sent to the party.
    pub upstream: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CafeConfig {
    pub iters: usize,
    pub lr: f64,
    pub init_std: f64,
    /// Learning rate after the last iteration, as a fraction of `lr`.
    pub final_lr_ratio: f64,
}

impl Default for CafeConfig {
    fn default() -> Self {
        Self {
            iters: 2000,
            lr: 0.05,
            init_std: 0.1,
            final_lr_ratio: 1e-3,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Reconstruction {
    pub x: Tensor,
    pub objective: f64,
    pub iterations: usize,
}

struct Replay {
    outputs: Var,
    param_grads: Vec<Var>,
}

/// Replays a round on `x`. The bottleneck is run at its mean since the
/// party's sampling noise is unknown to the attacker.
fn replay(
    g: &mut Graph,
    model: &MlpModel,
    vib: Option<&VibLayer>,
    x: Var,
    upstream: &Tensor,
) -> Result<Replay> {
    let bound = model.bind_frozen(g);
    let trace = model.forward_traced(g, &bound, x)?;
    let up = g.constant(upstream.clone());
    let (outputs, d_h) = match vib {
        None => (trace.output, up),
        Some(v) => {
            let vb = v.bind_frozen(g);
            let o = v.forward(g, &vb, trace.output, VibMode::Eval)?;
            let b = upstream.rows() as f64;
            let lambda = v.lambda();
            let (d_t, _) = v.decoder.backward_on_graph(g, &vb.decoder, &o.decoder_trace, up)?;
            let kl_mu = g.scale(o.mu, lambda / b);
            let d_mu = g.add(d_t, kl_mu)?;
            let lv = g.value(o.log_var).clone();
            let d = v.bottleneck();
            let raw = g.value(o.encoder_trace.output).select_cols(&(d..2 * d).collect::<Vec<_>>());
            let mask = raw.map(|r| if r.abs() <= LOG_VAR_BOUND { 1.0 } else { 0.0 });
            let e = g.exp(o.log_var);
            let ones = g.constant(Tensor::full(lv.shape(), 1.0));
            let e1 = g.sub(e, ones)?;
            let e1 = g.scale(e1, lambda / (2.0 * b));
            let d_lv = g.mul_const(e1, mask)?;
            let d_enc = g.concat_cols(&[d_mu, d_lv])?;
            let (d_h, _) = v.encoder.backward_on_graph(g, &vb.encoder, &o.encoder_trace, d_enc)?;
            (o.z, d_h)
        }
    };
    let (_, param_grads) = model.backward_on_graph(g, &bound, &trace, d_h)?;
    Ok(Replay {
        outputs,
        param_grads,
    })
}

/// The observation an attacker would record if the party's inputs were
/// `x` and the bottleneck ran at its mean.
pub fn simulate_observation(
    model: &MlpModel,
    vib: Option<&VibLayer>,
    x: &Tensor,
    upstream: &Tensor,
) -> Result<CafeObservation> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let r = replay(&mut g, model, vib, xv, upstream)?;
    Ok(CafeObservation {
        param_grads: r.param_grads.iter().map(|&p| g.value(p).clone()).collect(),
        outputs: g.value(r.outputs).clone(),
        upstream: upstream.clone(),
    })
}

fn check_observation(model: &MlpModel, obs: &CafeObservation) -> Result<()> {
    let expected = 2 * model.layers().len();
    if obs.param_grads.len() != expected {
        return Err(Error::shape(format!(
            "{} parameter gradients for a model with {expected} parameter tensors",
            obs.param_grads.len()
        )));
    }
    if obs.outputs.rows() != obs.upstream.rows() {
        return Err(Error::shape(format!(
            "{} output rows but {} gradient rows",
            obs.outputs.rows(),
            obs.upstream.rows()
        )));
    }
    Ok(())
}

/// Sum of squared mismatches, each normalized by the observed magnitude.
fn objective_node(g: &mut Graph, replayed: &Replay, obs: &CafeObservation) -> Result<Var> {
    let mut terms = Vec::with_capacity(replayed.param_grads.len() + 1);
    let pairs = replayed
        .param_grads
        .iter()
        .zip(&obs.param_grads)
        .chain(std::iter::once((&replayed.outputs, &obs.outputs)));
    for (&v, o) in pairs {
        let shape = g.value(v).shape().to_vec();
        let target = o.clone().reshape(shape)?;
        let scale = 1.0 / target.sum_squares().max(1e-12);
        let t = g.constant(target);
        let diff = g.sub(v, t)?;
        let sq = g.sum_squares(diff);
        terms.push(g.scale(sq, scale));
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    Ok(total)
}

pub fn cafe_objective(
    model: &MlpModel,
    vib: Option<&VibLayer>,
    x: &Tensor,
    obs: &CafeObservation,
) -> Result<f64> {
    check_observation(model, obs)?;
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let r = replay(&mut g, model, vib, xv, &obs.upstream)?;
    let f = objective_node(&mut g, &r, obs)?;
    Ok(g.scalar(f))
}

/// Projected Adam on the dummy inputs, kept inside `[0, 1]`, with the step
/// size decaying geometrically to `final_lr_ratio · lr`.
///
/// Starts from `init` when given, otherwise from `N(0, init_std²)` draws.
pub fn cafe_reconstruct(
    model: &MlpModel,
    vib: Option<&VibLayer>,
    obs: &CafeObservation,
    cfg: &CafeConfig,
    init: Option<Tensor>,
    rng: &mut Rng,
) -> Result<Reconstruction> {
    check_observation(model, obs)?;
    let shape = vec![obs.upstream.rows(), model.input_dim()];
    let mut x = match init {
        Some(t) => {
            if t.shape() != shape.as_slice() {
                return Err(Error::shape(format!("initial guess {:?}, expected {shape:?}", t.shape())));
            }
            t
        }
        None => {
            let n = shape[0] * shape[1];
            Tensor::new(shape, (0..n).map(|_| cfg.init_std * rng.normal()).collect())?
        }
    };
    let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-12);
    let mut m = vec![0.0; x.len()];
    let mut v = vec![0.0; x.len()];
    let decay = cfg.final_lr_ratio.powf(1.0 / cfg.iters.max(1) as f64);
    let mut lr = cfg.lr;
    let mut objective = f64::NAN;
    let mut iterations = 0;
    for it in 0..cfg.iters {
        let mut g = Graph::new();
        let xv = g.param(x.clone());
        let r = replay(&mut g, model, vib, xv, &obs.upstream)?;
        let f = objective_node(&mut g, &r, obs)?;
        objective = g.scalar(f);
        if !objective.is_finite() {
            return Err(Error::ReconstructionDiverged {
                iteration: it,
                objective,
            });
        }
        if objective == 0.0 {
            break;
        }
        let grads = g.backward(f)?;
        let d = grads.require(xv)?;
        let t = (it + 1) as i32;
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        for (((xi, mi), vi), &gi) in x.data_mut().iter_mut().zip(&mut m).zip(&mut v).zip(d.data()) {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let step = lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
            *xi = (*xi - step).clamp(0.0, 1.0);
        }
        lr *= decay;
        iterations = it + 1;
    }
    if iterations == cfg.iters {
        objective = cafe_objective(model, vib, &x, obs)?;
    }
    Ok(Reconstruction {
        x,
        objective,
        iterations,
    })
}

/// Writes one image as binary portable graymap, mapping `[0, 1]` to `0..=255`.
pub fn write_pgm(path: impl AsRef<Path>, pixels: &[f64], height: usize, width: usize) -> Result<()> {
    if pixels.len() != height * width {
        return Err(Error::shape(format!(
            "{} pixels for a {height}×{width} image",
            pixels.len()
        )));
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P5\n{width} {height}\n255\n")?;
    let bytes: Vec<u8> = pixels
        .iter()
        .map(|p| (p.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}

/// Per-row PSNR of a reconstruction against the originals (peak 1).
pub fn row_psnr(truth: &Tensor, recon: &Tensor) -> Result<Vec<f64>> {
    if truth.shape() != recon.shape() {
        return Err(Error::shape(format!(
            "truth {:?} vs reconstruction {:?}",
            truth.shape(),
            recon.shape()
        )));
    }
    (0..truth.rows())
        .map(|r| psnr(truth.row(r), recon.row(r)))
        .collect()
}

/// Writes `image,psnr` lines; infinite values are written as `inf`.
pub fn write_psnr_csv(path: impl AsRef<Path>, values: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
    w.write_record(["image", "psnr"]).map_err(|e| Error::Format(e.to_string()))?;
    for (i, v) in values.iter().enumerate() {
        w.write_record([i.to_string(), v.to_string()])
            .map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}
