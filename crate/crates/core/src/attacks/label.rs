//! Label inference from received gradients: per-sample sign reading,
//! direction scoring against a known positive, and batch-level inversion.

use crate::diffcore::{Graph, Rng, Tensor};
use crate::error::{Error, Result};
use crate::models::MlpModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LabelGuess {
    pub class: usize,
    /// Set when the gradient lacked the structure the rule relies on.
    pub low_confidence: bool,
}

/// Reads the label off the unique negative entry of a per-sample gradient
/// over class logits; falls back to the arg-min.
pub fn dli_infer(row: &[f64]) -> LabelGuess {
    let mut neg = row.iter().enumerate().filter(|(_, &v)| v < 0.0);
    let first = neg.next();
    if let (Some((i, _)), None) = (first, neg.next()) {
        return LabelGuess {
            class: i,
            low_confidence: false,
        };
    }
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v < row[best] {
            best = i;
        }
    }
    LabelGuess {
        class: best,
        low_confidence: true,
    }
}

/// Binary labels by the sign of cosine similarity with the gradient of a
/// known positive sample (class 1).
pub fn ds_infer(grads: &Tensor, reference: &[f64]) -> Result<Vec<LabelGuess>> {
    let rn = reference.iter().map(|v| v * v).sum::<f64>().sqrt();
    if rn == 0.0 {
        return Err(Error::AttackInapplicable(
            "reference gradient has zero norm".into(),
        ));
    }
    if grads.cols() != reference.len() {
        return Err(Error::shape(format!(
            "gradients of width {} against a reference of width {}",
            grads.cols(),
            reference.len()
        )));
    }
    Ok((0..grads.rows())
        .map(|i| {
            let row = grads.row(i);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                return LabelGuess {
                    class: 0,
                    low_confidence: true,
                };
            }
            let dot: f64 = row.iter().zip(reference).map(|(a, b)| a * b).sum();
            LabelGuess {
                class: usize::from(dot / (n * rn) > 0.0),
                low_confidence: false,
            }
        })
        .collect())
}

/// Inversion network from a batch-level gradient to label proportions.
#[derive(Clone, Debug, PartialEq)]
pub struct BliModel {
    pub net: MlpModel,
    pub classes: usize,
    mean: Vec<f64>,
    scale: Vec<f64>,
}

/// Per-class mass, estimated counts, and one guess per batch slot.
#[derive(Clone, Debug, PartialEq)]
pub struct BliGuess {
    pub mass: Vec<f64>,
    pub counts: Vec<usize>,
    pub guesses: Vec<usize>,
}

/// One aux trace: flattened gradient and the batch's labels.
pub type BliTrace = (Vec<f64>, Vec<usize>);

pub const BLI_MIN_TRACES: usize = 10;

impl BliModel {
    /// Untrained network with zero biases and identity input scaling.
    pub fn fresh(input: usize, hidden: &[usize], classes: usize, rng: &mut Rng) -> Result<Self> {
        let mut dims = vec![input];
        dims.extend_from_slice(hidden);
        dims.push(classes);
        Ok(Self {
            net: MlpModel::new(&dims, rng)?,
            classes,
            mean: vec![0.0; input],
            scale: vec![1.0; input],
        })
    }

    fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn infer(&self, grad: &[f64], batch_size: usize) -> Result<BliGuess> {
        let x = Tensor::matrix(1, grad.len(), self.standardize(grad))?;
        let logits = self.net.predict(&x)?;
        let row = logits.row(0);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let mass: Vec<f64> = row.iter().map(|v| (v - max).exp() / z).collect();
        let counts = largest_remainder(&mass, batch_size);
        let mut order: Vec<usize> = (0..self.classes).collect();
        order.sort_by(|&a, &b| mass[b].total_cmp(&mass[a]).then(a.cmp(&b)));
        let guesses = order
            .iter()
            .flat_map(|&c| std::iter::repeat(c).take(counts[c]))
            .collect();
        Ok(BliGuess {
            mass,
            counts,
            guesses,
        })
    }
}

/// Rounds `mass·total` to integers summing to `total`.
fn largest_remainder(mass: &[f64], total: usize) -> Vec<usize> {
    let raw: Vec<f64> = mass.iter().map(|m| m * total as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let mut left = total.saturating_sub(counts.iter().sum());
    let mut order: Vec<usize> = (0..mass.len()).collect();
    order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())).then(a.cmp(&b)));
    for &c in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[c] += 1;
        left -= 1;
    }
    counts
}

/// Fits the inversion network on aux traces with a soft cross-entropy
/// against each batch's label proportions.
pub fn bli_fit(
    traces: &[BliTrace],
    classes: usize,
    hidden: &[usize],
    epochs: usize,
    lr: f64,
    rng: &mut Rng,
) -> Result<BliModel> {
    if traces.len() < BLI_MIN_TRACES {
        return Err(Error::config(format!(
            "batch-level inversion needs at least {BLI_MIN_TRACES} aux traces, got {}",
            traces.len()
        )));
    }
    let width = traces[0].0.len();
    if traces.iter().any(|t| t.0.len() != width || t.1.is_empty()) {
        return Err(Error::config("aux traces differ in width or are empty"));
    }
    let mut model = BliModel::fresh(width, hidden, classes, rng)?;
    let n = traces.len() as f64;
    for j in 0..width {
        let m = traces.iter().map(|t| t.0[j]).sum::<f64>() / n;
        let v = traces.iter().map(|t| (t.0[j] - m).powi(2)).sum::<f64>() / n;
        model.mean[j] = m;
        model.scale[j] = if v > 0.0 { v.sqrt() } else { 1.0 };
    }
    let mut xs = Vec::with_capacity(traces.len() * width);
    let mut qs = Vec::with_capacity(traces.len() * classes);
    for (g, labels) in traces {
        xs.extend(model.standardize(g));
        let mut q = vec![0.0; classes];
        for &y in labels {
            if y >= classes {
                return Err(Error::config(format!("aux label {y} out of range")));
            }
            q[y] += 1.0 / labels.len() as f64;
        }
        qs.extend(q);
    }
    let x = Tensor::matrix(traces.len(), width, xs)?;
    let q = Tensor::matrix(traces.len(), classes, qs)?;
    let batch = 32.min(traces.len());
    let mut order: Vec<usize> = (0..traces.len()).collect();
    for _ in 0..epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(batch) {
            let mut g = Graph::new();
            let bound = model.net.bind(&mut g);
            let xv = g.constant(x.select_rows(chunk));
            let logits = model.net.forward(&mut g, &bound, xv)?;
            let loss = g.soft_cross_entropy(logits, &q.select_rows(chunk))?;
            let grads = g.backward(loss)?;
            model.net.sgd_update(&bound, &grads, lr)?;
        }
    }
    Ok(model)
}

/// Fraction of batch slots whose guess equals the slot's label.
pub fn bli_slot_accuracy(guess: &BliGuess, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    guess
        .guesses
        .iter()
        .zip(labels)
        .filter(|(g, y)| g == y)
        .count() as f64
        / labels.len() as f64
}

/// Overlap of estimated and true per-class counts, over the batch size.
pub fn bli_count_accuracy(guess: &BliGuess, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let mut truth = vec![0usize; guess.counts.len()];
    for &y in labels {
        if y < truth.len() {
            truth[y] += 1;
        }
    }
    truth
        .iter()
        .zip(&guess.counts)
        .map(|(a, b)| a.min(b))
        .sum::<usize>() as f64
        / labels.len() as f64
}

/// Last-layer gradient of a batch under the attacker's own stand-in
/// objective: its local output read directly as logits.
pub fn simulate_last_layer_grad(model: &MlpModel, x: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let xv = g.constant(x.clone());
    let out = model.forward(&mut g, &bound, xv)?;
    let (loss, _) = g.softmax_cross_entropy(out, labels)?;
    let grads = g.backward(loss)?;
    let all = model.gradients(&bound, &grads)?;
    Ok(flatten_last_layer(&all))
}

pub fn flatten_last_layer(param_grads: &[Tensor]) -> Vec<f64> {
    let n = param_grads.len();
    param_grads[n.saturating_sub(2)..]
        .iter()
        .flat_map(|t| t.data().iter().copied())
        .collect()
}

/// Aux traces over batches with varied label mixes: some single-class,
/// the rest with random proportions.
pub fn generate_aux_traces(
    model: &MlpModel,
    aux_x: &Tensor,
    aux_y: &[usize],
    classes: usize,
    batch: usize,
    count: usize,
    rng: &mut Rng,
) -> Result<Vec<BliTrace>> {
    let by_class: Vec<Vec<usize>> = (0..classes)
        .map(|c| (0..aux_y.len()).filter(|&i| aux_y[i] == c).collect())
        .collect();
    let present: Vec<usize> = (0..classes).filter(|&c| !by_class[c].is_empty()).collect();
    if present.is_empty() {
        return Err(Error::config("aux set is empty"));
    }
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let weights: Vec<f64> = if rng.uniform() < 0.3 {
            let c = present[rng.below(present.len())];
            (0..classes).map(|k| f64::from(u8::from(k == c))).collect()
        } else {
            (0..classes)
                .map(|k| if by_class[k].is_empty() { 0.0 } else { -rng.uniform().max(1e-12).ln() })
                .collect()
        };
        let total: f64 = weights.iter().sum();
        let mut idx = Vec::with_capacity(batch);
        for _ in 0..batch {
            let mut u = rng.uniform() * total;
            let mut c = present[0];
            for (k, &w) in weights.iter().enumerate() {
                if w > 0.0 {
                    c = k;
                    if u < w {
                        break;
                    }
                    u -= w;
                }
            }
            let pool = &by_class[c];
            idx.push(pool[rng.below(pool.len())]);
        }
        let labels: Vec<usize> = idx.iter().map(|&i| aux_y[i]).collect();
        let grad = simulate_last_layer_grad(model, &aux_x.select_rows(&idx), &labels)?;
        out.push((grad, labels));
    }
    Ok(out)
}
