//! Model completion: a classifier built from a passive party's trained
//! local model plus a few labeled samples.

use crate::diffcore::{Graph, Rng, Tensor};
use crate::error::{Error, Result};
use crate::models::{Linear, MlpModel};

/// Appends an affine head of width `classes` to `snapshot` and fine-tunes
/// the whole stack on the aux set with full-batch gradient descent.
pub fn mc_attack(
    snapshot: &MlpModel,
    aux_x: &Tensor,
    aux_y: &[usize],
    classes: usize,
    epochs: usize,
    lr: f64,
    rng: &mut Rng,
) -> Result<MlpModel> {
    if aux_y.is_empty() {
        return Err(Error::config("model completion needs at least one aux sample"));
    }
    if aux_x.rows() != aux_y.len() {
        return Err(Error::shape(format!(
            "{} aux rows for {} labels",
            aux_x.rows(),
            aux_y.len()
        )));
    }
    let mut layers = snapshot.layers().to_vec();
    layers.push(Linear::glorot(snapshot.output_dim(), classes, rng));
    let mut model = MlpModel::from_layers(layers)?;
    for _ in 0..epochs {
        let mut g = Graph::new();
        let bound = model.bind(&mut g);
        let x = g.constant(aux_x.clone());
        let logits = model.forward(&mut g, &bound, x)?;
        let (loss, _) = g.softmax_cross_entropy(logits, aux_y)?;
        let grads = g.backward(loss)?;
        model.sgd_update(&bound, &grads, lr)?;
    }
    Ok(model)
}

pub fn mc_infer(model: &MlpModel, x: &Tensor) -> Result<Vec<usize>> {
    let logits = model.predict(x)?;
    Ok(crate::protocol::argmax(&logits))
}

/// `per_class` indices of each class, taken in index order.
pub fn aux_subset(labels: &[usize], classes: usize, per_class: usize) -> Vec<usize> {
    let mut out = Vec::new();
    for c in 0..classes {
        out.extend((0..labels.len()).filter(|&i| labels[i] == c).take(per_class));
    }
    out
}
