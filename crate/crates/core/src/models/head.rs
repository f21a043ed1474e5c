use super::mlp::{BoundMlp, MlpModel};
use crate::diffcore::{Graph, Rng, Tensor, Var};
use crate::error::{Error, Result};

/// Global model at the active party combining every party's output into
/// class logits.
#[derive(Clone, Debug, PartialEq)]
pub enum GlobalHead {
    /// Logits are the elementwise sum of the parts; the softmax lives in the
    /// loss. No trainable parameters.
    SoftmaxOfSum,
    /// Fully connected network over the concatenated parts.
    TrainableLinear(MlpModel),
}

impl GlobalHead {
    /// `hidden` empty gives a single affine layer.
    pub fn trainable(input_width: usize, hidden: &[usize], classes: usize, rng: &mut Rng) -> Result<Self> {
        let mut dims = vec![input_width];
        dims.extend_from_slice(hidden);
        dims.push(classes);
        Ok(GlobalHead::TrainableLinear(MlpModel::new(&dims, rng)?))
    }

    pub fn param_count(&self) -> usize {
        match self {
            GlobalHead::SoftmaxOfSum => 0,
            GlobalHead::TrainableLinear(m) => m.param_count(),
        }
    }

    pub fn bind(&self, g: &mut Graph) -> Option<BoundMlp> {
        match self {
            GlobalHead::SoftmaxOfSum => None,
            GlobalHead::TrainableLinear(m) => Some(m.bind(g)),
        }
    }

    /// Logits `S(part_1, …, part_K)` on the graph.
    pub fn predict(&self, g: &mut Graph, bound: Option<&BoundMlp>, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("global head needs at least one part"));
        };
        let rows = g.value(first).rows();
        if parts.iter().any(|&p| g.value(p).rows() != rows) {
            return Err(Error::shape("parts disagree on batch size"));
        }
        match (self, bound) {
            (GlobalHead::SoftmaxOfSum, _) => {
                let mut acc = first;
                for &p in &parts[1..] {
                    acc = g.add(acc, p).map_err(|_| {
                        Error::shape(format!(
                            "softmax-of-sum parts differ in width: {:?} vs {:?}",
                            g.value(first).shape(),
                            g.value(p).shape()
                        ))
                    })?;
                }
                Ok(acc)
            }
            (GlobalHead::TrainableLinear(m), Some(b)) => {
                let cat = if parts.len() == 1 {
                    first
                } else {
                    g.concat_cols(parts)?
                };
                m.forward(g, b, cat)
            }
            (GlobalHead::TrainableLinear(_), None) => Err(Error::Consistency(
                "trainable head used without bound parameters".into(),
            )),
        }
    }

    /// Logits without recording.
    pub fn predict_values(&self, parts: &[Tensor]) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars: Vec<Var> = parts.iter().map(|p| g.constant(p.clone())).collect();
        let bound = match self {
            GlobalHead::SoftmaxOfSum => None,
            GlobalHead::TrainableLinear(m) => Some(m.bind_frozen(&mut g)),
        };
        let out = self.predict(&mut g, bound.as_ref(), &vars)?;
        Ok(g.value(out).clone())
    }
}
