use crate::diffcore::{Gradients, Graph, Rng, Tensor, Var};
use crate::error::{Error, Result};

/// One affine layer `x·W + b`, `W: [n×m]`, `b: [m]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Glorot-uniform weights, zero bias.
    pub fn glorot(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.uniform_range(-limit, limit))
            .collect();
        Self {
            weight: Tensor::new(vec![fan_in, fan_out], data).expect("positive dims"),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.cols()
    }
}

/// Fully connected network with rectifiers between layers and a linear
/// output.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpModel {
    layers: Vec<Linear>,
}

/// Parameter nodes of an [`MlpModel`] registered on one graph.
#[derive(Clone, Debug)]
pub struct BoundMlp {
    vars: Vec<(Var, Var)>,
}

impl BoundMlp {
    pub fn vars(&self) -> &[(Var, Var)] {
        &self.vars
    }
}

/// Intermediate nodes of one traced forward pass.
#[derive(Clone, Debug)]
pub struct MlpTrace {
    /// Input to each layer (the network input first).
    pub layer_inputs: Vec<Var>,
    /// Affine output of each layer before the rectifier.
    pub pre_activations: Vec<Var>,
    pub output: Var,
}

impl MlpModel {
    pub fn new(dims: &[usize], rng: &mut Rng) -> Result<Self> {
        if dims.len() < 2 || dims.iter().any(|&d| d == 0) {
            return Err(Error::Param(format!(
                "an MLP needs at least two positive layer widths, got {dims:?}"
            )));
        }
        let layers = dims
            .windows(2)
            .map(|w| Linear::glorot(w[0], w[1], rng))
            .collect();
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<Linear>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Param("an MLP needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if !l.weight.is_matrix() || l.bias.len() != l.output_dim() {
                return Err(Error::shape(format!(
                    "layer {i}: weight {:?} with bias {:?}",
                    l.weight.shape(),
                    l.bias.shape()
                )));
            }
        }
        for (i, w) in layers.windows(2).enumerate() {
            if w[0].output_dim() != w[1].input_dim() {
                return Err(Error::shape(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    w[0].output_dim(),
                    i + 1,
                    w[1].input_dim()
                )));
            }
        }
        Ok(Self { layers })
    }

    /// Layer widths from input to output.
    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.layers[0].input_dim()];
        d.extend(self.layers.iter().map(Linear::output_dim));
        d
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(Linear::output_dim).unwrap_or(0)
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Linear] {
        &mut self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    pub fn bind(&self, g: &mut Graph) -> BoundMlp {
        let vars = self
            .layers
            .iter()
            .map(|l| (g.param(l.weight.clone()), g.param(l.bias.clone())))
            .collect();
        BoundMlp { vars }
    }

    /// Parameters as constants: the network is evaluated on the graph but
    /// never updated through it.
    pub fn bind_frozen(&self, g: &mut Graph) -> BoundMlp {
        let vars = self
            .layers
            .iter()
            .map(|l| (g.constant(l.weight.clone()), g.constant(l.bias.clone())))
            .collect();
        BoundMlp { vars }
    }

    /// Recorded forward pass `G(x; θ)`.
    pub fn forward(&self, g: &mut Graph, bound: &BoundMlp, x: Var) -> Result<Var> {
        Ok(self.forward_traced(g, bound, x)?.output)
    }

    pub fn forward_traced(&self, g: &mut Graph, bound: &BoundMlp, x: Var) -> Result<MlpTrace> {
        let xs = g.value(x).shape().to_vec();
        if xs.len() != 2 || xs[1] != self.input_dim() {
            return Err(Error::shape(format!(
                "model expects [B×{}] input, got {xs:?}",
                self.input_dim()
            )));
        }
        let mut layer_inputs = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        let mut h = x;
        let last = bound.vars.len() - 1;
        for (i, &(w, b)) in bound.vars.iter().enumerate() {
            layer_inputs.push(h);
            let z = g.linear(h, w, b)?;
            pre_activations.push(z);
            h = if i < last { g.relu(z) } else { z };
        }
        Ok(MlpTrace {
            layer_inputs,
            pre_activations,
            output: h,
        })
    }

    /// Forward pass without recording.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        if !x.is_matrix() || x.cols() != self.input_dim() {
            return Err(Error::shape(format!(
                "model expects [B×{}] input, got {:?}",
                self.input_dim(),
                x.shape()
            )));
        }
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = h.matmul(&l.weight)?;
            for r in 0..z.rows() {
                for (v, b) in z.row_mut(r).iter_mut().zip(l.bias.data()) {
                    *v += b;
                    if i < last && *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            h = z;
        }
        Ok(h)
    }

    /// Parameter gradients in `[W0, b0, W1, b1, …]` order.
    pub fn gradients(&self, bound: &BoundMlp, grads: &Gradients) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(2 * bound.vars.len());
        for &(w, b) in &bound.vars {
            out.push(grads.require(w)?.clone());
            out.push(grads.require(b)?.clone());
        }
        Ok(out)
    }

    /// Plain SGD on every layer.
    pub fn sgd_update(&mut self, bound: &BoundMlp, grads: &Gradients, lr: f64) -> Result<()> {
        self.sgd_update_clipped(bound, grads, lr, None)
    }

    /// SGD with per-tensor gradient norm clipping.
    pub fn sgd_update_clipped(
        &mut self,
        bound: &BoundMlp,
        grads: &Gradients,
        lr: f64,
        clip: Option<f64>,
    ) -> Result<()> {
        if bound.vars.len() != self.layers.len() {
            return Err(Error::Consistency(
                "bound parameters belong to a different model".into(),
            ));
        }
        let mut params: Vec<&mut Tensor> = Vec::with_capacity(2 * self.layers.len());
        let mut gs = Vec::with_capacity(2 * self.layers.len());
        for (l, &(w, b)) in self.layers.iter_mut().zip(&bound.vars) {
            params.push(&mut l.weight);
            params.push(&mut l.bias);
            gs.push(grads.get(w));
            gs.push(grads.get(b));
        }
        crate::diffcore::sgd_step_clipped(&mut params, &gs, lr, clip)
    }

    /// Flattened parameter values, layer by layer.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            v.extend_from_slice(l.weight.data());
            v.extend_from_slice(l.bias.data());
        }
        v
    }

    /// Records the backward pass of a traced forward as ordinary graph ops.
    ///
    /// Given `upstream = ∂ℓ/∂output`, returns `(∂ℓ/∂input, [∂ℓ/∂W0, ∂ℓ/∂b0, …])`
    /// as nodes that are themselves differentiable in the traced input and in
    /// `upstream`. Rectifier masks are taken from the traced values and held
    /// fixed.
    pub fn backward_on_graph(
        &self,
        g: &mut Graph,
        bound: &BoundMlp,
        trace: &MlpTrace,
        upstream: Var,
    ) -> Result<(Var, Vec<Var>)> {
        let n = self.layers.len();
        let mut param_grads: Vec<Option<(Var, Var)>> = vec![None; n];
        let mut d = upstream;
        for i in (0..n).rev() {
            if i < n - 1 {
                let mask = g.value(trace.pre_activations[i]).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                d = g.mul_const(d, mask)?;
            }
            let a_t = g.transpose(trace.layer_inputs[i])?;
            let dw = g.matmul(a_t, d)?;
            // bias gradient: column sums, via ones·d
            let ones = g.constant(Tensor::full(&[1, g.value(d).rows()], 1.0));
            let db = g.matmul(ones, d)?;
            param_grads[i] = Some((dw, db));
            let w_t = g.transpose(bound.vars[i].0)?;
            d = g.matmul(d, w_t)?;
        }
        let flat = param_grads
            .into_iter()
            .flat_map(|p| {
                let (w, b) = p.expect("filled above");
                [w, b]
            })
            .collect();
        Ok((d, flat))
    }
}
