use super::mlp::{BoundMlp, Linear, MlpModel, MlpTrace};
use crate::diffcore::{Graph, Rng, Tensor, Var};
use crate::error::{Error, Result};

/// `log σ²` is clamped into `[-LOG_VAR_BOUND, LOG_VAR_BOUND]` before use.
pub const LOG_VAR_BOUND: f64 = 10.0;

/// Variational information bottleneck inserted after a party's local output.
///
/// The encoder maps `H` (width `h`) to `2·d` values read as `(μ, log σ²)`;
/// a sample `T = μ + ε·σ` is decoded back to `Z`. The regularizer is the
/// batch-mean KL from `N(μ, σ²)` to the standard normal prior, weighted by
/// `lambda`. With `lambda = 0` the layer stays in the data path.
#[derive(Clone, Debug, PartialEq)]
pub struct VibLayer {
    pub encoder: MlpModel,
    pub decoder: MlpModel,
    bottleneck: usize,
    lambda: f64,
}

#[derive(Clone, Debug)]
pub struct BoundVib {
    pub encoder: BoundMlp,
    pub decoder: BoundMlp,
}

/// Nodes produced by one pass through a [`VibLayer`].
#[derive(Clone, Debug)]
pub struct VibOutput {
    pub z: Var,
    pub kl: Var,
    pub t: Var,
    pub mu: Var,
    pub log_var: Var,
    pub encoder_trace: MlpTrace,
    pub decoder_trace: MlpTrace,
}

/// Whether `T` is sampled or set to its mean.
pub enum VibMode<'a> {
    Train(&'a mut Rng),
    Eval,
}

impl VibLayer {
    /// Single-hidden-layer encoder and decoder, hidden width `2·bottleneck`.
    pub fn new(
        input_dim: usize,
        bottleneck: usize,
        output_dim: usize,
        lambda: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        let hidden = 2 * bottleneck;
        let encoder = MlpModel::new(&[input_dim, hidden, 2 * bottleneck], rng)?;
        let decoder = MlpModel::new(&[bottleneck, hidden, output_dim], rng)?;
        Self::from_parts(encoder, decoder, lambda)
    }

    pub fn from_parts(encoder: MlpModel, decoder: MlpModel, lambda: f64) -> Result<Self> {
        check_lambda(lambda)?;
        let enc_out = encoder.output_dim();
        if enc_out % 2 != 0 || enc_out / 2 != decoder.input_dim() {
            return Err(Error::shape(format!(
                "encoder width {enc_out} must be twice the decoder input {}",
                decoder.input_dim()
            )));
        }
        Ok(Self {
            bottleneck: enc_out / 2,
            encoder,
            decoder,
            lambda,
        })
    }

    /// A layer whose eval-mode map is exactly the identity on width `w`:
    /// the encoder splits `H` into `relu(H)` and `relu(-H)` and recombines
    /// them into `μ = H` with `log σ² = -LOG_VAR_BOUND`; the decoder undoes
    /// the same split on `T`.
    pub fn identity(w: usize, lambda: f64) -> Result<Self> {
        let split = {
            let mut t = Tensor::zeros(&[w, 2 * w]);
            for i in 0..w {
                t.set(i, i, 1.0);
                t.set(i, w + i, -1.0);
            }
            t
        };
        let merge = |out: usize| {
            let mut t = Tensor::zeros(&[2 * w, out]);
            for i in 0..w {
                t.set(i, i, 1.0);
                t.set(w + i, i, -1.0);
            }
            t
        };
        let mut enc_bias = vec![0.0; 2 * w];
        for b in &mut enc_bias[w..] {
            *b = -LOG_VAR_BOUND;
        }
        let encoder = MlpModel::from_layers(vec![
            Linear {
                weight: split.clone(),
                bias: Tensor::zeros(&[2 * w]),
            },
            Linear {
                weight: merge(2 * w),
                bias: Tensor::vector(enc_bias),
            },
        ])?;
        let decoder = MlpModel::from_layers(vec![
            Linear {
                weight: split,
                bias: Tensor::zeros(&[2 * w]),
            },
            Linear {
                weight: merge(w),
                bias: Tensor::zeros(&[w]),
            },
        ])?;
        Self::from_parts(encoder, decoder, lambda)
    }

    /// [`VibLayer::identity`] with `N(0, jitter²)` added to every weight
    /// and `log σ²` starting at `log_var` instead of the lower bound.
    pub fn near_identity(w: usize, lambda: f64, jitter: f64, log_var: f64, rng: &mut Rng) -> Result<Self> {
        let mut v = Self::identity(w, lambda)?;
        for m in [&mut v.encoder, &mut v.decoder] {
            for l in m.layers_mut() {
                for x in l.weight.data_mut() {
                    *x += jitter * rng.normal();
                }
            }
        }
        let last = v.encoder.layers_mut().last_mut().expect("two layers");
        for b in &mut last.bias.data_mut()[w..] {
            *b = log_var;
        }
        Ok(v)
    }

    pub fn bottleneck(&self) -> usize {
        self.bottleneck
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn set_lambda(&mut self, lambda: f64) -> Result<()> {
        check_lambda(lambda)?;
        self.lambda = lambda;
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.decoder.output_dim()
    }

    pub fn param_count(&self) -> usize {
        self.encoder.param_count() + self.decoder.param_count()
    }

    pub fn bind(&self, g: &mut Graph) -> BoundVib {
        BoundVib {
            encoder: self.encoder.bind(g),
            decoder: self.decoder.bind(g),
        }
    }

    pub fn bind_frozen(&self, g: &mut Graph) -> BoundVib {
        BoundVib {
            encoder: self.encoder.bind_frozen(g),
            decoder: self.decoder.bind_frozen(g),
        }
    }

    /// `H → (μ, log σ²) → T → Z`, plus the KL regularizer on `(μ, log σ²)`.
    pub fn forward(
        &self,
        g: &mut Graph,
        bound: &BoundVib,
        h: Var,
        mode: VibMode<'_>,
    ) -> Result<VibOutput> {
        let encoder_trace = self.encoder.forward_traced(g, &bound.encoder, h)?;
        let d = self.bottleneck;
        let mu = g.slice_cols(encoder_trace.output, 0, d)?;
        let raw_lv = g.slice_cols(encoder_trace.output, d, 2 * d)?;
        let log_var = g.clamp(raw_lv, -LOG_VAR_BOUND, LOG_VAR_BOUND);
        let t = match mode {
            VibMode::Train(rng) => g.reparam_sample(mu, log_var, rng)?,
            VibMode::Eval => mu,
        };
        let decoder_trace = self.decoder.forward_traced(g, &bound.decoder, t)?;
        let kl = g.gaussian_kl(mu, log_var)?;
        Ok(VibOutput {
            z: decoder_trace.output,
            kl,
            t,
            mu,
            log_var,
            encoder_trace,
            decoder_trace,
        })
    }

    /// Eval-mode `(Z, μ, log σ²)` without recording.
    pub fn predict(&self, h: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let enc = self.encoder.predict(h)?;
        let d = self.bottleneck;
        let mu = enc.select_cols(&(0..d).collect::<Vec<_>>());
        let lv = enc
            .select_cols(&(d..2 * d).collect::<Vec<_>>())
            .map(|v| v.clamp(-LOG_VAR_BOUND, LOG_VAR_BOUND));
        let z = self.decoder.predict(&mu)?;
        Ok((z, mu, lv))
    }

    pub fn sgd_update(
        &mut self,
        bound: &BoundVib,
        grads: &crate::diffcore::Gradients,
        lr: f64,
        clip: Option<f64>,
    ) -> Result<()> {
        self.encoder.sgd_update_clipped(&bound.encoder, grads, lr, clip)?;
        self.decoder.sgd_update_clipped(&bound.decoder, grads, lr, clip)
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::config(format!(
            "bottleneck weight must be a finite nonnegative number, got {lambda}"
        )));
    }
    Ok(())
}
