//! Minimal reverse-mode differentiation over dense `f64` tensors.
//!
//! Only the operations the simulator needs are provided: affine layers,
//! rectifiers, softmax cross-entropy, the Gaussian KL regularizer, the
//! reparameterized sample, and a handful of elementwise helpers. All
//! reductions run in a fixed left-to-right order so that repeated runs are
//! bit-identical.

mod graph;
mod rng;
mod tensor;


pub use graph::{sgd_step, sgd_step_clipped, Gradients, Graph, Var};
pub use rng::{stream_id, Rng};
pub use tensor::{clip_by_norm, Tensor};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn linear_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[[1.0, 2.0]]).unwrap());
        let w = g.param(Tensor::identity(2));
        let b = g.param(Tensor::vector(vec![0.0, 0.0]));
        let y = g.linear(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0]);

        let x = g.constant(Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap());
        let w = g.param(Tensor::from_rows(&[[2.0, 3.0], [4.0, 5.0]]).unwrap());
        let b = g.param(Tensor::vector(vec![1.0, 1.0]));
        let y = g.linear(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 4.0, 5.0, 6.0]);

        let x = g.constant(Tensor::zeros(&[3, 2]));
        let w = g.param(Tensor::from_rows(&[[0.3], [-1.2]]).unwrap());
        let b = g.param(Tensor::vector(vec![7.0]));
        let y = g.linear(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[7.0, 7.0, 7.0]);
    }

    #[test]
    fn linear_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 3]));
        let w = g.param(Tensor::zeros(&[2, 2]));
        let b = g.param(Tensor::zeros(&[2]));
        let err = g.linear(x, w, b).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Shape(_)));
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn relu_forward_and_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);

        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![-1.0, 2.0]));
        let y = g.relu(x);
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn softmax_cross_entropy_examples() {
        let mut g = Graph::new();
        let logits = g.param(Tensor::full(&[3, 4], 0.7));
        let (loss, _) = g.softmax_cross_entropy(logits, &[0, 1, 3]).unwrap();
        assert!(close(g.scalar(loss), 4f64.ln(), 1e-12));

        let mut g = Graph::new();
        let logits = g.param(Tensor::from_rows(&[[10.0, 0.0, 0.0]]).unwrap());
        let (loss, _) = g.softmax_cross_entropy(logits, &[0]).unwrap();
        // ln(1 + 2e^-10)
        let expected = (1.0 + 2.0 * (-10f64).exp()).ln();
        assert!(close(g.scalar(loss), expected, 1e-15));
        assert!(close(g.scalar(loss), 9.08e-5, 1e-7));
    }

    #[test]
    fn softmax_cross_entropy_gradient_sign_structure() {
        let mut g = Graph::new();
        let logits = g.param(
            Tensor::from_rows(&[[0.2, -1.0, 3.0, 0.5], [2.0, 2.0, 2.0, 2.0], [-4.0, 1.0, 0.0, 9.0]])
                .unwrap(),
        );
        let labels = [2, 0, 1];
        let (loss, _) = g.softmax_cross_entropy(logits, &labels).unwrap();
        let grads = g.backward(loss).unwrap();
        let d = grads.get(logits).unwrap();
        for (i, &y) in labels.iter().enumerate() {
            let row = d.row(i);
            assert!(row.iter().sum::<f64>().abs() < 1e-12);
            for (j, &v) in row.iter().enumerate() {
                if j == y {
                    assert!(v < 0.0);
                } else {
                    assert!(v > 0.0);
                }
            }
        }
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let mut g = Graph::new();
        let logits = g.param(Tensor::zeros(&[2, 3]));
        let err = g.softmax_cross_entropy(logits, &[0, 3]).unwrap_err();
        assert!(matches!(
            err,
            Error::Label {
                row: 1,
                label: 3,
                classes: 3
            }
        ));
    }

    #[test]
    fn gaussian_kl_examples() {
        let mut g = Graph::new();
        let mu = g.param(Tensor::zeros(&[4, 3]));
        let lv = g.param(Tensor::zeros(&[4, 3]));
        let kl = g.gaussian_kl(mu, lv).unwrap();
        assert_eq!(g.scalar(kl), 0.0);

        let mu = g.param(Tensor::from_rows(&[[1.0]]).unwrap());
        let lv = g.param(Tensor::from_rows(&[[0.0]]).unwrap());
        let kl = g.gaussian_kl(mu, lv).unwrap();
        assert!(close(g.scalar(kl), 0.5, 1e-15));

        let mu = g.param(Tensor::from_rows(&[[0.0]]).unwrap());
        let lv = g.param(Tensor::from_rows(&[[1.0]]).unwrap());
        let kl = g.gaussian_kl(mu, lv).unwrap();
        assert!(close(g.scalar(kl), 0.5 * (std::f64::consts::E - 2.0), 1e-15));
        assert!(close(g.scalar(kl), 0.359141, 1e-6));
    }

    #[test]
    fn reparam_degenerate_and_moments() {
        let mut g = Graph::new();
        let mut rng = Rng::named(11, "reparam");
        let mu = g.param(Tensor::from_rows(&[[1.5, -2.0, 0.25]]).unwrap());
        let lv = g.param(Tensor::full(&[1, 3], -60.0));
        let t = g.reparam_sample(mu, lv, &mut rng).unwrap();
        assert!(g.value(t).max_abs_diff(g.value(mu)) < 1e-12);

        let n = 100_000;
        let mu = g.param(Tensor::full(&[n, 1], 3.0));
        let lv = g.param(Tensor::zeros(&[n, 1]));
        let t = g.reparam_sample(mu, lv, &mut rng).unwrap();
        let mean = g.value(t).sum() / n as f64;
        assert!(close(mean, 3.0, 0.02), "{mean}");

        let mu = g.param(Tensor::zeros(&[n, 1]));
        let lv = g.param(Tensor::full(&[n, 1], 4f64.ln()));
        let t = g.reparam_sample(mu, lv, &mut rng).unwrap();
        let v = g.value(t);
        let m = v.sum() / n as f64;
        let var = v.data().iter().map(|x| (x - m).powi(2)).sum::<f64>() / n as f64;
        assert!(close(var, 4.0, 0.1), "{var}");
    }

    #[test]
    fn backward_basics() {
        let mut g = Graph::new();
        let x = g.param(Tensor::full(&[2, 3], 0.4));
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &Tensor::full(&[2, 3], 1.0));

        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn unreachable_leaf_gets_zero_gradient_and_nonscalar_loss_fails() {
        let mut g = Graph::new();
        let x = g.param(Tensor::full(&[2], 1.0));
        let unused = g.param(Tensor::full(&[3], 1.0));
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(unused).unwrap(), &Tensor::zeros(&[3]));
        assert!(matches!(g.backward(x), Err(Error::Shape(_))));
    }

    #[test]
    fn sgd_examples() {
        let mut p = Tensor::vector(vec![1.0]);
        let gr = Tensor::vector(vec![2.0]);
        sgd_step(&mut [&mut p], &[Some(&gr)], 0.5).unwrap();
        assert_eq!(p.data(), &[0.0]);

        let mut p = Tensor::vector(vec![1.0, -3.0]);
        let before = p.clone();
        let gr = Tensor::vector(vec![2.0, 5.0]);
        sgd_step(&mut [&mut p], &[Some(&gr)], 0.0).unwrap();
        assert_eq!(p, before);

        let mut a = Tensor::vector(vec![0.5, 0.25]);
        let mut b = a.clone();
        let gr = Tensor::vector(vec![0.125, -0.5]);
        sgd_step(&mut [&mut a], &[Some(&gr)], 0.25).unwrap();
        sgd_step(&mut [&mut a], &[Some(&gr)], 0.25).unwrap();
        sgd_step(&mut [&mut b], &[Some(&gr)], 0.5).unwrap();
        assert_eq!(a, b);

        let mut p = Tensor::vector(vec![1.0]);
        assert!(matches!(
            sgd_step(&mut [&mut p], &[None], 0.1),
            Err(Error::Consistency(_))
        ));
    }
}
