//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation eagerly. Parameters enter the graph as
//! borrowed leaves of a [`ParamStore`](crate::params::ParamStore), so building
//! a forward pass never copies weights. [`Graph::backward`] consumes the graph
//! and returns [`Gradients`] keyed by parameter name; frozen parameters get
//! gradients too, and only the optimizer honours the trainable flag.
//!
//! [`Tensor`]: crate::tensor::Tensor

mod check;
mod graph;
mod kernels;

pub use check::{finite_diff_grad, relative_error, DEFAULT_FD_EPS};
pub use graph::{AttnSpan, Gradients, Graph, Var, LAYER_NORM_EPS};
pub use kernels::softmax_t;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::params::ParamStore;
    use crate::tensor::Tensor;

    fn mat(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::detached();
        let i2 = g.input(mat(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let m = g.input(mat(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let p = g.matmul(i2, m).unwrap();
        assert_eq!(g.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

        let a = g.input(mat(&[vec![1.0, 2.0]]));
        let b = g.input(mat(&[vec![3.0], vec![4.0]]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[11.0]);

        let x = g.input(Tensor::zeros(&[2, 3]));
        let y = g.input(Tensor::zeros(&[2, 3]));
        match g.matmul(x, y) {
            Err(Error::Dimension(msg)) => {
                assert!(msg.contains("[2, 3]"), "{msg}");
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn relu_and_layer_norm() {
        let mut g = Graph::detached();
        let x = g.input(mat(&[vec![-1.0, 0.0, 2.0]]));
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);

        let c = g.input(mat(&[vec![5.0; 4]]));
        let gamma = g.input(Tensor::vector(vec![1.0; 4]));
        let beta = g.input(Tensor::vector(vec![0.0; 4]));
        let n = g.layer_norm(c, gamma, beta).unwrap();
        assert!(g.value(n).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cross_entropy_uniform_two_classes() {
        let mut g = Graph::detached();
        let l = g.input(mat(&[vec![0.0, 0.0]]));
        let ce = g.cross_entropy(l, &[0], None).unwrap();
        assert!((g.value(ce).data()[0] - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_ignores_pad_rows() {
        let mut g = Graph::detached();
        let l = g.input(mat(&[vec![0.0, 0.0], vec![100.0, -100.0]]));
        let ce = g.cross_entropy(l, &[0, 1], Some(1)).unwrap();
        assert!((g.value(ce).data()[0] - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let mut s = ParamStore::new();
        s.init_const("w", &[1, 2], 0.0).unwrap();
        s.set_value("w", mat(&[vec![1.0, 2.0]])).unwrap();
        s.init_const("unused", &[3], 1.0).unwrap();
        let mut g = Graph::new(&s);
        let w = g.param("w").unwrap();
        let sq = g.mul(w, w).unwrap();
        let loss = g.sum(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get("w").unwrap().data(), &[2.0, 4.0]);
        assert!(grads.get("unused").is_none());

        let mut s2 = s.clone();
        s2.zero_grad();
        grads.accumulate_into(&mut s2).unwrap();
        assert_eq!(s2.grad("w").unwrap().data(), &[2.0, 4.0]);
        assert_eq!(s2.grad("unused").unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn backward_needs_scalar() {
        let mut s = ParamStore::new();
        s.init_const("w", &[1, 2], 1.0).unwrap();
        let mut g = Graph::new(&s);
        let w = g.param("w").unwrap();
        assert!(matches!(g.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn mix_skips_zero_weights_exactly() {
        let mut g = Graph::detached();
        let a = g.input(mat(&[vec![1.0, 2.0]]));
        let b = g.input(mat(&[vec![f64::NAN, f64::INFINITY]]));
        let w = g.input(mat(&[vec![0.5, 0.0]]));
        let y = g.mix(&[a, b], w).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 1.0]);
    }
}
