//! A small reverse-mode gradient engine.
//!
//! The tape records a fixed set of batched primitives (affine maps,
//! elementwise activations, row softmax, row gathers and blends,
//! straight-through substitution, volume compositing and scalar reductions)
//! and replays them backwards. Nothing more general is supported.
//!
//! ```
//! use vqad::diffcore::{Matrix, Tape};
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Matrix::scalar(2.0));
//! let w = tape.param(Matrix::scalar(3.0));
//! let y = tape.affine(x, w, None);
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(w).unwrap().as_scalar(), Some(2.0));
//! assert_eq!(grads.get(x).unwrap().as_scalar(), Some(3.0));
//! ```

mod gradcheck;
mod matrix;
mod tape;

pub use gradcheck::{grad_check, relative_error, GradReport};
pub use matrix::Matrix;
pub use tape::{
    composite_samples, CompositeResult, ForwardMode, Gradients, NodeId, Tape, SKIP_ROW,
};

pub(crate) use tape::{blend_row, softmax_into};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum DiffError {
    #[error("loss must be a scalar node, got a {rows}x{cols} value")]
    NonScalarLoss { rows: usize, cols: usize },
    #[error("node {node} consumes node {input}, which does not precede it")]
    CyclicTape { node: usize, input: usize },
    #[error("function value is not finite ({value})")]
    NonFinite { value: f64 },
    #[error("node {0} is not on this tape")]
    UnknownNode(usize),
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_vec(
            rows,
            cols,
            (0..rows * cols)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut tape = Tape::new();
        let v = tape.param(Matrix::from_vec(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]));
        let s = tape.sum(v);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(v).unwrap(), &Matrix::filled(2, 3, 1.0));
    }

    #[test]
    fn square_matches_derivative() {
        let report = grad_check(
            |t, p| {
                let sq = t.mul(p[0], p[0]);
                t.sum(sq)
            },
            &[Matrix::scalar(3.0)],
            1e-5,
        )
        .unwrap();
        assert!(report.passes(1e-6), "{report:?}");

        let mut tape = Tape::new();
        let x = tape.param(Matrix::scalar(3.0));
        let sq = tape.mul(x, x);
        let g = tape.backward(sq).unwrap();
        assert_eq!(g.get(x).unwrap().as_scalar(), Some(6.0));
    }

    #[test]
    fn relu_inactive_region_has_zero_gradient() {
        for x0 in [-1.0, 0.0] {
            let mut tape = Tape::new();
            let x = tape.param(Matrix::scalar(x0));
            let r = tape.relu(x);
            let g = tape.backward(r).unwrap();
            assert_eq!(g.get(x).unwrap().as_scalar(), Some(0.0));
        }
    }

    #[test]
    fn two_layer_mlp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let point = vec![
            random(&mut rng, 1, 4),
            random(&mut rng, 4, 8),
            random(&mut rng, 1, 8),
            random(&mut rng, 8, 1),
            random(&mut rng, 1, 1),
        ];
        let report = grad_check(
            |t, p| {
                let h = t.affine(p[0], p[1], Some(p[2]));
                let h = t.relu(h);
                let y = t.affine(h, p[3], Some(p[4]));
                t.sum(y)
            },
            &point,
            1e-6,
        )
        .unwrap();
        assert!(report.passes(1e-6), "{report:?}");
    }

    #[test]
    fn softmax_dot_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let consts = random(&mut rng, 1, 8);
        let report = grad_check(
            |t, p| {
                let s = t.softmax_rows(p[0]);
                t.weighted_sum(s, consts.clone())
            },
            &[random(&mut rng, 1, 8)],
            1e-5,
        )
        .unwrap();
        assert!(report.passes(1e-6), "{report:?}");
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let v = tape.param(Matrix::zeros(2, 2));
        assert_eq!(
            tape.backward(v).unwrap_err(),
            DiffError::NonScalarLoss { rows: 2, cols: 2 }
        );
    }

    #[test]
    fn non_finite_value_is_rejected() {
        let err = grad_check(
            |t, p| {
                let e = t.exp(p[0]);
                t.sum(e)
            },
            &[Matrix::scalar(1000.0)],
            1e-5,
        )
        .unwrap_err();
        assert!(matches!(err, DiffError::NonFinite { .. }));
    }

    #[test]
    fn straight_through_forward_is_hard_and_backward_is_soft() {
        let mut tape = Tape::new();
        let hard = tape.param(Matrix::row_vector(&[1.0, 2.0]));
        let soft = tape.param(Matrix::row_vector(&[0.3, 0.4]));
        let st = tape.straight_through(hard, soft);
        assert_eq!(tape.value(st), tape.value(hard));
        let loss = tape.weighted_sum(st, Matrix::row_vector(&[5.0, 7.0]));
        let g = tape.backward(loss).unwrap();
        assert!(g.get(hard).is_none());
        assert_eq!(g.get(soft).unwrap(), &Matrix::row_vector(&[5.0, 7.0]));

        let mut soft_tape = Tape::with_mode(ForwardMode::Soft);
        let h = soft_tape.constant(Matrix::row_vector(&[1.0, 2.0]));
        let s = soft_tape.constant(Matrix::row_vector(&[0.3, 0.4]));
        let st = soft_tape.straight_through(h, s);
        assert_eq!(soft_tape.value(st), soft_tape.value(s));
    }

    #[test]
    fn backward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::new();
        let x = tape.constant(random(&mut rng, 300, 16));
        let w = tape.param(random(&mut rng, 16, 64));
        let h = tape.affine(x, w, None);
        let h = tape.sigmoid(h);
        let loss = tape.mse(h, Matrix::filled(300, 64, 0.25));
        let a = tape.backward(loss).unwrap();
        let b = tape.backward(loss).unwrap();
        assert_eq!(a.get(w).unwrap().data(), b.get(w).unwrap().data());
    }

    #[test]
    fn composite_two_samples_by_hand() {
        let d = (2.0f64).ln();
        let res = composite_samples(
            &[d, d],
            &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
            &[1.0, 1.0],
            [0.2, 0.4, 0.8],
        );
        let expected = [0.5 + 0.25 * 0.2, 0.25 + 0.25 * 0.4, 0.25 * 0.8];
        for (got, want) in res.rgb.iter().zip(expected) {
            assert!((got - want).abs() < 1e-12);
        }
        assert!((res.opacity - 0.75).abs() < 1e-12);
        assert!((res.transmittance - 0.25).abs() < 1e-12);
    }
}
