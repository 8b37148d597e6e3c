//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records primitive operations as they are evaluated; calling
//! [`Tape::backward`] on a scalar node returns gradients for every recorded
//! node that requires them. Parameters are plain [`Tensor`] values that are
//! copied onto a fresh tape for each training iteration.

mod rmsprop;
mod tape;
mod tensor;

use thiserror::Error;

pub use rmsprop::{rmsprop_step, RmsPropConfig, RmsPropState};
pub use tape::{Gradients, Mode, Tape, Var};
pub use tensor::{
    add_row_in_place, euclidean_distance, matmul_into, squared_distance, Activation, Tensor,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("shape {shape:?} does not hold {len} values")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("invalid shape {shape:?}")]
    InvalidShape { shape: Vec<usize> },
    #[error("index out of range in {op} (bound {bound})")]
    IndexOutOfRange { op: &'static str, bound: usize },
    #[error("backward requires a scalar output, got shape {shape:?}")]
    NonScalarOutput { shape: Vec<usize> },
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("dropout rate {0} outside [0, 1)")]
    InvalidRate(f64),
    #[error("optimizer got {params} params, {grads} grads, {state} state buffers")]
    ParamCount {
        params: usize,
        grads: usize,
        state: usize,
    },
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        let data = (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect();
        Tensor::matrix(rows, cols, data).unwrap().with_grad()
    }

    /// Central finite differences of a scalar function of several tensors.
    fn numeric_grad(
        f: &dyn Fn(&[Tensor]) -> f64,
        inputs: &[Tensor],
        which: usize,
        h: f64,
    ) -> Vec<f64> {
        (0..inputs[which].len())
            .map(|i| {
                let mut plus = inputs.to_vec();
                plus[which].data_mut()[i] += h;
                let mut minus = inputs.to_vec();
                minus[which].data_mut()[i] -= h;
                (f(&plus) - f(&minus)) / (2.0 * h)
            })
            .collect()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-7)
    }

    /// Builds `mean(op(inputs) * weights)` on a tape so that a non-uniform
    /// upstream gradient reaches the op under test.
    fn check_op(
        name: &str,
        inputs: Vec<Tensor>,
        build: &dyn Fn(&mut Tape, &[Var]) -> Var,
    ) {
        let f = |xs: &[Tensor], grads: bool| -> (f64, Option<Vec<Tensor>>) {
            let mut tape = Tape::new();
            let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
            let y = build(&mut tape, &vars);
            let shape = tape.value(y).shape().to_vec();
            let mut wrng = ChaCha8Rng::seed_from_u64(7);
            let n = tape.value(y).len();
            let w = Tensor::new(shape, (0..n).map(|_| wrng.random_range(0.5..1.5)).collect())
                .unwrap();
            let w = tape.constant(w);
            let z = tape.mul(y, w).unwrap();
            let loss = tape.mean(z);
            let value = tape.scalar(loss);
            let g = grads.then(|| {
                let g = tape.backward(loss).unwrap();
                vars.iter().map(|&v| g.get_or_zeros(v)).collect()
            });
            (value, g)
        };
        let (_, analytic) = f(&inputs, true);
        let analytic = analytic.unwrap();
        for which in 0..inputs.len() {
            let numeric = numeric_grad(&|xs| f(xs, false).0, &inputs, which, 1e-5);
            for (a, n) in analytic[which].data().iter().zip(&numeric) {
                assert!(
                    rel_err(*a, *n) <= 1e-5,
                    "{name}: input {which} analytic {a} numeric {n}"
                );
            }
        }
    }

    #[test]
    fn polynomial_and_tanh_derivatives() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0).with_grad());
        let y = tape.square(x);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[6.0]);

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.0).with_grad());
        let y = tape.tanh(x);
        assert_eq!(tape.scalar(y), 0.0);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0]);
    }

    #[test]
    fn non_scalar_backward_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![2, 2]).with_grad());
        let y = tape.tanh(x);
        assert!(matches!(
            tape.backward(y),
            Err(AutodiffError::NonScalarOutput { .. })
        ));
    }

    #[test]
    fn matmul_shape_mismatch_is_reported() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2, 3]));
        assert!(matches!(
            tape.matmul(a, b),
            Err(AutodiffError::ShapeMismatch { op: "matmul", .. })
        ));
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_tensor(&mut rng, 3, 4);
            let b = random_tensor(&mut rng, 4, 2);
            let c = random_tensor(&mut rng, 3, 4);
            let bias = random_tensor(&mut rng, 1, 4);
            // keep sqrt and hinge away from their kinks
            let pos = Tensor::matrix(
                3,
                4,
                a.data().iter().map(|v| v.abs() + 0.5).collect(),
            )
            .unwrap()
            .with_grad();

            check_op("matmul", vec![a.clone(), b], &|t, v| t.matmul(v[0], v[1]).unwrap());
            check_op("add_row", vec![a.clone(), bias], &|t, v| t.add_row(v[0], v[1]).unwrap());
            check_op("add", vec![a.clone(), c.clone()], &|t, v| t.add(v[0], v[1]).unwrap());
            check_op("sub", vec![a.clone(), c.clone()], &|t, v| t.sub(v[0], v[1]).unwrap());
            check_op("mul", vec![a.clone(), c.clone()], &|t, v| t.mul(v[0], v[1]).unwrap());
            check_op("scale", vec![a.clone()], &|t, v| t.scale(v[0], -1.7));
            check_op("add_scalar", vec![a.clone()], &|t, v| t.add_scalar(v[0], 0.3));
            check_op("tanh", vec![a.clone()], &|t, v| t.tanh(v[0]));
            check_op("relu", vec![a.clone()], &|t, v| t.relu(v[0]));
            check_op("exp", vec![a.clone()], &|t, v| t.exp(v[0]));
            check_op("sqrt", vec![pos.clone()], &|t, v| t.sqrt(v[0]));
            check_op("square", vec![a.clone()], &|t, v| t.square(v[0]));
            check_op("hinge", vec![a.clone()], &|t, v| t.hinge(v[0], 0.25));
            check_op("row_sum", vec![a.clone()], &|t, v| t.row_sum(v[0]));
            check_op("mean", vec![a.clone()], &|t, v| t.mean(v[0]));
            check_op("concat", vec![a.clone(), c.clone()], &|t, v| {
                t.concat_cols(v[0], v[1]).unwrap()
            });
            check_op("gather", vec![a.clone()], &|t, v| t.gather_cols(v[0], &[3, 0, 2]).unwrap());
            check_op("permute", vec![a.clone()], &|t, v| {
                t.permute_rows(v[0], &[2, 2, 0]).unwrap()
            });
            check_op("dropout", vec![a.clone()], &|t, v| {
                let mut r = ChaCha8Rng::seed_from_u64(5);
                t.dropout(v[0], 0.3, Mode::Train, &mut r).unwrap()
            });
        }
    }

    #[test]
    fn backward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_tensor(&mut rng, 5, 6);
        let b = random_tensor(&mut rng, 6, 3);
        let run = || {
            let mut tape = Tape::new();
            let (va, vb) = (tape.leaf(a.clone()), tape.leaf(b.clone()));
            let y = tape.matmul(va, vb).unwrap();
            let y = tape.tanh(y);
            let l = tape.mean(y);
            let g = tape.backward(l).unwrap();
            (g.get_or_zeros(va), g.get_or_zeros(vb))
        };
        let (g1, g2) = (run(), run());
        assert_eq!(g1.0.data(), g2.0.data());
        assert_eq!(g1.1.data(), g2.1.data());
    }

    #[test]
    fn dropout_modes_and_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![100_000], vec![1.0; 100_000]).unwrap());
        assert_eq!(tape.dropout(x, 0.0, Mode::Train, &mut rng).unwrap(), x);
        assert_eq!(tape.dropout(x, 0.5, Mode::Eval, &mut rng).unwrap(), x);
        let y = tape.dropout(x, 0.1, Mode::Train, &mut rng).unwrap();
        let data = tape.value(y).data();
        let zero_frac = data.iter().filter(|&&v| v == 0.0).count() as f64 / data.len() as f64;
        assert!((zero_frac - 0.1).abs() <= 0.01, "zero fraction {zero_frac}");
        let kept = data.iter().find(|&&v| v != 0.0).unwrap();
        assert!((kept - 1.0 / 0.9).abs() < 1e-15);
        assert!(tape.dropout(x, 1.0, Mode::Train, &mut rng).is_err());
    }

    #[test]
    fn detach_cuts_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0).with_grad());
        let y = tape.square(x);
        let d = tape.detach(y);
        let z = tape.mul(d, x).unwrap();
        let g = tape.backward(z).unwrap();
        // z = stop(x^2) * x  =>  dz/dx = x^2
        assert_eq!(g.get(x).unwrap().data(), &[4.0]);
    }
}
