use serde::{Deserialize, Serialize};

use super::{AutodiffError, Tensor};

/// RMSProp hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmsPropConfig {
    pub decay: f64,
    pub epsilon: f64,
}

impl Default for RmsPropConfig {
    fn default() -> Self {
        Self {
            decay: 0.9,
            epsilon: 1e-8,
        }
    }
}

/// Running mean of squared gradients, one buffer per parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmsPropState {
    pub config: RmsPropConfig,
    mean_square: Vec<Vec<f64>>,
}

impl RmsPropState {
    pub fn new<'a>(config: RmsPropConfig, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        Self {
            config,
            mean_square: params.into_iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn mean_square(&self) -> &[Vec<f64>] {
        &self.mean_square
    }
}

/// One RMSProp update:
/// `avg <- decay * avg + (1 - decay) * g^2`,
/// `param <- param - lr * g / (sqrt(avg) + epsilon)`.
///
/// All gradients are validated before any parameter is touched, so a
/// non-finite gradient leaves parameters and state unchanged.
pub fn rmsprop_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut RmsPropState,
    lr: f64,
) -> Result<(), AutodiffError> {
    if params.len() != grads.len() || params.len() != state.mean_square.len() {
        return Err(AutodiffError::ParamCount {
            params: params.len(),
            grads: grads.len(),
            state: state.mean_square.len(),
        });
    }
    for ((p, g), s) in params.iter().zip(grads).zip(&state.mean_square) {
        if p.shape() != g.shape() || s.len() != p.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "rmsprop_step",
                left: p.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
        if !g.is_finite() {
            return Err(AutodiffError::NonFinite("gradient"));
        }
    }
    let RmsPropConfig { decay, epsilon } = state.config;
    for ((p, g), avg) in params.iter_mut().zip(grads).zip(&mut state.mean_square) {
        for ((w, &gi), a) in p.data_mut().iter_mut().zip(g.data()).zip(avg.iter_mut()) {
            *a = decay * *a + (1.0 - decay) * gi * gi;
            *w -= lr * gi / (a.sqrt() + epsilon);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(v: f64) -> (Tensor, RmsPropState) {
        let p = Tensor::scalar(v);
        let s = RmsPropState::new(RmsPropConfig::default(), [&p]);
        (p, s)
    }

    #[test]
    fn zero_gradient_keeps_params_and_decays_average() {
        let (mut p, mut s) = single(1.5);
        rmsprop_step(&mut [&mut p], &[Tensor::scalar(2.0)], &mut s, 0.0).unwrap();
        let before = s.mean_square()[0][0];
        rmsprop_step(&mut [&mut p], &[Tensor::scalar(0.0)], &mut s, 0.1).unwrap();
        assert_eq!(p.data()[0], 1.5);
        assert!(s.mean_square()[0][0] < before);
        assert!((s.mean_square()[0][0] - 0.9 * before).abs() < 1e-15);
    }

    #[test]
    fn first_step_magnitude() {
        let (mut p, mut s) = single(0.0);
        rmsprop_step(&mut [&mut p], &[Tensor::scalar(1.0)], &mut s, 0.00025).unwrap();
        let expected = 0.00025 / (0.1f64.sqrt() + 1e-8);
        assert!((p.data()[0].abs() - expected).abs() < 1e-15);
        assert!((expected - 7.9057e-4).abs() < 1e-8);
    }

    #[test]
    fn second_identical_step_is_smaller() {
        let (mut p, mut s) = single(0.0);
        let g = [Tensor::scalar(1.0)];
        rmsprop_step(&mut [&mut p], &g, &mut s, 0.01).unwrap();
        let first = -p.data()[0];
        rmsprop_step(&mut [&mut p], &g, &mut s, 0.01).unwrap();
        let second = -p.data()[0] - first;
        // denominators sqrt(0.1) then sqrt(0.19)
        assert!(second < first);
        assert!((second - 0.01 / (0.19f64.sqrt() + 1e-8)).abs() < 1e-12);
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let mut p = Tensor::new(vec![3], vec![0.1, -2.0, 7.0]).unwrap();
        let mut s = RmsPropState::new(RmsPropConfig::default(), [&p]);
        let g = Tensor::new(vec![3], vec![5.0, -1.0, 0.3]).unwrap();
        rmsprop_step(&mut [&mut p], &[g], &mut s, 0.0).unwrap();
        assert_eq!(p.data(), &[0.1, -2.0, 7.0]);
    }

    #[test]
    fn non_finite_gradient_is_rejected_without_mutation() {
        let (mut p, mut s) = single(1.0);
        let err = rmsprop_step(&mut [&mut p], &[Tensor::scalar(f64::NAN)], &mut s, 0.1);
        assert!(matches!(err, Err(AutodiffError::NonFinite(_))));
        assert_eq!(p.data()[0], 1.0);
        assert_eq!(s.mean_square()[0][0], 0.0);
    }
}
