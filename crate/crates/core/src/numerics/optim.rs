use super::{NumericsError, Real, Result, Tensor};

/// Adam moments for a fixed list of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T = f32> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step_count: u64,
    pub beta1: T,
    pub beta2: T,
    pub epsilon: T,
}

impl<T: Real> AdamState<T> {
    /// Zeroed moments shaped like `params`, with β1=0.9, β2=0.999, ε=1e-8.
    pub fn new(params: &[Tensor<T>]) -> Self {
        Self::with_hyper(
            params,
            T::from_f64_lossy(0.9),
            T::from_f64_lossy(0.999),
            T::from_f64_lossy(1e-8),
        )
    }

    pub fn with_hyper(params: &[Tensor<T>], beta1: T, beta2: T, epsilon: T) -> Self {
        Self {
            m: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
            step_count: 0,
            beta1,
            beta2,
            epsilon,
        }
    }

    /// One bias-corrected Adam update with learning rate `lr`.
    ///
    /// Nothing is modified if any gradient component is non-finite.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Vec<T>], lr: T) -> Result<()> {
        if !(lr > T::zero()) {
            return Err(NumericsError::InvalidArgument {
                op: "adam_step",
                msg: format!("learning rate must be positive, got {lr}"),
            });
        }
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "adam_step",
                lhs: vec![params.len()],
                rhs: vec![grads.len()],
            });
        }
        for (index, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.numel() != g.len() || self.m[index].len() != g.len() {
                return Err(NumericsError::ShapeMismatch {
                    op: "adam_step",
                    lhs: p.shape().to_vec(),
                    rhs: vec![g.len()],
                });
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(NumericsError::NonFiniteGradient { index });
            }
        }
        self.step_count += 1;
        let t = i32::try_from(self.step_count).unwrap_or(i32::MAX);
        let one = T::one();
        let bc1 = one - self.beta1.powi(t);
        let bc2 = one - self.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((w, &gi), mi), vi) in p.values_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (one - self.beta1) * gi;
                *vi = self.beta2 * *vi + (one - self.beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

/// Rescales `grads` in place so their joint ℓ2 norm is at most `threshold`.
/// Returns the norm measured before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut [Vec<T>], threshold: T) -> T {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&x| x * x)
        .sum::<T>()
        .sqrt();
    if norm > threshold {
        let factor = threshold / norm;
        grads.iter_mut().flat_map(|g| g.iter_mut()).for_each(|x| *x *= factor);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scalar_param(x: f64) -> Vec<Tensor<f64>> {
        vec![Tensor::scalar(x)]
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut params = vec![Tensor::<f64>::from_slice(&[0.3, -1.2, 4.0])];
        let before = params.clone();
        let mut adam = AdamState::new(&params);
        for _ in 0..5 {
            adam.step(&mut params, &[vec![0.0; 3]], 0.1).unwrap();
        }
        assert_eq!(params, before);
        assert_eq!(adam.step_count, 5);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // Hand evaluation: m̂ = 1, v̂ = 1, Δθ = -0.1 / (1 + 1e-8).
        let mut params = scalar_param(0.0);
        let mut adam = AdamState::new(&params);
        adam.step(&mut params, &[vec![1.0]], 0.1).unwrap();
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((params[0].values()[0] - expected).abs() < 1e-15);
        assert_eq!(adam.step_count, 1);
        adam.step(&mut params, &[vec![1.0]], 0.1).unwrap();
        assert_eq!(adam.step_count, 2);
        // constant gradient keeps m̂ = v̂ = 1
        assert!((params[0].values()[0] - 2.0 * expected).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_is_reported() {
        let mut params = vec![Tensor::<f32>::scalar(1.0), Tensor::<f32>::scalar(2.0)];
        let mut adam = AdamState::new(&params);
        let err = adam.step(&mut params, &[vec![0.0], vec![f32::NAN]], 0.1).unwrap_err();
        assert_eq!(err, NumericsError::NonFiniteGradient { index: 1 });
        assert_eq!(adam.step_count, 0);
    }

    #[test]
    fn clip_scales_to_threshold() {
        let mut g = vec![vec![3.0f64, 4.0]];
        let n = clip_global_norm(&mut g, 0.5);
        assert_eq!(n, 5.0);
        assert!((g[0][0] - 0.3).abs() < 1e-15 && (g[0][1] - 0.4).abs() < 1e-15);

        let mut small = vec![vec![0.1f64], vec![0.2]];
        let before = small.clone();
        clip_global_norm(&mut small, 0.5);
        assert_eq!(small, before);
    }

    proptest! {
        #[test]
        fn clipped_norm_bounded_and_idempotent(
            a in prop::collection::vec(-100.0f64..100.0, 1..20),
            b in prop::collection::vec(-100.0f64..100.0, 1..20),
            threshold in 0.01f64..10.0,
        ) {
            let mut g = vec![a, b];
            clip_global_norm(&mut g, threshold);
            let norm: f64 = g.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!(norm <= threshold + 1e-9);
            let once = g.clone();
            clip_global_norm(&mut g, threshold);
            for (x, y) in g.iter().flatten().zip(once.iter().flatten()) {
                prop_assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0));
            }
        }
    }
}
