use super::{Real, Tensor};
use crate::error::{ensure, Result};

/// RMSprop with per-element running mean of squared gradients.
#[derive(Clone, Debug)]
pub struct RmsProp<T: Real = f32> {
    pub learning_rate: f64,
    pub decay: f64,
    pub epsilon: f64,
    accumulators: Vec<Vec<T>>,
}

impl<T: Real> RmsProp<T> {
    pub fn new(learning_rate: f64) -> Self {
        Self::with_hyper(learning_rate, 0.99, 1e-8)
    }

    pub fn with_hyper(learning_rate: f64, decay: f64, epsilon: f64) -> Self {
        Self {
            learning_rate,
            decay,
            epsilon,
            accumulators: Vec::new(),
        }
    }

    pub fn accumulators(&self) -> &[Vec<T>] {
        &self.accumulators
    }

    /// Applies one update to every trainable tensor and clears its gradient.
    ///
    /// Fails without touching any parameter if a trainable tensor has no
    /// gradient.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Tensor<T>>) -> Result<()> {
        ensure!(
            self.learning_rate > 0.0 && self.epsilon > 0.0,
            "rmsprop: learning rate and epsilon must be positive"
        );
        ensure!(
            self.decay > 0.0 && self.decay < 1.0,
            "rmsprop: decay {} outside (0, 1)",
            self.decay
        );
        let mut params: Vec<&mut Tensor<T>> = params.into_iter().collect();
        if self.accumulators.is_empty() {
            self.accumulators = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
        }
        ensure!(
            self.accumulators.len() == params.len()
                && self.accumulators.iter().zip(&params).all(|(a, p)| a.len() == p.len()),
            "rmsprop: parameter list changed shape since the first step"
        );
        for (i, p) in params.iter().enumerate() {
            ensure!(
                !p.requires_grad() || p.grad().is_some(),
                "rmsprop: parameter {i} has no gradient"
            );
        }
        let (decay, lr, eps) = (
            T::lit(self.decay),
            T::lit(self.learning_rate),
            T::lit(self.epsilon),
        );
        for (p, acc) in params.iter_mut().zip(&mut self.accumulators) {
            if !p.requires_grad() {
                continue;
            }
            let g = p.grad().expect("checked above").to_vec();
            for ((v, a), gi) in p.values_mut().iter_mut().zip(acc.iter_mut()).zip(g) {
                *a = decay * *a + (T::one() - decay) * gi * gi;
                *v = *v - lr * gi / (a.sqrt() + eps);
            }
            p.clear_grad();
        }
        Ok(())
    }
}
