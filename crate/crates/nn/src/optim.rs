use crate::error::{NnError, Result};
use crate::param::Parameter;
use crate::scalar::Scalar;

/// Bias-corrected Adam.
#[derive(Debug, Clone, Copy)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Adam {
    pub fn with_lr(lr: f64) -> Self {
        Adam { lr, ..Adam::default() }
    }

    /// One update of every parameter. Nothing is modified if any gradient is
    /// non-finite.
    pub fn step<T: Scalar>(&self, params: &mut [&mut Parameter<T>]) -> Result<()> {
        if let Some(p) = params.iter().find(|p| !p.grad.all_finite()) {
            return Err(NnError::NonFiniteGradient { name: p.name.clone() });
        }
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - self.beta1), T::lit(1.0 - self.beta2));
        let eps = T::lit(self.eps);
        for p in params.iter_mut() {
            p.step += 1;
            let t = p.step as i32;
            let c1 = T::lit(1.0 / (1.0 - self.beta1.powi(t)));
            let c2 = T::lit(1.0 / (1.0 - self.beta2.powi(t)));
            let lr = T::lit(self.lr);
            let Parameter {
                value,
                grad,
                first_moment,
                second_moment,
                ..
            } = &mut **p;
            let it = value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(first_moment.data_mut().iter_mut().zip(second_moment.data_mut()));
            for ((theta, &g), (m, v)) in it {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                let mhat = *m * c1;
                let vhat = *v * c2;
                *theta -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
