//! Adam optimizer with per-parameter step counts.

use ndarray::ArrayD;

use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.98,
            epsilon: 1e-9,
        }
    }
}

/// Per-parameter optimizer state.
#[derive(Debug, Clone)]
pub struct AdamSlot {
    pub m: ArrayD<f64>,
    pub v: ArrayD<f64>,
    pub t: u64,
}

/// Adam over a fixed list of named leaf tensors.
///
/// Bias correction uses a per-parameter step count, so parameters that join
/// the optimization in a later phase de-bias from their own first step.
pub struct Adam {
    pub config: AdamConfig,
    params: Vec<Tensor>,
    slots: Vec<AdamSlot>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: Vec<Tensor>) -> Self {
        let slots = params
            .iter()
            .map(|p| {
                let shape = p.shape();
                AdamSlot {
                    m: ArrayD::zeros(ndarray::IxDyn(&shape)),
                    v: ArrayD::zeros(ndarray::IxDyn(&shape)),
                    t: 0,
                }
            })
            .collect();
        Self {
            config,
            params,
            slots,
        }
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn slots(&self) -> &[AdamSlot] {
        &self.slots
    }

    pub fn set_slot(&mut self, index: usize, slot: AdamSlot) {
        assert_eq!(self.slots[index].m.shape(), slot.m.shape());
        self.slots[index] = slot;
    }

    /// Apply one update to every parameter whose id is in `active` and which
    /// received a gradient, then clear all gradients.
    pub fn step(&mut self, active: &dyn Fn(usize) -> bool) {
        let c = self.config;
        for (i, p) in self.params.iter().enumerate() {
            let Some(grad) = p.grad() else { continue };
            if !active(i) {
                p.zero_grad();
                continue;
            }
            let slot = &mut self.slots[i];
            slot.t += 1;
            let t = slot.t as i32;
            let bc1 = 1.0 - c.beta1.powi(t);
            let bc2 = 1.0 - c.beta2.powi(t);

            slot.m.zip_mut_with(&grad, |m, &g| {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
            });
            slot.v.zip_mut_with(&grad, |v, &g| {
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
            });

            let mut value = p.to_array();
            ndarray::Zip::from(&mut value)
                .and(&slot.m)
                .and(&slot.v)
                .for_each(|w, &m, &v| {
                    let m_hat = m / bc1;
                    let v_hat = v / bc2;
                    *w -= c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
                });
            p.set_value(value);
            p.zero_grad();
        }
    }

    /// Step every parameter.
    pub fn step_all(&mut self) {
        self.step(&|_| true);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    /// One Adam step on a scalar quadratic matches the closed form.
    #[test]
    fn single_step_matches_closed_form() {
        let c = AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.98,
            epsilon: 1e-9,
        };
        let w0 = 0.7;
        let p = Tensor::param(arr1(&[w0]).into_dyn());
        let mut adam = Adam::new(c, vec![p.clone()]);

        // L = (w - 2)^2 as (w - 2) * (w - 2); g = 2 (w - 2).
        let target = Tensor::constant(arr1(&[2.0]).into_dyn());
        let diff = crate::nn::ops::sub(&p, &target);
        let loss = crate::nn::ops::sum_all(&crate::nn::ops::mul(&diff, &diff));
        loss.backward();
        let g = 2.0 * (w0 - 2.0);
        assert!((p.grad().unwrap()[[0]] - g).abs() < 1e-15);
        adam.step_all();

        let m = (1.0 - c.beta1) * g;
        let v = (1.0 - c.beta2) * g * g;
        let m_hat = m / (1.0 - c.beta1);
        let v_hat = v / (1.0 - c.beta2);
        let expected = w0 - c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
        let got = p.value()[[0]];
        assert!(
            (got - expected).abs() < 1e-12,
            "adam step: {got} vs closed form {expected}"
        );
    }

    #[test]
    fn inactive_params_are_untouched() {
        let p = Tensor::param(arr1(&[1.0]).into_dyn());
        let mut adam = Adam::new(AdamConfig::default(), vec![p.clone()]);
        let y = crate::nn::ops::sum_all(&p);
        y.backward();
        adam.step(&|_| false);
        assert_eq!(p.value()[[0]], 1.0);
        assert!(p.grad().is_none(), "step clears gradients");
        // Moments stay zero and the local step count stays 0.
        assert_eq!(adam.slots()[0].t, 0);
    }
}
