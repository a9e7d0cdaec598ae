use super::tensor::{Real, Tensor};
use super::NnError;

/// Adam optimizer with bias-corrected moment estimates.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64, shapes: &[(usize, usize)]) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first_moment: shapes.iter().map(|&(r, c)| Tensor::zeros(r, c)).collect(),
            second_moment: shapes.iter().map(|&(r, c)| Tensor::zeros(r, c)).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. `params` and `grads` must line up with the
    /// shapes the optimizer was constructed with.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<(), NnError> {
        if params.len() != self.first_moment.len() || grads.len() != params.len() {
            return Err(NnError::Invalid(format!(
                "optimizer tracks {} parameters, got {} params / {} grads",
                self.first_moment.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let bias1 = 1.0 - self.beta1.powi(self.step as i32);
        let bias2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((param, grad), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first_moment.iter_mut().zip(&mut self.second_moment))
        {
            if param.shape() != grad.shape() {
                return Err(NnError::Shape {
                    op: "adam_step",
                    detail: format!("param {:?} vs grad {:?}", param.shape(), grad.shape()),
                });
            }
            if !grad.is_all_finite() {
                return Err(NnError::NonFiniteGradient { op: "adam_step" });
            }
            let pd = param.data_mut();
            let md = m.data_mut();
            let vd = v.data_mut();
            let gd = grad.data();
            for i in 0..pd.len() {
                let g = gd[i] as f64;
                let m_new = self.beta1 * md[i] as f64 + (1.0 - self.beta1) * g;
                let v_new = self.beta2 * vd[i] as f64 + (1.0 - self.beta2) * g * g;
                md[i] = m_new as Real;
                vd[i] = v_new as Real;
                let m_hat = m_new / bias1;
                let v_hat = v_new / bias2;
                pd[i] = (pd[i] as f64 - self.lr * m_hat / (v_hat.sqrt() + self.eps)) as Real;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = Tensor::from_vec(2, 2, vec![1.0, -2.0, 3.0, 4.0]).unwrap();
        let snapshot = p.clone();
        let mut adam = Adam::new(1e-4, &[(2, 2)]);
        adam.step(&mut [&mut p], &[Tensor::zeros(2, 2)]).unwrap();
        assert_eq!(p, snapshot);
    }

    #[test]
    fn descends_a_quadratic() {
        // minimize (p - 3)^2 by feeding the exact gradient
        let mut p = Tensor::scalar(0.0);
        let mut adam = Adam::new(0.1, &[(1, 1)]);
        for _ in 0..2000 {
            let g = 2.0 * (p.get(0, 0) - 3.0);
            adam.step(&mut [&mut p], &[Tensor::scalar(g)]).unwrap();
        }
        assert!((p.get(0, 0) - 3.0).abs() < 1e-3, "got {}", p.get(0, 0));
    }

    #[test]
    fn rejects_mismatched_parameter_count() {
        let mut p = Tensor::scalar(0.0);
        let mut adam = Adam::new(0.1, &[(1, 1), (2, 2)]);
        assert!(adam.step(&mut [&mut p], &[Tensor::scalar(1.0)]).is_err());
    }
}
