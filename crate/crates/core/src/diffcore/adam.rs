use super::{Tensor, TensorError};

/// One parameter handed to [`Adam::step`].
pub struct AdamParam<'a> {
    pub name: &'a str,
    pub value: &'a mut Tensor,
    pub grad: &'a Tensor,
}

/// Adam with bias correction. Moment buffers are keyed by the position of a
/// parameter in the slice passed to `step`, so callers must keep the order
/// stable across steps.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: u64,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new(0.9, 0.999, 1e-8)
    }
}

impl Adam {
    pub fn new(beta1: f32, beta2: f32, eps: f32) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [AdamParam<'_>], lr: f32) -> Result<(), TensorError> {
        // Validate everything before touching any state.
        for (i, p) in params.iter().enumerate() {
            if p.value.shape() != p.grad.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "adam_step",
                    expected: format!("gradient of {} shaped {:?}", p.name, p.value.shape()),
                    actual: format!("{:?}", p.grad.shape()),
                });
            }
            if let Some(m) = self.first.get(i) {
                if m.len() != p.value.numel() {
                    return Err(TensorError::ShapeMismatch {
                        op: "adam_step",
                        expected: format!("{} elements in moment buffer for {}", m.len(), p.name),
                        actual: format!("{}", p.value.numel()),
                    });
                }
            }
            if !p.grad.is_finite() {
                return Err(TensorError::NonFinite {
                    context: format!("gradient of parameter `{}`", p.name),
                });
            }
        }
        if !self.first.is_empty() && self.first.len() != params.len() {
            return Err(TensorError::InvalidArgument(format!(
                "adam state tracks {} parameters, got {}",
                self.first.len(),
                params.len()
            )));
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.value.numel()]).collect();
            self.second = self.first.clone();
        }

        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for ((p, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            let grad = p.grad.data();
            let value = p.value.data_mut();
            for j in 0..value.len() {
                let g = grad[j];
                m[j] = b1 * m[j] + (1.0 - b1) * g;
                v[j] = b2 * v[j] + (1.0 - b2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                value[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
