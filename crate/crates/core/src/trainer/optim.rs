//! AdamW with decoupled weight decay.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments for each parameter, plus the step counter.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

/// One parameter's view for a step.
pub struct ParamRef<'a> {
    pub name: &'a str,
    pub tensor: &'a mut Tensor,
    pub lr: f64,
}

impl OptimizerState {
    pub fn new(shapes: impl IntoIterator<Item = usize>) -> Self {
        let m: Vec<Vec<f64>> = shapes.into_iter().map(|n| vec![0.0; n]).collect();
        Self {
            v: m.clone(),
            m,
            step: 0,
        }
    }
}

impl AdamW {
    /// Applies one update to every parameter and clears its gradient. A
    /// parameter without a gradient is treated as having a zero gradient.
    ///
    /// ```text
    /// θ ← θ − lr·wd·θ
    /// θ ← θ − lr · m̂ / (√v̂ + ε)
    /// ```
    pub fn step(
        &self,
        params: &mut [ParamRef<'_>],
        state: &mut OptimizerState,
        weight_decay: f64,
    ) -> Result<()> {
        if state.m.len() != params.len() {
            return Err(Error::Contract(format!(
                "optimizer holds {} buffers for {} parameters",
                state.m.len(),
                params.len()
            )));
        }
        for p in params.iter() {
            if p.lr < 0.0 {
                return Err(Error::Contract(format!("negative learning rate {}", p.lr)));
            }
            if let Some(g) = p.tensor.grad() {
                if g.iter().any(|x| x.is_nan()) {
                    return Err(Error::NumericInvalid(format!("NaN gradient in `{}`", p.name)));
                }
            }
        }
        state.step += 1;
        let t = state.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
            if m.len() != p.tensor.numel() {
                return Err(Error::Contract(format!("moment buffer shape for `{}`", p.name)));
            }
            let grad = p.tensor.grad().map(<[f64]>::to_vec);
            let lr = p.lr;
            let data = p.tensor.data_mut();
            for i in 0..data.len() {
                let g = grad.as_ref().map_or(0.0, |g| g[i]);
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                if weight_decay != 0.0 {
                    data[i] -= lr * weight_decay * data[i];
                }
                data[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            p.tensor.zero_grad();
        }
        Ok(())
    }
}
