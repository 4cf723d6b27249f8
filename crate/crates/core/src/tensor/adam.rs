use super::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_BETA1: f32 = 0.9;
pub const DEFAULT_BETA2: f32 = 0.999;
pub const DEFAULT_EPS: f32 = 1e-8;

/// Moment buffers and hyperparameters for Adam. `lr` is read on every step,
/// so a scheduler may change it between steps.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    /// Zeroed moments shaped like `params`, default betas and epsilon.
    pub fn new(lr: f32, params: &[Tensor]) -> Self {
        AdamState {
            lr,
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            eps: DEFAULT_EPS,
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    /// Rebuilds a state from saved moments (checkpoint resume).
    pub fn from_parts(lr: f32, step: u64, m: Vec<Tensor>, v: Vec<Tensor>) -> Result<Self> {
        if m.len() != v.len() || m.iter().zip(&v).any(|(a, b)| a.shape() != b.shape()) {
            return Err(Error::State("first and second moments disagree in layout".into()));
        }
        if v.iter().any(|t| t.data().iter().any(|&x| x < 0.0)) {
            return Err(Error::State("second moment has negative entries".into()));
        }
        Ok(AdamState {
            lr,
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            eps: DEFAULT_EPS,
            step,
            m,
            v,
        })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.v
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::State(format!(
            "adam: {} parameters, {} gradients, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        p.same_shape(g, "adam gradient")?;
        p.same_shape(&state.m[i], "adam moment")?;
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1 as f64, state.beta2 as f64);
    let correction1 = 1.0 - b1.powi(t);
    let correction2 = 1.0 - b2.powi(t);
    let lr = state.lr as f64;
    let eps = state.eps as f64;
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for (((theta, &grad), m), v) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            let grad = grad as f64;
            let m_new = b1 * *m as f64 + (1.0 - b1) * grad;
            let v_new = b2 * *v as f64 + (1.0 - b2) * grad * grad;
            *m = m_new as f32;
            *v = v_new as f32;
            let m_hat = m_new / correction1;
            let v_hat = v_new / correction2;
            *theta = (*theta as f64 - lr * m_hat / (v_hat.sqrt() + eps)) as f32;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![Tensor::full(&[3], 0.25)];
        let mut s = AdamState::new(0.001, &p);
        adam_step(&mut p, &[Tensor::zeros(&[3])], &mut s).unwrap();
        assert_eq!(p[0].data(), &[0.25; 3]);
        assert_eq!(s.step(), 1);
    }

    #[test]
    fn first_step_hand_trace() {
        // m = 0.1, v = 0.001; m̂ = 1, v̂ = 1; θ = −0.001 / (1 + 1e−8)
        let mut p = vec![Tensor::scalar(0.0)];
        let mut s = AdamState::new(0.001, &p);
        adam_step(&mut p, &[Tensor::scalar(1.0)], &mut s).unwrap();
        let expected = -0.001 / (1.0 + 1e-8);
        assert!((p[0].data()[0] as f64 - expected).abs() < 1e-6);
        assert!((s.first_moments()[0].data()[0] - 0.1).abs() < 1e-7);
        assert!((s.second_moments()[0].data()[0] - 0.001).abs() < 1e-7);
    }

    #[test]
    fn lr_is_read_at_call_time() {
        let mut p = vec![Tensor::scalar(0.0)];
        let mut s = AdamState::new(0.001, &p);
        s.lr = 0.0;
        adam_step(&mut p, &[Tensor::scalar(1.0)], &mut s).unwrap();
        assert_eq!(p[0].data()[0], 0.0);
    }

    #[test]
    fn mismatched_lengths_are_rejected() {
        let mut p = vec![Tensor::scalar(0.0)];
        let mut s = AdamState::new(0.001, &p);
        assert!(adam_step(&mut p, &[], &mut s).is_err());
        assert_eq!(s.step(), 0);
    }
}
