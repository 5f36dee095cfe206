use serde::{Deserialize, Serialize};

use super::{Checkpoint, CheckpointWriter, HasParams};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers are created on the first step
/// and must keep matching the parameter shapes afterwards.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step_count: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step_count: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Applies one update from the accumulated gradients. Any non-finite
    /// gradient rejects the whole update before a single value is written.
    pub fn step(&mut self, model: &mut dyn HasParams) -> Result<()> {
        let mut params = model.params_mut();
        for (i, p) in params.iter().enumerate() {
            if p.grad.len() != p.value.len() {
                return Err(Error::State(format!("parameter {i} has no gradient buffer")));
            }
            if p.grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of parameter tensor {i}")));
            }
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        } else if self.m.len() != params.len() || self.m.iter().zip(&params).any(|(m, p)| m.len() != p.len()) {
            return Err(Error::State("Adam moment shapes do not match parameters".into()));
        }
        self.step_count += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step_count as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.value.len() {
                let g = p.grad[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p.value[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    pub fn save_into(&self, w: &mut CheckpointWriter, prefix: &str) -> Result<()> {
        w.set_meta(
            &format!("{prefix}.adam"),
            serde_json::json!({ "config": self.config, "step_count": self.step_count, "tensors": self.m.len() }),
        );
        for (i, (m, v)) in self.m.iter().zip(&self.v).enumerate() {
            w.add(&format!("{prefix}.m.{i}"), &[m.len()], m);
            w.add(&format!("{prefix}.v.{i}"), &[v.len()], v);
        }
        Ok(())
    }

    /// Restores state saved by [`Adam::save_into`], checking it against the
    /// parameter shapes of `model`.
    pub fn load_from(ck: &Checkpoint, prefix: &str, model: &dyn HasParams) -> Result<Self> {
        let key = format!("{prefix}.adam");
        let meta = ck
            .meta(&key)
            .ok_or_else(|| Error::Checkpoint(format!("missing {key}")))?;
        let config: AdamConfig = serde_json::from_value(meta["config"].clone())?;
        let step_count = meta["step_count"].as_u64().unwrap_or(0);
        let count = meta["tensors"].as_u64().unwrap_or(0) as usize;
        let params = model.params();
        if count != 0 && count != params.len() {
            return Err(Error::Checkpoint(format!(
                "{prefix}: {count} moment tensors for {} parameters",
                params.len()
            )));
        }
        let mut m = Vec::with_capacity(count);
        let mut v = Vec::with_capacity(count);
        for i in 0..count {
            m.push(ck.tensor(&format!("{prefix}.m.{i}"), &[params[i].len()])?);
            v.push(ck.tensor(&format!("{prefix}.v.{i}"), &[params[i].len()])?);
        }
        Ok(Self {
            config,
            step_count,
            m,
            v,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Linear, Param};

    struct Scalar(Param);

    impl HasParams for Scalar {
        fn params(&self) -> Vec<&Param> {
            vec![&self.0]
        }
        fn params_mut(&mut self) -> Vec<&mut Param> {
            vec![&mut self.0]
        }
    }

    fn scalar(v: f64) -> Scalar {
        let mut p = Param::zeros(vec![1]);
        p.value[0] = v;
        Scalar(p)
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = scalar(0.7);
        let mut adam = Adam::new(AdamConfig::with_lr(1e-3));
        for _ in 0..10 {
            s.0.grad[0] = 0.0;
            adam.step(&mut s).unwrap();
        }
        assert_eq!(s.0.value[0], 0.7);
    }

    #[test]
    fn first_step_is_lr() {
        let mut s = scalar(0.0);
        s.0.grad[0] = 1.0;
        let mut adam = Adam::new(AdamConfig::with_lr(1e-4));
        adam.step(&mut s).unwrap();
        assert!((s.0.value[0] + 1e-4).abs() < 1e-11);
    }

    #[test]
    fn matches_scalar_reference_loop() {
        let mut s = scalar(0.3);
        let mut adam = Adam::new(AdamConfig::with_lr(1e-2));
        let (mut x, mut m, mut v) = (0.3f64, 0.0f64, 0.0f64);
        for t in 1..=100 {
            let g = (t as f64 * 0.37).sin() + 0.5 * x;
            s.0.grad[0] = g;
            adam.step(&mut s).unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            x -= 1e-2 * mh / (vh.sqrt() + 1e-8);
            assert!((s.0.value[0] - x).abs() < 1e-10);
        }
        assert_eq!(adam.step_count(), 100);
    }

    #[test]
    fn non_finite_gradient_rejected_without_writes() {
        let mut rng = rand::rngs::mock::StepRng::new(0, 1);
        let mut l = Linear::new(3, 2, &mut rng);
        l.weight.zero_grad();
        l.bias.zero_grad();
        l.weight.grad[0] = 1.0;
        l.bias.grad[1] = f64::NAN;
        let before = l.flat_values();
        let mut adam = Adam::new(AdamConfig::with_lr(0.1));
        assert!(matches!(adam.step(&mut l), Err(Error::NonFinite(_))));
        assert_eq!(l.flat_values(), before);
        assert_eq!(adam.step_count(), 0);
    }
}
