use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self { lr: 0.01, momentum: 0.9 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    Adam(AdamConfig),
    Sgd(SgdConfig),
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Adam(AdamConfig::default())
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            OptimizerConfig::Adam(c) => {
                c.lr > 0.0 && (0.0..1.0).contains(&c.beta1) && (0.0..1.0).contains(&c.beta2) && c.eps > 0.0
            }
            OptimizerConfig::Sgd(c) => c.lr > 0.0 && (0.0..1.0).contains(&c.momentum),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    pub t: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

#[derive(Debug, Clone)]
pub struct Sgd {
    pub config: SgdConfig,
    velocity: Vec<Vec<f32>>,
}

#[derive(Debug, Clone)]
pub enum Optimizer {
    Adam(Adam),
    Sgd(Sgd),
}

fn check_shapes(sizes: &[usize], params: &[Tensor<f32>], grads: &[Vec<f32>]) -> Result<()> {
    if params.len() != sizes.len() || grads.len() != sizes.len() {
        return Err(Error::Shape(format!(
            "optimizer tracks {} tensors, got {} params and {} grads",
            sizes.len(),
            params.len(),
            grads.len()
        )));
    }
    for (i, ((&n, p), g)) in sizes.iter().zip(params).zip(grads).enumerate() {
        if p.numel() != n || g.len() != n {
            return Err(Error::Shape(format!("optimizer tensor {i}: expected {n} values, got {} / {}", p.numel(), g.len())));
        }
    }
    Ok(())
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, sizes: &[usize]) -> Self {
        let zeros = || sizes.iter().map(|&n| vec![0f32; n]).collect::<Vec<_>>();
        match config {
            OptimizerConfig::Adam(config) => Optimizer::Adam(Adam { config, t: 0, m: zeros(), v: zeros() }),
            OptimizerConfig::Sgd(config) => Optimizer::Sgd(Sgd { config, velocity: zeros() }),
        }
    }

    fn sizes(&self) -> Vec<usize> {
        match self {
            Optimizer::Adam(a) => a.m.iter().map(Vec::len).collect(),
            Optimizer::Sgd(s) => s.velocity.iter().map(Vec::len).collect(),
        }
    }

    /// One update of every parameter from its gradient.
    pub fn step(&mut self, params: &mut [Tensor<f32>], grads: &[Vec<f32>]) -> Result<()> {
        check_shapes(&self.sizes(), params, grads)?;
        match self {
            Optimizer::Adam(a) => {
                a.t += 1;
                let c = a.config;
                let bc1 = 1.0 - c.beta1.powi(a.t as i32);
                let bc2 = 1.0 - c.beta2.powi(a.t as i32);
                let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
                let step = (c.lr / bc1) as f32;
                let inv_bc2 = (1.0 / bc2) as f32;
                let eps = c.eps as f32;
                for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(a.m.iter_mut().zip(a.v.iter_mut())) {
                    for i in 0..g.len() {
                        m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                        p.data[i] -= step * m[i] / ((v[i] * inv_bc2).sqrt() + eps);
                    }
                }
            }
            Optimizer::Sgd(s) => {
                let (lr, mu) = (s.config.lr as f32, s.config.momentum as f32);
                for ((p, g), vel) in params.iter_mut().zip(grads).zip(s.velocity.iter_mut()) {
                    for i in 0..g.len() {
                        vel[i] = mu * vel[i] + g[i];
                        p.data[i] -= lr * vel[i];
                    }
                }
            }
        }
        Ok(())
    }

    /// Named state tensors for checkpointing.
    pub fn state_tensors(&self) -> Vec<(String, Tensor<f32>)> {
        let t = |v: &Vec<f32>| Tensor { shape: vec![v.len()], data: v.clone() };
        match self {
            Optimizer::Adam(a) => {
                // The step count is split in two so it survives f32 storage exactly.
                let hi = (a.t >> 24) as f32;
                let lo = (a.t & 0xff_ffff) as f32;
                let mut out = vec![("optim.adam.t".to_string(), Tensor { shape: vec![2], data: vec![hi, lo] })];
                for (i, (m, v)) in a.m.iter().zip(&a.v).enumerate() {
                    out.push((format!("optim.adam.m.{i}"), t(m)));
                    out.push((format!("optim.adam.v.{i}"), t(v)));
                }
                out
            }
            Optimizer::Sgd(s) => {
                s.velocity.iter().enumerate().map(|(i, v)| (format!("optim.sgd.velocity.{i}"), t(v))).collect()
            }
        }
    }

    pub fn load_state(&mut self, lookup: &dyn Fn(&str) -> Option<Tensor<f32>>) -> Result<()> {
        let fetch = |name: String, n: usize| -> Result<Vec<f32>> {
            let t = lookup(&name).ok_or_else(|| Error::Checkpoint(format!("missing optimizer tensor {name}")))?;
            if t.numel() != n {
                return Err(Error::Checkpoint(format!("optimizer tensor {name} has {} values, expected {n}", t.numel())));
            }
            Ok(t.data)
        };
        match self {
            Optimizer::Adam(a) => {
                let t = fetch("optim.adam.t".into(), 2)?;
                a.t = ((t[0] as u64) << 24) | t[1] as u64;
                for i in 0..a.m.len() {
                    a.m[i] = fetch(format!("optim.adam.m.{i}"), a.m[i].len())?;
                    a.v[i] = fetch(format!("optim.adam.v.{i}"), a.v[i].len())?;
                }
            }
            Optimizer::Sgd(s) => {
                for i in 0..s.velocity.len() {
                    s.velocity[i] = fetch(format!("optim.sgd.velocity.{i}"), s.velocity[i].len())?;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: &[f32]) -> Vec<Tensor<f32>> {
        vec![Tensor { shape: vec![v.len()], data: v.to_vec() }]
    }

    #[test]
    fn zero_gradient_leaves_params() {
        for cfg in [OptimizerConfig::default(), OptimizerConfig::Sgd(SgdConfig::default())] {
            let mut p = param(&[1.0, -2.0]);
            let mut opt = Optimizer::new(cfg, &[2]);
            opt.step(&mut p, &[vec![0.0, 0.0]]).unwrap();
            assert_eq!(p[0].data, vec![1.0, -2.0]);
        }
    }

    #[test]
    fn first_adam_step_closed_form() {
        // After one step m̂ = g and v̂ = g², so the move is lr·g/(|g| + ε).
        let g = [0.3f32, -2.0, 1e-3];
        let mut p = param(&[0.0, 0.0, 0.0]);
        let mut opt = Optimizer::new(OptimizerConfig::default(), &[3]);
        opt.step(&mut p, &[g.to_vec()]).unwrap();
        for (pi, gi) in p[0].data.iter().zip(g) {
            let expect = -1e-3 * gi as f64 / (gi.abs() as f64 + 1e-8);
            assert!((*pi as f64 - expect).abs() < 1e-8, "{pi} vs {expect}");
        }
    }

    #[test]
    fn plain_sgd_step() {
        let mut p = param(&[1.0]);
        let mut opt = Optimizer::new(OptimizerConfig::Sgd(SgdConfig { lr: 0.1, momentum: 0.0 }), &[1]);
        opt.step(&mut p, &[vec![1.0]]).unwrap();
        assert_eq!(p[0].data[0], 1.0 - 0.1f32);
    }

    #[test]
    fn shape_mismatch() {
        let mut p = param(&[1.0, 2.0]);
        let mut opt = Optimizer::new(OptimizerConfig::default(), &[2]);
        assert!(opt.step(&mut p, &[vec![1.0]]).is_err());
    }

    #[test]
    fn state_round_trip() {
        let mut p = param(&[1.0, 2.0]);
        let mut opt = Optimizer::new(OptimizerConfig::default(), &[2]);
        for _ in 0..3 {
            opt.step(&mut p, &[vec![0.5, -0.25]]).unwrap();
        }
        let saved = opt.state_tensors();
        let mut fresh = Optimizer::new(OptimizerConfig::default(), &[2]);
        fresh.load_state(&|n| saved.iter().find(|(k, _)| k == n).map(|(_, t)| t.clone())).unwrap();
        let (mut p1, mut p2) = (p.clone(), p.clone());
        opt.step(&mut p1, &[vec![0.1, 0.1]]).unwrap();
        fresh.step(&mut p2, &[vec![0.1, 0.1]]).unwrap();
        assert_eq!(p1, p2);
    }
}
