//! Gradient clipping and the Adam update under the Noam multiplier.

use std::collections::BTreeMap;
use std::path::Path;

use super::schedule::NoamSchedule;
use crate::error::{Error, Result};
use crate::io::kv::{kv_f64, parse_kv};
use crate::io::{read_checkpoint, write_checkpoint};
use crate::tensor::{ParameterSet, Tensor};

/// Scale all gradients so the global L2 norm is at most `max_norm`.
/// Returns the scale that was applied (1.0 when untouched).
pub fn clip_gradients(params: &mut ParameterSet, max_norm: f64) -> Result<f64> {
    let mut sq = 0.0;
    for (name, t) in params.iter() {
        if let Some(g) = &t.grad {
            for v in g {
                if !v.is_finite() {
                    return Err(Error::Diverged(format!("non-finite gradient in {name}")));
                }
                sq += v * v;
            }
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        params.scale_grads(scale);
        Ok(scale)
    } else {
        Ok(1.0)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

/// Adam moments plus the step counter; the learning rate each step comes
/// from the Noam schedule.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub schedule: NoamSchedule,
    pub adam: AdamConfig,
    pub grad_clip: f64,
    pub step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

#[derive(Debug, Clone, Copy)]
pub struct StepInfo {
    pub lr: f64,
    pub grad_norm: f64,
    pub clip_scale: f64,
}

impl Optimizer {
    pub fn new(schedule: NoamSchedule, grad_clip: f64) -> Self {
        Optimizer {
            schedule,
            adam: AdamConfig::default(),
            grad_clip,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Clip, take one Adam step at the scheduled rate, zero the gradients.
    pub fn step(&mut self, params: &mut ParameterSet) -> Result<StepInfo> {
        let grad_norm = params.grad_norm();
        let clip_scale = clip_gradients(params, self.grad_clip)?;
        self.step += 1;
        let lr = self.schedule.lr(self.step)?;
        let b1 = self.adam.beta1;
        let b2 = self.adam.beta2;
        let bias1 = 1.0 - b1.powi(self.step as i32);
        let bias2 = 1.0 - b2.powi(self.step as i32);

        for (name, t) in params.iter_mut() {
            if !t.requires_grad {
                continue;
            }
            let Some(grad) = t.grad.take() else { continue };
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; grad.len()]);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; grad.len()]);
            let data = t.data_mut();
            for i in 0..grad.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let mh = m[i] / bias1;
                let vh = v[i] / bias2;
                data[i] -= lr * mh / (vh.sqrt() + self.adam.eps);
            }
            if !data.iter().all(|x| x.is_finite()) {
                return Err(Error::Diverged(format!(
                    "non-finite parameter {name} after update"
                )));
            }
            t.grad = Some(vec![0.0; grad.len()]);
        }
        Ok(StepInfo {
            lr,
            grad_norm,
            clip_scale,
        })
    }

    /// Serialize step counter and moments (checkpoint/resume support).
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = format!(
            "step={}\nfactor={}\nmodel_dim={}\nwarmup={}\ngrad_clip={}\n",
            self.step,
            self.schedule.factor,
            self.schedule.model_dim,
            self.schedule.warmup,
            self.grad_clip
        );
        let mut params = ParameterSet::new();
        for (name, m) in &self.m {
            params.insert(format!("m.{name}"), Tensor::new(vec![m.len()], m.clone())?)?;
        }
        for (name, v) in &self.v {
            params.insert(format!("v.{name}"), Tensor::new(vec![v.len()], v.clone())?)?;
        }
        write_checkpoint(path, &header, &params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, params) = read_checkpoint(path)?;
        let map = parse_kv(&header)?;
        let schedule = NoamSchedule::new(
            kv_f64(&map, "factor")?,
            kv_f64(&map, "model_dim")? as usize,
            kv_f64(&map, "warmup")? as usize,
        )?;
        let mut opt = Optimizer::new(schedule, kv_f64(&map, "grad_clip")?);
        opt.step = kv_f64(&map, "step")? as u64;
        for (name, t) in params.iter() {
            if let Some(stripped) = name.strip_prefix("m.") {
                opt.m.insert(stripped.to_string(), t.data().to_vec());
            } else if let Some(stripped) = name.strip_prefix("v.") {
                opt.v.insert(stripped.to_string(), t.data().to_vec());
            }
        }
        Ok(opt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params_with_grads(grads: &[&[f64]]) -> ParameterSet {
        let mut ps = ParameterSet::new();
        for (i, g) in grads.iter().enumerate() {
            let mut t = Tensor::zeros(vec![g.len()]).with_grad();
            t.grad = Some(g.to_vec());
            ps.insert(format!("p{i}"), t).unwrap();
        }
        ps
    }

    #[test]
    fn overlong_gradients_are_halved_to_the_cap() {
        // Global norm 10 with cap 5: every entry halves, new norm 5.
        let mut ps = params_with_grads(&[&[6.0, 8.0]]);
        let scale = clip_gradients(&mut ps, 5.0).unwrap();
        assert!((scale - 0.5).abs() < 1e-15);
        assert_eq!(ps.get("p0").unwrap().grad.as_deref(), Some(&[3.0, 4.0][..]));
        assert!((ps.grad_norm() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn short_gradients_are_untouched() {
        let mut ps = params_with_grads(&[&[3.0]]);
        let scale = clip_gradients(&mut ps, 5.0).unwrap();
        assert_eq!(scale, 1.0);
        assert_eq!(ps.get("p0").unwrap().grad.as_deref(), Some(&[3.0][..]));
    }

    #[test]
    fn post_clip_norm_never_exceeds_cap() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let g: Vec<f64> = (0..rng.random_range(1..20))
                .map(|_| (rng.random::<f64>() - 0.5) * 20.0)
                .collect();
            let mut ps = params_with_grads(&[&g]);
            clip_gradients(&mut ps, 5.0).unwrap();
            assert!(ps.grad_norm() <= 5.0 + 1e-9);
        }
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut ps = params_with_grads(&[&[1.0, f64::NAN]]);
        assert!(matches!(
            clip_gradients(&mut ps, 5.0),
            Err(Error::Diverged(_))
        ));
    }

    #[test]
    fn adam_descends_a_quadratic() {
        // Minimize 0.5 * x^2 by feeding grad = x.
        let mut ps = ParameterSet::new();
        let mut t = Tensor::new(vec![1], vec![3.0]).unwrap().with_grad();
        t.grad = Some(vec![3.0]);
        ps.insert("x", t).unwrap();
        let mut opt = Optimizer::new(NoamSchedule::new(5.0, 16, 10).unwrap(), 5.0);
        for _ in 0..200 {
            let x = ps.get("x").unwrap().data()[0];
            ps.get_mut("x").unwrap().grad = Some(vec![x]);
            opt.step(&mut ps).unwrap();
        }
        let x = ps.get("x").unwrap().data()[0];
        assert!(x.abs() < 0.05, "x {x}");
    }

    #[test]
    fn optimizer_round_trip_resumes_identically() {
        let run = |save_at: Option<u64>| -> Vec<f64> {
            let mut ps = ParameterSet::new();
            let mut t = Tensor::new(vec![2], vec![1.0, -2.0]).unwrap().with_grad();
            t.grad = Some(vec![0.0, 0.0]);
            ps.insert("x", t).unwrap();
            let mut opt = Optimizer::new(NoamSchedule::new(2.0, 8, 5).unwrap(), 5.0);
            let dir = tempfile::tempdir().unwrap();
            for step in 0..20u64 {
                if save_at == Some(step) {
                    let p = dir.path().join("opt.ckpt");
                    opt.save(&p).unwrap();
                    opt = Optimizer::load(&p).unwrap();
                }
                let x = ps.get("x").unwrap().data().to_vec();
                ps.get_mut("x").unwrap().grad = Some(vec![x[0] + 0.3, x[1] * 2.0]);
                opt.step(&mut ps).unwrap();
            }
            ps.get("x").unwrap().data().to_vec()
        };
        let a = run(None);
        let b = run(Some(10));
        assert_eq!(a, b);
    }
}
