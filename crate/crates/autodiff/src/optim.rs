//! AdamW with decoupled weight decay.

use crate::error::{Error, Result};
use crate::graph::{Gradients, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// Optimizer state: first and second moments per parameter plus the step count.
#[derive(Debug, Clone)]
pub struct AdamW<T: Scalar = f32> {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig, params: &ParamStore<T>) -> Self {
        let m = params.iter().map(|(_, _, t)| vec![T::zero(); t.numel()]).collect();
        let v = params.iter().map(|(_, _, t)| vec![T::zero(); t.numel()]).collect();
        AdamW { config, step: 0, m, v }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update with learning rate `lr`.
    ///
    /// Parameters without a gradient are left untouched.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64) -> Result<()> {
        if !(lr > 0.0) {
            return Err(Error::Usage(format!("learning rate must be positive, got {lr}")));
        }
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Usage(format!(
                "optimizer tracks {} parameters, store has {}, gradients cover {}",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for id in params.ids() {
            if let Some(g) = grads.get(id) {
                if g.shape() != params.get(id).shape() {
                    return Err(Error::Usage(format!(
                        "gradient {:?} does not match parameter {} {:?}",
                        g.shape(),
                        params.name(id),
                        params.get(id).shape()
                    )));
                }
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let decay = T::of(1.0 - lr * c.weight_decay);
        let (lr_t, eps) = (T::of(lr / bc1), T::of(c.eps));
        let inv_bc2 = T::of(1.0 / bc2);
        for id in params.ids() {
            let Some(g) = grads.get(id) else { continue };
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let p = params.get_mut(id).data_mut();
            for (((pv, &gv), mv), vv) in p.iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mv = b1 * *mv + (T::one() - b1) * gv;
                *vv = b2 * *vv + (T::one() - b2) * gv * gv;
                *pv *= decay;
                *pv -= lr_t * *mv / ((*vv * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Moment arrays, named after their parameters, for checkpointing.
    pub fn export(&self, params: &ParamStore<T>) -> (u64, Vec<(String, Tensor<T>)>) {
        let mut out = Vec::with_capacity(2 * self.m.len());
        for (id, name, t) in params.iter() {
            let shape = t.shape().to_vec();
            out.push((format!("adam.m.{name}"), Tensor::new(shape.clone(), self.m[id.index()].clone()).unwrap()));
            out.push((format!("adam.v.{name}"), Tensor::new(shape, self.v[id.index()].clone()).unwrap()));
        }
        (self.step, out)
    }

    /// Restores moments exported by [`AdamW::export`].
    pub fn import(
        config: AdamWConfig,
        params: &ParamStore<T>,
        step: u64,
        lookup: impl Fn(&str) -> Option<Tensor<T>>,
    ) -> Result<Self> {
        let mut opt = Self::new(config, params);
        opt.step = step;
        for (id, name, t) in params.iter() {
            for (prefix, slot) in [("adam.m.", &mut opt.m[id.index()]), ("adam.v.", &mut opt.v[id.index()])] {
                let key = format!("{prefix}{name}");
                let arr = lookup(&key).ok_or_else(|| Error::Usage(format!("missing optimizer state {key}")))?;
                if arr.shape() != t.shape() {
                    return Err(Error::Usage(format!("optimizer state {key} has shape {:?}", arr.shape())));
                }
                *slot = arr.into_data();
            }
        }
        Ok(opt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;

    fn store(vals: &[f64]) -> (ParamStore<f64>, crate::graph::ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::from_f64([vals.len()], vals).unwrap());
        (s, id)
    }

    fn grads_for(s: &ParamStore<f64>, id: crate::graph::ParamId, g: &[f64]) -> Gradients<f64> {
        // loss = sum(g * p) has gradient g
        let mut graph = Graph::with_params(s);
        let p = graph.param(id);
        let c = graph.input(Tensor::from_f64([g.len()], g).unwrap());
        let prod = graph.mul(p, c).unwrap();
        let loss = graph.sum(prod).unwrap();
        graph.backward(loss).unwrap()
    }

    #[test]
    fn zero_grads_without_decay_leave_params() {
        let (mut s, id) = store(&[1.0, -2.0, 3.0]);
        let grads = grads_for(&s, id, &[0.0; 3]);
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() }, &s);
        opt.step(&mut s, &grads, 0.1).unwrap();
        assert_eq!(s.get(id).data(), &[1.0, -2.0, 3.0]);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn first_step_moves_by_lr_against_sign() {
        let (mut s, id) = store(&[1.0, 1.0, 1.0]);
        let g = [0.3, -5.0, 2e-3];
        let grads = grads_for(&s, id, &g);
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        let mut opt = AdamW::new(cfg, &s);
        let lr = 0.01;
        opt.step(&mut s, &grads, lr).unwrap();
        for (&p, &gv) in s.get(id).data().iter().zip(&g) {
            // m_hat = g, v_hat = g^2 after bias correction
            let want = 1.0 - lr * gv / (gv.abs() + cfg.eps);
            assert!((p - want).abs() < 1e-12, "{p} vs {want}");
        }
    }

    #[test]
    fn decoupled_decay_closed_form() {
        let (mut s, id) = store(&[2.0, -4.0]);
        let grads = grads_for(&s, id, &[0.0, 0.0]);
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.1, ..Default::default() }, &s);
        opt.step(&mut s, &grads, 0.5).unwrap();
        assert!((s.get(id).data()[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
        assert!((s.get(id).data()[1] + 4.0 * (1.0 - 0.05)).abs() < 1e-15);
    }

    #[test]
    fn rejects_nonpositive_lr_and_mismatched_store() {
        let (mut s, id) = store(&[1.0]);
        let grads = grads_for(&s, id, &[1.0]);
        let mut opt = AdamW::new(AdamWConfig::default(), &s);
        assert!(opt.step(&mut s, &grads, 0.0).is_err());
        s.add("extra", Tensor::zeros([2]));
        assert!(opt.step(&mut s, &grads, 0.1).is_err());
    }

    #[test]
    fn export_import_round_trip() {
        let (mut s, id) = store(&[1.0, 2.0]);
        let grads = grads_for(&s, id, &[0.5, -0.5]);
        let mut opt = AdamW::new(AdamWConfig::default(), &s);
        opt.step(&mut s, &grads, 0.1).unwrap();
        let (step, arrays) = opt.export(&s);
        let restored = AdamW::import(opt.config, &s, step, |k| arrays.iter().find(|(n, _)| n == k).map(|(_, t)| t.clone())).unwrap();
        assert_eq!(restored.m, opt.m);
        assert_eq!(restored.v, opt.v);
        assert_eq!(restored.steps(), 1);
    }
}
