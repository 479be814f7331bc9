//! AdamW with decoupled weight decay over a [`ParamStore`].

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;

use crate::checkpoint::{Checkpoint, StoredTensor, ADAM_M, ADAM_V};
use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid AdamW settings {self:?}")))
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    t: usize,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> usize {
        self.t
    }

    /// One update of every parameter that received a gradient.
    pub fn step(&mut self, store: &ParamStore, grads: &GradStore, lr: f64) -> Result<()> {
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        self.t += 1;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (name, var) in store.iter() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let m_prev = match self.m.get(name) {
                Some(m) => m.clone(),
                None => g.zeros_like()?,
            };
            let v_prev = match self.v.get(name) {
                Some(v) => v.clone(),
                None => g.zeros_like()?,
            };
            let m = ((m_prev * beta1)? + (g * (1.0 - beta1))?)?;
            let v = ((v_prev * beta2)? + (g.sqr()? * (1.0 - beta2))?)?;
            let denom = ((&v / bc2)?.sqrt()? + eps)?;
            let update = ((&m / bc1)? / denom)?;
            let p = var.as_tensor();
            let next = ((p * (1.0 - lr * weight_decay))? - (update * lr)?)?;
            var.set(&next)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name.clone(), v);
        }
        Ok(())
    }

    pub fn save_into(&self, ck: &mut Checkpoint) -> Result<()> {
        ck.adam_t = self.t;
        for (prefix, map) in [(ADAM_M, &self.m), (ADAM_V, &self.v)] {
            for (name, t) in map {
                ck.tensors.insert(
                    format!("{prefix}{name}"),
                    StoredTensor {
                        dims: t.dims().to_vec(),
                        values: t.flatten_all()?.to_dtype(candle_core::DType::F32)?.to_vec1::<f32>()?,
                    },
                );
            }
        }
        Ok(())
    }

    pub fn load_from(&mut self, ck: &Checkpoint, store: &ParamStore) -> Result<()> {
        self.t = ck.adam_t;
        self.m.clear();
        self.v.clear();
        for (prefix, which) in [(ADAM_M, 0), (ADAM_V, 1)] {
            for (key, st) in ck.tensors.range(prefix.to_string()..) {
                let Some(name) = key.strip_prefix(prefix) else {
                    break;
                };
                if store.get(name).is_none() {
                    return Err(Error::ShapeMismatch(format!(
                        "optimizer state for unknown parameter {name}"
                    )));
                }
                let t = Tensor::from_slice(&st.values, st.dims.as_slice(), store.device())?.to_dtype(store.dtype())?;
                let map = if which == 0 { &mut self.m } else { &mut self.v };
                map.insert(name.to_string(), t);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::DType;

    /// Scalar reference AdamW.
    fn reference(p0: f64, grads: &[f64], lr: f64, c: AdamWConfig) -> f64 {
        let (mut p, mut m, mut v) = (p0, 0.0, 0.0);
        for (i, g) in grads.iter().enumerate() {
            let t = (i + 1) as i32;
            m = c.beta1 * m + (1.0 - c.beta1) * g;
            v = c.beta2 * v + (1.0 - c.beta2) * g * g;
            let mh = m / (1.0 - c.beta1.powi(t));
            let vh = v / (1.0 - c.beta2.powi(t));
            p = p * (1.0 - lr * c.weight_decay) - lr * mh / (vh.sqrt() + c.eps);
        }
        p
    }

    #[test]
    fn matches_scalar_reference_on_quadratic() {
        let mut store = ParamStore::new(DType::F64);
        store.insert("w", &[1.5, -0.5], &[2]).unwrap();
        let cfg = AdamWConfig::default();
        let mut opt = AdamW::new(cfg);
        let mut seen = [Vec::new(), Vec::new()];
        for _ in 0..5 {
            let w = store.get("w").unwrap().as_tensor().clone();
            let vals = store.values("w").unwrap();
            for (s, v) in seen.iter_mut().zip(&vals) {
                s.push(2.0 * v);
            }
            let loss = w.sqr().unwrap().sum_all().unwrap();
            let grads = loss.backward().unwrap();
            opt.step(&store, &grads, 0.01).unwrap();
        }
        let got = store.values("w").unwrap();
        for (k, p0) in [1.5, -0.5].iter().enumerate() {
            let want = reference(*p0, &seen[k], 0.01, cfg);
            assert!((got[k] - want).abs() < 1e-12, "{} vs {}", got[k], want);
        }
    }

    #[test]
    fn state_round_trips_through_checkpoint() {
        let mut store = ParamStore::new(DType::F32);
        store.insert("w", &[0.25, 1.0], &[2]).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default());
        let loss = store.get("w").unwrap().as_tensor().sqr().unwrap().sum_all().unwrap();
        opt.step(&store, &loss.backward().unwrap(), 0.1).unwrap();
        let mut ck = Checkpoint::new(String::new());
        opt.save_into(&mut ck).unwrap();
        let mut back = AdamW::new(AdamWConfig::default());
        back.load_from(&ck, &store).unwrap();
        assert_eq!(back.steps(), 1);
        let a = opt.m["w"].to_vec1::<f32>().unwrap();
        let b = back.m["w"].to_vec1::<f32>().unwrap();
        assert_eq!(a, b);
    }
}
