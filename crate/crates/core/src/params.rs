//! Named trainable parameters.
//!
//! Networks are assembled against a [`ParamStore`] through a [`Scope`], which
//! prefixes names with the module path (`encoder.stage2.block0.attn.qkv.weight`)
//! and creates each tensor on first use. Creating the same name twice hands
//! back the existing variable, so two networks built against one store share
//! weights.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Normal with the given std, redrawn outside ±2 std.
    TruncNormal(f64),
    Const(f64),
}

pub const ZEROS: Init = Init::Const(0.0);
pub const ONES: Init = Init::Const(1.0);

impl Init {
    fn sample(self, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match self {
            Init::Const(c) => vec![c; n],
            Init::TruncNormal(std) => (0..n)
                .map(|_| loop {
                    let z: f64 = rng.sample(StandardNormal);
                    if z.abs() <= 2.0 {
                        break z * std;
                    }
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn scope<'a>(&'a mut self, rng: &'a mut ChaCha8Rng) -> Scope<'a> {
        Scope {
            store: self,
            rng,
            prefix: String::new(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.vars.keys()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Number of scalar parameters under a name prefix.
    pub fn num_elements_with_prefix(&self, prefix: &str) -> usize {
        self.vars
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.elem_count())
            .sum()
    }

    pub fn insert(&mut self, name: &str, values: &[f64], shape: &[usize]) -> Result<()> {
        let t = Tensor::from_slice(values, shape, &self.device)?.to_dtype(self.dtype)?;
        match self.vars.get(name) {
            Some(v) if v.dims() == shape => v.set(&t)?,
            Some(v) => {
                return Err(Error::ShapeMismatch(format!(
                    "{name}: stored {:?}, loading {shape:?}",
                    v.dims()
                )))
            }
            None => {
                self.vars.insert(name.to_string(), Var::from_tensor(&t)?);
            }
        }
        Ok(())
    }

    /// Flattened values of one parameter as `f64`.
    pub fn values(&self, name: &str) -> Result<Vec<f64>> {
        let v = self
            .vars
            .get(name)
            .ok_or_else(|| Error::ShapeMismatch(format!("unknown parameter {name}")))?;
        Ok(v.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
    }

    pub fn set_values(&self, name: &str, values: &[f64]) -> Result<()> {
        let v = self
            .vars
            .get(name)
            .ok_or_else(|| Error::ShapeMismatch(format!("unknown parameter {name}")))?;
        if values.len() != v.elem_count() {
            return Err(Error::ShapeMismatch(format!(
                "{name}: {} values for {} elements",
                values.len(),
                v.elem_count()
            )));
        }
        let t = Tensor::from_slice(values, v.dims(), &self.device)?.to_dtype(self.dtype)?;
        v.set(&t)?;
        Ok(())
    }

    /// Copies every parameter of `self` from the same-named one in `src`.
    pub fn copy_from(&self, src: &ParamStore) -> Result<()> {
        for (name, dst) in &self.vars {
            let s = src
                .vars
                .get(name)
                .ok_or_else(|| Error::ShapeMismatch(format!("source lacks parameter {name}")))?;
            if s.dims() != dst.dims() {
                return Err(Error::ShapeMismatch(format!(
                    "{name}: {:?} vs {:?}",
                    s.dims(),
                    dst.dims()
                )));
            }
            dst.set(&s.as_tensor().to_dtype(self.dtype)?)?;
        }
        Ok(())
    }
}

/// Name-prefixing handle used while building a network.
pub struct Scope<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl Scope<'_> {
    pub fn sub(&mut self, name: impl AsRef<str>) -> Scope<'_> {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        Scope {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        if let Some(v) = self.store.vars.get(&full) {
            if v.dims() != shape {
                return Err(Error::ShapeMismatch(format!(
                    "{full}: existing {:?}, requested {shape:?}",
                    v.dims()
                )));
            }
            return Ok(v.as_tensor().clone());
        }
        let n = shape.iter().product();
        let values = init.sample(n, self.rng);
        let t = Tensor::from_vec(values, shape, &self.store.device)?.to_dtype(self.store.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.store.vars.insert(full, var);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn scoped_names_and_sharing() {
        let mut store = ParamStore::new(DType::F64);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = {
            let mut s = store.scope(&mut rng);
            let mut l = s.sub("layer");
            l.param("weight", &[2, 3], Init::TruncNormal(0.02)).unwrap()
        };
        let b = {
            let mut s = store.scope(&mut rng);
            s.sub("layer").param("weight", &[2, 3], ZEROS).unwrap()
        };
        assert_eq!(store.names().collect::<Vec<_>>(), vec!["layer.weight"]);
        let av = a.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(av, b.flatten_all().unwrap().to_vec1::<f64>().unwrap());
        assert!(av.iter().all(|x| x.abs() <= 0.04));
        let mut s = store.scope(&mut rng);
        assert!(s.sub("layer").param("weight", &[3, 2], ZEROS).is_err());
    }

    #[test]
    fn set_values_is_visible_through_clones() {
        let mut store = ParamStore::new(DType::F32);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = store.scope(&mut rng).param("w", &[2], ZEROS).unwrap();
        store.set_values("w", &[1.5, -2.0]).unwrap();
        assert_eq!(t.to_vec1::<f32>().unwrap(), vec![1.5, -2.0]);
        assert!(store.set_values("w", &[1.0]).is_err());
    }
}
