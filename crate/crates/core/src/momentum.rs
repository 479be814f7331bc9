//! Query/key twin networks with an exponential-moving-average key branch.

use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::{MlpHead, StageEncoder, StageEncoderConfig};
use crate::error::{Error, Result};
use crate::math::{EmbeddingBatch, Role};
use crate::params::ParamStore;

pub const ENCODER: &str = "encoder";
pub const PROJECTOR: &str = "projector";
pub const PREDICTOR: &str = "predictor";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkConfig {
    pub encoder: StageEncoderConfig,
    pub proj_hidden: usize,
    /// Width of the contrastive embedding.
    pub proj_dim: usize,
    pub proj_layers: usize,
    pub pred_hidden: usize,
    pub pred_layers: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            encoder: StageEncoderConfig::desk(),
            proj_hidden: 256,
            proj_dim: 256,
            proj_layers: 3,
            pred_hidden: 256,
            pred_layers: 2,
        }
    }
}

impl NetworkConfig {
    fn head_dims(input: usize, hidden: usize, out: usize, layers: usize) -> Vec<usize> {
        let mut dims = vec![input];
        dims.extend(std::iter::repeat_n(hidden, layers.saturating_sub(1)));
        dims.push(out);
        dims
    }

    pub fn projector_dims(&self) -> Vec<usize> {
        Self::head_dims(
            self.encoder.feature_dim,
            self.proj_hidden,
            self.proj_dim,
            self.proj_layers,
        )
    }

    pub fn predictor_dims(&self) -> Vec<usize> {
        Self::head_dims(self.proj_dim, self.pred_hidden, self.proj_dim, self.pred_layers)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.proj_layers == 0 || self.pred_layers == 0 || self.proj_dim == 0 {
            return Err(Error::Config("head layer counts and proj_dim must be positive".into()));
        }
        Ok(())
    }
}

/// Encoder, projection head and prediction head.
#[derive(Debug, Clone)]
pub struct QueryNet {
    pub encoder: StageEncoder,
    pub projector: MlpHead,
    pub predictor: MlpHead,
}

impl QueryNet {
    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        let f = self.encoder.forward_pooled(images)?;
        self.predictor.forward(&self.projector.forward(&f)?)
    }
}

/// Encoder and projection head; never trained directly.
#[derive(Debug, Clone)]
pub struct KeyNet {
    pub encoder: StageEncoder,
    pub projector: MlpHead,
}

impl KeyNet {
    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        let f = self.encoder.forward_pooled(images)?;
        Ok(self.projector.forward(&f)?.detach())
    }
}

fn build_query(cfg: &NetworkConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<QueryNet> {
    let mut s = store.scope(rng);
    Ok(QueryNet {
        encoder: StageEncoder::new(&cfg.encoder, &mut s.sub(ENCODER))?,
        projector: MlpHead::new(&mut s.sub(PROJECTOR), &cfg.projector_dims(), true)?,
        predictor: MlpHead::new(&mut s.sub(PREDICTOR), &cfg.predictor_dims(), true)?,
    })
}

fn build_key(cfg: &NetworkConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<KeyNet> {
    let mut s = store.scope(rng);
    Ok(KeyNet {
        encoder: StageEncoder::new(&cfg.encoder, &mut s.sub(ENCODER))?,
        projector: MlpHead::new(&mut s.sub(PROJECTOR), &cfg.projector_dims(), true)?,
    })
}

/// Outputs of one three-stream forward pass.
///
/// `raw_queries_*` keep the autograd graph. `queries_*` are their detached
/// `f64` values, left unnormalized so loss gradients land on the raw
/// predictor output; keys are L2-normalized.
#[derive(Debug, Clone)]
pub struct ViewEmbeddings {
    pub raw_queries_a: Tensor,
    pub raw_queries_b: Tensor,
    pub queries_a: EmbeddingBatch,
    pub queries_b: EmbeddingBatch,
    pub keys_a: EmbeddingBatch,
    pub keys_b: EmbeddingBatch,
    pub original_keys: EmbeddingBatch,
}

#[derive(Debug)]
pub struct MomentumPair {
    pub config: NetworkConfig,
    pub query_params: ParamStore,
    pub key_params: ParamStore,
    pub query: QueryNet,
    pub key: KeyNet,
    m: f64,
}

impl MomentumPair {
    /// Fresh pair with the key branch initialized as a copy of the query branch.
    pub fn new(config: &NetworkConfig, dtype: DType, m: f64, seed: u64) -> Result<Self> {
        config.validate()?;
        check_momentum(m)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut query_params = ParamStore::new(dtype);
        let query = build_query(config, &mut query_params, &mut rng)?;
        let mut key_params = ParamStore::new(dtype);
        let key = build_key(config, &mut key_params, &mut rng)?;
        key_params.copy_from(&query_params)?;
        let pair = Self {
            config: config.clone(),
            query_params,
            key_params,
            query,
            key,
            m,
        };
        pair.check_alignment()?;
        Ok(pair)
    }

    pub fn momentum(&self) -> f64 {
        self.m
    }

    pub fn set_momentum(&mut self, m: f64) -> Result<()> {
        check_momentum(m)?;
        self.m = m;
        Ok(())
    }

    /// Key parameters must be exactly the encoder+projector subset of the query parameters.
    pub fn check_alignment(&self) -> Result<()> {
        let expected: Vec<&String> = self
            .query_params
            .names()
            .filter(|n| !n.starts_with(PREDICTOR))
            .collect();
        let got: Vec<&String> = self.key_params.names().collect();
        if expected != got {
            return Err(Error::ShapeMismatch(
                "key parameters are not the encoder+projector subset of the query parameters".into(),
            ));
        }
        for name in got {
            let (k, q) = (self.key_params.get(name).unwrap(), self.query_params.get(name).unwrap());
            if k.dims() != q.dims() {
                return Err(Error::ShapeMismatch(format!(
                    "{name}: {:?} vs {:?}",
                    k.dims(),
                    q.dims()
                )));
            }
        }
        Ok(())
    }

    /// `θ_k ← m·θ_k + (1−m)·θ_q` for every key parameter.
    pub fn ema_update(&self) -> Result<()> {
        ema_update(&self.key_params, &self.query_params, self.m)
    }

    /// Embeds two augmented views through both branches and the originals
    /// through the key branch. With `originals = None` the view-a keys stand in.
    pub fn embed_views(&self, view_a: &Tensor, view_b: &Tensor, originals: Option<&Tensor>) -> Result<ViewEmbeddings> {
        let n = view_a.dims()[0];
        if view_b.dims() != view_a.dims() || originals.is_some_and(|o| o.dims() != view_a.dims()) {
            return Err(Error::ShapeMismatch("view batches are not aligned".into()));
        }
        let raw_queries_a = self.query.forward(view_a)?;
        let raw_queries_b = self.query.forward(view_b)?;
        let keys_a = to_batch(&self.key.forward(view_a)?, Role::Key)?;
        let keys_b = to_batch(&self.key.forward(view_b)?, Role::Key)?;
        let original_keys = match originals {
            Some(o) => to_batch(&self.key.forward(o)?, Role::OriginalKey)?,
            None => {
                let k = keys_a.as_slice().to_vec();
                EmbeddingBatch::new(k, keys_a.dim(), Role::OriginalKey)?
            }
        };
        debug_assert_eq!(keys_a.len(), n);
        Ok(ViewEmbeddings {
            queries_a: to_raw_batch(&raw_queries_a, Role::Query)?,
            queries_b: to_raw_batch(&raw_queries_b, Role::Query)?,
            raw_queries_a,
            raw_queries_b,
            keys_a,
            keys_b,
            original_keys,
        })
    }
}

fn check_momentum(m: f64) -> Result<()> {
    if (0.0..1.0).contains(&m) {
        Ok(())
    } else {
        Err(Error::Config(format!("momentum must lie in [0, 1), got {m}")))
    }
}

/// Elementwise EMA of every parameter in `key` toward the same-named one in `query`.
pub fn ema_update(key: &ParamStore, query: &ParamStore, m: f64) -> Result<()> {
    check_momentum(m)?;
    for (name, k) in key.iter() {
        let q = query
            .get(name)
            .ok_or_else(|| Error::ShapeMismatch(format!("query lacks {name}")))?;
        if q.dims() != k.dims() {
            return Err(Error::ShapeMismatch(format!(
                "{name}: {:?} vs {:?}",
                k.dims(),
                q.dims()
            )));
        }
        let updated = ((k.as_tensor() * m)? + (q.as_tensor().to_dtype(k.dtype())? * (1.0 - m))?)?;
        k.set(&updated)?;
    }
    Ok(())
}

/// Cosine ramp of the momentum from `base` toward 1 over `total` steps.
pub fn momentum_at(base: f64, step: usize, total: usize, ramp: bool) -> f64 {
    if !ramp || total == 0 {
        return base;
    }
    let t = step.min(total) as f64 / total as f64;
    1.0 - (1.0 - base) * ((std::f64::consts::PI * t).cos() + 1.0) / 2.0
}

/// Detached copy of a `(N, D)` tensor as an `f64` batch.
pub fn to_raw_batch(t: &Tensor, role: Role) -> Result<EmbeddingBatch> {
    let (_, d) = t.dims2()?;
    let v = t.detach().to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    EmbeddingBatch::new(v, d, role)
}

/// Detached copy of a `(N, D)` tensor as an L2-normalized `f64` batch.
pub fn to_batch(t: &Tensor, role: Role) -> Result<EmbeddingBatch> {
    to_raw_batch(t, role)?.normalized()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> NetworkConfig {
        let mut encoder = StageEncoderConfig::desk();
        encoder.input_size = 32;
        NetworkConfig {
            encoder,
            proj_hidden: 16,
            proj_dim: 8,
            proj_layers: 3,
            pred_hidden: 16,
            pred_layers: 2,
        }
    }

    #[test]
    fn key_names_are_query_subset() {
        let pair = MomentumPair::new(&small(), DType::F32, 0.99, 3).unwrap();
        pair.check_alignment().unwrap();
        assert!(pair.query_params.names().any(|n| n.starts_with(PREDICTOR)));
        assert!(!pair.key_params.names().any(|n| n.starts_with(PREDICTOR)));
    }

    #[test]
    fn invalid_momentum_rejected() {
        assert!(MomentumPair::new(&small(), DType::F32, 1.0, 3).is_err());
        assert!(MomentumPair::new(&small(), DType::F32, -0.1, 3).is_err());
    }

    #[test]
    fn momentum_ramp() {
        assert_eq!(momentum_at(0.99, 5, 10, false), 0.99);
        assert!((momentum_at(0.99, 0, 10, true) - 0.99).abs() < 1e-12);
        assert!((momentum_at(0.99, 10, 10, true) - 1.0).abs() < 1e-12);
    }
}
