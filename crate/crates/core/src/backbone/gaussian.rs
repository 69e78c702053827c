use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Array3, Zip};
use sha2::{Digest, Sha256};

use super::{check_inputs, ConceptEmbedding, Denoiser};
use crate::attention::{AttentionOverride, AttentionRecord, AttentionSlot};
use crate::error::{Error, Result};
use crate::schedule::{Latent, NoiseSample, NoiseSchedule, Shape3};

/// Exact minimizer of the noise-prediction objective for Gaussian data
/// `N(μ + W·vec(v), diag(σ²))`.
///
/// For `z_t = sqrt(ā)·z0 + sqrt(1 − ā)·ε` the posterior mean of the noise is
/// `sqrt(1 − ā)·(z_t − sqrt(ā)·m(v)) / (ā·σ² + 1 − ā)`. It has no attention
/// blocks.
#[derive(Debug, Clone)]
pub struct GaussianOracle {
    mean: Array3<f64>,
    var: Array3<f64>,
    /// `(latent_len, tokens · embed_dim)`; `None` means unconditional.
    cond: Option<Array2<f64>>,
    embed_dim: usize,
    schedule: NoiseSchedule,
}

impl GaussianOracle {
    pub fn new(
        mean: Array3<f64>,
        var: Array3<f64>,
        cond: Option<Array2<f64>>,
        embed_dim: usize,
        schedule: NoiseSchedule,
    ) -> Result<Self> {
        if mean.shape() != var.shape() {
            return Err(Error::ShapeMismatch {
                context: "oracle variance",
                expected: mean.shape().to_vec(),
                got: var.shape().to_vec(),
            });
        }
        if var.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::invalid("oracle variances must be positive"));
        }
        if let Some(w) = &cond {
            if w.nrows() != mean.len() || w.ncols() % embed_dim != 0 || w.ncols() == 0 {
                return Err(Error::ShapeMismatch {
                    context: "oracle conditioning matrix",
                    expected: vec![mean.len(), embed_dim],
                    got: w.shape().to_vec(),
                });
            }
        }
        Ok(GaussianOracle {
            mean,
            var,
            cond,
            embed_dim,
            schedule,
        })
    }

    /// Conditional data mean `μ + W·vec(v)`.
    pub fn data_mean(&self, v: &ConceptEmbedding) -> Result<Array3<f64>> {
        let Some(w) = &self.cond else {
            return Ok(self.mean.clone());
        };
        if v.data.len() != w.ncols() {
            return Err(Error::ShapeMismatch {
                context: "oracle conditioning tokens",
                expected: vec![w.ncols() / self.embed_dim, self.embed_dim],
                got: vec![v.tokens(), v.dim()],
            });
        }
        let flat = Array1::from_iter(v.data.iter().copied());
        let offset = w.dot(&flat).into_shape_with_order(self.mean.raw_dim()).unwrap();
        Ok(&self.mean + &offset)
    }

    pub fn variance(&self) -> &Array3<f64> {
        &self.var
    }

    pub fn conditioning(&self) -> Option<&Array2<f64>> {
        self.cond.as_ref()
    }

    /// Score `∇ log p_t(z_t | v)` of the noised marginal.
    pub fn score(&self, z_t: &Latent, t: usize, v: &ConceptEmbedding) -> Result<Array3<f64>> {
        let a = self.schedule.alpha_bar(t);
        let m = self.data_mean(v)?;
        Ok(Zip::from(&z_t.data)
            .and(&m)
            .and(&self.var)
            .map_collect(|&z, &mu, &s2| -(z - a.sqrt() * mu) / (a * s2 + 1.0 - a)))
    }

    pub fn oracle_epsilon(&self, z_t: &Latent, t: usize, v: &ConceptEmbedding) -> Result<NoiseSample> {
        check_inputs(self, z_t, t, v, None)?;
        let a = self.schedule.alpha_bar(t);
        let m = self.data_mean(v)?;
        let (ca, cb) = (a.sqrt(), (1.0 - a).sqrt());
        let data = Zip::from(&z_t.data)
            .and(&m)
            .and(&self.var)
            .map_collect(|&z, &mu, &s2| cb * (z - ca * mu) / (a * s2 + 1.0 - a));
        Ok(NoiseSample::raw(data))
    }
}

impl Denoiser for GaussianOracle {
    fn latent_shape(&self) -> Shape3 {
        let s = self.mean.shape();
        [s[0], s[1], s[2]]
    }

    fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn attention_shapes(&self, _tokens: usize) -> BTreeMap<AttentionSlot, [usize; 3]> {
        BTreeMap::new()
    }

    fn evaluate(
        &self,
        z_t: &Latent,
        t: usize,
        v: &ConceptEmbedding,
        replace: Option<&AttentionOverride>,
    ) -> Result<(NoiseSample, AttentionRecord)> {
        check_inputs(self, z_t, t, v, replace)?;
        Ok((self.oracle_epsilon(z_t, t, v)?, AttentionRecord::default()))
    }

    fn evaluate_with_grad(
        &self,
        z_t: &Latent,
        t: usize,
        v: &ConceptEmbedding,
        upstream: &dyn Fn(&NoiseSample) -> Array3<f64>,
    ) -> Result<(NoiseSample, Array2<f64>)> {
        let eps = self.oracle_epsilon(z_t, t, v)?;
        let d_eps = upstream(&eps);
        let Some(w) = &self.cond else {
            return Ok((eps, Array2::zeros(v.data.raw_dim())));
        };
        let a = self.schedule.alpha_bar(t);
        let k = -(a * (1.0 - a)).sqrt();
        let d_mean = Zip::from(&d_eps)
            .and(&self.var)
            .map_collect(|&g, &s2| k * g / (a * s2 + 1.0 - a));
        let flat = Array1::from_iter(d_mean.iter().copied());
        let dv = w
            .t()
            .dot(&flat)
            .into_shape_with_order(v.data.raw_dim())
            .unwrap();
        Ok((eps, dv))
    }

    fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(b"gaussian-oracle");
        for x in self.mean.iter().chain(self.var.iter()) {
            h.update(x.to_bits().to_le_bytes());
        }
        if let Some(w) = &self.cond {
            for x in w.iter() {
                h.update(x.to_bits().to_le_bytes());
            }
        }
        h.update(self.schedule.hash().as_bytes());
        hex::encode(h.finalize())
    }
}
