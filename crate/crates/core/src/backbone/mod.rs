//! The denoiser abstraction `ε(z_t, t, v)` and its implementations.

mod gaussian;
mod tiny;
mod train;

use std::collections::BTreeMap;

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{AttentionOverride, AttentionRecord, AttentionSlot};
use crate::error::{Error, Result};
use crate::nn::{gaussian_matrix, round_f32};
use crate::schedule::{Latent, NoiseSample, NoiseSchedule, Shape3};

pub use gaussian::GaussianOracle;
pub use tiny::{TinyConfig, TinyDenoiser, TinyWeights};
pub use train::{
    training_loss, training_loss_grad, train_backbone, LabeledLatent, TrainConfig, TrainReport,
};

/// Reserved token whose embedding row is all zeros.
pub const NULL_TOKEN: &str = "<null>";

/// Standard deviation of seeded token embeddings.
pub const TOKEN_STD: f64 = 0.02;

/// A conditioning matrix of shape `(tokens, embed_dim)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptEmbedding {
    pub data: Array2<f64>,
    pub label: String,
}

impl ConceptEmbedding {
    pub fn new(data: Array2<f64>, label: impl Into<String>) -> Result<Self> {
        if data.nrows() == 0 {
            return Err(Error::invalid("concept embedding needs at least one token"));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::non_finite("concept embedding", 0));
        }
        Ok(ConceptEmbedding {
            data,
            label: label.into(),
        })
    }

    pub fn tokens(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    /// Seeded Gaussian rows, rounded to `f32` precision.
    pub fn random(tokens: usize, dim: usize, std: f64, seed: u64, label: &str) -> Result<Self> {
        if tokens == 0 {
            return Err(Error::invalid("concept embedding needs at least one token"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = gaussian_matrix(tokens, dim, std, &mut rng);
        round_f32(data.as_slice_mut().unwrap());
        ConceptEmbedding::new(data, label)
    }
}

/// Toy tokenizer: a fixed vocabulary mapped to embedding rows.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    vocabulary: BTreeMap<String, usize>,
    weights: Array2<f64>,
}

/// Words understood by the toy backbone. Unused entries keep the vocabulary
/// close to the intended size.
pub const TOY_WORDS: &[&str] = &[
    "red", "green", "blue", "yellow", "cyan", "magenta", "white", "orange", "purple", "gray",
    "solid", "striped", "checkered", "dotted", "square", "circle", "triangle", "diamond", "ring",
    "cross", "a", "an", "the", "photo", "of", "with", "on", "background", "small", "large", "left",
    "right", "top", "bottom", "center", "pattern", "texture", "shape", "dark", "light", "bright",
    "pale", "thick", "thin", "big", "tiny", "round", "sharp", "soft", "hard", "vertical",
    "horizontal", "diagonal", "plain", "bold", "faint", "black", "brown", "pink", "teal", "olive",
    "navy", "gold",
];

impl EmbeddingTable {
    /// Builds a table whose row 0 is the zero null token and whose other rows
    /// are seeded normal draws with standard deviation [`TOKEN_STD`], rounded
    /// to `f32`.
    pub fn seeded(words: &[&str], dim: usize, seed: u64) -> Result<Self> {
        let mut vocabulary = BTreeMap::new();
        vocabulary.insert(NULL_TOKEN.to_string(), 0);
        for w in words {
            if w.is_empty() || *w == NULL_TOKEN {
                return Err(Error::invalid(format!("invalid vocabulary word '{w}'")));
            }
            let next = vocabulary.len();
            vocabulary.entry(w.to_string()).or_insert(next);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = gaussian_matrix(vocabulary.len(), dim, TOKEN_STD, &mut rng);
        weights.row_mut(0).fill(0.0);
        round_f32(weights.as_slice_mut().unwrap());
        Ok(EmbeddingTable {
            vocabulary,
            weights,
        })
    }

    pub fn from_parts(vocabulary: BTreeMap<String, usize>, weights: Array2<f64>) -> Result<Self> {
        if vocabulary.values().any(|&i| i >= weights.nrows()) {
            return Err(Error::Format("vocabulary index beyond table".into()));
        }
        if vocabulary.get(NULL_TOKEN) != Some(&0) {
            return Err(Error::Format("table lacks the reserved null token".into()));
        }
        Ok(EmbeddingTable {
            vocabulary,
            weights,
        })
    }

    pub fn vocabulary(&self) -> &BTreeMap<String, usize> {
        &self.vocabulary
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.vocabulary.contains_key(token)
    }

    /// Rows for `tokens`, in order.
    pub fn embed_tokens(&self, tokens: &[&str]) -> Result<ConceptEmbedding> {
        if tokens.is_empty() {
            return Err(Error::invalid("empty token list"));
        }
        let mut data = Array2::zeros((tokens.len(), self.dim()));
        for (i, tok) in tokens.iter().enumerate() {
            let idx = *self
                .vocabulary
                .get(*tok)
                .ok_or_else(|| Error::invalid(format!("unknown token '{tok}'")))?;
            data.row_mut(i).assign(&self.weights.row(idx));
        }
        ConceptEmbedding::new(data, tokens.join(" "))
    }

    /// Embeds `words` padded with the null token to `context_len` rows.
    pub fn prompt(&self, words: &[&str], context_len: usize) -> Result<ConceptEmbedding> {
        if words.len() > context_len {
            return Err(Error::invalid(format!(
                "prompt of {} words exceeds context length {context_len}",
                words.len()
            )));
        }
        let mut toks: Vec<&str> = words.to_vec();
        toks.resize(context_len, NULL_TOKEN);
        let mut e = self.embed_tokens(&toks)?;
        e.label = if words.is_empty() {
            NULL_TOKEN.to_string()
        } else {
            words.join(" ")
        };
        Ok(e)
    }

    /// The unconditional embedding: `context_len` null rows.
    pub fn null_embedding(&self, context_len: usize) -> ConceptEmbedding {
        self.prompt(&[], context_len)
            .expect("null token is always present")
    }
}

/// A noise-prediction network `ε(z_t, t, v)` with attention hooks.
///
/// `evaluate` must be deterministic, and its output has the latent's shape.
pub trait Denoiser: Send + Sync {
    fn latent_shape(&self) -> Shape3;

    fn embed_dim(&self) -> usize;

    fn schedule(&self) -> &NoiseSchedule;

    /// Attention block shapes for a context of `tokens` rows.
    fn attention_shapes(&self, tokens: usize) -> BTreeMap<AttentionSlot, [usize; 3]>;

    /// Predicts the noise in `z_t`, returning the attention maps actually
    /// used. Maps present in `replace` are substituted before value
    /// aggregation.
    fn evaluate(
        &self,
        z_t: &Latent,
        t: usize,
        v: &ConceptEmbedding,
        replace: Option<&AttentionOverride>,
    ) -> Result<(NoiseSample, AttentionRecord)>;

    /// Predicts the noise and the gradient of a scalar loss with respect to
    /// the embedding rows. `upstream` maps the prediction to `∂loss/∂ε`.
    fn evaluate_with_grad(
        &self,
        z_t: &Latent,
        t: usize,
        v: &ConceptEmbedding,
        upstream: &dyn Fn(&NoiseSample) -> Array3<f64>,
    ) -> Result<(NoiseSample, Array2<f64>)>;

    /// Content hash of the parameters and schedule.
    fn fingerprint(&self) -> String;
}

/// Shared argument checks for `Denoiser` implementations.
pub(crate) fn check_inputs(
    b: &dyn Denoiser,
    z_t: &Latent,
    t: usize,
    v: &ConceptEmbedding,
    replace: Option<&AttentionOverride>,
) -> Result<()> {
    if z_t.shape() != b.latent_shape() {
        return Err(Error::ShapeMismatch {
            context: "denoiser latent",
            expected: b.latent_shape().to_vec(),
            got: z_t.shape().to_vec(),
        });
    }
    if v.dim() != b.embed_dim() {
        return Err(Error::ShapeMismatch {
            context: "denoiser embedding",
            expected: vec![v.tokens(), b.embed_dim()],
            got: vec![v.tokens(), v.dim()],
        });
    }
    if t > b.schedule().steps() {
        return Err(Error::OutOfRange {
            context: "denoiser timestep",
            index: t,
            max: b.schedule().steps(),
        });
    }
    if let Some(ov) = replace {
        ov.check_against(&b.attention_shapes(v.tokens()))?;
    }
    Ok(())
}
