//! Text side: word-level features are projected into the joint space and
//! pooled with the same order-statistic operator as regions (own parameters).
//! No enhancement is applied to text.

use ndarray::{s, Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Segments, Var};
use crate::error::{DataError, ModelError};
use crate::feature_store::{Dataset, TokenFeatureSet};
use crate::params::{Bound, Linear, ParamStore};
use crate::pooling::{GpoPooling, PoolConfig};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneMode {
    /// Word features read from disk.
    #[default]
    Precomputed,
    /// Produced on the fly by an external model with frozen weights.
    FrozenLive,
    /// Produced on the fly by an external model that is fine-tuned too.
    TrainableLive,
}

/// Source of word-level features for captions.
pub trait TokenBackbone<F: Real> {
    fn mode(&self) -> BackboneMode;
    fn identifier(&self) -> &str;
    fn output_dim(&self) -> usize;
    fn token_features(&self, caption_id: &str) -> Result<TokenFeatureSet<F>, DataError>;
}

/// Serves the token features that were loaded with a dataset split.
pub struct PrecomputedBackbone<'a, F> {
    dataset: &'a Dataset<F>,
    identifier: String,
}

impl<'a, F: Real> PrecomputedBackbone<'a, F> {
    pub fn new(dataset: &'a Dataset<F>, identifier: impl Into<String>) -> Self {
        Self {
            dataset,
            identifier: identifier.into(),
        }
    }
}

impl<F: Real> TokenBackbone<F> for PrecomputedBackbone<'_, F> {
    fn mode(&self) -> BackboneMode {
        BackboneMode::Precomputed
    }

    fn identifier(&self) -> &str {
        &self.identifier
    }

    fn output_dim(&self) -> usize {
        self.dataset.dims().d_t
    }

    fn token_features(&self, caption_id: &str) -> Result<TokenFeatureSet<F>, DataError> {
        self.dataset
            .caption(caption_id)
            .cloned()
            .ok_or_else(|| DataError::UnknownId(caption_id.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TextEncoderConfig {
    pub d_t: usize,
    pub d_j: usize,
    pub pool: PoolConfig,
}

/// Packed tokens of several captions, `[Σ l_b × d_T]`.
pub struct TextInput<'a, F> {
    pub tokens: &'a Array2<F>,
    pub segments: &'a Segments,
}

#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub cfg: TextEncoderConfig,
    pub projection: Linear,
    pub pool: GpoPooling,
}

impl TextEncoder {
    pub fn new<F: Real, R: Rng>(store: &mut ParamStore<F>, cfg: TextEncoderConfig, rng: &mut R) -> Self {
        Self {
            cfg,
            projection: Linear::new(store, "txt.proj", cfg.d_t, cfg.d_j, rng),
            pool: GpoPooling::new(store, "txt.pool", cfg.pool, rng),
        }
    }

    pub fn project_tokens<F: Real>(&self, g: &mut Graph<F>, p: &Bound, tokens: Var) -> Var {
        self.projection.forward(g, p, tokens)
    }

    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        p: &Bound,
        input: &TextInput<'_, F>,
    ) -> Result<Var, ModelError> {
        if input.tokens.ncols() != self.cfg.d_t {
            return Err(ModelError::Shape(format!(
                "token width {} != d_T {}",
                input.tokens.ncols(),
                self.cfg.d_t
            )));
        }
        if input.segments.lengths().contains(&0) {
            return Err(ModelError::Shape("caption with zero tokens".into()));
        }
        let tokens = g.constant(input.tokens.clone());
        let projected = self.project_tokens(g, p, tokens);
        self.pool.pool(g, p, projected, input.segments)
    }

    /// Joint embedding of one caption; rows past `length` are ignored.
    pub fn encode_caption<F: Real>(
        &self,
        store: &ParamStore<F>,
        caption: &TokenFeatureSet<F>,
    ) -> Result<Array1<F>, ModelError> {
        if caption.length == 0 {
            return Err(ModelError::Shape(format!(
                "caption `{}` has zero tokens",
                caption.caption_id
            )));
        }
        let tokens = caption.tokens.slice(s![..caption.length, ..]).to_owned();
        let segments = Segments::uniform(1, caption.length);
        let mut g = Graph::no_grad();
        let p = store.bind(&mut g);
        let out = self.forward(
            &mut g,
            &p,
            &TextInput {
                tokens: &tokens,
                segments: &segments,
            },
        )?;
        Ok(g.value(out).row(0).to_owned())
    }
}
