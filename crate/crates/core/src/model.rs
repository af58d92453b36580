//! Both encoders over one parameter store.

use ndarray::{s, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::config::RunConfig;
use crate::error::ModelError;
use crate::feature_store::{CaptionBatch, Dataset, ImageBatch};
use crate::params::{Bound, Mode, ParamStore};
use crate::pooling::PoolConfig;
use crate::real::Real;
use crate::text_encoder::{TextEncoder, TextEncoderConfig, TextInput};
use crate::visual_encoder::{ImageEncoder, ImageEncoderConfig, ImageInput};

#[derive(Debug, Clone)]
pub struct Model {
    pub image: ImageEncoder,
    pub text: TextEncoder,
}

impl Model {
    /// Builds the layout and a freshly initialized store from `seed`.
    pub fn new<F: Real>(image: ImageEncoderConfig, text: TextEncoderConfig, seed: u64) -> (Self, ParamStore<F>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let image = ImageEncoder::new(&mut store, image, &mut rng);
        let text = TextEncoder::new(&mut store, text, &mut rng);
        (Self { image, text }, store)
    }

    pub fn from_config<F: Real>(cfg: &RunConfig) -> (Self, ParamStore<F>) {
        let (image, text) = encoder_configs(cfg);
        Self::new(image, text, cfg.run.seed)
    }

    pub fn encode_images_graph<F: Real>(
        &self,
        g: &mut Graph<F>,
        p: &Bound,
        store: &mut ParamStore<F>,
        batch: &ImageBatch<F>,
        mode: Mode,
    ) -> Result<Var, ModelError> {
        let input = ImageInput {
            regions: &batch.regions,
            segments: &batch.segments,
            clip: batch.clip.as_ref(),
        };
        Ok(self.image.forward(g, p, store, &input, mode)?.embedding)
    }

    pub fn encode_captions_graph<F: Real>(
        &self,
        g: &mut Graph<F>,
        p: &Bound,
        batch: &CaptionBatch<F>,
    ) -> Result<Var, ModelError> {
        let input = TextInput {
            tokens: &batch.tokens,
            segments: &batch.segments,
        };
        self.text.forward(g, p, &input)
    }

    /// Inference embeddings of every image, in dataset order.
    pub fn encode_images<F: Real>(
        &self,
        store: &ParamStore<F>,
        ds: &Dataset<F>,
        batch_size: usize,
    ) -> Result<Array2<F>, ModelError> {
        let n = ds.num_images();
        let mut out = Array2::zeros((n, self.image.cfg.d_j));
        let mut scratch = store.clone();
        let idx: Vec<usize> = (0..n).collect();
        for chunk in idx.chunks(batch_size.max(1)) {
            let batch = ds.image_batch(chunk);
            let mut g = Graph::no_grad();
            let p = scratch.bind(&mut g);
            let v = self.encode_images_graph(&mut g, &p, &mut scratch, &batch, Mode::Eval)?;
            out.slice_mut(s![chunk[0]..chunk[0] + chunk.len(), ..]).assign(g.value(v));
        }
        Ok(out)
    }

    /// Inference embeddings of every caption, in dataset order.
    pub fn encode_captions<F: Real>(
        &self,
        store: &ParamStore<F>,
        ds: &Dataset<F>,
        batch_size: usize,
    ) -> Result<Array2<F>, ModelError> {
        let n = ds.num_pairs();
        let mut out = Array2::zeros((n, self.text.cfg.d_j));
        let idx: Vec<usize> = (0..n).collect();
        for chunk in idx.chunks(batch_size.max(1)) {
            let batch = ds.caption_batch(chunk);
            let mut g = Graph::no_grad();
            let p = store.bind(&mut g);
            let w = self.encode_captions_graph(&mut g, &p, &batch)?;
            out.slice_mut(s![chunk[0]..chunk[0] + chunk.len(), ..]).assign(g.value(w));
        }
        Ok(out)
    }
}

pub fn encoder_configs(cfg: &RunConfig) -> (ImageEncoderConfig, TextEncoderConfig) {
    let pool = |n_max| PoolConfig {
        d_t: cfg.model.pool.d_t,
        hidden: cfg.model.pool.hidden,
        mlp_hidden: cfg.model.pool.mlp_hidden,
        n_max,
    };
    let image = ImageEncoderConfig {
        d_i: cfg.data.d_i,
        d_ic: cfg.data.d_ic,
        d_j: cfg.model.d_j,
        enhancement: cfg.model.enhancement,
        pool: pool(cfg.data.num_regions),
    };
    let text = TextEncoderConfig {
        d_t: cfg.data.d_t,
        d_j: cfg.model.d_j,
        pool: pool(cfg.data.max_length),
    };
    (image, text)
}
