//! Image side: region features, optional global-representation enhancement
//! (self-guided or CLIP-guided), projection into the joint space and pooling.
//!
//! All ops work on a packed `[B·K × d_I]` region matrix; image `b` owns the
//! rows of segment `b`.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Segments, Var};
use crate::error::ModelError;
use crate::params::{BatchNorm, Bound, Linear, Mode, ParamId, ParamStore};
use crate::pooling::{GpoPooling, PoolConfig};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Enhancement {
    None,
    #[default]
    Sge,
    Cge,
}

impl Enhancement {
    pub fn as_str(self) -> &'static str {
        match self {
            Enhancement::None => "none",
            Enhancement::Sge => "sge",
            Enhancement::Cge => "cge",
        }
    }
}

/// Mean region vector of every image.
pub fn average_global<F: Real>(
    g: &mut Graph<F>,
    regions: Var,
    segments: &Segments,
) -> Result<Var, ModelError> {
    if segments.count() == 0 || segments.lengths().contains(&0) {
        return Err(ModelError::Shape("average over an empty region set".into()));
    }
    Ok(g.segment_mean(regions, segments))
}

/// Attention of every region to its image's global vector, then residual
/// injection `x_i = v_i + a_i · v_glo`. Returns `(enhanced, weights)`.
pub fn enhance_regions<F: Real>(
    g: &mut Graph<F>,
    regions: Var,
    global: Var,
    segments: &Segments,
) -> Result<(Var, Var), ModelError> {
    let (rv, gv) = (g.value(regions).dim(), g.value(global).dim());
    if rv.1 != gv.1 || gv.0 != segments.count() || rv.0 != segments.total() {
        return Err(ModelError::Shape(format!(
            "enhance_regions: regions {rv:?}, global {gv:?}, {} segments",
            segments.count()
        )));
    }
    if g.value(global).iter().any(|x| !x.is_finite()) {
        return Err(ModelError::Degenerate("non-finite global vector".into()));
    }
    let spread = g.repeat_rows(global, segments);
    let prod = g.mul(regions, spread);
    let logits = g.row_sum(prod);
    let weights = g.segment_softmax(logits, segments);
    let injected = g.mul_col(spread, weights);
    Ok((g.add(regions, injected), weights))
}

/// Self-guided global vector: mean-seeded gated attention over regions.
#[derive(Debug, Clone)]
pub struct SgeModule {
    pub kappa: Linear,
    pub nu: Linear,
    pub w_a: ParamId,
    pub bn_region: BatchNorm,
    pub bn_global: BatchNorm,
}

pub struct SgeOutput {
    pub global: Var,
    pub weights: Var,
}

impl SgeModule {
    pub fn new<F: Real, R: Rng>(store: &mut ParamStore<F>, name: &str, d_i: usize, rng: &mut R) -> Self {
        Self {
            kappa: Linear::new(store, &format!("{name}.kappa"), d_i, d_i, rng),
            nu: Linear::new(store, &format!("{name}.nu"), d_i, d_i, rng),
            w_a: store.weight(format!("{name}.w_a"), d_i, 1, rng),
            bn_region: BatchNorm::new(store, &format!("{name}.tb_region"), d_i),
            bn_global: BatchNorm::new(store, &format!("{name}.tb_global"), d_i),
        }
    }

    /// `r_i = TB(ν(v_ave)) ⊙ TB(κ(v_i))`, `s = softmax_i(r_i · W_a)`,
    /// `v_glo = normalize(Σ_i s_i v_i)`; TB is tanh followed by batch norm.
    pub fn global<F: Real>(
        &self,
        g: &mut Graph<F>,
        p: &Bound,
        store: &mut ParamStore<F>,
        regions: Var,
        segments: &Segments,
        mode: Mode,
    ) -> Result<SgeOutput, ModelError> {
        let mean = average_global(g, regions, segments)?;
        let k = self.kappa.forward(g, p, regions);
        let k = g.tanh(k);
        let k = self.bn_region.forward(g, p, k, mode, store);
        let n = self.nu.forward(g, p, mean);
        let n = g.tanh(n);
        let n = self.bn_global.forward(g, p, n, mode, store);
        let n = g.repeat_rows(n, segments);
        let r = g.mul(n, k);
        let logits = g.matmul(r, p[self.w_a]);
        let weights = g.segment_softmax(logits, segments);
        let pooled = g.segment_weighted_sum(weights, regions, segments);
        let global = g.l2_normalize_rows(pooled)?;
        Ok(SgeOutput { global, weights })
    }
}

/// CLIP image-branch output for one batch of images.
#[derive(Debug, Clone)]
pub enum ClipInput<F> {
    /// Precomputed pooled vectors, `[B × d_Ic]`.
    Pooled(Array2<F>),
    /// Spatial maps, one `[HW × d_Ic]` per image.
    Spatial(Vec<Array2<F>>),
}

/// CLIP-guided global vector:
/// `W_c2 · BN(GELU(W_c1 · BN(s) + b_c1)) + b_c2`.
#[derive(Debug, Clone)]
pub struct CgeModule {
    pub ln_gamma: ParamId,
    pub ln_beta: ParamId,
    pub bn_input: BatchNorm,
    pub fc1: Linear,
    pub bn_hidden: BatchNorm,
    pub fc2: Linear,
    pub d_ic: usize,
}

impl CgeModule {
    pub fn new<F: Real, R: Rng>(
        store: &mut ParamStore<F>,
        name: &str,
        d_ic: usize,
        d_i: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            ln_gamma: store.norm_scale(format!("{name}.ln.gamma"), d_ic),
            ln_beta: store.norm_shift(format!("{name}.ln.beta"), d_ic),
            bn_input: BatchNorm::new(store, &format!("{name}.bn_input"), d_ic),
            fc1: Linear::new(store, &format!("{name}.fc1"), d_ic, d_i, rng),
            bn_hidden: BatchNorm::new(store, &format!("{name}.bn_hidden"), d_i),
            fc2: Linear::new(store, &format!("{name}.fc2"), d_i, d_i, rng),
            d_ic,
        }
    }

    /// Layer-normalize every spatial position, then average them.
    pub fn pool_spatial<F: Real>(
        &self,
        g: &mut Graph<F>,
        p: &Bound,
        maps: &[Array2<F>],
    ) -> Result<Var, ModelError> {
        if maps.is_empty() || maps.iter().any(|m| m.nrows() == 0 || m.ncols() != self.d_ic) {
            return Err(ModelError::Shape(format!(
                "spatial CLIP maps must be non-empty with {} columns",
                self.d_ic
            )));
        }
        let segs = Segments::from_lengths(&maps.iter().map(|m| m.nrows()).collect::<Vec<_>>());
        let views: Vec<_> = maps.iter().map(|m| m.view()).collect();
        let packed = ndarray::concatenate(ndarray::Axis(0), &views)
            .map_err(|e| ModelError::Shape(e.to_string()))?;
        let x = g.constant(packed);
        let x = g.layer_norm(x, p[self.ln_gamma], p[self.ln_beta], F::c(1e-5));
        Ok(g.segment_mean(x, &segs))
    }

    pub fn global<F: Real>(
        &self,
        g: &mut Graph<F>,
        p: &Bound,
        store: &mut ParamStore<F>,
        clip: &ClipInput<F>,
        mode: Mode,
    ) -> Result<Var, ModelError> {
        let s = match clip {
            ClipInput::Pooled(x) => {
                if x.ncols() != self.d_ic {
                    return Err(ModelError::Shape(format!(
                        "pooled CLIP vector has {} columns, expected {}",
                        x.ncols(),
                        self.d_ic
                    )));
                }
                g.constant(x.clone())
            }
            ClipInput::Spatial(maps) => self.pool_spatial(g, p, maps)?,
        };
        self.global_from(g, p, store, s, mode)
    }

    pub fn global_from<F: Real>(
        &self,
        g: &mut Graph<F>,
        p: &Bound,
        store: &mut ParamStore<F>,
        pooled: Var,
        mode: Mode,
    ) -> Result<Var, ModelError> {
        let x = self.bn_input.forward(g, p, pooled, mode, store);
        let x = self.fc1.forward(g, p, x);
        let x = g.gelu(x);
        let x = self.bn_hidden.forward(g, p, x, mode, store);
        Ok(self.fc2.forward(g, p, x))
    }
}

#[derive(Debug, Clone)]
pub enum EnhancementModule {
    None,
    Sge(SgeModule),
    Cge(CgeModule),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageEncoderConfig {
    pub d_i: usize,
    pub d_ic: usize,
    pub d_j: usize,
    pub enhancement: Enhancement,
    pub pool: PoolConfig,
}

/// One batch of images in packed form.
pub struct ImageInput<'a, F> {
    /// `[B·K × d_I]`
    pub regions: &'a Array2<F>,
    pub segments: &'a Segments,
    pub clip: Option<&'a ClipInput<F>>,
}

pub struct ImageForward {
    pub embedding: Var,
    pub global: Option<Var>,
    pub enhanced: Var,
}

#[derive(Debug, Clone)]
pub struct ImageEncoder {
    pub cfg: ImageEncoderConfig,
    pub enhancement: EnhancementModule,
    pub projection: Linear,
    pub pool: GpoPooling,
}

impl ImageEncoder {
    pub fn new<F: Real, R: Rng>(store: &mut ParamStore<F>, cfg: ImageEncoderConfig, rng: &mut R) -> Self {
        let enhancement = match cfg.enhancement {
            Enhancement::None => EnhancementModule::None,
            Enhancement::Sge => EnhancementModule::Sge(SgeModule::new(store, "img.sge", cfg.d_i, rng)),
            Enhancement::Cge => {
                EnhancementModule::Cge(CgeModule::new(store, "img.cge", cfg.d_ic, cfg.d_i, rng))
            }
        };
        Self {
            cfg,
            enhancement,
            projection: Linear::new(store, "img.proj", cfg.d_i, cfg.d_j, rng),
            pool: GpoPooling::new(store, "img.pool", cfg.pool, rng),
        }
    }

    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        p: &Bound,
        store: &mut ParamStore<F>,
        input: &ImageInput<'_, F>,
        mode: Mode,
    ) -> Result<ImageForward, ModelError> {
        if input.regions.ncols() != self.cfg.d_i {
            return Err(ModelError::Shape(format!(
                "region width {} != d_I {}",
                input.regions.ncols(),
                self.cfg.d_i
            )));
        }
        let regions = g.constant(input.regions.clone());
        let global = match &self.enhancement {
            EnhancementModule::None => None,
            EnhancementModule::Sge(sge) => {
                Some(sge.global(g, p, store, regions, input.segments, mode)?.global)
            }
            EnhancementModule::Cge(cge) => {
                let clip = input.clip.ok_or_else(|| {
                    ModelError::MissingInput("CLIP global feature required by cge".into())
                })?;
                Some(cge.global(g, p, store, clip, mode)?)
            }
        };
        let enhanced = match global {
            Some(v) => enhance_regions(g, regions, v, input.segments)?.0,
            None => regions,
        };
        let projected = self.projection.forward(g, p, enhanced);
        let embedding = self.pool.pool(g, p, projected, input.segments)?;
        Ok(ImageForward {
            embedding,
            global,
            enhanced,
        })
    }
}
