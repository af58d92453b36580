//! Hubness-aware contrastive objectives with analytic gradients.
//!
//! `S[a][b] = cos(v_a, w_b)`: rows are images, columns are captions. Every
//! loss here returns its value together with the gradient on the raw
//! (unnormalized) query embeddings, ready to seed a backward pass.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::ModelError;
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[default]
    Hal,
    /// Bidirectional max-violation triplet ranking, kept as a baseline.
    Triplet,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub kind: LossKind,
    pub gamma: f64,
    pub epsilon: f64,
    pub lambda: f64,
    pub triplet_margin: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::Hal,
            gamma: 90.0,
            epsilon: 0.5,
            lambda: 1.0,
            triplet_margin: 0.2,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(format!("loss.gamma must be > 0, got {}", self.gamma));
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return Err(format!("loss.epsilon must lie in (0, 1], got {}", self.epsilon));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(format!("loss.lambda must be >= 0, got {}", self.lambda));
        }
        if !(self.triplet_margin >= 0.0) {
            return Err(format!("loss.triplet_margin must be >= 0, got {}", self.triplet_margin));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimilarityRole {
    InBatch,
    VsVisualQueue,
    VsTextQueue,
}

/// Cosine similarities between two embedding sets.
#[derive(Debug, Clone)]
pub struct SimilarityBlock<F> {
    pub role: SimilarityRole,
    pub values: Array2<F>,
}

/// Rows scaled to unit length plus the original norms.
pub(crate) fn normalize_rows<F: Real>(
    x: ArrayView2<'_, F>,
    what: &str,
) -> Result<(Array2<F>, Array1<F>), ModelError> {
    let mut out = x.to_owned();
    let mut norms = Array1::zeros(x.nrows());
    for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let n = row.iter().map(|&v| v * v).sum::<F>().sqrt();
        if !(n > F::zero()) || !n.is_finite() {
            return Err(ModelError::Degenerate(format!("{what} row {i} has zero or non-finite norm")));
        }
        row.mapv_inplace(|v| v / n);
        norms[i] = n;
    }
    Ok((out, norms))
}

/// Pulls a gradient on normalized rows back to the raw rows.
fn unnormalize_grad<F: Real>(unit: &Array2<F>, norms: &Array1<F>, g_unit: Array2<F>) -> Array2<F> {
    let mut g = g_unit;
    for ((mut gr, ur), &n) in g.axis_iter_mut(Axis(0)).zip(unit.axis_iter(Axis(0))).zip(norms) {
        let dot = gr.dot(&ur);
        gr.zip_mut_with(&ur, |gv, &uv| *gv = (*gv - dot * uv) / n);
    }
    g
}

/// `[n × p]` matrix of cosines between the rows of `a` and of `b`.
pub fn cosine_matrix<F: Real>(a: ArrayView2<'_, F>, b: ArrayView2<'_, F>) -> Result<Array2<F>, ModelError> {
    if a.ncols() != b.ncols() {
        return Err(ModelError::Shape(format!("cosine of width {} vs {}", a.ncols(), b.ncols())));
    }
    let (an, _) = normalize_rows(a, "A")?;
    let (bn, _) = normalize_rows(b, "B")?;
    Ok(an.dot(&bn.t()))
}

/// `(1/γ)·log(1 + Σ_j exp(γ(s_j − ε)))` and its partials `∂/∂s_j`.
fn soft_hinge<F: Real>(sims: impl Iterator<Item = F> + Clone, gamma: F, eps: F) -> (F, Vec<F>) {
    let xs: Vec<F> = sims.map(|s| gamma * (s - eps)).collect();
    let max = xs.iter().copied().fold(F::zero(), F::max);
    let exps: Vec<F> = xs.iter().map(|&x| (x - max).exp()).collect();
    let denom = (-max).exp() + exps.iter().copied().sum::<F>();
    let value = (max + denom.ln()) / gamma;
    let grads = exps.iter().map(|&e| e / denom).collect();
    (value, grads)
}

fn positive_term<F: Real>(s: F, what: &str, i: usize) -> Result<(F, F), ModelError> {
    let arg = F::one() + s;
    if !(arg > F::zero()) {
        return Err(ModelError::Degenerate(format!(
            "{what} positive similarity at row {i} is -1, log(0) in the loss"
        )));
    }
    Ok((-arg.ln(), -F::one() / arg))
}

fn check_pair<F>(v: &ArrayView2<'_, F>, w: &ArrayView2<'_, F>) -> Result<(), ModelError> {
    if v.nrows() == 0 || v.dim() != w.dim() {
        return Err(ModelError::Shape(format!("embedding batches {:?} vs {:?}", v.dim(), w.dim())));
    }
    Ok(())
}

/// Loss value with gradients on the query-side embeddings.
#[derive(Debug, Clone)]
pub struct LossGrad<F> {
    pub value: F,
    /// `∂L/∂Ṽ`, `[B × d_J]`.
    pub grad_v: Array2<F>,
    /// `∂L/∂W̃`, `[B × d_J]`.
    pub grad_w: Array2<F>,
}

/// Mini-batch hubness-aware loss over the two retrieval directions of `S`.
pub fn mini_hal_loss<F: Real>(
    v: ArrayView2<'_, F>,
    w: ArrayView2<'_, F>,
    cfg: &LossConfig,
) -> Result<LossGrad<F>, ModelError> {
    check_pair(&v, &w)?;
    let b = v.nrows();
    let (vn, v_norm) = normalize_rows(v, "visual embedding")?;
    let (wn, w_norm) = normalize_rows(w, "text embedding")?;
    let s = vn.dot(&wn.t());
    let (gamma, eps) = (F::c(cfg.gamma), F::c(cfg.epsilon));
    let inv_b = F::one() / F::c(b as f64);
    let mut gs = Array2::<F>::zeros((b, b));
    let mut total = F::zero();
    for i in 0..b {
        let others = (0..b).filter(move |&m| m != i);
        // images competing for caption i
        let (col, col_g) = soft_hinge(others.clone().map(|m| s[[m, i]]), gamma, eps);
        for (m, g) in others.clone().zip(col_g) {
            gs[[m, i]] += g * inv_b;
        }
        // captions competing for image i
        let (row, row_g) = soft_hinge(others.clone().map(|n| s[[i, n]]), gamma, eps);
        for (n, g) in others.zip(row_g) {
            gs[[i, n]] += g * inv_b;
        }
        let (pos, pos_g) = positive_term(s[[i, i]], "in-batch", i)?;
        gs[[i, i]] += pos_g * inv_b;
        total += col + row + pos;
    }
    let grad_v = unnormalize_grad(&vn, &v_norm, gs.dot(&wn));
    let grad_w = unnormalize_grad(&wn, &w_norm, gs.t().dot(&vn));
    Ok(LossGrad {
        value: total * inv_b,
        grad_v,
        grad_w,
    })
}

/// Queue-based losses. Key embeddings and queue snapshots are constants:
/// their gradient fields are always zero.
#[derive(Debug, Clone)]
pub struct DqLoss<F> {
    pub dvq: F,
    pub dtq: F,
    pub grad_v: Array2<F>,
    pub grad_w: Array2<F>,
    pub grad_v_key: Array2<F>,
    pub grad_w_key: Array2<F>,
    pub grad_visual_queue: Array2<F>,
    pub grad_text_queue: Array2<F>,
}

impl<F: Real> DqLoss<F> {
    pub fn value(&self) -> F {
        self.dvq + self.dtq
    }
}

/// One queue term: positives `cos(key_i, query_i)` and negatives
/// `cos(queue_q, query_i)`; differentiated in `query` only.
fn queue_term<F: Real>(
    query: ArrayView2<'_, F>,
    key: ArrayView2<'_, F>,
    queue: ArrayView2<'_, F>,
    cfg: &LossConfig,
    what: &str,
) -> Result<(F, Array2<F>), ModelError> {
    let b = query.nrows();
    let (qn, q_norm) = normalize_rows(query, "query embedding")?;
    let (kn, _) = normalize_rows(key, "key embedding")?;
    let (gamma, eps) = (F::c(cfg.gamma), F::c(cfg.epsilon));
    let inv_b = F::one() / F::c(b as f64);
    let neg = if queue.nrows() > 0 {
        let (un, _) = normalize_rows(queue, "queue entry")?;
        Some((qn.dot(&un.t()), un))
    } else {
        None
    };
    let mut g_unit = Array2::<F>::zeros(qn.dim());
    let mut total = F::zero();
    for i in 0..b {
        if let Some((s, un)) = &neg {
            let (val, grads) = soft_hinge(s.row(i).iter().copied(), gamma, eps);
            total += val;
            for (q, g) in grads.into_iter().enumerate() {
                g_unit.row_mut(i).scaled_add(g * inv_b, &un.row(q));
            }
        }
        let pos_s = qn.row(i).dot(&kn.row(i));
        let (pos, pos_g) = positive_term(pos_s, what, i)?;
        total += pos;
        g_unit.row_mut(i).scaled_add(pos_g * inv_b, &kn.row(i));
    }
    Ok((total * inv_b, unnormalize_grad(&qn, &q_norm, g_unit)))
}

/// Visual-queue and text-queue hubness-aware losses.
///
/// `v`, `w` are query-encoder outputs of the batch, `v_key`, `w_key` the
/// key-encoder outputs of the same batch. Empty snapshots contribute no
/// negatives.
pub fn dq_hal_loss<F: Real>(
    v: ArrayView2<'_, F>,
    w: ArrayView2<'_, F>,
    v_key: ArrayView2<'_, F>,
    w_key: ArrayView2<'_, F>,
    visual_queue: ArrayView2<'_, F>,
    text_queue: ArrayView2<'_, F>,
    cfg: &LossConfig,
) -> Result<DqLoss<F>, ModelError> {
    check_pair(&v, &w)?;
    check_pair(&v, &v_key)?;
    check_pair(&v, &w_key)?;
    let d = v.ncols();
    for (q, name) in [(visual_queue.dim(), "visual"), (text_queue.dim(), "text")] {
        if q.0 > 0 && q.1 != d {
            return Err(ModelError::Shape(format!(
                "{name} queue width {} != embedding width {d}",
                q.1
            )));
        }
    }
    let (dvq, grad_w) = queue_term(w, v_key, visual_queue, cfg, "visual-queue")?;
    let (dtq, grad_v) = queue_term(v, w_key, text_queue, cfg, "text-queue")?;
    Ok(DqLoss {
        dvq,
        dtq,
        grad_v,
        grad_w,
        grad_v_key: Array2::zeros(v_key.dim()),
        grad_w_key: Array2::zeros(w_key.dim()),
        grad_visual_queue: Array2::zeros(visual_queue.dim()),
        grad_text_queue: Array2::zeros(text_queue.dim()),
    })
}

/// `λ·L_mini + L_DQ`.
pub fn total_loss<F: Real>(mini: F, dq: F, cfg: &LossConfig) -> F {
    F::c(cfg.lambda) * mini + dq
}

/// Max-violation bidirectional triplet ranking loss, summed over the batch.
pub fn triplet_loss<F: Real>(
    v: ArrayView2<'_, F>,
    w: ArrayView2<'_, F>,
    margin: f64,
) -> Result<LossGrad<F>, ModelError> {
    check_pair(&v, &w)?;
    let b = v.nrows();
    let (vn, v_norm) = normalize_rows(v, "visual embedding")?;
    let (wn, w_norm) = normalize_rows(w, "text embedding")?;
    let s = vn.dot(&wn.t());
    let alpha = F::c(margin);
    let mut gs = Array2::<F>::zeros((b, b));
    let mut total = F::zero();
    for i in 0..b {
        let hardest = |it: &mut dyn Iterator<Item = (usize, F)>| {
            it.fold(None, |best: Option<(usize, F)>, (j, x)| match best {
                Some((_, bx)) if bx >= x => best,
                _ => Some((j, x)),
            })
        };
        if let Some((j, x)) = hardest(&mut (0..b).filter(|&j| j != i).map(|j| (j, s[[i, j]]))) {
            let cost = alpha - s[[i, i]] + x;
            if cost > F::zero() {
                total += cost;
                gs[[i, j]] += F::one();
                gs[[i, i]] -= F::one();
            }
        }
        if let Some((m, x)) = hardest(&mut (0..b).filter(|&m| m != i).map(|m| (m, s[[m, i]]))) {
            let cost = alpha - s[[i, i]] + x;
            if cost > F::zero() {
                total += cost;
                gs[[m, i]] += F::one();
                gs[[i, i]] -= F::one();
            }
        }
    }
    let grad_v = unnormalize_grad(&vn, &v_norm, gs.dot(&wn));
    let grad_w = unnormalize_grad(&wn, &w_norm, gs.t().dot(&vn));
    Ok(LossGrad {
        value: total,
        grad_v,
        grad_w,
    })
}
