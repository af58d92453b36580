//! Recall@K under the standard protocols, embedding dumps and the
//! encoding/matching inference-time split.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{DataError, Error, Result};
use crate::feature_store::format::{self, Container, RawTensor};
use crate::feature_store::Dataset;
use crate::model::Model;
use crate::params::ParamStore;
use crate::real::Real;

pub const KS: [usize; 3] = [1, 5, 10];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    /// Contiguous folds of the test set, metrics averaged.
    Cocofold1k,
    /// Whole test set at once.
    #[default]
    Full5k,
    Flickr1k,
}

impl Protocol {
    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::Cocofold1k => "cocofold1k",
            Protocol::Full5k => "full5k",
            Protocol::Flickr1k => "flickr1k",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    /// Caption retrieval (image query) R@1, R@5, R@10 in percent.
    pub i2t: [f64; 3],
    /// Image retrieval (caption query) R@1, R@5, R@10 in percent.
    pub t2i: [f64; 3],
    pub rsum: f64,
    pub folds: usize,
}

impl RetrievalMetrics {
    pub fn new(i2t: [f64; 3], t2i: [f64; 3], folds: usize) -> Self {
        Self {
            i2t,
            t2i,
            rsum: i2t.iter().sum::<f64>() + t2i.iter().sum::<f64>(),
            folds,
        }
    }

    /// Arithmetic mean of per-fold metrics.
    pub fn mean(folds: &[RetrievalMetrics]) -> Self {
        let n = folds.len() as f64;
        let mut i2t = [0.0; 3];
        let mut t2i = [0.0; 3];
        for m in folds {
            for k in 0..3 {
                i2t[k] += m.i2t[k] / n;
                t2i[k] += m.t2i[k] / n;
            }
        }
        Self::new(i2t, t2i, folds.len())
    }

    /// One `key value` pair per line.
    pub fn to_report(&self) -> String {
        let mut s = String::new();
        for (k, v) in KS.iter().zip(self.i2t) {
            let _ = writeln!(s, "i2t_r{k} {v:.2}");
        }
        for (k, v) in KS.iter().zip(self.t2i) {
            let _ = writeln!(s, "t2i_r{k} {v:.2}");
        }
        let _ = writeln!(s, "rsum {:.2}", self.rsum);
        let _ = writeln!(s, "folds {}", self.folds);
        s
    }
}

/// Per-direction recall in percent at each requested K.
#[derive(Debug, Clone, PartialEq)]
pub struct Recall {
    pub i2t: Vec<f64>,
    pub t2i: Vec<f64>,
}

/// `a` ranks before `b` in a list sorted by descending score, ties by index.
#[inline]
fn before<F: Real>(sa: F, a: usize, sb: F, b: usize) -> bool {
    sa > sb || (sa == sb && a < b)
}

/// Best (0-based) rank among `targets` in `scores`.
fn best_rank<F: Real>(scores: ndarray::ArrayView1<'_, F>, targets: &[usize]) -> usize {
    targets
        .iter()
        .map(|&t| {
            let st = scores[t];
            scores
                .iter()
                .enumerate()
                .filter(|&(j, &sj)| before(sj, j, st, t))
                .count()
        })
        .min()
        .unwrap_or(usize::MAX)
}

/// Caption index to image index, checked against the matrix shape.
fn invert_ground_truth(n_img: usize, n_cap: usize, gt: &[Vec<usize>]) -> Result<Vec<usize>, DataError> {
    if gt.len() != n_img {
        return Err(DataError::Argument(format!("{} ground-truth rows for {n_img} images", gt.len())));
    }
    let mut owner = vec![usize::MAX; n_cap];
    for (i, caps) in gt.iter().enumerate() {
        if caps.is_empty() {
            return Err(DataError::Argument(format!("image {i} has no ground-truth caption")));
        }
        for &c in caps {
            if c >= n_cap {
                return Err(DataError::UnknownId(format!("caption index {c} (matrix has {n_cap})")));
            }
            if owner[c] != usize::MAX {
                return Err(DataError::Argument(format!("caption {c} belongs to two images")));
            }
            owner[c] = i;
        }
    }
    if let Some(c) = owner.iter().position(|&o| o == usize::MAX) {
        return Err(DataError::UnknownId(format!("caption index {c} has no image")));
    }
    Ok(owner)
}

/// Recall@K for both directions of `sim` (`[n_img × n_cap]`).
pub fn recall_at_k<F: Real>(sim: ArrayView2<'_, F>, ground_truth: &[Vec<usize>], ks: &[usize]) -> Result<Recall, DataError> {
    let (n_img, n_cap) = sim.dim();
    let owner = invert_ground_truth(n_img, n_cap, ground_truth)?;
    if sim.iter().any(|x| x.is_nan()) {
        return Err(DataError::NonFinite("similarity matrix".into()));
    }
    let i2t_ranks: Vec<usize> = (0..n_img).map(|i| best_rank(sim.row(i), &ground_truth[i])).collect();
    let t2i_ranks: Vec<usize> = (0..n_cap).map(|j| best_rank(sim.column(j), &[owner[j]])).collect();
    let pct = |ranks: &[usize], k: usize| 100.0 * ranks.iter().filter(|&&r| r < k).count() as f64 / ranks.len() as f64;
    Ok(Recall {
        i2t: ks.iter().map(|&k| pct(&i2t_ranks, k)).collect(),
        t2i: ks.iter().map(|&k| pct(&t2i_ranks, k)).collect(),
    })
}

fn metrics_of<F: Real>(sim: ArrayView2<'_, F>, gt: &[Vec<usize>]) -> Result<RetrievalMetrics, DataError> {
    let r = recall_at_k(sim, gt, &KS)?;
    Ok(RetrievalMetrics::new(
        [r.i2t[0], r.i2t[1], r.i2t[2]],
        [r.t2i[0], r.t2i[1], r.t2i[2]],
        1,
    ))
}

/// `[n × m]` cosine similarities of precomputed embeddings.
pub fn similarity<F: Real>(images: ArrayView2<'_, F>, captions: ArrayView2<'_, F>) -> Result<Array2<F>> {
    Ok(crate::objectives::cosine_matrix(images, captions)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolResult {
    pub metrics: RetrievalMetrics,
    pub per_fold: Vec<RetrievalMetrics>,
}

/// Metrics of cached embeddings under `protocol`. Folds are contiguous
/// blocks of images in manifest order, each with its own captions.
pub fn evaluate_protocol<F: Real>(
    images: ArrayView2<'_, F>,
    captions: ArrayView2<'_, F>,
    ground_truth: &[Vec<usize>],
    protocol: Protocol,
    folds: usize,
) -> Result<ProtocolResult> {
    let n = images.nrows();
    match protocol {
        Protocol::Full5k | Protocol::Flickr1k => {
            let sim = similarity(images, captions)?;
            let m = metrics_of(sim.view(), ground_truth)?;
            Ok(ProtocolResult {
                metrics: m,
                per_fold: vec![m],
            })
        }
        Protocol::Cocofold1k => {
            if folds == 0 || n % folds != 0 {
                return Err(Error::Eval(format!("{n} test images do not split into {folds} folds")));
            }
            let size = n / folds;
            let mut per_fold = Vec::with_capacity(folds);
            for f in 0..folds {
                let imgs = f * size..(f + 1) * size;
                let caps: Vec<usize> = ground_truth[imgs.clone()].iter().flatten().copied().collect();
                let remap: std::collections::HashMap<usize, usize> =
                    caps.iter().enumerate().map(|(new, &old)| (old, new)).collect();
                let gt: Vec<Vec<usize>> = ground_truth[imgs.clone()]
                    .iter()
                    .map(|cs| cs.iter().map(|c| remap[c]).collect())
                    .collect();
                let sub_caps = captions.select(Axis(0), &caps);
                let sim = similarity(images.slice(ndarray::s![imgs, ..]), sub_caps.view())?;
                per_fold.push(metrics_of(sim.view(), &gt)?);
            }
            Ok(ProtocolResult {
                metrics: RetrievalMetrics::mean(&per_fold),
                per_fold,
            })
        }
    }
}

/// Encodes a split with the query encoders and scores it.
pub fn evaluate_model<F: Real>(
    model: &Model,
    store: &ParamStore<F>,
    ds: &Dataset<F>,
    protocol: Protocol,
    batch_size: usize,
) -> Result<ProtocolResult> {
    let (img, cap) = extract(model, store, ds, batch_size)?;
    evaluate_protocol(img.view(), cap.view(), &ds.ground_truth(), protocol, ds.manifest().folds)
}

pub fn extract<F: Real>(
    model: &Model,
    store: &ParamStore<F>,
    ds: &Dataset<F>,
    batch_size: usize,
) -> Result<(Array2<F>, Array2<F>)> {
    Ok((
        model.encode_images(store, ds, batch_size)?,
        model.encode_captions(store, ds, batch_size)?,
    ))
}

/// Cached embeddings of one split.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDump<F> {
    pub image_ids: Vec<String>,
    pub caption_ids: Vec<String>,
    /// Image index of every caption.
    pub caption_image: Vec<usize>,
    pub images: Array2<F>,
    pub captions: Array2<F>,
}

#[derive(Debug, Serialize, Deserialize)]
struct DumpMeta {
    count_images: usize,
    count_captions: usize,
    d_j: usize,
    image_ids: Vec<String>,
    caption_ids: Vec<String>,
    caption_image: Vec<usize>,
}

impl<F: Real> EmbeddingDump<F> {
    pub fn from_dataset(ds: &Dataset<F>, images: Array2<F>, captions: Array2<F>) -> Self {
        Self {
            image_ids: ds.images().iter().map(|i| i.image_id.clone()).collect(),
            caption_ids: ds.captions().iter().map(|c| c.caption_id.clone()).collect(),
            caption_image: ds.caption_image().to_vec(),
            images,
            captions,
        }
    }

    pub fn ground_truth(&self) -> Vec<Vec<usize>> {
        let mut gt = vec![Vec::new(); self.images.nrows()];
        for (c, &i) in self.caption_image.iter().enumerate() {
            gt[i].push(c);
        }
        gt
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let d = self.images.ncols();
        let flat = |a: &Array2<F>| a.iter().copied().collect::<Vec<F>>();
        format::write_container(
            path,
            &[
                RawTensor::real("images", vec![self.images.nrows(), d], &flat(&self.images)),
                RawTensor::real("captions", vec![self.captions.nrows(), d], &flat(&self.captions)),
            ],
            &DumpMeta {
                count_images: self.images.nrows(),
                count_captions: self.captions.nrows(),
                d_j: d,
                image_ids: self.image_ids.clone(),
                caption_ids: self.caption_ids.clone(),
                caption_image: self.caption_image.clone(),
            },
        )
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let c = Container::open(path)?;
        let meta: DumpMeta = c.meta()?;
        let read = |name: &str, rows: usize| -> Result<Array2<F>, DataError> {
            let (shape, v) = c.real::<F>(name)?;
            if shape != [rows, meta.d_j] {
                return Err(DataError::DimensionMismatch {
                    id: name.into(),
                    expected: format!("[{rows}, {}]", meta.d_j),
                    found: format!("{shape:?}"),
                });
            }
            Ok(Array2::from_shape_vec((rows, meta.d_j), v).expect("dump shape"))
        };
        Ok(Self {
            images: read("images", meta.count_images)?,
            captions: read("captions", meta.count_captions)?,
            image_ids: meta.image_ids,
            caption_ids: meta.caption_ids,
            caption_image: meta.caption_image,
        })
    }
}

/// Wall-clock split of inference. All fields are medians over repeats;
/// `matching = product + ranking` and `total = encoding + matching`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub encoding_s: f64,
    pub product_s: f64,
    pub ranking_s: f64,
    pub matching_s: f64,
    pub total_s: f64,
    pub repeats: usize,
    pub n_queries: usize,
    pub n_gallery: usize,
}

impl TimingReport {
    pub fn to_report(&self) -> String {
        format!(
            "encoding_s {:.6}\nproduct_s {:.6}\nranking_s {:.6}\nmatching_s {:.6}\ntotal_s {:.6}\nrepeats {}\nqueries {}\ngallery {}\n",
            self.encoding_s,
            self.product_s,
            self.ranking_s,
            self.matching_s,
            self.total_s,
            self.repeats,
            self.n_queries,
            self.n_gallery
        )
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.total_cmp(b));
    let n = xs.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Full ranking of every row of `sim` (descending, ties by index).
pub fn rank_rows<F: Real>(sim: ArrayView2<'_, F>) -> Vec<Vec<u32>> {
    sim.rows()
        .into_iter()
        .map(|row| {
            let mut keyed: Vec<(F, u32)> = row.iter().copied().zip(0..).collect();
            keyed.sort_unstable_by(|a, b| {
                b.0.partial_cmp(&a.0)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.1.cmp(&b.1))
            });
            keyed.into_iter().map(|(_, i)| i).collect()
        })
        .collect()
}

/// Product and ranking times (seconds) of one matching pass: every query
/// ranks the whole gallery.
fn time_matching<F: Real>(queries: ArrayView2<'_, F>, gallery: ArrayView2<'_, F>) -> Result<(f64, f64)> {
    let t0 = Instant::now();
    let sim = similarity(queries, gallery)?;
    let product = t0.elapsed().as_secs_f64();
    let t1 = Instant::now();
    let rows = rank_rows(sim.view());
    let ranking = t1.elapsed().as_secs_f64();
    std::hint::black_box(rows);
    Ok((product, ranking))
}

/// Times matching of cached embeddings; `encode` is timed as the encoding
/// phase (pass a no-op to time cached embeddings alone). One warm-up pass
/// runs first and is discarded.
pub fn benchmark_with<F: Real>(
    queries: ArrayView2<'_, F>,
    gallery: ArrayView2<'_, F>,
    repeats: usize,
    mut encode: impl FnMut() -> Result<()>,
) -> Result<TimingReport> {
    let repeats = repeats.max(1);
    encode()?;
    time_matching(queries, gallery)?;
    let (mut enc, mut prod, mut rank) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..repeats {
        let t = Instant::now();
        encode()?;
        enc.push(t.elapsed().as_secs_f64());
        let (p, r) = time_matching(queries, gallery)?;
        prod.push(p);
        rank.push(r);
    }
    let encoding_s = median(enc);
    let product_s = median(prod);
    let ranking_s = median(rank);
    let matching_s = product_s + ranking_s;
    Ok(TimingReport {
        encoding_s,
        product_s,
        ranking_s,
        matching_s,
        total_s: encoding_s + matching_s,
        repeats,
        n_queries: queries.nrows(),
        n_gallery: gallery.nrows(),
    })
}

/// Encoding of both splits with the query encoders, then matching.
pub fn benchmark_inference<F: Real>(
    model: &Model,
    store: &ParamStore<F>,
    ds: &Dataset<F>,
    repeats: usize,
    batch_size: usize,
) -> Result<TimingReport> {
    let (img, cap) = extract(model, store, ds, batch_size)?;
    benchmark_with(img.view(), cap.view(), repeats, || {
        std::hint::black_box(extract(model, store, ds, batch_size)?);
        Ok(())
    })
}

/// CSV rows for an R@Sum-versus-time plot.
pub fn plot_data(rows: &[(String, TimingReport, f64)]) -> String {
    let mut s = String::from("method,encoding_s,matching_s,total_s,rsum\n");
    for (name, t, rsum) in rows {
        let _ = writeln!(s, "{name},{:.6},{:.6},{:.6},{rsum:.2}", t.encoding_s, t.matching_s, t.total_s);
    }
    s
}
