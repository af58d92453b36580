//! Scalar-loop reference implementations and fixtures shared by the
//! integration tests. The references work on nested `Vec`s in the same
//! precision as the code under test and never touch ndarray kernels or the
//! tape.

#![allow(dead_code)]

use std::path::Path;

use itr::config::RunConfig;
use itr::params::ParamStore;
use itr::Real;
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub type Mat<F = f64> = Vec<Vec<F>>;

pub fn to_mat<F: Real>(a: &Array2<F>) -> Mat<F> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

pub fn random_array<F: Real>(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<F> {
    Array2::from_shape_fn((rows, cols), |_| F::c(rng.gen_range(-scale..scale)))
}

pub fn max_abs_diff<F: Real>(a: &Mat<F>, b: &Mat<F>) -> f64 {
    assert_eq!(a.len(), b.len(), "row count");
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len(), "column count");
            x.iter().zip(y).map(|(p, q)| (*p - *q).abs().to_f64_lossy())
        })
        .fold(0.0, f64::max)
}

/// Named parameter as a plain matrix.
pub fn param<F: Real>(store: &ParamStore<F>, name: &str) -> Mat<F> {
    let id = store.find(name).unwrap_or_else(|| panic!("no parameter `{name}`"));
    to_mat(store.get(id))
}

pub fn param_row<F: Real>(store: &ParamStore<F>, name: &str) -> Vec<F> {
    param(store, name).concat()
}

/// Gives every bias and normalization parameter a random value, so the
/// references cannot pass by accident on zeros and ones.
pub fn randomize_affine<F: Real>(store: &mut ParamStore<F>, rng: &mut ChaCha8Rng) {
    for p in store.params_mut() {
        match p.kind {
            itr::params::ParamKind::Weight => {}
            itr::params::ParamKind::Bias => p.value.mapv_inplace(|_| F::c(rng.gen_range(-0.5..0.5))),
            itr::params::ParamKind::Norm => {
                let centre = if p.name.ends_with("gamma") { 1.0 } else { 0.0 };
                p.value.mapv_inplace(|_| F::c(centre + rng.gen_range(-0.5..0.5)))
            }
        }
    }
}

pub fn linear<F: Real>(x: &Mat<F>, w: &Mat<F>, b: &[F]) -> Mat<F> {
    x.iter()
        .map(|row| {
            (0..b.len())
                .map(|o| {
                    let mut acc = b[o];
                    for (i, &xi) in row.iter().enumerate() {
                        acc += xi * w[i][o];
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

pub fn map<F: Real>(x: &Mat<F>, f: impl Fn(F) -> F) -> Mat<F> {
    x.iter().map(|r| r.iter().map(|&v| f(v)).collect()).collect()
}

fn mean_var<F: Real>(xs: impl Iterator<Item = F> + Clone) -> (F, F) {
    let n = F::c(xs.clone().count() as f64);
    let mut mean = F::zero();
    for x in xs.clone() {
        mean += x;
    }
    mean /= n;
    let mut var = F::zero();
    for x in xs {
        var += (x - mean) * (x - mean);
    }
    (mean, var / n)
}

/// Column normalization with batch mean and biased batch variance.
pub fn batch_norm<F: Real>(x: &Mat<F>, gamma: &[F], beta: &[F], eps: f64) -> Mat<F> {
    let mut out = x.clone();
    for j in 0..x[0].len() {
        let (mean, var) = mean_var(x.iter().map(|r| r[j]));
        let inv = F::one() / (var + F::c(eps)).sqrt();
        for (o, r) in out.iter_mut().zip(x) {
            o[j] = (r[j] - mean) * inv * gamma[j] + beta[j];
        }
    }
    out
}

pub fn layer_norm<F: Real>(x: &Mat<F>, gamma: &[F], beta: &[F], eps: f64) -> Mat<F> {
    x.iter()
        .map(|r| {
            let (mean, var) = mean_var(r.iter().copied());
            let inv = F::one() / (var + F::c(eps)).sqrt();
            r.iter()
                .enumerate()
                .map(|(j, &v)| (v - mean) * inv * gamma[j] + beta[j])
                .collect()
        })
        .collect()
}

pub fn softmax<F: Real>(x: &[F]) -> Vec<F> {
    let m = x.iter().copied().fold(F::neg_infinity(), F::max);
    let e: Vec<F> = x.iter().map(|&v| (v - m).exp()).collect();
    let mut z = F::zero();
    for &v in &e {
        z += v;
    }
    e.iter().map(|&v| v / z).collect()
}

pub fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    let mut acc = F::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

pub fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

pub fn gelu<F: Real>(x: F) -> F {
    F::c(0.5) * x * (F::one() + (x / F::c(std::f64::consts::SQRT_2)).erf())
}

fn column_mean<F: Real>(m: &Mat<F>) -> Vec<F> {
    (0..m[0].len())
        .map(|j| mean_var(m.iter().map(|r| r[j])).0)
        .collect()
}

const BN_EPS: f64 = 1e-5;

/// Self-guided global vectors and enhanced regions, one image per entry of
/// `images`, with batch statistics in both normalizations.
pub fn sge_reference<F: Real>(store: &ParamStore<F>, prefix: &str, images: &[Mat<F>]) -> (Mat<F>, Vec<Mat<F>>) {
    let wk = param(store, &format!("{prefix}.kappa.weight"));
    let bk = param_row(store, &format!("{prefix}.kappa.bias"));
    let wn = param(store, &format!("{prefix}.nu.weight"));
    let bn = param_row(store, &format!("{prefix}.nu.bias"));
    let wa = param(store, &format!("{prefix}.w_a"));
    let gr = param_row(store, &format!("{prefix}.tb_region.gamma"));
    let br = param_row(store, &format!("{prefix}.tb_region.beta"));
    let gg = param_row(store, &format!("{prefix}.tb_global.gamma"));
    let bg = param_row(store, &format!("{prefix}.tb_global.beta"));

    let d = images[0][0].len();
    let means: Mat<F> = images.iter().map(column_mean).collect();
    let all: Mat<F> = images.iter().flatten().cloned().collect();
    let kappa = batch_norm(&map(&linear(&all, &wk, &bk), F::tanh), &gr, &br, BN_EPS);
    let nu = batch_norm(&map(&linear(&means, &wn, &bn), F::tanh), &gg, &bg, BN_EPS);

    let mut globals = Vec::new();
    let mut enhanced = Vec::new();
    let mut row = 0;
    for (b, v) in images.iter().enumerate() {
        let logits: Vec<F> = (0..v.len())
            .map(|i| {
                let r: Vec<F> = (0..d).map(|j| nu[b][j] * kappa[row + i][j]).collect();
                let wa_col: Vec<F> = (0..d).map(|j| wa[j][0]).collect();
                dot(&r, &wa_col)
            })
            .collect();
        row += v.len();
        let s = softmax(&logits);
        let mut pooled = vec![F::zero(); d];
        for (&si, vi) in s.iter().zip(v) {
            for j in 0..d {
                pooled[j] += si * vi[j];
            }
        }
        let norm = dot(&pooled, &pooled).sqrt();
        let glo: Vec<F> = pooled.iter().map(|&x| x / norm).collect();
        enhanced.push(enhance_reference(v, &glo));
        globals.push(glo);
    }
    (globals, enhanced)
}

/// `x_i = v_i + softmax_i(v_i · g) g`.
pub fn enhance_reference<F: Real>(v: &Mat<F>, g: &[F]) -> Mat<F> {
    let a = softmax(&v.iter().map(|r| dot(r, g)).collect::<Vec<_>>());
    v.iter()
        .zip(&a)
        .map(|(r, &ai)| r.iter().zip(g).map(|(&x, &gj)| x + ai * gj).collect())
        .collect()
}

/// Column normalization with fixed statistics.
pub fn batch_norm_fixed<F: Real>(x: &Mat<F>, mean: &[F], var: &[F], gamma: &[F], beta: &[F], eps: f64) -> Mat<F> {
    map_indexed(x, |j, v| (v - mean[j]) / (var[j] + F::c(eps)).sqrt() * gamma[j] + beta[j])
}

fn map_indexed<F: Real>(x: &Mat<F>, f: impl Fn(usize, F) -> F) -> Mat<F> {
    x.iter().map(|r| r.iter().enumerate().map(|(j, &v)| f(j, v)).collect()).collect()
}

pub fn buffer<F: Real>(store: &ParamStore<F>, name: &str) -> Vec<F> {
    store
        .buffers()
        .iter()
        .find(|b| b.name == name)
        .unwrap_or_else(|| panic!("no buffer `{name}`"))
        .value
        .clone()
}

fn norm_layer<F: Real>(store: &ParamStore<F>, name: &str, x: &Mat<F>, batch_stats: bool) -> Mat<F> {
    let gamma = param_row(store, &format!("{name}.gamma"));
    let beta = param_row(store, &format!("{name}.beta"));
    if batch_stats {
        batch_norm(x, &gamma, &beta, BN_EPS)
    } else {
        let mean = buffer(store, &format!("{name}.running_mean"));
        let var = buffer(store, &format!("{name}.running_var"));
        batch_norm_fixed(x, &mean, &var, &gamma, &beta, BN_EPS)
    }
}

/// CLIP-guided global vectors from pooled inputs, with batch statistics or
/// the stored running statistics.
pub fn cge_reference<F: Real>(store: &ParamStore<F>, prefix: &str, pooled: &Mat<F>, batch_stats: bool) -> Mat<F> {
    let x = norm_layer(store, &format!("{prefix}.bn_input"), pooled, batch_stats);
    let x = linear(
        &x,
        &param(store, &format!("{prefix}.fc1.weight")),
        &param_row(store, &format!("{prefix}.fc1.bias")),
    );
    let x = map(&x, gelu);
    let x = norm_layer(store, &format!("{prefix}.bn_hidden"), &x, batch_stats);
    linear(
        &x,
        &param(store, &format!("{prefix}.fc2.weight")),
        &param_row(store, &format!("{prefix}.fc2.bias")),
    )
}

/// Layer norm of every spatial position followed by the positional mean.
pub fn spatial_pool_reference<F: Real>(store: &ParamStore<F>, prefix: &str, maps: &[Mat<F>]) -> Mat<F> {
    let gamma = param_row(store, &format!("{prefix}.ln.gamma"));
    let beta = param_row(store, &format!("{prefix}.ln.beta"));
    maps.iter()
        .map(|m| column_mean(&layer_norm(m, &gamma, &beta, 1e-5)))
        .collect()
}

pub fn positional_reference<F: Real>(n: usize, d_t: usize) -> Mat<F> {
    (0..n)
        .map(|t| {
            (0..d_t)
                .map(|i| {
                    let j = (i / 2) as f64;
                    let w = (-(2.0 * j / d_t as f64) * 10000f64.ln()).exp();
                    F::c(if i % 2 == 0 { (w * t as f64).sin() } else { (w * t as f64).cos() })
                })
                .collect()
        })
        .collect()
}

struct Gru<F> {
    wi: Mat<F>,
    wh: Mat<F>,
    bi: Vec<F>,
    bh: Vec<F>,
    hidden: usize,
}

impl<F: Real> Gru<F> {
    fn load(store: &ParamStore<F>, prefix: &str) -> Self {
        let wh = param(store, &format!("{prefix}.w_hidden"));
        Self {
            wi: param(store, &format!("{prefix}.w_input")),
            hidden: wh.len(),
            wh,
            bi: param_row(store, &format!("{prefix}.b_input")),
            bh: param_row(store, &format!("{prefix}.b_hidden")),
        }
    }

    fn step(&self, x: &[F], h: &[F]) -> Vec<F> {
        let hd = self.hidden;
        let gate = |w: &Mat<F>, v: &[F], b: &[F], k: usize| -> F {
            let mut acc = b[k];
            for (i, &vi) in v.iter().enumerate() {
                acc += vi * w[i][k];
            }
            acc
        };
        (0..hd)
            .map(|u| {
                let r = sigmoid(gate(&self.wi, x, &self.bi, u) + gate(&self.wh, h, &self.bh, u));
                let z = sigmoid(gate(&self.wi, x, &self.bi, hd + u) + gate(&self.wh, h, &self.bh, hd + u));
                let n = (gate(&self.wi, x, &self.bi, 2 * hd + u) + r * gate(&self.wh, h, &self.bh, 2 * hd + u)).tanh();
                (F::one() - z) * n + z * h[u]
            })
            .collect()
    }
}

/// Pooling coefficients for a set of `n` elements.
pub fn theta_reference<F: Real>(store: &ParamStore<F>, prefix: &str, n: usize, d_t: usize) -> Vec<F> {
    let pe = positional_reference::<F>(n, d_t);
    let fwd = Gru::load(store, &format!("{prefix}.gru_fwd"));
    let bwd = Gru::load(store, &format!("{prefix}.gru_bwd"));
    let hd = fwd.hidden;
    let mut hf = vec![vec![F::zero(); hd]; n];
    let mut h = vec![F::zero(); hd];
    for t in 0..n {
        h = fwd.step(&pe[t], &h);
        hf[t] = h.clone();
    }
    let mut hb = vec![vec![F::zero(); hd]; n];
    let mut h = vec![F::zero(); hd];
    for t in (0..n).rev() {
        h = bwd.step(&pe[t], &h);
        hb[t] = h.clone();
    }
    let states: Mat<F> = (0..n).map(|t| [hf[t].clone(), hb[t].clone()].concat()).collect();
    let hidden = map(
        &linear(
            &states,
            &param(store, &format!("{prefix}.mlp1.weight")),
            &param_row(store, &format!("{prefix}.mlp1.bias")),
        ),
        |x| x.max(F::zero()),
    );
    let logits = linear(
        &hidden,
        &param(store, &format!("{prefix}.mlp2.weight")),
        &param_row(store, &format!("{prefix}.mlp2.bias")),
    );
    softmax(&logits.iter().map(|r| r[0]).collect::<Vec<_>>())
}

/// Per-column descending sort, then a θ-weighted sum.
pub fn sorted_sum_reference<F: Real>(x: &Mat<F>, theta: &[F]) -> Vec<F> {
    (0..x[0].len())
        .map(|j| {
            let mut col: Vec<F> = x.iter().map(|r| r[j]).collect();
            col.sort_by(|a, b| b.partial_cmp(a).unwrap());
            dot(&col, theta)
        })
        .collect()
}

/// Desk-scale training configuration over a synthetic corpus in `root`.
pub fn desk_config(root: &Path, overrides: &[(&str, &str)]) -> RunConfig {
    let mut ov: Vec<(String, String)> = vec![
        ("data.root".into(), root.display().to_string()),
        ("data.val_split".into(), "train".into()),
    ];
    ov.extend(overrides.iter().map(|(k, v)| (k.to_string(), v.to_string())));
    RunConfig::load(None, &ov).expect("valid desk config")
}

/// A tiny f64 run over a `SyntheticCorpus::new(_, 6, 12, 10, None, _)` corpus.
pub fn small_config(root: &std::path::Path, extra: &[(&str, &str)]) -> RunConfig {
    let mut ov = vec![
        ("run.precision", "f64"),
        ("data.num_regions", "6"),
        ("data.d_i", "12"),
        ("data.d_t", "10"),
        ("data.max_length", "16"),
        ("model.d_j", "16"),
        ("model.pool.d_t", "8"),
        ("model.pool.hidden", "6"),
        ("model.pool.mlp_hidden", "6"),
        ("train.batch_size", "8"),
        ("train.epochs", "3"),
        ("train.lr_decay_epochs", "1"),
        ("moco.queue_size", "16"),
    ];
    ov.extend_from_slice(extra);
    desk_config(root, &ov)
}
