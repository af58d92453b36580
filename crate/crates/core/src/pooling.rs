//! Learned order-statistic pooling.
//!
//! Each set of `N` joint-space vectors is sorted per dimension (descending)
//! and combined with position coefficients `θ_1..θ_N`. The coefficients are
//! a function of `N` alone: sinusoidal position codes go through a
//! bidirectional GRU and a one-hidden-layer MLP, and a softmax over the `N`
//! positions makes them sum to one.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Segments, Var};
use crate::error::ModelError;
use crate::params::{Bound, Linear, ParamId, ParamStore};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoolConfig {
    /// Width of the sinusoidal position code.
    pub d_t: usize,
    /// GRU hidden size per direction.
    pub hidden: usize,
    pub mlp_hidden: usize,
    /// Longest set the pooler accepts.
    pub n_max: usize,
}

/// Table of sinusoidal position codes for positions `0..n`:
/// `p[t, 2j] = sin(w_j t)`, `p[t, 2j+1] = cos(w_j t)`, `w_j = 10000^(-2j/d_t)`.
pub fn positional_encode<F: Real>(n: usize, d_t: usize) -> Array2<F> {
    Array2::from_shape_fn((n, d_t), |(t, i)| {
        let j = i / 2;
        let w = 1.0 / 10000f64.powf(2.0 * j as f64 / d_t as f64);
        let angle = w * t as f64;
        F::c(if i % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

/// One direction of a GRU, gates packed as `[r | z | n]`.
#[derive(Debug, Clone, Copy)]
struct GruDirection {
    w_input: ParamId,
    w_hidden: ParamId,
    b_input: ParamId,
    b_hidden: ParamId,
}

impl GruDirection {
    fn new<F: Real, R: Rng>(
        store: &mut ParamStore<F>,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            w_input: store.weight(format!("{name}.w_input"), input, 3 * hidden, rng),
            w_hidden: store.weight(format!("{name}.w_hidden"), hidden, 3 * hidden, rng),
            b_input: store.bias(format!("{name}.b_input"), 3 * hidden),
            b_hidden: store.bias(format!("{name}.b_hidden"), 3 * hidden),
        }
    }

    /// Runs over `order`, returning the hidden state at each visited row of
    /// `projected` (which already holds `x W_i + b_i`) in visiting order.
    fn run<F: Real>(
        &self,
        g: &mut Graph<F>,
        p: &Bound,
        projected: Var,
        order: impl Iterator<Item = usize>,
        hidden: usize,
    ) -> Vec<Var> {
        let h3 = 3 * hidden;
        let mut h = g.constant(Array2::zeros((1, hidden)));
        let mut states = Vec::new();
        for t in order {
            let xw = g.slice(projected, (t, t + 1), (0, h3));
            let hw = g.linear(h, p[self.w_hidden], p[self.b_hidden]);
            let xr = g.slice(xw, (0, 1), (0, hidden));
            let hr = g.slice(hw, (0, 1), (0, hidden));
            let xz = g.slice(xw, (0, 1), (hidden, 2 * hidden));
            let hz = g.slice(hw, (0, 1), (hidden, 2 * hidden));
            let xn = g.slice(xw, (0, 1), (2 * hidden, h3));
            let hn = g.slice(hw, (0, 1), (2 * hidden, h3));
            let r = g.add(xr, hr);
            let r = g.sigmoid(r);
            let z = g.add(xz, hz);
            let z = g.sigmoid(z);
            let rn = g.mul(r, hn);
            let n = g.add(xn, rn);
            let n = g.tanh(n);
            // h' = (1 - z) n + z h = n + z (h - n)
            let diff = g.sub(h, n);
            let zd = g.mul(z, diff);
            h = g.add(n, zd);
            states.push(h);
        }
        states
    }
}

/// Position-coefficient generator plus the sort-and-weight aggregation.
#[derive(Debug, Clone)]
pub struct GpoPooling {
    cfg: PoolConfig,
    forward_gru: GruDirection,
    backward_gru: GruDirection,
    mlp_hidden: Linear,
    mlp_out: Linear,
}

impl GpoPooling {
    pub fn new<F: Real, R: Rng>(
        store: &mut ParamStore<F>,
        name: &str,
        cfg: PoolConfig,
        rng: &mut R,
    ) -> Self {
        Self {
            cfg,
            forward_gru: GruDirection::new(store, &format!("{name}.gru_fwd"), cfg.d_t, cfg.hidden, rng),
            backward_gru: GruDirection::new(store, &format!("{name}.gru_bwd"), cfg.d_t, cfg.hidden, rng),
            mlp_hidden: Linear::new(store, &format!("{name}.mlp1"), 2 * cfg.hidden, cfg.mlp_hidden, rng),
            mlp_out: Linear::new(store, &format!("{name}.mlp2"), cfg.mlp_hidden, 1, rng),
        }
    }

    pub fn config(&self) -> &PoolConfig {
        &self.cfg
    }

    /// θ for every requested length, each a `[n × 1]` column summing to one.
    pub fn coefficients_for<F: Real>(
        &self,
        g: &mut Graph<F>,
        p: &Bound,
        lengths: impl IntoIterator<Item = usize>,
    ) -> Result<BTreeMap<usize, Var>, ModelError> {
        let wanted: std::collections::BTreeSet<usize> = lengths.into_iter().collect();
        let mut out = BTreeMap::new();
        let Some(&max_n) = wanted.iter().next_back() else {
            return Ok(out);
        };
        if *wanted.iter().next().unwrap() == 0 {
            return Err(ModelError::Shape("cannot pool an empty set".into()));
        }
        if max_n > self.cfg.n_max {
            return Err(ModelError::Shape(format!(
                "set of length {max_n} exceeds pooling limit {}",
                self.cfg.n_max
            )));
        }
        let h = self.cfg.hidden;
        let codes = g.constant(positional_encode::<F>(max_n, self.cfg.d_t));
        let fwd_proj = g.linear(codes, p[self.forward_gru.w_input], p[self.forward_gru.b_input]);
        let bwd_proj = g.linear(codes, p[self.backward_gru.w_input], p[self.backward_gru.b_input]);
        // The forward direction over a prefix does not depend on the set
        // length, so one pass over `max_n` serves every length.
        let fwd_states = self.forward_gru.run(g, p, fwd_proj, 0..max_n, h);
        for n in wanted {
            let mut bwd_states = self.backward_gru.run(g, p, bwd_proj, (0..n).rev(), h);
            bwd_states.reverse();
            let fwd = g.stack_rows(&fwd_states[..n]);
            let bwd = g.stack_rows(&bwd_states);
            let states = g.concat_cols(fwd, bwd);
            let hidden = self.mlp_hidden.forward(g, p, states);
            let hidden = g.relu(hidden);
            let logits = self.mlp_out.forward(g, p, hidden);
            let theta = g.segment_softmax(logits, &Segments::uniform(1, n));
            out.insert(n, theta);
        }
        Ok(out)
    }

    pub fn coefficients<F: Real>(
        &self,
        g: &mut Graph<F>,
        p: &Bound,
        n: usize,
    ) -> Result<Var, ModelError> {
        Ok(self.coefficients_for(g, p, [n])?[&n])
    }

    /// Pools every segment of `features` (`[N_total × d]`) into one row.
    pub fn pool<F: Real>(
        &self,
        g: &mut Graph<F>,
        p: &Bound,
        features: Var,
        segments: &Segments,
    ) -> Result<Var, ModelError> {
        if g.value(features).nrows() != segments.total() {
            return Err(ModelError::Shape(format!(
                "pool: {} feature rows for {} segment rows",
                g.value(features).nrows(),
                segments.total()
            )));
        }
        let lengths = segments.lengths();
        let thetas = self.coefficients_for(g, p, lengths.iter().copied())?;
        let parts: Vec<Var> = lengths.iter().map(|n| thetas[n]).collect();
        let theta = g.stack_rows(&parts);
        Ok(g.sorted_pool(features, theta, segments))
    }
}

/// θ for a set of `length` valid entries laid out in a buffer of
/// `buffer_len` slots; masked slots get exactly zero.
pub fn pooling_coefficients<F: Real>(
    pool: &GpoPooling,
    store: &ParamStore<F>,
    length: usize,
    buffer_len: usize,
) -> Result<Vec<F>, ModelError> {
    if length > buffer_len {
        return Err(ModelError::Shape(format!(
            "length {length} exceeds buffer {buffer_len}"
        )));
    }
    let mut g = Graph::no_grad();
    let p = store.bind(&mut g);
    let theta = pool.coefficients(&mut g, &p, length)?;
    let mut out: Vec<F> = g.value(theta).iter().copied().collect();
    out.resize(buffer_len, F::zero());
    Ok(out)
}

/// Value-only aggregation: per-column descending sort of the rows, then a
/// θ-weighted sum over sorted positions.
pub fn aggregate<F: Real>(features: ArrayView2<F>, theta: &[F]) -> Array1<F> {
    let n = features.nrows();
    assert_eq!(theta.len(), n, "one coefficient per row");
    let mut out = Array1::zeros(features.ncols());
    let mut col: Vec<F> = Vec::with_capacity(n);
    for (j, o) in out.iter_mut().enumerate() {
        col.clear();
        col.extend(features.column(j).iter().copied());
        col.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
        *o = col.iter().zip(theta).map(|(&x, &t)| x * t).sum();
    }
    out
}
