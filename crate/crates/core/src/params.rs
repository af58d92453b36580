//! Named parameter and buffer storage shared by every encoder sub-module.
//!
//! Query and key encoders are two `ParamStore`s with identical layout, which
//! makes momentum updates, optimizer state and checkpoints plain loops.

use ndarray::Array2;
use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::ModelError;
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BufferId(pub(crate) usize);

/// Decides optimizer treatment: only `Weight` entries get weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Norm,
}

impl ParamKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamKind::Weight => "weight",
            ParamKind::Bias => "bias",
            ParamKind::Norm => "norm",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<F> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Array2<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Buffer<F> {
    pub name: String,
    pub value: Vec<F>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<F> {
    params: Vec<Param<F>>,
    buffers: Vec<Buffer<F>>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            buffers: Vec::new(),
        }
    }

    fn push(&mut self, name: String, kind: ParamKind, value: Array2<F>) -> ParamId {
        debug_assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        self.params.push(Param { name, kind, value });
        ParamId(self.params.len() - 1)
    }

    /// Uniform Xavier/Glorot init, `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
    pub fn weight<R: Rng>(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> ParamId {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let value = Array2::from_shape_fn((fan_in, fan_out), |_| F::c(rng.gen_range(-a..a)));
        self.push(name.into(), ParamKind::Weight, value)
    }

    pub fn bias(&mut self, name: impl Into<String>, width: usize) -> ParamId {
        self.push(name.into(), ParamKind::Bias, Array2::zeros((1, width)))
    }

    pub fn norm_scale(&mut self, name: impl Into<String>, width: usize) -> ParamId {
        self.push(name.into(), ParamKind::Norm, Array2::ones((1, width)))
    }

    pub fn norm_shift(&mut self, name: impl Into<String>, width: usize) -> ParamId {
        self.push(name.into(), ParamKind::Norm, Array2::zeros((1, width)))
    }

    pub fn buffer(&mut self, name: impl Into<String>, value: Vec<F>) -> BufferId {
        self.buffers.push(Buffer {
            name: name.into(),
            value,
        });
        BufferId(self.buffers.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Array2<F> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<F> {
        &mut self.params[id.0].value
    }

    pub fn buffer_value(&self, id: BufferId) -> &[F] {
        &self.buffers[id.0].value
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Vec<F> {
        &mut self.buffers[id.0].value
    }

    pub fn params(&self) -> &[Param<F>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<F>] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Buffer<F>] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Buffer<F>] {
        &mut self.buffers
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// True when both stores have the same names, kinds and shapes.
    pub fn same_layout(&self, other: &Self) -> bool {
        self.params.len() == other.params.len()
            && self.buffers.len() == other.buffers.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.kind == b.kind && a.value.dim() == b.value.dim())
            && self
                .buffers
                .iter()
                .zip(&other.buffers)
                .all(|(a, b)| a.name == b.name && a.value.len() == b.value.len())
    }

    pub fn check_layout(&self, other: &Self) -> Result<(), ModelError> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(ModelError::Shape(
                "parameter stores have different layouts".into(),
            ))
        }
    }

    /// Places every parameter on the tape; the returned binding is indexed
    /// by `ParamId`.
    pub fn bind(&self, g: &mut Graph<F>) -> Bound {
        Bound {
            vars: self.params.iter().map(|p| g.param(p.value.clone())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params
            .iter()
            .all(|p| p.value.iter().all(|x| x.is_finite()))
    }
}

/// Tape variables for every parameter of one store.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl std::ops::Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Affine layer `y = x W + b` with `W: [in × out]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<F: Real, R: Rng>(
        store: &mut ParamStore<F>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            weight: store.weight(format!("{name}.weight"), fan_in, fan_out, rng),
            bias: store.bias(format!("{name}.bias"), fan_out),
            fan_in,
            fan_out,
        }
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, p: &Bound, x: Var) -> Var {
        g.linear(x, p[self.weight], p[self.bias])
    }
}

/// Per-feature batch normalization over rows with running statistics.
#[derive(Debug, Clone, Copy)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub width: usize,
}

impl BatchNorm {
    pub const EPS: f64 = 1e-5;
    pub const MOMENTUM: f64 = 0.1;

    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, width: usize) -> Self {
        Self {
            gamma: store.norm_scale(format!("{name}.gamma"), width),
            beta: store.norm_shift(format!("{name}.beta"), width),
            running_mean: store.buffer(format!("{name}.running_mean"), vec![F::zero(); width]),
            running_var: store.buffer(format!("{name}.running_var"), vec![F::one(); width]),
            width,
        }
    }

    /// Train mode uses batch statistics and updates the running ones; with a
    /// single row, or in eval mode, the running statistics are used.
    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        p: &Bound,
        x: Var,
        mode: Mode,
        store: &mut ParamStore<F>,
    ) -> Var {
        let rows = g.value(x).nrows();
        if mode == Mode::Train && rows > 1 {
            let (y, mean, var) = g.batch_norm(x, p[self.gamma], p[self.beta], None, F::c(Self::EPS));
            let mom = F::c(Self::MOMENTUM);
            let unbias = F::c(rows as f64 / (rows as f64 - 1.0));
            for (rm, m) in store.buffer_mut(self.running_mean).iter_mut().zip(&mean) {
                *rm = (F::one() - mom) * *rm + mom * *m;
            }
            for (rv, v) in store.buffer_mut(self.running_var).iter_mut().zip(&var) {
                *rv = (F::one() - mom) * *rv + mom * *v * unbias;
            }
            y
        } else {
            let mean = store.buffer_value(self.running_mean).to_vec();
            let var = store.buffer_value(self.running_var).to_vec();
            g.batch_norm(x, p[self.gamma], p[self.beta], Some((&mean, &var)), F::c(Self::EPS))
                .0
        }
    }
}
