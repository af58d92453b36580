//! Momentum key encoders and the dynamic FIFO queues of key embeddings.

use ndarray::{Array2, ArrayView2};
use sha2::{Digest, Sha256};

use crate::error::ModelError;
use crate::params::ParamStore;
use crate::real::Real;

/// Query parameters (trained by backprop) and their momentum copy.
#[derive(Debug, Clone)]
pub struct EncoderPair<F> {
    pub query: ParamStore<F>,
    pub key: ParamStore<F>,
    pub momentum: f64,
}

impl<F: Real> EncoderPair<F> {
    /// Builds the pair with the key initialized from the query.
    pub fn new(query: ParamStore<F>, momentum: f64) -> Result<Self, ModelError> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(ModelError::Shape(format!("momentum {momentum} outside [0, 1)")));
        }
        let key = query.clone();
        Ok(Self { query, key, momentum })
    }

    pub fn initialize_key_from_query(&mut self) {
        initialize_key_from_query(&self.query, &mut self.key);
    }

    pub fn momentum_update(&mut self) -> Result<(), ModelError> {
        momentum_update(&self.query, &mut self.key, self.momentum)
    }
}

/// `θ_k ← m·θ_k + (1−m)·θ_q` over trainable parameters. Normalization
/// running statistics of the key side are left to its own forward passes.
pub fn momentum_update<F: Real>(
    query: &ParamStore<F>,
    key: &mut ParamStore<F>,
    m: f64,
) -> Result<(), ModelError> {
    key.check_layout(query)?;
    let m = F::c(m);
    let one_minus = F::one() - m;
    for (k, q) in key.params_mut().iter_mut().zip(query.params()) {
        k.value.zip_mut_with(&q.value, |kv, &qv| *kv = m * *kv + one_minus * qv);
    }
    Ok(())
}

/// `θ_k := θ_q`, buffers included.
pub fn initialize_key_from_query<F: Real>(query: &ParamStore<F>, key: &mut ParamStore<F>) {
    *key = query.clone();
}

/// Fixed-capacity FIFO of embeddings backed by a ring buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicQueue<F> {
    capacity: usize,
    dim: usize,
    rows: Array2<F>,
    cursor: usize,
    count: usize,
}

impl<F: Real> DynamicQueue<F> {
    pub fn new(capacity: usize, dim: usize) -> Self {
        Self {
            capacity,
            dim,
            rows: Array2::zeros((capacity, dim)),
            cursor: 0,
            count: 0,
        }
    }

    /// Rebuilds a queue whose contents, oldest first, are `fifo`.
    pub fn from_fifo(capacity: usize, fifo: ArrayView2<'_, F>) -> Result<Self, ModelError> {
        if fifo.nrows() > capacity {
            return Err(ModelError::Shape(format!(
                "{} rows exceed queue capacity {capacity}",
                fifo.nrows()
            )));
        }
        let mut q = Self::new(capacity, fifo.ncols());
        if fifo.nrows() > 0 {
            q.enqueue(fifo)?;
        }
        Ok(q)
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn is_full(&self) -> bool {
        self.count == self.capacity
    }

    /// Appends a batch, evicting the oldest rows once full.
    pub fn enqueue(&mut self, batch: ArrayView2<'_, F>) -> Result<(), ModelError> {
        if batch.nrows() > self.capacity {
            return Err(ModelError::Shape(format!(
                "batch of {} exceeds queue capacity {}",
                batch.nrows(),
                self.capacity
            )));
        }
        if batch.ncols() != self.dim {
            return Err(ModelError::Shape(format!(
                "batch width {} != queue width {}",
                batch.ncols(),
                self.dim
            )));
        }
        for row in batch.rows() {
            self.rows.row_mut(self.cursor).assign(&row);
            self.cursor = (self.cursor + 1) % self.capacity;
        }
        self.count = (self.count + batch.nrows()).min(self.capacity);
        Ok(())
    }

    /// Copy of the contents, oldest first, `[len × dim]`.
    pub fn snapshot(&self) -> Array2<F> {
        let start = (self.cursor + self.capacity - self.count) % self.capacity.max(1);
        let mut out = Array2::zeros((self.count, self.dim));
        for i in 0..self.count {
            out.row_mut(i).assign(&self.rows.row((start + i) % self.capacity));
        }
        out
    }

    /// SHA-256 of the FIFO contents, for cheap identity checks.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.count as u64).to_le_bytes());
        for x in self.snapshot().iter() {
            h.update(x.to_f64_lossy().to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}
