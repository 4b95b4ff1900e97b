//! Dense row-major parameter tensors, the parameter store, and gradient buffers.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

/// A dense row-major matrix of `f64`. Vectors are stored as `rows x 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Tensor { rows, cols, data: vec![value; rows * cols] }
    }

    /// Panics if `data.len() != rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor data length does not match {rows}x{cols}");
        Tensor { rows, cols, data }
    }

    pub fn column(data: Vec<f64>) -> Self {
        let rows = data.len();
        Tensor { rows, cols: 1, data }
    }

    pub fn uniform<R: Rng + ?Sized>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect();
        Tensor { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    /// `self * x` for a matrix `self` and vector `x` of length `cols`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|r| self.row(r).iter().zip(x).map(|(w, v)| w * v).sum()).collect()
    }
}

/// Handle to a tensor registered in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Slot {
    name: String,
    tensor: Tensor,
    // Row-sparse parameters (embedding tables) only track gradients for rows
    // that were actually read during a forward pass.
    row_sparse: bool,
}

/// Ordered collection of named trainable tensors. Registration order is the
/// serialization order used by checkpoints.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    slots: Vec<Slot>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.push(name.into(), tensor, false)
    }

    pub fn add_row_sparse(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.push(name.into(), tensor, true)
    }

    fn push(&mut self, name: String, tensor: Tensor, row_sparse: bool) -> ParamId {
        debug_assert!(self.find(&name).is_none(), "duplicate parameter name {name}");
        self.slots.push(Slot { name, tensor, row_sparse });
        ParamId(self.slots.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.slots.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.slots[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.slots[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.slots[id.0].name
    }

    pub fn is_row_sparse(&self, id: ParamId) -> bool {
        self.slots[id.0].row_sparse
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.slots.iter().position(|s| s.name == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.slots.iter().map(|s| s.tensor.len()).sum()
    }

    /// ‖θ‖² over every registered tensor.
    pub fn squared_norm(&self) -> f64 {
        self.slots.iter().map(|s| s.tensor.squared_norm()).sum()
    }
}

/// Gradient buffers shaped like a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Tensor>,
    touched: Vec<Option<BTreeSet<usize>>>,
}

impl Gradients {
    pub fn zeros_like(params: &ParamStore) -> Self {
        let grads = params.slots.iter().map(|s| Tensor::zeros(s.tensor.rows, s.tensor.cols)).collect();
        let touched = params.slots.iter().map(|s| s.row_sparse.then(BTreeSet::new)).collect();
        Gradients { grads, touched }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub(crate) fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        if let Some(rows) = &mut self.touched[id.0] {
            rows.extend(0..self.grads[id.0].rows);
        }
        &mut self.grads[id.0]
    }

    pub(crate) fn row_mut(&mut self, id: ParamId, row: usize) -> &mut [f64] {
        if let Some(rows) = &mut self.touched[id.0] {
            rows.insert(row);
        }
        self.grads[id.0].row_mut(row)
    }

    /// Rows with possibly non-zero gradient, or `None` for dense parameters.
    pub fn touched_rows(&self, id: ParamId) -> Option<&BTreeSet<usize>> {
        self.touched[id.0].as_ref()
    }

    pub fn zero(&mut self) {
        for (g, touched) in self.grads.iter_mut().zip(&mut self.touched) {
            match touched {
                Some(rows) => {
                    for &r in rows.iter() {
                        g.row_mut(r).iter_mut().for_each(|x| *x = 0.0);
                    }
                    rows.clear();
                }
                None => g.data_mut().iter_mut().for_each(|x| *x = 0.0),
            }
        }
    }

    fn for_each_live<F: FnMut(&mut [f64])>(&mut self, mut f: F) {
        for (g, touched) in self.grads.iter_mut().zip(&self.touched) {
            match touched {
                Some(rows) => rows.iter().for_each(|&r| f(g.row_mut(r))),
                None => f(g.data_mut()),
            }
        }
    }

    /// Global L2 norm over every gradient entry.
    pub fn global_norm(&self) -> f64 {
        let mut sum = 0.0;
        for (g, touched) in self.grads.iter().zip(&self.touched) {
            sum += match touched {
                Some(rows) => rows.iter().map(|&r| g.row(r).iter().map(|x| x * x).sum::<f64>()).sum(),
                None => g.squared_norm(),
            };
        }
        sum.sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.grads.iter().flat_map(|g| g.data().iter()).fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn scale(&mut self, factor: f64) {
        self.for_each_live(|xs| xs.iter_mut().for_each(|x| *x *= factor));
    }

    pub fn clamp(&mut self, bound: f64) {
        self.for_each_live(|xs| xs.iter_mut().for_each(|x| *x = x.clamp(-bound, bound)));
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}
