//! Dense `f32` tensors.
//!
//! A [`Tensor`] is a row-major buffer with a shape. Eager operations treat
//! any tensor as a matrix of `rows() × cols()` where `cols()` is the last
//! dimension. Gradients are computed by the tape in [`graph`].

pub mod adam;
pub mod graph;
pub mod kernels;
pub mod params;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use adam::{clip_grad_norm, Adam, AdamConfig};
pub use graph::{Graph, Var};
pub use params::{ParamId, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    #[serde(skip)]
    grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::dim(
                "tensor",
                format!("shape {shape:?} must be non-empty and positive"),
            ));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(
                "tensor",
                format!("shape {shape:?} needs {n} elements, got {}", data.len()),
            ));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    /// Builds a tensor produced by an op; checks finiteness in debug builds.
    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        debug_assert!(
            data.iter().all(|v| v.is_finite()),
            "non-finite value produced for shape {shape:?}"
        );
        Tensor {
            shape,
            data,
            grad: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor::from_op(shape.to_vec(), vec![0.0; n])
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Tensor::from_op(shape.to_vec(), vec![value; n])
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::dim("from_rows", "ragged rows"));
        }
        Tensor::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn vector(data: Vec<f32>) -> Result<Self> {
        Tensor::new(vec![data.len()], data)
    }

    pub fn randn(shape: &[usize], std: f32, rng: &mut crate::rng::Rng) -> Self {
        let n = shape.iter().product();
        Tensor::from_op(shape.to_vec(), crate::rng::normal_vec(rng, n, std))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Mutable access for explicit parameter updates.
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f32>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::dim("set_grad", "gradient length differs from data"));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().expect("shape is never empty")
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    pub fn row(&self, r: usize) -> &[f32] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() || shape.contains(&0) {
            return Err(Error::dim("reshape", format!("{:?} -> {shape:?}", self.shape)));
        }
        self.shape = shape;
        self.grad = None;
        Ok(self)
    }

    fn out_shape_with_cols(&self, cols: usize) -> Vec<usize> {
        let mut s = self.shape.clone();
        *s.last_mut().expect("shape is never empty") = cols;
        s
    }

    /// `self[...×k] · rhs[k×n]`.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        if rhs.shape.len() != 2 || self.cols() != rhs.shape[0] {
            return Err(Error::dim("matmul", format!("{:?} · {:?}", self.shape, rhs.shape)));
        }
        let (m, k, n) = (self.rows(), self.cols(), rhs.shape[1]);
        let out = kernels::matmul(&self.data, &rhs.data, m, k, n);
        Ok(Tensor::from_op(self.out_shape_with_cols(n), out))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        if self.shape.len() != 2 {
            return Err(Error::dim("transpose", format!("{:?} is not a matrix", self.shape)));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        Ok(Tensor::from_op(vec![c, r], kernels::transpose(&self.data, r, c)))
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.shape != rhs.shape {
            return Err(Error::dim("add", format!("{:?} + {:?}", self.shape, rhs.shape)));
        }
        let data = self.data.iter().zip(&rhs.data).map(|(a, b)| a + b).collect();
        Ok(Tensor::from_op(self.shape.clone(), data))
    }

    /// Adds a length-`cols` bias to every row.
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let c = self.cols();
        if bias.len() != c {
            return Err(Error::dim("add_bias", format!("bias {:?} vs cols {c}", bias.shape)));
        }
        let mut data = self.data.clone();
        for row in data.chunks_mut(c) {
            for (v, b) in row.iter_mut().zip(&bias.data) {
                *v += b;
            }
        }
        Ok(Tensor::from_op(self.shape.clone(), data))
    }

    pub fn scale(&self, s: f32) -> Tensor {
        Tensor::from_op(self.shape.clone(), self.data.iter().map(|v| v * s).collect())
    }

    pub fn silu(&self) -> Tensor {
        Tensor::from_op(
            self.shape.clone(),
            self.data.iter().map(|&v| kernels::silu(v)).collect(),
        )
    }

    /// Softmax over the last dimension.
    pub fn softmax(&self) -> Tensor {
        let mut data = self.data.clone();
        for row in data.chunks_mut(self.cols()) {
            kernels::softmax_in_place(row);
        }
        Tensor::from_op(self.shape.clone(), data)
    }

    /// Row-wise layer normalisation with learned gain and bias.
    pub fn layernorm(&self, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let c = self.cols();
        if gain.len() != c || bias.len() != c {
            return Err(Error::dim("layernorm", "gain/bias length must equal cols"));
        }
        let mut out = vec![0.0; self.data.len()];
        for (o, x) in out.chunks_mut(c).zip(self.data.chunks(c)) {
            kernels::layernorm_row(o, x, &gain.data, &bias.data);
        }
        Ok(Tensor::from_op(self.shape.clone(), out))
    }

    /// Concatenates along the last dimension; both operands must have equal row counts.
    pub fn concat_cols(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.rows() != rhs.rows() || self.shape.len() != rhs.shape.len() {
            return Err(Error::dim(
                "concat_cols",
                format!("{:?} ++ {:?}", self.shape, rhs.shape),
            ));
        }
        let (ca, cb) = (self.cols(), rhs.cols());
        let mut data = Vec::with_capacity(self.len() + rhs.len());
        for r in 0..self.rows() {
            data.extend_from_slice(&self.data[r * ca..(r + 1) * ca]);
            data.extend_from_slice(&rhs.data[r * cb..(r + 1) * cb]);
        }
        Ok(Tensor::from_op(self.out_shape_with_cols(ca + cb), data))
    }

    /// Gathers rows of a `[V×d]` table.
    pub fn embedding_lookup(&self, ids: &[usize]) -> Result<Tensor> {
        if self.shape.len() != 2 {
            return Err(Error::dim("embedding_lookup", "table must be a matrix"));
        }
        let (v, d) = (self.shape[0], self.shape[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Index {
                    what: "embedding table",
                    index: id,
                    size: v,
                });
            }
            data.extend_from_slice(&self.data[id * d..(id + 1) * d]);
        }
        Tensor::new(vec![ids.len(), d], data)
    }

    /// Mean cross-entropy of each logits row against its target id.
    pub fn cross_entropy(&self, targets: &[usize]) -> Result<f32> {
        let v = self.cols();
        if targets.len() != self.rows() {
            return Err(Error::dim("cross_entropy", "one target per row required"));
        }
        let mut total = 0.0f64;
        for (r, &t) in targets.iter().enumerate() {
            if t >= v {
                return Err(Error::Index {
                    what: "vocabulary",
                    index: t,
                    size: v,
                });
            }
            let row = self.row(r);
            total += kernels::log_sum_exp(row) - row[t] as f64;
        }
        Ok((total / targets.len() as f64) as f32)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}
