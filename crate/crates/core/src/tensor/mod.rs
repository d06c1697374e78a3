//! Dense tensors and a tape-based reverse-mode differentiation engine.
//!
//! A [`Tensor`] is an owned row-major array of `f64`. Differentiable
//! computation happens on a [`Tape`]: every operation on a [`Var`] appends a
//! node holding the result and an [`Op`] tag naming its parents. Calling
//! [`Tape::backward`] walks the nodes in reverse creation order, which is a
//! topological order by construction, and accumulates gradients into the
//! [`ParamStore`] entries that were bound to the tape.

mod kernels;
mod ops;
mod params;
mod tape;

pub use params::{ParamGroup, ParamId, ParamStore};
pub use tape::{Gradients, Op, Precision, Tape, Var};
pub(crate) use tape::sigmoid;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n = numel(shape);
        if n != data.len() {
            return Err(Error::Dimension {
                op: "tensor",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Panicking constructor for internal code that has already validated sizes.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[flat_index(&self.shape, index)]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn count_nan(&self) -> usize {
        self.data.iter().filter(|v| v.is_nan()).count()
    }

    /// Rows of a tensor viewed as `[shape[0], rest]`.
    pub fn rows(&self) -> std::slice::Chunks<'_, f64> {
        let width = if self.shape.is_empty() {
            1
        } else {
            self.data.len() / self.shape[0].max(1)
        };
        self.data.chunks(width.max(1))
    }

    /// Selects rows (first-axis slices) by index.
    pub fn select_rows(&self, idx: &[usize]) -> Tensor {
        let width = self.data.len() / self.shape[0].max(1);
        let mut data = Vec::with_capacity(idx.len() * width);
        for &i in idx {
            data.extend_from_slice(&self.data[i * width..(i + 1) * width]);
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        Tensor { shape, data }
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn flat_index(shape: &[usize], index: &[usize]) -> usize {
    assert_eq!(shape.len(), index.len());
    index
        .iter()
        .zip(strides(shape))
        .map(|(&i, s)| i * s)
        .sum()
}

/// Decomposes `shape` around `axis` into (outer, axis extent, inner).
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Numpy-style broadcast of two shapes.
pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::Dimension {
                    op,
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

/// For each flat index of `out_shape`, the flat index into `in_shape` under
/// broadcasting. `in_shape` must broadcast to `out_shape`.
pub(crate) fn broadcast_index_map(in_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let n = out_shape.len();
    let pad = n - in_shape.len();
    let in_strides = strides(in_shape);
    // effective stride per output axis: 0 where the input is broadcast
    let eff: Vec<usize> = (0..n)
        .map(|i| {
            if i < pad || in_shape[i - pad] == 1 {
                0
            } else {
                in_strides[i - pad]
            }
        })
        .collect();
    let total = numel(out_shape);
    let mut map = Vec::with_capacity(total);
    let mut counter = vec![0usize; n];
    let mut offset = 0usize;
    for _ in 0..total {
        map.push(offset);
        for ax in (0..n).rev() {
            counter[ax] += 1;
            offset += eff[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            offset -= eff[ax] * counter[ax];
            counter[ax] = 0;
        }
    }
    map
}

/// Sums `grad` (shaped like the broadcast output) back down to `in_shape`.
pub(crate) fn reduce_broadcast(grad: &[f64], out_shape: &[usize], in_shape: &[usize]) -> Vec<f64> {
    if out_shape == in_shape {
        return grad.to_vec();
    }
    let map = broadcast_index_map(in_shape, out_shape);
    let mut out = vec![0.0; numel(in_shape)];
    for (g, &i) in grad.iter().zip(&map) {
        out[i] += g;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape("t", &[3, 1], &[4]).unwrap(), vec![3, 4]);
        assert_eq!(broadcast_shape("t", &[2, 3, 4], &[3, 1]).unwrap(), vec![2, 3, 4]);
        assert!(broadcast_shape("t", &[2, 3], &[4]).is_err());
    }

    #[test]
    fn index_map_repeats_broadcast_axes() {
        let m = broadcast_index_map(&[2, 1], &[2, 3]);
        assert_eq!(m, vec![0, 0, 0, 1, 1, 1]);
        let m = broadcast_index_map(&[3], &[2, 3]);
        assert_eq!(m, vec![0, 1, 2, 0, 1, 2]);
    }

    #[test]
    fn reduce_sums_over_broadcast_axes() {
        let g = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        assert_eq!(reduce_broadcast(&g, &[2, 3], &[3]), vec![5.0, 7.0, 9.0]);
        assert_eq!(reduce_broadcast(&g, &[2, 3], &[2, 1]), vec![6.0, 15.0]);
    }

    #[test]
    fn new_rejects_wrong_length() {
        assert!(Tensor::new(&[2, 2], vec![1.0; 3]).is_err());
    }
}
