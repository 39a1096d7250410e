//! Dense row-major f64 tensors and the forward kernels shared by graph
//! evaluation and plain (gradient-free) evaluation.
//!
//! Shapes must match exactly; the only broadcasts are scalar*tensor
//! (`scale`) and row-wise bias add in `add`. Loop orders are fixed so that
//! identical inputs give bitwise identical outputs.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::InvalidArgument(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::InvalidArgument(format!(
                "shape {shape:?} implies {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.len() <= 1
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bitwise equality, distinguishing -0.0 from 0.0 and comparing NaN bits.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Little-endian byte image of the payload, used for content hashing.
    pub fn le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * 8);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    fn require_same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(())
    }

    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(Error::Domain {
                op,
                msg: format!("expected a rank-2 tensor, got shape {:?}", self.shape),
            }),
        }
    }

    // ── forward kernels ──────────────────────────────────────────────

    /// Elementwise add. Also accepts `[R, C] + [C]` as a row-wise bias add.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape == other.shape {
            let data = self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(a, b)| a + b)
                .collect();
            return Ok(Tensor {
                shape: self.shape.clone(),
                data,
            });
        }
        if let ([r, c], [bc]) = (self.shape.as_slice(), other.shape.as_slice()) {
            if c == bc {
                let (r, c) = (*r, *c);
                let mut data = Vec::with_capacity(r * c);
                for i in 0..r {
                    for j in 0..c {
                        data.push(self.data[i * c + j] + other.data[j]);
                    }
                }
                return Ok(Tensor {
                    shape: self.shape.clone(),
                    data,
                });
            }
        }
        Err(Error::ShapeMismatch {
            op: "add",
            lhs: self.shape.clone(),
            rhs: other.shape.clone(),
        })
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.require_same_shape(other, "sub")?;
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| a - b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn mul_elem(&self, other: &Tensor) -> Result<Tensor> {
        self.require_same_shape(other, "mul_elem")?;
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| a * b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = other.dims2("matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let a = self.data[i * k + p];
                let row = &other.data[p * n..(p + 1) * n];
                let out = &mut data[i * n..(i + 1) * n];
                for j in 0..n {
                    out[j] += a * row[j];
                }
            }
        }
        Ok(Tensor {
            shape: vec![m, n],
            data,
        })
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| factor * v).collect(),
        }
    }

    pub fn tanh(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v.tanh()).collect(),
        }
    }

    pub fn exp(&self) -> Result<Tensor> {
        let mut data = Vec::with_capacity(self.data.len());
        for &v in &self.data {
            let e = v.exp();
            if !e.is_finite() {
                return Err(Error::Domain {
                    op: "exp",
                    msg: format!("exp({v}) overflows f64"),
                });
            }
            data.push(e);
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn log(&self) -> Result<Tensor> {
        let mut data = Vec::with_capacity(self.data.len());
        for &v in &self.data {
            if v <= 0.0 {
                return Err(Error::Domain {
                    op: "log",
                    msg: format!("log of non-positive value {v}"),
                });
            }
            data.push(v.ln());
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    /// Sum of all entries, as a `[1]` tensor.
    pub fn sum_all(&self) -> Tensor {
        Tensor::scalar(self.data.iter().sum())
    }

    /// Sum along one axis. Rank 1: axis 0 gives `[1]`. Rank 2: axis 0
    /// collapses rows (giving `[C]`), axis 1 collapses columns (giving `[R]`).
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        match self.shape.as_slice() {
            [_] if axis == 0 => Ok(self.sum_all()),
            [r, c] if axis == 0 => {
                let (r, c) = (*r, *c);
                let mut data = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        data[j] += self.data[i * c + j];
                    }
                }
                Ok(Tensor {
                    shape: vec![c],
                    data,
                })
            }
            [r, c] if axis == 1 => {
                let (r, c) = (*r, *c);
                let mut data = vec![0.0; r];
                for i in 0..r {
                    for j in 0..c {
                        data[i] += self.data[i * c + j];
                    }
                }
                Ok(Tensor {
                    shape: vec![r],
                    data,
                })
            }
            _ => Err(Error::Domain {
                op: "sum",
                msg: format!("axis {axis} invalid for shape {:?}", self.shape),
            }),
        }
    }

    fn lanes(&self, axis: usize, op: &'static str) -> Result<(usize, usize)> {
        // (number of independent lanes, lane length); lanes are contiguous
        // for the supported layouts.
        match self.shape.as_slice() {
            [n] if axis == 0 => Ok((1, *n)),
            [r, c] if axis == 1 => Ok((*r, *c)),
            _ => Err(Error::Domain {
                op,
                msg: format!(
                    "axis {axis} unsupported for shape {:?} (rank-1 axis 0 or rank-2 axis 1)",
                    self.shape
                ),
            }),
        }
    }

    /// Normalize each lane along `axis` to unit L2 norm. A zero lane is a
    /// domain error rather than a silent epsilon.
    pub fn l2_normalize(&self, axis: usize) -> Result<Tensor> {
        let (lanes, len) = self.lanes(axis, "l2_normalize")?;
        let mut data = vec![0.0; self.data.len()];
        for l in 0..lanes {
            let src = &self.data[l * len..(l + 1) * len];
            let norm = src.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::Domain {
                    op: "l2_normalize",
                    msg: format!("lane {l} has zero norm"),
                });
            }
            for (dst, &v) in data[l * len..(l + 1) * len].iter_mut().zip(src) {
                *dst = v / norm;
            }
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    /// Row-wise dot products of two equal-shape rank-2 tensors, giving `[R]`.
    pub fn dot_rows(&self, other: &Tensor) -> Result<Tensor> {
        self.require_same_shape(other, "dot_rows")?;
        let (r, c) = self.dims2("dot_rows")?;
        let mut data = vec![0.0; r];
        for i in 0..r {
            let mut acc = 0.0;
            for j in 0..c {
                acc += self.data[i * c + j] * other.data[i * c + j];
            }
            data[i] = acc;
        }
        Ok(Tensor {
            shape: vec![r],
            data,
        })
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let (lanes, len) = self.lanes(axis, "softmax")?;
        let mut data = vec![0.0; self.data.len()];
        for l in 0..lanes {
            let src = &self.data[l * len..(l + 1) * len];
            let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if !max.is_finite() {
                return Err(Error::Domain {
                    op: "softmax",
                    msg: format!("lane {l} contains a non-finite value"),
                });
            }
            let dst = &mut data[l * len..(l + 1) * len];
            let mut sum = 0.0;
            for (d, &v) in dst.iter_mut().zip(src) {
                let e = (v - max).exp();
                *d = e;
                sum += e;
            }
            for d in dst.iter_mut() {
                *d /= sum;
            }
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2("transpose")?;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor {
            shape: vec![c, r],
            data,
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let expected: usize = shape.iter().product();
        if shape.iter().any(|&e| e == 0) || expected != self.data.len() {
            return Err(Error::Domain {
                op: "reshape",
                msg: format!("cannot view {:?} as {shape:?}", self.shape),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    /// `self + delta ⊙ mask`; all three shapes must match exactly.
    pub fn masked_add(&self, delta: &Tensor, mask: &Tensor) -> Result<Tensor> {
        self.require_same_shape(delta, "masked_add")?;
        self.require_same_shape(mask, "masked_add")?;
        let data = self
            .data
            .iter()
            .zip(delta.data.iter())
            .zip(mask.data.iter())
            .map(|((b, d), m)| b + d * m)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    /// Concatenate along `axis`. All parts must agree on every other extent.
    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat of an empty list".into()));
        }
        let rank = parts[0].rank();
        if axis >= rank {
            return Err(Error::Domain {
                op: "concat",
                msg: format!("axis {axis} out of range for rank {rank}"),
            });
        }
        for p in parts {
            if p.rank() != rank {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: parts[0].shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
            for d in 0..rank {
                if d != axis && p.shape[d] != parts[0].shape[d] {
                    return Err(Error::ShapeMismatch {
                        op: "concat",
                        lhs: parts[0].shape.clone(),
                        rhs: p.shape.clone(),
                    });
                }
            }
        }
        let mut shape = parts[0].shape.clone();
        shape[axis] = parts.iter().map(|p| p.shape[axis]).sum();

        let outer: usize = parts[0].shape[..axis].iter().product();
        let inner: usize = parts[0].shape[axis + 1..].iter().product();
        let total: usize = shape.iter().product();
        let mut data = Vec::with_capacity(total);
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
            }
        }
        Ok(Tensor { shape, data })
    }

    /// Contiguous slice `start..end` along `axis` (rank 1 or 2, non-empty).
    pub fn slice(&self, start: usize, end: usize, axis: usize) -> Result<Tensor> {
        let rank = self.rank();
        if axis >= rank || start >= end || end > self.shape[axis] {
            return Err(Error::Domain {
                op: "slice",
                msg: format!(
                    "range {start}..{end} on axis {axis} invalid for shape {:?}",
                    self.shape
                ),
            });
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let full = self.shape[axis] * inner;
        let take = (end - start) * inner;
        let mut data = Vec::with_capacity(outer * take);
        for o in 0..outer {
            let base = o * full + start * inner;
            data.extend_from_slice(&self.data[base..base + take]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = end - start;
        Ok(Tensor { shape, data })
    }
}
