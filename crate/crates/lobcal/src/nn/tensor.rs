use ndarray::Array2;

use super::NnError;

/// Element type of network tensors. 64-bit by default; the `f32` feature
/// switches training builds to 32-bit storage. Reductions accumulate in
/// 64 bits either way.
#[cfg(feature = "f32")]
pub type Real = f32;
#[cfg(not(feature = "f32"))]
pub type Real = f64;

/// A dense row-major matrix. Vectors are represented as single-row
/// tensors and scalars as 1x1.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    inner: Array2<Real>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            inner: Array2::zeros((rows, cols)),
        }
    }

    pub fn scalar(value: Real) -> Self {
        Tensor::from_vec(1, 1, vec![value]).expect("1x1")
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<Real>) -> Result<Self, NnError> {
        if data.len() != rows * cols {
            return Err(NnError::Shape {
                op: "from_vec",
                detail: format!("{rows}x{cols} needs {} values, got {}", rows * cols, data.len()),
            });
        }
        let inner = Array2::from_shape_vec((rows, cols), data).expect("length checked");
        Ok(Tensor { inner })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> Real) -> Self {
        Tensor {
            inner: Array2::from_shape_fn((rows, cols), |(r, c)| f(r, c)),
        }
    }

    pub fn rows(&self) -> usize {
        self.inner.nrows()
    }

    pub fn cols(&self) -> usize {
        self.inner.ncols()
    }

    pub fn len(&self) -> usize {
        self.inner.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows(), self.cols())
    }

    pub fn get(&self, r: usize, c: usize) -> Real {
        self.inner[(r, c)]
    }

    pub fn set(&mut self, r: usize, c: usize, v: Real) {
        self.inner[(r, c)] = v;
    }

    /// Row-major view of the underlying storage.
    pub fn data(&self) -> &[Real] {
        self.inner.as_slice().expect("tensors are standard layout")
    }

    pub fn data_mut(&mut self) -> &mut [Real] {
        self.inner
            .as_slice_mut()
            .expect("tensors are standard layout")
    }

    pub fn matmul(&self, rhs: &Tensor) -> Tensor {
        Tensor {
            inner: self.inner.dot(&rhs.inner),
        }
    }

    /// `self^T . rhs` without materializing the transpose.
    pub fn matmul_tn(&self, rhs: &Tensor) -> Tensor {
        Tensor {
            inner: self.inner.t().dot(&rhs.inner),
        }
    }

    /// `self . rhs^T` without materializing the transpose.
    pub fn matmul_nt(&self, rhs: &Tensor) -> Tensor {
        Tensor {
            inner: self.inner.dot(&rhs.inner.t()),
        }
    }

    /// Per-block `a_i . b_i^T` where both tensors are stacks of blocks of
    /// `block` rows: `[n*block, k] x [n*block, k] -> [n*block, block]`.
    pub fn block_matmul_nt(&self, rhs: &Tensor, block: usize) -> Tensor {
        let n = self.rows() / block;
        let mut out = Tensor::zeros(self.rows(), block);
        for i in 0..n {
            let r = i * block..(i + 1) * block;
            let a = self.inner.slice(ndarray::s![r.clone(), ..]);
            let b = rhs.inner.slice(ndarray::s![r.clone(), ..]);
            out.inner
                .slice_mut(ndarray::s![r, ..])
                .assign(&a.dot(&b.t()));
        }
        out
    }

    /// Per-block `a_i . b_i` where `a` stacks `[block, block]` blocks and
    /// `b` stacks `[block, k]` blocks.
    pub fn block_matmul_nn(&self, rhs: &Tensor, block: usize) -> Tensor {
        let n = self.rows() / block;
        let mut out = Tensor::zeros(self.rows(), rhs.cols());
        for i in 0..n {
            let r = i * block..(i + 1) * block;
            let a = self.inner.slice(ndarray::s![r.clone(), ..]);
            let b = rhs.inner.slice(ndarray::s![r.clone(), ..]);
            out.inner
                .slice_mut(ndarray::s![r, ..])
                .assign(&a.dot(&b));
        }
        out
    }

    /// Per-block `a_i^T . b_i`: `a` stacks `[block, m]`, `b` stacks
    /// `[block, k]`; output stacks `[m, k]` blocks.
    pub fn block_matmul_tn(&self, rhs: &Tensor, block: usize) -> Tensor {
        let n = self.rows() / block;
        let m = self.cols();
        let mut out = Tensor::zeros(n * m, rhs.cols());
        for i in 0..n {
            let r = i * block..(i + 1) * block;
            let a = self.inner.slice(ndarray::s![r.clone(), ..]);
            let b = rhs.inner.slice(ndarray::s![r, ..]);
            out.inner
                .slice_mut(ndarray::s![i * m..(i + 1) * m, ..])
                .assign(&a.t().dot(&b));
        }
        out
    }

    /// Stacks tensors with identical column counts on top of each other.
    pub fn stack_rows(parts: &[&Tensor]) -> Tensor {
        let cols = parts.first().map_or(0, |t| t.cols());
        let rows: usize = parts.iter().map(|t| t.rows()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for t in parts {
            assert_eq!(t.cols(), cols, "stack_rows needs equal widths");
            data.extend_from_slice(t.data());
        }
        Tensor::from_vec(rows, cols, data).expect("sizes add up")
    }

    /// Row `r` as a contiguous slice.
    pub fn row(&self, r: usize) -> &[Real] {
        let cols = self.cols();
        &self.data()[r * cols..(r + 1) * cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [Real] {
        let cols = self.cols();
        &mut self.data_mut()[r * cols..(r + 1) * cols]
    }

    pub fn transpose(&self) -> Tensor {
        Tensor {
            inner: self.inner.t().as_standard_layout().to_owned(),
        }
    }

    pub fn map(&self, f: impl Fn(Real) -> Real) -> Tensor {
        Tensor {
            inner: self.inner.mapv(&f),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(Real, Real) -> Real) -> Tensor {
        let mut out = self.clone();
        out.inner.zip_mut_with(&other.inner, |a, &b| *a = f(*a, b));
        out
    }

    /// `self += scale * other`, used by gradient accumulation.
    pub fn scaled_add(&mut self, scale: Real, other: &Tensor) {
        self.inner.zip_mut_with(&other.inner, |a, &b| *a += scale * b);
    }

    /// Sum of all entries, accumulated in 64 bits.
    pub fn sum(&self) -> f64 {
        self.data().iter().map(|&v| v as f64).sum()
    }

    pub fn is_all_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }

    /// Rounds every entry through 32-bit precision, the storage width of
    /// checkpoints. Weights that have passed through here survive a
    /// save/load cycle bit-exactly.
    pub fn round_to_storage(&mut self) {
        for v in self.data_mut() {
            *v = (*v as f32) as Real;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = Tensor::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::from_vec(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let c = a.matmul(&b);
        assert_eq!(c.shape(), (2, 2));
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn transpose_round_trip() {
        let a = Tensor::from_fn(3, 4, |r, c| (r * 10 + c) as Real);
        let back = a.transpose().transpose();
        assert_eq!(a, back);
    }

    #[test]
    fn from_vec_rejects_bad_length() {
        assert!(Tensor::from_vec(2, 2, vec![1.0; 3]).is_err());
    }
}
