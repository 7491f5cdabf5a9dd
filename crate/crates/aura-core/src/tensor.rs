//! Dense row-major tensors and the math kernels everything else is built on.
//!
//! Arbitrary rank is supported for storage and IO, but the math kernels work
//! on rank-2 tensors; higher-rank data (motion-capture windows) is reshaped
//! before it reaches them. All reductions accumulate left to right in index
//! order so results are bit-reproducible for a given build.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::Dimension {
                op: "Tensor::new",
                expected: format!("{expect} elements for shape {shape:?}"),
                got: format!("{}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![S::zero(); n],
        }
    }

    pub fn full(shape: Vec<usize>, v: S) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![v; n],
        }
    }

    /// Rank-2 constructor from nested rows; rows must be equal length.
    pub fn from_rows(rows: &[Vec<S>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Empty("Tensor::from_rows"));
        }
        let c = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::Dimension {
                    op: "Tensor::from_rows",
                    expected: format!("{c} columns"),
                    got: format!("{}", row.len()),
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            shape: vec![rows.len(), c],
            data,
        })
    }

    pub fn row_vector(data: Vec<S>) -> Self {
        Self {
            shape: vec![1, data.len()],
            data,
        }
    }

    pub fn scalar(v: S) -> Self {
        Self {
            shape: vec![1, 1],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// The two dimensions of a rank-2 tensor, or a rank error naming `op`.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() == 2 {
            Ok((self.shape[0], self.shape[1]))
        } else {
            Err(Error::Dimension {
                op,
                expected: "rank-2 tensor".into(),
                got: format!("shape {:?}", self.shape),
            })
        }
    }

    #[inline]
    pub fn at2(&self, i: usize, j: usize) -> S {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[i * self.shape[1] + j]
    }

    #[inline]
    pub fn set2(&mut self, i: usize, j: usize, v: S) {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[i * self.shape[1] + j] = v;
    }

    /// The single element of a 1x1 tensor.
    pub fn item(&self) -> Result<S> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::NonScalarObjective {
                shape: self.shape.clone(),
            })
        }
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != self.data.len() {
            return Err(Error::Dimension {
                op: "reshape",
                expected: format!("{} elements", self.data.len()),
                got: format!("shape {shape:?} ({expect} elements)"),
            });
        }
        Ok(Self {
            shape,
            data: self.data.clone(),
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            data: vec![S::zero(); self.data.len()],
        }
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    fn shape_check(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.shape_check(other, "add")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(Self {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.shape_check(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.shape_check(other, "sub")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a - b)
            .collect();
        Ok(Self {
            shape: self.shape.clone(),
            data,
        })
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.shape_check(other, "mul")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a * b)
            .collect();
        Ok(Self {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn scale(&self, k: S) -> Self {
        self.map(|x| x * k)
    }

    pub fn add_scalar(&self, k: S) -> Self {
        self.map(|x| x + k)
    }

    /// Adds a [1 x C] row vector to every row of a [R x C] matrix.
    pub fn add_row(&self, row: &Self) -> Result<Self> {
        let (r, c) = self.dims2("add_row")?;
        let (rr, rc) = row.dims2("add_row")?;
        if rr != 1 || rc != c {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                left: self.shape.clone(),
                right: row.shape.clone(),
            });
        }
        let mut out = self.clone();
        for i in 0..r {
            for j in 0..c {
                out.data[i * c + j] += row.data[j];
            }
        }
        Ok(out)
    }

    /// Matrix product with deterministic summation order: for each output
    /// element the k terms are accumulated in ascending order, identical to
    /// the naive triple loop.
    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = rhs.dims2("matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.shape.clone(),
                right: rhs.shape.clone(),
            });
        }
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            let row_out = &mut out[i * n..(i + 1) * n];
            for kk in 0..k {
                let a = self.data[i * k + kk];
                let rhs_row = &rhs.data[kk * n..(kk + 1) * n];
                for j in 0..n {
                    row_out[j] += a * rhs_row[j];
                }
            }
        }
        Ok(Self {
            shape: vec![m, n],
            data: out,
        })
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2("transpose")?;
        let mut data = vec![S::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self {
            shape: vec![c, r],
            data,
        })
    }

    /// Row-wise softmax with max subtraction, so arbitrarily large scores
    /// stay finite. Each output row sums to 1 up to rounding.
    pub fn softmax_rows(&self) -> Result<Self> {
        let (r, c) = self.dims2("softmax_rows")?;
        if c == 0 {
            return Err(Error::Empty("softmax_rows"));
        }
        let mut out = vec![S::zero(); r * c];
        for i in 0..r {
            let row = &self.data[i * c..(i + 1) * c];
            let mut m = row[0];
            for &x in &row[1..] {
                if x > m {
                    m = x;
                }
            }
            let mut sum = S::zero();
            for j in 0..c {
                let e = (row[j] - m).exp();
                out[i * c + j] = e;
                sum += e;
            }
            for j in 0..c {
                out[i * c + j] /= sum;
            }
        }
        Ok(Self {
            shape: vec![r, c],
            data: out,
        })
    }

    /// Row-wise log(sum(exp(x))) with max subtraction.
    pub fn logsumexp_rows(&self) -> Result<Vec<S>> {
        let (r, c) = self.dims2("logsumexp_rows")?;
        if c == 0 {
            return Err(Error::Empty("logsumexp_rows"));
        }
        let mut out = Vec::with_capacity(r);
        for i in 0..r {
            let row = &self.data[i * c..(i + 1) * c];
            let mut m = row[0];
            for &x in &row[1..] {
                if x > m {
                    m = x;
                }
            }
            let mut sum = S::zero();
            for &x in row {
                sum += (x - m).exp();
            }
            out.push(m + sum.ln());
        }
        Ok(out)
    }

    /// Scales every row to unit Euclidean norm. A row of exact zeros cannot
    /// be projected onto the sphere and is reported as an error.
    pub fn l2_normalize_rows(&self) -> Result<Self> {
        let (r, c) = self.dims2("l2_normalize_rows")?;
        let mut out = self.clone();
        for i in 0..r {
            let row = &mut out.data[i * c..(i + 1) * c];
            let mut sq = S::zero();
            for &x in row.iter() {
                sq += x * x;
            }
            if sq == S::zero() {
                return Err(Error::ZeroVector);
            }
            let inv = sq.sqrt().recip();
            for x in row.iter_mut() {
                *x *= inv;
            }
        }
        Ok(out)
    }

    /// Per-row layer normalization followed by elementwise gain and bias
    /// (both [1 x C]). Variance is the biased estimate.
    pub fn layer_norm_rows(&self, gain: &Self, bias: &Self, eps: S) -> Result<Self> {
        let (r, c) = self.dims2("layer_norm_rows")?;
        if gain.shape() != [1, c] || bias.shape() != [1, c] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm_rows",
                left: self.shape.clone(),
                right: gain.shape.clone(),
            });
        }
        let nc = S::from_f64(c as f64);
        let mut out = vec![S::zero(); r * c];
        for i in 0..r {
            let row = &self.data[i * c..(i + 1) * c];
            let mut mean = S::zero();
            for &x in row {
                mean += x;
            }
            mean /= nc;
            let mut var = S::zero();
            for &x in row {
                let d = x - mean;
                var += d * d;
            }
            var /= nc;
            let inv = (var + eps).sqrt().recip();
            for j in 0..c {
                out[i * c + j] = (row[j] - mean) * inv * gain.data[j] + bias.data[j];
            }
        }
        Ok(Self {
            shape: vec![r, c],
            data: out,
        })
    }

    /// Group normalization over a [C x T] feature map: channels are split
    /// into `groups` contiguous blocks and each block is normalized over all
    /// its channels and time steps, then gain/bias ([1 x C]) are applied
    /// per channel.
    pub fn group_norm(&self, groups: usize, gain: &Self, bias: &Self, eps: S) -> Result<Self> {
        let (c, t) = self.dims2("group_norm")?;
        if groups == 0 || c % groups != 0 {
            return Err(Error::Dimension {
                op: "group_norm",
                expected: format!("channel count divisible by {groups} groups"),
                got: format!("{c} channels"),
            });
        }
        if gain.shape() != [1, c] || bias.shape() != [1, c] {
            return Err(Error::ShapeMismatch {
                op: "group_norm",
                left: self.shape.clone(),
                right: gain.shape.clone(),
            });
        }
        let per = c / groups;
        let nc = S::from_f64((per * t) as f64);
        let mut out = vec![S::zero(); c * t];
        for g in 0..groups {
            let c0 = g * per;
            let mut mean = S::zero();
            for ch in c0..c0 + per {
                for j in 0..t {
                    mean += self.data[ch * t + j];
                }
            }
            mean /= nc;
            let mut var = S::zero();
            for ch in c0..c0 + per {
                for j in 0..t {
                    let d = self.data[ch * t + j] - mean;
                    var += d * d;
                }
            }
            var /= nc;
            let inv = (var + eps).sqrt().recip();
            for ch in c0..c0 + per {
                for j in 0..t {
                    out[ch * t + j] =
                        (self.data[ch * t + j] - mean) * inv * gain.data[ch] + bias.data[ch];
                }
            }
        }
        Ok(Self {
            shape: vec![c, t],
            data: out,
        })
    }

    /// Mean over rows: [R x C] -> [1 x C].
    pub fn mean_rows(&self) -> Result<Self> {
        let (r, c) = self.dims2("mean_rows")?;
        if r == 0 {
            return Err(Error::Empty("mean_rows"));
        }
        let nr = S::from_f64(r as f64);
        let mut out = vec![S::zero(); c];
        for i in 0..r {
            for j in 0..c {
                out[j] += self.data[i * c + j];
            }
        }
        for x in &mut out {
            *x /= nr;
        }
        Ok(Self {
            shape: vec![1, c],
            data: out,
        })
    }

    /// Mean over all elements: [1 x 1].
    pub fn mean_all(&self) -> Result<Self> {
        if self.data.is_empty() {
            return Err(Error::Empty("mean_all"));
        }
        let mut sum = S::zero();
        for &x in &self.data {
            sum += x;
        }
        Ok(Self::scalar(sum / S::from_f64(self.data.len() as f64)))
    }

    /// Copy of the given rows, in the given order (indices may repeat).
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Self> {
        let (n, d) = self.dims2("gather_rows")?;
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= n {
                return Err(Error::Argument(format!(
                    "gather_rows: row {i} out of bounds for {n} rows"
                )));
            }
            data.extend_from_slice(&self.data[i * d..(i + 1) * d]);
        }
        Tensor::new(vec![idx.len(), d], data)
    }

    /// Copy of rows [r0, r1).
    pub fn slice_rows(&self, r0: usize, r1: usize) -> Result<Self> {
        let (r, c) = self.dims2("slice_rows")?;
        if r0 >= r1 || r1 > r {
            return Err(Error::Dimension {
                op: "slice_rows",
                expected: format!("0 <= r0 < r1 <= {r}"),
                got: format!("[{r0}, {r1})"),
            });
        }
        Ok(Self {
            shape: vec![r1 - r0, c],
            data: self.data[r0 * c..r1 * c].to_vec(),
        })
    }

    /// Copy of columns [c0, c1).
    pub fn slice_cols(&self, c0: usize, c1: usize) -> Result<Self> {
        let (r, c) = self.dims2("slice_cols")?;
        if c0 >= c1 || c1 > c {
            return Err(Error::Dimension {
                op: "slice_cols",
                expected: format!("0 <= c0 < c1 <= {c}"),
                got: format!("[{c0}, {c1})"),
            });
        }
        let w = c1 - c0;
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&self.data[i * c + c0..i * c + c1]);
        }
        Ok(Self {
            shape: vec![r, w],
            data,
        })
    }

    pub fn concat_rows(parts: &[&Self]) -> Result<Self> {
        if parts.is_empty() {
            return Err(Error::Empty("concat_rows"));
        }
        let (_, c) = parts[0].dims2("concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let (pr, pc) = p.dims2("concat_rows")?;
            if pc != c {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    left: parts[0].shape.clone(),
                    right: p.shape.clone(),
                });
            }
            rows += pr;
            data.extend_from_slice(&p.data);
        }
        Ok(Self {
            shape: vec![rows, c],
            data,
        })
    }

    pub fn concat_cols(parts: &[&Self]) -> Result<Self> {
        if parts.is_empty() {
            return Err(Error::Empty("concat_cols"));
        }
        let (r, _) = parts[0].dims2("concat_cols")?;
        let mut cols = 0;
        for p in parts {
            let (pr, pc) = p.dims2("concat_cols")?;
            if pr != r {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    left: parts[0].shape.clone(),
                    right: p.shape.clone(),
                });
            }
            cols += pc;
        }
        let mut data = Vec::with_capacity(r * cols);
        for i in 0..r {
            for p in parts {
                let pc = p.shape[1];
                data.extend_from_slice(&p.data[i * pc..(i + 1) * pc]);
            }
        }
        Ok(Self {
            shape: vec![r, cols],
            data,
        })
    }

    /// Frobenius inner product, accumulated in index order.
    pub fn dot(&self, other: &Self) -> Result<S> {
        self.shape_check(other, "dot")?;
        let mut sum = S::zero();
        for (&a, &b) in self.data.iter().zip(&other.data) {
            sum += a * b;
        }
        Ok(sum)
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| T::from_f64(x.to_f64())).collect(),
        }
    }
}

/// 1-D convolution over a [Cin x T] map with "same" padding in the sense of
/// ceil division: the output length is ceil(T / stride). Weights are laid out
/// [Cout x (Cin * K)] with the kernel index contiguous, bias is [1 x Cout].
pub fn conv1d<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: &Tensor<S>,
    kernel: usize,
    stride: usize,
) -> Result<Tensor<S>> {
    let (cin, t) = x.dims2("conv1d")?;
    let (cout, wk) = w.dims2("conv1d")?;
    if kernel == 0 || stride == 0 {
        return Err(Error::Argument(
            "conv1d: kernel and stride must be > 0".into(),
        ));
    }
    if wk != cin * kernel {
        return Err(Error::ShapeMismatch {
            op: "conv1d",
            left: x.shape().to_vec(),
            right: w.shape().to_vec(),
        });
    }
    if b.shape() != [1, cout] {
        return Err(Error::ShapeMismatch {
            op: "conv1d",
            left: w.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    if t == 0 {
        return Err(Error::Empty("conv1d"));
    }
    let t_out = t.div_ceil(stride);
    let span = (t_out - 1) * stride + kernel;
    let pad_left = span.saturating_sub(t) / 2;
    let mut out = vec![S::zero(); cout * t_out];
    for o in 0..cout {
        for j in 0..t_out {
            let mut acc = b.data()[o];
            for ci in 0..cin {
                for kk in 0..kernel {
                    let pos = (j * stride + kk) as isize - pad_left as isize;
                    if pos < 0 || pos >= t as isize {
                        continue;
                    }
                    acc += w.data()[o * wk + ci * kernel + kk] * x.data()[ci * t + pos as usize];
                }
            }
            out[o * t_out + j] = acc;
        }
    }
    Tensor::new(vec![cout, t_out], out)
}

/// GELU with the tanh approximation.
pub fn gelu<S: Scalar>(x: S) -> S {
    let c = S::from_f64(0.7978845608028654); // sqrt(2/pi)
    let a = S::from_f64(0.044715);
    let half = S::from_f64(0.5);
    half * x * (S::one() + (c * (x + a * x * x * x)).tanh())
}

/// Derivative of [`gelu`].
pub fn gelu_prime<S: Scalar>(x: S) -> S {
    let c = S::from_f64(0.7978845608028654);
    let a = S::from_f64(0.044715);
    let half = S::from_f64(0.5);
    let three = S::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let th = u.tanh();
    let sech2 = S::one() - th * th;
    half * (S::one() + th) + half * x * sech2 * c * (S::one() + three * a * x * x)
}

pub fn sigmoid<S: Scalar>(x: S) -> S {
    // Split on sign so exp never overflows.
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t64(rows: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    /// Naive triple-loop matmul, the independent oracle for the production
    /// kernel. Same per-element accumulation order (k ascending), so results
    /// must agree exactly, not just approximately.
    fn matmul_naive(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let n = b.shape()[1];
        let mut out = Tensor::zeros(vec![m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for kk in 0..k {
                    acc += a.at2(i, kk) * b.at2(kk, j);
                }
                out.set2(i, j, acc);
            }
        }
        out
    }

    #[test]
    fn matmul_small_known() {
        let a = t64(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let b = t64(&[vec![5.0, 6.0], vec![7.0, 8.0]]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_matches_naive_bitwise() {
        let mut rng = crate::rng::SeededRng::new(11);
        for &(m, k, n) in &[(1, 1, 1), (3, 5, 2), (8, 13, 7), (16, 16, 16)] {
            let a = Tensor::new(vec![m, k], (0..m * k).map(|_| rng.normal()).collect()).unwrap();
            let b = Tensor::new(vec![k, n], (0..k * n).map(|_| rng.normal()).collect()).unwrap();
            let fast = a.matmul(&b).unwrap();
            let slow = matmul_naive(&a, &b);
            for (x, y) in fast.data().iter().zip(slow.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let a = Tensor::<f64>::zeros(vec![2, 3]);
        let b = Tensor::<f64>::zeros(vec![4, 2]);
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn softmax_known_values() {
        // Reference values computed with 25-digit arithmetic.
        let x = t64(&[vec![1.0, 2.0, 3.0]]);
        let s = x.softmax_rows().unwrap();
        let expect = [
            0.09003057317038045799802214,
            0.24472847105479765247295960,
            0.66524095577482188952901826,
        ];
        for (got, want) in s.data().iter().zip(expect) {
            assert!((got - want).abs() < 1e-15, "{got} vs {want}");
        }
    }

    #[test]
    fn softmax_handles_huge_scores() {
        let x = t64(&[vec![1000.0, 1001.0, 999.0]]);
        let s = x.softmax_rows().unwrap();
        assert!(s.all_finite());
        let sum: f64 = s.data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn l2_normalize_zero_row_is_error() {
        let x = t64(&[vec![1.0, 2.0], vec![0.0, 0.0]]);
        assert!(matches!(
            x.l2_normalize_rows().unwrap_err(),
            Error::ZeroVector
        ));
    }

    #[test]
    fn layer_norm_centers_and_scales() {
        let x = t64(&[vec![1.0, 2.0, 3.0, 4.0]]);
        let g = Tensor::full(vec![1, 4], 1.0);
        let b = Tensor::zeros(vec![1, 4]);
        let y = x.layer_norm_rows(&g, &b, 1e-5).unwrap();
        let mean: f64 = y.data().iter().sum::<f64>() / 4.0;
        let var: f64 = y
            .data()
            .iter()
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn group_norm_normalizes_each_group() {
        let x = t64(&[
            vec![1.0, 2.0, 3.0],
            vec![4.0, 5.0, 6.0],
            vec![10.0, 20.0, 30.0],
            vec![40.0, 50.0, 60.0],
        ]);
        let g = Tensor::full(vec![1, 4], 1.0);
        let b = Tensor::zeros(vec![1, 4]);
        let y = x.group_norm(2, &g, &b, 1e-6).unwrap();
        for block in 0..2 {
            let vals: Vec<f64> = (0..2)
                .flat_map(|c| (0..3).map(move |t| (block * 2 + c, t)))
                .map(|(c, t)| y.at2(c, t))
                .collect();
            let mean: f64 = vals.iter().sum::<f64>() / 6.0;
            assert!(mean.abs() < 1e-10, "group {block} mean {mean}");
        }
    }

    #[test]
    fn conv1d_identity_kernel_with_stride_two() {
        // T=6, k=3, s=2 needs one pad sample, which lands on the right, so
        // the [0 1 0] kernel taps x[1], x[3], x[5].
        let x = t64(&[vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]]);
        let w = t64(&[vec![0.0, 1.0, 0.0]]);
        let b = Tensor::zeros(vec![1, 1]);
        let y = conv1d(&x, &w, &b, 3, 2).unwrap();
        assert_eq!(y.shape(), &[1, 3]);
        assert_eq!(y.data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn conv1d_output_length_is_ceil_t_over_stride() {
        let x = Tensor::<f64>::zeros(vec![6, 1000]);
        let w = Tensor::<f64>::zeros(vec![32, 30]);
        let b = Tensor::<f64>::zeros(vec![1, 32]);
        let y = conv1d(&x, &w, &b, 5, 2).unwrap();
        assert_eq!(y.shape(), &[32, 500]);
        let y2 = conv1d(
            &y,
            &Tensor::zeros(vec![64, 160]),
            &Tensor::zeros(vec![1, 64]),
            5,
            2,
        )
        .unwrap();
        assert_eq!(y2.shape(), &[64, 250]);
        let y3 = conv1d(
            &y2,
            &Tensor::zeros(vec![128, 320]),
            &Tensor::zeros(vec![1, 128]),
            5,
            2,
        )
        .unwrap();
        assert_eq!(y3.shape(), &[128, 125]);
    }

    #[test]
    fn slicing_and_concat_round_trip() {
        let x = t64(&[vec![1.0, 2.0, 3.0, 4.0], vec![5.0, 6.0, 7.0, 8.0]]);
        let left = x.slice_cols(0, 2).unwrap();
        let right = x.slice_cols(2, 4).unwrap();
        let back = Tensor::concat_cols(&[&left, &right]).unwrap();
        assert_eq!(back, x);
        let top = x.slice_rows(0, 1).unwrap();
        let bottom = x.slice_rows(1, 2).unwrap();
        let back = Tensor::concat_rows(&[&top, &bottom]).unwrap();
        assert_eq!(back, x);
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(rows in 1usize..6, cols in 1usize..8, seed in 0u64..1000) {
            let mut rng = crate::rng::SeededRng::new(seed);
            let x = Tensor::new(
                vec![rows, cols],
                (0..rows * cols).map(|_| rng.uniform_in(-30.0, 30.0)).collect(),
            ).unwrap();
            let s = x.softmax_rows().unwrap();
            for i in 0..rows {
                let sum: f64 = (0..cols).map(|j| s.at2(i, j)).sum();
                prop_assert!((sum - 1.0).abs() < 1e-12);
                for j in 0..cols {
                    prop_assert!(s.at2(i, j) >= 0.0);
                }
            }
        }

        #[test]
        fn l2_normalized_rows_have_unit_norm(rows in 1usize..6, cols in 1usize..16, seed in 0u64..1000) {
            let mut rng = crate::rng::SeededRng::new(seed ^ 0x5eed);
            let x = Tensor::new(
                vec![rows, cols],
                (0..rows * cols).map(|_| rng.normal() + 0.01).collect(),
            ).unwrap();
            let y = x.l2_normalize_rows().unwrap();
            for i in 0..rows {
                let n: f64 = (0..cols).map(|j| y.at2(i, j) * y.at2(i, j)).sum::<f64>().sqrt();
                prop_assert!((n - 1.0).abs() < 1e-9, "row {} norm {}", i, n);
            }
        }

        #[test]
        fn transpose_is_involution(rows in 1usize..8, cols in 1usize..8, seed in 0u64..100) {
            let mut rng = crate::rng::SeededRng::new(seed);
            let x = Tensor::new(
                vec![rows, cols],
                (0..rows * cols).map(|_| rng.normal()).collect(),
            ).unwrap();
            prop_assert_eq!(x.transpose().unwrap().transpose().unwrap(), x);
        }
    }
}
