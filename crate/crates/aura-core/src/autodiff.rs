//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles together
//! with the forward value, then [`Tape::backward`] walks the recording once
//! in reverse and accumulates gradients. Gradients are only materialized for
//! nodes reachable from a parameter, and accumulation happens in a fixed
//! order (reverse node index), so repeated runs of an identical graph give
//! bit-identical gradients.
//!
//! The op set is exactly what the encoders and losses need; each op's
//! backward rule is written out by hand below.

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::{conv1d, gelu, gelu_prime, sigmoid, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<S> {
    Leaf,
    Matmul {
        a: Var,
        b: Var,
    },
    Transpose {
        a: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddRow {
        a: Var,
        row: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Affine {
        a: Var,
        mul: S,
    },
    SoftmaxRows {
        a: Var,
    },
    LayerNorm {
        a: Var,
        gain: Var,
        bias: Var,
        eps: S,
    },
    GroupNorm {
        a: Var,
        gain: Var,
        bias: Var,
        groups: usize,
        eps: S,
    },
    Gelu {
        a: Var,
    },
    Relu {
        a: Var,
    },
    Sigmoid {
        a: Var,
    },
    Tanh {
        a: Var,
    },
    MeanRows {
        a: Var,
    },
    MeanAll {
        a: Var,
    },
    Log {
        a: Var,
    },
    L2NormalizeRows {
        a: Var,
    },
    SliceRows {
        a: Var,
        r0: usize,
    },
    SliceCols {
        a: Var,
        c0: usize,
    },
    ConcatRows {
        parts: Vec<Var>,
    },
    ConcatCols {
        parts: Vec<Var>,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        kernel: usize,
        stride: usize,
    },
    Dropout {
        a: Var,
        mask: Tensor<S>,
    },
    Patchify {
        a: Var,
        patch_len: usize,
    },
    InfoNce {
        i: Var,
        m: Var,
        temp: S,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
    },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires: bool,
}

pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Grads<S> {
    slots: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Grads<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.slots.get(v.0).and_then(|s| s.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.slots.get_mut(v.0).and_then(|s| s.take())
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input that no gradient flows into.
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Trainable leaf; its gradient is retained by `backward`.
    pub fn param(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(v, Op::Matmul { a, b }, req))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).transpose()?;
        let req = self.requires(a);
        Ok(self.push(v, Op::Transpose { a }, req))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(v, Op::Add { a, b }, req))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let v = self.value(a).add_row(self.value(row))?;
        let req = self.requires(a) || self.requires(row);
        Ok(self.push(v, Op::AddRow { a, row }, req))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).mul(self.value(b))?;
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(v, Op::Mul { a, b }, req))
    }

    /// Elementwise `x * mul + add` with scalar coefficients.
    pub fn affine(&mut self, a: Var, mul: S, add: S) -> Var {
        let v = self.value(a).map(|x| x * mul + add);
        let req = self.requires(a);
        self.push(v, Op::Affine { a, mul }, req)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).softmax_rows()?;
        let req = self.requires(a);
        Ok(self.push(v, Op::SoftmaxRows { a }, req))
    }

    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var, eps: S) -> Result<Var> {
        let v = self
            .value(a)
            .layer_norm_rows(self.value(gain), self.value(bias), eps)?;
        let req = self.requires(a) || self.requires(gain) || self.requires(bias);
        Ok(self.push(v, Op::LayerNorm { a, gain, bias, eps }, req))
    }

    pub fn group_norm(
        &mut self,
        a: Var,
        gain: Var,
        bias: Var,
        groups: usize,
        eps: S,
    ) -> Result<Var> {
        let v = self
            .value(a)
            .group_norm(groups, self.value(gain), self.value(bias), eps)?;
        let req = self.requires(a) || self.requires(gain) || self.requires(bias);
        Ok(self.push(
            v,
            Op::GroupNorm {
                a,
                gain,
                bias,
                groups,
                eps,
            },
            req,
        ))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu);
        let req = self.requires(a);
        self.push(v, Op::Gelu { a }, req)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self
            .value(a)
            .map(|x| if x > S::zero() { x } else { S::zero() });
        let req = self.requires(a);
        self.push(v, Op::Relu { a }, req)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        let req = self.requires(a);
        self.push(v, Op::Sigmoid { a }, req)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.tanh());
        let req = self.requires(a);
        self.push(v, Op::Tanh { a }, req)
    }

    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).mean_rows()?;
        let req = self.requires(a);
        Ok(self.push(v, Op::MeanRows { a }, req))
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).mean_all()?;
        let req = self.requires(a);
        Ok(self.push(v, Op::MeanAll { a }, req))
    }

    /// Natural log, elementwise. The caller is responsible for positivity.
    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.ln());
        let req = self.requires(a);
        self.push(v, Op::Log { a }, req)
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).l2_normalize_rows()?;
        let req = self.requires(a);
        Ok(self.push(v, Op::L2NormalizeRows { a }, req))
    }

    pub fn slice_rows(&mut self, a: Var, r0: usize, r1: usize) -> Result<Var> {
        let v = self.value(a).slice_rows(r0, r1)?;
        let req = self.requires(a);
        Ok(self.push(v, Op::SliceRows { a, r0 }, req))
    }

    pub fn slice_cols(&mut self, a: Var, c0: usize, c1: usize) -> Result<Var> {
        let v = self.value(a).slice_cols(c0, c1)?;
        let req = self.requires(a);
        Ok(self.push(v, Op::SliceCols { a, c0 }, req))
    }

    pub fn concat_rows(&mut self, parts: Vec<Var>) -> Result<Var> {
        let tensors: Vec<&Tensor<S>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_rows(&tensors)?;
        let req = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(v, Op::ConcatRows { parts }, req))
    }

    pub fn concat_cols(&mut self, parts: Vec<Var>) -> Result<Var> {
        let tensors: Vec<&Tensor<S>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_cols(&tensors)?;
        let req = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(v, Op::ConcatCols { parts }, req))
    }

    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, kernel: usize, stride: usize) -> Result<Var> {
        let v = conv1d(self.value(x), self.value(w), self.value(b), kernel, stride)?;
        let req = self.requires(x) || self.requires(w) || self.requires(b);
        Ok(self.push(
            v,
            Op::Conv1d {
                x,
                w,
                b,
                kernel,
                stride,
            },
            req,
        ))
    }

    /// Inverted dropout: keeps each element with probability `1 - p` and
    /// scales survivors by `1 / (1 - p)` so the expectation is unchanged.
    /// `p == 0` is an identity and records nothing.
    pub fn dropout(&mut self, a: Var, p: f64, rng: &mut SeededRng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Argument(format!("dropout rate {p} outside [0, 1)")));
        }
        if p == 0.0 {
            return Ok(a);
        }
        let scale = S::from_f64(1.0 / (1.0 - p));
        let x = self.value(a);
        let mask_data: Vec<S> = (0..x.len())
            .map(|_| if rng.uniform() < p { S::zero() } else { scale })
            .collect();
        let mask = Tensor::new(x.shape().to_vec(), mask_data)?;
        let v = x.mul(&mask)?;
        let req = self.requires(a);
        Ok(self.push(v, Op::Dropout { a, mask }, req))
    }

    /// Splits a [C x T] window into T / patch_len non-overlapping patches and
    /// flattens each to a row: output [P x (C * patch_len)], channel-major
    /// within a row. Pure data movement; the backward pass is the inverse
    /// scatter.
    pub fn patchify(&mut self, a: Var, patch_len: usize) -> Result<Var> {
        let (c, t) = self.value(a).dims2("patchify")?;
        if patch_len == 0 || t % patch_len != 0 {
            return Err(Error::Dimension {
                op: "patchify",
                expected: format!("time length divisible by patch_len {patch_len}"),
                got: format!("{t}"),
            });
        }
        let p = t / patch_len;
        let mut data = vec![S::zero(); p * c * patch_len];
        let x = self.value(a).data();
        for pi in 0..p {
            for ci in 0..c {
                for l in 0..patch_len {
                    data[pi * c * patch_len + ci * patch_len + l] = x[ci * t + pi * patch_len + l];
                }
            }
        }
        let v = Tensor::new(vec![p, c * patch_len], data)?;
        let req = self.requires(a);
        Ok(self.push(v, Op::Patchify { a, patch_len }, req))
    }

    /// Symmetric InfoNCE over row-aligned embedding matrices `i` and `m`
    /// (both [B x D], rows assumed unit norm). Produces a [1 x 1] loss:
    /// the mean of the two directional cross-entropies that score the true
    /// pair against the other batch entries, with logits scaled by
    /// `1 / temp`.
    pub fn info_nce(&mut self, i: Var, m: Var, temp: S) -> Result<Var> {
        if temp <= S::zero() {
            return Err(Error::Argument(format!("temperature {temp} must be > 0")));
        }
        let iv = self.value(i);
        let mv = self.value(m);
        if iv.shape() != mv.shape() {
            return Err(Error::ShapeMismatch {
                op: "info_nce",
                left: iv.shape().to_vec(),
                right: mv.shape().to_vec(),
            });
        }
        let (b, _) = iv.dims2("info_nce")?;
        if b == 0 {
            return Err(Error::Empty("info_nce"));
        }
        let sim = iv.matmul(&mv.transpose()?)?.scale(temp.recip());
        let lse_rows = sim.logsumexp_rows()?;
        let lse_cols = sim.transpose()?.logsumexp_rows()?;
        let nb = S::from_f64(b as f64);
        let mut loss = S::zero();
        for k in 0..b {
            let diag = sim.at2(k, k);
            loss += (lse_rows[k] - diag) + (lse_cols[k] - diag);
        }
        loss /= nb + nb;
        let req = self.requires(i) || self.requires(m);
        Ok(self.push(Tensor::scalar(loss), Op::InfoNce { i, m, temp }, req))
    }

    /// Mean softmax cross-entropy of integer labels against logit rows.
    pub fn cross_entropy(&mut self, logits: Var, labels: Vec<usize>) -> Result<Var> {
        let lv = self.value(logits);
        let (b, k) = lv.dims2("cross_entropy")?;
        if labels.len() != b {
            return Err(Error::Dimension {
                op: "cross_entropy",
                expected: format!("{b} labels"),
                got: format!("{}", labels.len()),
            });
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::Argument(format!(
                "cross_entropy: label {bad} out of range for {k} classes"
            )));
        }
        let lse = lv.logsumexp_rows()?;
        let mut loss = S::zero();
        for (row, &y) in labels.iter().enumerate() {
            loss += lse[row] - lv.at2(row, y);
        }
        loss /= S::from_f64(b as f64);
        let req = self.requires(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, labels },
            req,
        ))
    }

    /// Reverse pass from a [1 x 1] objective. Returns per-node gradients for
    /// every node on a path from a parameter to the objective.
    pub fn backward(&self, loss: Var) -> Result<Grads<S>> {
        let shape = self.nodes[loss.0].value.shape();
        if shape != [1, 1] {
            return Err(Error::NonScalarObjective {
                shape: shape.to_vec(),
            });
        }
        let mut slots: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires {
            slots[loss.0] = Some(Tensor::scalar(S::one()));
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = slots[idx].clone() else {
                continue;
            };
            self.distribute(idx, &g, &mut slots)?;
        }
        Ok(Grads { slots })
    }

    fn acc(&self, slots: &mut [Option<Tensor<S>>], v: Var, delta: Tensor<S>) -> Result<()> {
        if !self.nodes[v.0].requires {
            return Ok(());
        }
        match &mut slots[v.0] {
            Some(t) => t.add_assign(&delta)?,
            slot @ None => *slot = Some(delta),
        }
        Ok(())
    }

    fn distribute(&self, idx: usize, g: &Tensor<S>, slots: &mut [Option<Tensor<S>>]) -> Result<()> {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                if self.requires(*a) {
                    self.acc(slots, *a, g.matmul(&bv.transpose()?)?)?;
                }
                if self.requires(*b) {
                    self.acc(slots, *b, av.transpose()?.matmul(g)?)?;
                }
            }
            Op::Transpose { a } => {
                self.acc(slots, *a, g.transpose()?)?;
            }
            Op::Add { a, b } => {
                self.acc(slots, *a, g.clone())?;
                self.acc(slots, *b, g.clone())?;
            }
            Op::AddRow { a, row } => {
                self.acc(slots, *a, g.clone())?;
                if self.requires(*row) {
                    let (r, c) = g.dims2("add_row backward")?;
                    let mut sum = vec![S::zero(); c];
                    for i in 0..r {
                        for j in 0..c {
                            sum[j] += g.at2(i, j);
                        }
                    }
                    self.acc(slots, *row, Tensor::new(vec![1, c], sum)?)?;
                }
            }
            Op::Mul { a, b } => {
                if self.requires(*a) {
                    self.acc(slots, *a, g.mul(self.value(*b))?)?;
                }
                if self.requires(*b) {
                    self.acc(slots, *b, g.mul(self.value(*a))?)?;
                }
            }
            Op::Affine { a, mul } => {
                self.acc(slots, *a, g.scale(*mul))?;
            }
            Op::SoftmaxRows { a } => {
                // dx_j = y_j * (g_j - sum_k g_k y_k), per row.
                let y = &self.nodes[idx].value;
                let (r, c) = y.dims2("softmax backward")?;
                let mut dx = vec![S::zero(); r * c];
                for i in 0..r {
                    let mut dot = S::zero();
                    for j in 0..c {
                        dot += g.at2(i, j) * y.at2(i, j);
                    }
                    for j in 0..c {
                        dx[i * c + j] = y.at2(i, j) * (g.at2(i, j) - dot);
                    }
                }
                self.acc(slots, *a, Tensor::new(vec![r, c], dx)?)?;
            }
            Op::LayerNorm { a, gain, bias, eps } => {
                let x = self.value(*a);
                let gv = self.value(*gain);
                let (r, c) = x.dims2("layer_norm backward")?;
                let nc = S::from_f64(c as f64);
                let mut dx = vec![S::zero(); r * c];
                let mut dgain = vec![S::zero(); c];
                let mut dbias = vec![S::zero(); c];
                for i in 0..r {
                    let mut mean = S::zero();
                    for j in 0..c {
                        mean += x.at2(i, j);
                    }
                    mean /= nc;
                    let mut var = S::zero();
                    for j in 0..c {
                        let d = x.at2(i, j) - mean;
                        var += d * d;
                    }
                    var /= nc;
                    let inv = (var + *eps).sqrt().recip();
                    // xh = normalized input; dxh = upstream grad through gain.
                    let mut m1 = S::zero();
                    let mut m2 = S::zero();
                    let mut xh = vec![S::zero(); c];
                    let mut dxh = vec![S::zero(); c];
                    for j in 0..c {
                        xh[j] = (x.at2(i, j) - mean) * inv;
                        dxh[j] = g.at2(i, j) * gv.data()[j];
                        m1 += dxh[j];
                        m2 += dxh[j] * xh[j];
                        dgain[j] += g.at2(i, j) * xh[j];
                        dbias[j] += g.at2(i, j);
                    }
                    m1 /= nc;
                    m2 /= nc;
                    for j in 0..c {
                        dx[i * c + j] = (dxh[j] - m1 - xh[j] * m2) * inv;
                    }
                }
                self.acc(slots, *a, Tensor::new(vec![r, c], dx)?)?;
                if self.requires(*gain) {
                    self.acc(slots, *gain, Tensor::new(vec![1, c], dgain)?)?;
                }
                if self.requires(*bias) {
                    self.acc(slots, *bias, Tensor::new(vec![1, c], dbias)?)?;
                }
            }
            Op::GroupNorm {
                a,
                gain,
                bias,
                groups,
                eps,
            } => {
                let x = self.value(*a);
                let gv = self.value(*gain);
                let (c, t) = x.dims2("group_norm backward")?;
                let per = c / groups;
                let n = S::from_f64((per * t) as f64);
                let mut dx = vec![S::zero(); c * t];
                let mut dgain = vec![S::zero(); c];
                let mut dbias = vec![S::zero(); c];
                for grp in 0..*groups {
                    let c0 = grp * per;
                    let mut mean = S::zero();
                    for ch in c0..c0 + per {
                        for j in 0..t {
                            mean += x.at2(ch, j);
                        }
                    }
                    mean /= n;
                    let mut var = S::zero();
                    for ch in c0..c0 + per {
                        for j in 0..t {
                            let d = x.at2(ch, j) - mean;
                            var += d * d;
                        }
                    }
                    var /= n;
                    let inv = (var + *eps).sqrt().recip();
                    let mut m1 = S::zero();
                    let mut m2 = S::zero();
                    for ch in c0..c0 + per {
                        for j in 0..t {
                            let xh = (x.at2(ch, j) - mean) * inv;
                            let dxh = g.at2(ch, j) * gv.data()[ch];
                            m1 += dxh;
                            m2 += dxh * xh;
                            dgain[ch] += g.at2(ch, j) * xh;
                            dbias[ch] += g.at2(ch, j);
                        }
                    }
                    m1 /= n;
                    m2 /= n;
                    for ch in c0..c0 + per {
                        for j in 0..t {
                            let xh = (x.at2(ch, j) - mean) * inv;
                            let dxh = g.at2(ch, j) * gv.data()[ch];
                            dx[ch * t + j] = (dxh - m1 - xh * m2) * inv;
                        }
                    }
                }
                self.acc(slots, *a, Tensor::new(vec![c, t], dx)?)?;
                if self.requires(*gain) {
                    self.acc(slots, *gain, Tensor::new(vec![1, c], dgain)?)?;
                }
                if self.requires(*bias) {
                    self.acc(slots, *bias, Tensor::new(vec![1, c], dbias)?)?;
                }
            }
            Op::Gelu { a } => {
                let x = self.value(*a);
                let data: Vec<S> = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &gg)| gg * gelu_prime(x))
                    .collect();
                self.acc(slots, *a, Tensor::new(x.shape().to_vec(), data)?)?;
            }
            Op::Relu { a } => {
                let x = self.value(*a);
                let data: Vec<S> = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &gg)| if x > S::zero() { gg } else { S::zero() })
                    .collect();
                self.acc(slots, *a, Tensor::new(x.shape().to_vec(), data)?)?;
            }
            Op::Sigmoid { a } => {
                let y = &self.nodes[idx].value;
                let data: Vec<S> = y
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&y, &gg)| gg * y * (S::one() - y))
                    .collect();
                self.acc(slots, *a, Tensor::new(y.shape().to_vec(), data)?)?;
            }
            Op::Tanh { a } => {
                let y = &self.nodes[idx].value;
                let data: Vec<S> = y
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&y, &gg)| gg * (S::one() - y * y))
                    .collect();
                self.acc(slots, *a, Tensor::new(y.shape().to_vec(), data)?)?;
            }
            Op::MeanRows { a } => {
                let (r, c) = self.value(*a).dims2("mean_rows backward")?;
                let inv = S::from_f64(1.0 / r as f64);
                let mut dx = vec![S::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = g.at2(0, j) * inv;
                    }
                }
                self.acc(slots, *a, Tensor::new(vec![r, c], dx)?)?;
            }
            Op::MeanAll { a } => {
                let x = self.value(*a);
                let inv = S::from_f64(1.0 / x.len() as f64);
                let gg = g.item()? * inv;
                self.acc(slots, *a, Tensor::full(x.shape().to_vec(), gg))?;
            }
            Op::Log { a } => {
                let x = self.value(*a);
                let data: Vec<S> = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &gg)| gg / x)
                    .collect();
                self.acc(slots, *a, Tensor::new(x.shape().to_vec(), data)?)?;
            }
            Op::L2NormalizeRows { a } => {
                // dx = (g - (g . y) y) / ||x||, per row.
                let x = self.value(*a);
                let y = &self.nodes[idx].value;
                let (r, c) = x.dims2("l2_normalize backward")?;
                let mut dx = vec![S::zero(); r * c];
                for i in 0..r {
                    let mut sq = S::zero();
                    for j in 0..c {
                        sq += x.at2(i, j) * x.at2(i, j);
                    }
                    let inv_norm = sq.sqrt().recip();
                    let mut dot = S::zero();
                    for j in 0..c {
                        dot += g.at2(i, j) * y.at2(i, j);
                    }
                    for j in 0..c {
                        dx[i * c + j] = (g.at2(i, j) - dot * y.at2(i, j)) * inv_norm;
                    }
                }
                self.acc(slots, *a, Tensor::new(vec![r, c], dx)?)?;
            }
            Op::SliceRows { a, r0 } => {
                let mut dx = self.value(*a).zeros_like();
                let (gr, c) = g.dims2("slice_rows backward")?;
                for i in 0..gr {
                    for j in 0..c {
                        dx.set2(r0 + i, j, g.at2(i, j));
                    }
                }
                self.acc(slots, *a, dx)?;
            }
            Op::SliceCols { a, c0 } => {
                let mut dx = self.value(*a).zeros_like();
                let (r, gc) = g.dims2("slice_cols backward")?;
                for i in 0..r {
                    for j in 0..gc {
                        dx.set2(i, c0 + j, g.at2(i, j));
                    }
                }
                self.acc(slots, *a, dx)?;
            }
            Op::ConcatRows { parts } => {
                let mut r0 = 0;
                for &p in parts {
                    let (pr, _) = self.value(p).dims2("concat_rows backward")?;
                    if self.requires(p) {
                        self.acc(slots, p, g.slice_rows(r0, r0 + pr)?)?;
                    }
                    r0 += pr;
                }
            }
            Op::ConcatCols { parts } => {
                let mut c0 = 0;
                for &p in parts {
                    let (_, pc) = self.value(p).dims2("concat_cols backward")?;
                    if self.requires(p) {
                        self.acc(slots, p, g.slice_cols(c0, c0 + pc)?)?;
                    }
                    c0 += pc;
                }
            }
            Op::Conv1d {
                x,
                w,
                b,
                kernel,
                stride,
            } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (cin, t) = xv.dims2("conv1d backward")?;
                let (cout, wk) = wv.dims2("conv1d backward")?;
                let (_, t_out) = g.dims2("conv1d backward")?;
                let span = (t_out - 1) * stride + kernel;
                let pad_left = span.saturating_sub(t) / 2;
                if self.requires(*b) {
                    let mut db = vec![S::zero(); cout];
                    for o in 0..cout {
                        for j in 0..t_out {
                            db[o] += g.at2(o, j);
                        }
                    }
                    self.acc(slots, *b, Tensor::new(vec![1, cout], db)?)?;
                }
                if self.requires(*w) {
                    let mut dw = vec![S::zero(); cout * wk];
                    for o in 0..cout {
                        for j in 0..t_out {
                            let gg = g.at2(o, j);
                            for ci in 0..cin {
                                for kk in 0..*kernel {
                                    let pos = (j * stride + kk) as isize - pad_left as isize;
                                    if pos < 0 || pos >= t as isize {
                                        continue;
                                    }
                                    dw[o * wk + ci * kernel + kk] += gg * xv.at2(ci, pos as usize);
                                }
                            }
                        }
                    }
                    self.acc(slots, *w, Tensor::new(vec![cout, wk], dw)?)?;
                }
                if self.requires(*x) {
                    let mut dx = vec![S::zero(); cin * t];
                    for o in 0..cout {
                        for j in 0..t_out {
                            let gg = g.at2(o, j);
                            for ci in 0..cin {
                                for kk in 0..*kernel {
                                    let pos = (j * stride + kk) as isize - pad_left as isize;
                                    if pos < 0 || pos >= t as isize {
                                        continue;
                                    }
                                    dx[ci * t + pos as usize] += gg * wv.at2(o, ci * kernel + kk);
                                }
                            }
                        }
                    }
                    self.acc(slots, *x, Tensor::new(vec![cin, t], dx)?)?;
                }
            }
            Op::Dropout { a, mask } => {
                self.acc(slots, *a, g.mul(mask)?)?;
            }
            Op::Patchify { a, patch_len } => {
                let (c, t) = self.value(*a).dims2("patchify backward")?;
                let p = t / patch_len;
                let mut dx = vec![S::zero(); c * t];
                for pi in 0..p {
                    for ci in 0..c {
                        for l in 0..*patch_len {
                            dx[ci * t + pi * patch_len + l] +=
                                g.data()[pi * c * patch_len + ci * patch_len + l];
                        }
                    }
                }
                self.acc(slots, *a, Tensor::new(vec![c, t], dx)?)?;
            }
            Op::InfoNce { i, m, temp } => {
                // dS = (P + Q - 2 Id) / 2B with P row-softmax and Q
                // column-softmax of the scaled similarity matrix, then
                // dI = dS M / temp, dM = dS^T I / temp.
                let iv = self.value(*i);
                let mv = self.value(*m);
                let (b, _) = iv.dims2("info_nce backward")?;
                let sim = iv.matmul(&mv.transpose()?)?.scale(temp.recip());
                let p = sim.softmax_rows()?;
                let q = sim.transpose()?.softmax_rows()?.transpose()?;
                let gg = g.item()?;
                let coef = gg / S::from_f64(2.0 * b as f64);
                let mut ds = p.add(&q)?;
                for k in 0..b {
                    let v = ds.at2(k, k) - S::from_f64(2.0);
                    ds.set2(k, k, v);
                }
                let ds = ds.scale(coef / *temp);
                if self.requires(*i) {
                    self.acc(slots, *i, ds.matmul(mv)?)?;
                }
                if self.requires(*m) {
                    self.acc(slots, *m, ds.transpose()?.matmul(iv)?)?;
                }
            }
            Op::CrossEntropy { logits, labels } => {
                let lv = self.value(*logits);
                let (b, k) = lv.dims2("cross_entropy backward")?;
                let mut dl = lv.softmax_rows()?;
                let coef = g.item()? / S::from_f64(b as f64);
                for (row, &y) in labels.iter().enumerate() {
                    let v = dl.at2(row, y) - S::one();
                    dl.set2(row, y, v);
                }
                let dl = dl.scale(coef);
                let _ = k;
                self.acc(slots, *logits, dl)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use std::collections::BTreeMap;

    type P = BTreeMap<String, Tensor<f64>>;

    fn randn(shape: Vec<usize>, rng: &mut SeededRng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.normal()).collect()).unwrap()
    }

    type Builder = fn(&mut Tape<f64>, &BTreeMap<String, Var>) -> crate::Result<Var>;

    fn build_loss(
        params: &P,
        builder: Builder,
    ) -> crate::Result<(Tape<f64>, BTreeMap<String, Var>, Var)> {
        let mut tape = Tape::new();
        let mut vars = BTreeMap::new();
        for (name, t) in params {
            vars.insert(name.clone(), tape.param(t.clone()));
        }
        let loss = builder(&mut tape, &vars)?;
        Ok((tape, vars, loss))
    }

    /// Runs the analytic backward pass and a central-difference sweep over
    /// the same loss builder and asserts they agree.
    fn fd_case(params: P, builder: Builder, tol: f64) {
        let (tape, vars, loss) = build_loss(&params, builder).unwrap();
        let mut grads = tape.backward(loss).unwrap();
        let mut analytic = P::new();
        for (name, var) in &vars {
            if let Some(g) = grads.take(*var) {
                analytic.insert(name.clone(), g);
            }
        }
        let numeric = gradcheck::central_diff(
            &params,
            |p| {
                let (tape, _, loss) = build_loss(p, builder)?;
                tape.value(loss).item()
            },
            1e-5,
        )
        .unwrap();
        let report = gradcheck::compare(&analytic, &numeric).unwrap();
        assert!(
            report.max_rel_err < tol,
            "max rel err {} at {}[{}]",
            report.max_rel_err,
            report.worst_param,
            report.worst_index
        );
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let err = tape.backward(w).unwrap_err();
        assert!(matches!(err, Error::NonScalarObjective { .. }));
    }

    #[test]
    fn fd_linear_gelu_chain() {
        let mut rng = SeededRng::new(42);
        let mut params = P::new();
        params.insert("w1".into(), randn(vec![3, 5], &mut rng));
        params.insert("b1".into(), randn(vec![1, 5], &mut rng));
        params.insert("w2".into(), randn(vec![5, 2], &mut rng));
        params.insert("x".into(), randn(vec![4, 3], &mut rng));
        fd_case(
            params,
            |tape, vars| {
                let h = tape.matmul(vars["x"], vars["w1"])?;
                let h = tape.add_row(h, vars["b1"])?;
                let h = tape.gelu(h);
                let y = tape.matmul(h, vars["w2"])?;
                tape.mean_all(y)
            },
            1e-6,
        );
    }

    #[test]
    fn fd_layer_norm() {
        let mut rng = SeededRng::new(7);
        let mut params = P::new();
        params.insert("x".into(), randn(vec![3, 6], &mut rng));
        params.insert("g".into(), randn(vec![1, 6], &mut rng));
        params.insert("b".into(), randn(vec![1, 6], &mut rng));
        fd_case(
            params,
            |tape, vars| {
                let y = tape.layer_norm(vars["x"], vars["g"], vars["b"], 1e-5)?;
                let y = tape.tanh(y);
                tape.mean_all(y)
            },
            1e-5,
        );
    }

    #[test]
    fn fd_conv_group_norm_relu() {
        let mut rng = SeededRng::new(8);
        let mut params = P::new();
        params.insert("x".into(), randn(vec![4, 11], &mut rng));
        params.insert("w".into(), randn(vec![6, 12], &mut rng));
        params.insert("b".into(), randn(vec![1, 6], &mut rng));
        params.insert("gn_g".into(), randn(vec![1, 6], &mut rng));
        params.insert("gn_b".into(), randn(vec![1, 6], &mut rng));
        // ReLU kinks make a handful of elements sensitive to the FD step,
        // hence the looser tolerance.
        fd_case(
            params,
            |tape, vars| {
                let y = tape.conv1d(vars["x"], vars["w"], vars["b"], 3, 2)?;
                let y = tape.group_norm(y, vars["gn_g"], vars["gn_b"], 2, 1e-5)?;
                let y = tape.relu(y);
                tape.mean_all(y)
            },
            1e-4,
        );
    }

    #[test]
    fn fd_softmax_log_path() {
        let mut rng = SeededRng::new(9);
        let mut params = P::new();
        params.insert("x".into(), randn(vec![3, 4], &mut rng));
        fd_case(
            params,
            |tape, vars| {
                let s = tape.softmax_rows(vars["x"])?;
                let l = tape.log(s);
                tape.mean_all(l)
            },
            1e-6,
        );
    }

    #[test]
    fn fd_info_nce_with_normalization() {
        let mut rng = SeededRng::new(10);
        let mut params = P::new();
        params.insert("i".into(), randn(vec![4, 6], &mut rng));
        params.insert("m".into(), randn(vec![4, 6], &mut rng));
        fd_case(
            params,
            |tape, vars| {
                let i = tape.l2_normalize_rows(vars["i"])?;
                let m = tape.l2_normalize_rows(vars["m"])?;
                tape.info_nce(i, m, 0.5)
            },
            1e-6,
        );
    }

    #[test]
    fn fd_cross_entropy() {
        let mut rng = SeededRng::new(11);
        let mut params = P::new();
        params.insert("x".into(), randn(vec![5, 3], &mut rng));
        params.insert("w".into(), randn(vec![3, 4], &mut rng));
        fd_case(
            params,
            |tape, vars| {
                let logits = tape.matmul(vars["x"], vars["w"])?;
                tape.cross_entropy(logits, vec![0, 3, 1, 2, 0])
            },
            1e-6,
        );
    }

    #[test]
    fn fd_gate_math() {
        // The sigmoid/tanh/mul/affine combination used by recurrent gates.
        let mut rng = SeededRng::new(12);
        let mut params = P::new();
        params.insert("x".into(), randn(vec![1, 4], &mut rng));
        params.insert("h".into(), randn(vec![1, 4], &mut rng));
        params.insert("wz".into(), randn(vec![4, 4], &mut rng));
        params.insert("uz".into(), randn(vec![4, 4], &mut rng));
        params.insert("wn".into(), randn(vec![4, 4], &mut rng));
        fd_case(
            params,
            |tape, vars| {
                let zx = tape.matmul(vars["x"], vars["wz"])?;
                let zh = tape.matmul(vars["h"], vars["uz"])?;
                let z = tape.add(zx, zh)?;
                let z = tape.sigmoid(z);
                let n = tape.matmul(vars["x"], vars["wn"])?;
                let n = tape.tanh(n);
                let keep = tape.mul(z, vars["h"])?;
                let flip = tape.affine(z, -1.0, 1.0);
                let new = tape.mul(flip, n)?;
                let h = tape.add(keep, new)?;
                tape.mean_all(h)
            },
            1e-6,
        );
    }

    #[test]
    fn fd_patchify_slice_concat() {
        let mut rng = SeededRng::new(13);
        let mut params = P::new();
        params.insert("x".into(), randn(vec![2, 8], &mut rng));
        params.insert("w".into(), randn(vec![4, 3], &mut rng));
        fd_case(
            params,
            |tape, vars| {
                let p = tape.patchify(vars["x"], 2)?; // [4 x 4]
                let left = tape.slice_cols(p, 0, 2)?;
                let right = tape.slice_cols(p, 2, 4)?;
                let sum = tape.add(left, right)?; // [4 x 2]
                let top = tape.slice_rows(sum, 0, 2)?;
                let bottom = tape.slice_rows(sum, 2, 4)?;
                let wide = tape.concat_cols(vec![top, bottom])?; // [2 x 4]
                let tall = tape.concat_rows(vec![wide, wide])?; // [4 x 4]
                let y = tape.matmul(tall, vars["w"])?;
                tape.mean_all(y)
            },
            1e-6,
        );
    }

    #[test]
    fn fd_mean_rows_and_transpose() {
        let mut rng = SeededRng::new(14);
        let mut params = P::new();
        params.insert("x".into(), randn(vec![5, 3], &mut rng));
        fd_case(
            params,
            |tape, vars| {
                let t = tape.transpose(vars["x"])?;
                let m = tape.mean_rows(t)?; // [1 x 5]
                let s = tape.sigmoid(m);
                tape.mean_all(s)
            },
            1e-6,
        );
    }

    #[test]
    fn dropout_backward_is_mask() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::full(vec![4, 4], 1.0f64));
        let mut rng = SeededRng::new(5);
        let y = tape.dropout(x, 0.5, &mut rng).unwrap();
        let l = tape.mean_all(y).unwrap();
        let grads = tape.backward(l).unwrap();
        let gx = grads.get(x).unwrap();
        let yv = tape.value(y);
        // Gradient is zero exactly where the activation was dropped and
        // 2/16 where kept (scale 2 from p = 0.5, 1/16 from the mean).
        for (gy, vy) in gx.data().iter().zip(yv.data()) {
            if *vy == 0.0 {
                assert_eq!(*gy, 0.0);
            } else {
                assert!((gy - 2.0 / 16.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dropout_zero_rate_is_identity() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::full(vec![2, 2], 3.0f64));
        let mut rng = SeededRng::new(5);
        let y = tape.dropout(x, 0.0, &mut rng).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(vec![2, 2], 1.0f64));
        let w = tape.param(Tensor::full(vec![2, 2], 2.0f64));
        let y = tape.matmul(x, w).unwrap();
        let l = tape.mean_all(y).unwrap();
        let grads = tape.backward(l).unwrap();
        assert!(grads.get(x).is_none());
        assert!(grads.get(w).is_some());
    }

    #[test]
    fn info_nce_closed_form_identity_diag() {
        // With I = M = identity-like unit rows and temp 1 the gradient of the
        // symmetric loss with respect to I must match (P + Q - 2 Id) M / 2B.
        let i: Tensor<f64> = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let m = i.clone();
        let mut tape = Tape::new();
        let iv = tape.param(i.clone());
        let mv = tape.constant(m.clone());
        let l = tape.info_nce(iv, mv, 1.0).unwrap();
        let grads = tape.backward(l).unwrap();
        let gi = grads.get(iv).unwrap();
        let sim = i.matmul(&m.transpose().unwrap()).unwrap();
        let p = sim.softmax_rows().unwrap();
        let q = sim
            .transpose()
            .unwrap()
            .softmax_rows()
            .unwrap()
            .transpose()
            .unwrap();
        let mut ds = p.add(&q).unwrap();
        for k in 0..2 {
            let v = ds.at2(k, k) - 2.0;
            ds.set2(k, k, v);
        }
        let expect = ds.scale(1.0 / 4.0).matmul(&m).unwrap();
        for (a, b) in gi.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}
