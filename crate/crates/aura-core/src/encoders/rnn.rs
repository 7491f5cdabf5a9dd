//! Convolutional-recurrent encoder: stacked strided 1-D convolutions reduce
//! the time axis, then a GRU consumes the reduced sequence and its final
//! hidden state is projected to the shared embedding space.

use super::ParamBuilder;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use std::collections::BTreeMap;

pub const GROUP_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct RnnConfig {
    /// Output channel width of each convolution block, in order.
    pub conv_channels: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    /// Groups for the group norm after each convolution.
    pub groups: usize,
    /// GRU hidden width.
    pub hidden: usize,
    pub out_dim: usize,
}

impl Default for RnnConfig {
    fn default() -> Self {
        Self {
            conv_channels: vec![32, 64, 128],
            kernel: 5,
            stride: 2,
            groups: 4,
            hidden: 128,
            out_dim: 512,
        }
    }
}

impl RnnConfig {
    pub fn validate(&self, input_channels: usize, input_len: usize) -> Result<()> {
        if self.conv_channels.is_empty() {
            return Err(Error::Config(
                "at least one convolution block required".into(),
            ));
        }
        if self.kernel == 0 || self.stride == 0 || self.hidden == 0 || self.out_dim == 0 {
            return Err(Error::Config("rnn dimensions must be > 0".into()));
        }
        if input_channels == 0 || input_len == 0 {
            return Err(Error::Config("input window must be non-empty".into()));
        }
        for (i, &c) in self.conv_channels.iter().enumerate() {
            if c == 0 || self.groups == 0 || c % self.groups != 0 {
                return Err(Error::Config(format!(
                    "conv block {i} width {c} must be a positive multiple of {} groups",
                    self.groups
                )));
            }
        }
        // Every block must keep at least one time step.
        let mut t = input_len;
        for _ in &self.conv_channels {
            t = t.div_ceil(self.stride);
            if t == 0 {
                return Err(Error::Config(format!(
                    "window length {input_len} collapses to zero under stride {}",
                    self.stride
                )));
            }
        }
        Ok(())
    }

    /// Time steps left after all convolution blocks.
    pub fn reduced_len(&self, input_len: usize) -> usize {
        let mut t = input_len;
        for _ in &self.conv_channels {
            t = t.div_ceil(self.stride);
        }
        t
    }
}

pub(super) fn init_tensors<S: Scalar>(
    cfg: &RnnConfig,
    input_channels: usize,
    rng: &mut SeededRng,
) -> BTreeMap<String, Tensor<S>> {
    let mut b = ParamBuilder::new(rng);
    let mut cin = input_channels;
    for (i, &cout) in cfg.conv_channels.iter().enumerate() {
        b.weight(&format!("conv{i}.w"), vec![cout, cin * cfg.kernel]);
        b.zeros(&format!("conv{i}.b"), vec![1, cout]);
        b.ones(&format!("gn{i}.g"), vec![1, cout]);
        b.zeros(&format!("gn{i}.b"), vec![1, cout]);
        cin = cout;
    }
    let h = cfg.hidden;
    for gate in ["z", "r", "n"] {
        b.weight(&format!("gru.w{gate}"), vec![cin, h]);
        b.weight(&format!("gru.u{gate}"), vec![h, h]);
        b.zeros(&format!("gru.b{gate}"), vec![1, h]);
    }
    b.weight("out.w", vec![h, cfg.out_dim]);
    b.zeros("out.b", vec![1, cfg.out_dim]);
    b.finish()
}

/// Records the forward pass on `tape`, returning the [1 x out_dim] unit
/// embedding of one window.
pub(super) fn build<S: Scalar>(
    tape: &mut Tape<S>,
    vars: &BTreeMap<String, Var>,
    cfg: &RnnConfig,
    window: Var,
) -> Result<Var> {
    let v = |name: &str| -> Result<Var> {
        vars.get(name)
            .copied()
            .ok_or_else(|| Error::Lookup(format!("missing parameter {name}")))
    };
    let eps = S::from_f64(GROUP_NORM_EPS);

    let mut x = window;
    for i in 0..cfg.conv_channels.len() {
        x = tape.conv1d(
            x,
            v(&format!("conv{i}.w"))?,
            v(&format!("conv{i}.b"))?,
            cfg.kernel,
            cfg.stride,
        )?;
        // Checked before the rectifier: relu would clamp a NaN to zero and
        // hide the blow-up from the post-stage check.
        if !tape.value(x).all_finite() {
            return Err(Error::NumericFailure {
                context: "rnn conv stack",
                layer: i,
            });
        }
        x = tape.group_norm(
            x,
            v(&format!("gn{i}.g"))?,
            v(&format!("gn{i}.b"))?,
            cfg.groups,
            eps,
        )?;
        x = tape.relu(x);
        if !tape.value(x).all_finite() {
            return Err(Error::NumericFailure {
                context: "rnn conv stack",
                layer: i,
            });
        }
    }

    // GRU over the reduced sequence, one [1 x C] step at a time.
    let seq = tape.transpose(x)?;
    let (steps, _) = tape.value(seq).dims2("rnn sequence")?;
    let wz = v("gru.wz")?;
    let uz = v("gru.uz")?;
    let bz = v("gru.bz")?;
    let wr = v("gru.wr")?;
    let ur = v("gru.ur")?;
    let br = v("gru.br")?;
    let wn = v("gru.wn")?;
    let un = v("gru.un")?;
    let bn = v("gru.bn")?;
    let mut h = tape.constant(Tensor::zeros(vec![1, cfg.hidden]));
    for t in 0..steps {
        let xt = tape.slice_rows(seq, t, t + 1)?;
        let zx = tape.matmul(xt, wz)?;
        let zh = tape.matmul(h, uz)?;
        let z = tape.add(zx, zh)?;
        let z = tape.add(z, bz)?;
        let z = tape.sigmoid(z);
        let rx = tape.matmul(xt, wr)?;
        let rh = tape.matmul(h, ur)?;
        let r = tape.add(rx, rh)?;
        let r = tape.add(r, br)?;
        let r = tape.sigmoid(r);
        let gated = tape.mul(r, h)?;
        let nx = tape.matmul(xt, wn)?;
        let nh = tape.matmul(gated, un)?;
        let n = tape.add(nx, nh)?;
        let n = tape.add(n, bn)?;
        let n = tape.tanh(n);
        let keep = tape.mul(z, h)?;
        let inv_z = tape.affine(z, S::from_f64(-1.0), S::one());
        let fresh = tape.mul(inv_z, n)?;
        h = tape.add(keep, fresh)?;
    }
    if !tape.value(h).all_finite() {
        return Err(Error::NumericFailure {
            context: "rnn recurrence",
            layer: cfg.conv_channels.len(),
        });
    }

    let z = tape.matmul(h, v("out.w")?)?;
    let z = tape.add_row(z, v("out.b")?)?;
    tape.l2_normalize_rows(z)
}
