//! Patch transformer over multichannel signal windows.
//!
//! The window [C x T] is cut into T / patch_len non-overlapping patches,
//! each flattened and linearly embedded, summed with a learned positional
//! table, and pushed through pre-norm blocks (layer norm, multi-head
//! self-attention, residual; layer norm, GELU MLP, residual). Token means
//! are projected to the output dimension and normalized onto the sphere.

use super::ParamBuilder;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use std::collections::BTreeMap;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerConfig {
    /// Samples per patch; must divide the window length.
    pub patch_len: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub mlp_dim: usize,
    /// Dropout rate on both residual branches during training.
    pub dropout: f64,
    /// Embedding dimension of the shared space.
    pub out_dim: usize,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            patch_len: 20,
            model_dim: 128,
            heads: 4,
            layers: 4,
            mlp_dim: 256,
            dropout: 0.1,
            out_dim: 512,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self, input_channels: usize, input_len: usize) -> Result<()> {
        if self.patch_len == 0 || input_len == 0 || input_len % self.patch_len != 0 {
            return Err(Error::Config(format!(
                "patch_len {} must divide the window length {input_len}",
                self.patch_len
            )));
        }
        if self.heads == 0 || self.model_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} must be a multiple of heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.model_dim == 0 || self.mlp_dim == 0 || self.out_dim == 0 || self.layers == 0 {
            return Err(Error::Config("transformer dimensions must be > 0".into()));
        }
        if input_channels == 0 {
            return Err(Error::Config("input_channels must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    pub fn patches(&self, input_len: usize) -> usize {
        input_len / self.patch_len
    }
}

/// Allocates and initializes every tensor of the architecture. Weights are
/// normal(0, 0.02) like the positional table; norm gains start at 1 and all
/// biases at 0. Draws happen in a fixed construction order, so one seed
/// pins every parameter.
pub(super) fn init_tensors<S: Scalar>(
    cfg: &TransformerConfig,
    input_channels: usize,
    input_len: usize,
    rng: &mut SeededRng,
) -> BTreeMap<String, Tensor<S>> {
    let d = cfg.model_dim;
    let p = cfg.patches(input_len);
    let mut b = ParamBuilder::new(rng);
    b.weight("patch.w", vec![input_channels * cfg.patch_len, d]);
    b.zeros("patch.b", vec![1, d]);
    b.weight("pos", vec![p, d]);
    for l in 0..cfg.layers {
        let pre = format!("layer{l}");
        b.ones(&format!("{pre}.ln1.g"), vec![1, d]);
        b.zeros(&format!("{pre}.ln1.b"), vec![1, d]);
        for gate in ["q", "k", "v", "o"] {
            b.weight(&format!("{pre}.attn.w{gate}"), vec![d, d]);
            b.zeros(&format!("{pre}.attn.b{gate}"), vec![1, d]);
        }
        b.ones(&format!("{pre}.ln2.g"), vec![1, d]);
        b.zeros(&format!("{pre}.ln2.b"), vec![1, d]);
        b.weight(&format!("{pre}.mlp.w1"), vec![d, cfg.mlp_dim]);
        b.zeros(&format!("{pre}.mlp.b1"), vec![1, cfg.mlp_dim]);
        b.weight(&format!("{pre}.mlp.w2"), vec![cfg.mlp_dim, d]);
        b.zeros(&format!("{pre}.mlp.b2"), vec![1, d]);
    }
    b.weight("out.w", vec![d, cfg.out_dim]);
    b.zeros("out.b", vec![1, cfg.out_dim]);
    b.finish()
}

/// Records the forward pass on `tape` and returns the [1 x out_dim] unit
/// embedding. `dropout_p` should be the configured rate in training and 0
/// at inference; with rate 0 no randomness is drawn.
pub(super) fn build<S: Scalar>(
    tape: &mut Tape<S>,
    vars: &BTreeMap<String, Var>,
    cfg: &TransformerConfig,
    window: Var,
    dropout_p: f64,
    rng: &mut SeededRng,
) -> Result<Var> {
    let v = |name: &str| -> Result<Var> {
        vars.get(name)
            .copied()
            .ok_or_else(|| Error::Lookup(format!("missing parameter {name}")))
    };
    let dk = cfg.model_dim / cfg.heads;
    let scale = S::from_f64(1.0 / (dk as f64).sqrt());
    let eps = S::from_f64(LAYER_NORM_EPS);

    let patches = tape.patchify(window, cfg.patch_len)?;
    let mut x = tape.matmul(patches, v("patch.w")?)?;
    x = tape.add_row(x, v("patch.b")?)?;
    x = tape.add(x, v("pos")?)?;

    for l in 0..cfg.layers {
        let pre = format!("layer{l}");
        let h = tape.layer_norm(
            x,
            v(&format!("{pre}.ln1.g"))?,
            v(&format!("{pre}.ln1.b"))?,
            eps,
        )?;
        let q = tape.matmul(h, v(&format!("{pre}.attn.wq"))?)?;
        let q = tape.add_row(q, v(&format!("{pre}.attn.bq"))?)?;
        let k = tape.matmul(h, v(&format!("{pre}.attn.wk"))?)?;
        let k = tape.add_row(k, v(&format!("{pre}.attn.bk"))?)?;
        let val = tape.matmul(h, v(&format!("{pre}.attn.wv"))?)?;
        let val = tape.add_row(val, v(&format!("{pre}.attn.bv"))?)?;
        let mut heads = Vec::with_capacity(cfg.heads);
        for hd in 0..cfg.heads {
            let c0 = hd * dk;
            let c1 = c0 + dk;
            let qh = tape.slice_cols(q, c0, c1)?;
            let kh = tape.slice_cols(k, c0, c1)?;
            let vh = tape.slice_cols(val, c0, c1)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.affine(scores, scale, S::zero());
            let attn = tape.softmax_rows(scores)?;
            heads.push(tape.matmul(attn, vh)?);
        }
        let o = tape.concat_cols(heads)?;
        let o = tape.matmul(o, v(&format!("{pre}.attn.wo"))?)?;
        let o = tape.add_row(o, v(&format!("{pre}.attn.bo"))?)?;
        let o = tape.dropout(o, dropout_p, rng)?;
        x = tape.add(x, o)?;

        let h2 = tape.layer_norm(
            x,
            v(&format!("{pre}.ln2.g"))?,
            v(&format!("{pre}.ln2.b"))?,
            eps,
        )?;
        let m = tape.matmul(h2, v(&format!("{pre}.mlp.w1"))?)?;
        let m = tape.add_row(m, v(&format!("{pre}.mlp.b1"))?)?;
        let m = tape.gelu(m);
        let m = tape.matmul(m, v(&format!("{pre}.mlp.w2"))?)?;
        let m = tape.add_row(m, v(&format!("{pre}.mlp.b2"))?)?;
        let m = tape.dropout(m, dropout_p, rng)?;
        x = tape.add(x, m)?;

        if !tape.value(x).all_finite() {
            return Err(Error::NumericFailure {
                context: "transformer",
                layer: l,
            });
        }
    }

    let pooled = tape.mean_rows(x)?;
    let z = tape.matmul(pooled, v("out.w")?)?;
    let z = tape.add_row(z, v("out.b")?)?;
    tape.l2_normalize_rows(z)
}
