//! Symmetric InfoNCE over row-aligned unit embeddings.
//!
//! Both modalities of a batch are stacked as [B x D] matrices with matching
//! rows forming the positive pairs. The loss scores each diagonal entry of
//! the similarity matrix against its row (and, for the symmetric form, its
//! column) with a softmax cross-entropy. Log-sum-exp is evaluated with max
//! subtraction so large inverse temperatures stay finite.
//!
//! [`loss_grad`] is the hand-derived closed form; the tape op in
//! [`crate::autodiff`] computes the same quantity through its own path and
//! the two are checked against each other in tests.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// How far a row norm may drift from 1 before the batch is rejected.
const UNIT_NORM_TOL: f64 = 1e-6;

/// Checks that `t` is a nonempty row matrix of unit-norm embeddings and
/// returns (rows, dim).
pub fn validate_rows<S: Scalar>(t: &Tensor<S>) -> Result<(usize, usize)> {
    let (b, d) = t.dims2("embedding rows")?;
    if b == 0 || d == 0 {
        return Err(Error::Empty("embedding rows"));
    }
    for r in 0..b {
        let mut sq = S::zero();
        for c in 0..d {
            sq += t.at2(r, c) * t.at2(r, c);
        }
        if (sq.sqrt().to_f64() - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::Argument(format!(
                "embedding row {r} has norm {}, expected 1",
                sq.sqrt()
            )));
        }
    }
    Ok((b, d))
}

fn validate_pair<S: Scalar>(i: &Tensor<S>, m: &Tensor<S>) -> Result<usize> {
    if i.shape() != m.shape() {
        return Err(Error::ShapeMismatch {
            op: "contrastive pair",
            left: i.shape().to_vec(),
            right: m.shape().to_vec(),
        });
    }
    let (b, _) = validate_rows(i)?;
    validate_rows(m)?;
    Ok(b)
}

/// Pairwise similarity matrix S with S[i][k] = <I_i, M_k> / temp. Inputs
/// must be row-aligned unit embeddings of identical shape.
pub fn similarity_matrix<S: Scalar>(i: &Tensor<S>, m: &Tensor<S>, temp: S) -> Result<Tensor<S>> {
    validate_pair(i, m)?;
    if temp <= S::zero() {
        return Err(Error::Argument(format!("temperature {temp} must be > 0")));
    }
    Ok(i.matmul(&m.transpose()?)?.scale(temp.recip()))
}

fn directional_from_sim<S: Scalar>(sim: &Tensor<S>) -> Result<S> {
    let (b, _) = sim.dims2("directional loss")?;
    let lse = sim.logsumexp_rows()?;
    let mut loss = S::zero();
    for k in 0..b {
        loss += lse[k] - sim.at2(k, k);
    }
    Ok(loss / S::from_f64(b as f64))
}

/// One direction of the loss: each row's diagonal entry scored against the
/// whole row. This is the "first modality retrieves second" direction.
pub fn loss_directional<S: Scalar>(i: &Tensor<S>, m: &Tensor<S>, temp: S) -> Result<S> {
    directional_from_sim(&similarity_matrix(i, m, temp)?)
}

/// Symmetric loss: the mean of the two directional losses. Swapping the
/// arguments gives bit-identical results.
pub fn loss_symmetric<S: Scalar>(i: &Tensor<S>, m: &Tensor<S>, temp: S) -> Result<S> {
    let sim = similarity_matrix(i, m, temp)?;
    let fwd = directional_from_sim(&sim)?;
    let bwd = directional_from_sim(&sim.transpose()?)?;
    Ok((fwd + bwd) / S::from_f64(2.0))
}

/// Closed-form gradient of [`loss_symmetric`] with respect to both embedding
/// matrices: with P the row softmax and Q the column softmax of S,
/// dL/dS = (P + Q - 2 Id) / 2B, then the chain rule through S = I M^T / temp.
pub fn loss_grad<S: Scalar>(
    i: &Tensor<S>,
    m: &Tensor<S>,
    temp: S,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let b = validate_pair(i, m)?;
    if temp <= S::zero() {
        return Err(Error::Argument(format!("temperature {temp} must be > 0")));
    }
    let sim = i.matmul(&m.transpose()?)?.scale(temp.recip());
    let p = sim.softmax_rows()?;
    let q = sim.transpose()?.softmax_rows()?.transpose()?;
    let mut ds = p.add(&q)?;
    for k in 0..b {
        let v = ds.at2(k, k) - S::from_f64(2.0);
        ds.set2(k, k, v);
    }
    let ds = ds.scale((S::from_f64(2.0 * b as f64) * temp).recip());
    let di = ds.matmul(m)?;
    let dm = ds.transpose()?.matmul(i)?;
    Ok((di, dm))
}
