//! Frozen anchor embeddings.
//!
//! The anchor side of training is a fixed target space: either a table of
//! precomputed embeddings keyed by record, or a deterministic pseudo text
//! encoder that projects token-count vectors through a seeded random matrix.
//! Anchors never join the autodiff tape, so no gradient can reach them.

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use std::collections::BTreeMap;

/// Stream label separating anchor projection draws from other uses of a seed.
const ANCHOR_STREAM: u64 = 0x616e_6368;

#[derive(Clone, Debug)]
pub enum FrozenAnchor<S> {
    /// Precomputed embeddings (e.g. a video model's outputs) keyed by record.
    Table {
        entries: BTreeMap<String, Tensor<S>>,
        dim: usize,
    },
    /// Seeded random projection of token-count vectors: counts [1 x V] times
    /// a fixed [V x D] matrix, then normalized. Deterministic in (seed, V, D).
    PseudoText { proj: Tensor<S>, seed: u64 },
}

impl<S: Scalar> FrozenAnchor<S> {
    /// Builds a table anchor. Every entry is renormalized onto the sphere;
    /// mixed dimensions or zero vectors are rejected.
    pub fn table(entries: BTreeMap<String, Tensor<S>>) -> Result<Self> {
        let mut dim = None;
        let mut normed = BTreeMap::new();
        for (key, t) in entries {
            let (r, d) = t.dims2("FrozenAnchor::table")?;
            if r != 1 {
                return Err(Error::Dimension {
                    op: "FrozenAnchor::table",
                    expected: "[1 x D] entry".into(),
                    got: format!("{:?} for key {key}", t.shape()),
                });
            }
            match dim {
                None => dim = Some(d),
                Some(prev) if prev != d => {
                    return Err(Error::Mismatch(format!(
                        "anchor entry {key} has dim {d}, table has {prev}"
                    )))
                }
                _ => {}
            }
            normed.insert(key, t.l2_normalize_rows()?);
        }
        let dim = dim.ok_or(Error::Empty("FrozenAnchor::table"))?;
        Ok(Self::Table {
            entries: normed,
            dim,
        })
    }

    /// Builds the pseudo text anchor for a vocabulary of `vocab_size` words.
    pub fn pseudo_text(vocab_size: usize, dim: usize, seed: u64) -> Result<Self> {
        if vocab_size == 0 || dim == 0 {
            return Err(Error::Config(
                "pseudo anchor needs vocab_size > 0 and dim > 0".into(),
            ));
        }
        let mut rng = SeededRng::substream(seed, ANCHOR_STREAM);
        let data: Vec<S> = (0..vocab_size * dim)
            .map(|_| S::from_f64(rng.normal()))
            .collect();
        Ok(Self::PseudoText {
            proj: Tensor::new(vec![vocab_size, dim], data)?,
            seed,
        })
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Table { dim, .. } => *dim,
            Self::PseudoText { proj, .. } => proj.shape()[1],
        }
    }

    /// Embeds a token sequence (pseudo mode only). An empty sequence has no
    /// direction to normalize and is an error.
    pub fn embed_tokens(&self, tokens: &[u32]) -> Result<Tensor<S>> {
        let Self::PseudoText { proj, .. } = self else {
            return Err(Error::Argument(
                "table anchor cannot embed tokens; look up by key".into(),
            ));
        };
        if tokens.is_empty() {
            return Err(Error::ZeroVector);
        }
        let v = proj.shape()[0];
        let mut counts = Tensor::zeros(vec![1, v]);
        for &t in tokens {
            let t = t as usize;
            if t >= v {
                return Err(Error::Lookup(format!(
                    "token id {t} outside vocabulary of {v}"
                )));
            }
            let cur = counts.at2(0, t);
            counts.set2(0, t, cur + S::one());
        }
        counts.matmul(proj)?.l2_normalize_rows()
    }

    /// Looks up a precomputed embedding (table mode only).
    pub fn embed_key(&self, key: &str) -> Result<Tensor<S>> {
        let Self::Table { entries, .. } = self else {
            return Err(Error::Argument(
                "pseudo anchor has no keyed entries; embed tokens".into(),
            ));
        };
        entries
            .get(key)
            .cloned()
            .ok_or_else(|| Error::Lookup(format!("no anchor entry for key {key}")))
    }

    pub fn seed(&self) -> Option<u64> {
        match self {
            Self::Table { .. } => None,
            Self::PseudoText { seed, .. } => Some(*seed),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pseudo_anchor_is_deterministic_and_unit_norm() {
        let a: FrozenAnchor<f64> = FrozenAnchor::pseudo_text(50, 16, 7).unwrap();
        let b: FrozenAnchor<f64> = FrozenAnchor::pseudo_text(50, 16, 7).unwrap();
        let e1 = a.embed_tokens(&[3, 9, 9, 41]).unwrap();
        let e2 = b.embed_tokens(&[3, 9, 9, 41]).unwrap();
        assert_eq!(e1, e2);
        let norm: f64 = e1.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
        let c: FrozenAnchor<f64> = FrozenAnchor::pseudo_text(50, 16, 8).unwrap();
        assert_ne!(e1, c.embed_tokens(&[3, 9, 9, 41]).unwrap());
    }

    #[test]
    fn token_multiplicity_matters() {
        let a: FrozenAnchor<f64> = FrozenAnchor::pseudo_text(20, 8, 1).unwrap();
        let once = a.embed_tokens(&[2, 5]).unwrap();
        let twice = a.embed_tokens(&[2, 2, 5]).unwrap();
        assert_ne!(once, twice);
        // Order does not matter, only counts.
        assert_eq!(a.embed_tokens(&[5, 2]).unwrap(), once);
    }

    #[test]
    fn empty_and_out_of_range_tokens_fail() {
        let a: FrozenAnchor<f64> = FrozenAnchor::pseudo_text(10, 4, 0).unwrap();
        assert!(matches!(
            a.embed_tokens(&[]).unwrap_err(),
            Error::ZeroVector
        ));
        assert!(matches!(
            a.embed_tokens(&[10]).unwrap_err(),
            Error::Lookup(_)
        ));
    }

    #[test]
    fn table_renormalizes_and_rejects_mixed_dims() {
        let mut entries: BTreeMap<String, Tensor<f64>> = BTreeMap::new();
        entries.insert(
            "a_0".to_string(),
            Tensor::from_rows(&[vec![3.0, 4.0]]).unwrap(),
        );
        let anchor = FrozenAnchor::table(entries.clone()).unwrap();
        let e = anchor.embed_key("a_0").unwrap();
        assert!((e.at2(0, 0) - 0.6).abs() < 1e-12);
        assert!((e.at2(0, 1) - 0.8).abs() < 1e-12);
        assert!(matches!(
            anchor.embed_key("missing").unwrap_err(),
            Error::Lookup(_)
        ));

        entries.insert(
            "b_0".to_string(),
            Tensor::from_rows(&[vec![1.0, 0.0, 0.0]]).unwrap(),
        );
        assert!(FrozenAnchor::table(entries).is_err());
    }
}
