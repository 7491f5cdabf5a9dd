//! Bridges dataset directories to the tensors the trainers and evaluators
//! consume: window extraction and standardization, frozen anchor targets,
//! and label indexing.

use std::collections::BTreeMap;
use std::path::Path;

use aura_core::dataset::{Dataset, Item, Modality, Split};
use aura_core::encoders::FrozenAnchor;
use aura_core::signal::{compute_channel_stats, ChannelStats, MOCAP_COORDS, MOCAP_JOINTS};
use aura_core::{Error, Result, Tensor64};

/// The two trainable window modalities. `video_emb` and `text` are anchor
/// sources, not encoder inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WindowKind {
    Imu,
    Mocap,
}

impl WindowKind {
    pub fn as_str(self) -> &'static str {
        match self {
            WindowKind::Imu => "imu",
            WindowKind::Mocap => "mocap",
        }
    }

    /// Channel count of the encoder input: raw IMU channels, or flattened
    /// joint coordinates for mocap.
    pub fn channels(self) -> usize {
        match self {
            WindowKind::Imu => aura_core::signal::IMU_CHANNELS,
            WindowKind::Mocap => MOCAP_JOINTS * MOCAP_COORDS,
        }
    }

    /// Identifies which modality a checkpoint encodes by its input width.
    pub fn from_channels(c: usize) -> Result<Self> {
        if c == WindowKind::Imu.channels() {
            Ok(WindowKind::Imu)
        } else if c == WindowKind::Mocap.channels() {
            Ok(WindowKind::Mocap)
        } else {
            Err(Error::Mismatch(format!(
                "checkpoint expects {c} input channels, which is neither imu nor mocap"
            )))
        }
    }
}

fn missing(item: &Item, what: Modality) -> Error {
    Error::Lookup(format!(
        "record {}+{}ms has no {} blob",
        item.source_id,
        item.offset_ms,
        what.as_str()
    ))
}

fn split_items<'d>(ds: &'d Dataset, split: Split) -> Result<Vec<&'d Item>> {
    let items: Vec<&Item> = ds.items.iter().filter(|r| r.split == split).collect();
    if items.is_empty() {
        return Err(Error::Config(format!(
            "split {} has no records",
            split.as_str()
        )));
    }
    Ok(items)
}

/// Raw (unstandardized) windows of one kind, in canonical item order.
pub fn raw_windows(ds: &Dataset, split: Split, kind: WindowKind) -> Result<Vec<Tensor64>> {
    split_items(ds, split)?
        .into_iter()
        .map(|item| match kind {
            WindowKind::Imu => item
                .imu
                .as_ref()
                .map(|t| t.cast::<f64>())
                .ok_or_else(|| missing(item, Modality::Imu)),
            WindowKind::Mocap => {
                let t = item
                    .mocap
                    .as_ref()
                    .ok_or_else(|| missing(item, Modality::Mocap))?;
                t.cast::<f64>()
                    .reshape(vec![MOCAP_JOINTS * MOCAP_COORDS, t.shape()[2]])
            }
        })
        .collect()
}

/// Train-split channel statistics for one modality.
pub fn train_stats(ds: &Dataset, kind: WindowKind) -> Result<ChannelStats<f64>> {
    let train = raw_windows(ds, Split::Train, kind)?;
    compute_channel_stats(&train)
}

pub fn standardize_all(stats: &ChannelStats<f64>, windows: &[Tensor64]) -> Result<Vec<Tensor64>> {
    windows.iter().map(|w| stats.standardize(w)).collect()
}

/// How the frozen target side of training and retrieval is built.
#[derive(Clone, Debug)]
pub enum AnchorSpec {
    /// Seeded pseudo text over the dataset vocabulary.
    PseudoText { dim: usize, seed: u64 },
    /// Precomputed per-record video embeddings from the dataset.
    Video,
    /// Embeddings of a frozen encoder checkpoint (stage-2 targets).
    Encoder(std::path::PathBuf),
}

impl AnchorSpec {
    pub fn name(&self) -> &'static str {
        match self {
            AnchorSpec::PseudoText { .. } => "pseudo_text",
            AnchorSpec::Video => "video",
            AnchorSpec::Encoder(_) => "encoder",
        }
    }
}

/// Frozen anchor targets for one split, one row per record in canonical
/// order, unit-normalized.
pub fn anchor_targets(ds: &Dataset, split: Split, spec: &AnchorSpec) -> Result<Tensor64> {
    let items = split_items(ds, split)?;
    match spec {
        AnchorSpec::PseudoText { dim, seed } => {
            let anchor: FrozenAnchor<f64> = FrozenAnchor::pseudo_text(ds.vocab.len(), *dim, *seed)?;
            let rows: Vec<Tensor64> = items
                .iter()
                .map(|item| {
                    let tokens = item
                        .tokens
                        .as_ref()
                        .ok_or_else(|| missing(item, Modality::Text))?;
                    anchor.embed_tokens(tokens)
                })
                .collect::<Result<_>>()?;
            let refs: Vec<&Tensor64> = rows.iter().collect();
            Tensor64::concat_rows(&refs)
        }
        AnchorSpec::Video => {
            let rows: Vec<Tensor64> = items
                .iter()
                .map(|item| {
                    let v = item
                        .video_emb
                        .as_ref()
                        .ok_or_else(|| missing(item, Modality::VideoEmb))?;
                    v.cast::<f64>().l2_normalize_rows()
                })
                .collect::<Result<_>>()?;
            let refs: Vec<&Tensor64> = rows.iter().collect();
            Tensor64::concat_rows(&refs)
        }
        AnchorSpec::Encoder(path) => {
            let bundle = aura_core::dataset::load_bundle::<f64>(path)?;
            let kind = WindowKind::from_channels(bundle.params.input_channels)?;
            let windows = raw_windows(ds, split, kind)?;
            let rows: Vec<Tensor64> = windows
                .iter()
                .map(|w| bundle.encode_raw(w))
                .collect::<Result<_>>()?;
            let refs: Vec<&Tensor64> = rows.iter().collect();
            Tensor64::concat_rows(&refs)
        }
    }
}

/// Sorted class list and the truth index of every record in the split.
pub fn split_labels(ds: &Dataset, split: Split) -> Result<(Vec<String>, Vec<usize>)> {
    let classes = ds.label_set();
    if classes.is_empty() {
        return Err(Error::Config("dataset carries no labels".into()));
    }
    let items = split_items(ds, split)?;
    let truths = items
        .iter()
        .map(|item| {
            let label = item
                .label
                .as_ref()
                .ok_or_else(|| Error::Lookup(format!("record {} has no label", item.source_id)))?;
            classes
                .iter()
                .position(|c| c == label)
                .ok_or_else(|| Error::Lookup(format!("label {label:?} not in class list")))
        })
        .collect::<Result<Vec<usize>>>()?;
    Ok((classes, truths))
}

/// Per-class anchor embeddings for zero-shot classification: each label's
/// words tokenized with the frozen vocabulary and embedded by the pseudo
/// text anchor.
pub fn label_embeddings(
    ds: &Dataset,
    classes: &[String],
    dim: usize,
    seed: u64,
) -> Result<BTreeMap<String, Tensor64>> {
    let anchor: FrozenAnchor<f64> = FrozenAnchor::pseudo_text(ds.vocab.len(), dim, seed)?;
    let mut out = BTreeMap::new();
    for label in classes {
        let tokens = ds.vocab.tokenize(label);
        if tokens.is_empty() {
            return Err(Error::Lookup(format!(
                "label {label:?} shares no words with the dataset vocabulary"
            )));
        }
        out.insert(label.clone(), anchor.embed_tokens(&tokens)?);
    }
    Ok(out)
}

/// Source ids of a split in canonical order, for qualitative listings.
pub fn split_source_ids(ds: &Dataset, split: Split) -> Vec<String> {
    ds.items
        .iter()
        .filter(|r| r.split == split)
        .map(|r| format!("{}+{}ms", r.source_id, r.offset_ms))
        .collect()
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    aura_core::dataset::read_dataset(path)
}
