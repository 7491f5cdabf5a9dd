//! Dataset assembly, on-disk formats, and corpus generators.
//!
//! A dataset directory holds `manifest.txt` (a version line followed by one
//! record per line), a `vocab.txt` when any record carries text, and one
//! tensor blob per record modality under `blobs/`. Records are written in
//! canonical order so reading a directory and writing it back reproduces the
//! same bytes, and every reader validates shapes against what the manifest
//! promises.

pub mod format;
pub mod pamap2;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::rng::SeededRng;
use crate::signal::{
    Vocab, IMU_CHANNELS, IMU_WINDOW_SAMPLES, MAX_TEXT_TOKENS, MOCAP_COORDS, MOCAP_JOINTS,
    MOCAP_WINDOW_FRAMES,
};
use crate::tensor::Tensor;
use crate::{Error, Result};

pub use format::{load_bundle, read_checkpoint, save_bundle, write_checkpoint, Checkpoint};
pub use pamap2::{ingest_pamap2, Pamap2Config};

const MANIFEST_VERSION_LINE: &str = "aura-dataset v1";

/// Embedding width of the synthetic stand-in for a frozen video model.
pub const SYNTH_VIDEO_DIM: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Argument(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Modality {
    Imu,
    Mocap,
    Text,
    VideoEmb,
}

impl Modality {
    pub const ALL: [Modality; 4] = [
        Modality::Imu,
        Modality::Mocap,
        Modality::Text,
        Modality::VideoEmb,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Imu => "imu",
            Modality::Mocap => "mocap",
            Modality::Text => "text",
            Modality::VideoEmb => "video_emb",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "imu" => Ok(Modality::Imu),
            "mocap" => Ok(Modality::Mocap),
            "text" => Ok(Modality::Text),
            "video_emb" => Ok(Modality::VideoEmb),
            other => Err(Error::Argument(format!("unknown modality {other:?}"))),
        }
    }
}

/// One windowed multimodal sample: its manifest row plus the decoded blobs.
/// The option fields mirror the `modalities` set exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Item {
    pub source_id: String,
    pub offset_ms: u64,
    pub split: Split,
    pub label: Option<String>,
    pub imu: Option<Tensor<f32>>,
    pub mocap: Option<Tensor<f32>>,
    pub tokens: Option<Vec<u32>>,
    pub video_emb: Option<Tensor<f32>>,
}

impl Item {
    pub fn modalities(&self) -> BTreeSet<Modality> {
        let mut set = BTreeSet::new();
        if self.imu.is_some() {
            set.insert(Modality::Imu);
        }
        if self.mocap.is_some() {
            set.insert(Modality::Mocap);
        }
        if self.tokens.is_some() {
            set.insert(Modality::Text);
        }
        if self.video_emb.is_some() {
            set.insert(Modality::VideoEmb);
        }
        set
    }

    fn blob_stem(&self) -> String {
        format!("{}_{}", self.source_id, self.offset_ms)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub items: Vec<Item>,
    pub vocab: Vocab,
}

impl Dataset {
    /// Indices of one split, in canonical item order.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.items.len())
            .filter(|&i| self.items[i].split == split)
            .collect()
    }

    pub fn split_len(&self, split: Split) -> usize {
        self.split_indices(split).len()
    }

    /// Sorted set of labels present anywhere in the dataset.
    pub fn label_set(&self) -> Vec<String> {
        let set: BTreeSet<&String> = self.items.iter().filter_map(|r| r.label.as_ref()).collect();
        set.into_iter().cloned().collect()
    }

    /// Sorts items into canonical order and checks every invariant the
    /// formats promise: key uniqueness per split, split disjointness by
    /// source, declared shapes, token range, and a consistent video
    /// embedding width.
    pub fn finalize(&mut self) -> Result<()> {
        self.items
            .sort_by(|a, b| (&a.source_id, a.offset_ms).cmp(&(&b.source_id, b.offset_ms)));
        let mut keys: BTreeSet<(&str, u64, Split)> = BTreeSet::new();
        let mut source_split: BTreeMap<&str, Split> = BTreeMap::new();
        let mut video_dim = None;
        for item in &self.items {
            validate_source_id(&item.source_id)?;
            if let Some(label) = &item.label {
                if label.is_empty() || label.contains(['\t', '\n', '=']) {
                    return Err(Error::Argument(format!("label {label:?} cannot be stored")));
                }
            }
            if !keys.insert((&item.source_id, item.offset_ms, item.split)) {
                return Err(Error::Argument(format!(
                    "duplicate record {}+{}ms in split {}",
                    item.source_id,
                    item.offset_ms,
                    item.split.as_str()
                )));
            }
            match source_split.get(item.source_id.as_str()) {
                Some(&s) if s != item.split => {
                    return Err(Error::Argument(format!(
                        "source {} spans splits {} and {}",
                        item.source_id,
                        s.as_str(),
                        item.split.as_str()
                    )));
                }
                _ => {
                    source_split.insert(&item.source_id, item.split);
                }
            }
            if item.modalities().is_empty() {
                return Err(Error::Argument(format!(
                    "record {} carries no modalities",
                    item.source_id
                )));
            }
            if let Some(imu) = &item.imu {
                expect_shape(
                    &item.source_id,
                    "imu",
                    imu.shape(),
                    &[IMU_CHANNELS, IMU_WINDOW_SAMPLES],
                )?;
            }
            if let Some(mocap) = &item.mocap {
                expect_shape(
                    &item.source_id,
                    "mocap",
                    mocap.shape(),
                    &[MOCAP_JOINTS, MOCAP_COORDS, MOCAP_WINDOW_FRAMES],
                )?;
            }
            if let Some(tokens) = &item.tokens {
                if tokens.is_empty() || tokens.len() > MAX_TEXT_TOKENS {
                    return Err(Error::Argument(format!(
                        "record {} has {} tokens, expected 1..={MAX_TEXT_TOKENS}",
                        item.source_id,
                        tokens.len()
                    )));
                }
                if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.vocab.len()) {
                    return Err(Error::Argument(format!(
                        "record {} token {bad} outside vocabulary of {}",
                        item.source_id,
                        self.vocab.len()
                    )));
                }
            }
            if let Some(v) = &item.video_emb {
                let (r, d) = v.dims2("video_emb")?;
                if r != 1 || d == 0 {
                    return Err(Error::Dimension {
                        op: "video_emb",
                        expected: "[1 x D]".into(),
                        got: format!("{:?}", v.shape()),
                    });
                }
                match video_dim {
                    None => video_dim = Some(d),
                    Some(prev) if prev != d => {
                        return Err(Error::Argument(format!(
                            "video embeddings mix widths {prev} and {d}"
                        )));
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }
}

fn validate_source_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '.');
    if ok {
        Ok(())
    } else {
        Err(Error::Argument(format!(
            "source id {id:?} must be nonempty ASCII alphanumeric plus '-' and '.'"
        )))
    }
}

fn expect_shape(id: &str, what: &str, got: &[usize], want: &[usize]) -> Result<()> {
    if got == want {
        Ok(())
    } else {
        Err(Error::Dimension {
            op: "dataset",
            expected: format!("{what} shape {want:?}"),
            got: format!("{got:?} on record {id}"),
        })
    }
}

fn render_manifest(ds: &Dataset) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{MANIFEST_VERSION_LINE}");
    for item in &ds.items {
        let _ = write!(
            out,
            "source_id={}\toffset_ms={}\tsplit={}",
            item.source_id,
            item.offset_ms,
            item.split.as_str()
        );
        if let Some(label) = &item.label {
            let _ = write!(out, "\tlabel={label}");
        }
        let mods: Vec<&str> = item.modalities().iter().map(|m| m.as_str()).collect();
        let _ = writeln!(out, "\tmodalities={}", mods.join(","));
    }
    out
}

struct ManifestRow {
    source_id: String,
    offset_ms: u64,
    split: Split,
    label: Option<String>,
    modalities: BTreeSet<Modality>,
}

fn parse_manifest(text: &str, path: &Path) -> Result<Vec<ManifestRow>> {
    let fail = |reason: String| Error::format(path.display().to_string(), reason);
    let mut lines = text.lines();
    match lines.next() {
        Some(MANIFEST_VERSION_LINE) => {}
        Some(other) => return Err(fail(format!("unsupported manifest version line {other:?}"))),
        None => return Err(fail("empty manifest".into())),
    }
    let mut rows = Vec::new();
    for (ln, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut source_id = None;
        let mut offset_ms = None;
        let mut split = None;
        let mut label = None;
        let mut modalities = None;
        for field in line.split('\t') {
            let (key, value) = field.split_once('=').ok_or_else(|| {
                fail(format!("line {}: field {field:?} is not key=value", ln + 2))
            })?;
            let duplicate = match key {
                "source_id" => source_id.replace(value.to_string()).is_some(),
                "offset_ms" => {
                    let v = value
                        .parse::<u64>()
                        .map_err(|_| fail(format!("line {}: bad offset {value:?}", ln + 2)))?;
                    offset_ms.replace(v).is_some()
                }
                "split" => split
                    .replace(
                        Split::parse(value).map_err(|e| fail(format!("line {}: {e}", ln + 2)))?,
                    )
                    .is_some(),
                "label" => label.replace(value.to_string()).is_some(),
                "modalities" => {
                    let mut set = BTreeSet::new();
                    for m in value.split(',') {
                        let m = Modality::parse(m)
                            .map_err(|e| fail(format!("line {}: {e}", ln + 2)))?;
                        if !set.insert(m) {
                            return Err(fail(format!(
                                "line {}: modality {} repeated",
                                ln + 2,
                                m.as_str()
                            )));
                        }
                    }
                    modalities.replace(set).is_some()
                }
                other => return Err(fail(format!("line {}: unknown field {other:?}", ln + 2))),
            };
            if duplicate {
                return Err(fail(format!("line {}: field {key:?} repeated", ln + 2)));
            }
        }
        rows.push(ManifestRow {
            source_id: source_id
                .ok_or_else(|| fail(format!("line {}: missing source_id", ln + 2)))?,
            offset_ms: offset_ms
                .ok_or_else(|| fail(format!("line {}: missing offset_ms", ln + 2)))?,
            split: split.ok_or_else(|| fail(format!("line {}: missing split", ln + 2)))?,
            label,
            modalities: modalities
                .ok_or_else(|| fail(format!("line {}: missing modalities", ln + 2)))?,
        });
    }
    Ok(rows)
}

/// Writes the directory layout: `manifest.txt`, `vocab.txt` when the
/// vocabulary is nonempty, and one blob per item modality under `blobs/`.
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    let mut canon = ds.clone();
    canon.finalize()?;
    let blob_dir = dir.join("blobs");
    fs::create_dir_all(&blob_dir).map_err(|e| Error::io(blob_dir.display().to_string(), e))?;
    let manifest_path = dir.join("manifest.txt");
    fs::write(&manifest_path, render_manifest(&canon))
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    if !canon.vocab.is_empty() {
        let vocab_path = dir.join("vocab.txt");
        let mut text = String::new();
        for w in canon.vocab.words() {
            let _ = writeln!(text, "{w}");
        }
        fs::write(&vocab_path, text).map_err(|e| Error::io(vocab_path.display().to_string(), e))?;
    }
    for item in &canon.items {
        let stem = item.blob_stem();
        if let Some(imu) = &item.imu {
            format::write_blob(&blob_dir.join(format!("{stem}.imu.bin")), imu)?;
        }
        if let Some(mocap) = &item.mocap {
            format::write_blob(&blob_dir.join(format!("{stem}.mocap.bin")), mocap)?;
        }
        if let Some(tokens) = &item.tokens {
            let data: Vec<f32> = tokens.iter().map(|&t| t as f32).collect();
            let t = Tensor::new(vec![data.len()], data)?;
            format::write_blob(&blob_dir.join(format!("{stem}.text.bin")), &t)?;
        }
        if let Some(v) = &item.video_emb {
            format::write_blob(&blob_dir.join(format!("{stem}.video_emb.bin")), v)?;
        }
    }
    Ok(())
}

/// Reads a dataset directory back, checking blobs against the manifest's
/// declared modalities and shapes.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.txt");
    let text = fs::read_to_string(&manifest_path)
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    let rows = parse_manifest(&text, &manifest_path)?;

    let vocab_path = dir.join("vocab.txt");
    let vocab = if vocab_path.exists() {
        let words = fs::read_to_string(&vocab_path)
            .map_err(|e| Error::io(vocab_path.display().to_string(), e))?;
        Vocab::from_words(words.lines().map(|w| w.to_string()))?
    } else {
        Vocab::new()
    };

    let blob_dir = dir.join("blobs");
    let mut items = Vec::with_capacity(rows.len());
    for row in rows {
        let stem = format!("{}_{}", row.source_id, row.offset_ms);
        let mut item = Item {
            source_id: row.source_id,
            offset_ms: row.offset_ms,
            split: row.split,
            label: row.label,
            imu: None,
            mocap: None,
            tokens: None,
            video_emb: None,
        };
        for m in &row.modalities {
            let path = blob_dir.join(format!("{stem}.{}.bin", m.as_str()));
            let blob: Tensor<f32> = format::read_blob(&path)?;
            match m {
                Modality::Imu => item.imu = Some(blob),
                Modality::Mocap => item.mocap = Some(blob),
                Modality::Text => {
                    let mut tokens = Vec::with_capacity(blob.len());
                    for &v in blob.data() {
                        if v < 0.0 || v.fract() != 0.0 || v > u32::MAX as f32 {
                            return Err(Error::format(
                                path.display().to_string(),
                                format!("token value {v} is not a token id"),
                            ));
                        }
                        tokens.push(v as u32);
                    }
                    item.tokens = Some(tokens);
                }
                Modality::VideoEmb => item.video_emb = Some(blob),
            }
        }
        items.push(item);
    }
    let mut ds = Dataset { items, vocab };
    ds.finalize()?;
    Ok(ds)
}

/// Parameters of the seeded synthetic benchmark.
#[derive(Clone, Copy, Debug)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub pairs_per_class: usize,
    pub noise_level: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(n_classes: usize, pairs_per_class: usize, noise_level: f64, seed: u64) -> Self {
        Self {
            n_classes,
            pairs_per_class,
            noise_level,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {}",
                self.n_classes
            )));
        }
        if self.pairs_per_class == 0 {
            return Err(Error::Config("pairs_per_class must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.noise_level) {
            return Err(Error::Config(format!(
                "noise_level {} outside [0, 1]",
                self.noise_level
            )));
        }
        Ok(())
    }
}

const SYNTH_STREAM: u64 = 0x7379_6e74;
const SYNTH_LABELS: [&str; 8] = [
    "Bike Repair",
    "Soccer",
    "Cooking",
    "Health",
    "Music",
    "Rock Climbing",
    "Basketball",
    "Dance",
];

pub fn synth_label(class: usize) -> String {
    if class < SYNTH_LABELS.len() {
        SYNTH_LABELS[class].to_string()
    } else {
        format!("Activity {class}")
    }
}

struct ClassProto {
    /// Per channel, two (frequency Hz, amplitude, phase) sinusoids.
    imu: Vec<[(f64, f64, f64); 2]>,
    /// Per joint and coordinate, one (frequency Hz, amplitude, phase).
    mocap: Vec<(f64, f64, f64)>,
    video_dir: Vec<f64>,
}

/// Generates the correlated multimodal benchmark. Every modality of one
/// instance is driven by its class prototype and a shared per-instance phase
/// jitter, so the within-instance pairing is real signal rather than an
/// arbitrary assignment. The leading `ceil(N/10)` of the class-interleaved
/// sequence goes to val, the next `ceil(N/10)` to test, the rest to train,
/// which keeps every split near class-balanced.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = SeededRng::substream(spec.seed, SYNTH_STREAM);
    let tau = std::f64::consts::TAU;

    let protos: Vec<ClassProto> = (0..spec.n_classes)
        .map(|_| ClassProto {
            imu: (0..IMU_CHANNELS)
                .map(|_| {
                    [0, 1].map(|_| {
                        (
                            rng.uniform_in(0.5, 4.0),
                            rng.uniform_in(0.5, 1.5),
                            rng.uniform_in(0.0, tau),
                        )
                    })
                })
                .collect(),
            mocap: (0..MOCAP_JOINTS * MOCAP_COORDS)
                .map(|_| {
                    (
                        rng.uniform_in(0.2, 1.5),
                        rng.uniform_in(0.2, 1.0),
                        rng.uniform_in(0.0, tau),
                    )
                })
                .collect(),
            video_dir: (0..SYNTH_VIDEO_DIM).map(|_| rng.normal()).collect(),
        })
        .collect();

    let n_total = spec.n_classes * spec.pairs_per_class;
    let n_val = n_total.div_ceil(10);
    let n_test = n_total.div_ceil(10);
    if n_val + n_test >= n_total {
        return Err(Error::Config(format!(
            "{n_total} instances leave no training data after the 8:1:1 split"
        )));
    }

    let mut vocab = Vocab::new();
    let mut items = Vec::with_capacity(n_total);
    let mut index = 0usize;
    for j in 0..spec.pairs_per_class {
        for c in 0..spec.n_classes {
            let proto = &protos[c];
            let jitter = rng.uniform_in(0.0, tau);
            let label = synth_label(c);
            let source_id = format!("synth{c:02}x{j:03}");

            let mut imu = vec![0f32; IMU_CHANNELS * IMU_WINDOW_SAMPLES];
            for (ch, sines) in proto.imu.iter().enumerate() {
                for t in 0..IMU_WINDOW_SAMPLES {
                    let ts = t as f64 / crate::signal::TARGET_RATE_HZ;
                    let mut v = 0.0;
                    for &(f, a, p) in sines {
                        v += a * (tau * f * ts + p + jitter).sin();
                    }
                    v += spec.noise_level * rng.normal();
                    imu[ch * IMU_WINDOW_SAMPLES + t] = v as f32;
                }
            }

            let mut mocap = vec![0f32; MOCAP_JOINTS * MOCAP_COORDS * MOCAP_WINDOW_FRAMES];
            for (jc, &(f, a, p)) in proto.mocap.iter().enumerate() {
                for fr in 0..MOCAP_WINDOW_FRAMES {
                    let ts = fr as f64 / crate::signal::MOCAP_FPS;
                    let v = a * (tau * f * ts + p + jitter).sin() + spec.noise_level * rng.normal();
                    mocap[jc * MOCAP_WINDOW_FRAMES + fr] = v as f32;
                }
            }

            let text = format!("{label} {label} {label} {source_id}");
            let tokens = vocab.tokenize_extend(&text);

            let vemb: Vec<f32> = proto
                .video_dir
                .iter()
                .map(|&d| (d + 0.1 * rng.normal()) as f32)
                .collect();
            let vemb = Tensor::new(vec![1, SYNTH_VIDEO_DIM], vemb)?.l2_normalize_rows()?;

            let split = if index < n_val {
                Split::Val
            } else if index < n_val + n_test {
                Split::Test
            } else {
                Split::Train
            };
            index += 1;

            items.push(Item {
                source_id,
                offset_ms: 0,
                split,
                label: Some(label),
                imu: Some(Tensor::new(vec![IMU_CHANNELS, IMU_WINDOW_SAMPLES], imu)?),
                mocap: Some(Tensor::new(
                    vec![MOCAP_JOINTS, MOCAP_COORDS, MOCAP_WINDOW_FRAMES],
                    mocap,
                )?),
                tokens: Some(tokens),
                video_emb: Some(vemb),
            });
        }
    }

    let mut ds = Dataset { items, vocab };
    ds.finalize()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::{linear_probe, ProbeConfig};
    use crate::signal::compute_channel_stats;

    fn small_spec() -> SyntheticSpec {
        SyntheticSpec::new(4, 10, 0.3, 0)
    }

    #[test]
    fn synthetic_split_sizes_follow_the_rule() {
        let ds = gen_synthetic(&SyntheticSpec::new(8, 64, 0.3, 0)).unwrap();
        assert_eq!(ds.items.len(), 512);
        assert_eq!(ds.split_len(Split::Train), 408);
        assert_eq!(ds.split_len(Split::Val), 52);
        assert_eq!(ds.split_len(Split::Test), 52);

        // Class interleaving keeps each split near-balanced.
        for split in Split::ALL {
            let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
            for &i in &ds.split_indices(split) {
                *counts
                    .entry(ds.items[i].label.as_deref().unwrap())
                    .or_default() += 1;
            }
            assert_eq!(counts.len(), 8);
            let min = counts.values().min().unwrap();
            let max = counts.values().max().unwrap();
            assert!(max - min <= 1, "{split:?} counts {counts:?}");
        }
    }

    #[test]
    fn synthetic_is_deterministic_in_seed() {
        let a = gen_synthetic(&small_spec()).unwrap();
        let b = gen_synthetic(&small_spec()).unwrap();
        assert_eq!(a, b);
        let c = gen_synthetic(&SyntheticSpec::new(4, 10, 0.3, 1)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn synthetic_class_structure_shows_in_imu_cosines() {
        let ds = gen_synthetic(&SyntheticSpec::new(4, 8, 0.0, 0)).unwrap();
        let windows: Vec<Tensor<f64>> = ds
            .items
            .iter()
            .map(|r| r.imu.as_ref().unwrap().cast())
            .collect();
        let stats = compute_channel_stats(&windows).unwrap();
        let flat: Vec<Tensor<f64>> = windows
            .iter()
            .map(|w| {
                let std = stats.standardize(w).unwrap();
                let n = std.len();
                std.reshape(vec![1, n])
                    .unwrap()
                    .l2_normalize_rows()
                    .unwrap()
            })
            .collect();
        let (mut within, mut between) = ((0.0, 0usize), (0.0, 0usize));
        for i in 0..flat.len() {
            for j in (i + 1)..flat.len() {
                let cos = flat[i].dot(&flat[j]).unwrap();
                if ds.items[i].label == ds.items[j].label {
                    within = (within.0 + cos, within.1 + 1);
                } else {
                    between = (between.0 + cos, between.1 + 1);
                }
            }
        }
        let within = within.0 / within.1 as f64;
        let between = between.0 / between.1 as f64;
        assert!(
            within > between,
            "within-class mean cosine {within} should exceed between-class {between}"
        );
    }

    #[test]
    fn synthetic_windows_have_declared_shapes_and_correlated_text() {
        let ds = gen_synthetic(&small_spec()).unwrap();
        for item in &ds.items {
            assert_eq!(item.imu.as_ref().unwrap().shape(), [6, 1000]);
            assert_eq!(item.mocap.as_ref().unwrap().shape(), [17, 3, 50]);
            assert_eq!(
                item.video_emb.as_ref().unwrap().shape(),
                [1, SYNTH_VIDEO_DIM]
            );
            let tokens = item.tokens.as_ref().unwrap();
            assert!(!tokens.is_empty() && tokens.len() <= MAX_TEXT_TOKENS);
            // Label words dominate the token counts; the trailing token is
            // unique to the instance.
            assert!(tokens.len() >= 4);
        }
        // Instances of one class share every token except the instance word.
        let a = &ds.items[0];
        let same_class: Vec<&Item> = ds
            .items
            .iter()
            .filter(|r| r.label == a.label && r.source_id != a.source_id)
            .collect();
        let b = same_class[0];
        let (ta, tb) = (a.tokens.as_ref().unwrap(), b.tokens.as_ref().unwrap());
        assert_eq!(ta[..ta.len() - 1], tb[..tb.len() - 1]);
        assert_ne!(ta.last(), tb.last());
    }

    #[test]
    fn raw_window_probe_beats_chance() {
        let ds = gen_synthetic(&SyntheticSpec::new(3, 8, 0.3, 0)).unwrap();
        let classes = ds.label_set();
        let mut embs: BTreeMap<Split, (Vec<Vec<f64>>, Vec<usize>)> = BTreeMap::new();
        for item in &ds.items {
            let w: Tensor<f64> = item.imu.as_ref().unwrap().cast();
            let n = w.len();
            let row = w.reshape(vec![1, n]).unwrap().l2_normalize_rows().unwrap();
            let label = item.label.as_deref().unwrap();
            let class = classes.iter().position(|c| c == label).unwrap();
            let e = embs.entry(item.split).or_default();
            e.0.push(row.into_data());
            e.1.push(class);
        }
        let to_tensor = |rows: &Vec<Vec<f64>>| Tensor::from_rows(rows).unwrap();
        let (train_rows, train_labels) = &embs[&Split::Train];
        let (test_rows, test_labels) = &embs[&Split::Test];
        let cfg = ProbeConfig {
            epochs: 60,
            lr: 0.1,
        };
        let (report, _) = linear_probe(
            &to_tensor(train_rows),
            train_labels,
            &to_tensor(test_rows),
            test_labels,
            &classes,
            &cfg,
        )
        .unwrap();
        assert!(
            report.accuracy > 1.0 / 3.0 + 0.15,
            "probe accuracy {} is not above chance",
            report.accuracy
        );
    }

    #[test]
    fn dataset_round_trips_through_directory() {
        let ds = gen_synthetic(&SyntheticSpec::new(3, 4, 0.5, 9)).unwrap();
        let dir = tempdir("roundtrip");
        write_dataset(&ds, &dir).unwrap();
        let back = read_dataset(&dir).unwrap();
        assert_eq!(ds, back);

        // Writing the read-back dataset reproduces identical files.
        let dir2 = tempdir("roundtrip2");
        write_dataset(&back, &dir2).unwrap();
        assert_eq!(
            fs::read(dir.join("manifest.txt")).unwrap(),
            fs::read(dir2.join("manifest.txt")).unwrap()
        );
        assert_eq!(
            fs::read(dir.join("vocab.txt")).unwrap(),
            fs::read(dir2.join("vocab.txt")).unwrap()
        );
        let stem = format!("{}_0", ds.items[0].source_id);
        for m in ["imu", "mocap", "text", "video_emb"] {
            let rel = format!("blobs/{stem}.{m}.bin");
            assert_eq!(
                fs::read(dir.join(&rel)).unwrap(),
                fs::read(dir2.join(&rel)).unwrap(),
                "{rel} differs"
            );
        }
        fs::remove_dir_all(dir).unwrap();
        fs::remove_dir_all(dir2).unwrap();
    }

    #[test]
    fn manifest_rejections_name_the_problem() {
        let ds = gen_synthetic(&SyntheticSpec::new(2, 3, 0.1, 2)).unwrap();
        let dir = tempdir("manifest-bad");
        write_dataset(&ds, &dir).unwrap();
        let manifest = dir.join("manifest.txt");
        let good = fs::read_to_string(&manifest).unwrap();

        let cases = [
            good.replacen("aura-dataset v1", "aura-dataset v9", 1),
            good.replacen("split=train", "split=practice", 1),
            good.replacen("modalities=imu", "modalities=imu,imu", 1),
            good.replacen("offset_ms=0", "offset_ms=soon", 1),
            good.replacen("source_id=", "mystery=", 1),
        ];
        for bad in cases {
            fs::write(&manifest, &bad).unwrap();
            assert!(
                matches!(read_dataset(&dir), Err(Error::Format { .. })),
                "accepted: {bad:?}"
            );
        }

        // A missing blob surfaces as an io error naming the path.
        fs::write(&manifest, &good).unwrap();
        let stem = format!("{}_0.imu.bin", ds.items[0].source_id);
        fs::remove_file(dir.join("blobs").join(&stem)).unwrap();
        let err = read_dataset(&dir).unwrap_err();
        assert!(
            matches!(&err, Error::Io { path, .. } if path.contains(&stem)),
            "{err}"
        );
        fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn finalize_rejects_invariant_violations() {
        let base = gen_synthetic(&SyntheticSpec::new(2, 3, 0.1, 3)).unwrap();

        // Duplicate key within a split.
        let mut dup = base.clone();
        let copy = dup.items[0].clone();
        dup.items.push(copy);
        assert!(dup.finalize().is_err());

        // Same source in two splits.
        let mut spans = base.clone();
        let mut copy = spans.items[0].clone();
        copy.offset_ms = 5000;
        copy.split = if copy.split == Split::Train {
            Split::Val
        } else {
            Split::Train
        };
        spans.items.push(copy);
        assert!(spans.finalize().is_err());

        // Wrong imu shape.
        let mut shape = base.clone();
        shape.items[0].imu = Some(Tensor::zeros(vec![6, 10]));
        assert!(shape.finalize().is_err());

        // Token outside the vocabulary.
        let mut tok = base;
        tok.items[0].tokens = Some(vec![10_000]);
        assert!(tok.finalize().is_err());
    }

    #[test]
    fn synthetic_spec_validation() {
        assert!(gen_synthetic(&SyntheticSpec::new(1, 4, 0.1, 0)).is_err());
        assert!(gen_synthetic(&SyntheticSpec::new(4, 4, 1.5, 0)).is_err());
        assert!(gen_synthetic(&SyntheticSpec::new(4, 0, 0.1, 0)).is_err());
        // Too small to leave any training data after the split.
        assert!(gen_synthetic(&SyntheticSpec::new(2, 1, 0.1, 0)).is_err());
    }

    fn tempdir(tag: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("aura-dataset-{tag}-{}", std::process::id()));
        if dir.exists() {
            fs::remove_dir_all(&dir).unwrap();
        }
        fs::create_dir_all(&dir).unwrap();
        dir
    }
}
