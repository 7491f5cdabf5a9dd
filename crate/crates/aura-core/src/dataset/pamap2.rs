//! PAMAP2 table ingestion.
//!
//! The raw recordings are whitespace-separated rows of 54 columns sampled at
//! 100 Hz: timestamp, activity id, heart rate, then three 17-column IMU
//! blocks (hand, chest, ankle). Ingestion keeps the chest accelerometer and
//! gyroscope, splits each file into runs of constant activity, repairs
//! dropout markers by linear interpolation, resamples to the standard
//! 200 Hz, and cuts non-overlapping 5 s windows.

use std::fs;
use std::path::Path;

use super::{Dataset, Item, Split};
use crate::signal::{
    fill_gaps, resample_linear, slide_windows, TimeSeries, Vocab, IMU_CHANNELS, TARGET_RATE_HZ,
    WINDOW_SECONDS,
};
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const PAMAP2_RATE_HZ: f64 = 100.0;

/// First column of the chest IMU block (its temperature reading).
const CHEST_BASE: usize = 20;
/// Offsets within an IMU block: the wide-range accelerometer triple, the
/// low-range one, and the gyroscope triple.
const ACC16_OFFSET: usize = 1;
const ACC6_OFFSET: usize = 4;
const GYRO_OFFSET: usize = 7;
const MIN_COLUMNS: usize = CHEST_BASE + GYRO_OFFSET + 3;

/// Activity ids that appear in the protocol and optional sessions, with
/// their names.
pub const PAMAP2_LABELS: [(u32, &str); 18] = [
    (1, "lying"),
    (2, "sitting"),
    (3, "standing"),
    (4, "walking"),
    (5, "running"),
    (6, "cycling"),
    (7, "Nordic walking"),
    (9, "watching TV"),
    (10, "computer work"),
    (11, "car driving"),
    (12, "ascending stairs"),
    (13, "descending stairs"),
    (16, "vacuum cleaning"),
    (17, "ironing"),
    (18, "folding laundry"),
    (19, "house cleaning"),
    (20, "playing soccer"),
    (24, "rope jumping"),
];

pub fn activity_label(id: u32) -> Option<&'static str> {
    PAMAP2_LABELS
        .iter()
        .find(|(i, _)| *i == id)
        .map(|(_, name)| *name)
}

/// Column selection. The chest unit carries two accelerometers; the
/// wide-range one is the default and `low_g_accel` switches to the ±6 g
/// columns.
#[derive(Clone, Copy, Debug, Default)]
pub struct Pamap2Config {
    pub low_g_accel: bool,
}

struct Run {
    activity: u32,
    /// Per channel, per sample; dropout markers are NaN.
    samples: Vec<Vec<f64>>,
}

impl Run {
    fn new(activity: u32) -> Self {
        Self {
            activity,
            samples: vec![Vec::new(); IMU_CHANNELS],
        }
    }

    fn len(&self) -> usize {
        self.samples[0].len()
    }
}

fn parse_file(path: &Path, cfg: &Pamap2Config) -> Result<Vec<Run>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let fail = |reason: String| Error::format(path.display().to_string(), reason);
    let acc_base = CHEST_BASE
        + if cfg.low_g_accel {
            ACC6_OFFSET
        } else {
            ACC16_OFFSET
        };
    let gyro_base = CHEST_BASE + GYRO_OFFSET;

    let mut runs: Vec<Run> = Vec::new();
    let mut current: Option<Run> = None;
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() < MIN_COLUMNS {
            return Err(fail(format!(
                "row {}: {} columns, need at least {MIN_COLUMNS}",
                ln + 1,
                cols.len()
            )));
        }
        let id_raw: f64 = cols[1]
            .parse()
            .map_err(|_| fail(format!("row {}: activity id {:?}", ln + 1, cols[1])))?;
        if !(id_raw.fract() == 0.0 && (0.0..=u32::MAX as f64).contains(&id_raw)) {
            return Err(fail(format!("row {}: activity id {id_raw}", ln + 1)));
        }
        let id = id_raw as u32;
        if id == 0 {
            // Transient periods separate labeled runs and carry no label.
            if let Some(run) = current.take() {
                runs.push(run);
            }
            continue;
        }
        if activity_label(id).is_none() {
            return Err(fail(format!("row {}: unknown activity id {id}", ln + 1)));
        }
        if current.as_ref().is_none_or(|run| run.activity != id) {
            if let Some(run) = current.take() {
                runs.push(run);
            }
            current = Some(Run::new(id));
        }
        let run = current.as_mut().unwrap();
        for ch in 0..3 {
            let acc: f64 = cols[acc_base + ch].parse().map_err(|_| {
                fail(format!(
                    "row {}: bad value {:?}",
                    ln + 1,
                    cols[acc_base + ch]
                ))
            })?;
            let gyro: f64 = cols[gyro_base + ch].parse().map_err(|_| {
                fail(format!(
                    "row {}: bad value {:?}",
                    ln + 1,
                    cols[gyro_base + ch]
                ))
            })?;
            run.samples[ch].push(acc);
            run.samples[3 + ch].push(gyro);
        }
    }
    if let Some(run) = current.take() {
        runs.push(run);
    }
    Ok(runs)
}

fn run_windows(run: &Run) -> Result<Vec<(u64, Tensor<f32>)>> {
    let t = run.len();
    let mut data = Vec::with_capacity(IMU_CHANNELS * t);
    let mut validity = Vec::with_capacity(IMU_CHANNELS * t);
    for ch in &run.samples {
        for &v in ch {
            data.push(v);
            validity.push(v.is_finite());
        }
    }
    // Gap filling treats each channel as a single-coordinate joint.
    let frames = Tensor::new(vec![IMU_CHANNELS, 1, t], data)?;
    let filled = fill_gaps(&frames, &validity)?.reshape(vec![IMU_CHANNELS, t])?;
    let ts = TimeSeries::new(PAMAP2_RATE_HZ, filled)?;
    let ts = resample_linear(&ts, TARGET_RATE_HZ)?;
    let windows = slide_windows(&ts, WINDOW_SECONDS, WINDOW_SECONDS)?;
    windows
        .into_iter()
        .map(|w| {
            let offset_ms = (w.offset_s * 1000.0).round() as u64;
            Ok((offset_ms, w.samples.cast::<f32>()))
        })
        .collect()
}

fn source_stem(path: &Path) -> String {
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("pamap2");
    let cleaned: String = stem
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '.' {
                c
            } else {
                '-'
            }
        })
        .collect();
    if cleaned.is_empty() {
        "pamap2".to_string()
    } else {
        cleaned
    }
}

/// Ingests one or more raw PAMAP2 files into the standard dataset layout.
/// Files are the split unit: with `n` files, the last `floor(n/10)` of the
/// sorted list form the test split and the `floor(n/10)` before them the val
/// split, so small ingestions land entirely in train.
pub fn ingest_pamap2(paths: &[&Path], cfg: &Pamap2Config) -> Result<Dataset> {
    if paths.is_empty() {
        return Err(Error::Empty("pamap2 input files"));
    }
    let mut stems: Vec<String> = paths.iter().map(|p| source_stem(p)).collect();
    stems.sort();
    stems.dedup();
    if stems.len() != paths.len() {
        return Err(Error::Argument("input file names must be distinct".into()));
    }
    let n_side = paths.len() / 10;
    let split_of = |stem: &str| {
        let pos = stems.iter().position(|s| s == stem).unwrap();
        if pos >= paths.len() - n_side {
            Split::Test
        } else if pos >= paths.len() - 2 * n_side {
            Split::Val
        } else {
            Split::Train
        }
    };

    let mut items = Vec::new();
    for path in paths {
        let stem = source_stem(path);
        let split = split_of(&stem);
        let runs = parse_file(path, cfg)?;
        for (ri, run) in runs.iter().enumerate() {
            let label = activity_label(run.activity).unwrap().to_string();
            let source_id = format!("{stem}-a{}-r{ri}", run.activity);
            for (offset_ms, window) in run_windows(run)? {
                items.push(Item {
                    source_id: source_id.clone(),
                    offset_ms,
                    split,
                    label: Some(label.clone()),
                    imu: Some(window),
                    mocap: None,
                    tokens: None,
                    video_emb: None,
                });
            }
        }
    }
    if items.is_empty() {
        return Err(Error::Empty("no complete windows in the input"));
    }
    let mut ds = Dataset {
        items,
        vocab: Vocab::new(),
    };
    ds.finalize()?;
    Ok(ds)
}
