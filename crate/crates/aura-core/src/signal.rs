//! Signal types and preprocessing: resampling, windowing, gap filling,
//! tokenization, and per-channel standardization.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use std::collections::HashMap;

/// IMU channel count (3-axis accelerometer + 3-axis gyroscope).
pub const IMU_CHANNELS: usize = 6;
/// Common rate all inertial streams are resampled to, in Hz.
pub const TARGET_RATE_HZ: f64 = 200.0;
/// Window length in seconds for both IMU and motion capture.
pub const WINDOW_SECONDS: f64 = 5.0;
/// Samples per IMU window at the target rate.
pub const IMU_WINDOW_SAMPLES: usize = 1000;
/// Skeleton joints per motion-capture frame.
pub const MOCAP_JOINTS: usize = 17;
/// Coordinates per joint.
pub const MOCAP_COORDS: usize = 3;
/// Motion-capture frame rate in FPS.
pub const MOCAP_FPS: f64 = 10.0;
/// Frames per motion-capture window.
pub const MOCAP_WINDOW_FRAMES: usize = 50;
/// Hard cap on text token sequences.
pub const MAX_TEXT_TOKENS: usize = 77;

/// A multichannel stream sampled at a fixed rate, stored [channels x samples].
#[derive(Clone, Debug)]
pub struct TimeSeries<S> {
    pub rate_hz: f64,
    pub samples: Tensor<S>,
}

impl<S: Scalar> TimeSeries<S> {
    pub fn new(rate_hz: f64, samples: Tensor<S>) -> Result<Self> {
        if !(rate_hz > 0.0) {
            return Err(Error::Argument(format!(
                "sample rate {rate_hz} must be > 0"
            )));
        }
        samples.dims2("TimeSeries::new")?;
        Ok(Self { rate_hz, samples })
    }

    pub fn channels(&self) -> usize {
        self.samples.shape()[0]
    }

    pub fn len(&self) -> usize {
        self.samples.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One fixed-length window cut from a stream, tagged with its offset from
/// the start of the stream in seconds.
#[derive(Clone, Debug)]
pub struct Window<S> {
    pub offset_s: f64,
    pub samples: Tensor<S>,
}

/// Linear resampling to a new rate. Output sample `j` sits at source
/// position `j * src / target`; interior positions interpolate between the
/// two neighboring source samples and the tail clamps to the last one.
pub fn resample_linear<S: Scalar>(ts: &TimeSeries<S>, target_hz: f64) -> Result<TimeSeries<S>> {
    if !(target_hz > 0.0) {
        return Err(Error::Argument(format!(
            "target rate {target_hz} must be > 0"
        )));
    }
    let (c, t) = ts.samples.dims2("resample_linear")?;
    if t == 0 {
        return Err(Error::Empty("resample_linear"));
    }
    let ratio = target_hz / ts.rate_hz;
    let t_out = ((t as f64) * ratio).round() as usize;
    if t_out == 0 {
        return Err(Error::Argument(format!(
            "resampling {t} samples from {} Hz to {target_hz} Hz leaves nothing",
            ts.rate_hz
        )));
    }
    let mut out = vec![S::zero(); c * t_out];
    for j in 0..t_out {
        let p = j as f64 / ratio;
        let i0 = p.floor() as usize;
        let i0 = i0.min(t - 1);
        let i1 = (i0 + 1).min(t - 1);
        let frac = S::from_f64(p - i0 as f64);
        let one_m = S::one() - frac;
        for ch in 0..c {
            out[ch * t_out + j] = one_m * ts.samples.at2(ch, i0) + frac * ts.samples.at2(ch, i1);
        }
    }
    Ok(TimeSeries {
        rate_hz: target_hz,
        samples: Tensor::new(vec![c, t_out], out)?,
    })
}

/// Number of windows a stream of `t` samples yields; window and stride are
/// converted to sample counts by rounding before any arithmetic, so the
/// result is exact integer bookkeeping.
pub fn window_count(t: usize, n_win: usize, n_stride: usize) -> usize {
    if t < n_win {
        0
    } else {
        (t - n_win) / n_stride + 1
    }
}

/// Cuts fixed-length windows with a fixed stride, both given in seconds.
/// Windows never cross the end of the stream; a short tail is dropped.
pub fn slide_windows<S: Scalar>(
    ts: &TimeSeries<S>,
    window_s: f64,
    stride_s: f64,
) -> Result<Vec<Window<S>>> {
    let (_, t) = ts.samples.dims2("slide_windows")?;
    let n_win = (window_s * ts.rate_hz).round() as usize;
    let n_stride = (stride_s * ts.rate_hz).round() as usize;
    if n_win == 0 || n_stride == 0 {
        return Err(Error::Argument(format!(
            "window {window_s} s / stride {stride_s} s rounds to zero samples at {} Hz",
            ts.rate_hz
        )));
    }
    let count = window_count(t, n_win, n_stride);
    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        let start = k * n_stride;
        let samples = ts.samples.slice_cols(start, start + n_win)?;
        out.push(Window {
            offset_s: start as f64 / ts.rate_hz,
            samples,
        });
    }
    Ok(out)
}

/// A motion-capture window: joint trajectories [J x 3 x F] plus a per-joint,
/// per-frame validity mask [J x F] marking which observations were real
/// rather than filled in.
#[derive(Clone, Debug)]
pub struct MocapWindow<S> {
    pub frames: Tensor<S>,
    pub validity: Vec<bool>,
}

impl<S: Scalar> MocapWindow<S> {
    pub fn new(frames: Tensor<S>, validity: Vec<bool>) -> Result<Self> {
        let shape = frames.shape();
        if shape.len() != 3 || shape[1] != MOCAP_COORDS {
            return Err(Error::Dimension {
                op: "MocapWindow::new",
                expected: format!("[joints x {MOCAP_COORDS} x frames]"),
                got: format!("{shape:?}"),
            });
        }
        let (j, f) = (shape[0], shape[2]);
        if validity.len() != j * f {
            return Err(Error::Dimension {
                op: "MocapWindow::new",
                expected: format!("{} validity flags", j * f),
                got: format!("{}", validity.len()),
            });
        }
        Ok(Self { frames, validity })
    }

    pub fn joints(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn frames_len(&self) -> usize {
        self.frames.shape()[2]
    }

    /// View as a [J*3 x F] matrix for the encoders. Row-major [J, 3, F]
    /// already has that layout, so this is a reshape.
    pub fn flattened(&self) -> Result<Tensor<S>> {
        self.frames
            .reshape(vec![self.joints() * MOCAP_COORDS, self.frames_len()])
    }
}

/// Fills invalid observations in joint trajectories. Interior gaps are
/// linearly interpolated between the nearest valid frames, leading and
/// trailing gaps hold the nearest valid value, and a joint with no valid
/// frame at all is zeroed. The validity mask itself is left as the caller's
/// record of what was observed.
pub fn fill_gaps<S: Scalar>(frames: &Tensor<S>, validity: &[bool]) -> Result<Tensor<S>> {
    let shape = frames.shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::Dimension {
            op: "fill_gaps",
            expected: "[joints x coords x frames]".into(),
            got: format!("{shape:?}"),
        });
    }
    let (j, c, f) = (shape[0], shape[1], shape[2]);
    if validity.len() != j * f {
        return Err(Error::Dimension {
            op: "fill_gaps",
            expected: format!("{} validity flags", j * f),
            got: format!("{}", validity.len()),
        });
    }
    let mut out = frames.clone();
    for joint in 0..j {
        let valid: Vec<usize> = (0..f).filter(|&fr| validity[joint * f + fr]).collect();
        for coord in 0..c {
            let base = joint * c * f + coord * f;
            let data = out.data_mut();
            if valid.is_empty() {
                for fr in 0..f {
                    data[base + fr] = S::zero();
                }
                continue;
            }
            for fr in 0..f {
                if validity[joint * f + fr] {
                    continue;
                }
                // Nearest valid frames on either side, if any.
                let after = valid.partition_point(|&v| v < fr);
                let filled = if after == 0 {
                    data[base + valid[0]]
                } else if after == valid.len() {
                    data[base + valid[valid.len() - 1]]
                } else {
                    let lo = valid[after - 1];
                    let hi = valid[after];
                    let w = S::from_f64((fr - lo) as f64 / (hi - lo) as f64);
                    data[base + lo] * (S::one() - w) + data[base + hi] * w
                };
                data[base + fr] = filled;
            }
        }
    }
    Ok(out)
}

/// Truncates a token sequence to [`MAX_TEXT_TOKENS`].
pub fn truncate_tokens(mut tokens: Vec<u32>) -> Vec<u32> {
    tokens.truncate(MAX_TEXT_TOKENS);
    tokens
}

/// Word vocabulary shared by the tokenizer and the pseudo text encoder.
/// Index order is insertion order and is preserved on disk.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_words<I: IntoIterator<Item = String>>(words: I) -> Result<Self> {
        let mut v = Self::new();
        for w in words {
            if v.index.contains_key(&w) {
                return Err(Error::Argument(format!("duplicate vocabulary word {w:?}")));
            }
            v.index.insert(w.clone(), v.words.len() as u32);
            v.words.push(w);
        }
        Ok(v)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn get_or_add(&mut self, word: &str) -> u32 {
        if let Some(&id) = self.index.get(word) {
            return id;
        }
        let id = self.words.len() as u32;
        self.index.insert(word.to_string(), id);
        self.words.push(word.to_string());
        id
    }

    /// Lowercases, strips punctuation, splits on whitespace, and adds any
    /// new words. Used while building a dataset.
    pub fn tokenize_extend(&mut self, text: &str) -> Vec<u32> {
        truncate_tokens(normalize_words(text).map(|w| self.get_or_add(&w)).collect())
    }

    /// Like [`Self::tokenize_extend`] but frozen: words outside the
    /// vocabulary are dropped.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        truncate_tokens(normalize_words(text).filter_map(|w| self.id(&w)).collect())
    }
}

fn normalize_words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
}

/// Per-channel mean and standard deviation, computed on training windows and
/// applied everywhere else.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats<S> {
    pub mean: Vec<S>,
    pub std: Vec<S>,
}

impl<S: Scalar> ChannelStats<S> {
    /// Identity stats (mean 0, std 1) for `channels` channels.
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![S::zero(); channels],
            std: vec![S::one(); channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// Applies (x - mean) / std per channel to a [C x T] window. A constant
    /// channel (std 0) is mapped to zero rather than dividing by zero.
    pub fn standardize(&self, window: &Tensor<S>) -> Result<Tensor<S>> {
        let (c, t) = window.dims2("standardize")?;
        if c != self.mean.len() {
            return Err(Error::Dimension {
                op: "standardize",
                expected: format!("{} channels", self.mean.len()),
                got: format!("{c}"),
            });
        }
        let mut out = window.clone();
        for ch in 0..c {
            let m = self.mean[ch];
            let s = self.std[ch];
            let inv = if s > S::zero() { s.recip() } else { S::zero() };
            for j in 0..t {
                let v = (out.at2(ch, j) - m) * inv;
                out.set2(ch, j, v);
            }
        }
        Ok(out)
    }
}

/// Estimates per-channel statistics over a set of equally shaped windows.
/// The variance is the biased (population) estimate over every sample of
/// every window.
pub fn compute_channel_stats<S: Scalar>(windows: &[Tensor<S>]) -> Result<ChannelStats<S>> {
    let first = windows
        .first()
        .ok_or(Error::Empty("compute_channel_stats"))?;
    let (c, _) = first.dims2("compute_channel_stats")?;
    let mut count = vec![0usize; c];
    let mut mean = vec![S::zero(); c];
    for w in windows {
        let (wc, wt) = w.dims2("compute_channel_stats")?;
        if wc != c {
            return Err(Error::ShapeMismatch {
                op: "compute_channel_stats",
                left: first.shape().to_vec(),
                right: w.shape().to_vec(),
            });
        }
        for ch in 0..c {
            for j in 0..wt {
                mean[ch] += w.at2(ch, j);
                count[ch] += 1;
            }
        }
    }
    for ch in 0..c {
        if count[ch] == 0 {
            return Err(Error::Empty("compute_channel_stats"));
        }
        mean[ch] /= S::from_f64(count[ch] as f64);
    }
    let mut var = vec![S::zero(); c];
    for w in windows {
        let (_, wt) = w.dims2("compute_channel_stats")?;
        for ch in 0..c {
            for j in 0..wt {
                let d = w.at2(ch, j) - mean[ch];
                var[ch] += d * d;
            }
        }
    }
    let std = var
        .iter()
        .zip(&count)
        .map(|(&v, &n)| (v / S::from_f64(n as f64)).sqrt())
        .collect();
    Ok(ChannelStats { mean, std })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp_series(t: usize, rate: f64) -> TimeSeries<f64> {
        let data: Vec<f64> = (0..t).map(|i| i as f64).collect();
        TimeSeries::new(rate, Tensor::new(vec![1, t], data).unwrap()).unwrap()
    }

    #[test]
    fn resample_doubles_length_and_stays_on_line() {
        let ts = ramp_series(500, 100.0);
        let up = resample_linear(&ts, 200.0).unwrap();
        assert_eq!(up.rate_hz, 200.0);
        assert_eq!(up.len(), 1000);
        // A linear signal must stay exactly linear under linear
        // interpolation; the tail clamps to the final value.
        for j in 0..998 {
            let expect = j as f64 * 0.5;
            assert!((up.samples.at2(0, j) - expect).abs() < 1e-12, "j={j}");
        }
        assert_eq!(up.samples.at2(0, 999), 499.0);
    }

    #[test]
    fn resample_identity_rate_is_identity() {
        let ts = ramp_series(64, 200.0);
        let same = resample_linear(&ts, 200.0).unwrap();
        assert_eq!(same.samples, ts.samples);
    }

    #[test]
    fn resample_downsamples() {
        let ts = ramp_series(1000, 1000.0);
        let down = resample_linear(&ts, 200.0).unwrap();
        assert_eq!(down.len(), 200);
        assert!((down.samples.at2(0, 1) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn window_counts_match_formula() {
        // 5 s windows at 200 Hz: 1000 samples each.
        assert_eq!(window_count(999, 1000, 1000), 0);
        assert_eq!(window_count(1000, 1000, 1000), 1);
        assert_eq!(window_count(1999, 1000, 1000), 1);
        assert_eq!(window_count(2000, 1000, 1000), 2);
        assert_eq!(window_count(2000, 1000, 500), 3);
    }

    #[test]
    fn slide_windows_offsets_are_sample_aligned() {
        let ts = ramp_series(2500, 200.0);
        let ws = slide_windows(&ts, 5.0, 2.5).unwrap();
        assert_eq!(ws.len(), 4);
        for (k, w) in ws.iter().enumerate() {
            assert_eq!(w.samples.shape(), &[1, 1000]);
            assert!((w.offset_s - k as f64 * 2.5).abs() < 1e-12);
            assert_eq!(w.samples.at2(0, 0), (k * 500) as f64);
        }
    }

    #[test]
    fn fill_gaps_interpolates_interior() {
        // One joint, one coord, 5 frames, frames 1..3 missing.
        let frames = Tensor::new(vec![1, 1, 5], vec![0.0, 99.0, 99.0, 99.0, 8.0]).unwrap();
        let validity = vec![true, false, false, false, true];
        let filled = fill_gaps(&frames, &validity).unwrap();
        assert_eq!(filled.data(), &[0.0, 2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn fill_gaps_holds_edges_and_zeroes_dead_joints() {
        let frames =
            Tensor::new(vec![2, 1, 4], vec![9.0, 5.0, 9.0, 9.0, 1.0, 2.0, 3.0, 4.0]).unwrap();
        let validity = vec![
            false, true, false, false, // joint 0: only frame 1 observed
            false, false, false, false, // joint 1: never observed
        ];
        let filled = fill_gaps(&frames, &validity).unwrap();
        assert_eq!(&filled.data()[0..4], &[5.0, 5.0, 5.0, 5.0]);
        assert_eq!(&filled.data()[4..8], &[0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn truncation_caps_at_limit() {
        let long: Vec<u32> = (0..100).collect();
        let cut = truncate_tokens(long);
        assert_eq!(cut.len(), MAX_TEXT_TOKENS);
        assert_eq!(cut[76], 76);
        assert_eq!(truncate_tokens(vec![1, 2, 3]), vec![1, 2, 3]);
    }

    #[test]
    fn tokenizer_normalizes() {
        let mut v = Vocab::new();
        let ids = v.tokenize_extend("Fixing the Bike, fixing THE bike!");
        assert_eq!(v.words(), &["fixing", "the", "bike"]);
        assert_eq!(ids, vec![0, 1, 2, 0, 1, 2]);
        // Frozen lookup drops unknown words silently.
        assert_eq!(v.tokenize("the unknown bike"), vec![1, 2]);
    }

    #[test]
    fn standardization_centers_training_windows() {
        let mut rng = crate::rng::SeededRng::new(3);
        let windows: Vec<Tensor<f64>> = (0..8)
            .map(|_| {
                Tensor::new(
                    vec![2, 50],
                    (0..100).map(|_| rng.normal_scaled(3.0, 2.5)).collect(),
                )
                .unwrap()
            })
            .collect();
        let stats = compute_channel_stats(&windows).unwrap();
        let z: Vec<Tensor<f64>> = windows
            .iter()
            .map(|w| stats.standardize(w).unwrap())
            .collect();
        let zstats = compute_channel_stats(&z).unwrap();
        for ch in 0..2 {
            assert!(zstats.mean[ch].abs() < 1e-10);
            assert!((zstats.std[ch] - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn constant_channel_standardizes_to_zero() {
        let w = Tensor::full(vec![1, 10], 7.0f64);
        let stats = compute_channel_stats(std::slice::from_ref(&w)).unwrap();
        let z = stats.standardize(&w).unwrap();
        assert!(z.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn mocap_window_flattening_preserves_layout() {
        let data: Vec<f64> = (0..MOCAP_JOINTS * 3 * 2).map(|i| i as f64).collect();
        let frames = Tensor::new(vec![MOCAP_JOINTS, 3, 2], data).unwrap();
        let w = MocapWindow::new(frames, vec![true; MOCAP_JOINTS * 2]).unwrap();
        let flat = w.flattened().unwrap();
        assert_eq!(flat.shape(), &[51, 2]);
        // Row j*3+c of the flat view is joint j, coordinate c.
        assert_eq!(flat.at2(4, 1), w.frames.data()[4 * 2 + 1]);
    }

    proptest! {
        #[test]
        fn window_enumeration_matches_count(
            t in 0usize..4000,
            n_win in 1usize..1200,
            n_stride in 1usize..1200,
        ) {
            let mut k = 0usize;
            let mut start = 0usize;
            while start + n_win <= t {
                k += 1;
                start += n_stride;
            }
            prop_assert_eq!(window_count(t, n_win, n_stride), k);
        }

        #[test]
        fn resampled_linear_signal_stays_linear(
            t in 8usize..200,
            src in 50.0f64..400.0,
            tgt in 50.0f64..400.0,
            slope in -5.0f64..5.0,
        ) {
            let data: Vec<f64> = (0..t).map(|i| slope * i as f64).collect();
            let ts = TimeSeries::new(src, Tensor::new(vec![1, t], data).unwrap()).unwrap();
            let out = resample_linear(&ts, tgt).unwrap();
            let ratio = tgt / src;
            for j in 0..out.len() {
                let p = (j as f64 / ratio).min((t - 1) as f64);
                let expect = slope * p;
                prop_assert!((out.samples.at2(0, j) - expect).abs() < 1e-9);
            }
        }
    }
}
