//! Encoder architectures mapping sensor windows to unit embeddings.
//!
//! Two trainable architectures share one interface: a patch transformer and
//! a convolutional-recurrent stack. Both consume a standardized [C x T]
//! window and produce a [1 x D] embedding on the unit sphere. The frozen
//! anchor space they are trained against lives in [`anchor`].

mod anchor;
mod rnn;
mod transformer;

pub use anchor::FrozenAnchor;
pub use rnn::RnnConfig;
pub use transformer::TransformerConfig;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::signal::ChannelStats;
use crate::tensor::Tensor;
use std::collections::BTreeMap;

/// Standard deviation for weight initialization.
pub const INIT_STD: f64 = 0.02;

/// Stream label separating parameter initialization from other seed uses.
const INIT_STREAM: u64 = 0x696e_6974;

/// Collects named tensors during initialization, drawing weights in call
/// order from one generator so a seed pins the whole parameter set.
pub(crate) struct ParamBuilder<'a, S> {
    rng: &'a mut SeededRng,
    out: BTreeMap<String, Tensor<S>>,
}

impl<'a, S: Scalar> ParamBuilder<'a, S> {
    pub(crate) fn new(rng: &'a mut SeededRng) -> Self {
        Self {
            rng,
            out: BTreeMap::new(),
        }
    }

    pub(crate) fn weight(&mut self, name: &str, shape: Vec<usize>) {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| S::from_f64(self.rng.normal_scaled(0.0, INIT_STD)))
            .collect();
        self.insert(name, Tensor::new(shape, data).expect("builder shape"));
    }

    pub(crate) fn zeros(&mut self, name: &str, shape: Vec<usize>) {
        self.insert(name, Tensor::zeros(shape));
    }

    pub(crate) fn ones(&mut self, name: &str, shape: Vec<usize>) {
        self.insert(name, Tensor::full(shape, S::one()));
    }

    fn insert(&mut self, name: &str, t: Tensor<S>) {
        let prev = self.out.insert(name.to_string(), t);
        debug_assert!(prev.is_none(), "duplicate parameter {name}");
    }

    pub(crate) fn finish(self) -> BTreeMap<String, Tensor<S>> {
        self.out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum EncoderKind {
    Transformer(TransformerConfig),
    Rnn(RnnConfig),
}

impl EncoderKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Transformer(_) => "transformer",
            Self::Rnn(_) => "rnn",
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            Self::Transformer(c) => c.out_dim,
            Self::Rnn(c) => c.out_dim,
        }
    }

    /// Dropout probability used on training forward passes. The rnn stack has
    /// no dropout sites, so it is always zero there.
    pub fn dropout(&self) -> f64 {
        match self {
            Self::Transformer(c) => c.dropout,
            Self::Rnn(_) => 0.0,
        }
    }

    pub fn validate(&self, input_channels: usize, input_len: usize) -> Result<()> {
        match self {
            Self::Transformer(c) => c.validate(input_channels, input_len),
            Self::Rnn(c) => c.validate(input_channels, input_len),
        }
    }
}

/// A complete trainable encoder: architecture, expected input shape, and all
/// parameter tensors by name.
#[derive(Clone, Debug)]
pub struct EncoderParams<S> {
    pub kind: EncoderKind,
    pub input_channels: usize,
    pub input_len: usize,
    pub tensors: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> EncoderParams<S> {
    /// Fresh parameters for the given architecture, drawn from `seed`.
    pub fn init(
        kind: EncoderKind,
        input_channels: usize,
        input_len: usize,
        seed: u64,
    ) -> Result<Self> {
        kind.validate(input_channels, input_len)?;
        let mut rng = SeededRng::substream(seed, INIT_STREAM);
        let tensors = match &kind {
            EncoderKind::Transformer(c) => {
                transformer::init_tensors(c, input_channels, input_len, &mut rng)
            }
            EncoderKind::Rnn(c) => rnn::init_tensors(c, input_channels, &mut rng),
        };
        Ok(Self {
            kind,
            input_channels,
            input_len,
            tensors,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.kind.out_dim()
    }

    /// Total scalar parameter count.
    pub fn param_count(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// FNV-1a digest over names, shapes, and exact value bits. Two parameter
    /// sets collide only if they are numerically identical, so this is how
    /// freeze contracts are audited.
    pub fn checksum(&self) -> u64 {
        fn eat(h: &mut u64, bytes: &[u8]) {
            for &b in bytes {
                *h ^= b as u64;
                *h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (name, t) in &self.tensors {
            eat(&mut h, name.as_bytes());
            for &d in t.shape() {
                eat(&mut h, &(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                eat(&mut h, &v.to_f64().to_bits().to_le_bytes());
            }
        }
        h
    }

    /// Registers every tensor as a trainable tape parameter, in name order.
    pub fn register(&self, tape: &mut Tape<S>) -> BTreeMap<String, Var> {
        self.tensors
            .iter()
            .map(|(name, t)| (name.clone(), tape.param(t.clone())))
            .collect()
    }

    /// Registers every tensor as a frozen constant (no gradients).
    pub fn register_frozen(&self, tape: &mut Tape<S>) -> BTreeMap<String, Var> {
        self.tensors
            .iter()
            .map(|(name, t)| (name.clone(), tape.constant(t.clone())))
            .collect()
    }

    fn check_window(&self, shape: &[usize]) -> Result<()> {
        if shape != [self.input_channels, self.input_len] {
            return Err(Error::Dimension {
                op: "encoder forward",
                expected: format!("[{} x {}] window", self.input_channels, self.input_len),
                got: format!("{shape:?}"),
            });
        }
        Ok(())
    }

    /// Records the forward pass for one window (already standardized) and
    /// returns the embedding var. `dropout_p` is forced to zero for the rnn
    /// architecture, which does not use dropout.
    pub fn build(
        &self,
        tape: &mut Tape<S>,
        vars: &BTreeMap<String, Var>,
        window: Var,
        dropout_p: f64,
        rng: &mut SeededRng,
    ) -> Result<Var> {
        self.check_window(tape.value(window).shape())?;
        match &self.kind {
            EncoderKind::Transformer(c) => {
                transformer::build(tape, vars, c, window, dropout_p, rng)
            }
            EncoderKind::Rnn(c) => rnn::build(tape, vars, c, window),
        }
    }

    /// Inference: embeds one standardized window with dropout off and no
    /// gradient bookkeeping retained.
    pub fn encode(&self, window: &Tensor<S>) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let vars = self.register_frozen(&mut tape);
        let w = tape.constant(window.clone());
        let mut rng = SeededRng::new(0);
        let emb = self.build(&mut tape, &vars, w, 0.0, &mut rng)?;
        Ok(tape.value(emb).clone())
    }
}

/// Encoder parameters plus the channel statistics its inputs must be
/// standardized with. This is the unit that checkpoints store.
#[derive(Clone, Debug)]
pub struct EncoderBundle<S> {
    pub params: EncoderParams<S>,
    pub stats: ChannelStats<S>,
}

impl<S: Scalar> EncoderBundle<S> {
    pub fn new(params: EncoderParams<S>, stats: ChannelStats<S>) -> Result<Self> {
        if stats.channels() != params.input_channels {
            return Err(Error::Mismatch(format!(
                "stats cover {} channels, encoder expects {}",
                stats.channels(),
                params.input_channels
            )));
        }
        Ok(Self { params, stats })
    }

    /// Standardizes a raw window and embeds it.
    pub fn encode_raw(&self, window: &Tensor<S>) -> Result<Tensor<S>> {
        self.params.encode(&self.stats.standardize(window)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use crate::signal;

    fn tiny_transformer() -> EncoderKind {
        EncoderKind::Transformer(TransformerConfig {
            patch_len: 4,
            model_dim: 8,
            heads: 2,
            layers: 1,
            mlp_dim: 16,
            dropout: 0.1,
            out_dim: 6,
        })
    }

    fn tiny_rnn() -> EncoderKind {
        EncoderKind::Rnn(RnnConfig {
            conv_channels: vec![4, 8],
            kernel: 3,
            stride: 2,
            groups: 2,
            hidden: 6,
            out_dim: 5,
        })
    }

    fn random_window(c: usize, t: usize, seed: u64) -> Tensor<f64> {
        let mut rng = SeededRng::new(seed);
        Tensor::new(vec![c, t], (0..c * t).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn default_transformer_parameter_count() {
        let params: EncoderParams<f64> = EncoderParams::init(
            EncoderKind::Transformer(TransformerConfig::default()),
            signal::IMU_CHANNELS,
            signal::IMU_WINDOW_SAMPLES,
            0,
        )
        .unwrap();
        // patch (120*128+128) + pos (50*128) + 4 blocks of
        // (2*128 + 4*(128*128+128) + 2*128 + (128*256+256+256*128+128))
        // + head (128*512+512).
        let block = 2 * 128 + 4 * (128 * 128 + 128) + 2 * 128 + (128 * 256 + 256 + 256 * 128 + 128);
        let expect = (120 * 128 + 128) + 50 * 128 + 4 * block + (128 * 512 + 512);
        assert_eq!(expect, 617_856);
        assert_eq!(params.param_count(), expect);
    }

    #[test]
    fn default_rnn_parameter_count() {
        let params: EncoderParams<f64> = EncoderParams::init(
            EncoderKind::Rnn(RnnConfig::default()),
            signal::IMU_CHANNELS,
            signal::IMU_WINDOW_SAMPLES,
            0,
        )
        .unwrap();
        let conv = (32 * 30 + 32 + 2 * 32) + (64 * 160 + 64 + 2 * 64) + (128 * 320 + 128 + 2 * 128);
        let gru = 3 * (128 * 128) + 3 * (128 * 128) + 3 * 128;
        let expect = conv + gru + (128 * 512 + 512);
        assert_eq!(params.param_count(), expect);
    }

    #[test]
    fn same_seed_same_parameters() {
        let a: EncoderParams<f64> = EncoderParams::init(tiny_transformer(), 2, 16, 9).unwrap();
        let b: EncoderParams<f64> = EncoderParams::init(tiny_transformer(), 2, 16, 9).unwrap();
        assert_eq!(a.tensors, b.tensors);
        let c: EncoderParams<f64> = EncoderParams::init(tiny_transformer(), 2, 16, 10).unwrap();
        assert_ne!(a.tensors, c.tensors);
    }

    #[test]
    fn embeddings_are_unit_norm_and_deterministic() {
        for kind in [tiny_transformer(), tiny_rnn()] {
            let params: EncoderParams<f64> = EncoderParams::init(kind, 2, 16, 3).unwrap();
            let w = random_window(2, 16, 77);
            let e1 = params.encode(&w).unwrap();
            let e2 = params.encode(&w).unwrap();
            assert_eq!(e1, e2);
            assert_eq!(e1.shape(), &[1, params.out_dim()]);
            let norm: f64 = e1.data().iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9, "{}", params.kind.name());
        }
    }

    #[test]
    fn wrong_window_shape_is_rejected() {
        let params: EncoderParams<f64> = EncoderParams::init(tiny_transformer(), 2, 16, 3).unwrap();
        for bad in [random_window(3, 16, 1), random_window(2, 20, 1)] {
            let err = params.encode(&bad).unwrap_err();
            assert!(matches!(err, Error::Dimension { .. }), "{err}");
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        // Patch length must divide the window.
        assert!(EncoderParams::<f64>::init(tiny_transformer(), 2, 18, 0).is_err());
        // Heads must divide model_dim.
        let bad = EncoderKind::Transformer(TransformerConfig {
            heads: 3,
            ..TransformerConfig::default()
        });
        assert!(EncoderParams::<f64>::init(bad, 6, 1000, 0).is_err());
        // Group norm needs widths divisible by groups.
        let bad = EncoderKind::Rnn(RnnConfig {
            conv_channels: vec![6],
            groups: 4,
            ..RnnConfig::default()
        });
        assert!(EncoderParams::<f64>::init(bad, 6, 1000, 0).is_err());
    }

    #[test]
    fn poisoned_parameters_report_layer() {
        let mut params: EncoderParams<f64> =
            EncoderParams::init(tiny_transformer(), 2, 16, 3).unwrap();
        params.tensors.get_mut("layer0.mlp.w2").unwrap().data_mut()[0] = f64::NAN;
        let err = params.encode(&random_window(2, 16, 5)).unwrap_err();
        match err {
            Error::NumericFailure { context, layer } => {
                assert_eq!(context, "transformer");
                assert_eq!(layer, 0);
            }
            other => panic!("unexpected error {other}"),
        }
    }

    /// Analytic gradients through each full encoder against central
    /// differences, driving the same contrastive objective training uses.
    fn fd_full_encoder(kind: EncoderKind, c: usize, t: usize, tol: f64) {
        let mut params: EncoderParams<f64> = EncoderParams::init(kind, c, t, 11).unwrap();
        // At init the pre-normalization projection has a tiny norm, and the
        // 1/norm factor inflates third derivatives until O(h^2) truncation
        // error swamps central differences. Scaling the projection leaves
        // the normalized embedding (and the loss) bit-identical while
        // conditioning the gradients, so h = 1e-5 stays in its sweet spot.
        for name in ["out.w", "out.b"] {
            let boosted = params.tensors[name].scale(25.0);
            params.tensors.insert(name.to_string(), boosted);
        }
        let w0 = random_window(c, t, 100);
        let w1 = random_window(c, t, 101);
        let d = params.out_dim();
        let mut rng = SeededRng::new(55);
        let targets = Tensor::new(vec![2, d], (0..2 * d).map(|_| rng.normal()).collect())
            .unwrap()
            .l2_normalize_rows()
            .unwrap();

        let run = |tensors: &BTreeMap<String, Tensor<f64>>| -> crate::Result<(Tape<f64>, BTreeMap<String, Var>, Var)> {
            let p = EncoderParams {
                kind: params.kind.clone(),
                input_channels: c,
                input_len: t,
                tensors: tensors.clone(),
            };
            let mut tape = Tape::new();
            let vars = p.register(&mut tape);
            let mut drop_rng = SeededRng::new(0);
            let wa = tape.constant(w0.clone());
            let wb = tape.constant(w1.clone());
            let ea = p.build(&mut tape, &vars, wa, 0.0, &mut drop_rng)?;
            let eb = p.build(&mut tape, &vars, wb, 0.0, &mut drop_rng)?;
            let i = tape.concat_rows(vec![ea, eb])?;
            let m = tape.constant(targets.clone());
            // A sharp temperature keeps every gradient element well above
            // the central-difference noise floor (~1e-11 absolute).
            let loss = tape.info_nce(i, m, 0.1)?;
            Ok((tape, vars, loss))
        };

        let (tape, vars, loss) = run(&params.tensors).unwrap();
        let mut grads = tape.backward(loss).unwrap();
        let mut analytic = BTreeMap::new();
        for (name, var) in &vars {
            if let Some(g) = grads.take(*var) {
                analytic.insert(name.clone(), g);
            }
        }
        let numeric = gradcheck::central_diff(
            &params.tensors,
            |p| {
                let (tape, _, loss) = run(p)?;
                tape.value(loss).item()
            },
            1e-5,
        )
        .unwrap();
        let report = gradcheck::compare(&analytic, &numeric).unwrap();
        assert!(
            report.max_rel_err < tol,
            "max rel err {} at {}[{}] over {} elements",
            report.max_rel_err,
            report.worst_param,
            report.worst_index,
            report.checked
        );
    }

    #[test]
    fn fd_transformer_full_path() {
        fd_full_encoder(tiny_transformer(), 2, 16, 1e-4);
    }

    #[test]
    fn fd_rnn_full_path() {
        fd_full_encoder(tiny_rnn(), 2, 12, 1e-4);
    }

    #[test]
    fn bundle_rejects_stats_mismatch() {
        let params: EncoderParams<f64> = EncoderParams::init(tiny_rnn(), 2, 12, 0).unwrap();
        let stats = ChannelStats::identity(3);
        assert!(EncoderBundle::new(params, stats).is_err());
    }
}
