//! Contrastive training loops and optimizers.
//!
//! A trainee encoder is fitted against frozen counterpart embeddings by
//! mini-batch gradient descent on the symmetric contrastive objective.
//! Everything downstream of the seed is deterministic: epoch shuffles and
//! dropout masks come from fixed substreams, batches are visited in shuffle
//! order, and gradient accumulation order is fixed, so a (seed, config,
//! data) triple reproduces every checkpoint byte.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::autodiff::Tape;
use crate::contrastive;
use crate::dataset::format::{self, BlobScalar};
use crate::encoders::{EncoderBundle, EncoderParams};
use crate::rng::SeededRng;
use crate::signal::ChannelStats;
use crate::tensor::Tensor;
use crate::{Error, Result, Scalar};

/// Substream labels ("shuf" and "drop") keeping shuffle and dropout draws
/// independent of each other and of parameter initialization.
const SHUFFLE_STREAM: u64 = 0x7368_7566;
const DROPOUT_STREAM: u64 = 0x6472_6f70;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub temperature: f64,
    pub seed: u64,
    /// Write an epoch checkpoint every this many epochs (0 disables).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            epochs: 1,
            lr: 1e-3,
            optimizer: OptimizerKind::default(),
            temperature: 1.0,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size {} too small: a batch of one has no negatives and zero loss",
                self.batch_size
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!(
                "lr must be positive and finite, got {}",
                self.lr
            )));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be positive and finite, got {}",
                self.temperature
            )));
        }
        if let OptimizerKind::Adam { beta1, beta2, eps } = self.optimizer {
            for (name, b) in [("beta1", beta1), ("beta2", beta2)] {
                if !(0.0..1.0).contains(&b) {
                    return Err(Error::Config(format!("{name} must be in [0, 1), got {b}")));
                }
            }
            if !(eps.is_finite() && eps > 0.0) {
                return Err(Error::Config(format!(
                    "eps must be positive and finite, got {eps}"
                )));
            }
        }
        Ok(())
    }
}

/// First and second moment accumulators for the adaptive optimizer. SGD
/// leaves it untouched apart from the step counter.
#[derive(Clone, Debug, Default)]
pub struct OptState<S> {
    step: u64,
    m: BTreeMap<String, Tensor<S>>,
    v: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> OptState<S> {
    pub fn new() -> Self {
        Self {
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

/// Applies one optimizer step in place. Gradients must name a subset of the
/// parameters; every named gradient must match its parameter's shape.
pub fn update_step<S: Scalar>(
    params: &mut BTreeMap<String, Tensor<S>>,
    grads: &BTreeMap<String, Tensor<S>>,
    state: &mut OptState<S>,
    cfg: &TrainConfig,
) -> Result<()> {
    let lr = S::from_f64(cfg.lr);
    state.step += 1;
    for (name, g) in grads {
        let p = params
            .get_mut(name)
            .ok_or_else(|| Error::Lookup(format!("gradient for unknown parameter {name:?}")))?;
        if p.shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                op: "update_step",
                left: p.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
        match cfg.optimizer {
            OptimizerKind::Sgd => {
                for (pv, &gv) in p.data_mut().iter_mut().zip(g.data()) {
                    *pv -= lr * gv;
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let b1 = S::from_f64(beta1);
                let b2 = S::from_f64(beta2);
                let eps = S::from_f64(eps);
                let one = S::one();
                let m = state
                    .m
                    .entry(name.clone())
                    .or_insert_with(|| g.zeros_like());
                let v = state
                    .v
                    .entry(name.clone())
                    .or_insert_with(|| g.zeros_like());
                let bias1 = one - S::from_f64(beta1.powi(state.step as i32));
                let bias2 = one - S::from_f64(beta2.powi(state.step as i32));
                for ((pv, mv), (vv, &gv)) in p
                    .data_mut()
                    .iter_mut()
                    .zip(m.data_mut())
                    .zip(v.data_mut().iter_mut().zip(g.data()))
                {
                    *mv = b1 * *mv + (one - b1) * gv;
                    *vv = b2 * *vv + (one - b2) * gv * gv;
                    let m_hat = *mv / bias1;
                    let v_hat = *vv / bias2;
                    *pv -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub elapsed_s: f64,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    /// Epoch whose parameters were kept (lowest validation loss, or the last
    /// epoch when no validation data was given).
    pub best_epoch: usize,
    pub best_val_loss: Option<f64>,
    pub final_checkpoint: Option<PathBuf>,
}

impl TrainReport {
    /// One line per epoch: epoch, train loss, val loss, elapsed seconds.
    /// The elapsed column is wall-clock and is the only nondeterministic
    /// byte in any training artifact.
    pub fn render_log(&self) -> String {
        let mut out = String::new();
        for e in &self.epochs {
            let val = e.val_loss.map_or("-".to_string(), |v| v.to_string());
            let _ = writeln!(
                out,
                "epoch={} train_loss={} val_loss={} elapsed_s={:.3}",
                e.epoch, e.train_loss, val, e.elapsed_s
            );
        }
        let _ = writeln!(out, "best_epoch={}", self.best_epoch);
        out
    }
}

/// Windows paired row-for-row with frozen target embeddings.
#[derive(Clone, Copy)]
pub struct PairedData<'a, S> {
    pub windows: &'a [Tensor<S>],
    pub targets: &'a Tensor<S>,
}

impl<'a, S: Scalar> PairedData<'a, S> {
    pub fn new(windows: &'a [Tensor<S>], targets: &'a Tensor<S>) -> Result<Self> {
        let (n, _) = targets.dims2("paired targets")?;
        if n != windows.len() {
            return Err(Error::Mismatch(format!(
                "{} windows but {} target rows",
                windows.len(),
                n
            )));
        }
        contrastive::validate_rows(targets)?;
        Ok(Self { windows, targets })
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }
}

/// Where a training run writes its artifacts: `<tag>_train_log.txt`, epoch
/// checkpoints, and the final (best) checkpoint. Channel statistics ride
/// along so checkpoints stay self-contained.
pub struct RunArtifacts<'a, S> {
    pub dir: &'a Path,
    pub stats: &'a ChannelStats<S>,
    pub tag: &'a str,
}

impl<'a, S: BlobScalar> RunArtifacts<'a, S> {
    fn save(&self, suffix: &str, params: &EncoderParams<S>) -> Result<PathBuf> {
        let bundle = EncoderBundle::new(params.clone(), self.stats.clone())?;
        let path = self.dir.join(format!("{}_{}.aurc", self.tag, suffix));
        format::save_bundle(&path, &bundle)?;
        Ok(path)
    }

    fn save_log(&self, report: &TrainReport) -> Result<()> {
        let path = self.dir.join(format!("{}_train_log.txt", self.tag));
        std::fs::write(&path, report.render_log())
            .map_err(|e| Error::io(path.display().to_string(), e))
    }
}

fn check_enough_data<S: Scalar>(data: &PairedData<S>, cfg: &TrainConfig) -> Result<()> {
    if data.len() < cfg.batch_size {
        return Err(Error::Config(format!(
            "{} training pairs cannot fill one batch of {}",
            data.len(),
            cfg.batch_size
        )));
    }
    Ok(())
}

/// Map an in-batch failure to a located training error; real configuration
/// and shape errors pass through untouched.
fn locate(err: Error, epoch: usize, batch: usize) -> Error {
    match err {
        Error::NumericFailure { .. } | Error::Training { .. } => Error::Training {
            epoch,
            batch,
            reason: err.to_string(),
        },
        other => other,
    }
}

fn batch_loss_and_update<S: Scalar>(
    trainee: &mut EncoderParams<S>,
    data: &PairedData<S>,
    chunk: &[usize],
    cfg: &TrainConfig,
    dropout: f64,
    dropout_rng: &mut SeededRng,
    opt: &mut OptState<S>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = trainee.register(&mut tape);
    let mut rows = Vec::with_capacity(chunk.len());
    for &i in chunk {
        let w = tape.constant(data.windows[i].clone());
        rows.push(trainee.build(&mut tape, &vars, w, dropout, dropout_rng)?);
    }
    let emb = tape.concat_rows(rows)?;
    let tgt = tape.constant(data.targets.gather_rows(chunk)?);
    let loss_var = tape.info_nce(emb, tgt, S::from_f64(cfg.temperature))?;
    let loss = tape.value(loss_var).item()?.to_f64();
    if !loss.is_finite() {
        return Err(Error::Training {
            epoch: 0,
            batch: 0,
            reason: format!("loss {loss}"),
        });
    }
    let mut grads = tape.backward(loss_var)?;
    let mut gmap = BTreeMap::new();
    for (name, var) in &vars {
        if let Some(g) = grads.take(*var) {
            gmap.insert(name.clone(), g);
        }
    }
    update_step(&mut trainee.tensors, &gmap, opt, cfg)?;
    Ok(loss)
}

/// Embeds a window list with dropout off, stacking the rows.
pub fn encode_all<S: Scalar>(
    params: &EncoderParams<S>,
    windows: &[Tensor<S>],
) -> Result<Tensor<S>> {
    if windows.is_empty() {
        return Err(Error::Empty("encode_all"));
    }
    let rows: Vec<Tensor<S>> = windows
        .iter()
        .map(|w| params.encode(w))
        .collect::<Result<_>>()?;
    let refs: Vec<&Tensor<S>> = rows.iter().collect();
    Tensor::concat_rows(&refs)
}

fn validation_loss<S: Scalar>(
    trainee: &EncoderParams<S>,
    val: &PairedData<S>,
    temperature: f64,
) -> Result<f64> {
    let emb = encode_all(trainee, val.windows)?;
    Ok(contrastive::loss_symmetric(&emb, val.targets, S::from_f64(temperature))?.to_f64())
}

/// Trains `trainee` so its embeddings align with the frozen targets. Returns
/// the retained parameters (best validation loss when `val` is given, final
/// otherwise) and the per-epoch report.
pub fn train_pair<S: BlobScalar>(
    mut trainee: EncoderParams<S>,
    train: &PairedData<S>,
    val: Option<&PairedData<S>>,
    cfg: &TrainConfig,
    run: Option<&RunArtifacts<S>>,
) -> Result<(EncoderParams<S>, TrainReport)> {
    cfg.validate()?;
    check_enough_data(train, cfg)?;
    let (_, d) = train.targets.dims2("train targets")?;
    if d != trainee.out_dim() {
        return Err(Error::Mismatch(format!(
            "targets are {d}-dimensional but the encoder embeds into {}",
            trainee.out_dim()
        )));
    }

    let dropout = trainee.kind.dropout();
    let mut shuffle_rng = SeededRng::substream(cfg.seed, SHUFFLE_STREAM);
    let mut dropout_rng = SeededRng::substream(cfg.seed, DROPOUT_STREAM);
    let mut opt = OptState::new();
    let mut idx: Vec<usize> = (0..train.len()).collect();
    let mut report = TrainReport {
        epochs: Vec::with_capacity(cfg.epochs),
        best_epoch: 0,
        best_val_loss: None,
        final_checkpoint: None,
    };
    let mut best: Option<(f64, EncoderParams<S>)> = None;

    for epoch in 1..=cfg.epochs {
        let t0 = Instant::now();
        shuffle_rng.shuffle(&mut idx);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (b, chunk) in idx.chunks_exact(cfg.batch_size).enumerate() {
            let loss = batch_loss_and_update(
                &mut trainee,
                train,
                chunk,
                cfg,
                dropout,
                &mut dropout_rng,
                &mut opt,
            )
            .map_err(|e| locate(e, epoch, b))?;
            loss_sum += loss;
            batches += 1;
        }
        let train_loss = loss_sum / batches as f64;
        let val_loss = match val {
            Some(v) => Some(validation_loss(&trainee, v, cfg.temperature)?),
            None => None,
        };
        if let Some(vl) = val_loss {
            if !vl.is_finite() {
                return Err(Error::Training {
                    epoch,
                    batch: 0,
                    reason: format!("validation loss {vl}"),
                });
            }
            if best.as_ref().is_none_or(|(b, _)| vl < *b) {
                best = Some((vl, trainee.clone()));
                report.best_epoch = epoch;
                report.best_val_loss = Some(vl);
            }
        } else {
            report.best_epoch = epoch;
        }
        report.epochs.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
            elapsed_s: t0.elapsed().as_secs_f64(),
        });
        if let Some(run) = run {
            if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
                run.save(&format!("epoch_{epoch:04}"), &trainee)?;
            }
        }
    }

    if let Some((_, params)) = best {
        trainee = params;
    }
    if let Some(run) = run {
        report.final_checkpoint = Some(run.save("final", &trainee)?);
        run.save_log(&report)?;
    }
    Ok((trainee, report))
}

/// Row-for-row aligned windows of the two trainable modalities plus the
/// frozen anchor targets the first stage aligns to.
#[derive(Clone, Copy)]
pub struct ProgressiveData<'a, S> {
    pub imu_windows: &'a [Tensor<S>],
    pub mocap_windows: &'a [Tensor<S>],
    pub anchor_targets: &'a Tensor<S>,
}

impl<'a, S: Scalar> ProgressiveData<'a, S> {
    pub fn new(
        imu_windows: &'a [Tensor<S>],
        mocap_windows: &'a [Tensor<S>],
        anchor_targets: &'a Tensor<S>,
    ) -> Result<Self> {
        if imu_windows.len() != mocap_windows.len() {
            return Err(Error::Mismatch(format!(
                "{} imu windows but {} mocap windows",
                imu_windows.len(),
                mocap_windows.len()
            )));
        }
        PairedData::new(imu_windows, anchor_targets)?;
        Ok(Self {
            imu_windows,
            mocap_windows,
            anchor_targets,
        })
    }
}

pub struct ProgressiveOutcome<S> {
    pub imu: EncoderParams<S>,
    pub mocap: EncoderParams<S>,
    pub stage1: TrainReport,
    pub stage2: TrainReport,
    pub imu_checksum_before_stage2: u64,
    pub imu_checksum_after_stage2: u64,
}

/// Two-stage recipe: stage 1 aligns the IMU encoder with the frozen anchor;
/// stage 2 freezes the trained IMU encoder and aligns the mocap encoder with
/// its embeddings. The checksums in the outcome witness the stage-2 freeze.
pub fn train_progressive<S: BlobScalar>(
    imu: EncoderParams<S>,
    mocap: EncoderParams<S>,
    train: &ProgressiveData<S>,
    val: Option<&ProgressiveData<S>>,
    stage1_cfg: &TrainConfig,
    stage2_cfg: &TrainConfig,
    runs: Option<(&RunArtifacts<S>, &RunArtifacts<S>)>,
) -> Result<ProgressiveOutcome<S>> {
    if mocap.out_dim() != imu.out_dim() {
        return Err(Error::Mismatch(format!(
            "stage 2 needs matching embedding widths, imu {} vs mocap {}",
            imu.out_dim(),
            mocap.out_dim()
        )));
    }

    let stage1_train = PairedData::new(train.imu_windows, train.anchor_targets)?;
    let stage1_val = val
        .map(|v| PairedData::new(v.imu_windows, v.anchor_targets))
        .transpose()?;
    let (imu_trained, stage1) = train_pair(
        imu,
        &stage1_train,
        stage1_val.as_ref(),
        stage1_cfg,
        runs.map(|(r, _)| r),
    )?;

    let imu_checksum_before_stage2 = imu_trained.checksum();
    let imu_train_emb = encode_all(&imu_trained, train.imu_windows)?;
    let imu_val_emb = val
        .map(|v| encode_all(&imu_trained, v.imu_windows))
        .transpose()?;

    let stage2_train = PairedData::new(train.mocap_windows, &imu_train_emb)?;
    let stage2_val = match (&val, &imu_val_emb) {
        (Some(v), Some(emb)) => Some(PairedData::new(v.mocap_windows, emb)?),
        _ => None,
    };
    let (mocap_trained, stage2) = train_pair(
        mocap,
        &stage2_train,
        stage2_val.as_ref(),
        stage2_cfg,
        runs.map(|(_, r)| r),
    )?;
    let imu_checksum_after_stage2 = imu_trained.checksum();

    Ok(ProgressiveOutcome {
        imu: imu_trained,
        mocap: mocap_trained,
        stage1,
        stage2,
        imu_checksum_before_stage2,
        imu_checksum_after_stage2,
    })
}

/// Anchor-free mode: both encoders sit on one tape and receive gradients
/// from the same contrastive loss over aligned window pairs.
pub fn train_joint<S: BlobScalar>(
    mut a: EncoderParams<S>,
    mut b: EncoderParams<S>,
    a_windows: &[Tensor<S>],
    b_windows: &[Tensor<S>],
    val: Option<(&[Tensor<S>], &[Tensor<S>])>,
    cfg: &TrainConfig,
    runs: Option<(&RunArtifacts<S>, &RunArtifacts<S>)>,
) -> Result<(EncoderParams<S>, EncoderParams<S>, TrainReport)> {
    cfg.validate()?;
    if a_windows.len() != b_windows.len() {
        return Err(Error::Mismatch(format!(
            "{} windows on one side but {} on the other",
            a_windows.len(),
            b_windows.len()
        )));
    }
    if a_windows.len() < cfg.batch_size {
        return Err(Error::Config(format!(
            "{} training pairs cannot fill one batch of {}",
            a_windows.len(),
            cfg.batch_size
        )));
    }
    if a.out_dim() != b.out_dim() {
        return Err(Error::Mismatch(format!(
            "joint training needs matching embedding widths, {} vs {}",
            a.out_dim(),
            b.out_dim()
        )));
    }

    let (da, db) = (a.kind.dropout(), b.kind.dropout());
    let mut shuffle_rng = SeededRng::substream(cfg.seed, SHUFFLE_STREAM);
    let mut dropout_rng = SeededRng::substream(cfg.seed, DROPOUT_STREAM);
    let mut opt_a = OptState::new();
    let mut opt_b = OptState::new();
    let mut idx: Vec<usize> = (0..a_windows.len()).collect();
    let mut report = TrainReport {
        epochs: Vec::with_capacity(cfg.epochs),
        best_epoch: 0,
        best_val_loss: None,
        final_checkpoint: None,
    };
    let mut best: Option<(f64, EncoderParams<S>, EncoderParams<S>)> = None;

    for epoch in 1..=cfg.epochs {
        let t0 = Instant::now();
        shuffle_rng.shuffle(&mut idx);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (bi, chunk) in idx.chunks_exact(cfg.batch_size).enumerate() {
            let step = (|| -> Result<f64> {
                let mut tape = Tape::new();
                let vars_a = a.register(&mut tape);
                let vars_b = b.register(&mut tape);
                let mut rows_a = Vec::with_capacity(chunk.len());
                let mut rows_b = Vec::with_capacity(chunk.len());
                for &i in chunk {
                    let wa = tape.constant(a_windows[i].clone());
                    rows_a.push(a.build(&mut tape, &vars_a, wa, da, &mut dropout_rng)?);
                    let wb = tape.constant(b_windows[i].clone());
                    rows_b.push(b.build(&mut tape, &vars_b, wb, db, &mut dropout_rng)?);
                }
                let ea = tape.concat_rows(rows_a)?;
                let eb = tape.concat_rows(rows_b)?;
                let loss_var = tape.info_nce(ea, eb, S::from_f64(cfg.temperature))?;
                let loss = tape.value(loss_var).item()?.to_f64();
                if !loss.is_finite() {
                    return Err(Error::Training {
                        epoch: 0,
                        batch: 0,
                        reason: format!("loss {loss}"),
                    });
                }
                let mut grads = tape.backward(loss_var)?;
                let mut ga = BTreeMap::new();
                for (name, var) in &vars_a {
                    if let Some(g) = grads.take(*var) {
                        ga.insert(name.clone(), g);
                    }
                }
                let mut gb = BTreeMap::new();
                for (name, var) in &vars_b {
                    if let Some(g) = grads.take(*var) {
                        gb.insert(name.clone(), g);
                    }
                }
                update_step(&mut a.tensors, &ga, &mut opt_a, cfg)?;
                update_step(&mut b.tensors, &gb, &mut opt_b, cfg)?;
                Ok(loss)
            })()
            .map_err(|e| locate(e, epoch, bi))?;
            loss_sum += step;
            batches += 1;
        }
        let train_loss = loss_sum / batches as f64;
        let val_loss = match val {
            Some((va, vb)) => {
                let ea = encode_all(&a, va)?;
                let eb = encode_all(&b, vb)?;
                Some(contrastive::loss_symmetric(&ea, &eb, S::from_f64(cfg.temperature))?.to_f64())
            }
            None => None,
        };
        if let Some(vl) = val_loss {
            if !vl.is_finite() {
                return Err(Error::Training {
                    epoch,
                    batch: 0,
                    reason: format!("validation loss {vl}"),
                });
            }
            if best.as_ref().is_none_or(|(b, _, _)| vl < *b) {
                best = Some((vl, a.clone(), b.clone()));
                report.best_epoch = epoch;
                report.best_val_loss = Some(vl);
            }
        } else {
            report.best_epoch = epoch;
        }
        report.epochs.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
            elapsed_s: t0.elapsed().as_secs_f64(),
        });
    }

    if let Some((_, pa, pb)) = best {
        a = pa;
        b = pb;
    }
    if let Some((run_a, run_b)) = runs {
        report.final_checkpoint = Some(run_a.save("final", &a)?);
        run_b.save("final", &b)?;
        run_a.save_log(&report)?;
    }
    Ok((a, b, report))
}
