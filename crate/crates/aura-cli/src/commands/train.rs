//! `aura train`: contrastive alignment runs. One pair of modalities per
//! invocation, with the anchor side frozen (text or video embeddings, or a
//! frozen encoder checkpoint), plus the two-stage progressive recipe and the
//! anchor-free independent mode.

use std::path::{Path, PathBuf};

use aura_core::dataset::format::{read_checkpoint, write_checkpoint};
use aura_core::dataset::{Dataset, Split};
use aura_core::encoders::{EncoderKind, EncoderParams, RnnConfig, TransformerConfig};
use aura_core::signal::{IMU_WINDOW_SAMPLES, MOCAP_WINDOW_FRAMES};
use aura_core::training::{
    train_joint, train_pair, train_progressive, PairedData, ProgressiveData, RunArtifacts,
    TrainConfig, TrainReport,
};
use aura_core::{Error, Result, Tensor64};
use clap::Args;

use crate::config::{parse_usize_list, Resolver};
use crate::data::{
    anchor_targets, raw_windows, read_dataset, standardize_all, train_stats, AnchorSpec, WindowKind,
};

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset directory (from `aura preprocess`).
    #[arg(long)]
    data: PathBuf,
    /// Modality pair: text-imu, video-imu, or mocap-imu.
    #[arg(long)]
    pair: Option<String>,
    /// Encoder architecture: transformer or rnn.
    #[arg(long)]
    encoder: Option<String>,
    /// Two-stage recipe (mocap-imu): anchor→imu, then frozen imu→mocap.
    #[arg(long)]
    progressive: bool,
    /// Anchor-free mode (mocap-imu): both encoders train jointly.
    #[arg(long)]
    independent: bool,
    /// Stage-2 only (mocap-imu): align mocap to this frozen imu checkpoint.
    #[arg(long)]
    imu_checkpoint: Option<PathBuf>,
    /// Anchor side for text/video pairs and progressive stage 1.
    #[arg(long)]
    anchor: Option<String>,
    /// Seed of the pseudo text anchor projection (defaults to --seed).
    #[arg(long)]
    anchor_seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Also write a checkpoint every N epochs (0 = final only).
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Skip validation-based selection even when a val split exists.
    #[arg(long)]
    no_val: bool,
    /// Run directory; defaults to $AURA_RUN_DIR, then ./runs.
    #[arg(long)]
    run_dir: Option<PathBuf>,
    /// Artifact name prefix inside the run directory.
    #[arg(long)]
    tag: Option<String>,
    /// Key=value configuration file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Upper bound on worker threads (compute is single-threaded today).
    #[arg(long)]
    threads: Option<usize>,

    // Architecture overrides for the primary encoder. The mocap side of the
    // two-encoder modes reads mocap_-prefixed keys from the config file.
    #[arg(long)]
    patch_len: Option<usize>,
    #[arg(long)]
    model_dim: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    mlp_dim: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    out_dim: Option<usize>,
    /// Rnn conv channel list, e.g. 32,64.
    #[arg(long)]
    conv_channels: Option<String>,
    #[arg(long)]
    kernel: Option<usize>,
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long)]
    groups: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
}

pub fn run_dir_default(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os("AURA_RUN_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

pub struct ArchFlags {
    pub patch_len: Option<usize>,
    pub model_dim: Option<usize>,
    pub heads: Option<usize>,
    pub layers: Option<usize>,
    pub mlp_dim: Option<usize>,
    pub dropout: Option<f64>,
    pub out_dim: Option<usize>,
    pub conv_channels: Option<String>,
    pub kernel: Option<usize>,
    pub stride: Option<usize>,
    pub groups: Option<usize>,
    pub hidden: Option<usize>,
}

impl ArchFlags {
    pub fn none() -> Self {
        Self {
            patch_len: None,
            model_dim: None,
            heads: None,
            layers: None,
            mlp_dim: None,
            dropout: None,
            out_dim: None,
            conv_channels: None,
            kernel: None,
            stride: None,
            groups: None,
            hidden: None,
        }
    }
}

/// Resolves one encoder architecture. `prefix` namespaces the config-file
/// keys (the mocap side uses `mocap_`); defaults fit the modality's window
/// geometry.
pub fn resolve_encoder(
    r: &mut Resolver,
    prefix: &str,
    encoder: &str,
    kind: WindowKind,
    flags: &ArchFlags,
) -> Result<EncoderKind> {
    let key = |name: &str| format!("{prefix}{name}");
    let out_dim = r.resolve(&key("out_dim"), flags.out_dim, 64)?;
    let arch = match encoder {
        "transformer" => {
            let default_patch = match kind {
                WindowKind::Imu => 50,
                WindowKind::Mocap => 10,
            };
            EncoderKind::Transformer(TransformerConfig {
                patch_len: r.resolve(&key("patch_len"), flags.patch_len, default_patch)?,
                model_dim: r.resolve(&key("model_dim"), flags.model_dim, 64)?,
                heads: r.resolve(&key("heads"), flags.heads, 4)?,
                layers: r.resolve(&key("layers"), flags.layers, 2)?,
                mlp_dim: r.resolve(&key("mlp_dim"), flags.mlp_dim, 128)?,
                dropout: r.resolve(&key("dropout"), flags.dropout, 0.1)?,
                out_dim,
            })
        }
        "rnn" => {
            let (default_kernel, default_stride) = match kind {
                WindowKind::Imu => (5, 2),
                WindowKind::Mocap => (3, 1),
            };
            let conv_raw = r.resolve(
                &key("conv_channels"),
                flags.conv_channels.clone(),
                "32,64".to_string(),
            )?;
            EncoderKind::Rnn(RnnConfig {
                conv_channels: parse_usize_list(&conv_raw, "conv_channels")?,
                kernel: r.resolve(&key("kernel"), flags.kernel, default_kernel)?,
                stride: r.resolve(&key("stride"), flags.stride, default_stride)?,
                groups: r.resolve(&key("groups"), flags.groups, 4)?,
                hidden: r.resolve(&key("hidden"), flags.hidden, 64)?,
                out_dim,
            })
        }
        other => {
            return Err(Error::Config(format!(
                "unknown encoder {other:?}, expected transformer or rnn"
            )))
        }
    };
    arch.validate(kind.channels(), window_len(kind))?;
    Ok(arch)
}

pub fn window_len(kind: WindowKind) -> usize {
    match kind {
        WindowKind::Imu => IMU_WINDOW_SAMPLES,
        WindowKind::Mocap => MOCAP_WINDOW_FRAMES,
    }
}

/// The validated, fully resolved shape of one training run.
struct Plan {
    pair: String,
    mode: Mode,
    train_cfg: TrainConfig,
    anchor: AnchorSpec,
    use_val: bool,
    run_dir: PathBuf,
    tag: String,
}

enum Mode {
    /// Train one window encoder against frozen targets.
    Single(WindowKind),
    Progressive,
    Independent,
    StageTwo(PathBuf),
}

fn resolve_plan(
    r: &mut Resolver,
    args: &TrainArgs,
) -> Result<(Plan, EncoderKind, Option<EncoderKind>)> {
    r.note("command", "train");
    r.note("data", args.data.display());
    let pair = r.require("pair", args.pair.clone())?;
    let encoder_name = r.resolve("encoder", args.encoder.clone(), "transformer".to_string())?;
    let seed = r.resolve("seed", args.seed, 0)?;
    let train_cfg = TrainConfig {
        batch_size: r.resolve("batch_size", args.batch_size, 64)?,
        epochs: r.resolve("epochs", args.epochs, 20)?,
        lr: r.resolve("lr", args.lr, 1e-3)?,
        temperature: r.resolve("temperature", args.temperature, 0.1)?,
        seed,
        checkpoint_every: r.resolve("checkpoint_every", args.checkpoint_every, 0)?,
        ..TrainConfig::default()
    };
    train_cfg.validate()?;
    let threads = r.resolve("threads", args.threads, 1)?;
    if threads == 0 {
        return Err(Error::Config("threads must be at least 1".into()));
    }
    let use_val = !r.resolve("no_val", args.no_val.then_some(true), false)?;
    let anchor_name = r.resolve("anchor", args.anchor.clone(), "text".to_string())?;
    let anchor_seed = r.resolve("anchor_seed", args.anchor_seed, seed)?;

    let progressive = r.resolve("progressive", args.progressive.then_some(true), false)?;
    let independent = r.resolve("independent", args.independent.then_some(true), false)?;
    let stage2 = r.resolve_opt(
        "imu_checkpoint",
        args.imu_checkpoint
            .as_ref()
            .map(|p| p.display().to_string()),
    )?;

    let run_dir = run_dir_default(args.run_dir.clone());
    r.note("run_dir", run_dir.display());

    let (mode, primary_kind) = match pair.as_str() {
        "text-imu" | "video-imu" => {
            if progressive || independent || stage2.is_some() {
                return Err(Error::Config(format!(
                    "{pair} trains a single encoder; --progressive, --independent, and --imu-checkpoint apply to mocap-imu"
                )));
            }
            (Mode::Single(WindowKind::Imu), WindowKind::Imu)
        }
        "mocap-imu" => match (progressive, independent, stage2) {
            (true, false, None) => (Mode::Progressive, WindowKind::Imu),
            (false, true, None) => (Mode::Independent, WindowKind::Imu),
            (false, false, Some(ckpt)) => (Mode::StageTwo(PathBuf::from(ckpt)), WindowKind::Mocap),
            (false, false, None) => {
                return Err(Error::Config(
                    "mocap-imu needs a mode: --progressive, --independent, or --imu-checkpoint"
                        .into(),
                ))
            }
            _ => {
                return Err(Error::Config(
                    "choose exactly one of --progressive, --independent, --imu-checkpoint".into(),
                ))
            }
        },
        other => {
            return Err(Error::Config(format!(
                "unknown pair {other:?}, expected text-imu, video-imu, or mocap-imu"
            )))
        }
    };

    let flags = ArchFlags {
        patch_len: args.patch_len,
        model_dim: args.model_dim,
        heads: args.heads,
        layers: args.layers,
        mlp_dim: args.mlp_dim,
        dropout: args.dropout,
        out_dim: args.out_dim,
        conv_channels: args.conv_channels.clone(),
        kernel: args.kernel,
        stride: args.stride,
        groups: args.groups,
        hidden: args.hidden,
    };
    let primary = resolve_encoder(r, "", &encoder_name, primary_kind, &flags)?;
    let secondary = match mode {
        Mode::Progressive | Mode::Independent => Some(resolve_encoder(
            r,
            "mocap_",
            &encoder_name,
            WindowKind::Mocap,
            &ArchFlags {
                out_dim: Some(primary.out_dim()),
                ..ArchFlags::none()
            },
        )?),
        _ => None,
    };

    let anchor = match (&mode, anchor_name.as_str()) {
        (Mode::StageTwo(path), _) => AnchorSpec::Encoder(path.clone()),
        (Mode::Independent, _) => AnchorSpec::PseudoText {
            dim: primary.out_dim(),
            seed: anchor_seed,
        },
        (_, "text") => AnchorSpec::PseudoText {
            dim: primary.out_dim(),
            seed: anchor_seed,
        },
        (_, "video") => AnchorSpec::Video,
        (_, other) => {
            return Err(Error::Config(format!(
                "unknown anchor {other:?}, expected text or video"
            )))
        }
    };
    if pair == "video-imu" && !matches!(anchor, AnchorSpec::Video) {
        return Err(Error::Config("video-imu pairs with --anchor video".into()));
    }
    let anchor = if pair == "video-imu" {
        AnchorSpec::Video
    } else {
        anchor
    };

    let tag = r.resolve("tag", args.tag.clone(), "model".to_string())?;
    r.finish()?;

    Ok((
        Plan {
            pair,
            mode,
            train_cfg,
            anchor,
            use_val,
            run_dir,
            tag,
        },
        primary,
        secondary,
    ))
}

fn has_split(ds: &Dataset, split: Split) -> bool {
    ds.items.iter().any(|r| r.split == split)
}

/// Appends run metadata to a finished checkpoint so evaluation can rebuild
/// the anchor without the original command line.
pub fn stamp_checkpoint(
    path: &Path,
    pair: &str,
    role: &str,
    anchor: &AnchorSpec,
    vocab_len: usize,
    cfg: &TrainConfig,
) -> Result<()> {
    let mut ckpt = read_checkpoint::<f64>(path)?;
    ckpt.config.insert("pair".into(), pair.into());
    ckpt.config.insert("role".into(), role.into());
    ckpt.config.insert("anchor".into(), anchor.name().into());
    if let AnchorSpec::PseudoText { dim, seed } = anchor {
        ckpt.config.insert("anchor_dim".into(), dim.to_string());
        ckpt.config.insert("anchor_seed".into(), seed.to_string());
        ckpt.config
            .insert("anchor_vocab".into(), vocab_len.to_string());
    }
    ckpt.config
        .insert("temperature".into(), cfg.temperature.to_string());
    ckpt.config
        .insert("train_seed".into(), cfg.seed.to_string());
    write_checkpoint(path, &ckpt)
}

/// One encoder against frozen anchor targets: the whole of text-imu and
/// video-imu training, and stage 2 of mocap-imu.
pub struct SingleRun<'a> {
    pub ds: &'a Dataset,
    pub kind: WindowKind,
    pub arch: EncoderKind,
    pub anchor: &'a AnchorSpec,
    pub cfg: &'a TrainConfig,
    pub use_val: bool,
    pub run_dir: &'a Path,
    pub tag: &'a str,
    pub pair: &'a str,
}

pub fn train_single(run: SingleRun) -> Result<(PathBuf, TrainReport)> {
    let SingleRun {
        ds,
        kind,
        arch,
        anchor,
        cfg,
        use_val,
        run_dir,
        tag,
        pair,
    } = run;
    let stats = train_stats(ds, kind)?;
    let train_windows = standardize_all(&stats, &raw_windows(ds, Split::Train, kind)?)?;
    let train_targets = anchor_targets(ds, Split::Train, anchor)?;
    check_anchor_dim(&arch, &train_targets)?;
    let val_windows;
    let val_targets;
    let mut val_pair = None;
    if use_val {
        val_windows = standardize_all(&stats, &raw_windows(ds, Split::Val, kind)?)?;
        val_targets = anchor_targets(ds, Split::Val, anchor)?;
        val_pair = Some(PairedData::new(&val_windows, &val_targets)?);
    }
    let train_pair_data = PairedData::new(&train_windows, &train_targets)?;
    let params = EncoderParams::init(arch, kind.channels(), window_len(kind), cfg.seed)?;
    let artifacts = RunArtifacts {
        dir: run_dir,
        stats: &stats,
        tag,
    };
    let (_, report) = train_pair(
        params,
        &train_pair_data,
        val_pair.as_ref(),
        cfg,
        Some(&artifacts),
    )?;
    let final_path = report
        .final_checkpoint
        .clone()
        .expect("run artifacts were given");
    stamp_checkpoint(
        &final_path,
        pair,
        kind.as_str(),
        anchor,
        ds.vocab.len(),
        cfg,
    )?;
    Ok((final_path, report))
}

fn report_summary(tag: &str, report: &TrainReport) {
    let last = report.epochs.last();
    let train_loss = last.map_or(f64::NAN, |e| e.train_loss);
    match report.best_val_loss {
        Some(v) => println!(
            "{tag}: {} epochs, final train loss {train_loss:.6}, best epoch {} (val loss {v:.6})",
            report.epochs.len(),
            report.best_epoch
        ),
        None => println!(
            "{tag}: {} epochs, final train loss {train_loss:.6}",
            report.epochs.len()
        ),
    }
    if let Some(path) = &report.final_checkpoint {
        println!("{tag}: checkpoint {}", path.display());
    }
}

pub fn run(args: TrainArgs) -> Result<()> {
    let mut r = Resolver::load(args.config.as_deref())?;
    let (plan, primary_arch, secondary_arch) = resolve_plan(&mut r, &args)?;

    let ds = read_dataset(&args.data)?;
    std::fs::create_dir_all(&plan.run_dir)
        .map_err(|e| Error::io(plan.run_dir.display().to_string(), e))?;
    r.echo(&plan.run_dir.join(format!("{}_config.txt", plan.tag)))?;

    let use_val = plan.use_val && has_split(&ds, Split::Val);
    let seed = plan.train_cfg.seed;

    match &plan.mode {
        Mode::Single(kind) => {
            let (_, report) = train_single(SingleRun {
                ds: &ds,
                kind: *kind,
                arch: primary_arch,
                anchor: &plan.anchor,
                cfg: &plan.train_cfg,
                use_val,
                run_dir: &plan.run_dir,
                tag: &plan.tag,
                pair: &plan.pair,
            })?;
            report_summary(&plan.tag, &report);
        }
        Mode::StageTwo(_) => {
            let (_, report) = train_single(SingleRun {
                ds: &ds,
                kind: WindowKind::Mocap,
                arch: primary_arch,
                anchor: &plan.anchor,
                cfg: &plan.train_cfg,
                use_val,
                run_dir: &plan.run_dir,
                tag: &plan.tag,
                pair: &plan.pair,
            })?;
            report_summary(&plan.tag, &report);
        }
        Mode::Progressive => {
            let secondary_arch = secondary_arch.expect("progressive resolves a mocap encoder");
            let imu_stats = train_stats(&ds, WindowKind::Imu)?;
            let mocap_stats = train_stats(&ds, WindowKind::Mocap)?;
            let imu_train = standardize_all(
                &imu_stats,
                &raw_windows(&ds, Split::Train, WindowKind::Imu)?,
            )?;
            let mocap_train = standardize_all(
                &mocap_stats,
                &raw_windows(&ds, Split::Train, WindowKind::Mocap)?,
            )?;
            let targets_train = anchor_targets(&ds, Split::Train, &plan.anchor)?;
            check_anchor_dim(&primary_arch, &targets_train)?;
            let train = ProgressiveData::new(&imu_train, &mocap_train, &targets_train)?;

            let imu_val;
            let mocap_val;
            let targets_val;
            let mut val = None;
            if use_val {
                imu_val =
                    standardize_all(&imu_stats, &raw_windows(&ds, Split::Val, WindowKind::Imu)?)?;
                mocap_val = standardize_all(
                    &mocap_stats,
                    &raw_windows(&ds, Split::Val, WindowKind::Mocap)?,
                )?;
                targets_val = anchor_targets(&ds, Split::Val, &plan.anchor)?;
                val = Some(ProgressiveData::new(&imu_val, &mocap_val, &targets_val)?);
            }

            let imu_params = EncoderParams::init(
                primary_arch,
                WindowKind::Imu.channels(),
                window_len(WindowKind::Imu),
                seed,
            )?;
            let mocap_params = EncoderParams::init(
                secondary_arch,
                WindowKind::Mocap.channels(),
                window_len(WindowKind::Mocap),
                seed.wrapping_add(1),
            )?;
            let imu_tag = format!("{}_imu", plan.tag);
            let mocap_tag = format!("{}_mocap", plan.tag);
            let imu_run = RunArtifacts {
                dir: &plan.run_dir,
                stats: &imu_stats,
                tag: &imu_tag,
            };
            let mocap_run = RunArtifacts {
                dir: &plan.run_dir,
                stats: &mocap_stats,
                tag: &mocap_tag,
            };
            let outcome = train_progressive(
                imu_params,
                mocap_params,
                &train,
                val.as_ref(),
                &plan.train_cfg,
                &plan.train_cfg,
                Some((&imu_run, &mocap_run)),
            )?;
            debug_assert_eq!(
                outcome.imu_checksum_before_stage2,
                outcome.imu_checksum_after_stage2
            );
            let imu_path = outcome
                .stage1
                .final_checkpoint
                .clone()
                .expect("artifacts given");
            stamp_checkpoint(
                &imu_path,
                &plan.pair,
                "imu",
                &plan.anchor,
                ds.vocab.len(),
                &plan.train_cfg,
            )?;
            let mocap_path = outcome
                .stage2
                .final_checkpoint
                .clone()
                .expect("artifacts given");
            stamp_checkpoint(
                &mocap_path,
                &plan.pair,
                "mocap",
                &AnchorSpec::Encoder(imu_path.clone()),
                ds.vocab.len(),
                &plan.train_cfg,
            )?;
            report_summary(&imu_tag, &outcome.stage1);
            report_summary(&mocap_tag, &outcome.stage2);
        }
        Mode::Independent => {
            let secondary_arch = secondary_arch.expect("independent resolves a mocap encoder");
            let imu_stats = train_stats(&ds, WindowKind::Imu)?;
            let mocap_stats = train_stats(&ds, WindowKind::Mocap)?;
            let imu_train = standardize_all(
                &imu_stats,
                &raw_windows(&ds, Split::Train, WindowKind::Imu)?,
            )?;
            let mocap_train = standardize_all(
                &mocap_stats,
                &raw_windows(&ds, Split::Train, WindowKind::Mocap)?,
            )?;

            let imu_val;
            let mocap_val;
            let mut val: Option<(&[Tensor64], &[Tensor64])> = None;
            if use_val {
                imu_val =
                    standardize_all(&imu_stats, &raw_windows(&ds, Split::Val, WindowKind::Imu)?)?;
                mocap_val = standardize_all(
                    &mocap_stats,
                    &raw_windows(&ds, Split::Val, WindowKind::Mocap)?,
                )?;
                val = Some((&imu_val, &mocap_val));
            }

            let imu_params = EncoderParams::init(
                primary_arch,
                WindowKind::Imu.channels(),
                window_len(WindowKind::Imu),
                seed,
            )?;
            let mocap_params = EncoderParams::init(
                secondary_arch,
                WindowKind::Mocap.channels(),
                window_len(WindowKind::Mocap),
                seed.wrapping_add(1),
            )?;
            let imu_tag = format!("{}_imu", plan.tag);
            let mocap_tag = format!("{}_mocap", plan.tag);
            let imu_run = RunArtifacts {
                dir: &plan.run_dir,
                stats: &imu_stats,
                tag: &imu_tag,
            };
            let mocap_run = RunArtifacts {
                dir: &plan.run_dir,
                stats: &mocap_stats,
                tag: &mocap_tag,
            };
            let (_, _, report) = train_joint(
                imu_params,
                mocap_params,
                &imu_train,
                &mocap_train,
                val,
                &plan.train_cfg,
                Some((&imu_run, &mocap_run)),
            )?;
            report_summary(&plan.tag, &report);
        }
    }
    Ok(())
}

fn check_anchor_dim(arch: &EncoderKind, targets: &Tensor64) -> Result<()> {
    let (_, d) = targets.dims2("anchor targets")?;
    if d != arch.out_dim() {
        return Err(Error::Config(format!(
            "anchor embeddings are {d}-dimensional but the encoder's out_dim is {}; set --out-dim {d}",
            arch.out_dim()
        )));
    }
    Ok(())
}
