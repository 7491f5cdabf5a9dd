//! `aura eval`: retrieval and activity-recognition scoring of a trained
//! checkpoint. The window modality is inferred from the checkpoint's input
//! channel count; the anchor side is rebuilt from the metadata the train
//! command stamped into it.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use aura_core::dataset::format::bundle_from_checkpoint;
use aura_core::dataset::format::read_checkpoint;
use aura_core::dataset::{Dataset, Split};
use aura_core::encoders::EncoderBundle;
use aura_core::evaluation::{
    finetune_classify, linear_probe, retrieve, top_items, zero_shot_har, FinetuneConfig, HarReport,
    ProbeConfig, Regime, RetrievalReport,
};
use aura_core::{Error, Result, Tensor64};
use clap::Args;

use crate::config::{parse_usize_list, Resolver};
use crate::data::{
    anchor_targets, label_embeddings, raw_windows, read_dataset, split_labels, split_source_ids,
    standardize_all, AnchorSpec, WindowKind,
};

use super::train::run_dir_default;

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Dataset directory (from `aura preprocess`).
    #[arg(long)]
    data: PathBuf,
    /// Trained encoder checkpoint (.aurc).
    #[arg(long)]
    checkpoint: PathBuf,
    /// What to score: retrieval or har.
    #[arg(long)]
    task: Option<String>,
    /// Dataset split to evaluate. Defaults to test.
    #[arg(long)]
    split: Option<String>,
    /// Har regime: zeroshot, transfer, or finetune.
    #[arg(long)]
    regime: Option<String>,
    /// Retrieval cutoffs, e.g. 1,10,50.
    #[arg(long)]
    ks: Option<String>,
    /// Also print the top-k retrieved items per query with source ids.
    #[arg(long)]
    show_top_k: Option<usize>,
    /// Anchor-side encoder checkpoint, for cross-encoder retrieval.
    #[arg(long)]
    anchor_checkpoint: Option<PathBuf>,
    #[arg(long)]
    probe_epochs: Option<usize>,
    #[arg(long)]
    probe_lr: Option<f64>,
    #[arg(long)]
    finetune_epochs: Option<usize>,
    #[arg(long)]
    finetune_batch: Option<usize>,
    #[arg(long)]
    finetune_lr: Option<f64>,
    #[arg(long)]
    finetune_seed: Option<u64>,
    /// Report directory; defaults to $AURA_RUN_DIR, then ./runs.
    #[arg(long)]
    run_dir: Option<PathBuf>,
    /// Report filename prefix.
    #[arg(long)]
    tag: Option<String>,
    /// Key=value configuration file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
}

/// A checkpoint opened for evaluation: the runnable bundle plus the raw
/// config so anchor metadata survives.
pub struct Opened {
    pub bundle: EncoderBundle<f64>,
    pub config: BTreeMap<String, String>,
    pub kind: WindowKind,
}

pub fn open_checkpoint(path: &Path) -> Result<Opened> {
    let ckpt = read_checkpoint::<f64>(path)?;
    let bundle = bundle_from_checkpoint(&ckpt, &path.display().to_string())?;
    let kind = WindowKind::from_channels(bundle.params.input_channels)?;
    Ok(Opened {
        bundle,
        config: ckpt.config,
        kind,
    })
}

/// Embeds every window of a split through the bundle (standardization
/// included), one row per record in canonical order.
pub fn embed_split(opened: &Opened, ds: &Dataset, split: Split) -> Result<Tensor64> {
    let raw = raw_windows(ds, split, opened.kind)?;
    let rows: Vec<Tensor64> = raw
        .iter()
        .map(|w| opened.bundle.encode_raw(w))
        .collect::<Result<_>>()?;
    let refs: Vec<&Tensor64> = rows.iter().collect();
    Tensor64::concat_rows(&refs)
}

/// Rebuilds the anchor the checkpoint was trained against. An explicit
/// checkpoint path wins; otherwise the stamped metadata decides, and a
/// pseudo text anchor is rejected when the vocabulary has drifted.
pub fn anchor_from_config(
    config: &BTreeMap<String, String>,
    vocab_len: usize,
    explicit: Option<PathBuf>,
) -> Result<AnchorSpec> {
    if let Some(path) = explicit {
        return Ok(AnchorSpec::Encoder(path));
    }
    let name = config.get("anchor").ok_or_else(|| {
        Error::Config("checkpoint carries no anchor metadata; pass --anchor-checkpoint".into())
    })?;
    match name.as_str() {
        "pseudo_text" => {
            let dim = parse_meta(config, "anchor_dim")?;
            let seed = parse_meta(config, "anchor_seed")?;
            let vocab: usize = parse_meta(config, "anchor_vocab")?;
            if vocab != vocab_len {
                return Err(Error::Mismatch(format!(
                    "checkpoint anchor was built over a {vocab}-word vocabulary but the dataset has {vocab_len} words"
                )));
            }
            Ok(AnchorSpec::PseudoText { dim, seed })
        }
        "video" => Ok(AnchorSpec::Video),
        "encoder" => Err(Error::Config(
            "checkpoint was aligned to another encoder; pass --anchor-checkpoint".into(),
        )),
        other => Err(Error::Config(format!(
            "unknown anchor {other:?} in checkpoint"
        ))),
    }
}

fn parse_meta<T: std::str::FromStr>(config: &BTreeMap<String, String>, key: &str) -> Result<T> {
    let raw = config
        .get(key)
        .ok_or_else(|| Error::Config(format!("checkpoint lacks the {key} metadata key")))?;
    raw.parse()
        .map_err(|_| Error::Config(format!("checkpoint key {key} holds unparseable {raw:?}")))
}

/// Display name of the anchor side for direction labels.
fn anchor_label(spec: &AnchorSpec) -> Result<String> {
    Ok(match spec {
        AnchorSpec::PseudoText { .. } => "text".into(),
        AnchorSpec::Video => "video".into(),
        AnchorSpec::Encoder(path) => {
            let ckpt = read_checkpoint::<f64>(path)?;
            let channels: usize = parse_meta(&ckpt.config, "input_channels")?;
            WindowKind::from_channels(channels)?.as_str().into()
        }
    })
}

/// Both retrieval directions between window embeddings and anchor targets.
pub fn retrieval_pair(
    windows: &Tensor64,
    anchors: &Tensor64,
    kind: WindowKind,
    anchor_name: &str,
    ks: &[usize],
) -> Result<(RetrievalReport, RetrievalReport)> {
    let fwd = retrieve(
        windows,
        anchors,
        ks,
        &format!("{}->{anchor_name}", kind.as_str()),
    )?;
    let rev = retrieve(
        anchors,
        windows,
        ks,
        &format!("{anchor_name}->{}", kind.as_str()),
    )?;
    Ok((fwd, rev))
}

/// Two-column TSV over both directions, one metric per row.
pub fn retrieval_tsv(fwd: &RetrievalReport, rev: &RetrievalReport) -> String {
    let mut out = format!("metric\t{}\t{}\n", fwd.direction, rev.direction);
    for (k, v) in &fwd.r_at {
        out.push_str(&format!("r_at_{k}\t{v}\t{}\n", rev.r_at[k]));
    }
    out.push_str(&format!("mrr\t{}\t{}\n", fwd.mrr, rev.mrr));
    out.push_str(&format!(
        "n_queries\t{}\t{}\n",
        fwd.n_queries, rev.n_queries
    ));
    out
}

pub fn write_report(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Splits used by the probe and finetune regimes: fit on train, score on
/// the requested split.
fn har_fit_splits(eval_split: Split) -> Result<Split> {
    if eval_split == Split::Train {
        return Err(Error::Config(
            "transfer and finetune fit on the train split; evaluate val or test".into(),
        ));
    }
    Ok(Split::Train)
}

pub fn har_zeroshot(opened: &Opened, ds: &Dataset, split: Split) -> Result<HarReport> {
    let anchor = anchor_from_config(&opened.config, ds.vocab.len(), None)?;
    let AnchorSpec::PseudoText { dim, seed } = anchor else {
        return Err(Error::Config(
            "zeroshot classification needs a text-anchored checkpoint".into(),
        ));
    };
    let embs = embed_split(opened, ds, split)?;
    let (classes, truths) = split_labels(ds, split)?;
    let label_embs = label_embeddings(ds, &classes, dim, seed)?;
    zero_shot_har(&embs, &truths, &classes, &label_embs)
}

pub fn har_transfer(
    opened: &Opened,
    ds: &Dataset,
    split: Split,
    cfg: &ProbeConfig,
) -> Result<HarReport> {
    let fit = har_fit_splits(split)?;
    let train_embs = embed_split(opened, ds, fit)?;
    let eval_embs = embed_split(opened, ds, split)?;
    let (classes, train_truths) = split_labels(ds, fit)?;
    let (_, eval_truths) = split_labels(ds, split)?;
    let (report, _) = linear_probe(
        &train_embs,
        &train_truths,
        &eval_embs,
        &eval_truths,
        &classes,
        cfg,
    )?;
    Ok(report)
}

pub fn har_finetune(
    opened: &Opened,
    ds: &Dataset,
    split: Split,
    probe_cfg: &ProbeConfig,
    cfg: &FinetuneConfig,
) -> Result<HarReport> {
    let fit = har_fit_splits(split)?;
    let stats = &opened.bundle.stats;
    let train_raw = raw_windows(ds, fit, opened.kind)?;
    let eval_raw = raw_windows(ds, split, opened.kind)?;
    let train_windows = standardize_all(stats, &train_raw)?;
    let eval_windows = standardize_all(stats, &eval_raw)?;
    let (classes, train_truths) = split_labels(ds, fit)?;
    let (_, eval_truths) = split_labels(ds, split)?;

    // Warm-start the head from a linear probe so short finetunes start at
    // the probe's operating point instead of a zero head.
    let train_embs = embed_split(opened, ds, fit)?;
    let eval_embs = embed_split(opened, ds, split)?;
    let (_, head) = linear_probe(
        &train_embs,
        &train_truths,
        &eval_embs,
        &eval_truths,
        &classes,
        probe_cfg,
    )?;

    let (report, _, _) = finetune_classify(
        opened.bundle.params.clone(),
        Some(head),
        &train_windows,
        &train_truths,
        &eval_windows,
        &eval_truths,
        &classes,
        cfg,
    )?;
    Ok(report)
}

pub fn run(args: EvalArgs) -> Result<()> {
    let mut r = Resolver::load(args.config.as_deref())?;
    r.note("command", "eval");
    r.note("data", args.data.display());
    r.note("checkpoint", args.checkpoint.display());
    let task = r.require("task", args.task.clone())?;
    let split = Split::parse(&r.resolve("split", args.split.clone(), "test".to_string())?)?;
    let ks_raw = r.resolve("ks", args.ks.clone(), "1,10,50".to_string())?;
    let ks = parse_usize_list(&ks_raw, "ks")?;
    let show_top_k = r.resolve_opt("show_top_k", args.show_top_k)?;
    let regime_raw = r.resolve_opt("regime", args.regime.clone())?;
    let probe_cfg = ProbeConfig {
        epochs: r.resolve(
            "probe_epochs",
            args.probe_epochs,
            ProbeConfig::default().epochs,
        )?,
        lr: r.resolve("probe_lr", args.probe_lr, ProbeConfig::default().lr)?,
    };
    let ft_default = FinetuneConfig::default();
    let ft_cfg = FinetuneConfig {
        epochs: r.resolve("finetune_epochs", args.finetune_epochs, ft_default.epochs)?,
        batch_size: r.resolve("finetune_batch", args.finetune_batch, ft_default.batch_size)?,
        lr: r.resolve("finetune_lr", args.finetune_lr, ft_default.lr)?,
        seed: r.resolve("finetune_seed", args.finetune_seed, ft_default.seed)?,
    };
    let tag = r.resolve("tag", args.tag.clone(), "eval".to_string())?;
    let run_dir = run_dir_default(args.run_dir.clone());
    r.note("run_dir", run_dir.display());

    match task.as_str() {
        "retrieval" | "har" => {}
        other => {
            return Err(Error::Config(format!(
                "unknown task {other:?}, expected retrieval or har"
            )))
        }
    }
    r.finish()?;

    let ds = read_dataset(&args.data)?;
    let opened = open_checkpoint(&args.checkpoint)?;
    std::fs::create_dir_all(&run_dir).map_err(|e| Error::io(run_dir.display().to_string(), e))?;

    match task.as_str() {
        "retrieval" => {
            let anchor = anchor_from_config(
                &opened.config,
                ds.vocab.len(),
                args.anchor_checkpoint.clone(),
            )?;
            let windows = embed_split(&opened, &ds, split)?;
            let anchors = anchor_targets(&ds, split, &anchor)?;
            let name = anchor_label(&anchor)?;
            let (fwd, rev) = retrieval_pair(&windows, &anchors, opened.kind, &name, &ks)?;

            let kv = format!("{}\n{}", fwd.render_kv(), rev.render_kv());
            let kv_path = run_dir.join(format!("{tag}_retrieval_{}.txt", split.as_str()));
            write_report(&kv_path, &kv)?;
            let tsv_path = run_dir.join(format!("{tag}_retrieval_{}.tsv", split.as_str()));
            write_report(&tsv_path, &retrieval_tsv(&fwd, &rev))?;

            print!("{kv}");
            println!("report {}", kv_path.display());
            if let Some(k) = show_top_k {
                let ids = split_source_ids(&ds, split);
                for (q, hits) in top_items(&windows, &anchors, k)?.iter().enumerate() {
                    let listed: Vec<String> = hits
                        .iter()
                        .map(|&(j, s)| format!("{} ({s:.4})", ids[j]))
                        .collect();
                    println!("{}: {}", ids[q], listed.join(", "));
                }
            }
        }
        "har" => {
            let regime_name = regime_raw.ok_or_else(|| {
                Error::Config("har needs --regime zeroshot, transfer, or finetune".into())
            })?;
            let report = match regime_name.as_str() {
                "zeroshot" => har_zeroshot(&opened, &ds, split)?,
                "transfer" => har_transfer(&opened, &ds, split, &probe_cfg)?,
                "finetune" => har_finetune(&opened, &ds, split, &probe_cfg, &ft_cfg)?,
                other => {
                    return Err(Error::Config(format!(
                        "unknown regime {other:?}, expected zeroshot, transfer, or finetune"
                    )))
                }
            };
            let path = run_dir.join(format!("{tag}_har_{}_{}.txt", regime_name, split.as_str()));
            write_report(&path, &report.render_kv())?;
            print!("{}", report.render_kv());
            println!("report {}", path.display());
        }
        _ => unreachable!("task already validated"),
    }
    Ok(())
}

/// Regimes in the order the compare table reports them.
pub const ALL_REGIMES: [Regime; 3] = [Regime::Zeroshot, Regime::Transfer, Regime::Finetune];
