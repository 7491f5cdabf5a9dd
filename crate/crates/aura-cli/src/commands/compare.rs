//! `aura compare`: trains both encoder architectures on the same text-imu
//! task with one seed, then scores each on retrieval and the three activity
//! recognition regimes. The headline output is a regime-by-encoder table of
//! test macro F1.

use std::path::PathBuf;

use aura_core::dataset::Split;
use aura_core::evaluation::{FinetuneConfig, HarReport, ProbeConfig, Regime};
use aura_core::training::TrainConfig;
use aura_core::{Error, Result};
use clap::Args;

use crate::config::Resolver;
use crate::data::{anchor_targets, read_dataset, AnchorSpec, WindowKind};

use super::eval::{
    embed_split, har_finetune, har_transfer, har_zeroshot, open_checkpoint, retrieval_pair,
    retrieval_tsv, write_report, ALL_REGIMES,
};
use super::train::{resolve_encoder, run_dir_default, train_single, ArchFlags, SingleRun};

#[derive(Args, Debug)]
pub struct CompareArgs {
    /// Dataset directory (from `aura preprocess`).
    #[arg(long)]
    data: PathBuf,
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
    /// Seed of the pseudo text anchor projection (defaults to --seed).
    #[arg(long)]
    anchor_seed: Option<u64>,
    /// Shared embedding width for both encoders.
    #[arg(long)]
    out_dim: Option<usize>,

    // Transformer architecture.
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

    // Rnn architecture.
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
    /// Retrieval cutoffs, e.g. 1,10,50.
    #[arg(long)]
    ks: Option<String>,
    /// Skip validation-based selection even when a val split exists.
    #[arg(long)]
    no_val: bool,
    /// Run directory; defaults to $AURA_RUN_DIR, then ./runs.
    #[arg(long)]
    run_dir: Option<PathBuf>,
    /// Key=value configuration file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
}

struct EncoderColumn {
    name: &'static str,
    mrr_fwd: f64,
    har: Vec<HarReport>,
}

pub fn run(args: CompareArgs) -> Result<()> {
    let mut r = Resolver::load(args.config.as_deref())?;
    r.note("command", "compare");
    r.note("data", args.data.display());
    let seed = r.resolve("seed", args.seed, 0)?;
    let train_cfg = TrainConfig {
        batch_size: r.resolve("batch_size", args.batch_size, 64)?,
        epochs: r.resolve("epochs", args.epochs, 20)?,
        lr: r.resolve("lr", args.lr, 1e-3)?,
        temperature: r.resolve("temperature", args.temperature, 0.1)?,
        seed,
        ..TrainConfig::default()
    };
    train_cfg.validate()?;
    let anchor_seed = r.resolve("anchor_seed", args.anchor_seed, seed)?;
    let use_val = !r.resolve("no_val", args.no_val.then_some(true), false)?;

    let transformer_flags = ArchFlags {
        patch_len: args.patch_len,
        model_dim: args.model_dim,
        heads: args.heads,
        layers: args.layers,
        mlp_dim: args.mlp_dim,
        dropout: args.dropout,
        out_dim: args.out_dim,
        ..ArchFlags::none()
    };
    let rnn_flags = ArchFlags {
        conv_channels: args.conv_channels.clone(),
        kernel: args.kernel,
        stride: args.stride,
        groups: args.groups,
        hidden: args.hidden,
        out_dim: args.out_dim,
        ..ArchFlags::none()
    };
    let transformer = resolve_encoder(
        &mut r,
        "",
        "transformer",
        WindowKind::Imu,
        &transformer_flags,
    )?;
    let rnn = resolve_encoder(&mut r, "", "rnn", WindowKind::Imu, &rnn_flags)?;
    if transformer.out_dim() != rnn.out_dim() {
        return Err(Error::Config(
            "both encoders must share out_dim for a like-for-like comparison".into(),
        ));
    }

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
        seed,
    };
    let ks_raw = r.resolve("ks", args.ks.clone(), "1,10,50".to_string())?;
    let ks = crate::config::parse_usize_list(&ks_raw, "ks")?;
    let run_dir = run_dir_default(args.run_dir.clone());
    r.note("run_dir", run_dir.display());
    r.finish()?;

    let ds = read_dataset(&args.data)?;
    std::fs::create_dir_all(&run_dir).map_err(|e| Error::io(run_dir.display().to_string(), e))?;
    r.echo(&run_dir.join("compare_config.txt"))?;

    let anchor = AnchorSpec::PseudoText {
        dim: transformer.out_dim(),
        seed: anchor_seed,
    };
    let has_val = ds.items.iter().any(|item| item.split == Split::Val);
    let use_val = use_val && has_val;

    let mut columns = Vec::new();
    for (name, arch) in [("transformer", transformer), ("rnn", rnn)] {
        println!("training {name}...");
        let (ckpt_path, _) = train_single(SingleRun {
            ds: &ds,
            kind: WindowKind::Imu,
            arch,
            anchor: &anchor,
            cfg: &train_cfg,
            use_val,
            run_dir: &run_dir,
            tag: name,
            pair: "text-imu",
        })?;

        let opened = open_checkpoint(&ckpt_path)?;
        let windows = embed_split(&opened, &ds, Split::Test)?;
        let anchors = anchor_targets(&ds, Split::Test, &anchor)?;
        let (fwd, rev) = retrieval_pair(&windows, &anchors, WindowKind::Imu, "text", &ks)?;
        write_report(
            &run_dir.join(format!("{name}_retrieval_test.txt")),
            &format!("{}\n{}", fwd.render_kv(), rev.render_kv()),
        )?;
        write_report(
            &run_dir.join(format!("{name}_retrieval_test.tsv")),
            &retrieval_tsv(&fwd, &rev),
        )?;

        let mut har = Vec::new();
        for regime in ALL_REGIMES {
            let report = match regime {
                Regime::Zeroshot => har_zeroshot(&opened, &ds, Split::Test)?,
                Regime::Transfer => har_transfer(&opened, &ds, Split::Test, &probe_cfg)?,
                Regime::Finetune => har_finetune(&opened, &ds, Split::Test, &probe_cfg, &ft_cfg)?,
            };
            write_report(
                &run_dir.join(format!("{name}_har_{}_test.txt", regime.as_str())),
                &report.render_kv(),
            )?;
            har.push(report);
        }
        columns.push(EncoderColumn {
            name,
            mrr_fwd: fwd.mrr,
            har,
        });
    }

    let [t, n] = columns.as_slice() else {
        unreachable!("two encoders were scored");
    };
    let mut tsv = String::from("regime\ttransformer\trnn\n");
    for (i, regime) in ALL_REGIMES.iter().enumerate() {
        tsv.push_str(&format!(
            "{}\t{}\t{}\n",
            regime.as_str(),
            t.har[i].macro_f1,
            n.har[i].macro_f1
        ));
    }
    write_report(&run_dir.join("compare.tsv"), &tsv)?;

    let mut table = String::new();
    table.push_str(&format!("test macro F1 by regime, seed {seed}\n\n"));
    table.push_str(&format!(
        "{:<10} {:>12} {:>12}\n",
        "regime", "transformer", "rnn"
    ));
    for (i, regime) in ALL_REGIMES.iter().enumerate() {
        table.push_str(&format!(
            "{:<10} {:>12.4} {:>12.4}\n",
            regime.as_str(),
            t.har[i].macro_f1,
            n.har[i].macro_f1
        ));
    }
    table.push('\n');
    table.push_str(&format!(
        "retrieval mrr (imu->text): {}={} {}={}\n",
        t.name, t.mrr_fwd, n.name, n.mrr_fwd
    ));
    write_report(&run_dir.join("compare.txt"), &table)?;
    print!("{table}");
    println!("reports in {}", run_dir.display());
    Ok(())
}
