//! `aura preprocess`: build a standard dataset directory from a synthetic
//! spec, raw PAMAP2 tables, or an existing window export.

use std::path::PathBuf;

use aura_core::dataset::{self, Dataset, Pamap2Config, Split, SyntheticSpec};
use aura_core::{Error, Result};
use clap::Args;

use crate::config::Resolver;

#[derive(Args, Debug)]
pub struct PreprocessArgs {
    /// Input format: synthetic, pamap2, or windows (an existing directory).
    #[arg(long)]
    format: Option<String>,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Input path(s): raw tables for pamap2, a dataset directory for windows.
    #[arg(long = "in")]
    input: Vec<PathBuf>,
    /// Key=value configuration file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Synthetic: number of classes.
    #[arg(long)]
    classes: Option<usize>,
    /// Synthetic: instances per class.
    #[arg(long)]
    per_class: Option<usize>,
    /// Synthetic: noise level in [0, 1].
    #[arg(long)]
    noise: Option<f64>,
    /// Synthetic: generator seed.
    #[arg(long)]
    seed: Option<u64>,
    /// PAMAP2: select the low-range accelerometer columns.
    #[arg(long)]
    low_g: bool,
}

pub fn run(args: PreprocessArgs) -> Result<()> {
    let mut r = Resolver::load(args.config.as_deref())?;
    r.note("command", "preprocess");
    r.note("out", args.out.display());
    let format = r.require("format", args.format)?;

    let ds: Dataset = match format.as_str() {
        "synthetic" => {
            let spec = SyntheticSpec::new(
                r.resolve("classes", args.classes, 8)?,
                r.resolve("per_class", args.per_class, 64)?,
                r.resolve("noise", args.noise, 0.3)?,
                r.resolve("seed", args.seed, 0)?,
            );
            r.finish()?;
            dataset::gen_synthetic(&spec)?
        }
        "pamap2" => {
            let low_g = r.resolve("low_g", args.low_g.then_some(true), false)?;
            r.finish()?;
            if args.input.is_empty() {
                return Err(Error::Config("pamap2 needs at least one --in file".into()));
            }
            let joined: Vec<String> = args.input.iter().map(|p| p.display().to_string()).collect();
            r.note("in", joined.join(","));
            let paths: Vec<&std::path::Path> = args.input.iter().map(|p| p.as_path()).collect();
            dataset::ingest_pamap2(&paths, &Pamap2Config { low_g_accel: low_g })?
        }
        "windows" => {
            r.finish()?;
            let [input] = args.input.as_slice() else {
                return Err(Error::Config(
                    "windows format takes exactly one --in directory".into(),
                ));
            };
            r.note("in", input.display());
            dataset::read_dataset(input)?
        }
        other => {
            return Err(Error::Config(format!(
                "unknown format {other:?}, expected synthetic, pamap2, or windows"
            )))
        }
    };

    dataset::write_dataset(&ds, &args.out)?;
    r.echo(&args.out.join("preprocess_config.txt"))?;

    println!("dataset written to {}", args.out.display());
    println!("split\twindows");
    for split in Split::ALL {
        println!("{}\t{}", split.as_str(), ds.split_len(split));
    }
    Ok(())
}
