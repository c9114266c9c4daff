use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use fsdm_core::geolab::{run_adaptation_2d, LabLoss};
use fsdm_core::harness::config::Mode;
use fsdm_core::harness::data::DomainDataset;
use fsdm_core::harness::io::{decode_pgm, decode_points_csv, encode_points_csv, write_samples};
use fsdm_core::harness::train::run_id;
use fsdm_core::harness::{adapt, evaluate_metrics, gen_toy_domains, io, pretrain, sample, Checkpoint, RunConfig};
use fsdm_core::losses::FeatureEncoder;
use fsdm_core::numerics::{PointSet, Tensor};
use fsdm_core::sampler::SamplerMode;
use serde::Serialize;

#[derive(Parser)]
#[command(
    name = "fsdm",
    version,
    about = "Few-shot diffusion adaptation on procedural toy domains"
)]
struct Cli {
    /// Log progress (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run seed; overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides the config's `output_dir`.
    #[arg(long = "output-dir")]
    output_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the source and few-shot target sets.
    GenData(Common),
    /// Train the source model, then warm up the fusion merge.
    Pretrain(Common),
    /// Adapt a pretrained model to the few-shot target.
    Adapt {
        #[command(flatten)]
        common: Common,
        /// Pretrained checkpoint (default: <output-dir>/pretrain.ckpt).
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
    /// Translate source items with the plain, ILVR or ICSG sampler.
    Sample(SampleArgs),
    /// Run one arm of the 2-D loss-geometry lab.
    Geolab {
        #[command(flatten)]
        common: Common,
        /// Objective of the arm; overrides the config.
        #[arg(long, value_enum)]
        loss: Option<LossArg>,
    },
    /// Score written samples against their sources and the target set.
    Metrics {
        #[command(flatten)]
        common: Common,
        /// Directory of samples (default: <output-dir>/samples).
        #[arg(long)]
        samples: Option<PathBuf>,
        /// Checkpoint whose encoder embeds the samples (default: <output-dir>/pretrain.ckpt).
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
}

#[derive(Args)]
struct SampleArgs {
    #[command(flatten)]
    common: Common,
    /// Checkpoint to sample from (default: <output-dir>/adapt.ckpt).
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Style-enhancement repeats.
    #[arg(long = "K")]
    k: Option<usize>,
    /// Low-pass factor.
    #[arg(long = "N")]
    n: Option<usize>,
    /// Last guided step.
    #[arg(long = "t-stop")]
    t_stop: Option<usize>,
    /// Start step.
    #[arg(long = "M")]
    m: Option<usize>,
    /// Sample directory (default: <output-dir>/samples).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Plain,
    Ilvr,
    Icsg,
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    Ddc,
    PairwiseCos,
    PairwiseDist,
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let mut value: serde_json::Value = serde_json::from_str(&text).context("parsing config JSON")?;
            if let (Some(seed), Some(obj)) = (c.seed, value.as_object_mut()) {
                obj.insert("seed".into(), seed.into());
            }
            serde_json::from_value::<RunConfig>(value).context("invalid config")?
        }
        None => match c.seed {
            Some(seed) => RunConfig::new(seed, Mode::Image),
            None => bail!("seed is mandatory: pass --seed or a --config with a seed"),
        },
    };
    if let Some(dir) = &c.output_dir {
        cfg.output_dir = dir.clone();
    }
    cfg.validate().context("invalid config")?;
    Ok(cfg)
}

fn datasets(cfg: &RunConfig) -> Result<(DomainDataset, DomainDataset)> {
    Ok(gen_toy_domains(&cfg.dataset, cfg.seed)?)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn records_csv<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

fn gen_data(cfg: &RunConfig) -> Result<()> {
    let (src, tgt) = datasets(cfg)?;
    let dir = cfg.output_dir.join("data");
    for d in [&src, &tgt] {
        let name = match d.domain {
            fsdm_core::harness::Domain::Source => "source",
            fsdm_core::harness::Domain::Target => "target",
        };
        let batch = d.all()?;
        match cfg.mode {
            Mode::Image => {
                write_samples(&dir.join(name), &batch)?;
            }
            Mode::Point => write(
                &dir.join(format!("{name}.csv")),
                encode_points_csv(&PointSet::from_rows(&batch)?)?,
            )?,
        }
    }
    write(
        &dir.join("checksums.txt"),
        format!("source {}\ntarget {}\n", src.checksum(), tgt.checksum()),
    )?;
    println!(
        "{} source and {} target items in {}",
        src.len(),
        tgt.len(),
        dir.display()
    );
    Ok(())
}

fn run_pretrain(cfg: &RunConfig) -> Result<()> {
    let (src, _) = datasets(cfg)?;
    let out = pretrain(cfg, &src)?;
    write(&cfg.output_dir.join("pretrain.ckpt"), out.checkpoint.to_bytes())?;
    write(&cfg.output_dir.join("pretrain_loss.csv"), records_csv(&out.curve)?)?;
    if let Some(last) = out.curve.last() {
        println!("pretrained; final loss {:.5}", last.loss);
    }
    Ok(())
}

fn run_adapt(cfg: &RunConfig, ckpt: Option<PathBuf>) -> Result<()> {
    let path = ckpt.unwrap_or_else(|| cfg.output_dir.join("pretrain.ckpt"));
    let source_ckpt = Checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))?;
    let (src, tgt) = datasets(cfg)?;
    let out = adapt(cfg, &source_ckpt, &src, &tgt)?;
    write(&cfg.output_dir.join("adapt.ckpt"), out.checkpoint.to_bytes())?;
    write(&cfg.output_dir.join("metrics.csv"), io::encode_metrics_csv(&out.rows)?)?;
    write(&cfg.output_dir.join("adapt_loss.csv"), records_csv(&out.curve)?)?;
    if let Some(row) = out.rows.last() {
        println!(
            "adapted; target diffusion loss {:.5}, ddc {:.5}, diversity {:.4}",
            row.loss_dif, row.loss_ddc, row.diversity
        );
    }
    Ok(())
}

fn run_sample(args: SampleArgs) -> Result<()> {
    let mut cfg = load_config(&args.common)?;
    let s = &mut cfg.sample.sampler;
    if let Some(m) = args.mode {
        s.mode = match m {
            ModeArg::Plain => SamplerMode::Plain,
            ModeArg::Ilvr => SamplerMode::Ilvr,
            ModeArg::Icsg => SamplerMode::Icsg,
        };
    }
    s.k = args.k.unwrap_or(s.k);
    s.n = args.n.unwrap_or(s.n);
    s.t_stop = args.t_stop.unwrap_or(s.t_stop);
    s.m = args.m.unwrap_or(s.m);
    cfg.validate().context("invalid sampler settings")?;
    let path = args.ckpt.unwrap_or_else(|| cfg.output_dir.join("adapt.ckpt"));
    let ckpt = Checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))?;
    let (src, _) = datasets(&cfg)?;
    let n = cfg.sample.count.min(src.len());
    let sources = src.batch(&(0..n).collect::<Vec<_>>())?;
    let out = sample(&cfg, &ckpt, &sources, &cfg.sample.sampler)?;
    let dir = args.out.unwrap_or_else(|| cfg.output_dir.join("samples"));
    let files = write_samples(&dir, &out)?;
    println!("{} samples in {}", n, dir.display());
    log::info!("wrote {} sample files", files.len());
    Ok(())
}

#[derive(Serialize)]
struct GeolabRow {
    loss: String,
    steps: usize,
    final_loss: f64,
    center_drift: f64,
    rotation_deg: f64,
    rotation_degenerate: bool,
    structure_corr: Option<f64>,
    scale_ratio: f64,
}

fn run_geolab(cfg: &RunConfig, loss: Option<LossArg>) -> Result<()> {
    let mut lab = cfg.geolab.clone();
    lab.seed = cfg.seed;
    if let Some(l) = loss {
        lab.loss = match l {
            LossArg::Ddc => LabLoss::Ddc,
            LossArg::PairwiseCos => LabLoss::PairwiseCos,
            LossArg::PairwiseDist => LabLoss::PairwiseDist,
        };
    }
    let r = run_adaptation_2d(&lab)?;
    let name = serde_json::to_value(lab.loss)?.as_str().unwrap_or_default().to_string();
    let row = GeolabRow {
        loss: name.clone(),
        steps: lab.steps,
        final_loss: *r.losses.last().expect("at least one loss"),
        center_drift: r.center_drift,
        rotation_deg: r.rotation_deg,
        rotation_degenerate: r.rotation_degenerate,
        structure_corr: r.structure_corr,
        scale_ratio: r.scale_ratio,
    };
    let dir = cfg.output_dir.join("geolab");
    write(&dir.join(format!("{name}.csv")), records_csv(&[row])?)?;
    write(
        &dir.join(format!("{name}_points.csv")),
        encode_points_csv(&r.generated)?,
    )?;
    println!(
        "{name}: center_drift {:.4}, rotation {:.2} deg, structure {}",
        r.center_drift,
        r.rotation_deg,
        r.structure_corr.map_or("undefined".into(), |s| format!("{s:.4}"))
    );
    Ok(())
}

/// Reads `sample_000.pgm, ...` or `samples.csv` back into a batch.
fn read_samples(dir: &Path) -> Result<Tensor> {
    let csv = dir.join("samples.csv");
    if csv.exists() {
        return Ok(decode_points_csv(&fs::read_to_string(&csv)?)?.to_rows());
    }
    let mut items = Vec::new();
    while let Ok(bytes) = fs::read(dir.join(format!("sample_{:03}.pgm", items.len()))) {
        items.push(decode_pgm(&bytes)?);
    }
    if items.is_empty() {
        bail!("no samples found in {}", dir.display());
    }
    Ok(Tensor::stack(&items)?)
}

#[derive(Serialize)]
struct SampleMetricsRow {
    run_id: String,
    seed: u64,
    samples: usize,
    center_drift: f64,
    rotation_deg: f64,
    structure_corr: f64,
    scs_proxy: f64,
    diversity: f64,
    nearest_target: f64,
}

fn run_metrics(cfg: &RunConfig, samples: Option<PathBuf>, ckpt: Option<PathBuf>) -> Result<()> {
    let dir = samples.unwrap_or_else(|| cfg.output_dir.join("samples"));
    let gen = read_samples(&dir)?;
    let path = ckpt.unwrap_or_else(|| cfg.output_dir.join("pretrain.ckpt"));
    let ck = Checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))?;
    let enc = FeatureEncoder::frozen_source(&ck.config.denoiser()?, &ck.params);
    let (src, tgt) = datasets(cfg)?;
    let n = gen.shape()[0];
    if n > src.len() {
        bail!("{n} samples but only {} source items", src.len());
    }
    let sources = src.batch(&(0..n).collect::<Vec<_>>())?;
    let eval = evaluate_metrics(&gen, &sources, &tgt.all()?, &enc)?;
    let row = SampleMetricsRow {
        run_id: run_id(cfg),
        seed: cfg.seed,
        samples: n,
        center_drift: eval.center_drift,
        rotation_deg: eval.rotation_deg,
        structure_corr: eval.structure_corr,
        scs_proxy: eval.scs_proxy,
        diversity: eval.diversity,
        nearest_target: eval.nearest_target,
    };
    write(&cfg.output_dir.join("sample_metrics.csv"), records_csv(&[row])?)?;
    println!(
        "scs_proxy {:.4}, diversity {:.4}, center_drift {:.4}, nearest_target {:.4}",
        eval.scs_proxy, eval.diversity, eval.center_drift, eval.nearest_target
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(c) => gen_data(&load_config(&c)?),
        Command::Pretrain(c) => run_pretrain(&load_config(&c)?),
        Command::Adapt { common, ckpt } => run_adapt(&load_config(&common)?, ckpt),
        Command::Sample(args) => run_sample(args),
        Command::Geolab { common, loss } => run_geolab(&load_config(&common)?, loss),
        Command::Metrics { common, samples, ckpt } => run_metrics(&load_config(&common)?, samples, ckpt),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
