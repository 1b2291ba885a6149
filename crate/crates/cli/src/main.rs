use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use hcl_core::checkpoint::Container;
use hcl_core::config::{parse_config, ExperimentConfig, DEFAULT_SEED, RESOLVED_CONFIG};
use hcl_core::data::{generate_synthetic, load_dataset, DatasetRecord};
use hcl_core::frameworks::train::{append_metrics_csv, write_metrics_csv, Trainer};
use hcl_core::gradsuite::{run_suite, TOLERANCE};
use hcl_core::metrics::{linear_probe, write_report, ReportRow};

const CHECKPOINT: &str = "checkpoint.hcl";
const METRICS: &str = "metrics.csv";

#[derive(Parser)]
#[command(name = "hcl", version, about = "Contrastive pretraining with hallucinated positives")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic labelled dataset in the CIFAR-10 binary format.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 80)]
        per_class: usize,
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
    },
    /// Pretrain an encoder; writes the checkpoint, metrics CSV and resolved config to the output directory.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        hallucinator: Option<Switch>,
        /// Output directory (overrides paths.out_dir).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue the run found in the output directory.
        #[arg(long)]
        resume: bool,
        /// Stop once this many steps have been taken in total, keeping the full schedule.
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Train a linear classifier on frozen features of a checkpoint.
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Report CSV (metric, value, t, n_samples).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Positive-pair similarity and uniformity of a checkpoint's features.
    Metrics {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic gradients with central differences for every operation and loss.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides paths.dataset.
    #[arg(long)]
    dataset: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg =
            parse_config(&self.config).with_context(|| format!("reading config {}", self.config.display()))?;
        if self.seed.is_some() {
            cfg.seed = self.seed;
        }
        if let Some(d) = &self.dataset {
            cfg.paths.dataset = Some(d.clone());
        }
        Ok(cfg)
    }
}

fn dataset(path: Option<&PathBuf>) -> Result<Vec<DatasetRecord>> {
    let path = path.context("no dataset: pass --dataset or set paths.dataset")?;
    let records = load_dataset(path).with_context(|| format!("loading {}", path.display()))?;
    if records.is_empty() {
        bail!("dataset {} is empty", path.display());
    }
    Ok(records)
}

fn images(records: &[DatasetRecord]) -> Vec<hcl_core::data::Image> {
    records.iter().map(|r| r.image.clone()).collect()
}

fn pretrain(
    common: &Common,
    hallucinator: Option<Switch>,
    out: Option<&Path>,
    resume: bool,
    stop_after: Option<u64>,
) -> Result<()> {
    let mut cfg = common.load()?;
    if let Some(h) = hallucinator {
        cfg.hallucinator.enabled = h == Switch::On;
    }
    if let Some(o) = out {
        cfg.paths.out_dir = Some(o.to_path_buf());
    }
    let cfg = cfg.resolved();
    cfg.validate()?;
    let dir = cfg
        .paths
        .out_dir
        .clone()
        .context("no output directory: pass --out or set paths.out_dir")?;
    let records = dataset(cfg.paths.dataset.as_ref())?;
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;

    let (mut trainer, fresh) = if resume {
        let echo = parse_config(dir.join(RESOLVED_CONFIG)).context("reading the resolved config of the run")?;
        if echo != cfg {
            bail!("configuration differs from the run being resumed in {}", dir.display());
        }
        let ckpt = Container::load(dir.join(CHECKPOINT)).context("reading checkpoint")?;
        (Trainer::resume(&cfg, images(&records), &ckpt)?, false)
    } else {
        cfg.write_resolved(&dir)?;
        (Trainer::new(&cfg, images(&records))?, true)
    };
    let start = trainer.step();
    let records = trainer.run(stop_after)?;
    if fresh {
        write_metrics_csv(&dir.join(METRICS), &records)?;
    } else {
        append_metrics_csv(&dir.join(METRICS), &records)?;
    }
    trainer.checkpoint().save(dir.join(CHECKPOINT))?;
    let last = records.last().map(|r| format!(", final loss {:.6}", r.loss)).unwrap_or_default();
    println!(
        "trained steps {}..{} of {} (seed {}){last}; outputs in {}",
        start,
        trainer.step(),
        trainer.total_steps(),
        trainer.seed(),
        dir.display()
    );
    Ok(())
}

fn restored(common: &Common, checkpoint: &Path) -> Result<(Trainer, Vec<DatasetRecord>)> {
    let cfg = common.load()?;
    let path = cfg.paths.eval_dataset.as_ref().or(cfg.paths.dataset.as_ref());
    let records = dataset(path)?;
    let ckpt = Container::load(checkpoint).with_context(|| format!("reading {}", checkpoint.display()))?;
    let mut trainer = Trainer::new(&cfg, images(&records))?;
    trainer.load_weights(&ckpt)?;
    Ok((trainer, records))
}

fn emit(rows: &[ReportRow], out: Option<&Path>) -> Result<()> {
    for r in rows {
        let t = r.t.map(|t| t.to_string()).unwrap_or_default();
        println!("{},{},{},{}", r.metric, r.value, t, r.n_samples);
    }
    if let Some(path) = out {
        write_report(path, rows)?;
    }
    Ok(())
}

fn probe(common: &Common, checkpoint: &Path, out: Option<&Path>) -> Result<()> {
    let (trainer, records) = restored(common, checkpoint)?;
    let features = trainer.backbone_features(&images(&records))?;
    let labels: Vec<usize> = records.iter().map(|r| usize::from(r.label)).collect();
    let classes = labels.iter().max().map_or(1, |m| m + 1);
    let cfg = trainer.config();
    let result = linear_probe(&features, &labels, classes, &cfg.probe, trainer.seed())?;
    let n = records.len();
    let mut rows = vec![ReportRow {
        metric: "probe_top1".into(),
        value: result.top1,
        t: None,
        n_samples: n,
    }];
    for (c, acc) in result.per_class.iter().enumerate() {
        if let Some(a) = acc {
            rows.push(ReportRow {
                metric: format!("probe_class_{c}"),
                value: *a,
                t: None,
                n_samples: n,
            });
        }
    }
    emit(&rows, out)
}

fn metrics(common: &Common, checkpoint: &Path, out: Option<&Path>) -> Result<()> {
    let (trainer, records) = restored(common, checkpoint)?;
    let rows = trainer.diagnostics(&images(&records))?;
    emit(&rows, out)
}

fn gradcheck(seed: u64) -> Result<bool> {
    let results = run_suite(seed)?;
    let mut worst: f64 = 0.0;
    let mut skipped = 0;
    for r in &results {
        let kinks = if r.skipped_at_kinks > 0 {
            format!("  ({} of {} coordinates at a relu kink)", r.skipped_at_kinks, r.checked + r.skipped_at_kinks)
        } else {
            String::new()
        };
        println!("{:<48} {:.3e}{kinks}", r.name, r.max_rel_error);
        worst = worst.max(r.max_rel_error);
        skipped += r.skipped_at_kinks;
    }
    println!("max relative error {worst:.3e} (tolerance {TOLERANCE:e}), {skipped} coordinates skipped at kinks");
    Ok(results.iter().all(|r| r.passed()))
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData {
            out,
            classes,
            per_class,
            seed,
        } => {
            let records = generate_synthetic(&out, classes, per_class, seed)?;
            println!("wrote {} images to {}", records.len(), out.display());
        }
        Command::Pretrain {
            common,
            hallucinator,
            out,
            resume,
            stop_after,
        } => pretrain(&common, hallucinator, out.as_deref(), resume, stop_after)?,
        Command::Probe {
            common,
            checkpoint,
            out,
        } => probe(&common, &checkpoint, out.as_deref())?,
        Command::Metrics {
            common,
            checkpoint,
            out,
        } => metrics(&common, &checkpoint, out.as_deref())?,
        Command::Gradcheck { seed } => return gradcheck(seed),
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
