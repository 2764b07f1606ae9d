use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use ewa_core::theory;
use ewa_core::train::{
    bench_latency, convert_checkpoint, evaluate_inference_form, finetune, load_dataset, prepare_data, train,
    write_csv, Checkpoint, DatasetSpec, TrainConfig, TrainOutcome,
};

#[derive(Parser)]
#[command(name = "ewa", version, about = "Experts weights averaging for vision transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML config; `profile = "desk" | "full" | "finetune"` selects the base
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, default_value = "runs/latest")]
    out: PathBuf,
    /// Dataset spec, e.g. `synthetic:n=1024,classes=10` or `idx:images=a,labels=b`
    #[arg(long)]
    dataset: Option<String>,
    /// Config override `key.path=value`, repeatable
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn config(&self, default_profile: &str) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => TrainConfig::profile(default_profile)?,
        };
        let mut sets = self.overrides.clone();
        if let Some(s) = self.seed {
            sets.push(format!("seed={s}"));
        }
        if let Some(d) = &self.dataset {
            sets.push(format!("dataset={d}"));
        }
        cfg = cfg.with_overrides(&sets)?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train from scratch; writes the MoE checkpoint, its converted form and metrics
    Train(Common),
    /// Expand a dense checkpoint into MoE form and fine-tune it
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Dense source checkpoint
        #[arg(long)]
        from: PathBuf,
    },
    /// Evaluate a checkpoint (converted form for RUP models)
    Eval {
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: Option<String>,
        #[arg(long, default_value_t = 256)]
        batch_size: usize,
    },
    /// Average the experts of a MoE checkpoint into a dense one
    Convert {
        checkpoint: PathBuf,
        #[arg(long, default_value = "runs/latest")]
        out: PathBuf,
    },
    /// Check the unrolled EWA weight recursion on random probe layers
    VerifyTheory {
        #[arg(long, default_value = "runs/theory")]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.1)]
        eta: f64,
        /// Share rates, comma separated
        #[arg(long, default_value = "0.1,0.3,0.5", value_delimiter = ',')]
        betas: Vec<f64>,
        /// `N:m` pairs, comma separated
        #[arg(long, default_value = "2:3,4:5,4:10", value_delimiter = ',')]
        cases: Vec<String>,
    },
    /// Per-step latency of vanilla vs EWA training and dense vs converted inference
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 50)]
        steps: usize,
        #[arg(long, default_value_t = 5)]
        warmup: usize,
    },
}

/// Copies log output to stderr and a file.
struct Tee(File);

impl Write for Tee {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        std::io::stderr().write_all(buf)?;
        self.0.write_all(buf)?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.0.flush()
    }
}

fn init_logging(log_file: Option<&Path>) -> Result<()> {
    let mut b = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"));
    if let Some(p) = log_file {
        let f = File::create(p).with_context(|| format!("creating {}", p.display()))?;
        b.target(env_logger::Target::Pipe(Box::new(Tee(f))));
    }
    b.init();
    Ok(())
}

fn prepare_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_outcome(out: &Path, cfg: &TrainConfig, outcome: &TrainOutcome) -> Result<()> {
    std::fs::write(out.join("config.toml"), cfg.to_toml()?)?;
    outcome.checkpoint.save(&out.join("model.ewac"))?;
    let dense = convert_checkpoint(&outcome.checkpoint)?;
    dense.save(&out.join("converted.ewac"))?;
    write_csv(&out.join("steps.csv"), &outcome.steps)?;
    write_csv(&out.join("epochs.csv"), &outcome.epochs)?;
    info!(
        "wrote {} ({} params) and {} ({} params)",
        out.join("model.ewac").display(),
        outcome.checkpoint.param_count(),
        out.join("converted.ewac").display(),
        dense.param_count()
    );
    info!("final eval accuracy {:.4}", outcome.final_accuracy());
    Ok(())
}

fn parse_cases(cases: &[String]) -> Result<Vec<(usize, usize)>> {
    cases
        .iter()
        .map(|c| {
            let (n, m) = c.split_once(':').with_context(|| format!("case {c:?} is not N:m"))?;
            Ok((n.trim().parse()?, m.trim().parse()?))
        })
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(common) => {
            prepare_out(&common.out)?;
            init_logging(Some(&common.out.join("train.log")))?;
            let cfg = common.config("desk")?;
            let (data, eval) = prepare_data(&cfg)?;
            info!("train set {} items, eval set {} items", data.len(), eval.len());
            let outcome = train(&cfg, &data, Some(&eval))?;
            write_outcome(&common.out, &cfg, &outcome)
        }
        Command::Finetune { common, from } => {
            prepare_out(&common.out)?;
            init_logging(Some(&common.out.join("finetune.log")))?;
            let cfg = common.config("finetune")?;
            let source = Checkpoint::load(&from).with_context(|| format!("loading {}", from.display()))?;
            let (data, eval) = prepare_data(&cfg)?;
            let outcome = finetune(&cfg, &source, &data, Some(&eval))?;
            write_outcome(&common.out, &cfg, &outcome)
        }
        Command::Eval {
            checkpoint,
            dataset,
            batch_size,
        } => {
            init_logging(None)?;
            let ck = Checkpoint::load(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            let data = match (dataset, &ck.train) {
                (Some(d), _) => load_dataset(&d.parse::<DatasetSpec>()?)?,
                (None, Some(cfg)) => prepare_data(cfg)?.1,
                (None, None) => bail!("checkpoint carries no training config; pass --dataset"),
            };
            let model = ck.to_model()?;
            let (r, form) = evaluate_inference_form(&model, &data, batch_size)?;
            println!(
                "{}: {} items, loss {:.6}, accuracy {:.4} ({form} form)",
                checkpoint.display(),
                r.n,
                r.loss,
                r.accuracy
            );
            Ok(())
        }
        Command::Convert { checkpoint, out } => {
            init_logging(None)?;
            prepare_out(&out)?;
            let ck = Checkpoint::load(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            let dense = convert_checkpoint(&ck)?;
            let path = out.join("converted.ewac");
            dense.save(&path)?;
            println!(
                "{} -> {}: {} -> {} parameters",
                checkpoint.display(),
                path.display(),
                ck.param_count(),
                dense.param_count()
            );
            Ok(())
        }
        Command::VerifyTheory {
            out,
            seed,
            eta,
            betas,
            cases,
        } => {
            init_logging(None)?;
            prepare_out(&out)?;
            let rows = theory::sweep(&parse_cases(&cases)?, &betas, eta, seed)?;
            let mut text = String::new();
            for r in &rows {
                text.push_str(&r.report.to_text());
            }
            let worst = rows.iter().map(|r| r.report.unrolled_error).fold(0.0, f64::max);
            text.push_str(&format!("worst unrolled error {worst:.3e}\n"));
            print!("{text}");
            std::fs::write(out.join("theory_report.txt"), &text)?;
            std::fs::write(out.join("theory_errors.csv"), theory::sweep_csv(&rows))?;
            Ok(())
        }
        Command::Bench { common, steps, warmup } => {
            prepare_out(&common.out)?;
            init_logging(None)?;
            let cfg = common.config("desk")?;
            let report = bench_latency(&cfg, steps, warmup)?;
            print!("{}", report.to_text());
            std::fs::write(common.out.join("bench.txt"), report.to_text())?;
            Ok(())
        }
    }
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
