use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use avstage::data::{save_dataset, Dataset};
use avstage::finetune::{evaluate, write_transcripts, TaskKind};
use avstage::orchestrator::{
    load_checkpoint, run_grid, save_checkpoint, Checkpoint, CheckpointStore, Pipeline, RunConfig, Stage,
};
use avstage::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};

/// Environment variable holding the default output directory.
const OUT_ENV: &str = "AVSTAGE_OUT";
const DEFAULT_OUT: &str = "avstage-out";

#[derive(Parser)]
#[command(
    name = "avstage",
    version,
    about = "Audio-visual pre-training, mid-training and fine-tuning runs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration file; unspecified keys keep their defaults.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set pretrain.steps=50`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Run seed; overrides the configured one.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory [default: $AVSTAGE_OUT or ./avstage-out].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Pre-train an encoder on the configured paired profile.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Start from this checkpoint instead of the seeded random init.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Mid-train a checkpoint on the configured translation pair.
    Midtrain {
        #[command(flatten)]
        common: Common,
        /// Upstream checkpoint; the seeded random init when absent.
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Fine-tune a frozen encoder on the configured task.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Upstream checkpoint; the seeded random init when absent.
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Evaluate a fine-tuned checkpoint on its task's test split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        checkpoint: PathBuf,
    },
    /// Run the experiment grid and write the results table.
    Grid {
        #[command(flatten)]
        common: Common,
    },
    /// Generate a synthetic corpus and store it with its manifest.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        kind: DataKind,
    },
    /// Print a checkpoint's metadata and lineage.
    InspectCkpt { checkpoint: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum DataKind {
    Paired,
    Asr,
    Translation,
    Classification,
}

enum Failure {
    Usage(String),
    Run(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string().lines().map(str::trim).collect::<Vec<_>>().join("; ");
        match e {
            Error::Config(_) | Error::InvalidEnum { .. } => Self::Usage(msg),
            _ => Self::Run(msg),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Error::from(e).into()
    }
}

type Outcome = std::result::Result<(), Failure>;

struct Context {
    cfg: RunConfig,
    out: PathBuf,
}

impl Common {
    fn context(&self) -> std::result::Result<Context, Failure> {
        let text = match &self.config {
            Some(p) => {
                Some(fs::read_to_string(p).map_err(|e| Failure::Usage(format!("cannot read {}: {e}", p.display())))?)
            }
            None => None,
        };
        let mut overrides = self.set.clone();
        if let Some(s) = self.seed {
            overrides.push(format!("seed={s}"));
        }
        let cfg = RunConfig::load(text.as_deref(), &overrides)?;
        let out = self
            .out
            .clone()
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
        fs::create_dir_all(&out)?;
        fs::write(out.join("config.toml"), cfg.to_toml()?)?;
        Ok(Context { cfg, out })
    }
}

fn upstream(pipe: &Pipeline, path: Option<&Path>) -> std::result::Result<Checkpoint, Failure> {
    Ok(match path {
        Some(p) => load_checkpoint(p)?,
        None => pipe.root()?,
    })
}

fn finish(out: &Path, name: &str, c: &Checkpoint) -> Outcome {
    let path = out.join(format!("{name}.avsg"));
    save_checkpoint(c, &path)?;
    println!("{} {} {}", c.meta.stage, c.digest()?, path.display());
    Ok(())
}

fn run(cmd: Command) -> Outcome {
    let mut err = io::stderr();
    match cmd {
        Command::Pretrain { common, init } => {
            let ctx = common.context()?;
            let mut pipe = Pipeline::new(&ctx.cfg);
            let init = upstream(&pipe, init.as_deref())?;
            let objective = ctx.cfg.pretrain.loss.objective;
            let o = pipe.pretrain(&init, objective, ctx.cfg.data.profile, Some(&mut err))?;
            let mut log = BufWriter::new(File::create(ctx.out.join("pretrain_losses.jsonl"))?);
            for l in &o.losses {
                serde_json::to_writer(&mut log, l).map_err(Error::from)?;
                writeln!(log)?;
            }
            log.flush()?;
            finish(&ctx.out, "pretrain", &o.checkpoint)
        }
        Command::Midtrain { common, from } => {
            let ctx = common.context()?;
            let mut pipe = Pipeline::new(&ctx.cfg);
            let up = upstream(&pipe, from.as_deref())?;
            let o = pipe.midtrain(&up, ctx.cfg.data.pair, Some(&mut err))?;
            o.report.write_json(ctx.out.join("midtrain_report.json"))?;
            finish(&ctx.out, "midtrain", &o.checkpoint)
        }
        Command::Finetune { common, from } => {
            let ctx = common.context()?;
            let mut pipe = Pipeline::new(&ctx.cfg);
            let up = upstream(&pipe, from.as_deref())?;
            let o = pipe.finetune(&up, ctx.cfg.data.task, Some(&mut err))?;
            write_transcripts(
                &o.transcripts,
                BufWriter::new(File::create(ctx.out.join("transcripts.tsv"))?),
            )?;
            println!("{} {} = {:.4}", o.result.task, o.result.metric, o.result.value);
            finish(&ctx.out, "finetune", &o.checkpoint)
        }
        Command::Evaluate { common, checkpoint } => {
            let ctx = common.context()?;
            let c = load_checkpoint(&checkpoint)?;
            if c.meta.stage != Stage::Finetune {
                return Err(Failure::Run(format!(
                    "{} is a {} checkpoint, not finetune",
                    checkpoint.display(),
                    c.meta.stage
                )));
            }
            let kind: TaskKind = c
                .meta
                .task
                .as_deref()
                .ok_or_else(|| Failure::Run("checkpoint records no task".into()))?
                .parse()?;
            let mut pipe = Pipeline::new(&ctx.cfg);
            let (result, transcripts) = evaluate(&c, pipe.task(kind)?)?;
            write_transcripts(
                &transcripts,
                BufWriter::new(File::create(ctx.out.join("transcripts.tsv"))?),
            )?;
            println!(
                "{} {} = {:.4} on {} ({} examples)",
                result.task, result.metric, result.value, result.dataset, result.n_examples
            );
            Ok(())
        }
        Command::Grid { common } => {
            let ctx = common.context()?;
            let store = CheckpointStore::new(ctx.out.join("checkpoints"));
            let table = run_grid(&ctx.cfg, Some(&store), Some(&mut err))?;
            table.write(&ctx.out)?;
            print!("{}", table.to_text());
            Ok(())
        }
        Command::GenData { common, kind } => {
            let ctx = common.context()?;
            let d = &ctx.cfg.data;
            let mut pipe = Pipeline::new(&ctx.cfg);
            let (name, ds) = match kind {
                DataKind::Paired => ("paired", Dataset::PairedAv(pipe.paired(d.profile)?.clone())),
                DataKind::Asr => ("asr", Dataset::Asr(pipe.asr()?.clone())),
                DataKind::Translation => ("translation", Dataset::Translation(pipe.translation(d.pair)?.clone())),
                DataKind::Classification => ("classification", Dataset::Classification(pipe.class()?.clone())),
            };
            let dir = ctx.out.join("data").join(name);
            let m = save_dataset(&dir, &ds)?;
            println!(
                "{} n={} seed={} sha256={} {}",
                m.kind,
                m.n,
                m.seed,
                m.checksum,
                dir.display()
            );
            Ok(())
        }
        Command::InspectCkpt { checkpoint } => {
            let c = load_checkpoint(&checkpoint)?;
            let m = &c.meta;
            let or_dash = |s: Option<String>| s.unwrap_or_else(|| "-".into());
            let mut o = io::stdout().lock();
            writeln!(o, "stage: {}", m.stage)?;
            writeln!(o, "objective: {}", or_dash(m.objective.map(|x| x.to_string())))?;
            writeln!(o, "profile: {}", or_dash(m.profile.map(|x| x.name().to_string())))?;
            writeln!(o, "pair: {}", or_dash(m.pair.map(|x| x.name().to_string())))?;
            writeln!(o, "task: {}", or_dash(m.task.clone()))?;
            writeln!(o, "seed: {}", m.seed)?;
            writeln!(o, "tensors: {}", c.params.len())?;
            writeln!(o, "parameters: {}", c.params.numel())?;
            writeln!(o, "digest: {}", c.digest()?)?;
            writeln!(o, "lineage:")?;
            for e in &m.lineage {
                writeln!(o, "  {} {}", e.stage, e.digest)?;
            }
            for (k, v) in &m.settings {
                writeln!(o, "setting {k}: {v}")?;
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Run(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
