use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mta_lab::checkpoint;
use mta_lab::config::RunConfig;
use mta_lab::data::{read_split, write_dataset, DatasetMeta, TaskSuite};
use mta_lab::eval::{evaluate, export_task_weights};
use mta_lab::gradcheck::{self, TOLERANCE};
use mta_lab::train::{run_ablations, run_training, StageSelect};
use mta_lab::Error;

#[derive(Parser)]
#[command(
    name = "mta-lab",
    version,
    about = "Train and evaluate mixture-of-task-adapters transformers"
)]
struct Cli {
    /// Worker threads for evaluation.
    #[arg(long, global = true, env = "MTA_LAB_THREADS", default_value_t = 1)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/test JSONL splits and their metadata.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run stage 1, stage 2 (resuming from the run's stage-1 checkpoint), or both.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "both")]
        stage: StageSelect,
        #[arg(long)]
        run: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset's test split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        max_new_tokens: usize,
    },
    /// Compare full two-stage training against the three ablations.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the task-weight matrices of a checkpoint as CSV.
    ExportWeights {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic and finite-difference gradients on seeded micro-graphs.
    GradCheck {
        #[arg(long, default_value_t = 1)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// A JSON config file plus flag overrides; flags win.
#[derive(Args)]
struct ConfigArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset directory written by `gen-data`.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    stage1_steps: Option<usize>,
    #[arg(long)]
    stage2_steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr1: Option<f64>,
    #[arg(long)]
    lr2: Option<f64>,
    /// Train every parameter in stage 2.
    #[arg(long)]
    no_freeze: bool,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig, Error> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = &self.data {
            cfg.data.dir = Some(v.clone());
        }
        if let Some(v) = self.stage1_steps {
            cfg.train.stage1_steps = v;
        }
        if let Some(v) = self.stage2_steps {
            cfg.train.stage2_steps = v;
        }
        if let Some(v) = self.batch_size {
            cfg.train.batch_size = v;
        }
        if let Some(v) = self.lr1 {
            cfg.train.lr_stage1 = v;
        }
        if let Some(v) = self.lr2 {
            cfg.train.lr_stage2 = v;
        }
        if self.no_freeze {
            cfg.train.freeze_backbone = false;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), Error> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn gen_data(cfg: &RunConfig, out: &Path) -> Result<(), Error> {
    let mut c = cfg.clone();
    c.data.dir = None;
    let data = c.datasets()?;
    let splits = [("train", data.train.as_slice()), ("test", data.test.as_slice())];
    let meta = DatasetMeta::describe(&data.suite, c.data_seed(), c.model.max_seq_len, &splits);
    write_dataset(out, &data.suite, &meta, &splits)?;
    println!(
        "wrote {} train and {} test examples to {} (fingerprint {})",
        data.train.len(),
        data.test.len(),
        out.display(),
        meta.fingerprint
    );
    Ok(())
}

fn train(cfg: &RunConfig, stage: StageSelect, run: &Path) -> Result<(), Error> {
    fs::create_dir_all(run).map_err(|e| Error::Io {
        path: run.to_path_buf(),
        source: e,
    })?;
    if stage == StageSelect::Two && !run.join(mta_lab::train::STAGE1_CKPT).exists() {
        return Err(Error::MissingFile(run.join(mta_lab::train::STAGE1_CKPT)));
    }
    write_text(&run.join("config.json"), &cfg.to_json()?)?;
    let data = cfg.datasets()?;
    let outcome = run_training(cfg, &data, stage, Some(run))?;
    let s = outcome.report.scores;
    println!(
        "cls {:.2}  nli {:.2}  gen {:.2}  composite {:.2}",
        s.cls, s.nli, s.gen, s.composite
    );
    if let Some(r) = outcome.report.trainable_ratio {
        println!("stage-2 trainable parameters: {:.2}% of stage 1", 100.0 * r);
    }
    Ok(())
}

fn eval(ckpt: &Path, data: &Path, out: &Path, max_new: usize) -> Result<(), Error> {
    let (model, _) = checkpoint::load(ckpt)?;
    let suite = TaskSuite::default();
    let test = read_split(data, "test", &suite, model.config().max_seq_len)?;
    let report = evaluate(&model, &suite, &test, model.stage(), max_new)?;
    write_text(out, &(serde_json::to_string_pretty(&report)? + "\n"))?;
    let s = report.scores;
    println!(
        "cls {:.2}  nli {:.2}  gen {:.2}  composite {:.2}",
        s.cls, s.nli, s.gen, s.composite
    );
    Ok(())
}

fn ablate(cfg: &RunConfig, seeds: &[u64], out: &Path) -> Result<(), Error> {
    let table = run_ablations(cfg, seeds)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    table.write_csv(out)?;
    for r in &table.rows {
        println!("{:<10} mean composite {:.2}", r.variant, r.mean);
    }
    Ok(())
}

fn export_weights(ckpt: &Path, out: &Path) -> Result<(), Error> {
    let (model, _) = checkpoint::load(ckpt)?;
    for p in export_task_weights(&model, out)? {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn grad_check(trials: usize, seed: u64) -> Result<bool, Error> {
    let started = std::time::Instant::now();
    let summary = gradcheck::run_suite(trials, seed)?;
    for c in &summary.cases {
        println!(
            "{:<22} seed {:<20} values {:<5} max rel err {:.3e}",
            c.name, c.seed, c.values, c.max_rel_err
        );
    }
    println!(
        "max relative error: {:.3e} over {} graphs in {:.1}s",
        summary.max_rel_err,
        summary.cases.len(),
        started.elapsed().as_secs_f64()
    );
    Ok(summary.passed())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::MissingFile(_) => 3,
        Error::Divergence { .. } => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.max(1))
        .build_global()
    {
        log::warn!("could not size the thread pool: {e}");
    }
    let result = match &cli.command {
        Command::GenData { cfg, out } => cfg.resolve().and_then(|c| gen_data(&c, out)),
        Command::Train { cfg, stage, run } => cfg.resolve().and_then(|c| train(&c, *stage, run)),
        Command::Eval {
            ckpt,
            data,
            out,
            max_new_tokens,
        } => eval(ckpt, data, out, *max_new_tokens),
        Command::Ablate { cfg, seeds, out } => cfg.resolve().and_then(|c| ablate(&c, seeds, out)),
        Command::ExportWeights { ckpt, out } => export_weights(ckpt, out),
        Command::GradCheck { trials, seed } => match grad_check(*trials, *seed) {
            Ok(true) => Ok(()),
            Ok(false) => {
                eprintln!("error[grad-check]: maximum relative error exceeds {TOLERANCE:e}");
                return ExitCode::from(1);
            }
            Err(e) => Err(e),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.category());
            ExitCode::from(exit_code(&e))
        }
    }
}
