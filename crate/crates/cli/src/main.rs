use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use icl_demos::evaluator::PredictionMode;
use icl_demos::pipeline::{exit_code, BackendConfig, PipelineConfig, Run, Stage, StageError};
use icl_demos::planted::{self, PlantedTask, PlantedTaskConfig};
use icl_demos::sampler::ScoringChoice;
use icl_demos::ErrorKind;

#[derive(Parser)]
#[command(
    name = "icl-demos",
    version,
    about = "Demonstration selection and label construction for in-context learning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every stage and write the manifest.
    Run(Common),
    /// Refine the class-word pool.
    Refine(Common),
    /// Score training samples against the refined pool.
    Score(Common),
    /// Select and order demonstrations.
    Select(Common),
    /// Pick each class's anchor word.
    InitLabels(Common),
    /// Greedy label-word insertion against the dev set.
    Insert(Common),
    /// Evaluate on the test set.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Write per-example candidate logits as CSV.
        #[arg(long)]
        logits_csv: Option<PathBuf>,
    },
    /// Evaluate demonstration-order permutations.
    Permute {
        #[command(flatten)]
        common: Common,
        /// Number of permutations.
        #[arg(long = "n", default_value_t = 30)]
        n_perms: usize,
    },
    /// Write a planted synthetic task and a matching config.
    Synth {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 50)]
        train_per_class: usize,
        #[arg(long, default_value_t = 20)]
        test_per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Cn,
    Anchors,
    Lw,
    Pool,
}

impl From<ModeArg> for PredictionMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Cn => PredictionMode::ClassNames,
            ModeArg::Anchors => PredictionMode::AnchorWords,
            ModeArg::Lw => PredictionMode::InsertedWords,
            ModeArg::Pool => PredictionMode::FullPool,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ScoringArg {
    Sum,
    Rank,
    Auto,
}

impl From<ScoringArg> for ScoringChoice {
    fn from(s: ScoringArg) -> Self {
        match s {
            ScoringArg::Sum => ScoringChoice::Sum,
            ScoringArg::Rank => ScoringChoice::Rank,
            ScoringArg::Auto => ScoringChoice::Auto,
        }
    }
}

#[derive(Args)]
struct Common {
    /// Pipeline config (JSON).
    #[arg(long, short)]
    config: PathBuf,
    /// Output root; the run directory is created beneath it.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Logit server URL for configs with an HTTP backend.
    #[arg(long, env = "ICL_LOGIT_ENDPOINT")]
    endpoint: Option<String>,
    #[arg(long, value_enum)]
    scoring: Option<ScoringArg>,
    /// Demonstrations per class.
    #[arg(long)]
    shots: Option<usize>,
    /// Drop the highest-scoring demonstration.
    #[arg(long)]
    unbalanced: bool,
    /// Candidate set for test evaluation.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Score dev accuracy with all inserted words during insertion.
    #[arg(long)]
    lw_guided: bool,
    #[arg(long)]
    per_class_stopping: bool,
    /// Evaluate with label sequences from this pool-format file.
    #[arg(long)]
    cross_pool: Option<PathBuf>,
    /// Permutations evaluated by `run`.
    #[arg(long)]
    permutations: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    parallelism: Option<usize>,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
}

impl Common {
    fn config(&self) -> Result<PipelineConfig, icl_demos::Error> {
        let mut cfg = PipelineConfig::load(&self.config)?;
        if let (Some(e), BackendConfig::Http(_)) = (&self.endpoint, &cfg.backend) {
            cfg.backend = BackendConfig::Http(Some(e.clone()));
        }
        if let Some(s) = self.scoring {
            cfg.scoring = s.into();
        }
        if let Some(k) = self.shots {
            cfg.shots = k;
        }
        if self.unbalanced {
            cfg.balanced = false;
        }
        if let Some(m) = self.mode {
            cfg.mode = m.into();
        }
        if self.lw_guided {
            cfg.dev_mode = PredictionMode::InsertedWords;
        }
        if self.per_class_stopping {
            cfg.per_class_stopping = true;
        }
        if let Some(p) = &self.cross_pool {
            cfg.cross_pool = Some(p.clone());
        }
        if let Some(n) = self.permutations {
            cfg.permutations = n;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(p) = self.parallelism {
            cfg.parallelism = p;
        }
        if let Some(d) = &self.cache_dir {
            cfg.cache_dir = Some(d.clone());
        }
        Ok(cfg)
    }

    fn open(&self) -> Result<Run, Failure> {
        let cfg = self.config().map_err(|source| StageError {
            stage: Stage::Load,
            source,
        })?;
        Ok(Run::open(cfg, &self.out)?)
    }
}

enum Failure {
    Stage(StageError),
    Other(anyhow::Error),
}

impl From<StageError> for Failure {
    fn from(e: StageError) -> Self {
        Failure::Stage(e)
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Other(e)
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn synth(out: &Path, cfg: &PlantedTaskConfig) -> anyhow::Result<()> {
    let task = PlantedTask::generate(cfg)?;
    task.write(out)
        .with_context(|| format!("writing task to {}", out.display()))?;
    let config = PipelineConfig::new(
        Path::new(planted::TRAIN_FILE),
        Path::new(planted::TEST_FILE),
        Path::new(planted::POOL_FILE),
        Path::new(planted::TEMPLATE_FILE),
        BackendConfig::Synthetic(planted::SYNTHETIC_FILE.into()),
    );
    let path = out.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&config)? + "\n")
        .with_context(|| format!("writing {}", path.display()))?;
    println!("{}", path.display());
    Ok(())
}

fn execute(command: Command) -> Result<(), Failure> {
    match command {
        Command::Run(c) => {
            let run = c.open()?;
            let report = run.run_all()?;
            log::info!("run directory {}", run.dir.display());
            println!("{}", run.dir.display());
            println!(
                "accuracy {:.4} ({}/{})",
                report.accuracy, report.correct, report.n_test
            );
        }
        Command::Refine(c) => {
            let run = c.open()?;
            let report = run.refine()?;
            run.write_manifest()?;
            println!(
                "kept {} of {} words",
                report.kept().count(),
                report.words.len()
            );
        }
        Command::Score(c) => {
            let run = c.open()?;
            let scores = run.score()?;
            run.write_manifest()?;
            let eligible = scores.iter().filter(|s| s.eligible).count();
            println!("{eligible} of {} samples eligible", scores.len());
        }
        Command::Select(c) => {
            let run = c.open()?;
            let plan = run.select()?;
            run.write_manifest()?;
            print_json(&plan)?;
        }
        Command::InitLabels(c) => {
            let run = c.open()?;
            let anchors = run.init_labels()?;
            run.write_manifest()?;
            print_json(&anchors)?;
        }
        Command::Insert(c) => {
            let run = c.open()?;
            let (labels, _) = run.insert()?;
            run.write_manifest()?;
            print_json(&labels)?;
        }
        Command::Eval {
            mut common,
            logits_csv,
        } => {
            // The mode chooses this evaluation only; it does not select a
            // different run directory.
            let mode = common.mode.take().map(PredictionMode::from);
            let run = common.open()?;
            let report = run.eval(mode, logits_csv.as_deref())?;
            run.write_manifest()?;
            println!(
                "{} accuracy {:.4} ({}/{})",
                report.mode, report.accuracy, report.correct, report.n_test
            );
        }
        Command::Permute { common, n_perms } => {
            let run = common.open()?;
            let seed = run.config.seed;
            let study = run.permute(n_perms, seed)?;
            run.write_manifest()?;
            let accs: Vec<f64> = study.results.iter().map(|r| r.accuracy).collect();
            let mean = accs.iter().sum::<f64>() / accs.len().max(1) as f64;
            println!(
                "plan accuracy {:.4}; {} permutations, mean {:.4}",
                study.plan_accuracy,
                accs.len(),
                mean
            );
        }
        Command::Synth {
            out,
            classes,
            train_per_class,
            test_per_class,
            seed,
        } => {
            let cfg = PlantedTaskConfig {
                classes,
                train_per_class,
                test_per_class,
                seed,
                ..PlantedTaskConfig::default()
            };
            synth(&out, &cfg)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Stage(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
        Err(Failure::Other(e)) => {
            eprintln!("error: {e:#}");
            let code = match e.downcast_ref::<icl_demos::Error>() {
                Some(err) => exit_code(err.kind()),
                None => exit_code(ErrorKind::Data),
            };
            ExitCode::from(code as u8)
        }
    }
}
