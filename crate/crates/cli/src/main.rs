use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use radvl::ablate::cmd_ablate;
use radvl::commands::{cmd_eval, cmd_gen_corpus, cmd_pipeline, cmd_train, Global};
use radvl::infer::{cmd_infer, InferRequest};
use radvl::{CliError, Component, RunConfig};
use radvl_core::corpus::{Split, Task};
use radvl_core::eval::TaskSelection;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "radvl", version, about = "Synthetic chest-film / report model: corpus, training, evaluation")]
struct Cli {
    /// Run configuration (JSON). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the run seed and the corpus seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory (for `infer`: where outputs are written).
    #[arg(long, global = true, default_value = "runs/default")]
    out: PathBuf,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
    /// Worker threads for corpus generation and evaluation.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Phi,
    Tokenizer,
    Stage1,
    Stage2,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum EvalTask {
    Report,
    Image,
    Vqa,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum InferTask {
    #[value(name = "cxr_to_report")]
    CxrToReport,
    #[value(name = "report_to_cxr")]
    ReportToCxr,
    Vqa,
}

#[derive(Subcommand)]
enum Command {
    /// Render the corpus into <out>/corpus.
    GenCorpus,
    /// Train one stage from the checkpoints already in <out>.
    Train {
        #[arg(long, value_enum)]
        stage: StageArg,
    },
    /// Evaluate the stage-2 model; writes <out>/eval/<split>/.
    Eval {
        /// Defaults to the config's eval.splits.
        #[arg(long, value_enum)]
        split: Option<SplitArg>,
        #[arg(long, value_enum, default_value = "all")]
        task: EvalTask,
        /// Language-model checkpoint directory (default <out>/checkpoints/stage2).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run one input through a trained run.
    Infer {
        /// Run directory with corpus/ and checkpoints/.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        task: InferTask,
        /// PGM path for cxr_to_report and vqa; report text for report_to_cxr.
        #[arg(long)]
        input: String,
        #[arg(long)]
        question: Option<String>,
    },
    /// Full / no clinical loss / no instructions / no two-stage, three seeds each.
    Ablate,
    /// gen-corpus, every training stage, then eval.
    Pipeline,
    /// Print the effective configuration, or its JSON schema.
    Config {
        #[arg(long)]
        schema: bool,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        config = config.with_seed(s);
    }
    let workers = cli.workers.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let g = Global { config, out: cli.out, force: cli.force, workers };
    match cli.command {
        Command::GenCorpus => {
            cmd_gen_corpus(&g)?;
        }
        Command::Train { stage } => {
            let c = match stage {
                StageArg::Phi => Component::Phi,
                StageArg::Tokenizer => Component::Tokenizer,
                StageArg::Stage1 => Component::Stage1,
                StageArg::Stage2 => Component::Stage2,
            };
            cmd_train(&g, c)?;
        }
        Command::Eval { split, task, checkpoint } => {
            let split = split.map(|s| match s {
                SplitArg::Train => Split::Train,
                SplitArg::Val => Split::Val,
                SplitArg::Test => Split::Test,
            });
            let tasks = match task {
                EvalTask::Report => TaskSelection { report: true, image: false, vqa: false },
                EvalTask::Image => TaskSelection { report: false, image: true, vqa: false },
                EvalTask::Vqa => TaskSelection { report: false, image: false, vqa: true },
                EvalTask::All => TaskSelection::ALL,
            };
            cmd_eval(&g, split, tasks, checkpoint.as_deref())?;
        }
        Command::Infer { checkpoint, task, input, question } => {
            let task = match task {
                InferTask::CxrToReport => Task::CxrToReport,
                InferTask::ReportToCxr => Task::ReportToCxr,
                InferTask::Vqa => Task::Vqa,
            };
            let req = InferRequest { run: &checkpoint, task, input: &input, question: question.as_deref() };
            let outcome = cmd_infer(&g, &req)?;
            if let Some(text) = outcome.text {
                println!("{text}");
            }
            if let Some(path) = outcome.image {
                println!("{}", path.display());
            }
        }
        Command::Ablate => {
            cmd_ablate(&g)?;
        }
        Command::Pipeline => {
            cmd_pipeline(&g)?;
        }
        Command::Config { schema } => {
            print!("{}", if schema { RunConfig::schema_json() } else { g.config.to_json() });
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
