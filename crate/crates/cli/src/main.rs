//! `speechnet`: train, evaluate, run and compare multi-task speech models.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use speechnet::checkpoint::Checkpoint;
use speechnet::config::ExperimentConfig;
use speechnet::evaluation::report::reports_to_tsv;
use speechnet::features::manifest::Split;
use speechnet::infer::{infer_files, InferRequest};
use speechnet::matrix::{run_matrix, GridConfig};
use speechnet::tasks::Task;
use speechnet::train::{train, Experiment, RunDir};
use speechnet::{Error, Result};

#[derive(Parser)]
#[command(name = "speechnet", version, about = "Multi-task speech processing with shared modules")]
struct Cli {
    /// Directory under which runs are created, one subdirectory per run name.
    #[arg(long, global = true, env = "SPEECHNET_RUN_ROOT", default_value = "runs")]
    run_root: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Valid,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Valid => Split::Valid,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train the tasks of a config; writes metrics, checkpoints and validation scores.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from this checkpoint at the step after it.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Run directory; defaults to `<run-root>/<config name>`.
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
    /// Score a checkpoint on every active task of a config.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Also write the TSV here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one task of a checkpoint over input files.
    Infer {
        #[arg(long)]
        task: Task,
        #[arg(long)]
        ckpt: PathBuf,
        /// Audio files, or text files for TTS.
        #[arg(long = "in", num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Target speaker for TTS.
        #[arg(long)]
        speaker: Option<usize>,
        /// Target-voice utterance for VC, prosody reference for TTS.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Train and score the single-task, two-task and five-task grid.
    Matrix {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn config_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, resume, run_dir } => {
            let cfg = ExperimentConfig::load(&config)?;
            let dir = run_dir.unwrap_or_else(|| cli.run_root.join(&cfg.name));
            let resume = resume.map(Checkpoint::load).transpose()?;
            let exp = Experiment::prepare(cfg, &config_dir(&config))?;
            let run = RunDir::open(&dir)?;
            let s = train(&exp, &run, resume)?;
            println!("trained to step {}", s.final_step);
            for (t, l) in &s.final_losses {
                println!("final loss {}\t{l:.6}", t.label());
            }
            for (t, (step, v)) in &s.best.tasks {
                println!("best {}\tstep {step}\t{v:.6}", t.label());
            }
            println!("checkpoint {}", s.last_checkpoint.display());
        }
        Command::Eval { config, ckpt, split, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let ck = Checkpoint::load(&ckpt)?;
            ck.check_config(&cfg)?;
            let exp = Experiment::prepare(cfg, &config_dir(&config))?;
            let id = ckpt.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
            let reports = exp.evaluate(&ck.state.params, split.into(), &id)?;
            if reports.is_empty() {
                return Err(Error::Missing(format!("{} data for every active task", Split::from(split).name())));
            }
            let tsv = reports_to_tsv(&reports);
            if let Some(p) = out {
                std::fs::write(&p, &tsv).map_err(|e| Error::io(&p, e))?;
            }
            print!("{tsv}");
        }
        Command::Infer {
            task,
            ckpt,
            inputs,
            out,
            speaker,
            reference,
        } => {
            let ck = Checkpoint::load(&ckpt)?;
            if !ck.config.tasks.active.contains(&task) {
                return Err(Error::Config(format!("checkpoint was not trained on {}", task.label())));
            }
            let req = InferRequest {
                inputs,
                out_dir: out,
                speaker,
                reference,
            };
            for p in infer_files(&ck, task, &req)? {
                println!("{}", p.display());
            }
        }
        Command::Matrix { grid, out } => {
            let g = GridConfig::load(&grid)?;
            let o = run_matrix(&g, &config_dir(&grid), &out)?;
            for (name, err) in &o.failures {
                eprintln!("{name}: {err}");
            }
            if let Some((two, five)) = &o.tables {
                print!("{}", two.to_tsv());
                if !o.five_task.is_empty() {
                    println!();
                    print!("{}", five.to_tsv());
                }
            }
            println!("results in {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.code(), e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
