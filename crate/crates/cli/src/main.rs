use std::fs;
use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use cgc_lora::merge::InferMode;
use cgc_lora::model::Variant;
use cgc_lora::taskdata::Split;
use cgc_lora::Exec;
use cgc_lora_cli::data::{gen_data, load_data};
use cgc_lora_cli::run::{self, EvalOpts, InferOpts, Overrides};
use cgc_lora_cli::sweep::{sweep, Axis, SweepOpts};
use cgc_lora_cli::{CliError, Result, RunConfig};
use clap::{Parser, Subcommand, ValueEnum};

/// Multi-task CGC-LoRA adapters on a toy transformer.
#[derive(Parser)]
#[command(name = "cgc-lora", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the synthetic task corpus.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every cluster into a new run directory under OUT.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        max_steps: Option<usize>,
        #[arg(long, value_enum)]
        variant: Option<VariantArg>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        sequential: bool,
    },
    /// Write per-task fused weights for a run.
    Merge {
        #[arg(long)]
        run: PathBuf,
    },
    /// Generate answers for line-delimited requests.
    Infer {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Defaults to stdout.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Use the gated expert forward instead of fused weights.
        #[arg(long)]
        unmerged: bool,
        #[arg(long)]
        max_new_tokens: Option<usize>,
        #[arg(long)]
        sequential: bool,
    },
    /// Score a run on a corpus split.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        unmerged: bool,
        /// Score the reference answers instead of generations.
        #[arg(long)]
        oracle: bool,
        /// At most this many samples per task.
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        max_new_tokens: Option<usize>,
        #[arg(long)]
        sequential: bool,
    },
    /// Train one model per value of an adapter hyperparameter.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        axis: AxisArg,
        /// Comma separated; defaults to the config grid.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<usize>>,
        /// Run configurations on separate threads.
        #[arg(long)]
        parallel: bool,
        #[arg(long)]
        sequential: bool,
    },
    /// Print the default config.
    DefaultConfig,
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum VariantArg {
    CgcLora,
    LoraFull,
    WoGate,
    MultiGate,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::CgcLora => Variant::CgcLora,
            VariantArg::LoraFull => Variant::LoraFull,
            VariantArg::WoGate => Variant::WoGate,
            VariantArg::MultiGate => Variant::MultiGate,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum AxisArg {
    NCommon,
    ExpertRank,
}

fn exec(sequential: bool) -> Exec {
    if sequential {
        Exec::Sequential
    } else {
        Exec::Parallel
    }
}

fn mode(unmerged: bool) -> InferMode {
    if unmerged {
        InferMode::Unmerged
    } else {
        InferMode::Merged
    }
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenData { config, out } => {
            let cfg = RunConfig::load(config.as_deref())?.config;
            let m = gen_data(&cfg, &out)?;
            for t in &m.tasks {
                println!("{}: train {} val {} test {}", t.file, t.train, t.val, t.test);
            }
        }
        Cmd::Train {
            config,
            data,
            out,
            max_steps,
            variant,
            seed,
            sequential,
        } => {
            let o = Overrides {
                max_steps,
                variant: variant.map(Variant::from),
                seed,
            };
            let dir = run::train(config.as_deref(), &data, &out, &o, exec(sequential))?;
            println!("{}", dir.display());
        }
        Cmd::Merge { run } => {
            for p in run::merge(&run)? {
                println!("{}", p.display());
            }
        }
        Cmd::Infer {
            run,
            input,
            output,
            unmerged,
            max_new_tokens,
            sequential,
        } => {
            let reqs = run::read_requests(&input)?;
            let opts = InferOpts {
                mode: mode(unmerged),
                max_new_tokens,
                exec: exec(sequential),
            };
            let outs = run::infer(&run, &reqs, &opts)?;
            match &output {
                Some(p) => {
                    let f = fs::File::create(p).map_err(|source| CliError::Io { path: p.clone(), source })?;
                    run::write_outputs(&outs, io::BufWriter::new(f))?
                }
                None => run::write_outputs(&outs, io::stdout().lock())?,
            }
            let failed = outs.iter().filter(|o| o.error.is_some()).count();
            if failed > 0 {
                eprintln!("{failed} of {} records failed", outs.len());
            }
            if run::all_failed(&outs) {
                return Err(CliError::Usage("every record failed".into()));
            }
        }
        Cmd::Eval {
            run,
            data,
            split,
            unmerged,
            oracle,
            limit,
            max_new_tokens,
            sequential,
        } => {
            let data = load_data(&data)?;
            let opts = EvalOpts {
                split: match split {
                    SplitArg::Train => Split::Train,
                    SplitArg::Val => Split::Val,
                    SplitArg::Test => Split::Test,
                },
                mode: mode(unmerged),
                oracle,
                limit,
                max_new_tokens,
                exec: exec(sequential),
            };
            let report = run::eval(&run, &data, &opts)?;
            let dir = run::save_eval(&run, &report)?;
            print!("{}", report.table());
            eprintln!("report written to {}", dir.display());
        }
        Cmd::Sweep {
            config,
            data,
            out,
            axis,
            values,
            parallel,
            sequential,
        } => {
            let opts = SweepOpts {
                axis: match axis {
                    AxisArg::NCommon => Axis::NCommon,
                    AxisArg::ExpertRank => Axis::ExpertRank,
                },
                values,
                parallel,
                exec: exec(sequential),
            };
            let (dir, result) = sweep(config.as_deref(), &data, &out, &opts)?;
            print!("{}", result.table);
            eprintln!("sweep written to {}", dir.display());
        }
        Cmd::DefaultConfig => print!("{}", RunConfig::default().to_toml()?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
