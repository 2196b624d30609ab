//! `cfdebias`: the command-line front end.
//!
//! Every subcommand reads an optional `--config` key=value file, layers its
//! own flags on top, then any `--set KEY=VALUE` overrides. Unknown keys are
//! errors. Exit status: 0 on success, 1 for invalid input or configuration,
//! 2 for failures while running.

mod commands;
mod run;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::run::resolve;

#[derive(Parser, Debug)]
#[command(
    name = "cfdebias",
    version,
    about = "Counterfactual debiasing for medical VQA"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// key=value configuration file
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one configuration key; repeatable
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Normalize source JSON/JSONL into canonical JSONL
    Ingest {
        #[command(flatten)]
        common: Common,
        /// Source file, optionally tagged with its split (`train=path.json`); repeatable
        #[arg(long, value_name = "[SPLIT=]PATH")]
        input: Vec<String>,
        /// Field-map preset (canonical, slake, radvqa) or field-map file
        #[arg(long, value_name = "NAME|FILE")]
        fields: Option<String>,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Build a changing-priors train/test split
    Resplit {
        #[command(flatten)]
        common: Common,
        /// Canonical JSONL corpus
        #[arg(long, value_name = "FILE")]
        input: Option<PathBuf>,
        #[arg(long, value_name = "F")]
        test_fraction: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Generate a synthetic corpus with a controllable answer prior
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Train the three-branch model with its counterfactual branch
    Train {
        #[command(flatten)]
        common: Common,
        /// Canonical JSONL; samples labelled `test` are ignored
        #[arg(long, value_name = "FILE")]
        data: Option<PathBuf>,
        /// Image feature JSONL
        #[arg(long, value_name = "FILE")]
        features: Option<PathBuf>,
        /// Directory holding PGM images
        #[arg(long, value_name = "DIR")]
        image_root: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Checkpoint directory
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Per-type accuracy report for one mode
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        ckpt: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        data: Option<PathBuf>,
        /// biased, debiased or prior_only
        #[arg(long)]
        mode: Option<String>,
        #[arg(long, value_name = "FILE")]
        features: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        image_root: Option<PathBuf>,
        /// Question-type mapping file (`type.<label>=<Row>`)
        #[arg(long, value_name = "FILE")]
        types: Option<PathBuf>,
        /// Which samples to score: auto, all, train or test
        #[arg(long)]
        split: Option<String>,
        /// Training corpus for prior_only
        #[arg(long, value_name = "FILE")]
        train: Option<PathBuf>,
        /// Prior key for prior_only: exact_question or question_type
        #[arg(long)]
        key: Option<String>,
        /// Dataset tag recorded in the report
        #[arg(long)]
        dataset: Option<String>,
        /// Report JSON path
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Side-by-side table of a biased and a debiased report
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "FILE")]
        biased: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        debiased: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Top answers under TE, NDE and TIE for chosen samples
    Explain {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        ckpt: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        data: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        features: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        image_root: Option<PathBuf>,
        /// Sample id; repeatable. Without ids the first `--limit` samples are used
        #[arg(long)]
        id: Vec<String>,
        #[arg(long)]
        top: Option<usize>,
        #[arg(long)]
        limit: Option<usize>,
        /// Output JSONL path
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Question→answer prior dominance report
    Audit {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "FILE")]
        data: Option<PathBuf>,
        /// exact_question or question_type
        #[arg(long)]
        key: Option<String>,
        /// Field-map preset or file for raw source files
        #[arg(long, value_name = "NAME|FILE")]
        fields: Option<String>,
        /// Split label applied to every record
        #[arg(long)]
        split: Option<String>,
        /// Rows printed to stdout
        #[arg(long)]
        top: Option<usize>,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Finite-difference gradient check over random small networks
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        cases: Option<usize>,
        /// Optional JSON report path
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
}

fn s<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(ToString::to_string)
}

fn p(v: &Option<PathBuf>) -> Option<String> {
    v.as_ref().map(|x| x.display().to_string())
}

fn joined(v: &[String]) -> Option<String> {
    (!v.is_empty()).then(|| v.join(","))
}

fn cfg_of(
    c: &Common,
    flags: &[(&str, Option<String>)],
) -> anyhow::Result<cfdebias::config::KvConfig> {
    resolve(c.config.as_deref(), flags, &c.sets)
}

fn dispatch(cmd: &Command) -> anyhow::Result<bool> {
    match cmd {
        Command::Ingest {
            common,
            input,
            fields,
            out,
        } => {
            let cfg = cfg_of(
                common,
                &[
                    ("ingest.input", joined(input)),
                    ("ingest.fields", s(fields)),
                ],
            )?;
            commands::ingest(&cfg, out)?;
        }
        Command::Resplit {
            common,
            input,
            test_fraction,
            seed,
            out,
        } => {
            let cfg = cfg_of(
                common,
                &[
                    ("resplit.input", p(input)),
                    ("resplit.test_fraction", s(test_fraction)),
                    ("seed", s(seed)),
                ],
            )?;
            commands::resplit(&cfg, out)?;
        }
        Command::Synth { common, seed, out } => {
            let cfg = cfg_of(common, &[("seed", s(seed))])?;
            commands::synth(&cfg, out)?;
        }
        Command::Train {
            common,
            data,
            features,
            image_root,
            seed,
            out,
        } => {
            let cfg = cfg_of(
                common,
                &[
                    ("train.data", p(data)),
                    ("train.features", p(features)),
                    ("train.image_root", p(image_root)),
                    ("seed", s(seed)),
                ],
            )?;
            commands::train(&cfg, out)?;
        }
        Command::Eval {
            common,
            ckpt,
            data,
            mode,
            features,
            image_root,
            types,
            split,
            train,
            key,
            dataset,
            out,
        } => {
            let cfg = cfg_of(
                common,
                &[
                    ("eval.ckpt", p(ckpt)),
                    ("eval.data", p(data)),
                    ("eval.mode", s(mode)),
                    ("eval.features", p(features)),
                    ("eval.image_root", p(image_root)),
                    ("eval.types", p(types)),
                    ("eval.split", s(split)),
                    ("eval.train", p(train)),
                    ("eval.key", s(key)),
                    ("eval.dataset", s(dataset)),
                ],
            )?;
            commands::eval(&cfg, out)?;
        }
        Command::Compare {
            common,
            biased,
            debiased,
            out,
        } => {
            let cfg = cfg_of(
                common,
                &[
                    ("compare.biased", p(biased)),
                    ("compare.debiased", p(debiased)),
                ],
            )?;
            commands::compare(&cfg, out)?;
        }
        Command::Explain {
            common,
            ckpt,
            data,
            features,
            image_root,
            id,
            top,
            limit,
            out,
        } => {
            let cfg = cfg_of(
                common,
                &[
                    ("explain.ckpt", p(ckpt)),
                    ("explain.data", p(data)),
                    ("explain.features", p(features)),
                    ("explain.image_root", p(image_root)),
                    ("explain.ids", joined(id)),
                    ("explain.top", s(top)),
                    ("explain.limit", s(limit)),
                ],
            )?;
            commands::explain(&cfg, out)?;
        }
        Command::Audit {
            common,
            data,
            key,
            fields,
            split,
            top,
            out,
        } => {
            let cfg = cfg_of(
                common,
                &[
                    ("audit.data", p(data)),
                    ("audit.key", s(key)),
                    ("audit.fields", s(fields)),
                    ("audit.split", s(split)),
                    ("audit.top", s(top)),
                ],
            )?;
            commands::audit(&cfg, out)?;
        }
        Command::Gradcheck {
            common,
            seed,
            cases,
            out,
        } => {
            let cfg = cfg_of(common, &[("seed", s(seed)), ("gradcheck.cases", s(cases))])?;
            return commands::gradcheck(&cfg, out.as_deref().map(Path::new));
        }
    }
    Ok(true)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<cfdebias::Error>() {
        Some(e) if e.is_validation() => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match dispatch(&cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
