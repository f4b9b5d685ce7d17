//! Command-line surface: `rank`, `serialize` and `eval`.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration or validation failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::config::{family_plan, ConfigError, ExperimentConfig, FamilyConfig};
use crate::dataset::{infer_schema, load_table, Schema, Table};
use crate::eval::{emit_results_table, run_grid};
use crate::fewshot::{emit_jsonl, sample_shots, FewShotError};
use crate::importance::rank_features;
use crate::serialize::{Family, TaskPrompt};

/// File written by `rank` inside `--out`.
pub const REPORT_FILE: &str = "importance.json";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }

    fn invalid(e: impl ToString) -> Self {
        CliError::Validation(e.to_string())
    }

    fn runtime(e: impl ToString) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::invalid(e)
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "tabserial",
    version,
    about = "Serialize tabular rows into language-model prompts and evaluate few-shot AUC grids",
    after_help = "Exit codes: 0 success, 1 runtime failure, 2 configuration or validation failure.\n\
                  When both a --config file and a flag set the same value, the flag wins."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Rank features by absolute covariance with the label and write importance.json.
    Rank(RankArgs),
    /// Sample one shot set and write train.jsonl and eval.jsonl.
    Serialize(SerializeArgs),
    /// Run the full family x shots x seeds grid from a config file.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct RankArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long = "label-col")]
    pub label_col: Option<String>,
    #[arg(long)]
    pub positive: Option<String>,
    /// JSON schema file; replaces inference from --label-col and --positive.
    #[arg(long)]
    pub schema: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    pub k: usize,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SerializeArgs {
    /// One of text_template, feature_combination, importance_prefix, importance_suffix, latex.
    #[arg(long)]
    pub family: String,
    /// Experiment config supplying dataset, schema, groups, prompt text and eval size.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config's dataset.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long = "label-col")]
    pub label_col: Option<String>,
    #[arg(long)]
    pub positive: Option<String>,
    /// Importance report from `rank`; required for importance families.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub shots: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long = "eval-size")]
    pub eval_size: Option<usize>,
    #[arg(long = "token-budget")]
    pub token_budget: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config's output_dir.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn load_with_inferred_schema(
    data: &Path,
    schema: Option<&Path>,
    label: Option<&str>,
    positive: Option<&str>,
) -> Result<Table, CliError> {
    let schema = match (schema, label, positive) {
        (Some(path), _, _) => {
            let text = fs::read_to_string(path).map_err(|e| {
                CliError::invalid(format!("cannot read schema {}: {e}", path.display()))
            })?;
            serde_json::from_str::<Schema>(&text)
                .map_err(|e| CliError::invalid(format!("invalid schema {}: {e}", path.display())))?
        }
        (None, Some(label), Some(positive)) => {
            infer_schema(data, label, positive).map_err(CliError::invalid)?
        }
        _ => {
            return Err(CliError::invalid(
                "either --schema or both --label-col and --positive are required",
            ))
        }
    };
    load_table(data, &schema).map_err(CliError::invalid)
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir)
        .map_err(|e| CliError::runtime(format!("cannot create {}: {e}", dir.display())))
}

pub fn cmd_rank(args: &RankArgs) -> Result<PathBuf, CliError> {
    let table = load_with_inferred_schema(
        &args.data,
        args.schema.as_deref(),
        args.label_col.as_deref(),
        args.positive.as_deref(),
    )?;
    let report = rank_features(&table, args.k).map_err(CliError::invalid)?;
    create_dir(&args.out)?;
    let path = args.out.join(REPORT_FILE);
    fs::write(&path, report.to_json_pretty() + "\n")
        .map_err(|e| CliError::runtime(format!("cannot write {}: {e}", path.display())))?;
    log::info!("top {}: {}", report.k, report.top_k.join(", "));
    Ok(path)
}

pub fn cmd_serialize(args: &SerializeArgs) -> Result<(PathBuf, PathBuf), CliError> {
    let family: Family = args.family.parse().map_err(CliError::invalid)?;
    let config = args
        .config
        .as_deref()
        .map(ExperimentConfig::from_file)
        .transpose()?;

    let mut fc = config
        .as_ref()
        .and_then(|c| c.families.iter().find(|f| f.family == family).cloned())
        .unwrap_or_else(|| FamilyConfig::new(family));
    if args.report.is_some() {
        fc.report = args.report.clone();
    }
    if args.token_budget.is_some() {
        fc.token_budget = args.token_budget;
    }
    if family.needs_report() && fc.report.is_none() {
        return Err(CliError::invalid(format!(
            "family {family} needs an importance report: pass --report or set it in the config"
        )));
    }

    let (table, task, eval_size) = match config {
        Some(mut c) => {
            if let Some(d) = &args.data {
                c.dataset = d.clone();
            }
            if args.label_col.is_some() || args.positive.is_some() {
                c.schema = None;
                c.label_column = args.label_col.clone().or(c.label_column);
                c.positive_label = args.positive.clone().or(c.positive_label);
            }
            (
                c.load_table()?,
                c.task(),
                args.eval_size.unwrap_or(c.eval_size),
            )
        }
        None => {
            let data = args
                .data
                .as_deref()
                .ok_or_else(|| CliError::invalid("--data is required without --config"))?;
            let table = load_with_inferred_schema(
                data,
                None,
                args.label_col.as_deref(),
                args.positive.as_deref(),
            )?;
            (table, TaskPrompt::default(), args.eval_size.unwrap_or(100))
        }
    };
    task.validate().map_err(CliError::invalid)?;

    let (table, spec) = family_plan(&table, &fc)?;
    let shots =
        sample_shots(&table, args.shots, args.seed, eval_size).map_err(CliError::invalid)?;
    let paths = emit_jsonl(&table, &shots, &spec, &task, &args.out).map_err(|e| match e {
        FewShotError::Write { .. } => CliError::runtime(e),
        _ => CliError::invalid(e),
    })?;
    Ok(paths)
}

/// Where `eval` wrote its results and how many cells failed.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub failed: usize,
    pub results_csv: PathBuf,
    pub results_json: PathBuf,
}

/// Runs the grid and writes results, including when some cells failed.
pub fn cmd_eval(args: &EvalArgs) -> Result<EvalSummary, CliError> {
    let mut config = ExperimentConfig::from_file(&args.config)?;
    if let Some(out) = &args.out {
        config.output_dir = out.clone();
    }
    let exp = config.validate()?;
    let predictor = exp
        .predictor
        .build(&exp.verbalizer)
        .map_err(CliError::invalid)?;
    create_dir(&exp.output_dir)?;
    let result = run_grid(&exp, predictor.as_ref());
    let (results_csv, results_json) =
        emit_results_table(&result, &exp.output_dir).map_err(CliError::runtime)?;
    Ok(EvalSummary {
        failed: result.failures.len(),
        results_csv,
        results_json,
    })
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Rank(a) => {
            println!("{}", cmd_rank(a)?.display());
        }
        Command::Serialize(a) => {
            let (train, eval) = cmd_serialize(a)?;
            println!("{}", train.display());
            println!("{}", eval.display());
        }
        Command::Eval(a) => {
            let summary = cmd_eval(a)?;
            println!("{}", summary.results_csv.display());
            println!("{}", summary.results_json.display());
            let failed = summary.failed;
            if failed > 0 {
                return Err(CliError::Runtime(format!(
                    "{failed} grid cell(s) failed; see failures.json"
                )));
            }
        }
    }
    Ok(())
}

/// Parses arguments, runs the command and maps the outcome to an exit code.
pub fn main_entry() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn parses_serialize_flags() {
        let cli = Cli::try_parse_from([
            "tabserial",
            "serialize",
            "--family",
            "latex",
            "--data",
            "d.csv",
            "--label-col",
            "Label",
            "--positive",
            "1",
            "--shots",
            "8",
            "--out",
            "o",
        ])
        .unwrap();
        let Command::Serialize(a) = cli.command else {
            panic!()
        };
        assert_eq!(a.shots, 8);
        assert_eq!(a.seed, 0);
        assert_eq!(a.family, "latex");
    }

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::invalid("x").exit_code(), 2);
        assert_eq!(CliError::runtime("x").exit_code(), 1);
    }
}
