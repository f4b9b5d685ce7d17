//! AUC and the serializer x shot-count x seed grid.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use thiserror::Error;

use crate::config::{ConfigError, Experiment, ExperimentConfig, FamilyPlan};
use crate::fewshot::{emit_jsonl, sample_shots, ShotSet};
use crate::predict::{score_prompts, Predictor};
use crate::serialize::prompt_for_row;

pub const RESULTS_CSV: &str = "results.csv";
pub const RESULTS_JSON: &str = "results.json";
pub const FAILURES_JSON: &str = "failures.json";
pub const TIMINGS_JSON: &str = "timings.json";
/// Header of the first results column.
pub const METHOD_HEADER: &str = "Serialization Method";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("scores and labels differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("AUC needs at least one positive and one negative label")]
    SingleClass,
    #[error("score {0} is not finite")]
    NonFiniteScore(f64),
    #[error("result has no completed cells")]
    EmptyResult,
    #[error("cannot write {}: {source}", path.display())]
    Write {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

/// Mann-Whitney AUC: the fraction of (positive, negative) pairs where the
/// positive scores higher, ties counting one half. Computed from mid-ranks.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch(scores.len(), labels.len()));
    }
    if let Some(&s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(EvalError::NonFiniteScore(s));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::SingleClass);
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // twice the rank sum keeps mid-ranks integral
    let mut rank_sum_x2: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j share the mid-rank (i+1+j)/2
        let mid_x2 = (i + 1 + j) as u64;
        let positives = order[i..j].iter().filter(|&&o| labels[o]).count() as u64;
        rank_sum_x2 += mid_x2 * positives;
        i = j;
    }
    let (p, q) = (n_pos as u64, n_neg as u64);
    let u_x2 = rank_sum_x2 - p * (p + 1);
    Ok(u_x2 as f64 / (2 * p * q) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellResult {
    pub family: String,
    pub k: usize,
    pub seed: u64,
    pub auc: f64,
    pub eval_rows: usize,
    /// Free-text outputs that matched no verbalizer form.
    pub unmatched: usize,
    #[serde(skip)]
    pub runtime_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellFailure {
    pub family: String,
    pub k: usize,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalResult {
    pub families: Vec<String>,
    pub shots: Vec<usize>,
    pub seeds: Vec<u64>,
    pub cells: Vec<CellResult>,
    pub failures: Vec<CellFailure>,
}

impl EvalResult {
    pub fn cell(&self, family: &str, k: usize, seed: u64) -> Option<&CellResult> {
        self.cells
            .iter()
            .find(|c| c.family == family && c.k == k && c.seed == seed)
    }

    /// Mean AUC over the completed seeds of one (family, k) pair.
    pub fn mean_auc(&self, family: &str, k: usize) -> Option<f64> {
        let aucs: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| c.family == family && c.k == k)
            .map(|c| c.auc)
            .collect();
        (!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64)
    }

    pub fn is_complete(&self) -> bool {
        self.failures.is_empty()
    }
}

fn slug(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() {
                c.to_ascii_lowercase()
            } else {
                '_'
            }
        })
        .collect()
}

/// Corpus directory of one grid cell.
pub fn cell_dir(output_dir: &Path, family: &str, k: usize, seed: u64) -> PathBuf {
    output_dir
        .join("corpus")
        .join(slug(family))
        .join(format!("k{k}-seed{seed}"))
}

fn run_cell(
    exp: &Experiment,
    family: &FamilyPlan,
    shots: &ShotSet,
    predictor: &dyn Predictor,
) -> Result<(f64, usize), String> {
    if shots.k > 0 {
        let dir = cell_dir(&exp.output_dir, &family.name, shots.k, shots.seed);
        emit_jsonl(&family.table, shots, &family.spec, &exp.task, &dir)
            .map_err(|e| e.to_string())?;
    }
    let prompts = shots
        .eval_rows
        .iter()
        .map(|&r| {
            prompt_for_row(&family.table, r, &family.spec, &exp.task)
                .map(|p| (r, p))
                .map_err(|e| format!("row {r}: {e}"))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let scores = score_prompts(predictor, &prompts).map_err(|e| e.to_string())?;
    let probabilities: Vec<f64> = scores.iter().map(|s| s.positive_probability).collect();
    let labels: Vec<bool> = shots
        .eval_rows
        .iter()
        .map(|&r| family.table.labels()[r])
        .collect();
    let value = auc(&probabilities, &labels).map_err(|e| e.to_string())?;
    Ok((value, scores.iter().filter(|s| s.unmatched).count()))
}

/// Runs every (family, k, seed) cell. Shot sets depend only on (k, seed), so
/// all families see the same rows. Failed cells are recorded, not fatal.
pub fn run_grid(exp: &Experiment, predictor: &dyn Predictor) -> EvalResult {
    let mut shot_sets = BTreeMap::new();
    for &k in &exp.shots {
        for &seed in &exp.seeds {
            let set = sample_shots(&exp.table, k, seed, exp.eval_size).map_err(|e| e.to_string());
            shot_sets.insert((k, seed), set);
        }
    }

    let mut cells = Vec::new();
    let mut failures = Vec::new();
    for family in &exp.families {
        for &k in &exp.shots {
            for &seed in &exp.seeds {
                let started = Instant::now();
                let outcome = match &shot_sets[&(k, seed)] {
                    Ok(shots) => run_cell(exp, family, shots, predictor),
                    Err(e) => Err(e.clone()),
                };
                match outcome {
                    Ok((value, unmatched)) => {
                        log::info!("{} k={k} seed={seed}: auc={value:.3}", family.name);
                        cells.push(CellResult {
                            family: family.name.clone(),
                            k,
                            seed,
                            auc: value,
                            eval_rows: exp.eval_size,
                            unmatched,
                            runtime_secs: started.elapsed().as_secs_f64(),
                        });
                    }
                    Err(error) => {
                        log::warn!("{} k={k} seed={seed}: failed: {error}", family.name);
                        failures.push(CellFailure {
                            family: family.name.clone(),
                            k,
                            seed,
                            error,
                        });
                    }
                }
            }
        }
    }

    EvalResult {
        families: exp.families.iter().map(|f| f.name.clone()).collect(),
        shots: exp.shots.clone(),
        seeds: exp.seeds.clone(),
        cells,
        failures,
    }
}

/// Validates `config`, builds its predictor and runs the grid.
pub fn run_experiment(config: &ExperimentConfig) -> Result<EvalResult, ConfigError> {
    let exp = config.validate()?;
    let predictor = exp.predictor.build(&exp.verbalizer)?;
    Ok(run_grid(&exp, predictor.as_ref()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), EvalError> {
    let mut text = serde_json::to_string_pretty(value).expect("results serialize");
    text.push('\n');
    fs::write(path, text).map_err(|source| EvalError::Write {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Serialize)]
struct Timing<'a> {
    family: &'a str,
    k: usize,
    seed: u64,
    seconds: f64,
}

/// Writes the families x shots AUC matrix (seed means, 3 decimals) as CSV
/// and all raw cells as JSON. Failures and timings go to separate files.
pub fn emit_results_table(
    result: &EvalResult,
    out_dir: &Path,
) -> Result<(PathBuf, PathBuf), EvalError> {
    if result.families.is_empty() || result.shots.is_empty() {
        return Err(EvalError::EmptyResult);
    }
    let write_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source| EvalError::Write { path, source }
    };
    fs::create_dir_all(out_dir).map_err(write_err(out_dir))?;

    let csv_path = out_dir.join(RESULTS_CSV);
    let file = File::create(&csv_path).map_err(write_err(&csv_path))?;
    let mut w = csv::Writer::from_writer(file);
    let to_io = |e: csv::Error| io::Error::other(e.to_string());
    let mut header = vec![METHOD_HEADER.to_string()];
    header.extend(result.shots.iter().map(|k| k.to_string()));
    w.write_record(&header)
        .map_err(to_io)
        .map_err(write_err(&csv_path))?;
    for family in &result.families {
        let mut record = vec![family.clone()];
        record.extend(result.shots.iter().map(|&k| {
            result
                .mean_auc(family, k)
                .map_or(String::new(), |a| format!("{a:.3}"))
        }));
        w.write_record(&record)
            .map_err(to_io)
            .map_err(write_err(&csv_path))?;
    }
    w.flush().map_err(write_err(&csv_path))?;

    let json_path = out_dir.join(RESULTS_JSON);
    write_json(&json_path, result)?;

    let failures_path = out_dir.join(FAILURES_JSON);
    if result.failures.is_empty() {
        if failures_path.exists() {
            fs::remove_file(&failures_path).map_err(write_err(&failures_path))?;
        }
    } else {
        write_json(&failures_path, &result.failures)?;
    }

    let timings: Vec<Timing> = result
        .cells
        .iter()
        .map(|c| Timing {
            family: &c.family,
            k: c.k,
            seed: c.seed,
            seconds: c.runtime_secs,
        })
        .collect();
    write_json(&out_dir.join(TIMINGS_JSON), &timings)?;
    Ok((csv_path, json_path))
}
