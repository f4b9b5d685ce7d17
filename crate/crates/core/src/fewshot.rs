//! k-shot training sets and evaluation splits.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Table;
use crate::serialize::{prompt_for_row, CorpusRecord, SerializeError, SerializerSpec, TaskPrompt};

pub const TRAIN_FILE: &str = "train.jsonl";
pub const EVAL_FILE: &str = "eval.jsonl";

#[derive(Debug, Error)]
pub enum FewShotError {
    #[error("class {class:?} has {available} rows, {needed} are needed for k = {k}")]
    InsufficientClass {
        class: String,
        available: usize,
        needed: usize,
        k: usize,
    },
    #[error("k = {k} plus eval_size = {eval_size} exceeds the {rows} table rows")]
    EvalExhausted {
        k: usize,
        eval_size: usize,
        rows: usize,
    },
    #[error("eval_size must be positive")]
    ZeroEvalSize,
    #[error("row {row}: {source}")]
    Serialize {
        row: usize,
        #[source]
        source: SerializeError,
    },
    #[error("cannot write {}: {source}", path.display())]
    Write {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

/// Row indices selected for one (k, seed) cell.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShotSet {
    pub k: usize,
    pub train_rows: Vec<usize>,
    pub eval_rows: Vec<usize>,
    pub seed: u64,
}

/// Class-balanced sampling without replacement. For odd k the positive class
/// gets the extra row. Eval rows come from the remainder, stratified to its
/// class ratio, and are returned in table order.
pub fn sample_shots(
    table: &Table,
    k: usize,
    seed: u64,
    eval_size: usize,
) -> Result<ShotSet, FewShotError> {
    if eval_size == 0 {
        return Err(FewShotError::ZeroEvalSize);
    }
    let labels = table.labels();
    let mut positives: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
    let mut negatives: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i]).collect();

    let want_pos = k.div_ceil(2);
    let want_neg = k / 2;
    for (rows, needed, positive) in [(&positives, want_pos, true), (&negatives, want_neg, false)] {
        if rows.len() < needed {
            return Err(FewShotError::InsufficientClass {
                class: table.class_name(positive),
                available: rows.len(),
                needed,
                k,
            });
        }
    }
    if k + eval_size > table.len() {
        return Err(FewShotError::EvalExhausted {
            k,
            eval_size,
            rows: table.len(),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    positives.shuffle(&mut rng);
    negatives.shuffle(&mut rng);

    let mut train_rows: Vec<usize> = positives[..want_pos]
        .iter()
        .chain(&negatives[..want_neg])
        .copied()
        .collect();
    train_rows.shuffle(&mut rng);

    let rest_pos = &positives[want_pos..];
    let rest_neg = &negatives[want_neg..];
    let rest = rest_pos.len() + rest_neg.len();
    let mut eval_pos = ((eval_size * rest_pos.len()) as f64 / rest as f64).round() as usize;
    // both classes stay represented whenever the remainder allows it
    if eval_size >= 2 {
        eval_pos = eval_pos.clamp(
            usize::from(!rest_pos.is_empty()),
            eval_size - usize::from(!rest_neg.is_empty()),
        );
    }
    let eval_pos = eval_pos
        .min(rest_pos.len())
        .max(eval_size.saturating_sub(rest_neg.len()));
    let eval_neg = eval_size - eval_pos;

    let mut eval_rows: Vec<usize> = rest_pos[..eval_pos]
        .iter()
        .chain(&rest_neg[..eval_neg])
        .copied()
        .collect();
    eval_rows.sort_unstable();

    Ok(ShotSet {
        k,
        train_rows,
        eval_rows,
        seed,
    })
}

fn write_corpus(
    path: &Path,
    table: &Table,
    rows: &[usize],
    spec: &SerializerSpec,
    task: &TaskPrompt,
) -> Result<(), FewShotError> {
    let write_err = |source| FewShotError::Write {
        path: path.to_path_buf(),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(write_err)?);
    for &row in rows {
        let prompt = prompt_for_row(table, row, spec, task)
            .map_err(|source| FewShotError::Serialize { row, source })?;
        let record = CorpusRecord::new(&prompt, table.labels()[row]);
        let line = serde_json::to_string(&record).expect("corpus record serializes");
        writeln!(out, "{line}").map_err(write_err)?;
    }
    out.flush().map_err(write_err)
}

/// Writes `train.jsonl` and `eval.jsonl` under `out_dir`, one record per row
/// in shot-set order.
pub fn emit_jsonl(
    table: &Table,
    shots: &ShotSet,
    spec: &SerializerSpec,
    task: &TaskPrompt,
    out_dir: &Path,
) -> Result<(PathBuf, PathBuf), FewShotError> {
    fs::create_dir_all(out_dir).map_err(|source| FewShotError::Write {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let train = out_dir.join(TRAIN_FILE);
    let eval = out_dir.join(EVAL_FILE);
    write_corpus(&train, table, &shots.train_rows, spec, task)?;
    write_corpus(&eval, table, &shots.eval_rows, spec, task)?;
    Ok((train, eval))
}
