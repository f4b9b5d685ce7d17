//! Experiment configuration: one JSON document describing the dataset,
//! serializer families, shot grid and predictor. Validated as a whole before
//! any cell runs.

use std::collections::HashSet;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{infer_schema, load_table, DatasetError, Schema, Table};
use crate::importance::{drop_least_important, rank_features, ImportanceError, ImportanceReport};
use crate::predict::{PredictError, PredictorConfig};
use crate::serialize::{Family, Group, SerializeError, SerializerSpec, TaskPrompt};
use crate::verbalize::{Verbalizer, VerbalizerError};

/// Shot counts used when a config does not list its own.
pub const DEFAULT_SHOTS: [usize; 9] = [0, 4, 8, 16, 32, 64, 128, 256, 512];
pub const DEFAULT_TOP_K: usize = 4;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {}: {source}", path.display())]
    Read {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("invalid config {}: {source}", path.display())]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{0}")]
    Invalid(String),
    #[error("dataset: {0}")]
    Dataset(#[from] DatasetError),
    #[error("family {family:?}: {source}")]
    Importance {
        family: String,
        #[source]
        source: ImportanceError,
    },
    #[error("family {family:?}: {source}")]
    Serializer {
        family: String,
        #[source]
        source: SerializeError,
    },
    #[error("prompt: {0}")]
    Task(#[source] SerializeError),
    #[error("predictor: {0}")]
    Predictor(#[from] PredictError),
    #[error("verbalizer: {0}")]
    Verbalizer(#[from] VerbalizerError),
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilyConfig {
    pub family: Family,
    /// Row label in the results table; defaults to the family's display name.
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub groups: Option<Vec<Group>>,
    /// Top-k size when the importance report is computed here.
    #[serde(default)]
    pub k: Option<usize>,
    /// Precomputed report, as written by `tabserial rank`.
    #[serde(default)]
    pub report: Option<PathBuf>,
    #[serde(default)]
    pub token_budget: Option<usize>,
    /// Keep only this many top-ranked features before serializing.
    #[serde(default)]
    pub keep_features: Option<usize>,
    #[serde(default = "yes")]
    pub latex_escape: bool,
}

impl FamilyConfig {
    pub fn new(family: Family) -> Self {
        Self {
            family,
            name: None,
            groups: None,
            k: None,
            report: None,
            token_budget: None,
            keep_features: None,
            latex_escape: true,
        }
    }

    pub fn display_name(&self) -> String {
        self.name
            .clone()
            .unwrap_or_else(|| self.family.display_name().to_string())
    }
}

fn default_shots() -> Vec<usize> {
    DEFAULT_SHOTS.to_vec()
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}
fn default_eval_size() -> usize {
    100
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}
fn default_question() -> String {
    TaskPrompt::default().question
}
fn default_choices() -> [String; 2] {
    TaskPrompt::default().choices
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: PathBuf,
    /// Inline schema. When absent it is inferred using `label_column` and `positive_label`.
    #[serde(default)]
    pub schema: Option<Schema>,
    #[serde(default)]
    pub label_column: Option<String>,
    #[serde(default)]
    pub positive_label: Option<String>,
    pub families: Vec<FamilyConfig>,
    #[serde(default = "default_shots")]
    pub shots: Vec<usize>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_eval_size")]
    pub eval_size: usize,
    #[serde(default)]
    pub predictor: Option<PredictorConfig>,
    #[serde(default)]
    pub verbalizer: Verbalizer,
    #[serde(default = "default_question")]
    pub question: String,
    /// (negative, positive)
    #[serde(default = "default_choices")]
    pub choices: [String; 2],
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl ExperimentConfig {
    /// Parses a config file. Relative paths inside it are taken relative to the file.
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let mut config: Self =
            serde_json::from_str(&text).map_err(|source| ConfigError::Parse {
                path: path.to_path_buf(),
                source,
            })?;
        let base = path.parent().unwrap_or(Path::new("."));
        resolve(base, &mut config.dataset);
        resolve(base, &mut config.output_dir);
        for f in &mut config.families {
            if let Some(r) = &mut f.report {
                resolve(base, r);
            }
        }
        Ok(config)
    }

    pub fn task(&self) -> TaskPrompt {
        TaskPrompt {
            question: self.question.clone(),
            choices: self.choices.clone(),
        }
    }

    /// Schema from the inline declaration or inferred from the dataset.
    pub fn resolve_schema(&self) -> Result<Schema, ConfigError> {
        if let Some(s) = &self.schema {
            return Ok(s.clone());
        }
        match (&self.label_column, &self.positive_label) {
            (Some(label), Some(positive)) => Ok(infer_schema(&self.dataset, label, positive)?),
            _ => Err(ConfigError::Invalid(
                "either schema or both label_column and positive_label are required".into(),
            )),
        }
    }

    pub fn load_table(&self) -> Result<Table, ConfigError> {
        let schema = self.resolve_schema()?;
        Ok(load_table(&self.dataset, &schema)?)
    }

    /// Checks every field and cross-reference, loading the dataset once.
    pub fn validate(&self) -> Result<Experiment, ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if self.families.is_empty() {
            return invalid("families must not be empty".into());
        }
        if self.shots.is_empty() || self.seeds.is_empty() {
            return invalid("shots and seeds must not be empty".into());
        }
        if self.shots.iter().collect::<HashSet<_>>().len() != self.shots.len() {
            return invalid("shots contains duplicates".into());
        }
        if self.seeds.iter().collect::<HashSet<_>>().len() != self.seeds.len() {
            return invalid("seeds contains duplicates".into());
        }
        if self.eval_size == 0 {
            return invalid("eval_size must be positive".into());
        }
        let task = self.task();
        task.validate().map_err(ConfigError::Task)?;
        self.verbalizer.validate()?;
        let Some(predictor) = self.predictor.clone() else {
            return invalid("predictor is required".into());
        };
        predictor.validate()?;

        let table = self.load_table()?;
        let mut names = HashSet::new();
        let mut families = Vec::with_capacity(self.families.len());
        for fc in &self.families {
            let name = fc.display_name();
            if !names.insert(name.clone()) {
                return invalid(format!("duplicate family name {name:?}"));
            }
            let (table, spec) = family_plan(&table, fc)?;
            families.push(FamilyPlan { name, table, spec });
        }

        Ok(Experiment {
            table,
            families,
            shots: self.shots.clone(),
            seeds: self.seeds.clone(),
            eval_size: self.eval_size,
            task,
            verbalizer: self.verbalizer.clone(),
            predictor,
            output_dir: self.output_dir.clone(),
        })
    }
}

/// Applies column dropping and builds the validated serializer spec for one family.
pub fn family_plan(
    table: &Table,
    fc: &FamilyConfig,
) -> Result<(Table, SerializerSpec), ConfigError> {
    let name = fc.display_name();
    let imp_err = |source| ConfigError::Importance {
        family: name.clone(),
        source,
    };
    let table = match fc.keep_features {
        Some(keep) => {
            let ranking = rank_features(table, keep.max(1)).map_err(imp_err)?;
            drop_least_important(table, &ranking, keep).map_err(imp_err)?
        }
        None => table.clone(),
    };

    let report = match (&fc.report, fc.family.needs_report()) {
        (Some(path), _) => Some(ImportanceReport::from_json_file(path).map_err(imp_err)?),
        (None, true) => {
            Some(rank_features(&table, fc.k.unwrap_or(DEFAULT_TOP_K)).map_err(imp_err)?)
        }
        (None, false) => None,
    };

    let spec = SerializerSpec {
        family: fc.family,
        groups: fc.groups.clone(),
        report,
        token_budget: fc.token_budget,
        latex_escape: fc.latex_escape,
    };
    spec.validate(table.schema())
        .map_err(|source| ConfigError::Serializer {
            family: name.clone(),
            source,
        })?;
    Ok((table, spec))
}

/// A serializer family ready to run: its (possibly column-reduced) table and spec.
#[derive(Debug, Clone)]
pub struct FamilyPlan {
    pub name: String,
    pub table: Table,
    pub spec: SerializerSpec,
}

/// A validated experiment.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub table: Table,
    pub families: Vec<FamilyPlan>,
    pub shots: Vec<usize>,
    pub seeds: Vec<u64>,
    pub eval_size: usize,
    pub task: TaskPrompt,
    pub verbalizer: Verbalizer,
    pub predictor: PredictorConfig,
    pub output_dir: PathBuf,
}
