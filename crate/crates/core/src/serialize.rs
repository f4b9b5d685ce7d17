//! Row serializers and prompt assembly.
//!
//! Every family first renders a row into pieces tied to the features they
//! express. Pieces are what the token-budget trimmer drops, so the final text
//! is always produced from the surviving pieces by the family's layout.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Cell, Schema, Table};
use crate::importance::ImportanceReport;

pub const DEFAULT_QUESTION: &str = "Is this vehicle claim anomalous? Yes or no?";
pub const DEFAULT_CHOICES: [&str; 2] = ["No", "Yes"];

#[derive(Debug, Error, PartialEq)]
pub enum SerializeError {
    #[error("family {0} requires an importance report")]
    MissingReport(Family),
    #[error("family feature_combination requires a groups list")]
    MissingGroups,
    #[error("importance report has an empty top_k")]
    EmptyTopK,
    #[error("importance report is stale: none of its top features {0:?} are in the schema")]
    StaleReport(Vec<String>),
    #[error("group feature {0:?} is not a feature column")]
    UnknownGroupFeature(String),
    #[error("feature {0:?} appears in more than one group")]
    FeatureInTwoGroups(String),
    #[error("template {template:?} references {placeholder:?}, which is outside its group")]
    PlaceholderOutsideGroup {
        template: String,
        placeholder: String,
    },
    #[error("template {template:?} never uses group member {feature:?}")]
    UnusedGroupMember { template: String, feature: String },
    #[error("template {0:?} has an unbalanced brace")]
    UnbalancedBrace(String),
    #[error("group has no features")]
    EmptyGroup,
    #[error("token budget {budget} is unreachable: a single piece still needs {needed} tokens")]
    BudgetUnreachable { budget: usize, needed: usize },
    #[error("token budget must be positive")]
    ZeroBudget,
    #[error("serialized row is empty")]
    EmptyRow,
    #[error("answer choices must be distinct, got {0:?} twice")]
    SameChoices(String),
    #[error("unknown serialization family {0:?}")]
    UnknownFamily(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    TextTemplate,
    FeatureCombination,
    ImportancePrefix,
    ImportanceSuffix,
    Latex,
}

impl Family {
    pub const ALL: [Family; 5] = [
        Family::TextTemplate,
        Family::FeatureCombination,
        Family::ImportancePrefix,
        Family::ImportanceSuffix,
        Family::Latex,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Family::TextTemplate => "text_template",
            Family::FeatureCombination => "feature_combination",
            Family::ImportancePrefix => "importance_prefix",
            Family::ImportanceSuffix => "importance_suffix",
            Family::Latex => "latex",
        }
    }

    /// Row label used in results tables.
    pub fn display_name(self) -> &'static str {
        match self {
            Family::TextTemplate => "Text Template",
            Family::FeatureCombination => "Feature Combination",
            Family::ImportancePrefix => "Feature Importance (prefix)",
            Family::ImportanceSuffix => "Feature Importance (suffix)",
            Family::Latex => "LaTeX",
        }
    }

    pub fn needs_report(self) -> bool {
        matches!(self, Family::ImportancePrefix | Family::ImportanceSuffix)
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = SerializeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Family::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| SerializeError::UnknownFamily(s.to_string()))
    }
}

/// One sentence template and the features it renders, e.g.
/// `"The {color} {Make} has a {body_type} body."`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Group {
    pub template: String,
    pub features: Vec<String>,
}

enum Part<'a> {
    Literal(&'a str),
    Placeholder(&'a str),
}

fn parse_template(template: &str) -> Result<Vec<Part<'_>>, SerializeError> {
    let unbalanced = || SerializeError::UnbalancedBrace(template.to_string());
    let mut parts = Vec::new();
    let mut rest = template;
    while let Some(open) = rest.find(['{', '}']) {
        if rest.as_bytes()[open] == b'}' {
            return Err(unbalanced());
        }
        let close = rest[open + 1..].find(['{', '}']).ok_or_else(unbalanced)? + open + 1;
        if rest.as_bytes()[close] == b'{' {
            return Err(unbalanced());
        }
        if open > 0 {
            parts.push(Part::Literal(&rest[..open]));
        }
        parts.push(Part::Placeholder(&rest[open + 1..close]));
        rest = &rest[close + 1..];
    }
    if !rest.is_empty() {
        parts.push(Part::Literal(rest));
    }
    Ok(parts)
}

impl Group {
    fn validate(&self, schema: &Schema) -> Result<(), SerializeError> {
        if self.features.is_empty() {
            return Err(SerializeError::EmptyGroup);
        }
        if let Some(f) = self.features.iter().find(|f| !schema.is_feature(f)) {
            return Err(SerializeError::UnknownGroupFeature(f.clone()));
        }
        let parts = parse_template(&self.template)?;
        let mut used = HashSet::new();
        for part in &parts {
            if let Part::Placeholder(name) = part {
                if !self.features.iter().any(|f| f == name) {
                    return Err(SerializeError::PlaceholderOutsideGroup {
                        template: self.template.clone(),
                        placeholder: name.to_string(),
                    });
                }
                used.insert(*name);
            }
        }
        if let Some(f) = self.features.iter().find(|f| !used.contains(f.as_str())) {
            return Err(SerializeError::UnusedGroupMember {
                template: self.template.clone(),
                feature: f.clone(),
            });
        }
        Ok(())
    }

    fn render(&self, row: &[Cell], schema: &Schema) -> Result<String, SerializeError> {
        let mut out = String::new();
        for part in parse_template(&self.template)? {
            match part {
                Part::Literal(s) => out.push_str(s),
                Part::Placeholder(name) => {
                    let idx = schema
                        .index_of(name)
                        .ok_or_else(|| SerializeError::UnknownGroupFeature(name.to_string()))?;
                    out.push_str(&row[idx].render());
                }
            }
        }
        Ok(out)
    }
}

fn validate_groups(groups: &[Group], schema: &Schema) -> Result<(), SerializeError> {
    let mut seen = HashSet::new();
    for g in groups {
        g.validate(schema)?;
        for f in &g.features {
            if !seen.insert(f.as_str()) {
                return Err(SerializeError::FeatureInTwoGroups(f.clone()));
            }
        }
    }
    Ok(())
}

fn validate_report(report: &ImportanceReport, schema: &Schema) -> Result<(), SerializeError> {
    if report.top_k.is_empty() {
        return Err(SerializeError::EmptyTopK);
    }
    if !report.top_k.iter().any(|f| schema.is_feature(f)) {
        return Err(SerializeError::StaleReport(report.top_k.clone()));
    }
    Ok(())
}

/// Which family to render with, plus its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SerializerSpec {
    pub family: Family,
    pub groups: Option<Vec<Group>>,
    pub report: Option<ImportanceReport>,
    pub token_budget: Option<usize>,
    /// Escape LaTeX special characters in cell values (on by default).
    pub latex_escape: bool,
}

impl SerializerSpec {
    pub fn new(family: Family) -> Self {
        Self {
            family,
            groups: None,
            report: None,
            token_budget: None,
            latex_escape: true,
        }
    }

    pub fn with_groups(mut self, groups: Vec<Group>) -> Self {
        self.groups = Some(groups);
        self
    }

    pub fn with_report(mut self, report: ImportanceReport) -> Self {
        self.report = Some(report);
        self
    }

    pub fn with_token_budget(mut self, budget: usize) -> Self {
        self.token_budget = Some(budget);
        self
    }

    pub fn validate(&self, schema: &Schema) -> Result<(), SerializeError> {
        if self.token_budget == Some(0) {
            return Err(SerializeError::ZeroBudget);
        }
        match self.family {
            Family::FeatureCombination => validate_groups(
                self.groups
                    .as_deref()
                    .ok_or(SerializeError::MissingGroups)?,
                schema,
            ),
            Family::ImportancePrefix | Family::ImportanceSuffix => validate_report(
                self.report
                    .as_ref()
                    .ok_or(SerializeError::MissingReport(self.family))?,
                schema,
            ),
            Family::TextTemplate | Family::Latex => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PieceKind {
    Sentence,
    Fragment,
    Cell,
}

#[derive(Debug, Clone, PartialEq)]
struct Piece {
    kind: PieceKind,
    features: Vec<String>,
    text: String,
}

/// A serialized row that still knows which features each part expresses.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedRow {
    pieces: Vec<Piece>,
    suffix: Option<String>,
}

impl RenderedRow {
    pub fn text(&self) -> String {
        let cells: Vec<&str> = self.texts(PieceKind::Cell);
        if !cells.is_empty() {
            return format!("\\hline {} \\\\", cells.join(" & "));
        }
        let mut parts: Vec<String> = self
            .texts(PieceKind::Sentence)
            .into_iter()
            .map(String::from)
            .collect();
        let fragments = self.texts(PieceKind::Fragment);
        if !fragments.is_empty() {
            parts.push(format!("{}.", fragments.join(", ")));
        }
        if let Some(s) = &self.suffix {
            parts.push(s.clone());
        }
        parts.join(" ")
    }

    pub fn piece_count(&self) -> usize {
        self.pieces.len()
    }

    /// Features still expressed by the rendering.
    pub fn features(&self) -> impl Iterator<Item = &str> {
        self.pieces
            .iter()
            .flat_map(|p| p.features.iter().map(String::as_str))
    }

    fn texts(&self, kind: PieceKind) -> Vec<&str> {
        self.pieces
            .iter()
            .filter(|p| p.kind == kind)
            .map(|p| p.text.as_str())
            .collect()
    }

    /// Index of the piece to drop next under a token budget.
    fn trim_candidate(&self, report: Option<&ImportanceReport>) -> usize {
        let last = self.pieces.len() - 1;
        let Some(report) = report else {
            return last;
        };
        let weight = |p: &Piece| {
            p.features
                .iter()
                .map(|f| report.score(f).map_or(-1.0, f64::abs))
                .fold(f64::NEG_INFINITY, f64::max)
        };
        // later pieces lose ties
        (0..=last)
            .rev()
            .min_by(|&a, &b| weight(&self.pieces[a]).total_cmp(&weight(&self.pieces[b])))
            .unwrap_or(last)
    }
}

fn fragment(name: &str, cell: &Cell) -> String {
    format!("{name} is {}", cell.render())
}

fn text_template_pieces(row: &[Cell], schema: &Schema, critical: &[String]) -> Vec<Piece> {
    schema
        .features()
        .map(|(i, col)| {
            let base = fragment(&col.name, &row[i]);
            let text = if critical.contains(&col.name) {
                format!("Critically, {base}")
            } else {
                base
            };
            Piece {
                kind: PieceKind::Fragment,
                features: vec![col.name.clone()],
                text,
            }
        })
        .collect()
}

/// `"<col> is <val>"` for every feature, joined by ", " and closed with a period.
pub fn serialize_text_template(row: &[Cell], schema: &Schema) -> String {
    RenderedRow {
        pieces: text_template_pieces(row, schema, &[]),
        suffix: None,
    }
    .text()
}

fn combination_pieces(
    row: &[Cell],
    schema: &Schema,
    groups: &[Group],
) -> Result<Vec<Piece>, SerializeError> {
    validate_groups(groups, schema)?;
    let mut ordered: Vec<(usize, &Group)> = groups
        .iter()
        .map(|g| {
            let first = g
                .features
                .iter()
                .filter_map(|f| schema.index_of(f))
                .min()
                .unwrap_or(usize::MAX);
            (first, g)
        })
        .collect();
    ordered.sort_by_key(|(first, _)| *first);

    let mut pieces = Vec::new();
    for (_, g) in ordered {
        pieces.push(Piece {
            kind: PieceKind::Sentence,
            features: g.features.clone(),
            text: g.render(row, schema)?,
        });
    }
    let grouped: HashSet<&str> = groups
        .iter()
        .flat_map(|g| g.features.iter().map(String::as_str))
        .collect();
    pieces.extend(
        text_template_pieces(row, schema, &[])
            .into_iter()
            .filter(|p| !grouped.contains(p.features[0].as_str())),
    );
    Ok(pieces)
}

/// Group sentences in column order of their first member, then the
/// ungrouped features as one text-template sentence.
pub fn serialize_feature_combination(
    row: &[Cell],
    schema: &Schema,
    groups: &[Group],
) -> Result<String, SerializeError> {
    Ok(RenderedRow {
        pieces: combination_pieces(row, schema, groups)?,
        suffix: None,
    }
    .text())
}

/// Text template where every top-k fragment reads `"Critically, <col> is <val>"`.
pub fn serialize_importance_prefix(
    row: &[Cell],
    schema: &Schema,
    report: &ImportanceReport,
) -> Result<String, SerializeError> {
    validate_report(report, schema)?;
    Ok(RenderedRow {
        pieces: text_template_pieces(row, schema, &report.top_k),
        suffix: None,
    }
    .text())
}

fn importance_sentence(report: &ImportanceReport) -> String {
    format!(
        "The {} most important features for the inference are: {}.",
        report.top_k.len(),
        report.top_k.join(", ")
    )
}

/// Text template followed by a sentence naming the top-k features.
pub fn serialize_importance_suffix(
    row: &[Cell],
    schema: &Schema,
    report: &ImportanceReport,
) -> Result<String, SerializeError> {
    validate_report(report, schema)?;
    Ok(RenderedRow {
        pieces: text_template_pieces(row, schema, &[]),
        suffix: Some(importance_sentence(report)),
    }
    .text())
}

pub fn escape_latex(value: &str) -> String {
    let mut out = String::with_capacity(value.len());
    for c in value.chars() {
        match c {
            '&' | '%' | '$' | '#' | '_' | '{' | '}' => {
                out.push('\\');
                out.push(c);
            }
            '\\' => out.push_str("\\textbackslash "),
            '~' => out.push_str("\\textasciitilde "),
            '^' => out.push_str("\\textasciicircum "),
            _ => out.push(c),
        }
    }
    out
}

fn latex_pieces(row: &[Cell], schema: &Schema, escape: bool) -> Vec<Piece> {
    schema
        .features()
        .map(|(i, col)| {
            let raw = row[i].render();
            Piece {
                kind: PieceKind::Cell,
                features: vec![col.name.clone()],
                text: if escape { escape_latex(&raw) } else { raw },
            }
        })
        .collect()
}

/// A headerless table row: `\hline a & b & c \\`.
pub fn serialize_latex(row: &[Cell], schema: &Schema) -> String {
    RenderedRow {
        pieces: latex_pieces(row, schema, true),
        suffix: None,
    }
    .text()
}

/// Renders `row` with the family chosen in `spec`, keeping piece structure for trimming.
pub fn render_row(
    row: &[Cell],
    schema: &Schema,
    spec: &SerializerSpec,
) -> Result<RenderedRow, SerializeError> {
    spec.validate(schema)?;
    let (pieces, suffix) = match spec.family {
        Family::TextTemplate => (text_template_pieces(row, schema, &[]), None),
        Family::FeatureCombination => (
            combination_pieces(row, schema, spec.groups.as_deref().unwrap_or_default())?,
            None,
        ),
        Family::ImportancePrefix => {
            let report = spec.report.as_ref().expect("validated");
            (text_template_pieces(row, schema, &report.top_k), None)
        }
        Family::ImportanceSuffix => {
            let report = spec.report.as_ref().expect("validated");
            (
                text_template_pieces(row, schema, &[]),
                Some(importance_sentence(report)),
            )
        }
        Family::Latex => (latex_pieces(row, schema, spec.latex_escape), None),
    };
    Ok(RenderedRow { pieces, suffix })
}

/// Rough token count: a quarter of the UTF-8 byte length, rounded up.
pub fn estimate_tokens(s: &str) -> usize {
    s.len().div_ceil(4)
}

/// Question and answer choices appended to every serialized row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskPrompt {
    pub question: String,
    /// (negative, positive)
    pub choices: [String; 2],
}

impl Default for TaskPrompt {
    fn default() -> Self {
        Self {
            question: DEFAULT_QUESTION.to_string(),
            choices: DEFAULT_CHOICES.map(String::from),
        }
    }
}

impl TaskPrompt {
    pub fn validate(&self) -> Result<(), SerializeError> {
        if self.choices[0] == self.choices[1] {
            return Err(SerializeError::SameChoices(self.choices[0].clone()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prompt {
    serialized_row: String,
    question: String,
    answer_choices: [String; 2],
}

impl Prompt {
    pub fn new(
        serialized_row: String,
        question: String,
        answer_choices: [String; 2],
    ) -> Result<Self, SerializeError> {
        if serialized_row.is_empty() {
            return Err(SerializeError::EmptyRow);
        }
        if answer_choices[0] == answer_choices[1] {
            return Err(SerializeError::SameChoices(answer_choices[0].clone()));
        }
        Ok(Self {
            serialized_row,
            question,
            answer_choices,
        })
    }

    pub fn serialized_row(&self) -> &str {
        &self.serialized_row
    }

    pub fn question(&self) -> &str {
        &self.question
    }

    /// (negative, positive)
    pub fn answer_choices(&self) -> &[String; 2] {
        &self.answer_choices
    }

    /// Full model input: the serialized row, then the question on its own line.
    pub fn input_text(&self) -> String {
        input_text(&self.serialized_row, &self.question)
    }
}

fn input_text(row: &str, question: &str) -> String {
    if question.is_empty() {
        row.to_string()
    } else {
        format!("{row}\n{question}")
    }
}

/// Assembles a prompt, dropping pieces until the full input fits the spec's
/// token budget. With a report the lowest-|score| piece goes first,
/// otherwise the last one.
pub fn build_prompt(
    rendered: &RenderedRow,
    spec: &SerializerSpec,
    task: &TaskPrompt,
) -> Result<Prompt, SerializeError> {
    let mut rendered = rendered.clone();
    if let Some(budget) = spec.token_budget {
        loop {
            let needed = estimate_tokens(&input_text(&rendered.text(), &task.question));
            if needed <= budget {
                break;
            }
            if rendered.pieces.len() <= 1 {
                return Err(SerializeError::BudgetUnreachable { budget, needed });
            }
            let victim = rendered.trim_candidate(spec.report.as_ref());
            rendered.pieces.remove(victim);
        }
    }
    Prompt::new(rendered.text(), task.question.clone(), task.choices.clone())
}

/// Renders and assembles the prompt for row `index` of `table`.
pub fn prompt_for_row(
    table: &Table,
    index: usize,
    spec: &SerializerSpec,
    task: &TaskPrompt,
) -> Result<Prompt, SerializeError> {
    let rendered = render_row(table.row(index), table.schema(), spec)?;
    build_prompt(&rendered, spec, task)
}

/// One line of a JSONL corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub input: String,
    pub choices: [String; 2],
    pub label: u8,
}

impl CorpusRecord {
    pub fn new(prompt: &Prompt, positive: bool) -> Self {
        Self {
            input: prompt.input_text(),
            choices: prompt.answer_choices().clone(),
            label: u8::from(positive),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Column, ColumnKind};
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    fn schema(cols: &[(&str, ColumnKind)]) -> Schema {
        let mut columns: Vec<Column> = cols.iter().map(|(n, k)| Column::new(*n, *k)).collect();
        columns.push(Column::new("Label", ColumnKind::Categorical));
        Schema::new(columns, "Label", "Yes").unwrap()
    }

    fn text(s: &str) -> Cell {
        Cell::Text(s.to_string())
    }

    fn report(ranking: &[(&str, f64)], k: usize) -> ImportanceReport {
        ImportanceReport {
            scores: ranking
                .iter()
                .map(|(n, s)| (n.to_string(), *s))
                .collect::<BTreeMap<_, _>>(),
            ranking: ranking.iter().map(|(n, _)| n.to_string()).collect(),
            top_k: ranking.iter().take(k).map(|(n, _)| n.to_string()).collect(),
            k,
        }
    }

    use ColumnKind::{Categorical as Cat, Numeric as Num};

    #[test]
    fn text_template_examples() {
        let s = schema(&[("Age", Num), ("sex", Cat)]);
        let row = vec![Cell::Number(35.0), text("female"), text("No")];
        assert_eq!(
            serialize_text_template(&row, &s),
            "Age is 35, sex is female."
        );

        let s = schema(&[("Make", Cat)]);
        assert_eq!(
            serialize_text_template(&[text("Ford"), text("No")], &s),
            "Make is Ford."
        );

        let s = schema(&[("Make", Cat), ("price", Num)]);
        let row = vec![Cell::Missing, Cell::Number(5000.0), text("Yes")];
        assert_eq!(
            serialize_text_template(&row, &s),
            "Make is unknown, price is 5000."
        );
    }

    #[test]
    fn label_column_in_the_middle_is_skipped() {
        let s = Schema::new(
            vec![
                Column::new("a", Cat),
                Column::new("Label", Cat),
                Column::new("b", Cat),
            ],
            "Label",
            "Yes",
        )
        .unwrap();
        let row = vec![text("x"), text("Yes"), text("y")];
        assert_eq!(serialize_text_template(&row, &s), "a is x, b is y.");
        assert_eq!(serialize_latex(&row, &s), "\\hline x & y \\\\");
    }

    fn vehicle() -> (Schema, Vec<Cell>) {
        let s = schema(&[
            ("Make", Cat),
            ("color", Cat),
            ("body_type", Cat),
            ("price", Num),
        ]);
        let row = vec![
            text("Ford"),
            text("red"),
            text("sedan"),
            Cell::Number(5000.0),
            text("No"),
        ];
        (s, row)
    }

    fn body_group() -> Group {
        Group {
            template: "The {color} {Make} has a {body_type} body.".into(),
            features: vec!["Make".into(), "color".into(), "body_type".into()],
        }
    }

    #[test]
    fn feature_combination_examples() {
        let (s, row) = vehicle();
        assert_eq!(
            serialize_feature_combination(&row, &s, &[body_group()]).unwrap(),
            "The red Ford has a sedan body. price is 5000."
        );
        assert_eq!(
            serialize_feature_combination(&row, &s, &[]).unwrap(),
            serialize_text_template(&row, &s)
        );
    }

    #[test]
    fn groups_follow_column_order_of_first_member() {
        let (s, row) = vehicle();
        let groups = vec![
            Group {
                template: "It costs {price}.".into(),
                features: vec!["price".into()],
            },
            Group {
                template: "A {color} {Make}.".into(),
                features: vec!["color".into(), "Make".into()],
            },
        ];
        assert_eq!(
            serialize_feature_combination(&row, &s, &groups).unwrap(),
            "A red Ford. It costs 5000. body_type is sedan."
        );
    }

    #[test]
    fn group_validation_errors() {
        let (s, row) = vehicle();
        let outside = Group {
            template: "The {color} {Make}.".into(),
            features: vec!["color".into()],
        };
        assert!(matches!(
            serialize_feature_combination(&row, &s, &[outside]),
            Err(SerializeError::PlaceholderOutsideGroup { .. })
        ));
        let label = Group {
            template: "{Label}".into(),
            features: vec!["Label".into()],
        };
        assert!(matches!(
            serialize_feature_combination(&row, &s, &[label]),
            Err(SerializeError::UnknownGroupFeature(_))
        ));
        let twice = vec![
            body_group(),
            Group {
                template: "{Make}".into(),
                features: vec!["Make".into()],
            },
        ];
        assert!(matches!(
            serialize_feature_combination(&row, &s, &twice),
            Err(SerializeError::FeatureInTwoGroups(_))
        ));
        let unbalanced = Group {
            template: "The {color".into(),
            features: vec!["color".into()],
        };
        assert!(matches!(
            serialize_feature_combination(&row, &s, &[unbalanced]),
            Err(SerializeError::UnbalancedBrace(_))
        ));
        let unused = Group {
            template: "The {color} car.".into(),
            features: vec!["color".into(), "Make".into()],
        };
        assert!(matches!(
            serialize_feature_combination(&row, &s, &[unused]),
            Err(SerializeError::UnusedGroupMember { .. })
        ));
        assert!(matches!(
            SerializerSpec::new(Family::FeatureCombination).validate(&s),
            Err(SerializeError::MissingGroups)
        ));
    }

    #[test]
    fn importance_prefix_examples() {
        let s = schema(&[("Make", Cat), ("price", Num)]);
        let row = vec![text("Ford"), Cell::Number(5000.0), text("No")];
        let r = report(&[("Make", 0.3), ("price", 0.1)], 1);
        assert_eq!(
            serialize_importance_prefix(&row, &s, &r).unwrap(),
            "Critically, Make is Ford, price is 5000."
        );
        let all = report(&[("Make", 0.3), ("price", 0.1)], 2);
        assert_eq!(
            serialize_importance_prefix(&row, &s, &all).unwrap(),
            "Critically, Make is Ford, Critically, price is 5000."
        );
        let stale = report(&[("Model", 0.3)], 1);
        assert!(matches!(
            serialize_importance_prefix(&row, &s, &stale),
            Err(SerializeError::StaleReport(_))
        ));
        let empty = report(&[("Make", 0.3)], 0);
        assert_eq!(
            serialize_importance_prefix(&row, &s, &empty),
            Err(SerializeError::EmptyTopK)
        );
    }

    #[test]
    fn importance_suffix_examples() {
        let s = schema(&[
            ("Make", Cat),
            ("color", Cat),
            ("price", Num),
            ("issue", Cat),
        ]);
        let row = vec![
            text("Ford"),
            text("red"),
            Cell::Number(5000.0),
            text("rust"),
            text("No"),
        ];
        let r = report(
            &[
                ("Make", 0.4),
                ("color", 0.3),
                ("price", 0.2),
                ("issue", 0.1),
            ],
            4,
        );
        let out = serialize_importance_suffix(&row, &s, &r).unwrap();
        let base = serialize_text_template(&row, &s);
        assert_eq!(
            out,
            format!("{base} The 4 most important features for the inference are: Make, color, price, issue.")
        );
        let one = report(&[("Make", 0.4)], 1);
        assert!(serialize_importance_suffix(&row, &s, &one)
            .unwrap()
            .ends_with(" The 1 most important features for the inference are: Make."));
        assert_eq!(
            SerializerSpec::new(Family::ImportanceSuffix).validate(&s),
            Err(SerializeError::MissingReport(Family::ImportanceSuffix))
        );
    }

    #[test]
    fn latex_escaping() {
        assert_eq!(escape_latex("R&D"), "R\\&D");
        assert_eq!(escape_latex("50%_off"), "50\\%\\_off");
        assert_eq!(escape_latex("plain"), "plain");
        assert_eq!(escape_latex("$#{}"), "\\$\\#\\{\\}");
        assert_eq!(
            escape_latex("a\\b~c^d"),
            "a\\textbackslash b\\textasciitilde c\\textasciicircum d"
        );
    }

    #[test]
    fn latex_rows() {
        let s = schema(&[("Make", Cat), ("price", Num)]);
        let row = vec![text("Ford"), Cell::Number(5000.0), text("No")];
        assert_eq!(serialize_latex(&row, &s), "\\hline Ford & 5000 \\\\");
        let row = vec![text("R&D special"), Cell::Number(5000.0), text("No")];
        assert_eq!(
            serialize_latex(&row, &s),
            "\\hline R\\&D special & 5000 \\\\"
        );
        let s1 = schema(&[("Make", Cat)]);
        assert_eq!(
            serialize_latex(&[text("Ford"), text("No")], &s1),
            "\\hline Ford \\\\"
        );
        let row = vec![Cell::Missing, Cell::Number(1.5), text("No")];
        assert_eq!(serialize_latex(&row, &s), "\\hline unknown & 1.5 \\\\");
    }

    #[test]
    fn latex_escape_can_be_disabled() {
        let s = schema(&[("Make", Cat)]);
        let mut spec = SerializerSpec::new(Family::Latex);
        spec.latex_escape = false;
        let r = render_row(&[text("R&D"), text("No")], &s, &spec).unwrap();
        assert_eq!(r.text(), "\\hline R&D \\\\");
    }

    #[test]
    fn token_estimate() {
        assert_eq!(estimate_tokens(""), 0);
        assert_eq!(estimate_tokens("12345678"), 2);
        assert_eq!(estimate_tokens("123456789"), 3);
        assert_eq!(estimate_tokens("é"), 1);
    }

    fn three_fragments() -> (Schema, Vec<Cell>) {
        let s = schema(&[("aa", Cat), ("bb", Cat), ("cc", Cat)]);
        (s, vec![text("xx"), text("yy"), text("zz"), text("No")])
    }

    #[test]
    fn no_budget_passes_through() {
        let (s, row) = three_fragments();
        let spec = SerializerSpec::new(Family::TextTemplate);
        let r = render_row(&row, &s, &spec).unwrap();
        let p = build_prompt(&r, &spec, &TaskPrompt::default()).unwrap();
        assert_eq!(p.serialized_row(), r.text());
        assert_eq!(
            p.input_text(),
            format!("{}\n{}", r.text(), DEFAULT_QUESTION)
        );
    }

    #[test]
    fn budget_drops_lowest_score_first() {
        let (s, row) = three_fragments();
        let task = TaskPrompt {
            question: String::new(),
            choices: DEFAULT_CHOICES.map(String::from),
        };
        // "aa is xx, bb is yy, cc is zz." is 29 bytes = 8 tokens;
        // without one fragment it is 19 bytes = 5 tokens.
        let r = report(&[("cc", 0.9), ("aa", 0.5), ("bb", -0.1)], 1);
        let spec = SerializerSpec::new(Family::TextTemplate)
            .with_report(r)
            .with_token_budget(5);
        let rendered = render_row(&row, &s, &spec).unwrap();
        let p = build_prompt(&rendered, &spec, &task).unwrap();
        assert_eq!(p.serialized_row(), "aa is xx, cc is zz.");

        let spec = SerializerSpec::new(Family::TextTemplate).with_token_budget(5);
        let p = build_prompt(&rendered, &spec, &task).unwrap();
        assert_eq!(p.serialized_row(), "aa is xx, bb is yy.");
    }

    #[test]
    fn unreachable_budget_errors() {
        let (s, row) = three_fragments();
        let spec = SerializerSpec::new(Family::Latex).with_token_budget(1);
        let rendered = render_row(&row, &s, &spec).unwrap();
        assert!(matches!(
            build_prompt(&rendered, &spec, &TaskPrompt::default()),
            Err(SerializeError::BudgetUnreachable { budget: 1, .. })
        ));
    }

    #[test]
    fn prompt_invariants() {
        assert_eq!(
            Prompt::new(String::new(), "q".into(), ["a".into(), "b".into()]),
            Err(SerializeError::EmptyRow)
        );
        assert!(matches!(
            Prompt::new("x".into(), "q".into(), ["a".into(), "a".into()]),
            Err(SerializeError::SameChoices(_))
        ));
    }

    #[test]
    fn family_names_parse() {
        for f in Family::ALL {
            assert_eq!(f.as_str().parse::<Family>().unwrap(), f);
        }
        assert!("xml".parse::<Family>().is_err());
    }

    fn arb_row() -> impl Strategy<Value = (Schema, Vec<Cell>)> {
        let cell = prop_oneof![
            "[a-z&%_ ]{1,8}".prop_map(Cell::Text),
            (-1000i32..1000).prop_map(|v| Cell::Number(v as f64)),
            Just(Cell::Missing),
        ];
        prop::collection::vec(cell, 1..8).prop_map(|cells| {
            let mut cols = Vec::new();
            let mut row = Vec::new();
            for (i, c) in cells.into_iter().enumerate() {
                let kind = if matches!(c, Cell::Number(_)) {
                    Num
                } else {
                    Cat
                };
                // keep kinds consistent with cells
                let c = if kind == Cat && matches!(c, Cell::Number(_)) {
                    Cell::Missing
                } else {
                    c
                };
                cols.push(Column::new(format!("f{i}"), kind));
                row.push(c);
            }
            cols.push(Column::new("Label", Cat));
            row.push(text("Yes"));
            (Schema::new(cols, "Label", "Yes").unwrap(), row)
        })
    }

    proptest! {
        #[test]
        fn text_template_has_one_fragment_per_feature((s, row) in arb_row()) {
            let out = serialize_text_template(&row, &s);
            prop_assert!(out.ends_with('.'));
            let n = s.feature_names().len();
            // values never contain ", " here
            prop_assert_eq!(out.split(", ").count(), n);
            prop_assert_eq!(serialize_text_template(&row, &s), out);
        }

        #[test]
        fn latex_shape((s, row) in arb_row()) {
            let out = serialize_latex(&row, &s);
            prop_assert!(out.starts_with("\\hline "));
            prop_assert!(out.ends_with(" \\\\"));
            prop_assert_eq!(out.matches(" & ").count(), s.feature_names().len() - 1);
        }

        #[test]
        fn token_estimate_subadditive(a in ".{0,40}", b in ".{0,40}") {
            let joined = format!("{a}{b}");
            prop_assert!(estimate_tokens(&joined) <= estimate_tokens(&a) + estimate_tokens(&b) + 1);
            prop_assert!(estimate_tokens(&joined) >= estimate_tokens(&a));
        }
    }
}
