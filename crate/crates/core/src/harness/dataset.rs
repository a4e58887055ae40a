//! JSONL datasets: one `{input, output, documents?, answers?}` object per line.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::packer::{Example, Metric, TaskTemplate};

/// A retrieved passage, as plain text or as a titled evidence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Document {
    Text(String),
    Titled { title: String, text: String },
}

impl Document {
    pub fn render(&self) -> String {
        match self {
            Self::Text(t) => t.clone(),
            Self::Titled { title, text } => format!("Title: {title}\nEvidence: {text}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub input: String,
    pub output: String,
    /// Retrieved documents, best ranked first.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub documents: Vec<Document>,
    /// Further accepted answers besides `output`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub answers: Vec<String>,
    /// Free-form question type (e.g. bridge/comparison), passed through.
    #[serde(default, rename = "type", skip_serializing_if = "Option::is_none")]
    pub kind: Option<String>,
}

impl Record {
    pub fn example(&self) -> Example {
        Example::new(self.input.clone(), self.output.clone())
    }

    /// `output` followed by any extra answers.
    pub fn golds(&self) -> Vec<String> {
        std::iter::once(self.output.clone())
            .chain(self.answers.iter().cloned())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub records: Vec<Record>,
    /// Closed label set for classification tasks.
    pub label_set: Option<Vec<String>>,
}

impl Dataset {
    /// Validates records against the template. The label set is the
    /// template's `label_names` when given, otherwise (for accuracy-scored
    /// tasks) the distinct outputs in sorted order.
    pub fn new(name: impl Into<String>, records: Vec<Record>, template: &TaskTemplate) -> Result<Self> {
        let name = name.into();
        if records.is_empty() {
            return Err(Error::Dataset {
                path: name,
                line: 0,
                reason: "dataset is empty".into(),
            });
        }
        let label_set = match (&template.label_names, template.metric) {
            (Some(names), _) => {
                for (i, r) in records.iter().enumerate() {
                    if !names.contains(&r.output) {
                        return Err(Error::Dataset {
                            path: name,
                            line: i + 1,
                            reason: format!("output `{}` is not one of the declared labels {names:?}", r.output),
                        });
                    }
                }
                Some(names.clone())
            }
            (None, Metric::Accuracy) => {
                let distinct: BTreeSet<&str> = records.iter().map(|r| r.output.as_str()).collect();
                Some(distinct.into_iter().map(str::to_string).collect())
            }
            (None, _) => None,
        };
        Ok(Self {
            name,
            records,
            label_set,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn examples(&self) -> Vec<Example> {
        self.records.iter().map(Record::example).collect()
    }

    /// Subset by index, keeping name and label set.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            name: self.name.clone(),
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
            label_set: self.label_set.clone(),
        }
    }
}

/// Parses JSONL text; `source` names the origin in errors. Blank lines are
/// skipped but still counted.
pub fn parse_dataset(text: &str, source: &str, template: &TaskTemplate) -> Result<Dataset> {
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: Record = serde_json::from_str(line).map_err(|e| Error::Dataset {
            path: source.to_string(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        records.push(r);
    }
    let name = Path::new(source)
        .file_stem()
        .map_or_else(|| source.to_string(), |s| s.to_string_lossy().into_owned());
    let ds = Dataset::new(name, records, template).map_err(|e| match e {
        Error::Dataset { line, reason, .. } => Error::Dataset {
            path: source.to_string(),
            line: data_line(text, line),
            reason,
        },
        other => other,
    })?;
    Ok(ds)
}

/// File line of the `n`-th (1-based) non-blank line.
fn data_line(text: &str, n: usize) -> usize {
    if n == 0 {
        return 0;
    }
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .nth(n - 1)
        .map_or(n, |(i, _)| i + 1)
}

pub fn load_dataset(path: impl AsRef<Path>, template: &TaskTemplate) -> Result<Dataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text, &path.to_string_lossy(), template)
}
