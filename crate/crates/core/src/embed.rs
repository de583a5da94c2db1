//! Trigger-token embedding initialization and a portable table format.
//!
//! Each new delimiter vector is half the mean of the subword vectors that
//! spell its meaning and half an existing delimiter ("anchor") vector. The
//! table file is a `dim N` header followed by `name<TAB>v1 v2 ...` lines.

use std::fmt::Write as _;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EmbedError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("source token {0:?} is missing from the table")]
    MissingSourceToken(String),
    #[error("token {token:?} has dimension {found}, expected {expected}")]
    DimensionMismatch { token: String, expected: usize, found: usize },
    #[error("token {0:?} already exists in the table")]
    TokenExists(String),
    #[error("at least one subword is required")]
    NoSubwords,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EmbeddingTable {
    pub dim: usize,
    /// Entries in file order.
    pub entries: IndexMap<String, Vec<f64>>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        Self { dim, entries: IndexMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, vector: Vec<f64>) {
        self.entries.insert(name.into(), vector);
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.entries.get(name).map(Vec::as_slice)
    }

    /// Parses the text format. Vector lengths are not checked here so that
    /// [`verify_table`] can report them.
    pub fn parse(text: &str) -> Result<Self, EmbedError> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let err = |line: usize, message: String| EmbedError::Parse { line: line + 1, message };
        let (hl, header) = lines.next().ok_or_else(|| err(0, "missing \"dim N\" header".into()))?;
        let dim = header
            .trim()
            .strip_prefix("dim")
            .and_then(|d| d.trim().parse::<usize>().ok())
            .filter(|d| *d > 0)
            .ok_or_else(|| err(hl, format!("bad header {header:?}")))?;
        let mut table = Self::new(dim);
        for (i, line) in lines {
            let (name, values) = line.split_once('\t').ok_or_else(|| err(i, "expected name<TAB>values".into()))?;
            let vector = values
                .split_whitespace()
                .map(|v| v.parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| err(i, format!("token {name:?}: {e}")))?;
            if table.entries.insert(name.to_string(), vector).is_some() {
                return Err(err(i, format!("duplicate token {name:?}")));
            }
        }
        Ok(table)
    }

    /// Text form; floats use shortest round-trip formatting.
    pub fn to_text(&self) -> String {
        let mut out = format!("dim {}\n", self.dim);
        for (name, v) in &self.entries {
            out.push_str(name);
            out.push('\t');
            for (i, x) in v.iter().enumerate() {
                if i > 0 {
                    out.push(' ');
                }
                let _ = write!(out, "{x:?}");
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitConfig {
    /// Pieces whose mean carries the trigger's meaning.
    pub subwords: Vec<String>,
    pub open_anchor: String,
    pub close_anchor: String,
    /// Names under which the new vectors are emitted.
    pub open_name: String,
    pub close_name: String,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            subwords: vec!["think".into(), "any".into(), "where".into()],
            open_anchor: "<|im_start|>".into(),
            close_anchor: "<|im_end|>".into(),
            open_name: "<ta>".into(),
            close_name: "</ta>".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriggerEmbeddings {
    pub e_open: Vec<f64>,
    pub e_close: Vec<f64>,
}

fn lookup<'a>(table: &'a EmbeddingTable, name: &str) -> Result<&'a [f64], EmbedError> {
    let v = table.get(name).ok_or_else(|| EmbedError::MissingSourceToken(name.to_string()))?;
    if v.len() != table.dim {
        return Err(EmbedError::DimensionMismatch { token: name.to_string(), expected: table.dim, found: v.len() });
    }
    Ok(v)
}

pub fn init_trigger_embeddings(table: &EmbeddingTable, cfg: &InitConfig) -> Result<TriggerEmbeddings, EmbedError> {
    if cfg.subwords.is_empty() {
        return Err(EmbedError::NoSubwords);
    }
    let sources = cfg.subwords.iter().map(|s| lookup(table, s)).collect::<Result<Vec<_>, _>>()?;
    let open = lookup(table, &cfg.open_anchor)?;
    let close = lookup(table, &cfg.close_anchor)?;
    let k = sources.len() as f64;
    let semantic: Vec<f64> = (0..table.dim).map(|d| sources.iter().map(|v| v[d]).sum::<f64>() / k).collect();
    let mix = |anchor: &[f64]| semantic.iter().zip(anchor).map(|(s, a)| 0.5 * s + 0.5 * a).collect();
    Ok(TriggerEmbeddings { e_open: mix(open), e_close: mix(close) })
}

/// Copy of `table` with the two trigger vectors appended.
pub fn with_triggers(table: &EmbeddingTable, cfg: &InitConfig) -> Result<EmbeddingTable, EmbedError> {
    let init = init_trigger_embeddings(table, cfg)?;
    let mut out = table.clone();
    for name in [&cfg.open_name, &cfg.close_name] {
        if out.entries.contains_key(name.as_str()) {
            return Err(EmbedError::TokenExists(name.clone()));
        }
    }
    out.insert(cfg.open_name.clone(), init.e_open);
    out.insert(cfg.close_name.clone(), init.e_close);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "issue", rename_all = "snake_case")]
pub enum TableIssue {
    HeaderDim { declared: usize, expected: usize },
    WrongDim { token: String, expected: usize, found: usize },
    Missing { token: String },
    NonFinite { token: String, index: usize },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct VerifyReport {
    pub issues: Vec<TableIssue>,
}

impl VerifyReport {
    pub fn is_clean(&self) -> bool {
        self.issues.is_empty()
    }
}

/// Reports dimension mismatches, missing `required` tokens and non-finite
/// values.
pub fn verify_table(table: &EmbeddingTable, expected_dim: usize, required: &[&str]) -> VerifyReport {
    let mut issues = Vec::new();
    if table.dim != expected_dim {
        issues.push(TableIssue::HeaderDim { declared: table.dim, expected: expected_dim });
    }
    for token in required {
        if !table.entries.contains_key(*token) {
            issues.push(TableIssue::Missing { token: token.to_string() });
        }
    }
    for (token, v) in &table.entries {
        if v.len() != expected_dim {
            issues.push(TableIssue::WrongDim { token: token.clone(), expected: expected_dim, found: v.len() });
        }
        if let Some(index) = v.iter().position(|x| !x.is_finite()) {
            issues.push(TableIssue::NonFinite { token: token.clone(), index });
        }
    }
    VerifyReport { issues }
}

impl InitConfig {
    /// Every token that must exist before initialization.
    pub fn required_sources(&self) -> Vec<&str> {
        let mut r: Vec<&str> = self.subwords.iter().map(String::as_str).collect();
        r.push(&self.open_anchor);
        r.push(&self.close_anchor);
        r
    }
}
