//! Offline analytics over generation traces: entropy windows around inline
//! blocks, syntactic context of block positions, pass@k and token costs.

pub mod syntax;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::interleave::MixedSequence;
use crate::par;
pub use syntax::Category;

/// Default entropy window length.
pub const DEFAULT_WINDOW: usize = 10;

#[derive(Debug, Error, PartialEq)]
pub enum AnalysisError {
    #[error("trace carries neither entropies nor top-k logprobs")]
    NoEntropyData,
    #[error("position {position} out of range for trace of {len} tokens")]
    PositionOutOfRange { position: usize, len: usize },
    #[error("no code tokens at or after position {position}")]
    EmptyWindow { position: usize },
    #[error("window length must be at least 1")]
    ZeroWindow,
    #[error("pairing ids differ: {enabled:?} vs {disabled:?}")]
    PairingMismatch { enabled: String, disabled: String },
    #[error("grammar {0:?} is not available")]
    GrammarUnavailable(String),
    #[error("pass@k needs 0 <= c <= n and 1 <= k <= n (n={n}, c={c}, k={k})")]
    DomainError { n: u64, c: u64, k: u64 },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("invalid trace: {0}")]
    InvalidTrace(String),
    #[error("line {line}: {message}")]
    Json { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenBlock {
    Upfront,
    Code,
    Ta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceToken {
    pub text: String,
    pub block: TokenBlock,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub byte_span: Option<(usize, usize)>,
}

impl TraceToken {
    pub fn new(text: impl Into<String>, block: TokenBlock) -> Self {
        Self { text: text.into(), block, byte_span: None }
    }
}

/// One generation with per-token block labels and optional uncertainty data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationTrace {
    pub pairing_id: String,
    pub tokens: Vec<TraceToken>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entropies: Option<Vec<f64>>,
    /// Per-token top-k alternatives as `(token, logprob)` pairs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_k: Option<Vec<Vec<(String, f64)>>>,
}

impl GenerationTrace {
    /// Checks label ordering (upfront tokens form a prefix) and alignment of
    /// the uncertainty arrays.
    pub fn validate(&self) -> Result<(), AnalysisError> {
        let first_non_upfront = self.tokens.iter().position(|t| t.block != TokenBlock::Upfront);
        if let Some(i) = first_non_upfront {
            if self.tokens[i..].iter().any(|t| t.block == TokenBlock::Upfront) {
                return Err(AnalysisError::InvalidTrace("upfront token after code".into()));
            }
        }
        if let Some(e) = &self.entropies {
            if e.len() != self.tokens.len() {
                return Err(AnalysisError::InvalidTrace(format!(
                    "{} entropies for {} tokens",
                    e.len(),
                    self.tokens.len()
                )));
            }
            if e.iter().any(|x| x.is_nan() || *x < 0.0) {
                return Err(AnalysisError::InvalidTrace("negative or NaN entropy".into()));
            }
        }
        if let Some(k) = &self.top_k {
            if k.len() != self.tokens.len() {
                return Err(AnalysisError::InvalidTrace(format!(
                    "{} top-k rows for {} tokens",
                    k.len(),
                    self.tokens.len()
                )));
            }
        }
        Ok(())
    }

    /// Per-token entropy in nats, preferring full-distribution values.
    pub fn token_entropies(&self) -> Result<Vec<f64>, AnalysisError> {
        if let Some(e) = &self.entropies {
            return Ok(e.clone());
        }
        match &self.top_k {
            Some(rows) => Ok(rows.iter().map(|r| topk_entropy(r)).collect()),
            None => Err(AnalysisError::NoEntropyData),
        }
    }

    /// Token index just after each run of inline-block tokens.
    pub fn ta_onset_positions(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for i in 1..=self.tokens.len() {
            let prev_ta = self.tokens[i - 1].block == TokenBlock::Ta;
            let cur_ta = self.tokens.get(i).is_some_and(|t| t.block == TokenBlock::Ta);
            if prev_ta && !cur_ta && i < self.tokens.len() {
                out.push(i);
            }
        }
        out
    }

    fn count(&self, block: TokenBlock) -> usize {
        self.tokens.iter().filter(|t| t.block == block).count()
    }
}

/// Reads one trace per non-blank line.
pub fn read_traces(reader: impl BufRead) -> Result<Vec<GenerationTrace>, AnalysisError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| AnalysisError::Json { line: i + 1, message: e.to_string() })?;
        if line.trim().is_empty() {
            continue;
        }
        let trace: GenerationTrace =
            serde_json::from_str(&line).map_err(|e| AnalysisError::Json { line: i + 1, message: e.to_string() })?;
        trace.validate()?;
        out.push(trace);
    }
    Ok(out)
}

/// Entropy of a truncated distribution: top-k probabilities plus one
/// residual bucket holding the missing mass. When the listed mass exceeds 1
/// (rounding), it is renormalized and the residual is empty.
pub fn topk_entropy(top_k: &[(String, f64)]) -> f64 {
    let probs: Vec<f64> = top_k.iter().map(|(_, lp)| lp.exp()).collect();
    let mass: f64 = probs.iter().sum();
    let (scale, residual) = if mass > 1.0 { (1.0 / mass, 0.0) } else { (1.0, 1.0 - mass) };
    let h = |p: f64| if p > 0.0 { -p * p.ln() } else { 0.0 };
    let total = probs.iter().map(|p| h(p * scale)).sum::<f64>() + h(residual);
    total.max(0.0)
}

/// Mean entropy over the first `n` non-inline tokens at index `position` or
/// later. A short tail averages whatever remains.
pub fn window_entropy(trace: &GenerationTrace, position: usize, n: usize) -> Result<f64, AnalysisError> {
    let entropies = trace.token_entropies()?;
    window_over(trace, &entropies, position, n)
}

fn window_over(trace: &GenerationTrace, entropies: &[f64], position: usize, n: usize) -> Result<f64, AnalysisError> {
    if n == 0 {
        return Err(AnalysisError::ZeroWindow);
    }
    if position >= trace.tokens.len() {
        return Err(AnalysisError::PositionOutOfRange { position, len: trace.tokens.len() });
    }
    if entropies.len() != trace.tokens.len() {
        return Err(AnalysisError::InvalidTrace(format!(
            "{} entropies for {} tokens",
            entropies.len(),
            trace.tokens.len()
        )));
    }
    let window: Vec<f64> = trace.tokens[position..]
        .iter()
        .zip(&entropies[position..])
        .filter(|(t, _)| t.block != TokenBlock::Ta)
        .map(|(_, e)| *e)
        .take(n)
        .collect();
    if window.is_empty() {
        return Err(AnalysisError::EmptyWindow { position });
    }
    Ok(window.iter().sum::<f64>() / window.len() as f64)
}

/// Maps an enabled-run position to the disabled run through the longest
/// common code prefix: the target is the first code token of the disabled run
/// whose preceding code text equals the enabled run's code before `position`.
pub fn map_position(enabled: &GenerationTrace, disabled: &GenerationTrace, position: usize) -> Option<usize> {
    let prefix: String = enabled.tokens[..position.min(enabled.tokens.len())]
        .iter()
        .filter(|t| t.block == TokenBlock::Code)
        .map(|t| t.text.as_str())
        .collect();
    let mut acc = String::new();
    for (j, tok) in disabled.tokens.iter().enumerate() {
        if tok.block != TokenBlock::Code {
            continue;
        }
        if acc == prefix {
            return Some(j);
        }
        acc.push_str(&tok.text);
        if acc.len() > prefix.len() || !prefix.starts_with(acc.as_str()) {
            return None;
        }
    }
    None
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum DiffOutcome {
    Diff { disabled_position: usize, diff: f64 },
    UnmappablePosition,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionDiff {
    pub position: usize,
    #[serde(flatten)]
    pub outcome: DiffOutcome,
}

impl PositionDiff {
    pub fn diff(&self) -> Option<f64> {
        match self.outcome {
            DiffOutcome::Diff { diff, .. } => Some(diff),
            DiffOutcome::UnmappablePosition => None,
        }
    }
}

/// `window(disabled) - window(enabled)` at every inline-block onset of the
/// enabled run. Positive values mean suppressing thinking raised uncertainty.
pub fn entropy_diff(
    enabled: &GenerationTrace,
    disabled: &GenerationTrace,
    n: usize,
) -> Result<Vec<PositionDiff>, AnalysisError> {
    if enabled.pairing_id != disabled.pairing_id {
        return Err(AnalysisError::PairingMismatch {
            enabled: enabled.pairing_id.clone(),
            disabled: disabled.pairing_id.clone(),
        });
    }
    if n == 0 {
        return Err(AnalysisError::ZeroWindow);
    }
    let h_en = enabled.token_entropies()?;
    let h_dis = disabled.token_entropies()?;
    let mut out = Vec::new();
    for position in enabled.ta_onset_positions() {
        let outcome = match map_position(enabled, disabled, position) {
            Some(dp) => match (window_over(enabled, &h_en, position, n), window_over(disabled, &h_dis, dp, n)) {
                (Ok(e), Ok(d)) => DiffOutcome::Diff { disabled_position: dp, diff: d - e },
                _ => DiffOutcome::UnmappablePosition,
            },
            None => DiffOutcome::UnmappablePosition,
        };
        out.push(PositionDiff { position, outcome });
    }
    Ok(out)
}

/// Pairs enabled and disabled traces by `pairing_id`, in enabled order.
/// Enabled traces without a partner are returned separately.
pub fn pair_traces(
    enabled: Vec<GenerationTrace>,
    disabled: Vec<GenerationTrace>,
) -> (Vec<(GenerationTrace, GenerationTrace)>, Vec<String>) {
    let mut by_id: HashMap<String, GenerationTrace> = disabled.into_iter().map(|t| (t.pairing_id.clone(), t)).collect();
    let mut pairs = Vec::new();
    let mut missing = Vec::new();
    for e in enabled {
        match by_id.remove(&e.pairing_id) {
            Some(d) => pairs.push((e, d)),
            None => missing.push(e.pairing_id),
        }
    }
    (pairs, missing)
}

/// Per-pair diffs over a corpus, computed in parallel and returned in input
/// order.
pub fn entropy_diff_corpus(
    pairs: &[(GenerationTrace, GenerationTrace)],
    n: usize,
) -> Vec<Result<Vec<PositionDiff>, AnalysisError>> {
    par::map(pairs, |(e, d)| entropy_diff(e, d, n))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffSummary {
    pub count: usize,
    pub unmappable: usize,
    pub positive: usize,
    pub negative: usize,
    pub zero: usize,
    pub positive_fraction: f64,
    pub mean: f64,
    pub bins: Vec<HistogramBin>,
}

impl DiffSummary {
    pub fn predominantly_positive(&self) -> bool {
        self.positive_fraction > 0.5
    }
}

/// Distribution summary of mapped diffs with `bins` equal-width bins over
/// the observed range.
pub fn summarize_diffs(diffs: &[PositionDiff], bins: usize) -> DiffSummary {
    let values: Vec<f64> = diffs.iter().filter_map(PositionDiff::diff).collect();
    let count = values.len();
    let positive = values.iter().filter(|d| **d > 0.0).count();
    let negative = values.iter().filter(|d| **d < 0.0).count();
    let mut hist = Vec::new();
    if count > 0 && bins > 0 {
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
        hist = (0..bins)
            .map(|b| HistogramBin { lo: lo + width * b as f64, hi: lo + width * (b + 1) as f64, count: 0 })
            .collect();
        for v in &values {
            let idx = (((v - lo) / width) as usize).min(bins - 1);
            hist[idx].count += 1;
        }
    }
    DiffSummary {
        count,
        unmappable: diffs.len() - count,
        positive,
        negative,
        zero: count - positive - negative,
        positive_fraction: if count == 0 { 0.0 } else { positive as f64 / count as f64 },
        mean: if count == 0 { 0.0 } else { values.iter().sum::<f64>() / count as f64 },
        bins: hist,
    }
}

/// Grammar identifiers accepted by [`SyntaxProfile`].
pub const SUPPORTED_GRAMMARS: [&str; 3] = ["python-subset", "python3", "python"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntaxProfile {
    pub grammar_id: String,
    /// Expression kinds that take priority over their enclosing statement.
    #[serde(default = "default_reported")]
    pub reported_expressions: Vec<Category>,
}

fn default_reported() -> Vec<Category> {
    vec![Category::BinOp]
}

impl Default for SyntaxProfile {
    fn default() -> Self {
        Self { grammar_id: SUPPORTED_GRAMMARS[0].into(), reported_expressions: default_reported() }
    }
}

impl SyntaxProfile {
    fn check(&self) -> Result<(), AnalysisError> {
        if SUPPORTED_GRAMMARS.contains(&self.grammar_id.as_str()) {
            Ok(())
        } else {
            Err(AnalysisError::GrammarUnavailable(self.grammar_id.clone()))
        }
    }
}

/// Category of the innermost node enclosing `offset`. Unparseable code and
/// offsets between statements give [`Category::Other`].
pub fn classify_syntax_position(code: &str, offset: usize, profile: &SyntaxProfile) -> Result<Category, AnalysisError> {
    Ok(classify_positions(code, &[offset], profile)?[0])
}

/// Classifies several offsets with a single parse.
pub fn classify_positions(
    code: &str,
    offsets: &[usize],
    profile: &SyntaxProfile,
) -> Result<Vec<Category>, AnalysisError> {
    profile.check()?;
    Ok(match syntax::parse_module(code) {
        Ok(tree) => offsets.iter().map(|o| tree.classify(*o, &profile.reported_expressions)).collect(),
        Err(_) => vec![Category::Other; offsets.len()],
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntaxHistogram {
    /// Categories by descending count, ties broken by category order.
    pub ranked: Vec<(Category, usize)>,
    pub total: usize,
    /// Onsets skipped because their profile's grammar is unavailable.
    pub skipped: usize,
}

impl SyntaxHistogram {
    pub fn top(&self, k: usize) -> &[(Category, usize)] {
        &self.ranked[..k.min(self.ranked.len())]
    }
}

/// Counts the syntactic category of every inline-block onset in the corpus.
pub fn syntax_histogram(corpus: &[(MixedSequence, SyntaxProfile)]) -> SyntaxHistogram {
    let per_item = par::map(corpus, |(seq, profile)| {
        let code: String = seq.code_segments().collect();
        let onsets = seq.ta_onsets();
        match classify_positions(&code, &onsets, profile) {
            Ok(cats) => (cats, 0),
            Err(_) => (Vec::new(), onsets.len()),
        }
    });
    let mut counts: BTreeMap<Category, usize> = BTreeMap::new();
    let mut skipped = 0;
    for (cats, skip) in per_item {
        skipped += skip;
        for c in cats {
            *counts.entry(c).or_default() += 1;
        }
    }
    let total = counts.values().sum();
    let mut ranked: Vec<(Category, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    SyntaxHistogram { ranked, total, skipped }
}

/// Unbiased pass@k from `n` samples with `c` correct, in product form.
pub fn pass_at_k(n: u64, c: u64, k: u64) -> Result<f64, AnalysisError> {
    if c > n || k == 0 || k > n {
        return Err(AnalysisError::DomainError { n, c, k });
    }
    if n - c < k {
        return Ok(1.0);
    }
    let fail: f64 = ((n - c + 1)..=n).map(|i| 1.0 - k as f64 / i as f64).product();
    Ok(1.0 - fail)
}

/// Mean per-trace token counts by block label.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenCost {
    pub upfront_mean: f64,
    pub ta_mean: f64,
    pub code_mean: f64,
    pub traces: usize,
}

impl TokenCost {
    pub fn reasoning_mean(&self) -> f64 {
        self.upfront_mean + self.ta_mean
    }

    pub fn total_mean(&self) -> f64 {
        self.upfront_mean + self.ta_mean + self.code_mean
    }
}

impl fmt::Display for TokenCost {
    /// Reasoning cost as `U + T`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.1} + {:.1}", self.upfront_mean, self.ta_mean)
    }
}

pub fn token_cost_breakdown(corpus: &[GenerationTrace]) -> Result<TokenCost, AnalysisError> {
    if corpus.is_empty() {
        return Err(AnalysisError::EmptyCorpus);
    }
    let n = corpus.len() as f64;
    let mean = |b: TokenBlock| corpus.iter().map(|t| t.count(b)).sum::<usize>() as f64 / n;
    Ok(TokenCost {
        upfront_mean: mean(TokenBlock::Upfront),
        ta_mean: mean(TokenBlock::Ta),
        code_mean: mean(TokenBlock::Code),
        traces: corpus.len(),
    })
}
