//! Cold-start dataset construction: render the generation template, query a
//! backend, keep only well-structured completions.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::interleave::{self, DelimiterScheme, ViolationKind};
use crate::reward::{self, RewardConfig, RewardError};
use crate::sandbox::{Sandbox, TestCase};

/// Canonical generation template; `{prompt}` marks the requirement slot.
pub const TEMPLATE: &str = include_str!("../assets/template.txt");
pub const PLACEHOLDER: &str = "{prompt}";

#[derive(Debug, Error)]
pub enum ColdStartError {
    #[error("requirement is empty")]
    EmptyRequirement,
    #[error("no requirements supplied")]
    NoRequirements,
    #[error("target_count must be positive")]
    InvalidTarget,
    #[error("budget spent after {} calls with {} of {} samples kept", .0.report.calls, .0.report.kept, .0.report.target)]
    BackendExhausted(Box<BuildOutput>),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error("line {line}: {message}")]
    Json { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rendered {
    pub text: String,
    pub warnings: Vec<String>,
}

/// Substitutes `requirement` into the template verbatim. Requirements that
/// contain delimiter text are rendered unchanged with a warning.
pub fn render_template(requirement: &str) -> Result<Rendered, ColdStartError> {
    if requirement.trim().is_empty() {
        return Err(ColdStartError::EmptyRequirement);
    }
    let scheme = DelimiterScheme::text_tags();
    let warnings = [&scheme.open_think, &scheme.close_think, &scheme.open_ta, &scheme.close_ta]
        .into_iter()
        .filter(|d| requirement.contains(d.as_str()))
        .map(|d| format!("requirement contains delimiter {d:?}"))
        .collect();
    Ok(Rendered { text: TEMPLATE.replacen(PLACEHOLDER, requirement, 1), warnings })
}

/// Recovers the requirement slot from a rendered template.
pub fn placeholder_region(rendered: &str) -> Option<&str> {
    let (head, tail) = TEMPLATE.split_once(PLACEHOLDER)?;
    rendered.strip_prefix(head)?.strip_suffix(tail)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    UnmatchedTag,
    NestedBlock,
    ThinkAfterCode,
    TaInsideThink,
    EmptyOutput,
    NoInitialThink,
    NoInlineBlock,
    BackendError,
}

impl From<ViolationKind> for DropReason {
    fn from(v: ViolationKind) -> Self {
        match v {
            ViolationKind::UnmatchedTag => DropReason::UnmatchedTag,
            ViolationKind::NestedBlock => DropReason::NestedBlock,
            ViolationKind::ThinkAfterCode => DropReason::ThinkAfterCode,
            ViolationKind::TaInsideThink => DropReason::TaInsideThink,
            ViolationKind::EmptyOutput => DropReason::EmptyOutput,
        }
    }
}

impl fmt::Display for DropReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default();
        f.write_str(&s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterDecision {
    pub keep: bool,
    pub reason: Option<DropReason>,
    pub ta_blocks: usize,
}

/// Structure-only filter; correctness is never consulted.
pub fn filter_sample(completion: &str, scheme: &DelimiterScheme) -> FilterDecision {
    let (_, report) = interleave::check_raw(completion, scheme);
    let reason = if let Some(v) = report.violations.first() {
        Some(v.kind.into())
    } else if !report.has_initial_think {
        Some(DropReason::NoInitialThink)
    } else if report.ta_block_count == 0 {
        Some(DropReason::NoInlineBlock)
    } else {
        None
    };
    FilterDecision { keep: reason.is_none(), reason, ta_blocks: report.ta_block_count }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenParams {
    pub max_tokens: u32,
    pub temperature: f64,
    /// Per-call seed; the builder sets it to the call index.
    pub seed: Option<u64>,
}

impl Default for GenParams {
    fn default() -> Self {
        Self { max_tokens: 4096, temperature: 0.7, seed: None }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("backend error: {0}")]
pub struct BackendError(pub String);

/// Source of completions. Implementations must return rather than block
/// indefinitely and should be deterministic when temperature is 0.
pub trait GenerationBackend: Send + Sync {
    fn generate(&self, prompt: &str, params: &GenParams) -> Result<String, BackendError>;
}

/// What a scripted backend emits for one call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScriptedKind {
    Valid,
    /// Valid structure whose code fails any test asserting `solve() == 1`.
    ValidWrong,
    Nested,
    Unmatched,
    NoInline,
    NoThink,
    Error,
}

impl ScriptedKind {
    /// Drop reason the filter must assign, or `None` for kept samples.
    pub fn expected_drop(self) -> Option<DropReason> {
        match self {
            ScriptedKind::Valid | ScriptedKind::ValidWrong => None,
            ScriptedKind::Nested => Some(DropReason::NestedBlock),
            ScriptedKind::Unmatched => Some(DropReason::UnmatchedTag),
            ScriptedKind::NoInline => Some(DropReason::NoInlineBlock),
            ScriptedKind::NoThink => Some(DropReason::NoInitialThink),
            ScriptedKind::Error => Some(DropReason::BackendError),
        }
    }

    pub fn completion(self) -> Result<String, BackendError> {
        let s = match self {
            ScriptedKind::Valid => {
                "<think>Return one.</think>def solve():\n    x = <thinkanywhere>the answer is one</thinkanywhere>1\n    return x\n"
            }
            ScriptedKind::ValidWrong => {
                "<think>Return two.</think>def solve():\n    x = <thinkanywhere>pick two</thinkanywhere>2\n    return x\n"
            }
            ScriptedKind::Nested => {
                "<think>plan</think>x = <thinkanywhere>a <thinkanywhere>b</thinkanywhere></thinkanywhere>1\n"
            }
            ScriptedKind::Unmatched => "<think>plan</think>x = 1</thinkanywhere>\n",
            ScriptedKind::NoInline => "<think>plan</think>x = 1\n",
            ScriptedKind::NoThink => "x = <thinkanywhere>one</thinkanywhere>1\n",
            ScriptedKind::Error => return Err(BackendError("scripted failure".into())),
        };
        Ok(s.to_string())
    }
}

const MALFORMED: [ScriptedKind; 4] =
    [ScriptedKind::Nested, ScriptedKind::Unmatched, ScriptedKind::NoInline, ScriptedKind::NoThink];

/// Deterministic mock backend.
#[derive(Debug, Clone, PartialEq)]
pub enum ScriptedBackend {
    /// Always the same text.
    Fixed(String),
    /// Cycles through kinds by call seed.
    Cycle(Vec<ScriptedKind>),
    /// Each call is malformed with probability `malformed_rate`, decided by a
    /// generator seeded from `seed` and the call seed.
    Random { seed: u64, malformed_rate: f64 },
}

impl ScriptedBackend {
    /// Kind emitted for a given call seed. This is the ground truth tests
    /// compare the builder report against.
    pub fn kind_for(&self, call_seed: u64) -> Option<ScriptedKind> {
        match self {
            ScriptedBackend::Fixed(_) => None,
            ScriptedBackend::Cycle(kinds) => Some(kinds[(call_seed % kinds.len() as u64) as usize]),
            ScriptedBackend::Random { seed, malformed_rate } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ call_seed);
                if rng.random::<f64>() < *malformed_rate {
                    Some(MALFORMED[rng.random_range(0..MALFORMED.len())])
                } else if rng.random::<f64>() < 0.5 {
                    Some(ScriptedKind::ValidWrong)
                } else {
                    Some(ScriptedKind::Valid)
                }
            }
        }
    }
}

impl GenerationBackend for ScriptedBackend {
    fn generate(&self, _prompt: &str, params: &GenParams) -> Result<String, BackendError> {
        match self {
            ScriptedBackend::Fixed(text) => Ok(text.clone()),
            other => other.kind_for(params.seed.unwrap_or(0)).map_or(Ok(String::new()), ScriptedKind::completion),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColdStartSample {
    pub prompt: String,
    pub completion: String,
    pub structure_ok: bool,
    pub ta_blocks: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correctness_known: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BuildConfig {
    pub target_count: usize,
    /// Maximum backend calls; `None` means four times the target.
    pub budget: Option<usize>,
    pub parallelism: usize,
    pub params: GenParams,
    pub scheme: DelimiterScheme,
}

impl Default for BuildConfig {
    fn default() -> Self {
        Self {
            target_count: 1,
            budget: None,
            parallelism: 4,
            params: GenParams::default(),
            scheme: DelimiterScheme::text_tags(),
        }
    }
}

impl BuildConfig {
    pub fn effective_budget(&self) -> usize {
        self.budget.unwrap_or(self.target_count.saturating_mul(4))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BuildReport {
    pub target: usize,
    pub budget: usize,
    pub calls: usize,
    pub kept: usize,
    pub dropped: BTreeMap<DropReason, usize>,
    pub render_warnings: usize,
}

impl BuildReport {
    pub fn dropped_total(&self) -> usize {
        self.dropped.values().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildOutput {
    pub samples: Vec<ColdStartSample>,
    pub report: BuildReport,
}

/// Queries the backend, cycling through `requirements`, until `target_count`
/// samples pass the filter or the call budget is spent. Calls run in waves
/// of up to `parallelism`; results are filtered in call order at a single
/// collection point, so the output is deterministic for a deterministic
/// backend.
pub fn build_dataset(
    requirements: &[String],
    backend: &dyn GenerationBackend,
    cfg: &BuildConfig,
) -> Result<BuildOutput, ColdStartError> {
    if requirements.is_empty() {
        return Err(ColdStartError::NoRequirements);
    }
    if cfg.target_count == 0 {
        return Err(ColdStartError::InvalidTarget);
    }
    let prompts = requirements.iter().map(|r| render_template(r)).collect::<Result<Vec<_>, _>>()?;
    let budget = cfg.effective_budget();
    let mut report = BuildReport {
        target: cfg.target_count,
        budget,
        render_warnings: prompts.iter().map(|p| p.warnings.len()).sum(),
        ..BuildReport::default()
    };
    let mut samples = Vec::with_capacity(cfg.target_count);
    let parallelism = cfg.parallelism.max(1);

    while report.kept < cfg.target_count && report.calls < budget {
        let wave = parallelism.min(cfg.target_count - report.kept).min(budget - report.calls);
        let first = report.calls;
        let results: Vec<(usize, Result<String, BackendError>)> = std::thread::scope(|s| {
            let handles: Vec<_> = (first..first + wave)
                .map(|call| {
                    let prompt = &prompts[call % prompts.len()].text;
                    let params = GenParams { seed: Some(call as u64), ..cfg.params };
                    s.spawn(move || (call, backend.generate(prompt, &params)))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| (usize::MAX, Err(BackendError("backend panicked".into())))))
                .collect()
        });
        for (offset, (_, result)) in results.into_iter().enumerate() {
            let call = first + offset;
            report.calls += 1;
            let completion = match result {
                Ok(c) => c,
                Err(_) => {
                    *report.dropped.entry(DropReason::BackendError).or_default() += 1;
                    continue;
                }
            };
            let decision = filter_sample(&completion, &cfg.scheme);
            match decision.reason {
                Some(reason) => *report.dropped.entry(reason).or_default() += 1,
                None => {
                    report.kept += 1;
                    samples.push(ColdStartSample {
                        prompt: prompts[call % prompts.len()].text.clone(),
                        completion,
                        structure_ok: true,
                        ta_blocks: decision.ta_blocks,
                        correctness_known: None,
                    });
                }
            }
        }
    }
    let out = BuildOutput { samples, report };
    if out.report.kept < cfg.target_count {
        return Err(ColdStartError::BackendExhausted(Box::new(out)));
    }
    Ok(out)
}

/// Runs each sample's extracted code against `tests` and records the
/// outcome. Informational only: it never removes samples.
pub fn annotate_correctness(
    samples: &mut [ColdStartSample],
    tests: &[TestCase],
    cfg: &RewardConfig,
    sandbox: &Sandbox,
) -> Result<(), ColdStartError> {
    for s in samples {
        let outcome = reward::correctness_reward(&s.completion, tests, cfg, sandbox)?;
        s.correctness_known = Some(outcome.r_correct == 1);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub ta_blocks: usize,
    pub structure_ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correctness_known: Option<bool>,
}

/// One line of the dataset file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub prompt: String,
    pub completion: String,
    pub meta: DatasetMeta,
}

impl From<&ColdStartSample> for DatasetRecord {
    fn from(s: &ColdStartSample) -> Self {
        Self {
            prompt: s.prompt.clone(),
            completion: s.completion.clone(),
            meta: DatasetMeta {
                ta_blocks: s.ta_blocks,
                structure_ok: s.structure_ok,
                correctness_known: s.correctness_known,
            },
        }
    }
}

pub fn write_dataset(samples: &[ColdStartSample], mut out: impl Write) -> Result<(), ColdStartError> {
    for s in samples {
        let line = serde_json::to_string(&DatasetRecord::from(s)).map_err(|e| std::io::Error::other(e.to_string()))?;
        writeln!(out, "{line}")?;
    }
    Ok(())
}

pub fn read_dataset(reader: impl BufRead) -> Result<Vec<DatasetRecord>, ColdStartError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| ColdStartError::Json { line: i + 1, message: e.to_string() })?,
        );
    }
    Ok(out)
}
