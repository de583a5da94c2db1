//! Structure and correctness rewards.
//!
//! `total = alpha * r_struct + correct_coeff * r_correct`, or in gated mode
//! `total = r_struct * (alpha + correct_coeff * r_correct)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::syntax;
use crate::interleave::{self, DelimiterScheme, StructureReport};
use crate::sandbox::{Sandbox, SandboxError, TestCase, TestVerdict};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    pub alpha: f64,
    pub correct_coeff: f64,
    pub strict_code_validity: bool,
    pub gated: bool,
    pub scheme: DelimiterScheme,
    /// Sandbox language profile for test execution.
    pub profile: String,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            correct_coeff: 1.0,
            strict_code_validity: false,
            gated: false,
            scheme: DelimiterScheme::text_tags(),
            profile: "python3".into(),
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), RewardError> {
        if self.alpha.is_nan() || self.alpha < 0.0 || self.correct_coeff.is_nan() || self.correct_coeff <= 0.0 {
            return Err(RewardError::InvalidConfig);
        }
        Ok(())
    }

    /// Combines binary components into the scalar reward.
    pub fn combine(&self, r_struct: u8, r_correct: u8) -> f64 {
        let (s, c) = (f64::from(r_struct), f64::from(r_correct));
        if self.gated {
            s * (self.alpha + self.correct_coeff * c)
        } else {
            self.alpha * s + self.correct_coeff * c
        }
    }
}

#[derive(Debug, Error)]
pub enum RewardError {
    #[error(transparent)]
    Sandbox(#[from] SandboxError),
    #[error("correctness scoring needs at least one test")]
    NoTests,
    #[error("alpha must be >= 0 and correct_coeff > 0")]
    InvalidConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureOutcome {
    pub r_struct: u8,
    pub report: StructureReport,
    /// Result of the strict validity check, when it ran.
    pub code_valid: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectnessOutcome {
    pub r_correct: u8,
    pub verdicts: Vec<TestVerdict>,
    pub code: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_struct: u8,
    pub r_correct: u8,
    pub total: f64,
    pub structure_report: StructureReport,
    pub verdicts: Vec<TestVerdict>,
    pub code: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub code_valid: Option<bool>,
}

/// Code handed to the sandbox: the exact extraction when the output parses,
/// best-effort block stripping otherwise.
pub fn candidate_code(raw: &str, scheme: &DelimiterScheme) -> String {
    match interleave::parse_mixed_sequence(raw, scheme) {
        Ok(seq) => interleave::extract_code(&seq),
        Err(_) => interleave::strip_blocks_lenient(raw, scheme),
    }
}

/// Format reward without the strict validity check. Never fails: output that
/// does not parse scores 0.
pub fn structure_reward(raw: &str, cfg: &RewardConfig) -> StructureOutcome {
    let (_, report) = interleave::check_raw(raw, &cfg.scheme);
    let ok = report.has_initial_think && report.ta_block_count >= 1 && report.is_clean();
    StructureOutcome { r_struct: u8::from(ok), report, code_valid: None }
}

/// Format reward including the strict validity check when configured. The
/// check uses the profile's syntax command, or the built-in grammar when the
/// profile has none.
pub fn structure_reward_checked(
    raw: &str,
    cfg: &RewardConfig,
    sandbox: &Sandbox,
) -> Result<StructureOutcome, RewardError> {
    let mut outcome = structure_reward(raw, cfg);
    if cfg.strict_code_validity && outcome.r_struct == 1 {
        let code = candidate_code(raw, &cfg.scheme);
        let valid = match sandbox.check_syntax(&code, &cfg.profile)? {
            Some(v) => v,
            None => syntax::parse_module(&code).is_ok(),
        };
        outcome.code_valid = Some(valid);
        if !valid {
            outcome.r_struct = 0;
        }
    }
    Ok(outcome)
}

/// 1 iff the extracted code passes every test. Thinking content never
/// reaches the sandbox.
pub fn correctness_reward(
    raw: &str,
    tests: &[TestCase],
    cfg: &RewardConfig,
    sandbox: &Sandbox,
) -> Result<CorrectnessOutcome, RewardError> {
    if tests.is_empty() {
        return Err(RewardError::NoTests);
    }
    let code = candidate_code(raw, &cfg.scheme);
    let verdicts = sandbox.run_tests(&code, tests, &cfg.profile)?;
    let r_correct = u8::from(verdicts.iter().all(TestVerdict::passed));
    Ok(CorrectnessOutcome { r_correct, verdicts, code })
}

pub fn combined_reward(
    raw: &str,
    tests: &[TestCase],
    cfg: &RewardConfig,
    sandbox: &Sandbox,
) -> Result<RewardBreakdown, RewardError> {
    cfg.validate()?;
    let structure = structure_reward_checked(raw, cfg, sandbox)?;
    let correct = correctness_reward(raw, tests, cfg, sandbox)?;
    Ok(RewardBreakdown {
        r_struct: structure.r_struct,
        r_correct: correct.r_correct,
        total: cfg.combine(structure.r_struct, correct.r_correct),
        structure_report: structure.report,
        verdicts: correct.verdicts,
        code: correct.code,
        code_valid: structure.code_valid,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOOD: &str = "<think>add</think>def f(a, b):\n    return <thinkanywhere>sum</thinkanywhere>a + b\n";

    #[test]
    fn structure_cases() {
        let cfg = RewardConfig::default();
        assert_eq!(structure_reward(GOOD, &cfg).r_struct, 1);
        let no_ta = "<think>add</think>def f(a, b):\n    return a + b\n";
        assert_eq!(structure_reward(no_ta, &cfg).r_struct, 0);
        let unmatched = "<think>p</think>x = <thinkanywhere>a</thinkanywhere>1</thinkanywhere>";
        let out = structure_reward(unmatched, &cfg);
        assert_eq!(out.r_struct, 0);
        assert_eq!(out.report.violations[0].kind, interleave::ViolationKind::UnmatchedTag);
        let no_upfront = "x = <thinkanywhere>a</thinkanywhere>1";
        assert_eq!(structure_reward(no_upfront, &cfg).r_struct, 0);
    }

    #[test]
    fn value_set_additive_and_gated() {
        let cfg = RewardConfig::default();
        assert_eq!(cfg.combine(0, 0), 0.0);
        assert_eq!(cfg.combine(1, 0), 0.1);
        assert_eq!(cfg.combine(0, 1), 1.0);
        assert_eq!(cfg.combine(1, 1), 1.1);
        let gated = RewardConfig { gated: true, ..RewardConfig::default() };
        assert_eq!(gated.combine(0, 1), 0.0);
        assert_eq!(gated.combine(1, 0), 0.1);
        assert_eq!(gated.combine(1, 1), 1.1);
    }

    #[test]
    fn invalid_config() {
        let cfg = RewardConfig { correct_coeff: 0.0, ..RewardConfig::default() };
        assert!(matches!(cfg.validate(), Err(RewardError::InvalidConfig)));
        let cfg = RewardConfig { alpha: f64::NAN, ..RewardConfig::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn candidate_code_strips_even_malformed() {
        let scheme = DelimiterScheme::text_tags();
        assert_eq!(candidate_code(GOOD, &scheme), "def f(a, b):\n    return a + b\n");
        assert_eq!(candidate_code("x = 1</thinkanywhere>\n", &scheme), "x = 1\n");
    }
}
