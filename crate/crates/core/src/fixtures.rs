//! Reference fixtures shared by the test suites, the acceptance harness and
//! the benchmarks. Every generator is deterministic in its seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::analysis::{Category, GenerationTrace, TokenBlock, TraceToken};
use crate::interleave::{DelimiterScheme, MixedSequence, Segment, ViolationKind};
use crate::reward::candidate_code;
use crate::sandbox::{Sandbox, SandboxError, TestCase, VerdictStatus};

const VIOLATIONS: &str = include_str!("../assets/fixtures/violations.jsonl");
const SYNTAX_POSITIONS: &str = include_str!("../assets/fixtures/syntax_positions.jsonl");

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Debug, Clone, Deserialize)]
pub struct LabeledRaw {
    pub raw: String,
    /// Expected first violation, `None` for structurally clean text.
    pub label: Option<ViolationKind>,
}

/// Hand-labeled structural cases: 8 per violation kind and 10 clean ones.
pub fn violation_corpus() -> Vec<LabeledRaw> {
    VIOLATIONS.lines().filter(|l| !l.is_empty()).map(|l| serde_json::from_str(l).expect("fixture line")).collect()
}

#[derive(Debug, Clone, Deserialize)]
pub struct SyntaxCase {
    pub raw: String,
    /// Category of each inline-block onset, in order.
    pub labels: Vec<Category>,
}

/// Sixty labeled inline-block positions across short solutions.
pub fn syntax_corpus() -> Vec<SyntaxCase> {
    SYNTAX_POSITIONS.lines().filter(|l| !l.is_empty()).map(|l| serde_json::from_str(l).expect("fixture line")).collect()
}

const ALPHABET: &[u8] = b"abcxyz_0189 =+-*/()[]:,.'\"\n\t<>#";

/// Fragments that resemble delimiters without being one.
const NEAR_MISSES: [&str; 8] =
    ["<think", "think>", "</thinkanywher>", "<thinkanywhere", "< think>", "</ta", "<thinkany>", "é"];

fn random_text(rng: &mut impl Rng, max_len: usize) -> String {
    let len = rng.random_range(0..=max_len);
    let mut out = String::with_capacity(len);
    for _ in 0..len {
        if rng.random_bool(0.05) {
            out.push_str(NEAR_MISSES[rng.random_range(0..NEAR_MISSES.len())]);
        } else {
            out.push(ALPHABET[rng.random_range(0..ALPHABET.len())] as char);
        }
    }
    out
}

fn clean_text(rng: &mut impl Rng, max_len: usize, scheme: &DelimiterScheme) -> String {
    loop {
        let t = random_text(rng, max_len);
        let delims = [&scheme.open_think, &scheme.close_think, &scheme.open_ta, &scheme.close_ta];
        if delims.iter().all(|d| !t.contains(d.as_str())) {
            return t;
        }
    }
}

/// Random well-formed sequence whose text never contains a delimiter.
pub fn random_sequence(rng: &mut impl Rng, scheme: &DelimiterScheme) -> MixedSequence {
    let upfront = rng.random_bool(0.8).then(|| clean_text(rng, 40, scheme));
    let blocks = rng.random_range(0..6);
    let mut segments = vec![Segment::Code(clean_text(rng, 30, scheme))];
    for _ in 0..blocks {
        segments.push(Segment::Think(clean_text(rng, 20, scheme)));
        segments.push(Segment::Code(clean_text(rng, 30, scheme)));
    }
    MixedSequence::from_parts(upfront, segments, scheme)
}

/// Per-trace token counts realizing given means exactly over `n` traces.
fn spread(total: usize, n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let base = total / n;
    let mut out = vec![base; n];
    for slot in out.iter_mut().take(total - base * n) {
        *slot += 1;
    }
    // Move mass between pairs to vary lengths without changing the sum.
    for _ in 0..n {
        let (i, j) = (rng.random_range(0..n), rng.random_range(0..n));
        let d = rng.random_range(0..=out[i] / 4);
        out[i] -= d;
        out[j] += d;
    }
    out
}

/// Traces whose mean upfront and inline token counts are `upfront_mean` and
/// `ta_mean` (to 0.1 precision with `n` a multiple of 10).
pub fn token_cost_corpus(upfront_mean: f64, ta_mean: f64, n: usize, seed: u64) -> Vec<GenerationTrace> {
    let mut rng = rng(seed);
    let up = spread((upfront_mean * n as f64).round() as usize, n, &mut rng);
    let ta = spread((ta_mean * n as f64).round() as usize, n, &mut rng);
    (0..n)
        .map(|i| {
            let mut tokens: Vec<TraceToken> = (0..up[i]).map(|_| TraceToken::new("u", TokenBlock::Upfront)).collect();
            let code = rng.random_range(20..200);
            let blocks = rng.random_range(1..4).min(ta[i].max(1));
            let mut ta_left = ta[i];
            for b in 0..blocks {
                tokens.extend((0..code / blocks).map(|_| TraceToken::new("c", TokenBlock::Code)));
                let len = if b + 1 == blocks { ta_left } else { ta_left / (blocks - b) };
                ta_left -= len;
                tokens.extend((0..len).map(|_| TraceToken::new("t", TokenBlock::Ta)));
            }
            tokens.push(TraceToken::new("c", TokenBlock::Code));
            GenerationTrace { pairing_id: i.to_string(), tokens, entropies: None, top_k: None }
        })
        .collect()
}

/// Sequences with `blocks` inline blocks in total carrying `tokens` tokens,
/// together with their per-block token counts.
pub fn block_stats_corpus(
    sequences: usize,
    blocks: usize,
    tokens: usize,
    seed: u64,
) -> (Vec<MixedSequence>, Vec<Vec<usize>>) {
    let mut rng = rng(seed);
    let scheme = DelimiterScheme::text_tags();
    let per_seq = spread(blocks, sequences, &mut rng);
    let per_block = spread(tokens, blocks, &mut rng);
    let mut next = 0;
    let mut corpus = Vec::with_capacity(sequences);
    let mut lens = Vec::with_capacity(sequences);
    for m in per_seq {
        let mut segments = vec![Segment::Code("x = ".into())];
        let mut l = Vec::with_capacity(m);
        for _ in 0..m {
            let n = per_block[next];
            next += 1;
            segments.push(Segment::Think(vec!["w"; n].join(" ")));
            segments.push(Segment::Code("1\n".into()));
            l.push(n);
        }
        corpus.push(MixedSequence::from_parts(Some("plan".into()), segments, &scheme));
        lens.push(l);
    }
    (corpus, lens)
}

/// Paired traces: the enabled run has inline blocks; the disabled run has
/// the same code tokens without them. Disabled entropies equal the enabled
/// ones plus `shift` for the first `shifted_fraction` of pairs and minus
/// `shift` for the rest.
pub fn paired_entropy_corpus(
    pairs: usize,
    shift: f64,
    shifted_fraction: f64,
    seed: u64,
) -> Vec<(GenerationTrace, GenerationTrace)> {
    let mut rng = rng(seed);
    let positive_pairs = (pairs as f64 * shifted_fraction).round() as usize;
    (0..pairs)
        .map(|p| {
            let sign = if p < positive_pairs { 1.0 } else { -1.0 };
            let mut en_tokens = vec![TraceToken::new("plan", TokenBlock::Upfront)];
            let mut en_h = vec![0.5];
            let mut dis_tokens = en_tokens.clone();
            let mut dis_h = en_h.clone();
            let code_len = rng.random_range(15..60);
            for i in 0..code_len {
                if i > 0 && rng.random_bool(0.15) {
                    for _ in 0..rng.random_range(1..5) {
                        en_tokens.push(TraceToken::new("why", TokenBlock::Ta));
                        en_h.push(rng.random_range(0.0..3.0));
                    }
                }
                let text = format!("t{}_", rng.random_range(0..50));
                let h: f64 = rng.random_range(0.5..2.5);
                en_tokens.push(TraceToken::new(text.clone(), TokenBlock::Code));
                en_h.push(h);
                dis_tokens.push(TraceToken::new(text, TokenBlock::Code));
                dis_h.push(h + sign * shift);
            }
            let id = format!("pair-{p}");
            (
                GenerationTrace { pairing_id: id.clone(), tokens: en_tokens, entropies: Some(en_h), top_k: None },
                GenerationTrace { pairing_id: id, tokens: dis_tokens, entropies: Some(dis_h), top_k: None },
            )
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct SandboxFixture {
    pub name: &'static str,
    /// Raw model output; code is extracted before execution.
    pub raw: String,
    pub tests: Vec<TestCase>,
    pub profile: &'static str,
    pub expected: VerdictStatus,
}

impl SandboxFixture {
    /// Extracts the code and judges it, returning one status per test.
    pub fn run(&self, sandbox: &Sandbox) -> Result<Vec<VerdictStatus>, SandboxError> {
        let code = candidate_code(&self.raw, &DelimiterScheme::text_tags());
        Ok(sandbox.run_tests(&code, &self.tests, self.profile)?.into_iter().map(|v| v.status).collect())
    }
}

/// Twelve candidate programs spanning the verdict taxonomy.
pub fn sandbox_fixtures() -> Vec<SandboxFixture> {
    let double = || vec![TestCase::io("3\n", "6\n"), TestCase::io("10\n", "20")];
    let short = |t: TestCase| t.with_limits(1_000, 256 * 1024 * 1024);
    let fx = |name, raw: &str, tests, profile, expected| SandboxFixture {
        name,
        raw: raw.to_string(),
        tests,
        profile,
        expected,
    };
    vec![
        fx("correct_io", "print(int(input()) * 2)\n", double(), "python3", VerdictStatus::Pass),
        fx(
            "correct_assert",
            "def add(a, b):\n    return a + b\n",
            vec![TestCase::assert("assert add(2, 3) == 5\nassert add(-1, 1) == 0")],
            "python3",
            VerdictStatus::Pass,
        ),
        fx("wrong_answer", "print(int(input()) * 3)\n", double(), "python3", VerdictStatus::WrongOutput),
        fx(
            "failed_assert",
            "def add(a, b):\n    return a - b\n",
            vec![TestCase::assert("assert add(2, 3) == 5")],
            "python3",
            VerdictStatus::RuntimeError,
        ),
        fx("runtime_exception", "x = int(input())\nprint(x // 0)\n", double(), "python3", VerdictStatus::RuntimeError),
        fx(
            "infinite_loop",
            "while True:\n    pass\n",
            vec![short(TestCase::io("", "")).with_limits(300, 256 * 1024 * 1024)],
            "python3",
            VerdictStatus::Timeout,
        ),
        fx(
            "sleep_forever",
            "import time\ntime.sleep(60)\n",
            vec![TestCase::io("", "").with_limits(300, 256 * 1024 * 1024)],
            "python3",
            VerdictStatus::Timeout,
        ),
        fx(
            "memory_hog",
            "blocks = []\nwhile True:\n    blocks.append(bytearray(16 * 1024 * 1024))\n",
            vec![TestCase::io("", "").with_limits(5_000, 128 * 1024 * 1024)],
            "python3",
            VerdictStatus::MemoryExceeded,
        ),
        fx(
            "syntax_error_strict",
            "def f(:\n    return 1\nprint(1)\n",
            vec![TestCase::io("", "1"), TestCase::io("", "1")],
            "python3-strict",
            VerdictStatus::CompileError,
        ),
        fx(
            "unterminated_string_strict",
            "print('abc)\n",
            vec![TestCase::io("", "abc")],
            "python3-strict",
            VerdictStatus::CompileError,
        ),
        fx(
            "mid_expression_block_stripped",
            "<think>Double the input.</think>n = int(input())\nprint(n * <thinkanywhere>multiply by two, not add</thinkanywhere>2)\n",
            double(),
            "python3",
            VerdictStatus::Pass,
        ),
        fx(
            "block_inside_call_args",
            "<think>Sum a list.</think>def total(xs):\n    return sum(<thinkanywhere>builtin sum handles empty lists</thinkanywhere>xs)\n",
            vec![TestCase::assert("assert total([1, 2, 3]) == 6\nassert total([]) == 0")],
            "python3",
            VerdictStatus::Pass,
        ),
    ]
}

/// One cell of the structure x correctness reward matrix.
#[derive(Debug, Clone)]
pub struct RewardCase {
    pub raw: String,
    pub tests: Vec<TestCase>,
    pub r_struct: u8,
    pub r_correct: u8,
}

/// The four combinations of well-formed structure and passing tests.
pub fn reward_matrix() -> Vec<RewardCase> {
    let tests = || vec![TestCase::assert("assert add(2, 3) == 5\nassert add(-4, 4) == 0")];
    let case = |raw: &str, r_struct, r_correct| RewardCase { raw: raw.into(), tests: tests(), r_struct, r_correct };
    vec![
        case("def add(a, b):\n    return a * b\n", 0, 0),
        case("<think>Sum.</think>def add(a, b):\n    return <thinkanywhere>product?</thinkanywhere>a * b\n", 1, 0),
        case("def add(a, b):\n    return a + b\n", 0, 1),
        case("<think>Sum.</think>def add(a, b):\n    return <thinkanywhere>plain sum</thinkanywhere>a + b\n", 1, 1),
    ]
}
