//! `inlinethink`: parse, validate and score mixed think/code output, build
//! cold-start datasets, audit GRPO batches, analyze traces and run the
//! reward service.

mod backend;

use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use inlinethink_core::analysis::{
    self, entropy_diff_corpus, pair_traces, pass_at_k, read_traces, summarize_diffs, syntax_histogram,
    token_cost_breakdown, GenerationTrace, SyntaxProfile, TokenBlock,
};
use inlinethink_core::coldstart::{
    annotate_correctness, build_dataset, write_dataset, BuildConfig, BuildOutput, ColdStartError, GenerationBackend,
    ScriptedBackend,
};
use inlinethink_core::embed::{verify_table, with_triggers, EmbeddingTable, InitConfig};
use inlinethink_core::grpo::{grpo_objective_batch, read_groups, GrpoConfig, RatioLevel};
use inlinethink_core::interleave::{
    approx_token_len, block_stats, check_raw, extract_code, parse_mixed_sequence, parse_token_stream,
    strip_blocks_lenient, DelimiterScheme, MixedSequence, SchemeSpec, Segment, TokenPiece, TraceRecord,
};
use inlinethink_core::par;
use inlinethink_core::reward::RewardConfig;
use inlinethink_core::sandbox::{Sandbox, SandboxConfig, TestSuite};
use inlinethink_service::{score_request, AppState, ConfigOverrides, ScoringRequest, ServiceConfig};
use serde::{Deserialize, Serialize};
use serde_json::json;

#[derive(Parser)]
#[command(name = "inlinethink", version, about = "Tools for interleaved think/code generation")]
struct Cli {
    /// Delimiter scheme: `text` or a JSON scheme file (`{"mode": "text"|"ids", ...}`).
    #[arg(long, global = true)]
    scheme: Option<String>,
    /// JSON configuration file with optional `reward`, `grpo`, `embed`,
    /// `build` and `syntax` sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Threads for data-parallel work.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse one output into upfront thinking and code/inline-block segments.
    Parse {
        input: PathBuf,
        /// Input is a JSON array of `{"id", "text"}` token pieces.
        #[arg(long)]
        tokens: bool,
    },
    /// Report structural violations; exits 1 when any are found.
    Validate {
        input: PathBuf,
        /// Input is JSON lines of `{"raw", "scheme"?}` records.
        #[arg(long)]
        jsonl: bool,
    },
    /// Print the executable code with all thinking removed.
    Extract {
        input: PathBuf,
        /// Strip blocks best-effort even when the output does not parse.
        #[arg(long)]
        lenient: bool,
    },
    /// Score one output against a test suite.
    Score {
        completion: PathBuf,
        /// Test suite JSON (`{"tests": [...]}`).
        #[arg(long)]
        tests: Option<PathBuf>,
        #[arg(long)]
        structure_only: bool,
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Inline-block frequency and length over a corpus of records.
    Stats { input: PathBuf },
    /// Build a cold-start dataset from requirements, one per line.
    BuildColdstart {
        #[arg(long)]
        requirements: PathBuf,
        #[arg(long)]
        target: usize,
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long)]
        parallelism: Option<usize>,
        /// Chat completions URL of an OpenAI-compatible server. The bearer
        /// token is read from TA_BACKEND_TOKEN.
        #[arg(long, required_unless_present = "mock_malformed_rate", requires = "model")]
        endpoint: Option<String>,
        #[arg(long)]
        model: Option<String>,
        #[arg(long, default_value_t = 120)]
        timeout_secs: u64,
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        max_tokens: Option<u32>,
        /// Use the scripted offline backend with this malformed rate.
        #[arg(long, conflicts_with = "endpoint")]
        mock_malformed_rate: Option<f64>,
        #[arg(long, default_value_t = 0)]
        mock_seed: u64,
        /// Optional test suite: records per-sample correctness without filtering.
        #[arg(long)]
        tests: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Add trigger-token embeddings to a text embedding table.
    InitEmbeddings {
        #[arg(long)]
        table: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recompute advantages and the clipped objective for rollout groups.
    GrpoAudit {
        input: PathBuf,
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long, value_enum)]
        ratio_level: Option<Level>,
    },
    /// Entropy differences at inline-block onsets between paired runs.
    AnalyzeEntropy {
        #[arg(long)]
        enabled: PathBuf,
        #[arg(long)]
        disabled: PathBuf,
        #[arg(long, default_value_t = 10)]
        window: usize,
        #[arg(long, default_value_t = 20)]
        bins: usize,
        /// Write every per-position diff here as JSON lines.
        #[arg(long)]
        diffs_out: Option<PathBuf>,
    },
    /// Syntactic categories of inline-block onsets.
    AnalyzeSyntax {
        input: PathBuf,
        #[arg(long)]
        grammar: Option<String>,
        #[arg(long, default_value_t = 5)]
        top: usize,
    },
    /// Unbiased pass@k, for one (n, c) or averaged over a JSON-lines file of them.
    Passk {
        #[arg(long, required_unless_present = "input")]
        n: Option<u64>,
        #[arg(long, required_unless_present = "input")]
        c: Option<u64>,
        #[arg(long, value_delimiter = ',', required = true)]
        k: Vec<u64>,
        #[arg(long, conflicts_with_all = ["n", "c"])]
        input: Option<PathBuf>,
    },
    /// Mean upfront, inline and code token counts per trace.
    TokenCost {
        input: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Run the reward service.
    Serve {
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long, default_value_t = 64)]
        queue_depth: usize,
        #[arg(long, default_value_t = 256)]
        batch_cap: usize,
        /// File holding the shared secret clients must send.
        #[arg(long)]
        secret_file: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Level {
    Token,
    Sequence,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    reward: RewardConfig,
    grpo: GrpoConfig,
    embed: InitConfig,
    build: BuildConfig,
    syntax: SyntaxProfile,
}

/// Resolved settings shared by all subcommands.
struct Settings {
    cfg: FileConfig,
    scheme: DelimiterScheme,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        // A closed pipe downstream (`| head`) is not a failure.
        Err(e) if e.downcast_ref::<io::Error>().is_some_and(|io| io.kind() == io::ErrorKind::BrokenPipe) => {
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn settings(cli: &Cli) -> Result<Settings> {
    let mut cfg: FileConfig = match &cli.config {
        Some(p) => serde_json::from_str(&read_text(p)?).with_context(|| format!("config {}", p.display()))?,
        None => FileConfig::default(),
    };
    let scheme = match cli.scheme.as_deref() {
        None => cfg.reward.scheme.clone(),
        Some("text") => DelimiterScheme::text_tags(),
        Some(path) => {
            let spec: SchemeSpec =
                serde_json::from_str(&read_text(Path::new(path))?).with_context(|| format!("scheme {path}"))?;
            spec.to_scheme()
        }
    };
    scheme.validate().context("delimiter scheme")?;
    cfg.reward.scheme = scheme.clone();
    cfg.build.scheme = scheme.clone();
    Ok(Settings { cfg, scheme })
}

fn run(cli: Cli) -> Result<ExitCode> {
    if let Some(j) = cli.jobs {
        par::set_threads(j).map_err(anyhow::Error::msg)?;
    }
    let mut s = settings(&cli)?;
    match cli.command {
        Command::Parse { input, tokens } => {
            let seq = if tokens {
                let pieces: Vec<TokenPiece> = serde_json::from_str(&read_text(&input)?)?;
                parse_token_stream(&pieces, &s.scheme)?
            } else {
                parse_mixed_sequence(&read_text(&input)?, &s.scheme)?
            };
            print_json(&json!({ "sequence": seq, "ta_onsets": seq.ta_onsets() }))?;
        }
        Command::Validate { input, jsonl } => {
            let mut clean = true;
            if jsonl {
                for (i, rec) in read_records(&input)?.into_iter().enumerate() {
                    let scheme = record_scheme(&rec, &s.scheme);
                    let (_, report) = check_raw(&rec.raw, &scheme);
                    clean &= report.is_clean();
                    emit(json!({ "line": i + 1, "report": report }))?;
                }
            } else {
                let (_, report) = check_raw(&read_text(&input)?, &s.scheme);
                clean = report.is_clean();
                print_json(&report)?;
            }
            return Ok(if clean { ExitCode::SUCCESS } else { ExitCode::from(1) });
        }
        Command::Extract { input, lenient } => {
            let raw = read_text(&input)?;
            let code = if lenient {
                strip_blocks_lenient(&raw, &s.scheme)
            } else {
                extract_code(&parse_mixed_sequence(&raw, &s.scheme)?)
            };
            io::stdout().write_all(code.as_bytes())?;
        }
        Command::Score { completion, tests, structure_only, alpha } => {
            let tests = match &tests {
                Some(p) => serde_json::from_str::<TestSuite>(&read_text(p)?)?.into_cases(),
                None if structure_only => Vec::new(),
                None => bail!("--tests is required unless --structure-only is set"),
            };
            let req = ScoringRequest {
                id: completion.display().to_string(),
                prompt: String::new(),
                completion: read_text(&completion)?,
                tests,
                config: ConfigOverrides { alpha, strict_code_validity: None },
                structure_only,
            };
            let sandbox = Sandbox::new(SandboxConfig::default());
            print_json(&score_request(&req, &s.cfg.reward, &sandbox)?)?;
        }
        Command::Stats { input } => {
            let records = read_records(&input)?;
            let mut corpus = Vec::with_capacity(records.len());
            let mut lens = Vec::with_capacity(records.len());
            for (i, rec) in records.iter().enumerate() {
                let seq = parse_mixed_sequence(&rec.raw, &record_scheme(rec, &s.scheme))
                    .with_context(|| format!("record {}", i + 1))?;
                lens.push(rec.token_lens.clone().unwrap_or_else(|| seq.think_blocks().map(approx_token_len).collect()));
                corpus.push(seq);
            }
            let stats = block_stats(&corpus, Some(&lens))?;
            print_json(&json!({ "sequences": corpus.len(), "avg_freq": stats.avg_freq, "avg_len": stats.avg_len }))?;
        }
        Command::BuildColdstart {
            requirements,
            target,
            budget,
            parallelism,
            endpoint,
            model,
            timeout_secs,
            temperature,
            max_tokens,
            mock_malformed_rate,
            mock_seed,
            tests,
            out,
            report,
        } => {
            let reqs: Vec<String> =
                read_text(&requirements)?.lines().map(str::trim).filter(|l| !l.is_empty()).map(str::to_owned).collect();
            let mut cfg = s.cfg.build.clone();
            cfg.target_count = target;
            cfg.budget = budget.or(cfg.budget);
            cfg.parallelism = parallelism.unwrap_or(cfg.parallelism);
            cfg.params.temperature = temperature.unwrap_or(cfg.params.temperature);
            cfg.params.max_tokens = max_tokens.unwrap_or(cfg.params.max_tokens);
            let backend: Box<dyn GenerationBackend> = match (endpoint, mock_malformed_rate) {
                (Some(url), _) => Box::new(backend::ChatBackend::new(
                    url,
                    model.unwrap_or_default(),
                    Duration::from_secs(timeout_secs),
                )?),
                (None, Some(rate)) => Box::new(ScriptedBackend::Random { seed: mock_seed, malformed_rate: rate }),
                (None, None) => bail!("either --endpoint or --mock-malformed-rate is required"),
            };
            let (mut output, exhausted) = match build_dataset(&reqs, backend.as_ref(), &cfg) {
                Ok(o) => (o, false),
                Err(ColdStartError::BackendExhausted(partial)) => (*partial, true),
                Err(e) => return Err(e.into()),
            };
            if let Some(p) = &tests {
                let suite: TestSuite = serde_json::from_str(&read_text(p)?)?;
                let sandbox = Sandbox::new(SandboxConfig::default());
                annotate_correctness(&mut output.samples, &suite.into_cases(), &s.cfg.reward, &sandbox)?;
            }
            write_build(&output, &out, report.as_deref())?;
            eprintln!(
                "kept {} of {} calls ({} dropped) into {}",
                output.report.kept,
                output.report.calls,
                output.report.dropped_total(),
                out.display()
            );
            if exhausted {
                eprintln!("budget of {} calls spent before reaching {} samples", output.report.budget, target);
                return Ok(ExitCode::from(1));
            }
        }
        Command::InitEmbeddings { table, out } => {
            let t = EmbeddingTable::parse(&read_text(&table)?)?;
            let extended = with_triggers(&t, &s.cfg.embed)?;
            let mut required = s.cfg.embed.required_sources();
            required.extend([s.cfg.embed.open_name.as_str(), s.cfg.embed.close_name.as_str()]);
            let report = verify_table(&extended, t.dim, &required);
            fs::write(&out, extended.to_text()).with_context(|| format!("writing {}", out.display()))?;
            print_json(&report)?;
            if !report.is_clean() {
                return Ok(ExitCode::from(1));
            }
        }
        Command::GrpoAudit { input, epsilon, beta, ratio_level } => {
            let cfg = &mut s.cfg.grpo;
            cfg.epsilon = epsilon.unwrap_or(cfg.epsilon);
            cfg.beta = beta.unwrap_or(cfg.beta);
            if let Some(l) = ratio_level {
                cfg.ratio_level = match l {
                    Level::Token => RatioLevel::Token,
                    Level::Sequence => RatioLevel::Sequence,
                };
            }
            let groups = read_groups(open(&input)?)?;
            let mut ok = true;
            for (g, result) in groups.iter().zip(grpo_objective_batch(&groups, cfg)) {
                let line = match result {
                    Ok(r) => json!({ "prompt_id": g.prompt_id, "report": r }),
                    Err(e) => {
                        ok = false;
                        json!({ "prompt_id": g.prompt_id, "error": e.to_string() })
                    }
                };
                emit(line)?;
            }
            return Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(1) });
        }
        Command::AnalyzeEntropy { enabled, disabled, window, bins, diffs_out } => {
            let (pairs, unpaired) = pair_traces(read_traces(open(&enabled)?)?, read_traces(open(&disabled)?)?);
            let mut diffs = Vec::new();
            let mut failed = Vec::new();
            for ((e, _), result) in pairs.iter().zip(entropy_diff_corpus(&pairs, window)) {
                match result {
                    Ok(d) => diffs.extend(d.into_iter().map(|d| (e.pairing_id.clone(), d))),
                    Err(err) => failed.push(json!({ "pairing_id": e.pairing_id, "error": err.to_string() })),
                }
            }
            if let Some(p) = &diffs_out {
                let mut w = BufWriter::new(File::create(p)?);
                for (id, d) in &diffs {
                    writeln!(w, "{}", json!({ "pairing_id": id, "diff": d }))?;
                }
                w.flush()?;
            }
            let flat: Vec<_> = diffs.into_iter().map(|(_, d)| d).collect();
            let summary = summarize_diffs(&flat, bins);
            print_json(&json!({
                "pairs": pairs.len(),
                "unpaired": unpaired,
                "failed": failed,
                "predominantly_positive": summary.predominantly_positive(),
                "summary": summary,
            }))?;
        }
        Command::AnalyzeSyntax { input, grammar, top } => {
            let mut profile = s.cfg.syntax.clone();
            if let Some(g) = grammar {
                profile.grammar_id = g;
            }
            let corpus: Vec<(MixedSequence, SyntaxProfile)> =
                read_sequences(&input, &s.scheme)?.into_iter().map(|seq| (seq, profile.clone())).collect();
            let hist = syntax_histogram(&corpus);
            if hist.skipped > 0 && hist.total == 0 {
                bail!(analysis::AnalysisError::GrammarUnavailable(profile.grammar_id));
            }
            print_json(
                &json!({ "total": hist.total, "skipped": hist.skipped, "top": hist.top(top), "ranked": hist.ranked }),
            )?;
        }
        Command::Passk { n, c, k, input } => {
            let problems: Vec<Problem> = match (&input, n, c) {
                (Some(p), _, _) => read_jsonl(p)?,
                (None, Some(n), Some(c)) => vec![Problem { n, c }],
                _ => bail!("give --n and --c, or --input"),
            };
            let mut out = serde_json::Map::new();
            for k in k {
                let mut sum = 0.0;
                for p in &problems {
                    sum += pass_at_k(p.n, p.c, k)?;
                }
                out.insert(format!("pass@{k}"), json!(sum / problems.len().max(1) as f64));
            }
            print_json(&out)?;
        }
        Command::TokenCost { input, json } => {
            let cost = token_cost_breakdown(&read_traces(open(&input)?)?)?;
            if json {
                print_json(&cost)?;
            } else {
                emit(cost)?;
            }
        }
        Command::Serve { host, port, workers, queue_depth, batch_cap, secret_file } => {
            let secret = match &secret_file {
                Some(p) => Some(read_text(p)?.trim().to_string()),
                None => None,
            };
            let cfg = ServiceConfig {
                workers: workers.unwrap_or(ServiceConfig::default().workers),
                queue_depth,
                batch_cap,
                reward: s.cfg.reward.clone(),
                secret,
                ..ServiceConfig::default()
            }
            .with_env();
            let state = AppState::new(cfg)?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async {
                let listener = tokio::net::TcpListener::bind((host.as_str(), port)).await?;
                eprintln!("listening on {}", listener.local_addr()?);
                inlinethink_service::serve(listener, state).await
            })?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(Deserialize)]
struct Problem {
    n: u64,
    c: u64,
}

fn read_text(path: &Path) -> Result<String> {
    let mut s = String::new();
    if path.as_os_str() == "-" {
        io::stdin().read_to_string(&mut s)?;
    } else {
        File::open(path).with_context(|| format!("opening {}", path.display()))?.read_to_string(&mut s)?;
    }
    Ok(s)
}

fn open(path: &Path) -> Result<Box<dyn BufRead>> {
    if path.as_os_str() == "-" {
        return Ok(Box::new(BufReader::new(io::stdin())));
    }
    Ok(Box::new(BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?)))
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?);
        }
    }
    Ok(out)
}

fn read_records(path: &Path) -> Result<Vec<TraceRecord>> {
    read_jsonl(path)
}

fn record_scheme(rec: &TraceRecord, default: &DelimiterScheme) -> DelimiterScheme {
    rec.scheme.as_ref().map_or_else(|| default.clone(), SchemeSpec::to_scheme)
}

/// Either a `{"raw"}` record or a labeled generation trace per line.
#[derive(Deserialize)]
#[serde(untagged)]
enum SequenceLine {
    Record(TraceRecord),
    Trace(GenerationTrace),
}

fn read_sequences(path: &Path, scheme: &DelimiterScheme) -> Result<Vec<MixedSequence>> {
    read_jsonl::<SequenceLine>(path)?
        .into_iter()
        .enumerate()
        .map(|(i, line)| match line {
            SequenceLine::Record(rec) => parse_mixed_sequence(&rec.raw, &record_scheme(&rec, scheme))
                .with_context(|| format!("{}:{}", path.display(), i + 1)),
            SequenceLine::Trace(t) => Ok(sequence_from_trace(&t, scheme)),
        })
        .collect()
}

/// Rebuilds a sequence from block-labeled tokens.
fn sequence_from_trace(trace: &GenerationTrace, scheme: &DelimiterScheme) -> MixedSequence {
    let mut upfront: Option<String> = None;
    let mut segments: Vec<Segment> = Vec::new();
    for t in &trace.tokens {
        match (t.block, segments.last_mut()) {
            (TokenBlock::Upfront, _) => upfront.get_or_insert_with(String::new).push_str(&t.text),
            (TokenBlock::Code, Some(Segment::Code(s))) | (TokenBlock::Ta, Some(Segment::Think(s))) => {
                s.push_str(&t.text)
            }
            (TokenBlock::Code, _) => segments.push(Segment::Code(t.text.clone())),
            (TokenBlock::Ta, _) => segments.push(Segment::Think(t.text.clone())),
        }
    }
    MixedSequence::from_parts(upfront, segments, scheme)
}

fn write_build(output: &BuildOutput, out: &Path, report: Option<&Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(out).with_context(|| format!("creating {}", out.display()))?);
    write_dataset(&output.samples, &mut w)?;
    w.flush()?;
    if let Some(p) = report {
        fs::write(p, serde_json::to_string_pretty(&output.report)?)?;
    }
    Ok(())
}

fn print_json(value: &impl Serialize) -> Result<()> {
    emit(serde_json::to_string_pretty(value)?)
}

fn emit(line: impl std::fmt::Display) -> Result<()> {
    writeln!(io::stdout().lock(), "{line}")?;
    Ok(())
}
