//! Child-process execution of candidate code against test cases.
//!
//! Every test runs in a fresh temporary directory in its own process group
//! with address-space, CPU-time and file-size limits. The wall-clock limit is
//! enforced by killing the whole group. A bounded [`WorkerPool`] caps the
//! number of live candidate processes across all callers.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::os::unix::process::{CommandExt, ExitStatusExt};
use std::path::Path;
use std::process::{Command, ExitStatus, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_TIME_LIMIT_MS: u64 = 5_000;
pub const DEFAULT_MEMORY_LIMIT_BYTES: u64 = 256 * 1024 * 1024;

const EXCERPT_BYTES: usize = 2048;
const OUTPUT_CAP_BYTES: usize = 16 * 1024 * 1024;
const FILE_SIZE_LIMIT_BYTES: u64 = 64 * 1024 * 1024;

const PY_SYNTAX_CHECK: &str = "import ast,sys\nast.parse(open(sys.argv[1], encoding='utf-8').read(), sys.argv[1])";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TestKind {
    Io { stdin: String, expected_stdout: String },
    Assert { check_script: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestCase {
    #[serde(flatten)]
    pub kind: TestKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time_limit_ms: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub memory_limit_bytes: Option<u64>,
}

impl TestCase {
    pub fn io(stdin: impl Into<String>, expected_stdout: impl Into<String>) -> Self {
        Self {
            kind: TestKind::Io { stdin: stdin.into(), expected_stdout: expected_stdout.into() },
            time_limit_ms: None,
            memory_limit_bytes: None,
        }
    }

    pub fn assert(check_script: impl Into<String>) -> Self {
        Self {
            kind: TestKind::Assert { check_script: check_script.into() },
            time_limit_ms: None,
            memory_limit_bytes: None,
        }
    }

    pub fn with_limits(mut self, time_limit_ms: u64, memory_limit_bytes: u64) -> Self {
        self.time_limit_ms = Some(time_limit_ms);
        self.memory_limit_bytes = Some(memory_limit_bytes);
        self
    }

    pub fn time_limit(&self) -> Duration {
        Duration::from_millis(self.time_limit_ms.unwrap_or(DEFAULT_TIME_LIMIT_MS))
    }

    pub fn memory_limit(&self) -> u64 {
        self.memory_limit_bytes.unwrap_or(DEFAULT_MEMORY_LIMIT_BYTES)
    }

    fn validate(&self) -> Result<(), SandboxError> {
        if self.time_limit_ms == Some(0) || self.memory_limit_bytes == Some(0) {
            return Err(SandboxError::InvalidLimits);
        }
        Ok(())
    }
}

/// A test suite file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestSuite {
    pub tests: Vec<TestCase>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time_limit_ms: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub memory_limit_bytes: Option<u64>,
}

impl TestSuite {
    /// Tests with suite-level limits applied where a test sets none.
    pub fn into_cases(self) -> Vec<TestCase> {
        let (t, m) = (self.time_limit_ms, self.memory_limit_bytes);
        self.tests
            .into_iter()
            .map(|mut tc| {
                tc.time_limit_ms = tc.time_limit_ms.or(t);
                tc.memory_limit_bytes = tc.memory_limit_bytes.or(m);
                tc
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VerdictStatus {
    Pass,
    WrongOutput,
    RuntimeError,
    Timeout,
    MemoryExceeded,
    CompileError,
}

impl VerdictStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            VerdictStatus::Pass => "Pass",
            VerdictStatus::WrongOutput => "WrongOutput",
            VerdictStatus::RuntimeError => "RuntimeError",
            VerdictStatus::Timeout => "Timeout",
            VerdictStatus::MemoryExceeded => "MemoryExceeded",
            VerdictStatus::CompileError => "CompileError",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestVerdict {
    pub status: VerdictStatus,
    pub stdout_excerpt: String,
    pub stderr_excerpt: String,
    pub wall_time_ms: u64,
}

impl TestVerdict {
    pub fn passed(&self) -> bool {
        self.status == VerdictStatus::Pass
    }
}

#[derive(Debug, Error)]
pub enum SandboxError {
    #[error("language profile {0:?} is not configured")]
    ProfileNotConfigured(String),
    #[error("failed to launch candidate process: {0}")]
    SandboxSpawnFailure(#[source] std::io::Error),
    #[error("test list is empty")]
    NoTests,
    #[error("time and memory limits must be positive")]
    InvalidLimits,
}

/// Command templates for one language. `{src}` expands to the source file
/// path and `{dir}` to the working directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LanguageProfile {
    pub name: String,
    pub source_file: String,
    pub run: Vec<String>,
    /// Run once before the tests; failure yields `CompileError` for every test.
    #[serde(default)]
    pub compile: Option<Vec<String>>,
    /// Syntax-only check used for strict code validity.
    #[serde(default)]
    pub check: Option<Vec<String>>,
}

impl LanguageProfile {
    pub fn python3() -> Self {
        Self {
            name: "python3".into(),
            source_file: "main.py".into(),
            run: vec!["python3".into(), "{src}".into()],
            compile: None,
            check: Some(vec!["python3".into(), "-c".into(), PY_SYNTAX_CHECK.into(), "{src}".into()]),
        }
    }

    /// Python with a parse step before any test runs.
    pub fn python3_strict() -> Self {
        let check = vec!["python3".into(), "-c".into(), PY_SYNTAX_CHECK.into(), "{src}".into()];
        Self { name: "python3-strict".into(), compile: Some(check.clone()), check: Some(check), ..Self::python3() }
    }

    /// Generic profile around an arbitrary run template.
    pub fn command(name: impl Into<String>, source_file: impl Into<String>, run: Vec<String>) -> Self {
        Self { name: name.into(), source_file: source_file.into(), run, compile: None, check: None }
    }

    fn expand(template: &[String], src: &Path, dir: &Path) -> Vec<String> {
        template
            .iter()
            .map(|a| a.replace("{src}", &src.to_string_lossy()).replace("{dir}", &dir.to_string_lossy()))
            .collect()
    }
}

/// Counting semaphore bounding concurrent candidate processes.
#[derive(Debug)]
pub struct WorkerPool {
    capacity: usize,
    busy: Mutex<usize>,
    freed: Condvar,
    in_use: AtomicUsize,
    peak: AtomicUsize,
}

pub struct Permit<'a> {
    pool: &'a WorkerPool,
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut busy = self.pool.busy.lock().unwrap_or_else(|e| e.into_inner());
        *busy -= 1;
        self.pool.in_use.store(*busy, Ordering::Release);
        self.pool.freed.notify_one();
    }
}

impl WorkerPool {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            busy: Mutex::new(0),
            freed: Condvar::new(),
            in_use: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
        }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut busy = self.busy.lock().unwrap_or_else(|e| e.into_inner());
        while *busy >= self.capacity {
            busy = self.freed.wait(busy).unwrap_or_else(|e| e.into_inner());
        }
        *busy += 1;
        self.in_use.store(*busy, Ordering::Release);
        self.peak.fetch_max(*busy, Ordering::Relaxed);
        Permit { pool: self }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Free slots right now. Never blocks on running work.
    pub fn free(&self) -> usize {
        self.capacity - self.in_use.load(Ordering::Acquire)
    }

    /// Highest number of simultaneously held permits observed.
    pub fn peak_in_flight(&self) -> usize {
        self.peak.load(Ordering::Relaxed)
    }
}

#[derive(Debug, Clone)]
pub struct SandboxConfig {
    pub workers: usize,
    /// Try to detach candidates from the network namespace. Best effort: needs
    /// privileges the host may not grant.
    pub isolate_network: bool,
}

impl Default for SandboxConfig {
    fn default() -> Self {
        Self { workers: thread::available_parallelism().map_or(4, |n| n.get()), isolate_network: true }
    }
}

#[derive(Debug)]
pub struct Sandbox {
    profiles: HashMap<String, LanguageProfile>,
    pool: WorkerPool,
    isolate_network: bool,
}

impl Default for Sandbox {
    fn default() -> Self {
        Self::new(SandboxConfig::default())
    }
}

struct RunOutput {
    status: ExitStatus,
    stdout: Vec<u8>,
    stdout_truncated: bool,
    stderr: Vec<u8>,
    timed_out: bool,
    wall: Duration,
}

impl Sandbox {
    /// Sandbox with the built-in `python3` and `python3-strict` profiles.
    pub fn new(config: SandboxConfig) -> Self {
        let mut profiles = HashMap::new();
        for p in [LanguageProfile::python3(), LanguageProfile::python3_strict()] {
            profiles.insert(p.name.clone(), p);
        }
        Self { profiles, pool: WorkerPool::new(config.workers), isolate_network: config.isolate_network }
    }

    pub fn add_profile(&mut self, profile: LanguageProfile) {
        self.profiles.insert(profile.name.clone(), profile);
    }

    pub fn profile(&self, name: &str) -> Result<&LanguageProfile, SandboxError> {
        self.profiles.get(name).ok_or_else(|| SandboxError::ProfileNotConfigured(name.to_string()))
    }

    pub fn pool(&self) -> &WorkerPool {
        &self.pool
    }

    /// Runs `code` against every test, returning one verdict per test in order.
    pub fn run_tests(&self, code: &str, tests: &[TestCase], profile: &str) -> Result<Vec<TestVerdict>, SandboxError> {
        let profile = self.profile(profile)?;
        if tests.is_empty() {
            return Err(SandboxError::NoTests);
        }
        tests.iter().try_for_each(TestCase::validate)?;

        if let Some(compile) = &profile.compile {
            let limit = tests.iter().map(TestCase::time_limit).max().unwrap_or_default();
            let memory = tests.iter().map(TestCase::memory_limit).max().unwrap_or(DEFAULT_MEMORY_LIMIT_BYTES);
            let out = self.execute(profile, compile, code, "", limit, memory)?;
            if out.timed_out || !out.status.success() {
                let verdict = TestVerdict {
                    status: VerdictStatus::CompileError,
                    stdout_excerpt: excerpt(&out.stdout),
                    stderr_excerpt: excerpt(&out.stderr),
                    wall_time_ms: out.wall.as_millis() as u64,
                };
                return Ok(vec![verdict; tests.len()]);
            }
        }

        // Candidates mostly wait on child processes, so each test gets a plain
        // thread and the worker pool alone bounds how many run at once.
        thread::scope(|s| {
            let handles: Vec<_> = tests.iter().map(|test| s.spawn(move || self.run_one(profile, code, test))).collect();
            handles.into_iter().map(|h| h.join().expect("sandbox worker panicked")).collect()
        })
    }

    /// Syntax-only check through the profile's `check` template. `None` when
    /// the profile has no check configured.
    pub fn check_syntax(&self, code: &str, profile: &str) -> Result<Option<bool>, SandboxError> {
        let profile = self.profile(profile)?;
        let Some(check) = &profile.check else {
            return Ok(None);
        };
        let out = self.execute(
            profile,
            check,
            code,
            "",
            Duration::from_millis(DEFAULT_TIME_LIMIT_MS),
            DEFAULT_MEMORY_LIMIT_BYTES,
        )?;
        Ok(Some(!out.timed_out && out.status.success()))
    }

    fn run_one(&self, profile: &LanguageProfile, code: &str, test: &TestCase) -> Result<TestVerdict, SandboxError> {
        let (program, stdin) = match &test.kind {
            TestKind::Io { stdin, .. } => (code.to_string(), stdin.as_str()),
            TestKind::Assert { check_script } => (format!("{code}\n\n{check_script}\n"), ""),
        };
        let out = self.execute(profile, &profile.run, &program, stdin, test.time_limit(), test.memory_limit())?;
        let status = if out.timed_out || out.status.signal() == Some(libc::SIGXCPU) {
            VerdictStatus::Timeout
        } else if out.status.success() {
            match &test.kind {
                TestKind::Io { expected_stdout, .. } => {
                    let actual = String::from_utf8_lossy(&out.stdout);
                    if !out.stdout_truncated && compare_io(&actual, expected_stdout) {
                        VerdictStatus::Pass
                    } else {
                        VerdictStatus::WrongOutput
                    }
                }
                TestKind::Assert { .. } => VerdictStatus::Pass,
            }
        } else if looks_like_oom(&out.stderr) {
            VerdictStatus::MemoryExceeded
        } else {
            VerdictStatus::RuntimeError
        };
        Ok(TestVerdict {
            status,
            stdout_excerpt: excerpt(&out.stdout),
            stderr_excerpt: excerpt(&out.stderr),
            wall_time_ms: out.wall.as_millis() as u64,
        })
    }

    fn execute(
        &self,
        profile: &LanguageProfile,
        template: &[String],
        program: &str,
        stdin: &str,
        time_limit: Duration,
        memory_limit: u64,
    ) -> Result<RunOutput, SandboxError> {
        let dir =
            tempfile::Builder::new().prefix("inlinethink-run-").tempdir().map_err(SandboxError::SandboxSpawnFailure)?;
        let src = dir.path().join(&profile.source_file);
        std::fs::write(&src, program).map_err(SandboxError::SandboxSpawnFailure)?;
        let argv = LanguageProfile::expand(template, &src, dir.path());
        let (exe, args) = argv.split_first().ok_or_else(|| SandboxError::ProfileNotConfigured(profile.name.clone()))?;

        let mut cmd = Command::new(exe);
        cmd.args(args)
            .current_dir(dir.path())
            .env_clear()
            .env("PATH", std::env::var_os("PATH").unwrap_or_else(|| "/usr/bin:/bin".into()))
            .env("HOME", dir.path())
            .env("LANG", "C.UTF-8")
            .env("PYTHONDONTWRITEBYTECODE", "1")
            .env("PYTHONHASHSEED", "0")
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped());

        let cpu_secs = time_limit.as_secs() + 2;
        let isolate_network = self.isolate_network;
        // SAFETY: only async-signal-safe syscalls run between fork and exec.
        unsafe {
            cmd.pre_exec(move || {
                libc::setpgid(0, 0);
                set_limit(libc::RLIMIT_AS, memory_limit);
                set_limit(libc::RLIMIT_CPU, cpu_secs);
                set_limit(libc::RLIMIT_CORE, 0);
                set_limit(libc::RLIMIT_FSIZE, FILE_SIZE_LIMIT_BYTES);
                if isolate_network {
                    libc::unshare(libc::CLONE_NEWNET);
                }
                Ok(())
            });
        }

        let _permit = self.pool.acquire();
        let started = Instant::now();
        let mut child = cmd.spawn().map_err(SandboxError::SandboxSpawnFailure)?;
        let pgid = child.id() as libc::pid_t;

        let mut child_stdin = child.stdin.take();
        let input = stdin.as_bytes().to_vec();
        let writer = thread::spawn(move || {
            if let Some(pipe) = child_stdin.as_mut() {
                // The candidate may exit without reading its input.
                let _ = pipe.write_all(&input);
            }
        });
        let stdout = child.stdout.take().map(|p| thread::spawn(move || read_capped(p, OUTPUT_CAP_BYTES)));
        let stderr = child.stderr.take().map(|p| thread::spawn(move || read_capped(p, EXCERPT_BYTES * 4)));

        let mut timed_out = false;
        let mut backoff = Duration::from_micros(500);
        let status = loop {
            match child.try_wait() {
                Ok(Some(status)) => break status,
                Ok(None) => {}
                Err(e) => {
                    kill_group(pgid);
                    return Err(SandboxError::SandboxSpawnFailure(e));
                }
            }
            let elapsed = started.elapsed();
            if elapsed >= time_limit {
                timed_out = true;
                kill_group(pgid);
                break child.wait().map_err(SandboxError::SandboxSpawnFailure)?;
            }
            thread::sleep(backoff.min(time_limit - elapsed));
            backoff = (backoff * 2).min(Duration::from_millis(5));
        };
        let wall = started.elapsed();
        // Reap anything the candidate left behind so pipes close.
        kill_group(pgid);

        let _ = writer.join();
        let (stdout, stdout_truncated) = stdout.and_then(|h| h.join().ok()).unwrap_or_default();
        let (stderr, _) = stderr.and_then(|h| h.join().ok()).unwrap_or_default();
        Ok(RunOutput { status, stdout, stdout_truncated, stderr, timed_out, wall })
    }
}

fn set_limit(resource: libc::__rlimit_resource_t, value: u64) {
    let lim = libc::rlimit { rlim_cur: value as libc::rlim_t, rlim_max: value as libc::rlim_t };
    // SAFETY: plain syscall on a stack value.
    unsafe {
        libc::setrlimit(resource, &lim);
    }
}

fn kill_group(pgid: libc::pid_t) {
    // SAFETY: signals only the candidate's own process group.
    unsafe {
        libc::killpg(pgid, libc::SIGKILL);
    }
}

fn read_capped(mut pipe: impl Read, cap: usize) -> (Vec<u8>, bool) {
    let mut kept = Vec::new();
    let mut truncated = false;
    let mut buf = [0u8; 8192];
    loop {
        match pipe.read(&mut buf) {
            Ok(0) | Err(_) => break,
            Ok(n) => {
                let room = cap.saturating_sub(kept.len());
                if n > room {
                    truncated = true;
                }
                kept.extend_from_slice(&buf[..n.min(room)]);
            }
        }
    }
    (kept, truncated)
}

fn excerpt(bytes: &[u8]) -> String {
    String::from_utf8_lossy(&bytes[..bytes.len().min(EXCERPT_BYTES)]).into_owned()
}

fn looks_like_oom(stderr: &[u8]) -> bool {
    let text = String::from_utf8_lossy(stderr);
    ["MemoryError", "Cannot allocate memory", "out of memory", "bad_alloc", "memory allocation of"]
        .iter()
        .any(|m| text.contains(m))
}

/// Output comparison ignoring trailing whitespace on each line and trailing
/// empty lines.
pub fn compare_io(actual: &str, expected: &str) -> bool {
    fn normalized(text: &str) -> Vec<&str> {
        let mut lines: Vec<&str> = text.lines().map(str::trim_end).collect();
        while lines.last().is_some_and(|l| l.is_empty()) {
            lines.pop();
        }
        lines
    }
    normalized(actual) == normalized(expected)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compare_io_rules() {
        assert!(compare_io("6\n", "6"));
        assert!(compare_io("a \nb", "a\nb"));
        assert!(!compare_io("a\nb", "a\nc"));
        assert!(compare_io("x\r\n\n\n", "x"));
        assert!(!compare_io(" x", "x"));
        assert!(compare_io("", "\n"));
    }

    #[test]
    fn suite_limits_fill_unset_tests() {
        let suite: TestSuite = serde_json::from_str(
            r#"{"tests":[{"kind":"io","stdin":"1","expected_stdout":"1"},
                         {"kind":"assert","check_script":"assert True","time_limit_ms":50}],
                "time_limit_ms":900}"#,
        )
        .unwrap();
        let cases = suite.into_cases();
        assert_eq!(cases[0].time_limit_ms, Some(900));
        assert_eq!(cases[1].time_limit_ms, Some(50));
        assert_eq!(cases[0].memory_limit(), DEFAULT_MEMORY_LIMIT_BYTES);
    }

    #[test]
    fn pool_bounds_permits() {
        let pool = WorkerPool::new(2);
        let a = pool.acquire();
        let _b = pool.acquire();
        assert_eq!(pool.free(), 0);
        drop(a);
        assert_eq!(pool.free(), 1);
        assert_eq!(pool.peak_in_flight(), 2);
    }

    #[test]
    fn unknown_profile() {
        let sb = Sandbox::default();
        let err = sb.run_tests("x", &[TestCase::io("", "")], "cobol").unwrap_err();
        assert!(matches!(err, SandboxError::ProfileNotConfigured(_)));
        let err = sb.run_tests("x", &[], "python3").unwrap_err();
        assert!(matches!(err, SandboxError::NoTests));
    }

    #[test]
    fn missing_interpreter_is_environment_failure() {
        let mut sb = Sandbox::default();
        sb.add_profile(LanguageProfile::command("ghost", "a.txt", vec!["/nonexistent/interp".into(), "{src}".into()]));
        let err = sb.run_tests("x", &[TestCase::io("", "")], "ghost").unwrap_err();
        assert!(matches!(err, SandboxError::SandboxSpawnFailure(_)));
    }
}
