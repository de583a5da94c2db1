use inlinethink_core::fixtures::sandbox_fixtures;
use inlinethink_core::sandbox::{Sandbox, SandboxConfig, SandboxError, TestCase, VerdictStatus};

const MIB: u64 = 1024 * 1024;

#[test]
fn fixture_verdicts_are_stable() {
    let sandbox = Sandbox::default();
    let fixtures = sandbox_fixtures();
    assert_eq!(fixtures.len(), 12);
    for run in 0..5 {
        for fx in &fixtures {
            let got = fx.run(&sandbox).unwrap();
            assert!(got.iter().all(|s| *s == fx.expected), "run {run}, {}: {got:?}", fx.name);
        }
    }
}

#[test]
fn limits_are_monotone() {
    let sandbox = Sandbox::default();
    let sleeper = "import time\ntime.sleep(0.4)\nprint('done')\n";
    let verdict = |code: &str, t: TestCase| sandbox.run_tests(code, &[t], "python3").unwrap()[0].status;
    assert_eq!(verdict(sleeper, TestCase::io("", "done").with_limits(150, 256 * MIB)), VerdictStatus::Timeout);
    assert_eq!(verdict(sleeper, TestCase::io("", "done").with_limits(5_000, 256 * MIB)), VerdictStatus::Pass);

    let alloc = "b = bytearray(96 * 1024 * 1024)\nprint(len(b) > 0)\n";
    assert_eq!(verdict(alloc, TestCase::io("", "True").with_limits(5_000, 48 * MIB)), VerdictStatus::MemoryExceeded);
    assert_eq!(verdict(alloc, TestCase::io("", "True").with_limits(5_000, 512 * MIB)), VerdictStatus::Pass);
}

#[test]
fn runs_do_not_share_state() {
    let sandbox = Sandbox::default();
    let writer = "open('marker.txt', 'w').write('x')\nprint('ok')\n";
    let reader = "import os\nprint(os.path.exists('marker.txt'))\n";
    let first = sandbox.run_tests(writer, &[TestCase::io("", "ok")], "python3").unwrap();
    assert_eq!(first[0].status, VerdictStatus::Pass);
    let second = sandbox.run_tests(reader, &[TestCase::io("", "False")], "python3").unwrap();
    assert_eq!(second[0].status, VerdictStatus::Pass);
}

#[test]
fn pool_bounds_concurrency() {
    let sandbox = Sandbox::new(SandboxConfig { workers: 2, ..SandboxConfig::default() });
    let tests: Vec<TestCase> = (0..6).map(|_| TestCase::io("", "1")).collect();
    let verdicts = sandbox.run_tests("import time\ntime.sleep(0.1)\nprint(1)\n", &tests, "python3").unwrap();
    assert!(verdicts.iter().all(|v| v.status == VerdictStatus::Pass));
    assert!(sandbox.pool().peak_in_flight() <= 2);
    assert_eq!(sandbox.pool().free(), 2);
}

#[test]
fn configuration_errors() {
    let sandbox = Sandbox::default();
    assert!(matches!(
        sandbox.run_tests("print(1)", &[TestCase::io("", "1")], "cobol"),
        Err(SandboxError::ProfileNotConfigured(_))
    ));
    assert!(matches!(sandbox.run_tests("print(1)", &[], "python3"), Err(SandboxError::NoTests)));
}
