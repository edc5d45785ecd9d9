//! End-to-end run of the built binaries against the two-milestone fixture.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

pub const SMOKE_LIMIT: Duration = Duration::from_secs(10);

pub fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/two_milestones")
}

/// Copies the fixture into a fresh directory.
pub fn workdir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    for name in ["botforge.toml", "script.toml"] {
        std::fs::copy(fixture().join(name), dir.path().join(name)).unwrap();
    }
    std::fs::create_dir_all(dir.path().join("repo")).unwrap();
    dir
}

pub fn botforge(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_botforge"))
        .current_dir(dir)
        .arg("--config")
        .arg(dir.join("botforge.toml"))
        .args(args)
        .env_remove("TBC_PROJECT")
        .output()
        .unwrap()
}

pub fn tbc_db(dir: &Path, agent: Option<&str>, visibility: Option<&str>, args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_tbc-db"));
    cmd.current_dir(dir).env("TBC_PROJECT", dir.join("state/kv")).args(args);
    cmd.env_remove("TBC_AGENT").env_remove("TBC_VISIBILITY");
    if let Some(a) = agent {
        cmd.env("TBC_AGENT", a);
    }
    if let Some(v) = visibility {
        cmd.env("TBC_VISIBILITY", v);
    }
    cmd.output().unwrap()
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn expect_ok(what: &str, o: &Output) -> Result<String, String> {
    if o.status.success() {
        Ok(stdout(o))
    } else {
        Err(format!(
            "{what} exited {:?}: {}{}",
            o.status.code(),
            stdout(o),
            String::from_utf8_lossy(&o.stderr)
        ))
    }
}

pub const EXPECTED_OPEN: [&str; 3] = [
    "#1 [open] Keys must be valid UTF-8 (assignee: -)",
    "#2 [open] Add a compaction command (assignee: dev)",
    "#4 [open] Verification of milestone 2 (assignee: -)",
];

/// Registers the fixture project, files issues through `tbc-db`, runs it to
/// completion with `botforge run` and lists the open issues.
pub fn smoke() -> Result<String, String> {
    let dir = workdir();
    let d = dir.path();
    let started = Instant::now();

    expect_ok(
        "project add",
        &botforge(
            d,
            &[
                "project",
                "add",
                "--id",
                "kv",
                "--goal",
                "Build a small persistent key-value store with a query API",
                "--success",
                "Storage survives restarts and the query API answers get/put/delete",
                "--repo",
                "repo",
                "--daily-limit",
                "25",
            ],
        ),
    )?;
    expect_ok("issue create", &tbc_db(d, None, None, &["issue", "create", "--title", "Keys must be valid UTF-8"]))?;
    expect_ok(
        "issue create",
        &tbc_db(d, None, None, &["issue", "create", "--title", "Add a compaction command", "--assignee", "dev"]),
    )?;
    expect_ok("issue create", &tbc_db(d, None, None, &["issue", "create", "--title", "Typo in README"]))?;
    expect_ok("issue close", &tbc_db(d, None, None, &["issue", "close", "3"]))?;

    let run = expect_ok("botforge run", &botforge(d, &["run", "--exit-when-done"]))?;
    if !run.contains("kv: completed") {
        return Err(format!("run did not complete the project:\n{run}"));
    }
    let status = expect_ok("status", &botforge(d, &["status", "--project", "kv"]))?;
    if !status.contains("milestones passed: 2") {
        return Err(format!("expected 2 passed milestones:\n{status}"));
    }
    let listed = expect_ok("issue list", &tbc_db(d, Some("Athena"), None, &["issue", "list", "--status", "open"]))?;
    let lines: Vec<&str> = listed.lines().collect();
    if lines != EXPECTED_OPEN {
        return Err(format!("issue list --status open printed:\n{listed}"));
    }
    let elapsed = started.elapsed();
    if elapsed > SMOKE_LIMIT {
        return Err(format!("took {elapsed:?}, limit {SMOKE_LIMIT:?}"));
    }
    Ok(format!("2 milestones passed, {} open issues listed, {elapsed:.2?}", lines.len()))
}
