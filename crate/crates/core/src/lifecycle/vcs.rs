use std::path::Path;
use std::process::Command;

/// Commit-early hook run after schedule items.
pub trait Vcs: Send + Sync {
    /// Commits all workspace changes and points `tag` at the commit.
    /// Returns `false` when there was nothing to commit.
    fn commit_progress(&self, workspace: &Path, message: &str, tag: &str) -> Result<bool, String>;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct NoVcs;

impl Vcs for NoVcs {
    fn commit_progress(&self, _: &Path, _: &str, _: &str) -> Result<bool, String> {
        Ok(false)
    }
}

/// Git through the `git` binary. Workspaces that are not repositories are
/// left alone.
#[derive(Debug, Default, Clone, Copy)]
pub struct Git;

fn git(workspace: &Path, args: &[&str]) -> Result<String, String> {
    let out = Command::new("git")
        .arg("-C")
        .arg(workspace)
        .args(["-c", "user.name=botforge", "-c", "user.email=botforge@localhost"])
        .args(args)
        .output()
        .map_err(|e| format!("git: {e}"))?;
    if !out.status.success() {
        return Err(format!(
            "git {}: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr).trim()
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

impl Vcs for Git {
    fn commit_progress(&self, workspace: &Path, message: &str, tag: &str) -> Result<bool, String> {
        if !workspace.join(".git").exists() {
            return Ok(false);
        }
        if git(workspace, &["status", "--porcelain"])?.trim().is_empty() {
            return Ok(false);
        }
        git(workspace, &["add", "-A"])?;
        git(workspace, &["commit", "-q", "--no-verify", "-m", message])?;
        git(workspace, &["tag", "-f", tag])?;
        Ok(true)
    }
}
