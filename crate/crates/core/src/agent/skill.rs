//! Skill files and the hire/retire lifecycle of workers.

use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::{AgentError, ModelTier, Workspace};
use crate::directive::is_valid_worker_name;
use crate::domain::{AgentRole, ManagerRole};
use crate::store::{RegistryEntry, Store, StoreError};

/// A worker definition: YAML front matter plus free-form instructions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkillFile {
    pub name: String,
    pub role_title: String,
    pub manager: ManagerRole,
    pub model_tier: ModelTier,
    pub instructions: String,
}

#[derive(Serialize, Deserialize)]
struct FrontMatter {
    name: String,
    role: String,
    manager: String,
    #[serde(default)]
    tier: ModelTier,
}

impl SkillFile {
    pub fn new(
        name: &str,
        role_title: &str,
        manager: &str,
        model_tier: ModelTier,
        instructions: &str,
    ) -> Result<Self, AgentError> {
        if !is_valid_worker_name(name) {
            return Err(AgentError::InvalidName(name.to_string()));
        }
        if ManagerRole::from_name(name).is_some() {
            return Err(AgentError::DuplicateName(name.to_string()));
        }
        let manager =
            ManagerRole::from_name(manager).ok_or_else(|| AgentError::InvalidManager(manager.to_string()))?;
        Ok(SkillFile {
            name: name.to_string(),
            role_title: role_title.to_string(),
            manager,
            model_tier,
            instructions: instructions.to_string(),
        })
    }

    pub fn parse(text: &str) -> Result<Self, AgentError> {
        let text = text.replace('\r', "");
        let rest = text
            .strip_prefix("---\n")
            .ok_or_else(|| AgentError::MalformedSkill("missing front matter".into()))?;
        let (front, body) = match rest.find("\n---") {
            Some(end) => {
                let after = &rest[end + 4..];
                (&rest[..end], after.strip_prefix('\n').unwrap_or(after))
            }
            None => return Err(AgentError::MalformedSkill("unterminated front matter".into())),
        };
        let fm: FrontMatter =
            serde_yaml::from_str(front).map_err(|e| AgentError::MalformedSkill(e.to_string()))?;
        SkillFile::new(&fm.name, &fm.role, &fm.manager, fm.tier, body)
    }

    pub fn render(&self) -> String {
        let fm = FrontMatter {
            name: self.name.clone(),
            role: self.role_title.clone(),
            manager: self.manager.agent_name().to_string(),
            tier: self.model_tier,
        };
        let yaml = serde_yaml::to_string(&fm).expect("front matter serializes");
        format!("---\n{yaml}---\n{}", self.instructions)
    }

    pub fn role(&self) -> AgentRole {
        AgentRole::Worker {
            manager: self.manager,
        }
    }

    pub fn load(path: &Path) -> Result<Self, AgentError> {
        let text = std::fs::read_to_string(path).map_err(|e| AgentError::Io(format!("{}: {e}", path.display())))?;
        SkillFile::parse(&text)
    }
}

/// Registers the three permanent managers if they are missing.
pub fn ensure_managers(store: &Store, now: DateTime<Utc>) -> Result<(), AgentError> {
    let active = store.active_agents()?;
    for m in ManagerRole::ALL {
        if !active.iter().any(|e| e.name == m.agent_name()) {
            store.register_agent(&RegistryEntry {
                name: m.agent_name().to_string(),
                role: AgentRole::manager(m),
                skill_file_path: None,
                hired_at: now,
                retired_at: None,
            })?;
        }
    }
    Ok(())
}

/// Writes the skill file and adds an active registry entry.
pub fn hire_worker(
    ws: &Workspace,
    store: &Store,
    skill: &SkillFile,
    now: DateTime<Utc>,
) -> Result<RegistryEntry, AgentError> {
    if store.active_agents()?.iter().any(|e| e.name == skill.name) {
        return Err(AgentError::DuplicateName(skill.name.clone()));
    }
    let path = ws.skill_path(&skill.name);
    write_file(&path, &skill.render())?;
    register(store, skill, path, now)
}

fn register(store: &Store, skill: &SkillFile, path: PathBuf, now: DateTime<Utc>) -> Result<RegistryEntry, AgentError> {
    let entry = RegistryEntry {
        name: skill.name.clone(),
        role: skill.role(),
        skill_file_path: Some(path),
        hired_at: now,
        retired_at: None,
    };
    store.register_agent(&entry).map_err(|e| match e {
        StoreError::DuplicateAgent(n) => AgentError::DuplicateName(n),
        other => other.into(),
    })?;
    Ok(entry)
}

/// Retires a worker and archives its skill file under `retired/`.
pub fn retire_worker(ws: &Workspace, store: &Store, name: &str, now: DateTime<Utc>) -> Result<(), AgentError> {
    if ManagerRole::from_name(name).is_some() {
        return Err(AgentError::CannotRetireManager(name.to_string()));
    }
    if !store.active_agents()?.iter().any(|e| e.name == name) {
        return Err(AgentError::NoSuchAgent(name.to_string()));
    }
    let path = ws.skill_path(name);
    if path.is_file() {
        archive(ws, &path, name, now)?;
    }
    store.retire_agent(name, now)?;
    Ok(())
}

fn archive(ws: &Workspace, path: &Path, name: &str, now: DateTime<Utc>) -> Result<PathBuf, AgentError> {
    let dir = ws.retired_dir();
    std::fs::create_dir_all(&dir).map_err(|e| AgentError::Io(e.to_string()))?;
    let mut dest = dir.join(format!("{name}.md"));
    if dest.exists() {
        dest = dir.join(format!("{name}-{}.md", now.format("%Y%m%dT%H%M%SZ")));
    }
    let mut n = 1;
    while dest.exists() {
        dest = dir.join(format!("{name}-{}-{n}.md", now.format("%Y%m%dT%H%M%SZ")));
        n += 1;
    }
    std::fs::rename(path, &dest).map_err(|e| AgentError::Io(e.to_string()))?;
    Ok(dest)
}

fn write_file(path: &Path, text: &str) -> Result<(), AgentError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| AgentError::Io(e.to_string()))?;
    }
    std::fs::write(path, text).map_err(|e| AgentError::Io(format!("{}: {e}", path.display())))
}

/// What [`sync_skills`] changed.
#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct SyncReport {
    pub hired: Vec<String>,
    pub retired: Vec<String>,
    pub invalid: Vec<(PathBuf, String)>,
}

/// Reconciles the registry with the skills directory.
///
/// Managers hire by writing a skill file and retire by moving it into
/// `retired/`, using plain shell tools. New files become registry entries;
/// active workers whose file disappeared are retired.
pub fn sync_skills(ws: &Workspace, store: &Store, now: DateTime<Utc>) -> Result<SyncReport, AgentError> {
    let mut report = SyncReport::default();
    let mut on_disk = Vec::new();
    if let Ok(entries) = std::fs::read_dir(ws.skills_dir()) {
        let mut paths: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "md"))
            .collect();
        paths.sort();
        for path in paths {
            match SkillFile::load(&path) {
                Ok(skill) => on_disk.push((skill, path)),
                Err(e) => report.invalid.push((path, e.to_string())),
            }
        }
    }
    let active = store.active_agents()?;
    for entry in active.iter().filter(|e| !e.role.is_manager()) {
        if !on_disk.iter().any(|(s, _)| s.name == entry.name) {
            store.retire_agent(&entry.name, now)?;
            report.retired.push(entry.name.clone());
        }
    }
    for (skill, path) in on_disk {
        match active.iter().find(|e| e.name == skill.name) {
            None => {
                register(store, &skill, path, now)?;
                report.hired.push(skill.name);
            }
            Some(e) if e.role != skill.role() => {
                // The manager rewrote the file under a different manager.
                store.retire_agent(&skill.name, now)?;
                register(store, &skill, path, now)?;
            }
            Some(_) => {}
        }
    }
    for (path, err) in &report.invalid {
        tracing::warn!(path = %path.display(), "ignoring invalid skill file: {err}");
    }
    Ok(report)
}

/// Resolves `name` to an active worker reporting to `manager`.
pub fn resolve_worker(ws: &Workspace, store: &Store, name: &str, manager: ManagerRole) -> Result<SkillFile, AgentError> {
    let entry = store
        .active_agents()?
        .into_iter()
        .find(|e| e.name == name && e.role == AgentRole::Worker { manager })
        .ok_or_else(|| AgentError::NoSuchAgent(name.to_string()))?;
    let path = entry.skill_file_path.unwrap_or_else(|| ws.skill_path(name));
    SkillFile::load(&path)
}
