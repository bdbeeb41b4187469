use std::path::{Path, PathBuf};

use catsim_core::forge::Manifest;
use catsim_core::scenario::{load_scenario, Scenario};
use clap::ValueEnum;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Test,
    All,
}

/// Scenes of `dir` in name order, restricted to a manifest split.
///
/// Without an explicit split the manifest's `fallback` split is used when a
/// manifest exists, and every JSON file otherwise.
pub fn load_dir(dir: &Path, split: Option<Split>, fallback: Split) -> Result<Vec<(String, Scenario)>, CliError> {
    let manifest_path = dir.join("manifest.json");
    let manifest = if manifest_path.exists() {
        let text = read(&manifest_path)?;
        Some(serde_json::from_str::<Manifest>(&text).map_err(|e| CliError::Manifest {
            path: manifest_path.clone(),
            message: e.to_string(),
        })?)
    } else {
        None
    };
    let names: Vec<String> = match (split, split.unwrap_or(fallback), &manifest) {
        (_, Split::All, _) | (None, _, None) => list_json(dir)?,
        (_, Split::Train, Some(m)) => stems(&m.train),
        (_, Split::Test, Some(m)) => stems(&m.test),
        (Some(s), _, None) => {
            return Err(CliError::Usage(format!(
                "split {s:?} requested but {} has no manifest.json",
                dir.display()
            )))
        }
    };
    if names.is_empty() {
        return Err(CliError::Usage(format!("no scenes found in {}", dir.display())));
    }
    names
        .into_iter()
        .map(|name| {
            let scenario = load_scenario(dir.join(format!("{name}.json")))?;
            Ok((name, scenario))
        })
        .collect()
}

/// Manifest entries are file names.
fn stems(files: &[String]) -> Vec<String> {
    files.iter().map(|f| f.strip_suffix(".json").unwrap_or(f).to_string()).collect()
}

fn list_json(dir: &Path) -> Result<Vec<String>, CliError> {
    let entries = std::fs::read_dir(dir).map_err(|source| CliError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut names = Vec::new();
    for entry in entries {
        let path = entry
            .map_err(|source| CliError::Io {
                path: dir.to_path_buf(),
                source,
            })?
            .path();
        if path.extension().is_some_and(|e| e == "json") {
            let stem = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            if stem != "manifest" {
                names.push(stem);
            }
        }
    }
    names.sort();
    Ok(names)
}

pub fn read(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    std::fs::write(path, text).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn create_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Checkpoint path for one seed; `{seed}` in the pattern is substituted.
pub fn seed_path(pattern: &str, seed: u64) -> PathBuf {
    PathBuf::from(pattern.replace("{seed}", &seed.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use catsim_core::forge::forge_corpus;

    #[test]
    fn manifest_splits_select_members() {
        let dir = tempfile::tempdir().unwrap();
        let c = forge_corpus(5, 0.6, 3).unwrap();
        c.write(dir.path(), 3, 0.6).unwrap();
        let train = load_dir(dir.path(), None, Split::Train).unwrap();
        let test = load_dir(dir.path(), Some(Split::Test), Split::Train).unwrap();
        let all = load_dir(dir.path(), Some(Split::All), Split::Train).unwrap();
        assert_eq!(train.len(), 3);
        assert_eq!(test.len(), 2);
        assert_eq!(all.len(), 5);
        let names: Vec<&str> = train.iter().map(|(n, _)| n.as_str()).collect();
        let expected: Vec<&str> = c.train.iter().map(|s| s.name.as_str()).collect();
        assert_eq!(names, expected);
    }

    #[test]
    fn plain_directory_loads_every_scene() {
        let dir = tempfile::tempdir().unwrap();
        let c = forge_corpus(3, 0.5, 1).unwrap();
        for s in c.train.iter().chain(&c.test) {
            s.scenario.save(dir.path().join(format!("{}.json", s.name))).unwrap();
        }
        assert_eq!(load_dir(dir.path(), None, Split::Test).unwrap().len(), 3);
        assert!(load_dir(dir.path(), Some(Split::Train), Split::Train).is_err());
    }

    #[test]
    fn seed_placeholder_is_substituted() {
        assert_eq!(seed_path("run_{seed}/policy.json", 2), PathBuf::from("run_2/policy.json"));
        assert_eq!(seed_path("p.json", 2), PathBuf::from("p.json"));
    }
}
