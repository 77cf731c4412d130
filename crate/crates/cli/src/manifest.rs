//! Experiment manifests: a TOML file listing model/training configurations
//! that the harness expands into one job per (configuration, seed).

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use iclbench::model::ModelConfig;
use iclbench::training::{RunConfig, TrainConfig};
use iclbench::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// One named configuration inside a manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestRun {
    /// Stem of the run subdirectories; must be unique within the manifest.
    pub name: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// Parsed manifest file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentManifest {
    /// Root directory for run subdirectories, unless `--out` overrides it.
    pub out_root: PathBuf,
    /// Seeds applied to every run; a run's own `train.seeds` is used when
    /// this list is empty.
    #[serde(default)]
    pub seeds: Vec<u64>,
    pub runs: Vec<ManifestRun>,
}

/// A fully resolved unit of work.
#[derive(Debug, Clone)]
pub struct Job {
    pub name: String,
    pub dir: PathBuf,
    pub config: RunConfig,
}

/// Hex SHA-256 of the manifest file bytes, recorded in every run log the
/// manifest produces.
pub fn manifest_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

pub fn load_manifest(path: &Path) -> Result<ExperimentManifest> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let manifest: ExperimentManifest = toml::from_str(&text)?;
    if manifest.runs.is_empty() {
        return Err(Error::Config("manifest lists no runs".into()));
    }
    let mut names = HashSet::new();
    for run in &manifest.runs {
        if run.name.is_empty()
            || !run
                .name
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
        {
            return Err(Error::Config(format!(
                "run name '{}' must be non-empty and use only [A-Za-z0-9_-]",
                run.name
            )));
        }
        if !names.insert(&run.name) {
            return Err(Error::Config(format!("duplicate run name '{}'", run.name)));
        }
        run.model.validate()?;
    }
    Ok(manifest)
}

/// Expands the manifest into jobs, one per (run, seed).
///
/// Seed precedence: `seed_override` (the `--seeds`/`--seed` flags), then the
/// manifest's top-level list, then each run's own `train.seeds`.
pub fn expand_jobs(
    manifest: &ExperimentManifest,
    out_override: Option<&Path>,
    seed_override: Option<&[u64]>,
    hash: &str,
) -> Result<Vec<Job>> {
    let out_root = out_override.unwrap_or(&manifest.out_root);
    let mut jobs = Vec::new();
    for run in &manifest.runs {
        let seeds: Vec<u64> = match seed_override {
            Some(s) => s.to_vec(),
            None if !manifest.seeds.is_empty() => manifest.seeds.clone(),
            None => run.train.seeds.clone(),
        };
        if seeds.is_empty() {
            return Err(Error::Config(format!(
                "run '{}' has no seeds (set manifest seeds, train.seeds, or --seeds)",
                run.name
            )));
        }
        let mut unique = HashSet::new();
        if !seeds.iter().all(|s| unique.insert(*s)) {
            return Err(Error::Config(format!(
                "run '{}' repeats a seed; directories must be unique",
                run.name
            )));
        }
        for &seed in &seeds {
            let mut train = run.train.clone();
            train.seeds = vec![seed];
            train.validate()?;
            let config = RunConfig {
                model: run.model.clone(),
                train,
                seed,
                manifest_hash: Some(hash.to_string()),
            };
            jobs.push(Job {
                name: run.name.clone(),
                dir: out_root.join(format!("{}-s{}", run.name, seed)),
                config,
            });
        }
    }
    Ok(jobs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use iclbench::model::AttentionKind;

    fn manifest_text() -> String {
        let mut manifest = ExperimentManifest {
            out_root: PathBuf::from("runs/demo"),
            seeds: vec![1, 2],
            runs: vec![ManifestRun {
                name: "quad-l1".into(),
                model: ModelConfig {
                    attention: AttentionKind::Quadratic,
                    layers: 1,
                    d_model: 16,
                    heads: 2,
                    mlp_ratio: 2,
                    d_x: 5,
                    k: 10,
                    eps: 1e-6,
                },
                train: TrainConfig::defaults_for(AttentionKind::Quadratic),
            }],
        };
        manifest.runs[0].train.seeds = Vec::new();
        toml::to_string(&manifest).unwrap()
    }

    #[test]
    fn round_trips_and_expands_with_precedence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.toml");
        fs::write(&path, manifest_text()).unwrap();

        let manifest = load_manifest(&path).unwrap();
        let hash = manifest_hash(&path).unwrap();
        assert_eq!(hash.len(), 64);

        let jobs = expand_jobs(&manifest, None, None, &hash).unwrap();
        assert_eq!(jobs.len(), 2);
        assert_eq!(jobs[0].dir, Path::new("runs/demo/quad-l1-s1"));
        assert_eq!(jobs[0].config.seed, 1);
        assert_eq!(jobs[0].config.train.seeds, vec![1]);
        assert_eq!(jobs[0].config.manifest_hash.as_deref(), Some(hash.as_str()));

        let jobs = expand_jobs(&manifest, Some(Path::new("elsewhere")), Some(&[9]), &hash)
            .unwrap();
        assert_eq!(jobs.len(), 1);
        assert_eq!(jobs[0].dir, Path::new("elsewhere/quad-l1-s9"));
    }

    #[test]
    fn shipped_manifests_load_and_expand() {
        let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        for (file, runs, seeds) in [
            ("desk-scale.toml", 6, 3),
            ("ablation.toml", 4, 3),
            ("paper-scale.toml", 6, 5),
        ] {
            let path = root.join(file);
            let manifest = load_manifest(&path).unwrap_or_else(|e| panic!("{file}: {e}"));
            assert_eq!(manifest.runs.len(), runs, "{file}");
            let hash = manifest_hash(&path).unwrap();
            let jobs = expand_jobs(&manifest, None, None, &hash).unwrap();
            assert_eq!(jobs.len(), runs * seeds, "{file}");
            for job in &jobs {
                job.config.model.validate().unwrap();
                job.config.train.validate().unwrap();
            }
        }
    }

    #[test]
    fn rejects_duplicates_and_missing_seeds() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.toml");

        let doubled = manifest_text().replace("seeds = [1, 2]", "seeds = [1, 1]");
        fs::write(&path, &doubled).unwrap();
        let manifest = load_manifest(&path).unwrap();
        assert!(expand_jobs(&manifest, None, None, "h").is_err());

        let empty = manifest_text().replace("seeds = [1, 2]", "seeds = []");
        fs::write(&path, &empty).unwrap();
        let manifest = load_manifest(&path).unwrap();
        assert!(expand_jobs(&manifest, None, None, "h").is_err());
        assert!(expand_jobs(&manifest, None, Some(&[5]), "h").is_ok());

        let twice = format!("{}\n{}", manifest_text(), {
            let start = manifest_text();
            let idx = start.find("[[runs]]").unwrap();
            start[idx..].to_string()
        });
        fs::write(&path, twice).unwrap();
        assert!(load_manifest(&path).is_err());
    }
}
