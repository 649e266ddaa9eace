//! Output directory handling: artifact names, the lock file and the run
//! manifest.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use e11_core::write_atomic;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{Loaded, PipelineConfig};
use crate::exit::{dependency_err, Context, Failure};

pub const LOCK_FILE: &str = ".e11.lock";
pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Ingest,
    Score,
    EfaFit,
    EfaScore,
    Profile,
    Forecast,
    Trend,
}

impl Stage {
    pub const ALL: [Stage; 7] =
        [Stage::Ingest, Stage::Score, Stage::EfaFit, Stage::EfaScore, Stage::Profile, Stage::Forecast, Stage::Trend];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Score => "score",
            Stage::EfaFit => "efa-fit",
            Stage::EfaScore => "efa-score",
            Stage::Profile => "profile",
            Stage::Forecast => "forecast",
            Stage::Trend => "trend",
        }
    }
}

/// A file in the output directory and the stage that writes it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Artifact {
    pub file: &'static str,
    pub stage: Stage,
}

pub const POSTS: Artifact = Artifact { file: "posts.jsonl", stage: Stage::Ingest };
pub const TIMELINES: Artifact = Artifact { file: "timelines.jsonl", stage: Stage::Ingest };
pub const INGEST_SUMMARY: Artifact = Artifact { file: "ingest_summary.json", stage: Stage::Ingest };
pub const ITEM_SCORES: Artifact = Artifact { file: "item_scores.e11t", stage: Stage::Score };
pub const SCORE_SKIPPED: Artifact = Artifact { file: "score_skipped.json", stage: Stage::Score };
pub const EFA_MODEL: Artifact = Artifact { file: "efa_model.json", stage: Stage::EfaFit };
pub const EFA_DIAGNOSTICS: Artifact = Artifact { file: "efa_diagnostics.json", stage: Stage::EfaFit };
pub const TOP_LOADINGS: Artifact = Artifact { file: "top_loadings.csv", stage: Stage::EfaFit };
pub const FACTOR_SCORES: Artifact = Artifact { file: "factor_scores.e11t", stage: Stage::EfaScore };
pub const PROFILES: Artifact = Artifact { file: "profiles.json", stage: Stage::Profile };
pub const FORECAST: Artifact = Artifact { file: "forecast.json", stage: Stage::Forecast };
pub const TREND: Artifact = Artifact { file: "trend.json", stage: Stage::Trend };

pub const REPORT_DIR: &str = "reports";

pub fn sha256_file(path: &Path) -> Result<String, Failure> {
    let bytes = std::fs::read(path).map_err(|e| dependency_err(format!("cannot read {}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Held while a stage runs; removed on drop.
#[derive(Debug)]
pub struct Lock {
    path: PathBuf,
}

impl Lock {
    pub fn acquire(dir: &Path) -> Result<Lock, Failure> {
        std::fs::create_dir_all(dir).map_err(|e| dependency_err(format!("cannot create {}: {e}", dir.display())))?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Lock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(dependency_err(format!(
                "{} is locked by another run; remove {} if that run is gone",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(dependency_err(format!("cannot create {}: {e}", path.display()))),
        }
    }
}

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub config_sha256: String,
    pub seed: u64,
    pub config: PipelineConfig,
    pub versions: BTreeMap<String, String>,
    /// File name or config key -> SHA-256 of its bytes.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    /// Bank, provider and model identities the outputs are bound to.
    pub fingerprints: BTreeMap<String, String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stages: BTreeMap<String, StageRecord>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Manifest, Failure> {
        let path = dir.join(MANIFEST);
        if !path.exists() {
            return Ok(Manifest::default());
        }
        let text = std::fs::read_to_string(&path).map_err(|e| dependency_err(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| dependency_err(format!("malformed {}: {e}", path.display())))
    }
}

/// One stage's view of the output directory.
pub struct Run<'a> {
    pub loaded: &'a Loaded,
    pub dir: PathBuf,
    name: String,
    record: StageRecord,
    _lock: Lock,
}

impl<'a> Run<'a> {
    pub fn start(loaded: &'a Loaded, name: impl Into<String>) -> Result<Self, Failure> {
        let dir = loaded.output_dir();
        let lock = Lock::acquire(&dir)?;
        let mut versions = BTreeMap::new();
        versions.insert("e11-cli".to_string(), env!("CARGO_PKG_VERSION").to_string());
        versions.insert("e11-core".to_string(), e11_core::VERSION.to_string());
        let record = StageRecord {
            config_sha256: loaded.hash(),
            seed: loaded.config.seed,
            config: loaded.config.clone(),
            versions,
            ..StageRecord::default()
        };
        Ok(Run { loaded, dir, name: name.into(), record, _lock: lock })
    }

    pub fn path(&self, a: Artifact) -> PathBuf {
        self.dir.join(a.file)
    }

    /// Path of an upstream artifact, recorded as an input.
    pub fn input(&mut self, a: Artifact) -> Result<PathBuf, Failure> {
        let path = self.path(a);
        if !path.is_file() {
            return Err(dependency_err(format!(
                "missing {} in {}: run {} first",
                a.file,
                self.dir.display(),
                a.stage.name()
            )));
        }
        let sha = sha256_file(&path)?;
        self.record.inputs.insert(a.file.to_string(), sha);
        Ok(path)
    }

    /// Records a file from outside the output directory.
    pub fn external(&mut self, key: &str, path: &Path) -> Result<(), Failure> {
        let sha = sha256_file(path)?;
        self.record.inputs.insert(key.to_string(), sha);
        Ok(())
    }

    pub fn fingerprint(&mut self, key: &str, value: impl Into<String>) {
        self.record.fingerprints.insert(key.to_string(), value.into());
    }

    /// Writes `bytes` atomically under the output directory.
    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<PathBuf, Failure> {
        let path = self.dir.join(rel);
        write_atomic(&path, bytes).context(format!("writing {}", path.display()))?;
        self.record.outputs.insert(rel.to_string(), hex::encode(Sha256::digest(bytes)));
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<PathBuf, Failure> {
        let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| crate::exit::data_err(e.to_string()))?;
        bytes.push(b'\n');
        self.write(rel, &bytes)
    }

    /// Adds this stage's record to the manifest.
    pub fn finish(self) -> Result<(), Failure> {
        let mut manifest = Manifest::load(&self.dir)?;
        manifest.stages.insert(self.name.clone(), self.record.clone());
        let mut bytes = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        bytes.push(b'\n');
        write_atomic(&self.dir.join(MANIFEST), &bytes).context("writing manifest")?;
        Ok(())
    }
}
