//! Pipeline configuration: one TOML document, `E11_` environment overrides,
//! then command-line overrides.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use e11_core::corpus::{ActivityRule, FilterConfig};
use e11_core::efa::{EfaOptions, Rotation};
use e11_core::embedder::{EmbeddingProviderConfig, ProviderKind};
use e11_core::forecast::{CvConfig, LogisticConfig};
use e11_core::profiles::TTestVariant;
use e11_core::scorer::ScoringConfig;
use e11_core::trend::{CompositeMode, LoessConfig, Pooling};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::exit::{config_err, Failure};

pub const ENV_PREFIX: &str = "E11_";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub paths: Paths,
    pub embedder: EmbeddingProviderConfig,
    pub filters: FilterConfig,
    pub ingest: IngestConfig,
    pub scoring: ScoringConfig,
    pub efa: EfaConfig,
    pub profile: ProfileConfig,
    pub forecast: ForecastConfig,
    pub trend: TrendConfig,
}

/// Relative paths resolve against the config file's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    /// JSON or `.tsv`; the built-in bank when unset.
    pub item_bank: Option<PathBuf>,
    pub cache: Option<PathBuf>,
    pub output_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths { corpus: None, item_bank: None, cache: None, output_dir: PathBuf::from("out") }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestConfig {
    /// Skip malformed records instead of failing.
    pub lenient: bool,
    /// Users with any post here are joiners; everyone else is a control.
    pub target_forums: BTreeSet<String>,
    pub joiner_activity: Option<ActivityRule>,
    pub control_activity: Option<ActivityRule>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EfaConfig {
    pub iters: usize,
    pub quantile: f64,
    pub k_override: Option<usize>,
    pub rotation: Rotation,
    pub max_iter: usize,
    pub tol: f64,
    pub factor_names: Option<Vec<String>>,
    /// Items listed per factor in the loadings table.
    pub top_items: usize,
}

impl Default for EfaConfig {
    fn default() -> Self {
        let opts = EfaOptions::default();
        EfaConfig {
            iters: 100,
            quantile: 0.95,
            k_override: None,
            rotation: opts.rotation,
            max_iter: opts.max_iter,
            tol: opts.tol,
            factor_names: None,
            top_items: 10,
        }
    }
}

impl EfaConfig {
    pub fn options(&self) -> EfaOptions {
        EfaOptions { rotation: self.rotation, max_iter: self.max_iter, tol: self.tol, ..EfaOptions::default() }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupBy {
    #[default]
    Forum,
    User,
    Cohort,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareConfig {
    #[serde(default = "default_a_label")]
    pub a_label: String,
    pub a_forums: BTreeSet<String>,
    #[serde(default = "default_b_label")]
    pub b_label: String,
    pub b_forums: BTreeSet<String>,
}

fn default_a_label() -> String {
    "banned".into()
}

fn default_b_label() -> String {
    "other".into()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProfileConfig {
    pub group_by: GroupBy,
    pub ttest: TTestVariant,
    pub compare: Option<CompareConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForecastConfig {
    pub offsets: Vec<u32>,
    pub folds: usize,
    pub l2: f64,
    /// Falls back to the top-level seed.
    pub seed: Option<u64>,
    pub lookback_months: Option<u32>,
}

impl Default for ForecastConfig {
    fn default() -> Self {
        ForecastConfig { offsets: (0..=12).collect(), folds: 5, l2: 1.0, seed: None, lookback_months: None }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlT0 {
    /// One of the user's own post times, drawn per user.
    #[default]
    Random,
    /// First post in a forum new to the user.
    NewForum,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrendConfig {
    pub loess: LoessConfig,
    pub composite: CompositeMode,
    pub pooling: Pooling,
    pub control_t0: ControlT0,
    pub seed: Option<u64>,
}

/// Command-line overrides, applied last.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub folds: Option<usize>,
    pub months_before: Option<Vec<u32>>,
    pub provider: Option<ProviderKind>,
}

/// A validated config plus where it came from.
#[derive(Clone, Debug)]
pub struct Loaded {
    /// As written, after overrides; stored in manifests.
    pub config: PipelineConfig,
    /// Directory relative paths resolve against.
    pub base: PathBuf,
}

impl Loaded {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(&self.config.paths.output_dir)
    }

    /// Embedder settings with the cache path resolved.
    pub fn embedder(&self) -> EmbeddingProviderConfig {
        let mut e = self.config.embedder.clone();
        if e.kind == ProviderKind::FileCache && e.path.is_none() {
            e.path = self.config.paths.cache.clone();
        }
        e.path = e.path.map(|p| self.resolve(&p));
        e
    }

    pub fn cv(&self) -> CvConfig {
        let f = &self.config.forecast;
        CvConfig {
            folds: f.folds,
            seed: f.seed.unwrap_or(self.config.seed),
            logistic: LogisticConfig { l2: f.l2, ..LogisticConfig::default() },
            lookback_months: f.lookback_months,
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(&self.config).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

/// `"3"`, `"0..12"` (inclusive) or `"0,3,6"`.
pub fn parse_offsets(s: &str) -> Result<Vec<u32>, String> {
    let s = s.trim();
    let out: Vec<u32> = if let Some((a, b)) = s.split_once("..") {
        let a: u32 = a.trim().parse().map_err(|_| format!("bad range start in `{s}`"))?;
        let b: u32 = b.trim_start_matches('=').trim().parse().map_err(|_| format!("bad range end in `{s}`"))?;
        if a > b {
            return Err(format!("empty range `{s}`"));
        }
        (a..=b).collect()
    } else {
        s.split(',').map(|t| t.trim().parse::<u32>().map_err(|_| format!("bad offset `{t}`"))).collect::<Result<_, _>>()?
    };
    if out.is_empty() {
        return Err("no offsets".into());
    }
    Ok(out)
}

pub fn parse_provider(s: &str) -> Result<ProviderKind, String> {
    match s {
        "stub" => Ok(ProviderKind::Stub),
        "http" => Ok(ProviderKind::Http),
        "cache" | "file_cache" => Ok(ProviderKind::FileCache),
        _ => Err(format!("unknown provider `{s}` (stub, http, cache)")),
    }
}

/// Sets `path` in `table`, creating intermediate tables.
fn set_path(table: &mut toml::Table, path: &[String], value: toml::Value) -> Result<(), String> {
    let (last, parents) = path.split_last().ok_or("empty key")?;
    let mut cur = table;
    for key in parents {
        let entry = cur.entry(key.clone()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| format!("`{key}` is not a section"))?;
    }
    cur.insert(last.clone(), value);
    Ok(())
}

/// Parses an override value as a TOML value, falling back to a plain string.
fn parse_env_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// `E11_SECTION__KEY=value` sets `section.key`; keys are lowercased.
pub fn apply_env(table: &mut toml::Table, vars: impl IntoIterator<Item = (String, String)>) -> Result<(), String> {
    let mut vars: Vec<(String, String)> = vars.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    vars.sort();
    for (k, v) in vars {
        let path: Vec<String> = k[ENV_PREFIX.len()..].split("__").map(|s| s.to_lowercase()).collect();
        if path.iter().any(|s| s.is_empty()) {
            return Err(format!("malformed override `{k}`"));
        }
        set_path(table, &path, parse_env_value(&v)).map_err(|e| format!("{k}: {e}"))?;
    }
    Ok(())
}

pub fn from_toml_str(s: &str, vars: impl IntoIterator<Item = (String, String)>) -> Result<PipelineConfig, String> {
    let mut table: toml::Table = toml::from_str(s).map_err(|e| e.to_string())?;
    apply_env(&mut table, vars)?;
    PipelineConfig::deserialize(toml::Value::Table(table)).map_err(|e| e.to_string())
}

impl PipelineConfig {
    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(f) = o.folds {
            self.forecast.folds = f;
        }
        if let Some(m) = &o.months_before {
            self.forecast.offsets = m.clone();
        }
        if let Some(p) = o.provider {
            self.embedder.kind = p;
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        self.filters.validate().map_err(|e| e.to_string())?;
        if self.scoring.chunk_words < 1 || self.scoring.post_batch < 1 {
            return Err("scoring.chunk_words and scoring.post_batch must be >= 1".into());
        }
        if self.efa.iters < 1 || !(0.0 < self.efa.quantile && self.efa.quantile < 1.0) {
            return Err("efa.iters must be >= 1 and efa.quantile in (0, 1)".into());
        }
        if self.efa.k_override == Some(0) {
            return Err("efa.k_override must be >= 1".into());
        }
        if let (Some(k), Some(names)) = (self.efa.k_override, &self.efa.factor_names) {
            if names.len() != k {
                return Err(format!("efa.factor_names has {} names for k_override = {k}", names.len()));
            }
        }
        if self.forecast.folds < 2 {
            return Err("forecast.folds must be >= 2".into());
        }
        if self.forecast.offsets.is_empty() {
            return Err("forecast.offsets is empty".into());
        }
        if !(self.forecast.l2 >= 0.0) {
            return Err("forecast.l2 must be >= 0".into());
        }
        self.trend.loess.validate().map_err(|e| e.to_string())?;
        if let Some(c) = &self.profile.compare {
            if c.a_forums.is_empty() || c.b_forums.is_empty() {
                return Err("profile.compare needs non-empty a_forums and b_forums".into());
            }
            if let Some(f) = c.a_forums.intersection(&c.b_forums).next() {
                return Err(format!("forum `{f}` is in both comparison groups"));
            }
        }
        Ok(())
    }
}

/// Reads, overrides and validates the config at `path`.
pub fn load(path: &Path, overrides: &Overrides) -> Result<Loaded, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
    let mut config = from_toml_str(&text, std::env::vars()).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    config.apply(overrides);
    config.validate().map_err(config_err)?;
    let base = path.parent().map(Path::to_path_buf).filter(|p| !p.as_os_str().is_empty()).unwrap_or_else(|| PathBuf::from("."));
    let loaded = Loaded { config, base };
    loaded.embedder().validate().map_err(|e| config_err(e.to_string()))?;
    Ok(loaded)
}

/// Fails unless `p` exists.
pub fn require_file(loaded: &Loaded, p: &Option<PathBuf>, key: &str) -> Result<PathBuf, Failure> {
    let p = p.as_ref().ok_or_else(|| config_err(format!("paths.{key} is not set")))?;
    let full = loaded.resolve(p);
    if !full.is_file() {
        return Err(config_err(format!("paths.{key}: {} does not exist", full.display())));
    }
    Ok(full)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_env() -> Vec<(String, String)> {
        Vec::new()
    }

    #[test]
    fn empty_document_is_default() {
        assert_eq!(from_toml_str("", no_env()).unwrap(), PipelineConfig::default());
    }

    #[test]
    fn sections_parse() {
        let c = from_toml_str(
            r#"
seed = 7
[paths]
corpus = "posts.jsonl"
[efa]
k_override = 3
rotation = { method = "promax", power = 4 }
[forecast]
offsets = [0, 3, 6]
[trend]
composite = { factor = "F1" }
pooling = "user_month"
[profile.compare]
a_forums = ["x"]
b_forums = ["y", "z"]
"#,
            no_env(),
        )
        .unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.efa.k_override, Some(3));
        assert_eq!(c.efa.rotation, Rotation::Promax { power: 4 });
        assert_eq!(c.forecast.offsets, vec![0, 3, 6]);
        assert_eq!(c.trend.composite, CompositeMode::Factor("F1".into()));
        assert_eq!(c.trend.pooling, Pooling::UserMonth);
        assert_eq!(c.profile.compare.unwrap().a_label, "banned");
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(from_toml_str("[efa]\nkk = 1", no_env()).is_err());
        assert!(from_toml_str("sed = 1", no_env()).is_err());
    }

    #[test]
    fn env_overrides() {
        let env = vec![
            ("E11_SEED".to_string(), "42".to_string()),
            ("E11_FORECAST__FOLDS".to_string(), "3".to_string()),
            ("E11_PATHS__OUTPUT_DIR".to_string(), "elsewhere".to_string()),
            ("E11_EMBEDDER__KIND".to_string(), "http".to_string()),
            ("OTHER".to_string(), "1".to_string()),
        ];
        let c = from_toml_str("seed = 1\n[forecast]\nfolds = 5", env).unwrap();
        assert_eq!(c.seed, 42);
        assert_eq!(c.forecast.folds, 3);
        assert_eq!(c.paths.output_dir, PathBuf::from("elsewhere"));
        assert_eq!(c.embedder.kind, ProviderKind::Http);
    }

    #[test]
    fn offsets_syntax() {
        assert_eq!(parse_offsets("0..12").unwrap().len(), 13);
        assert_eq!(parse_offsets("0..=2").unwrap(), vec![0, 1, 2]);
        assert_eq!(parse_offsets("4").unwrap(), vec![4]);
        assert_eq!(parse_offsets("1, 5").unwrap(), vec![1, 5]);
        assert!(parse_offsets("5..2").is_err());
        assert!(parse_offsets("x").is_err());
    }

    #[test]
    fn validation() {
        let mut c = PipelineConfig::default();
        assert!(c.validate().is_ok());
        c.forecast.folds = 1;
        assert!(c.validate().is_err());
        let mut c = PipelineConfig::default();
        c.efa.k_override = Some(2);
        c.efa.factor_names = Some(vec!["a".into()]);
        assert!(c.validate().is_err());
    }

    #[test]
    fn overrides_apply_last() {
        let mut c = PipelineConfig::default();
        c.apply(&Overrides { seed: Some(9), folds: Some(4), months_before: Some(vec![1]), provider: Some(ProviderKind::FileCache) });
        assert_eq!((c.seed, c.forecast.folds, c.forecast.offsets.clone()), (9, 4, vec![1]));
        assert_eq!(c.embedder.kind, ProviderKind::FileCache);
    }
}
