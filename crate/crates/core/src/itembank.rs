//! Questionnaire item bank: loading, validation and fingerprinting.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Scale rows of the canonical bank and their item counts.
pub const SCALE_MANIFEST: [(&str, usize); 12] = [
    ("Extremism Scale", 14),
    ("Social Dominance Orientation", 8),
    ("Radicalism Intention", 4),
    ("Violent Intention", 7),
    ("Nationalism Scale", 4),
    ("Right-Wing Authoritarianism", 15),
    ("Self-Categorization Scale", 3),
    ("Dirty Dozen", 12),
    ("General Extremist", 5),
    ("Left-Wing Radical", 6),
    ("Right-Wing Radical", 7),
    ("Ethnic Intolerance", 4),
];

pub const CANONICAL_ITEM_COUNT: usize = 89;

const CANONICAL_BANK_JSON: &str = include_str!("../../../data/item_bank.json");
const REFERENCE_FACTORS_JSON: &str = include_str!("../../../data/extremist_eleven.json");

pub fn is_known_scale(name: &str) -> bool {
    SCALE_MANIFEST.iter().any(|(s, _)| *s == name)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaleItem {
    pub item_id: String,
    pub scale: String,
    pub source: String,
    pub text: String,
    /// Where the statement text comes from ("published" or "source-instrument").
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<String>,
}

/// Ordered, immutable item bank. Column order of every score matrix follows
/// `items` order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ItemBank {
    items: Vec<ScaleItem>,
}

impl ItemBank {
    /// Checks id uniqueness and non-empty text. Scale names are not checked
    /// here; see [`validate_item_bank`].
    pub fn new(items: Vec<ScaleItem>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::ItemBank("bank has no items".into()));
        }
        let mut ids = BTreeSet::new();
        for it in &items {
            if it.item_id.is_empty() {
                return Err(Error::ItemBank("empty item_id".into()));
            }
            if !ids.insert(it.item_id.as_str()) {
                return Err(Error::ItemBank(format!("duplicate item_id `{}`", it.item_id)));
            }
            if it.text.trim().is_empty() {
                return Err(Error::ItemBank(format!("item `{}` has empty text", it.item_id)));
            }
        }
        Ok(ItemBank { items })
    }

    fn with_known_scales(items: Vec<ScaleItem>) -> Result<Self> {
        let bank = Self::new(items)?;
        if let Some(it) = bank.items.iter().find(|it| !is_known_scale(&it.scale)) {
            return Err(Error::ItemBank(format!("item `{}` has unknown scale `{}`", it.item_id, it.scale)));
        }
        Ok(bank)
    }

    /// The bundled 89-item bank.
    pub fn canonical() -> Self {
        Self::from_json_str(CANONICAL_BANK_JSON).expect("bundled item bank is valid")
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let items: Vec<ScaleItem> = serde_json::from_str(s)?;
        Self::with_known_scales(items)
    }

    pub fn from_tsv_str(s: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .delimiter(b'\t')
            .quoting(false)
            .from_reader(s.as_bytes());
        let items = rdr.deserialize().collect::<std::result::Result<Vec<ScaleItem>, _>>()?;
        Self::with_known_scales(items)
    }

    pub fn items(&self) -> &[ScaleItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn item_ids(&self) -> Vec<String> {
        self.items.iter().map(|i| i.item_id.clone()).collect()
    }

    pub fn texts(&self) -> Vec<&str> {
        self.items.iter().map(|i| i.text.as_str()).collect()
    }

    pub fn get(&self, item_id: &str) -> Option<&ScaleItem> {
        self.items.iter().find(|i| i.item_id == item_id)
    }

    /// SHA-256 over ids, scales, sources and texts in bank order.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for it in &self.items {
            for field in [&it.item_id, &it.scale, &it.source, &it.text] {
                h.update(field.as_bytes());
                h.update([0x1f]);
            }
            h.update([0x1e]);
        }
        hex::encode(h.finalize())
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.items)? + "\n")
    }

    pub fn write_tsv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::WriterBuilder::new().delimiter(b'\t').quote_style(csv::QuoteStyle::Never).from_writer(w);
        wtr.write_record(["item_id", "scale", "source", "text"])?;
        for it in &self.items {
            if [&it.item_id, &it.scale, &it.source, &it.text].iter().any(|f| f.contains(['\t', '\n'])) {
                return Err(Error::ItemBank(format!("item `{}` cannot be written as TSV", it.item_id)));
            }
            wtr.write_record([&it.item_id, &it.scale, &it.source, &it.text])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Loads a JSON (default) or `.tsv` item bank.
pub fn load_item_bank(path: &Path) -> Result<ItemBank> {
    let s = std::fs::read_to_string(path)?;
    match path.extension().and_then(|e| e.to_str()) {
        Some("tsv") => ItemBank::from_tsv_str(&s),
        _ => ItemBank::from_json_str(&s),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub item_count: usize,
    pub per_scale: BTreeMap<String, usize>,
    pub conformant: bool,
    pub deviations: Vec<String>,
    pub warnings: Vec<String>,
}

/// Compares scale counts against the canonical manifest.
pub fn validate_item_bank(bank: &ItemBank) -> ValidationReport {
    let mut per_scale: BTreeMap<String, usize> = BTreeMap::new();
    for it in bank.items() {
        *per_scale.entry(it.scale.clone()).or_default() += 1;
    }
    let mut deviations = Vec::new();
    let mut warnings = Vec::new();
    for (scale, expected) in SCALE_MANIFEST {
        let got = per_scale.get(scale).copied().unwrap_or(0);
        if got != expected {
            deviations.push(format!("{scale} expected {expected} got {got}"));
        }
    }
    for scale in per_scale.keys().filter(|s| !is_known_scale(s)) {
        warnings.push(format!("unknown scale `{scale}`"));
    }
    if bank.len() != CANONICAL_ITEM_COUNT {
        deviations.push(format!("item count expected {CANONICAL_ITEM_COUNT} got {}", bank.len()));
    }
    ValidationReport {
        item_count: bank.len(),
        conformant: deviations.is_empty() && warnings.is_empty(),
        per_scale,
        deviations,
        warnings,
    }
}

/// One published top-loading item of a named reference factor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceLoading {
    pub item_id: String,
    pub text: String,
    pub loading: f64,
    pub questionnaire: String,
}

/// Published factor name with its highest-loading items.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceFactor {
    pub name: String,
    pub top_items: Vec<ReferenceLoading>,
}

/// The eleven published factor labels and their top items.
pub fn reference_factors() -> Vec<ReferenceFactor> {
    serde_json::from_str(REFERENCE_FACTORS_JSON).expect("bundled factor fixture is valid")
}

pub fn reference_factor_names() -> Vec<String> {
    reference_factors().into_iter().map(|f| f.name).collect()
}
