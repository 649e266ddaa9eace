//! Post × item similarity scores.
//!
//! A post is split into fixed-size word chunks; each chunk is embedded and
//! compared to every item vector by cosine similarity, and chunk scores are
//! averaged into one score per item.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::{self, TableHeader};
use crate::corpus::Post;
use crate::embedder::{encode_with, Embedder, EmbeddingMatrix, EmbeddingProviderConfig};
use crate::error::{Error, Result};
use crate::itembank::ItemBank;
use crate::linalg::Matrix;
use crate::scalar::Scalar;
use crate::text::words;

pub const DEFAULT_CHUNK_WORDS: usize = 100;

/// Splits `text` into consecutive `size`-word windows; the last window keeps
/// whatever remains. Words inside a chunk are joined by single spaces.
pub fn chunk_words(text: &str, size: usize) -> Result<Vec<String>> {
    if size < 1 {
        return Err(Error::Config("chunk size must be >= 1".into()));
    }
    let w: Vec<&str> = words(text).collect();
    if w.is_empty() {
        return Err(Error::InvalidInput("text has no words".into()));
    }
    Ok(w.chunks(size).map(|c| c.join(" ")).collect())
}

/// Cosine similarity, clamped to [-1, 1].
pub fn cosine<T: Scalar>(u: &[T], v: &[T]) -> Result<T> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch { expected: u.len(), got: v.len() });
    }
    let (mut dot, mut uu, mut vv) = (T::zero(), T::zero(), T::zero());
    for (&a, &b) in u.iter().zip(v) {
        dot += a * b;
        uu += a * a;
        vv += b * b;
    }
    if uu == T::zero() || vv == T::zero() {
        return Err(Error::ZeroVector);
    }
    Ok((dot / (uu.sqrt() * vv.sqrt())).max(-T::one()).min(T::one()))
}

#[inline]
fn dot_f64(a: &[f32], b: &[f32]) -> f64 {
    // 4 independent accumulators so the loop vectorizes
    let mut acc = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for k in 0..4 {
            acc[k] += x[k] as f64 * y[k] as f64;
        }
    }
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(&x, &y)| x as f64 * y as f64).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Item embeddings bound to the bank they were computed from.
#[derive(Clone, Debug)]
pub struct ItemVectors {
    vectors: EmbeddingMatrix,
    norms: Vec<f64>,
    item_ids: Vec<String>,
    bank_fingerprint: String,
}

impl ItemVectors {
    pub fn new(bank: &ItemBank, vectors: EmbeddingMatrix) -> Result<Self> {
        if vectors.rows() != bank.len() {
            return Err(Error::DimensionMismatch { expected: bank.len(), got: vectors.rows() });
        }
        let norms: Vec<f64> = vectors.iter_rows().map(|r| dot_f64(r, r).sqrt()).collect();
        if norms.contains(&0.0) {
            return Err(Error::ZeroVector);
        }
        Ok(ItemVectors { vectors, norms, item_ids: bank.item_ids(), bank_fingerprint: bank.fingerprint() })
    }

    /// Embeds the bank's item texts.
    pub fn encode(bank: &ItemBank, provider: &dyn Embedder, cfg: &EmbeddingProviderConfig) -> Result<Self> {
        Self::new(bank, encode_with(provider, &bank.texts(), cfg)?)
    }

    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.dim()
    }

    pub fn bank_fingerprint(&self) -> &str {
        &self.bank_fingerprint
    }

    pub fn provider_tag(&self) -> &str {
        self.vectors.provider_tag()
    }

    /// Cosine of one chunk vector against every item, written into `out`.
    pub fn score_chunk_into(&self, chunk: &[f32], out: &mut [f64]) -> Result<()> {
        if chunk.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: chunk.len() });
        }
        let cn = dot_f64(chunk, chunk).sqrt();
        if cn == 0.0 {
            return Err(Error::ZeroVector);
        }
        for ((o, item), &inorm) in out.iter_mut().zip(self.vectors.iter_rows()).zip(&self.norms) {
            *o = (dot_f64(chunk, item) / (cn * inorm)).clamp(-1.0, 1.0);
        }
        Ok(())
    }

    pub fn score_chunk(&self, chunk: &[f32]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.len()];
        self.score_chunk_into(chunk, &mut out)?;
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChunkWeighting {
    /// Every chunk counts equally, including a short trailing chunk.
    #[default]
    Mean,
    /// Chunks weighted by word count.
    WordCount,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoringConfig {
    pub chunk_words: usize,
    pub weighting: ChunkWeighting,
    /// Posts embedded per provider round trip.
    pub post_batch: usize,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        ScoringConfig { chunk_words: DEFAULT_CHUNK_WORDS, weighting: ChunkWeighting::Mean, post_batch: 256 }
    }
}

/// Aggregates per-chunk item scores into one post score vector.
fn aggregate(chunk_scores: &[Vec<f64>], chunk_lens: &[usize], weighting: ChunkWeighting) -> Vec<f64> {
    let p = chunk_scores[0].len();
    let mut acc = vec![0.0f64; p];
    let weights: Vec<f64> = match weighting {
        ChunkWeighting::Mean => vec![1.0; chunk_scores.len()],
        ChunkWeighting::WordCount => chunk_lens.iter().map(|&n| n as f64).collect(),
    };
    for (s, &w) in chunk_scores.iter().zip(&weights) {
        for (a, &x) in acc.iter_mut().zip(s) {
            *a += w * x;
        }
    }
    let total: f64 = weights.iter().sum();
    acc.iter_mut().for_each(|a| *a /= total);
    acc
}

fn chunk_lens(chunks: &[String]) -> Vec<usize> {
    chunks.iter().map(|c| words(c).count()).collect()
}

/// Mean chunk-to-item cosine for a single post.
pub fn score_post(
    post: &Post,
    items: &ItemVectors,
    provider: &dyn Embedder,
    provider_cfg: &EmbeddingProviderConfig,
    cfg: &ScoringConfig,
) -> Result<Vec<f64>> {
    let chunks = chunk_words(&post.text, cfg.chunk_words)?;
    let refs: Vec<&str> = chunks.iter().map(String::as_str).collect();
    let emb = encode_with(provider, &refs, provider_cfg)?;
    let scores = emb.iter_rows().map(|r| items.score_chunk(r)).collect::<Result<Vec<_>>>()?;
    Ok(aggregate(&scores, &chunk_lens(&chunks), cfg.weighting))
}

/// Posts × items score table.
#[derive(Clone, Debug, PartialEq)]
pub struct ItemScoreMatrix {
    pub post_ids: Vec<String>,
    pub item_ids: Vec<String>,
    /// Row-major `post_ids.len() × item_ids.len()`.
    pub scores: Vec<f32>,
    pub bank_fingerprint: String,
    pub provider_tag: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemScoreHeader {
    pub post_count: usize,
    pub item_ids: Vec<String>,
    pub bank_fingerprint: String,
    pub provider_tag: String,
    pub post_ids: Vec<String>,
}

impl TableHeader for ItemScoreHeader {
    fn row_count(&self) -> usize {
        self.post_count
    }

    fn column_count(&self) -> usize {
        self.item_ids.len()
    }
}

impl ItemScoreMatrix {
    pub fn rows(&self) -> usize {
        self.post_ids.len()
    }

    pub fn cols(&self) -> usize {
        self.item_ids.len()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let p = self.cols();
        &self.scores[i * p..(i + 1) * p]
    }

    pub fn to_matrix<T: Scalar>(&self) -> Matrix<T> {
        let data = self.scores.iter().map(|&x| T::lit(x as f64)).collect();
        Matrix::from_vec(self.rows(), self.cols(), data).expect("consistent shape")
    }

    /// Rejects a matrix whose columns are not bound to `bank`.
    pub fn check_bank(&self, bank: &ItemBank) -> Result<()> {
        if self.cols() != bank.len() {
            return Err(Error::DimensionMismatch { expected: bank.len(), got: self.cols() });
        }
        if self.bank_fingerprint != bank.fingerprint() {
            return Err(Error::FingerprintMismatch {
                what: "item bank".into(),
                expected: bank.fingerprint(),
                found: self.bank_fingerprint.clone(),
            });
        }
        Ok(())
    }

    fn header(&self) -> ItemScoreHeader {
        ItemScoreHeader {
            post_count: self.rows(),
            item_ids: self.item_ids.clone(),
            bank_fingerprint: self.bank_fingerprint.clone(),
            provider_tag: self.provider_tag.clone(),
            post_ids: self.post_ids.clone(),
        }
    }

    pub fn write_to<W: Write>(&self, w: W) -> Result<()> {
        container::write_table(w, &self.header(), &self.scores)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        container::save_table(path, &self.header(), &self.scores)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (h, scores): (ItemScoreHeader, _) = container::load_table(path)?;
        let m = ItemScoreMatrix {
            post_ids: h.post_ids,
            item_ids: h.item_ids,
            scores,
            bank_fingerprint: h.bank_fingerprint,
            provider_tag: h.provider_tag,
        };
        if m.post_ids.len() != h.post_count {
            return Err(Error::Artifact { path: path.into(), message: "post_ids length != post_count".into() });
        }
        Ok(m)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        container::write_csv(w, "post_id", &self.post_ids, &self.item_ids, &self.scores)
    }
}

#[derive(Debug)]
pub struct ScoreOutcome {
    pub matrix: ItemScoreMatrix,
    /// `(post id, reason)` for posts that could not be scored.
    pub skipped: Vec<(String, String)>,
}

/// Scores every post; rows follow input order. Posts that fail their own
/// preconditions are skipped and reported; provider failures abort.
pub fn score_corpus(
    posts: &[Post],
    items: &ItemVectors,
    provider: &dyn Embedder,
    provider_cfg: &EmbeddingProviderConfig,
    cfg: &ScoringConfig,
) -> Result<ScoreOutcome> {
    if posts.is_empty() {
        return Err(Error::InvalidInput("no posts to score".into()));
    }
    if cfg.post_batch < 1 {
        return Err(Error::Config("post_batch must be >= 1".into()));
    }
    let p = items.len();
    let mut post_ids = Vec::with_capacity(posts.len());
    let mut scores = Vec::with_capacity(posts.len() * p);
    let mut skipped = Vec::new();

    for batch in posts.chunks(cfg.post_batch) {
        let mut chunked: Vec<(&Post, Vec<String>)> = Vec::with_capacity(batch.len());
        for post in batch {
            match chunk_words(&post.text, cfg.chunk_words) {
                Ok(c) => chunked.push((post, c)),
                Err(e) => skipped.push((post.id.clone(), e.to_string())),
            }
        }
        if chunked.is_empty() {
            continue;
        }
        let all: Vec<&str> = chunked.iter().flat_map(|(_, c)| c.iter().map(String::as_str)).collect();
        let emb = encode_with(provider, &all, provider_cfg)?;
        if emb.dim() != items.dim() {
            return Err(Error::DimensionMismatch { expected: items.dim(), got: emb.dim() });
        }
        let chunk_scores: Vec<Vec<f64>> =
            (0..emb.rows()).into_par_iter().map(|i| items.score_chunk(emb.row(i))).collect::<Result<_>>()?;
        let mut offset = 0;
        for (post, chunks) in &chunked {
            let rows = &chunk_scores[offset..offset + chunks.len()];
            offset += chunks.len();
            let agg = aggregate(rows, &chunk_lens(chunks), cfg.weighting);
            post_ids.push(post.id.clone());
            scores.extend(agg.iter().map(|&x| x as f32));
        }
    }
    if post_ids.is_empty() {
        return Err(Error::InvalidInput("every post was skipped".into()));
    }
    Ok(ScoreOutcome {
        matrix: ItemScoreMatrix {
            post_ids,
            item_ids: items.item_ids.clone(),
            scores,
            bank_fingerprint: items.bank_fingerprint.clone(),
            provider_tag: items.provider_tag().to_string(),
        },
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedder::{EmbeddingProviderConfig, StubEmbedder};
    use crate::itembank::ScaleItem;

    fn text_of(n: usize) -> String {
        (0..n).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ")
    }

    #[test]
    fn chunk_sizes() {
        let sizes = |n| chunk_words(&text_of(n), 100).unwrap().iter().map(|c| words(c).count()).collect::<Vec<_>>();
        assert_eq!(sizes(50), [50]);
        assert_eq!(sizes(250), [100, 100, 50]);
        assert_eq!(sizes(100), [100]);
        assert_eq!(chunk_words(&text_of(100), 100).unwrap()[0], text_of(100));
        assert!(chunk_words("  ", 100).is_err());
        assert!(chunk_words("a", 0).is_err());
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine(&[1.0f64, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine(&[1.0f64, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine(&[1.0f64, 1.0], &[1.0, 0.0]).unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!(matches!(cosine(&[0.0f64, 0.0], &[1.0, 0.0]), Err(Error::ZeroVector)));
        assert!(cosine(&[1.0f32], &[1.0, 0.0]).is_err());
    }

    fn small_bank() -> ItemBank {
        let texts = ["I tend to be cynical.", "Capitalism is ruining the world.", "I tend to lack remorse."];
        ItemBank::new(
            texts
                .iter()
                .enumerate()
                .map(|(i, t)| ScaleItem {
                    item_id: format!("I{i}"),
                    scale: "Dirty Dozen".into(),
                    source: "s".into(),
                    text: t.to_string(),
                    provenance: None,
                })
                .collect(),
        )
        .unwrap()
    }

    fn post(id: &str, text: &str) -> Post {
        Post { id: id.into(), user: "u".into(), forum: "f".into(), created_utc: 1, text: text.into(), lang: None }
    }

    #[test]
    fn self_similarity_is_one() {
        let bank = small_bank();
        let cfg = EmbeddingProviderConfig::stub(32, 5);
        let stub = StubEmbedder { dim: 32, seed: 5 };
        let items = ItemVectors::encode(&bank, &stub, &cfg).unwrap();
        let s = score_post(&post("p", "Capitalism is ruining the world."), &items, &stub, &cfg, &ScoringConfig::default())
            .unwrap();
        assert!((s[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn chunk_mean_and_weighting() {
        let a = vec![0.2, 0.0];
        let b = vec![0.4, 1.0];
        assert_eq!(aggregate(std::slice::from_ref(&a), &[7], ChunkWeighting::Mean), a);
        let m = aggregate(&[a.clone(), b.clone()], &[100, 10], ChunkWeighting::Mean);
        assert!((m[0] - 0.3).abs() < 1e-15 && (m[1] - 0.5).abs() < 1e-15);
        let w = aggregate(&[a, b], &[100, 10], ChunkWeighting::WordCount);
        assert!((w[0] - (0.2 * 100.0 + 0.4 * 10.0) / 110.0).abs() < 1e-15);
    }

    #[test]
    fn corpus_skips_bad_posts_and_rejects_empty() {
        let bank = small_bank();
        let cfg = EmbeddingProviderConfig::stub(16, 1);
        let stub = StubEmbedder { dim: 16, seed: 1 };
        let items = ItemVectors::encode(&bank, &stub, &cfg).unwrap();
        let posts = vec![post("a", "hello there"), post("b", "   "), post("c", "more words here")];
        let out = score_corpus(&posts, &items, &stub, &cfg, &ScoringConfig::default()).unwrap();
        assert_eq!(out.matrix.post_ids, ["a", "c"]);
        assert_eq!(out.skipped.len(), 1);
        assert_eq!(out.skipped[0].0, "b");
        assert!(out.matrix.scores.iter().all(|s| (-1.0..=1.0).contains(s)));
        assert!(score_corpus(&[], &items, &stub, &cfg, &ScoringConfig::default()).is_err());
    }

    #[test]
    fn file_round_trip_and_bank_check() {
        let bank = small_bank();
        let cfg = EmbeddingProviderConfig::stub(16, 1);
        let stub = StubEmbedder { dim: 16, seed: 1 };
        let items = ItemVectors::encode(&bank, &stub, &cfg).unwrap();
        let posts = vec![post("a", "hello there"), post("c", "more words here")];
        let m = score_corpus(&posts, &items, &stub, &cfg, &ScoringConfig::default()).unwrap().matrix;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scores.e11s");
        m.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
        let header: serde_json::Value = serde_json::from_slice(&bytes[..nl]).unwrap();
        assert_eq!(header["post_count"], 2);
        assert_eq!(header["item_ids"].as_array().unwrap().len(), 3);
        assert_eq!(bytes.len() - nl - 1, 2 * 3 * 4);
        let back = ItemScoreMatrix::load(&path).unwrap();
        assert_eq!(back, m);
        back.check_bank(&bank).unwrap();
        assert!(back.check_bank(&ItemBank::canonical()).is_err());

        let mut csv = Vec::new();
        m.write_csv(&mut csv).unwrap();
        let csv = String::from_utf8(csv).unwrap();
        assert!(csv.starts_with("post_id,I0,I1,I2\na,"));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn cosine_scale_invariant(
                u in prop::collection::vec(-10.0f64..10.0, 8),
                v in prop::collection::vec(-10.0f64..10.0, 8),
                c in 0.01f64..100.0,
            ) {
                prop_assume!(u.iter().any(|x| x.abs() > 1e-3) && v.iter().any(|x| x.abs() > 1e-3));
                let base = cosine(&u, &v).unwrap();
                let scaled: Vec<f64> = u.iter().map(|x| x * c).collect();
                prop_assert!((cosine(&scaled, &v).unwrap() - base).abs() < 1e-7);
                prop_assert!((-1.0..=1.0).contains(&base));
            }

            #[test]
            fn bank_permutation_permutes_columns(words in prop::collection::vec("[a-e]{1,3}", 1..300), rot in 0usize..3) {
                let text = words.join(" ");
                let bank = small_bank();
                let mut items_rot = bank.items().to_vec();
                items_rot.rotate_left(rot);
                let bank_rot = ItemBank::new(items_rot).unwrap();
                let cfg = EmbeddingProviderConfig::stub(16, 2);
                let stub = StubEmbedder { dim: 16, seed: 2 };
                let a = ItemVectors::encode(&bank, &stub, &cfg).unwrap();
                let b = ItemVectors::encode(&bank_rot, &stub, &cfg).unwrap();
                let p = post("x", &text);
                let sa = score_post(&p, &a, &stub, &cfg, &ScoringConfig::default()).unwrap();
                let sb = score_post(&p, &b, &stub, &cfg, &ScoringConfig::default()).unwrap();
                let mut sa_rot = sa.clone();
                sa_rot.rotate_left(rot);
                prop_assert_eq!(sa_rot, sb);
                prop_assert!(sa.iter().all(|s| (-1.0..=1.0).contains(s)));
            }
        }
    }
}
