//! Exploratory factor analysis over item scores.
//!
//! Principal-axis extraction from the correlation matrix, varimax rotation
//! (promax optional), and regression-method factor scores.

mod diagnostics;
mod rotation;

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::container::{self, TableHeader};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::itembank::ItemBank;
use crate::linalg::Matrix;
use crate::scalar::Scalar;

pub use diagnostics::{
    bartlett, column_stats, correlation_matrix, correlation_matrix_named, kmo, parallel_analysis, quantile,
    BartlettResult, CorrelationMatrix, KmoResult, ParallelAnalysis, ParallelAnalysisConfig,
};
pub use rotation::{promax, varimax, varimax_criterion, Rotated, Rotation};

/// Communalities above this are treated as Heywood cases.
pub const HEYWOOD_CEILING: f64 = 1.0 - 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EfaOptions {
    pub rotation: Rotation,
    pub max_iter: usize,
    pub tol: f64,
    pub rotation_max_iter: usize,
    pub rotation_tol: f64,
}

impl Default for EfaOptions {
    fn default() -> Self {
        EfaOptions { rotation: Rotation::Varimax, max_iter: 100, tol: 1e-6, rotation_max_iter: 1000, rotation_tol: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitMeta {
    pub n: usize,
    pub extraction: String,
    pub rotation: String,
    pub converged: bool,
    pub iterations: usize,
    pub rotation_converged: bool,
    /// Items whose communality was clamped.
    pub heywood_items: Vec<String>,
    pub warnings: Vec<String>,
    /// SHA-256 of the correlation matrix the model was fit on.
    pub correlation_sha256: String,
    /// Factor correlations; present only for oblique rotations.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub factor_correlations: Option<Vec<Vec<f64>>>,
}

/// Result of factoring a correlation matrix.
#[derive(Clone, Debug)]
pub struct Extraction<T> {
    /// Rotated, sign-fixed, ordered by descending sum of squared loadings.
    pub loadings: Matrix<T>,
    pub communalities: Vec<T>,
    /// Eigenvalues of the unreduced correlation matrix, descending.
    pub eigenvalues: Vec<T>,
    /// Maps unrotated to rotated loadings, with the same column order and signs.
    pub rotation: Matrix<T>,
    pub factor_correlations: Option<Matrix<T>>,
    pub converged: bool,
    pub iterations: usize,
    pub rotation_converged: bool,
    pub heywood: Vec<usize>,
    /// `R⁻¹ S`, S the structure matrix.
    pub score_weights: Matrix<T>,
}

/// Principal-axis factoring of `r` into `k` factors, then rotation.
pub fn factor_correlation<T: Scalar>(r: &CorrelationMatrix<T>, k: usize, opts: &EfaOptions) -> Result<Extraction<T>> {
    let p = r.p();
    if k < 1 || k >= p {
        return Err(Error::InvalidInput(format!("k must satisfy 1 <= k < p, got k={k}, p={p}")));
    }
    let ceiling = T::lit(HEYWOOD_CEILING);
    let r_inv = r.r.inverse()?;
    let mut h2: Vec<T> =
        (0..p).map(|i| (T::one() - T::one() / r_inv[(i, i)]).max(T::zero()).min(ceiling)).collect();
    let mut heywood = vec![false; p];
    let tol = T::lit(opts.tol);
    let mut loadings = Matrix::zeros(p, k);
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=opts.max_iter.max(1) {
        iterations = it;
        let mut reduced = r.r.clone();
        for i in 0..p {
            reduced[(i, i)] = h2[i];
        }
        let (vals, vecs) = reduced.symmetric_eigen()?;
        loadings = Matrix::from_fn(p, k, |i, j| vecs[(i, j)] * vals[j].max(T::zero()).sqrt());
        let mut delta = T::zero();
        for i in 0..p {
            let mut h = loadings.row(i).iter().map(|&v| v * v).sum::<T>();
            if h > ceiling {
                h = ceiling;
                heywood[i] = true;
            }
            delta = delta.max((h - h2[i]).abs());
            h2[i] = h;
        }
        if delta < tol {
            converged = true;
            break;
        }
    }
    // keep the communality identity exact for clamped rows
    for i in 0..p {
        let ss = loadings.row(i).iter().map(|&v| v * v).sum::<T>();
        if ss > ceiling {
            heywood[i] = true;
            let f = (ceiling / ss).sqrt();
            loadings.row_mut(i).iter_mut().for_each(|v| *v *= f);
        }
    }
    let communalities: Vec<T> = (0..p).map(|i| loadings.row(i).iter().map(|&v| v * v).sum()).collect();

    let rot_tol = T::lit(opts.rotation_tol);
    let (rotated, phi) = match opts.rotation {
        Rotation::None => (
            Rotated { loadings: loadings.clone(), rotation: Matrix::identity(k), iterations: 0, converged: true },
            None,
        ),
        Rotation::Varimax => (varimax(&loadings, opts.rotation_max_iter, rot_tol)?, None),
        Rotation::Promax { power } => {
            if power < 2 {
                return Err(Error::Config("promax power must be >= 2".into()));
            }
            let (rot, phi) = promax(&loadings, power, opts.rotation_max_iter, rot_tol)?;
            (rot, Some(phi))
        }
    };

    // sign-fix, then order by descending sum of squares
    let mut lam = rotated.loadings;
    let mut tmat = rotated.rotation;
    let mut signs = vec![T::one(); k];
    for j in 0..k {
        let mut best = 0;
        for i in 1..p {
            if lam[(i, j)].abs() > lam[(best, j)].abs() {
                best = i;
            }
        }
        if lam[(best, j)] < T::zero() {
            signs[j] = -T::one();
        }
    }
    let ssl: Vec<T> = (0..k).map(|j| (0..p).map(|i| lam[(i, j)] * lam[(i, j)]).sum()).collect();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| ssl[b].partial_cmp(&ssl[a]).expect("finite").then(a.cmp(&b)));
    lam = Matrix::from_fn(p, k, |i, j| lam[(i, order[j])] * signs[order[j]]);
    tmat = Matrix::from_fn(k, k, |i, j| tmat[(i, order[j])] * signs[order[j]]);
    let phi = phi.map(|f| Matrix::from_fn(k, k, |a, b| f[(order[a], order[b])] * signs[order[a]] * signs[order[b]]));

    let structure = match &phi {
        Some(f) => lam.matmul(f)?,
        None => lam.clone(),
    };
    let score_weights = r_inv.matmul(&structure)?;
    Ok(Extraction {
        loadings: lam,
        communalities,
        eigenvalues: r.r.symmetric_eigenvalues()?,
        rotation: tmat,
        factor_correlations: phi,
        converged,
        iterations,
        rotation_converged: rotated.converged,
        heywood: (0..p).filter(|&i| heywood[i]).collect(),
        score_weights,
    })
}

/// Hex SHA-256 over the little-endian `f64` entries of a matrix.
pub fn matrix_sha256<T: Scalar>(m: &Matrix<T>) -> String {
    let mut h = Sha256::new();
    h.update((m.rows() as u64).to_le_bytes());
    h.update((m.cols() as u64).to_le_bytes());
    for v in m.as_slice() {
        h.update(v.as_f64().to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Fitted factor model, frozen after fitting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar + Serialize", deserialize = "T: Scalar + DeserializeOwned"))]
pub struct EfaModel<T> {
    pub item_ids: Vec<String>,
    pub means: Vec<T>,
    pub sds: Vec<T>,
    pub loadings: Matrix<T>,
    pub eigenvalues: Vec<T>,
    pub communalities: Vec<T>,
    pub score_weights: Matrix<T>,
    pub factor_names: Vec<String>,
    pub k: usize,
    pub fit_meta: FitMeta,
    #[serde(default)]
    pub bank_fingerprint: String,
}

/// Factors `x` (posts × items) into `k` factors.
pub fn fit_efa<T: Scalar>(x: &Matrix<T>, item_ids: &[String], k: usize, opts: &EfaOptions) -> Result<EfaModel<T>> {
    let (n, p) = (x.rows(), x.cols());
    if item_ids.len() != p {
        return Err(Error::DimensionMismatch { expected: p, got: item_ids.len() });
    }
    if k < 1 || k >= p {
        return Err(Error::InvalidInput(format!("k must satisfy 1 <= k < p, got k={k}, p={p}")));
    }
    if n <= p {
        return Err(Error::InvalidInput(format!("need n > p, got n={n}, p={p}")));
    }
    let (means, sds) = column_stats(x);
    let r = correlation_matrix_named(x, item_ids)?;
    let ex = factor_correlation(&r, k, opts)?;
    let mut warnings = Vec::new();
    if !ex.converged {
        warnings.push(format!("principal-axis iteration did not converge in {} iterations", ex.iterations));
    }
    if !ex.rotation_converged {
        warnings.push("rotation did not converge".to_string());
    }
    let heywood_items: Vec<String> = ex.heywood.iter().map(|&i| item_ids[i].clone()).collect();
    if !heywood_items.is_empty() {
        warnings.push(format!("Heywood case on {} item(s); communalities clamped", heywood_items.len()));
    }
    Ok(EfaModel {
        item_ids: item_ids.to_vec(),
        means,
        sds,
        loadings: ex.loadings,
        eigenvalues: ex.eigenvalues,
        communalities: ex.communalities,
        score_weights: ex.score_weights,
        factor_names: (1..=k).map(|j| format!("F{j}")).collect(),
        k,
        fit_meta: FitMeta {
            n,
            extraction: "principal-axis".into(),
            rotation: opts.rotation.name().into(),
            converged: ex.converged,
            iterations: ex.iterations,
            rotation_converged: ex.rotation_converged,
            heywood_items,
            warnings,
            correlation_sha256: matrix_sha256(&r.r),
            factor_correlations: ex
                .factor_correlations
                .map(|f| (0..k).map(|i| f.row(i).iter().map(|v| v.as_f64()).collect()).collect()),
        },
        bank_fingerprint: String::new(),
    })
}

impl<T: Scalar + Serialize + DeserializeOwned> EfaModel<T> {
    pub fn with_factor_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.k {
            return Err(Error::DimensionMismatch { expected: self.k, got: names.len() });
        }
        self.factor_names = names;
        Ok(self)
    }

    pub fn with_bank_fingerprint(mut self, fp: impl Into<String>) -> Self {
        self.bank_fingerprint = fp.into();
        self
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(s)?;
        m.validate()?;
        Ok(m)
    }

    fn validate(&self) -> Result<()> {
        let p = self.item_ids.len();
        let bad = |what: &str| Err(Error::InvalidInput(format!("model field `{what}` has the wrong shape")));
        if self.k < 1 || self.factor_names.len() != self.k {
            return bad("k");
        }
        if self.means.len() != p || self.sds.len() != p || self.communalities.len() != p {
            return bad("means/sds/communalities");
        }
        if self.loadings.rows() != p || self.loadings.cols() != self.k {
            return bad("loadings");
        }
        if self.score_weights.rows() != p || self.score_weights.cols() != self.k {
            return bad("score_weights");
        }
        if self.sds.iter().any(|&s| !(s > T::zero())) {
            return bad("sds");
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json_string()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)?;
        Self::from_json_str(&s).map_err(|e| Error::Artifact { path: path.into(), message: e.to_string() })
    }

    /// SHA-256 of the serialized model.
    pub fn fingerprint(&self) -> String {
        let s = serde_json::to_vec(self).expect("model serializes");
        hex::encode(Sha256::digest(&s))
    }

    /// Errors unless `item_ids` equals the model's column order.
    pub fn check_items(&self, item_ids: &[String]) -> Result<()> {
        if item_ids != self.item_ids.as_slice() {
            return Err(Error::FingerprintMismatch {
                what: "item columns".into(),
                expected: self.item_ids.join(","),
                found: item_ids.join(","),
            });
        }
        Ok(())
    }

    /// Regression-method scores `Z · W` for raw item rows.
    pub fn score_rows(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        let (p, k) = (self.item_ids.len(), self.k);
        if x.cols() != p {
            return Err(Error::DimensionMismatch { expected: p, got: x.cols() });
        }
        let rows: Vec<Vec<T>> = (0..x.rows())
            .into_par_iter()
            .map(|i| {
                let mut out = vec![T::zero(); k];
                for (j, &v) in x.row(i).iter().enumerate() {
                    let z = (v - self.means[j]) / self.sds[j];
                    for (o, &w) in out.iter_mut().zip(self.score_weights.row(j)) {
                        *o += z * w;
                    }
                }
                out
            })
            .collect();
        Matrix::from_vec(x.rows(), k, rows.into_iter().flatten().collect())
    }
}

/// Posts × factors score table.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorScoreMatrix<T> {
    pub post_ids: Vec<String>,
    pub factor_names: Vec<String>,
    pub scores: Matrix<T>,
    pub model_fingerprint: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorScoreHeader {
    pub post_count: usize,
    pub factor_names: Vec<String>,
    pub model_fingerprint: String,
    pub post_ids: Vec<String>,
}

impl TableHeader for FactorScoreHeader {
    fn row_count(&self) -> usize {
        self.post_count
    }

    fn column_count(&self) -> usize {
        self.factor_names.len()
    }
}

/// Scores the rows of `x`, whose columns are `item_ids`.
pub fn factor_scores<T: Scalar + Serialize + DeserializeOwned>(
    x: &Matrix<T>,
    item_ids: &[String],
    post_ids: &[String],
    model: &EfaModel<T>,
) -> Result<FactorScoreMatrix<T>> {
    model.check_items(item_ids)?;
    if post_ids.len() != x.rows() {
        return Err(Error::DimensionMismatch { expected: x.rows(), got: post_ids.len() });
    }
    let scores = model.score_rows(x)?;
    if scores.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite factor score".into()));
    }
    Ok(FactorScoreMatrix {
        post_ids: post_ids.to_vec(),
        factor_names: model.factor_names.clone(),
        scores,
        model_fingerprint: model.fingerprint(),
    })
}

impl<T: Scalar> FactorScoreMatrix<T> {
    pub fn rows(&self) -> usize {
        self.scores.rows()
    }

    pub fn k(&self) -> usize {
        self.scores.cols()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.factor_names.iter().position(|f| f == name)
    }

    fn header_and_values(&self) -> (FactorScoreHeader, Vec<f32>) {
        let h = FactorScoreHeader {
            post_count: self.rows(),
            factor_names: self.factor_names.clone(),
            model_fingerprint: self.model_fingerprint.clone(),
            post_ids: self.post_ids.clone(),
        };
        let v = self.scores.as_slice().iter().map(|x| x.as_f64() as f32).collect();
        (h, v)
    }

    pub fn write_to<W: Write>(&self, w: W) -> Result<()> {
        let (h, v) = self.header_and_values();
        container::write_table(w, &h, &v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let (h, v) = self.header_and_values();
        container::save_table(path, &h, &v)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (h, v): (FactorScoreHeader, Vec<f32>) = container::load_table(path)?;
        if h.post_ids.len() != h.post_count {
            return Err(Error::Artifact { path: path.into(), message: "post_ids length != post_count".into() });
        }
        let k = h.factor_names.len();
        let scores = Matrix::from_vec(h.post_count, k, v.into_iter().map(|x| T::lit(x as f64)).collect())?;
        Ok(FactorScoreMatrix { post_ids: h.post_ids, factor_names: h.factor_names, scores, model_fingerprint: h.model_fingerprint })
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let (_, v) = self.header_and_values();
        container::write_csv(w, "post_id", &self.post_ids, &self.factor_names, &v)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopLoading {
    pub factor: String,
    pub rank: usize,
    pub item_id: String,
    pub loading: f64,
    pub scale: String,
    pub source: String,
    pub text: String,
}

/// The `m` largest-|loading| items per factor, keeping the loading sign.
pub fn top_loadings_report<T: Scalar>(model: &EfaModel<T>, m: usize, bank: Option<&ItemBank>) -> Result<Vec<TopLoading>> {
    if m < 1 {
        return Err(Error::InvalidInput("m must be >= 1".into()));
    }
    let p = model.item_ids.len();
    let mut out = Vec::with_capacity(model.k * m.min(p));
    for j in 0..model.k {
        let mut idx: Vec<usize> = (0..p).collect();
        idx.sort_by(|&a, &b| {
            let (la, lb) = (model.loadings[(a, j)].abs(), model.loadings[(b, j)].abs());
            lb.partial_cmp(&la).expect("finite").then(a.cmp(&b))
        });
        for (rank, &i) in idx.iter().take(m).enumerate() {
            let id = &model.item_ids[i];
            let item = bank.and_then(|b| b.get(id));
            out.push(TopLoading {
                factor: model.factor_names[j].clone(),
                rank: rank + 1,
                item_id: id.clone(),
                loading: model.loadings[(i, j)].as_f64(),
                scale: item.map(|it| it.scale.clone()).unwrap_or_default(),
                source: item.map(|it| it.source.clone()).unwrap_or_default(),
                text: item.map(|it| it.text.clone()).unwrap_or_default(),
            });
        }
    }
    Ok(out)
}

pub fn write_top_loadings_csv<W: Write>(w: W, rows: &[TopLoading]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Tucker's congruence coefficient between two loading vectors.
pub fn tucker_congruence<T: Scalar>(a: &[T], b: &[T]) -> T {
    let (mut ab, mut aa, mut bb) = (T::zero(), T::zero(), T::zero());
    for (&x, &y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    ab / (aa * bb).sqrt()
}

/// Per reference column, the |congruence| with its matched fitted column.
/// Columns are matched greedily by descending |congruence|.
pub fn aligned_congruence<T: Scalar>(fitted: &Matrix<T>, reference: &Matrix<T>) -> Result<Vec<T>> {
    if fitted.rows() != reference.rows() || fitted.cols() < reference.cols() {
        return Err(Error::DimensionMismatch { expected: reference.cols(), got: fitted.cols() });
    }
    let (kf, kr) = (fitted.cols(), reference.cols());
    let mut pairs = Vec::with_capacity(kf * kr);
    for a in 0..kf {
        for b in 0..kr {
            pairs.push((tucker_congruence(&fitted.column(a), &reference.column(b)).abs(), a, b));
        }
    }
    pairs.sort_by(|x, y| y.0.partial_cmp(&x.0).expect("finite").then((x.1, x.2).cmp(&(y.1, y.2))));
    let mut used_f = vec![false; kf];
    let mut out: Vec<Option<T>> = vec![None; kr];
    for (c, a, b) in pairs {
        if !used_f[a] && out[b].is_none() {
            used_f[a] = true;
            out[b] = Some(c);
        }
    }
    Ok(out.into_iter().map(|c| c.expect("every reference column matched")).collect())
}
