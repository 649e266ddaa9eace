//! Predicting who joins a target community from pre-joining factor scores.

use std::collections::HashMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::corpus::{Cohort, UserTimeline};
use crate::efa::FactorScoreMatrix;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

/// Length of a month in seconds (30.44 days).
pub const MONTH_SECS: i64 = 2_630_016;

/// Exclusive upper bound on post timestamps for a cutoff `months_before` t0.
pub fn cutoff_ts(t0: i64, months_before: u32) -> i64 {
    t0 - months_before as i64 * MONTH_SECS
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledFeatureSet<T> {
    pub user_ids: Vec<String>,
    /// Per-user mean factor scores over the window.
    pub x: Matrix<T>,
    /// 1 = joiner, 0 = control.
    pub y: Vec<u8>,
    pub cutoff_months_before: u32,
    pub n_posts: Vec<usize>,
    /// Latest timestamp used for each row.
    pub last_post_utc: Vec<i64>,
    /// Users without qualifying posts.
    pub excluded: Vec<String>,
}

impl<T: Scalar> LabeledFeatureSet<T> {
    pub fn n_positive(&self) -> usize {
        self.y.iter().filter(|&&v| v == 1).count()
    }

    pub fn n_negative(&self) -> usize {
        self.y.len() - self.n_positive()
    }
}

/// Index from post id to score row.
pub fn row_index<T>(scores: &FactorScoreMatrix<T>) -> HashMap<&str, usize> {
    scores.post_ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect()
}

/// Per-user mean scores over posts strictly before `t0 - months_before`,
/// optionally limited to the `lookback_months` preceding the cutoff.
/// Posts without a score row are ignored.
pub fn build_features<T: Scalar>(
    timelines: &[UserTimeline],
    scores: &FactorScoreMatrix<T>,
    months_before: u32,
    lookback_months: Option<u32>,
) -> Result<LabeledFeatureSet<T>> {
    build_features_indexed(timelines, scores, &row_index(scores), months_before, lookback_months)
}

fn build_features_indexed<T: Scalar>(
    timelines: &[UserTimeline],
    scores: &FactorScoreMatrix<T>,
    index: &HashMap<&str, usize>,
    months_before: u32,
    lookback_months: Option<u32>,
) -> Result<LabeledFeatureSet<T>> {
    let k = scores.k();
    let mut user_ids = Vec::new();
    let mut data = Vec::new();
    let mut y = Vec::new();
    let mut n_posts = Vec::new();
    let mut last_post_utc = Vec::new();
    let mut excluded = Vec::new();
    for tl in timelines {
        let t0 = tl.t0.ok_or_else(|| Error::InvalidInput(format!("user `{}` has no t0", tl.user)))?;
        let end = cutoff_ts(t0, months_before);
        let start = lookback_months.map(|m| end - m as i64 * MONTH_SECS);
        let mut acc = vec![T::zero(); k];
        let mut count = 0usize;
        let mut last = i64::MIN;
        for post in &tl.posts {
            if post.created_utc >= end || start.is_some_and(|s| post.created_utc < s) {
                continue;
            }
            let Some(&row) = index.get(post.id.as_str()) else { continue };
            for (a, &v) in acc.iter_mut().zip(scores.scores.row(row)) {
                *a += v;
            }
            count += 1;
            last = last.max(post.created_utc);
        }
        if count == 0 {
            excluded.push(tl.user.clone());
            continue;
        }
        if last >= end {
            return Err(Error::InvalidInput(format!("feature window for `{}` leaks past its cutoff", tl.user)));
        }
        let nf = T::from_usize_lossy(count);
        data.extend(acc.into_iter().map(|a| a / nf));
        user_ids.push(tl.user.clone());
        y.push(u8::from(tl.cohort == Cohort::Joiner));
        n_posts.push(count);
        last_post_utc.push(last);
    }
    if user_ids.is_empty() {
        return Err(Error::InvalidInput(format!("no user has posts {months_before} months before t0")));
    }
    let x = Matrix::from_vec(user_ids.len(), k, data)?;
    Ok(LabeledFeatureSet { user_ids, x, y, cutoff_months_before: months_before, n_posts, last_post_utc, excluded })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LogisticConfig {
    pub l2: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        LogisticConfig { l2: 1.0, tol: 1e-8, max_iter: 100 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel<T> {
    pub weights: Vec<T>,
    pub intercept: T,
    pub l2: f64,
    pub converged: bool,
    pub iterations: usize,
}

fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

fn check_labels(y: &[u8]) -> Result<()> {
    if y.iter().any(|&v| v > 1) {
        return Err(Error::InvalidInput("labels must be 0 or 1".into()));
    }
    let pos = y.iter().filter(|&&v| v == 1).count();
    if pos == 0 || pos == y.len() {
        return Err(Error::SingleClass);
    }
    Ok(())
}

/// L2-penalized logistic regression by iteratively reweighted least squares.
/// The intercept is not penalized.
pub fn fit_logistic<T: Scalar>(x: &Matrix<T>, y: &[u8], cfg: &LogisticConfig) -> Result<LogisticModel<T>> {
    let (n, k) = (x.rows(), x.cols());
    if y.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: y.len() });
    }
    check_labels(y)?;
    if x.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("features must be finite".into()));
    }
    if !(cfg.l2 >= 0.0) {
        return Err(Error::Config("l2 must be >= 0".into()));
    }
    let l2 = T::lit(cfg.l2);
    let d = k + 1;
    let mut beta = vec![T::zero(); d];
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=cfg.max_iter {
        iterations = it;
        let mut h = Matrix::zeros(d, d);
        let mut g = vec![T::zero(); d];
        for i in 0..n {
            let row = x.row(i);
            let eta = beta[0] + row.iter().zip(&beta[1..]).map(|(&a, &b)| a * b).sum::<T>();
            let p = sigmoid(eta);
            let w = p * (T::one() - p);
            let r = T::lit(y[i] as f64) - p;
            let xi = |j: usize| if j == 0 { T::one() } else { row[j - 1] };
            for a in 0..d {
                g[a] += xi(a) * r;
                for b in a..d {
                    h[(a, b)] += w * xi(a) * xi(b);
                }
            }
        }
        for a in 0..d {
            for b in 0..a {
                h[(a, b)] = h[(b, a)];
            }
        }
        for j in 1..d {
            g[j] -= l2 * beta[j];
            h[(j, j)] += l2;
        }
        let rhs = Matrix::from_vec(d, 1, g)?;
        let step = match h.solve_spd(&rhs) {
            Ok(s) => s,
            Err(_) => {
                // flat directions (e.g. an all-zero column with l2 = 0)
                let ridge = T::lit(1e-10) * (0..d).map(|j| h[(j, j)]).fold(T::one(), T::max);
                for j in 0..d {
                    h[(j, j)] += ridge;
                }
                h.solve_spd(&rhs)?
            }
        };
        let next: Vec<T> = beta.iter().zip(step.as_slice()).map(|(&b, &s)| b + s).collect();
        if next.iter().any(|v| !v.is_finite()) {
            break;
        }
        let max_step = step.as_slice().iter().fold(T::zero(), |m, s| m.max(s.abs()));
        beta = next;
        if max_step < T::lit(cfg.tol) {
            converged = true;
            break;
        }
    }
    Ok(LogisticModel { intercept: beta[0], weights: beta[1..].to_vec(), l2: cfg.l2, converged, iterations })
}

impl<T: Scalar> LogisticModel<T> {
    pub fn decision(&self, row: &[T]) -> T {
        self.intercept + row.iter().zip(&self.weights).map(|(&a, &b)| a * b).sum::<T>()
    }

    pub fn predict_proba(&self, row: &[T]) -> T {
        sigmoid(self.decision(row))
    }
}

/// Area under the ROC curve via the Mann–Whitney statistic; ties count one half.
pub fn roc_auc<T: Scalar>(scores: &[T], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch { expected: scores.len(), got: labels.len() });
    }
    check_labels(labels)?;
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidInput("NaN score".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("no NaN"));
    // twice the positive rank sum, with midranks, stays integral
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let twice_mid = (i + 1 + j + 1) as u128;
        for &t in &idx[i..=j] {
            if labels[t] == 1 {
                twice_rank_sum += twice_mid;
            }
        }
        i = j + 1;
    }
    let n1 = labels.iter().filter(|&&l| l == 1).count() as u128;
    let n0 = labels.len() as u128 - n1;
    let twice_u = twice_rank_sum - n1 * (n1 + 1);
    Ok(twice_u as f64 / (2 * n1 * n0) as f64)
}

/// Fold id per sample. Within each class, samples are shuffled and dealt
/// round-robin, continuing where the previous class stopped, so every fold
/// holds within one of its proportional share of each class. Errors when a
/// fold would be empty.
pub fn stratified_kfold(y: &[u8], folds: usize, seed: u64) -> Result<Vec<usize>> {
    if folds < 2 {
        return Err(Error::Config("folds must be >= 2".into()));
    }
    if y.iter().any(|&v| v > 1) {
        return Err(Error::InvalidInput("labels must be 0 or 1".into()));
    }
    if y.len() < folds {
        return Err(Error::InvalidInput(format!("{} samples cannot fill {folds} folds", y.len())));
    }
    let mut out = vec![0usize; y.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut next = 0usize;
    for class in [0u8, 1] {
        let mut members: Vec<usize> = (0..y.len()).filter(|&i| y[i] == class).collect();
        members.shuffle(&mut rng);
        for m in members {
            out[m] = next % folds;
            next += 1;
        }
    }
    Ok(out)
}

/// Column standardization fitted on training rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer<T> {
    pub means: Vec<T>,
    pub sds: Vec<T>,
}

impl<T: Scalar> Standardizer<T> {
    /// Constant columns get sd 1.
    pub fn fit(x: &Matrix<T>) -> Self {
        let (means, sds) = crate::efa::column_stats(x);
        let sds = sds.into_iter().map(|s| if s > T::zero() && s.is_finite() { s } else { T::one() }).collect();
        Standardizer { means, sds }
    }

    pub fn apply(&self, x: &Matrix<T>) -> Matrix<T> {
        Matrix::from_fn(x.rows(), x.cols(), |i, j| (x[(i, j)] - self.means[j]) / self.sds[j])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CvConfig {
    pub folds: usize,
    pub seed: u64,
    pub logistic: LogisticConfig,
    /// Months of history before each cutoff; `None` uses all of it.
    pub lookback_months: Option<u32>,
}

impl Default for CvConfig {
    fn default() -> Self {
        CvConfig { folds: 5, seed: 0, logistic: LogisticConfig::default(), lookback_months: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldModel<T> {
    pub fold: usize,
    pub standardizer: Standardizer<T>,
    pub model: LogisticModel<T>,
    pub auc: f64,
}

/// Out-of-fold AUC per fold, with the fitted models.
/// Each class needs at least `folds` members so every test fold has both.
pub fn cross_validate<T: Scalar>(x: &Matrix<T>, y: &[u8], cfg: &CvConfig) -> Result<Vec<FoldModel<T>>> {
    check_labels(y)?;
    let pos = y.iter().filter(|&&v| v == 1).count();
    let smallest = pos.min(y.len() - pos);
    if smallest < cfg.folds {
        return Err(Error::InvalidInput(format!("smallest class has {smallest} members, fewer than {} folds", cfg.folds)));
    }
    let assign = stratified_kfold(y, cfg.folds, cfg.seed)?;
    (0..cfg.folds)
        .map(|f| {
            let train: Vec<usize> = (0..y.len()).filter(|&i| assign[i] != f).collect();
            let test: Vec<usize> = (0..y.len()).filter(|&i| assign[i] == f).collect();
            let pick = |rows: &[usize]| Matrix::from_fn(rows.len(), x.cols(), |i, j| x[(rows[i], j)]);
            let (xtr, xte) = (pick(&train), pick(&test));
            let ytr: Vec<u8> = train.iter().map(|&i| y[i]).collect();
            let yte: Vec<u8> = test.iter().map(|&i| y[i]).collect();
            let standardizer = Standardizer::fit(&xtr);
            let model = fit_logistic(&standardizer.apply(&xtr), &ytr, &cfg.logistic)?;
            let xs = standardizer.apply(&xte);
            let scores: Vec<T> = (0..xs.rows()).map(|i| model.decision(xs.row(i))).collect();
            let auc = roc_auc(&scores, &yte)?;
            Ok(FoldModel { fold: f, standardizer, model, auc })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AucPoint<T> {
    pub months_before: u32,
    /// `None` when the features at this offset cannot support CV.
    pub auc_mean: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub n_joiners: usize,
    pub n_controls: usize,
    pub fold_aucs: Vec<f64>,
    pub folds: Vec<FoldModel<T>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub missing_reason: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AucCurve<T> {
    pub points: Vec<AucPoint<T>>,
}

/// Mean and t-based 95% interval over fold AUCs, clipped to [0, 1].
pub fn mean_ci(values: &[f64]) -> (f64, f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, mean, mean);
    }
    let sd = (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt();
    let t = StudentsT::new(0.0, 1.0, n - 1.0).expect("df > 0").inverse_cdf(0.975);
    let half = t * sd / n.sqrt();
    (mean, (mean - half).max(0.0), (mean + half).min(1.0))
}

/// Cross-validated AUC at each months-before offset.
pub fn months_before_sweep<T: Scalar>(
    timelines: &[UserTimeline],
    scores: &FactorScoreMatrix<T>,
    offsets: &[u32],
    cfg: &CvConfig,
) -> Result<AucCurve<T>> {
    if offsets.is_empty() {
        return Err(Error::Config("no offsets to sweep".into()));
    }
    let index = row_index(scores);
    let points = offsets
        .par_iter()
        .map(|&m| {
            let missing = |reason: String, nj, nc| AucPoint {
                months_before: m,
                auc_mean: None,
                ci_low: None,
                ci_high: None,
                n_joiners: nj,
                n_controls: nc,
                fold_aucs: Vec::new(),
                folds: Vec::new(),
                missing_reason: Some(reason),
            };
            let fs = match build_features_indexed(timelines, scores, &index, m, cfg.lookback_months) {
                Ok(fs) => fs,
                Err(e) => return missing(e.to_string(), 0, 0),
            };
            let (nj, nc) = (fs.n_positive(), fs.n_negative());
            match cross_validate(&fs.x, &fs.y, cfg) {
                Ok(folds) => {
                    let fold_aucs: Vec<f64> = folds.iter().map(|f| f.auc).collect();
                    let (mean, lo, hi) = mean_ci(&fold_aucs);
                    AucPoint {
                        months_before: m,
                        auc_mean: Some(mean),
                        ci_low: Some(lo),
                        ci_high: Some(hi),
                        n_joiners: nj,
                        n_controls: nc,
                        fold_aucs,
                        folds,
                        missing_reason: None,
                    }
                }
                Err(e) => missing(e.to_string(), nj, nc),
            }
        })
        .collect();
    Ok(AucCurve { points })
}

/// `months_before, auc_mean, ci_low, ci_high, n_joiners, n_controls`;
/// missing entries leave the AUC fields empty.
pub fn write_auc_csv<W: Write, T>(w: W, curve: &AucCurve<T>) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["months_before", "auc_mean", "ci_low", "ci_high", "n_joiners", "n_controls"])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for p in &curve.points {
        wtr.write_record([
            p.months_before.to_string(),
            opt(p.auc_mean),
            opt(p.ci_low),
            opt(p.ci_high),
            p.n_joiners.to_string(),
            p.n_controls.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Spearman rank correlation (midranks for ties).
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&x, &y| v[x].total_cmp(&v[y]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let mid = (i + j) as f64 / 2.0 + 1.0;
            for &t in &idx[i..=j] {
                r[t] = mid;
            }
            i = j + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma) * (x - ma)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb) * (y - mb)).sum();
    cov / (va * vb).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Post;
    use rand::Rng;

    fn pair_count_auc(s: &[f64], y: &[u8]) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..s.len() {
            for j in 0..s.len() {
                if y[i] == 1 && y[j] == 0 {
                    den += 1.0;
                    if s[i] > s[j] {
                        num += 1.0;
                    } else if s[i] == s[j] {
                        num += 0.5;
                    }
                }
            }
        }
        num / den
    }

    #[test]
    fn auc_examples() {
        let s = [0.9, 0.8, 0.3, 0.2];
        assert_eq!(roc_auc(&s, &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(roc_auc(&s, &[0, 0, 1, 1]).unwrap(), 0.0);
        assert_eq!(roc_auc(&[0.5, 0.5], &[1, 0]).unwrap(), 0.5);
        assert!(matches!(roc_auc(&[0.1, 0.2], &[1, 1]), Err(Error::SingleClass)));
    }

    #[test]
    fn auc_matches_pair_counting() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let n = rng.random_range(2..=12);
            let s: Vec<f64> = (0..n).map(|_| rng.random_range(0..5) as f64 / 4.0).collect();
            let mut y: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
            y[0] = 1;
            y[1] = 0;
            assert_eq!(roc_auc(&s, &y).unwrap(), pair_count_auc(&s, &y));
            let t: Vec<f64> = s.iter().map(|v| v.exp() * 3.0 - 1.0).collect();
            assert_eq!(roc_auc(&t, &y).unwrap(), roc_auc(&s, &y).unwrap());
        }
    }

    #[test]
    fn intercept_only_recovers_logit() {
        let x = Matrix::<f64>::zeros(8, 2);
        let y = [1, 1, 0, 0, 0, 0, 0, 0];
        let m = fit_logistic(&x, &y, &LogisticConfig { l2: 0.0, ..Default::default() }).unwrap();
        assert!((m.intercept - (0.25f64 / 0.75).ln()).abs() < 1e-4);
        assert!(m.weights.iter().all(|w| w.abs() < 1e-8));
        assert!(m.converged);
    }

    #[test]
    fn separated_data_stays_finite() {
        let x = Matrix::from_fn(10, 1, |i, _| i as f64);
        let y: Vec<u8> = (0..10).map(|i| u8::from(i >= 5)).collect();
        let m = fit_logistic(&x, &y, &LogisticConfig::default()).unwrap();
        assert!(m.weights[0].is_finite() && m.weights[0] > 0.0);
        let s: Vec<f64> = (0..10).map(|i| m.decision(x.row(i))).collect();
        assert_eq!(roc_auc(&s, &y).unwrap(), 1.0);
        assert!(fit_logistic(&x, &[1; 10], &LogisticConfig::default()).is_err());
    }

    #[test]
    fn negating_features_negates_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Matrix<f64> = Matrix::from_fn(40, 2, |_, _| rng.random_range(-1.0..1.0));
        let xneg = x.map(|v| -v);
        let y: Vec<u8> = (0..40).map(|i| u8::from(x[(i, 0)] + 0.3 * rng.random_range(-1.0..1.0) > 0.0)).collect();
        let a = fit_logistic(&x, &y, &LogisticConfig::default()).unwrap();
        let b = fit_logistic(&xneg, &y, &LogisticConfig::default()).unwrap();
        for (wa, wb) in a.weights.iter().zip(&b.weights) {
            assert!((wa + wb).abs() < 1e-10);
        }
        assert!((a.intercept - b.intercept).abs() < 1e-10);
        assert_eq!(fit_logistic(&x, &y, &LogisticConfig::default()).unwrap(), a);
    }

    #[test]
    fn kfold_counts() {
        let y: Vec<u8> = (0..10).map(|i| u8::from(i < 5)).collect();
        let f = stratified_kfold(&y, 5, 3).unwrap();
        for fold in 0..5 {
            let pos = (0..10).filter(|&i| f[i] == fold && y[i] == 1).count();
            let neg = (0..10).filter(|&i| f[i] == fold && y[i] == 0).count();
            assert_eq!((pos, neg), (1, 1));
        }
        let y: Vec<u8> = (0..10).map(|i| u8::from(i < 3)).collect();
        let f = stratified_kfold(&y, 5, 3).unwrap();
        let per: Vec<usize> = (0..5).map(|k| (0..10).filter(|&i| f[i] == k && y[i] == 1).count()).collect();
        assert!(per.iter().all(|&c| c <= 1));
        assert_eq!(per.iter().sum::<usize>(), 3);
        assert!(stratified_kfold(&[1, 1, 1, 1], 5, 3).is_err());
        let y: Vec<u8> = (0..10).map(|i| u8::from(i < 4)).collect();
        assert!(cross_validate(&Matrix::<f64>::zeros(10, 1), &y, &CvConfig::default()).is_err());
        assert_eq!(stratified_kfold(&y, 2, 9).unwrap(), stratified_kfold(&y, 2, 9).unwrap());
    }

    fn post(id: &str, ts: i64) -> Post {
        Post { id: id.into(), user: "u".into(), forum: "f".into(), created_utc: ts, text: "x".into(), lang: None }
    }

    fn scores(ids: &[&str], rows: Vec<Vec<f64>>) -> FactorScoreMatrix<f64> {
        FactorScoreMatrix {
            post_ids: ids.iter().map(|s| s.to_string()).collect(),
            factor_names: (0..rows[0].len()).map(|j| format!("F{j}")).collect(),
            scores: Matrix::from_rows(&rows).unwrap(),
            model_fingerprint: String::new(),
        }
    }

    #[test]
    fn feature_windows() {
        let t0 = 100 * MONTH_SECS;
        let tl = |user: &str, posts: Vec<Post>, cohort| UserTimeline { user: user.into(), posts, t0: Some(t0), cohort };
        let s = scores(&["a", "b", "c", "d"], vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0], vec![7.0, 8.0]]);
        let tls = vec![
            tl("after", vec![post("a", t0), post("b", t0 + 10)], Cohort::Joiner),
            tl("one", vec![post("c", t0 - 60 * 86_400)], Cohort::Control),
            tl("edge", vec![post("d", t0 - MONTH_SECS)], Cohort::Joiner),
        ];
        let f0 = build_features(&tls, &s, 0, None).unwrap();
        assert_eq!(f0.excluded, ["after"]);
        assert_eq!(f0.user_ids, ["one", "edge"]);
        let f1 = build_features(&tls, &s, 1, None).unwrap();
        // the post exactly one month before is not strictly before the cutoff
        assert_eq!(f1.user_ids, ["one"]);
        assert_eq!(f1.x.row(0), &[5.0, 6.0]);
        assert!(f1.last_post_utc[0] < cutoff_ts(t0, 1));
        let f3 = build_features(&tls, &s, 3, None);
        assert!(f3.is_err());
    }

    #[test]
    fn ci_contains_mean() {
        let (m, lo, hi): (f64, f64, f64) = mean_ci(&[0.6, 0.7, 0.8, 0.65, 0.75]);
        assert!((m - 0.7).abs() < 1e-12);
        let sd = (0.025f64 / 4.0).sqrt();
        let half = 2.776_445_105 * sd / 5f64.sqrt();
        assert!((hi - m - half).abs() < 1e-6 && (m - lo - half).abs() < 1e-6);
    }

    #[test]
    fn separable_sweep_is_perfect() {
        let t0 = 50 * MONTH_SECS;
        let mut tls = Vec::new();
        let mut ids = Vec::new();
        let mut rows = Vec::new();
        for u in 0..20 {
            let cohort = if u < 10 { Cohort::Joiner } else { Cohort::Control };
            let id = format!("p{u}");
            ids.push(id.clone());
            rows.push(vec![if u < 10 { 1.0 + u as f64 } else { -1.0 - u as f64 }]);
            tls.push(UserTimeline { user: format!("u{u}"), posts: vec![post(&id, t0 - 1)], t0: Some(t0), cohort });
        }
        let id_refs: Vec<&str> = ids.iter().map(String::as_str).collect();
        let s = scores(&id_refs, rows);
        let curve = months_before_sweep(&tls, &s, &[0, 1], &CvConfig::default()).unwrap();
        assert_eq!(curve.points[0].auc_mean, Some(1.0));
        assert!(curve.points[1].auc_mean.is_none());
        let mut buf = Vec::new();
        write_auc_csv(&mut buf, &curve).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("months_before,auc_mean,ci_low,ci_high,n_joiners,n_controls\n0,1,1,1,10,10\n1,,,,0,0"));
    }

    #[test]
    fn spearman_basic() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[1.0, 5.0, 9.0]) - 1.0).abs() < 1e-12);
    }
}
