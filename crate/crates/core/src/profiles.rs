//! Group-level factor profiles and two-sample comparisons.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupProfile<T> {
    pub group_key: String,
    pub n_posts: usize,
    pub mean: Vec<T>,
    /// Sample standard deviation; 0 for single-post groups.
    pub sd: Vec<T>,
    pub positivity: Vec<T>,
}

/// Share of values strictly greater than zero.
pub fn positivity_rate<T: Scalar>(values: &[T]) -> T {
    if values.is_empty() {
        return T::zero();
    }
    let pos = values.iter().filter(|&&v| v > T::zero()).count();
    T::from_usize_lossy(pos) / T::from_usize_lossy(values.len())
}

fn sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(|a, b| a.total_cmp(b));
    v
}

/// Mean and sample sd, summed in sorted order so the result does not depend
/// on row order.
fn mean_sd<T: Scalar>(values: &[T]) -> (T, T) {
    let v = sorted(values.iter().map(|x| x.as_f64()).collect());
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let dev = sorted(v.iter().map(|x| (x - mean) * (x - mean)).collect());
    let sd = if v.len() > 1 { (dev.iter().sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
    (T::lit(mean), T::lit(sd))
}

fn profile_of<T: Scalar>(key: &str, rows: &[Vec<T>]) -> GroupProfile<T> {
    let k = rows[0].len();
    let mut mean = Vec::with_capacity(k);
    let mut sd = Vec::with_capacity(k);
    let mut positivity = Vec::with_capacity(k);
    for j in 0..k {
        let col: Vec<T> = rows.iter().map(|r| r[j]).collect();
        let (m, s) = mean_sd(&col);
        mean.push(m);
        sd.push(s);
        positivity.push(positivity_rate(&col));
    }
    GroupProfile { group_key: key.to_string(), n_posts: rows.len(), mean, sd, positivity }
}

/// Per-group profiles of the rows of `scores`, `keys[i]` naming row i's
/// group. Groups come out sorted by key.
pub fn aggregate_mean<T: Scalar>(scores: &Matrix<T>, keys: &[String]) -> Result<Vec<GroupProfile<T>>> {
    if keys.len() != scores.rows() {
        return Err(Error::DimensionMismatch { expected: scores.rows(), got: keys.len() });
    }
    if keys.is_empty() {
        return Err(Error::InvalidInput("no posts to aggregate".into()));
    }
    let mut groups: BTreeMap<&str, Vec<Vec<T>>> = BTreeMap::new();
    for (i, key) in keys.iter().enumerate() {
        groups.entry(key.as_str()).or_default().push(scores.row(i).to_vec());
    }
    Ok(groups.iter().map(|(k, rows)| profile_of(k, rows)).collect())
}

/// Like [`aggregate_mean`], with the group looked up per row; rows mapped to
/// `None` are an error.
pub fn aggregate_by<T: Scalar>(
    scores: &Matrix<T>,
    post_ids: &[String],
    key_fn: impl Fn(&str) -> Option<String>,
) -> Result<Vec<GroupProfile<T>>> {
    let keys = post_ids
        .iter()
        .map(|id| key_fn(id).ok_or_else(|| Error::InvalidInput(format!("post `{id}` has no group"))))
        .collect::<Result<Vec<_>>>()?;
    aggregate_mean(scores, &keys)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TTestVariant {
    #[default]
    StudentPooled,
    Welch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTestResult {
    pub t: f64,
    pub df: f64,
    pub p_value: f64,
    pub variant: TTestVariant,
}

fn sample_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0))
}

/// Two-sided two-sample t-test.
pub fn two_sample_ttest<T: Scalar>(a: &[T], b: &[T], variant: TTestVariant) -> Result<TTestResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InvalidInput("each sample needs at least 2 values".into()));
    }
    let a: Vec<f64> = a.iter().map(|x| x.as_f64()).collect();
    let b: Vec<f64> = b.iter().map(|x| x.as_f64()).collect();
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (ma, va) = sample_var(&a);
    let (mb, vb) = sample_var(&b);
    let (se, df) = match variant {
        TTestVariant::StudentPooled => {
            let df = na + nb - 2.0;
            let sp2 = ((na - 1.0) * va + (nb - 1.0) * vb) / df;
            (sp2 * (1.0 / na + 1.0 / nb), df)
        }
        TTestVariant::Welch => {
            let (qa, qb) = (va / na, vb / nb);
            let s = qa + qb;
            (s, s * s / (qa * qa / (na - 1.0) + qb * qb / (nb - 1.0)))
        }
    };
    if !(se > 0.0) {
        return Err(Error::DegenerateVariance("both samples have zero variance".into()));
    }
    let t = (ma - mb) / se.sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let p_value = (2.0 * dist.sf(t.abs())).min(1.0);
    Ok(TTestResult { t, df, p_value, variant })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorTTest {
    pub factor: String,
    pub t: f64,
    pub df: f64,
    pub p: f64,
    pub p_bonferroni: f64,
}

/// Per-factor t-tests between the rows of `a` and `b`.
pub fn compare_groups<T: Scalar>(
    a: &Matrix<T>,
    b: &Matrix<T>,
    factor_names: &[String],
    variant: TTestVariant,
) -> Result<Vec<FactorTTest>> {
    let k = factor_names.len();
    if a.cols() != k || b.cols() != k {
        return Err(Error::DimensionMismatch { expected: k, got: a.cols().min(b.cols()) });
    }
    (0..k)
        .map(|j| {
            let r = two_sample_ttest(&a.column(j), &b.column(j), variant)?;
            Ok(FactorTTest {
                factor: factor_names[j].clone(),
                t: r.t,
                df: r.df,
                p: r.p_value,
                p_bonferroni: (r.p_value * k as f64).min(1.0),
            })
        })
        .collect()
}

/// `group, n_posts, mean_*, sd_*, pos_*`.
pub fn write_profiles_csv<W: Write, T: Scalar>(w: W, profiles: &[GroupProfile<T>], factor_names: &[String]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    let mut head = vec!["group".to_string(), "n_posts".to_string()];
    for prefix in ["mean", "sd", "pos"] {
        head.extend(factor_names.iter().map(|f| format!("{prefix}_{f}")));
    }
    wtr.write_record(&head)?;
    for p in profiles {
        if p.mean.len() != factor_names.len() {
            return Err(Error::DimensionMismatch { expected: factor_names.len(), got: p.mean.len() });
        }
        let mut rec = vec![p.group_key.clone(), p.n_posts.to_string()];
        for col in [&p.mean, &p.sd, &p.positivity] {
            rec.extend(col.iter().map(|v| v.to_string()));
        }
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

/// `factor, t, df, p, p_bonferroni`.
pub fn write_ttest_csv<W: Write>(w: W, rows: &[FactorTTest]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(())
}
