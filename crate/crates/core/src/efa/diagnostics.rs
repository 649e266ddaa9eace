//! Correlation matrix, sampling adequacy, sphericity and factor-count
//! selection.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

/// Pearson correlation matrix together with the sample size behind it.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationMatrix<T> {
    pub r: Matrix<T>,
    pub n: usize,
}

impl<T: Scalar> CorrelationMatrix<T> {
    /// Wraps an existing correlation matrix, enforcing symmetry and a unit
    /// diagonal.
    pub fn new(mut r: Matrix<T>, n: usize) -> Result<Self> {
        if r.rows() != r.cols() || r.rows() < 2 {
            return Err(Error::InvalidInput(format!("correlation matrix must be square with p >= 2, got {}x{}", r.rows(), r.cols())));
        }
        r.symmetrize();
        for i in 0..r.rows() {
            r[(i, i)] = T::one();
        }
        if r.as_slice().iter().any(|v| !v.is_finite() || v.abs() > T::one() + T::lit(1e-12)) {
            return Err(Error::InvalidInput("correlation entries must lie in [-1, 1]".into()));
        }
        Ok(CorrelationMatrix { r, n })
    }

    pub fn p(&self) -> usize {
        self.r.rows()
    }
}

/// Column means and sample standard deviations (divisor n - 1).
pub fn column_stats<T: Scalar>(x: &Matrix<T>) -> (Vec<T>, Vec<T>) {
    let (n, p) = (x.rows(), x.cols());
    let nf = T::from_usize_lossy(n);
    let mut means = vec![T::zero(); p];
    for i in 0..n {
        for (m, &v) in means.iter_mut().zip(x.row(i)) {
            *m += v;
        }
    }
    means.iter_mut().for_each(|m| *m /= nf);
    let mut ss = vec![T::zero(); p];
    for i in 0..n {
        for ((s, &v), &m) in ss.iter_mut().zip(x.row(i)).zip(&means) {
            let d = v - m;
            *s += d * d;
        }
    }
    let denom = T::from_usize_lossy(n.saturating_sub(1).max(1));
    let sds = ss.into_iter().map(|s| (s / denom).sqrt()).collect();
    (means, sds)
}

/// Standardized columns, stored column-major for fast dot products.
fn standardized_columns<T: Scalar>(x: &Matrix<T>, means: &[T], sds: &[T]) -> Vec<Vec<T>> {
    (0..x.cols())
        .map(|j| (0..x.rows()).map(|i| (x[(i, j)] - means[j]) / sds[j]).collect())
        .collect()
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Pearson correlations of the columns of `x`.
///
/// Requires `n >= p + 1`. A constant column is reported by index; callers
/// with item ids map it through [`correlation_matrix_named`].
pub fn correlation_matrix<T: Scalar>(x: &Matrix<T>) -> Result<CorrelationMatrix<T>> {
    let names: Vec<String> = (0..x.cols()).map(|j| format!("column {j}")).collect();
    correlation_matrix_named(x, &names)
}

pub fn correlation_matrix_named<T: Scalar>(x: &Matrix<T>, names: &[String]) -> Result<CorrelationMatrix<T>> {
    let (n, p) = (x.rows(), x.cols());
    if names.len() != p {
        return Err(Error::DimensionMismatch { expected: p, got: names.len() });
    }
    if p < 2 {
        return Err(Error::InvalidInput("need at least 2 columns".into()));
    }
    if n < p + 1 {
        return Err(Error::InvalidInput(format!("need n >= p + 1 rows, got n={n}, p={p}")));
    }
    let (means, sds) = column_stats(x);
    for (j, &s) in sds.iter().enumerate() {
        if !(s > T::zero()) || !s.is_finite() {
            return Err(Error::ZeroVariance(names[j].clone()));
        }
    }
    let z = standardized_columns(x, &means, &sds);
    Ok(correlation_from_standardized(&z, n))
}

fn correlation_from_standardized<T: Scalar>(z: &[Vec<T>], n: usize) -> CorrelationMatrix<T> {
    let p = z.len();
    let denom = T::from_usize_lossy(n - 1);
    let mut r = Matrix::identity(p);
    for i in 0..p {
        for j in (i + 1)..p {
            let v = (dot(&z[i], &z[j]) / denom).max(-T::one()).min(T::one());
            r[(i, j)] = v;
            r[(j, i)] = v;
        }
    }
    CorrelationMatrix { r, n }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KmoResult<T> {
    pub overall: T,
    pub per_item_msa: Vec<T>,
}

/// Kaiser–Meyer–Olkin measure of sampling adequacy.
pub fn kmo<T: Scalar>(r: &CorrelationMatrix<T>) -> Result<KmoResult<T>> {
    let p = r.p();
    let inv = r.r.inverse()?;
    let mut row_r2 = vec![T::zero(); p];
    let mut row_q2 = vec![T::zero(); p];
    for i in 0..p {
        for j in 0..p {
            if i == j {
                continue;
            }
            let rij = r.r[(i, j)];
            let denom = (inv[(i, i)] * inv[(j, j)]).sqrt();
            let q = -inv[(i, j)] / denom;
            row_r2[i] += rij * rij;
            row_q2[i] += q * q;
        }
    }
    let sr: T = row_r2.iter().copied().sum();
    let sq: T = row_q2.iter().copied().sum();
    if sr == T::zero() {
        return Err(Error::NoCommonVariance);
    }
    let per_item_msa = row_r2
        .iter()
        .zip(&row_q2)
        .map(|(&a, &b)| if a + b == T::zero() { T::zero() } else { a / (a + b) })
        .collect();
    Ok(KmoResult { overall: sr / (sr + sq), per_item_msa })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BartlettResult<T> {
    pub chi2: T,
    pub df: usize,
    pub p_value: f64,
}

/// Bartlett's test of sphericity.
pub fn bartlett<T: Scalar>(r: &CorrelationMatrix<T>) -> Result<BartlettResult<T>> {
    let p = r.p();
    if r.n <= p {
        return Err(Error::InvalidInput(format!("Bartlett test needs n > p, got n={}, p={p}", r.n)));
    }
    let (sign, logabs) = r.r.log_det()?;
    if sign <= T::zero() {
        return Err(Error::Singular);
    }
    let pf = T::from_usize_lossy(p);
    let factor = T::from_usize_lossy(r.n) - T::one() - (T::lit(2.0) * pf + T::lit(5.0)) / T::lit(6.0);
    let chi2 = (-factor * logabs).max(T::zero());
    let df = p * (p - 1) / 2;
    let dist = ChiSquared::new(df as f64).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let p_value = if chi2 == T::zero() { 1.0 } else { dist.sf(chi2.as_f64()) };
    Ok(BartlettResult { chi2, df, p_value })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ParallelAnalysisConfig {
    pub iters: usize,
    pub quantile: f64,
    pub seed: u64,
}

impl Default for ParallelAnalysisConfig {
    fn default() -> Self {
        ParallelAnalysisConfig { iters: 100, quantile: 0.95, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParallelAnalysis<T> {
    pub k: usize,
    pub observed: Vec<T>,
    pub thresholds: Vec<T>,
}

/// Linear-interpolation quantile of unsorted data.
pub fn quantile<T: Scalar>(values: &mut [T], q: f64) -> T {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let h = (values.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    let frac = T::lit(h - lo as f64);
    values[lo] + (values[hi] - values[lo]) * frac
}

/// Horn's parallel analysis on the eigenvalues of the full correlation matrix.
pub fn parallel_analysis<T: Scalar>(x: &Matrix<T>, cfg: &ParallelAnalysisConfig) -> Result<ParallelAnalysis<T>> {
    let (n, p) = (x.rows(), x.cols());
    if n <= p {
        return Err(Error::InvalidInput(format!("parallel analysis needs n > p, got n={n}, p={p}")));
    }
    if cfg.iters < 1 || !(0.0..=1.0).contains(&cfg.quantile) {
        return Err(Error::Config("parallel analysis needs iters >= 1 and quantile in [0, 1]".into()));
    }
    let observed = correlation_matrix(x)?.r.symmetric_eigenvalues()?;
    let sims: Vec<Vec<T>> = (0..cfg.iters)
        .into_par_iter()
        .map(|it| simulated_eigenvalues::<T>(n, p, cfg.seed, it as u64))
        .collect::<Result<_>>()?;
    let thresholds: Vec<T> = (0..p)
        .map(|rank| {
            let mut col: Vec<T> = sims.iter().map(|s| s[rank]).collect();
            quantile(&mut col, cfg.quantile)
        })
        .collect();
    let k = observed.iter().zip(&thresholds).take_while(|(o, t)| o > t).count();
    Ok(ParallelAnalysis { k, observed, thresholds })
}

fn simulated_eigenvalues<T: Scalar>(n: usize, p: usize, seed: u64, iter: u64) -> Result<Vec<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iter);
    let mut cols: Vec<Vec<T>> = (0..p)
        .map(|_| (0..n).map(|_| T::lit(StandardNormal.sample(&mut rng))).collect())
        .collect();
    let nf = T::from_usize_lossy(n);
    for c in cols.iter_mut() {
        let m = c.iter().copied().sum::<T>() / nf;
        c.iter_mut().for_each(|v| *v -= m);
        let sd = (dot(c, c) / T::from_usize_lossy(n - 1)).sqrt();
        c.iter_mut().for_each(|v| *v /= sd);
    }
    correlation_from_standardized(&cols, n).r.symmetric_eigenvalues()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn corr2(r: f64, n: usize) -> CorrelationMatrix<f64> {
        CorrelationMatrix::new(Matrix::from_rows(&[vec![1.0, r], vec![r, 1.0]]).unwrap(), n).unwrap()
    }

    #[test]
    fn identical_and_negated_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a: Vec<f64> = (0..50).map(|_| rng.random()).collect();
        let x = Matrix::from_fn(50, 3, |i, j| match j {
            0 | 1 => a[i],
            _ => -a[i],
        });
        let r = correlation_matrix(&x).unwrap();
        assert!((r.r[(0, 1)] - 1.0).abs() < 1e-12);
        assert!((r.r[(0, 2)] + 1.0).abs() < 1e-12);
        assert_eq!(r.r.diag(), vec![1.0; 3]);
    }

    #[test]
    fn independent_columns_near_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Matrix::from_fn(10_000, 5, |_, _| StandardNormal.sample(&mut rng));
        let r: CorrelationMatrix<f64> = correlation_matrix(&x).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                if i != j {
                    assert!(r.r[(i, j)].abs() < 0.05);
                }
            }
        }
    }

    #[test]
    fn zero_variance_named() {
        let x = Matrix::from_fn(10, 2, |i, j| if j == 0 { i as f64 } else { 3.0 });
        let names = vec!["A".to_string(), "B".to_string()];
        match correlation_matrix_named(&x, &names) {
            Err(Error::ZeroVariance(name)) => assert_eq!(name, "B"),
            other => panic!("{other:?}"),
        }
        let small = Matrix::from_fn(2, 2, |i, j| (i + j) as f64);
        assert!(correlation_matrix(&small).is_err());
    }

    #[test]
    fn kmo_two_items() {
        for r in [0.6, -0.3, 0.95] {
            assert!((kmo(&corr2(r, 100)).unwrap().overall - 0.5).abs() < 1e-12);
        }
        let id = CorrelationMatrix::new(Matrix::<f64>::identity(4), 100).unwrap();
        assert!(matches!(kmo(&id), Err(Error::NoCommonVariance)));
    }

    #[test]
    fn kmo_three_by_three_against_cofactor_inverse() {
        let (a, b, c) = (0.5f64, 0.3, 0.4);
        let r = CorrelationMatrix::new(
            Matrix::from_rows(&[vec![1.0, a, b], vec![a, 1.0, c], vec![b, c, 1.0]]).unwrap(),
            100,
        )
        .unwrap();
        // adjugate of a symmetric 3x3 unit-diagonal matrix
        let det = 1.0 + 2.0 * a * b * c - a * a - b * b - c * c;
        let inv = [
            [(1.0 - c * c) / det, (b * c - a) / det, (a * c - b) / det],
            [(b * c - a) / det, (1.0 - b * b) / det, (a * b - c) / det],
            [(a * c - b) / det, (a * b - c) / det, (1.0 - a * a) / det],
        ];
        let rr = [[1.0, a, b], [a, 1.0, c], [b, c, 1.0]];
        let (mut s_r, mut s_q) = (0.0, 0.0);
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    let q = -inv[i][j] / (inv[i][i] * inv[j][j]).sqrt();
                    s_r += rr[i][j] * rr[i][j];
                    s_q += q * q;
                }
            }
        }
        let got = kmo(&r).unwrap();
        assert!((got.overall - s_r / (s_r + s_q)).abs() < 1e-8);
        let lo = got.per_item_msa.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = got.per_item_msa.iter().cloned().fold(0.0, f64::max);
        assert!(lo <= got.overall && got.overall <= hi);
    }

    #[test]
    fn bartlett_cases() {
        for p in [2, 5, 20] {
            let id = CorrelationMatrix::new(Matrix::<f64>::identity(p), 500).unwrap();
            let b = bartlett(&id).unwrap();
            assert_eq!(b.chi2, 0.0);
            assert_eq!(b.p_value, 1.0);
            assert_eq!(b.df, p * (p - 1) / 2);
        }
        let b = bartlett(&corr2(0.5, 101)).unwrap();
        let expected = -(100.0 - 1.5) * 0.75f64.ln();
        assert!((b.chi2 - expected).abs() < 1e-10);
        assert!((b.chi2 - 28.34).abs() < 0.01);
        assert_eq!(b.df, 1);
        assert!(bartlett(&corr2(1.0, 101)).is_err());
    }

    #[test]
    fn quantile_interpolates() {
        let mut v = vec![3.0, 1.0, 2.0, 4.0];
        assert_eq!(quantile(&mut v, 0.5), 2.5);
        assert_eq!(quantile(&mut v, 1.0), 4.0);
        assert_eq!(quantile(&mut v, 0.0), 1.0);
    }

    #[test]
    fn parallel_equicorrelated_gives_one() {
        // x_j = sqrt(r) f + sqrt(1 - r) e_j
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (n, p, r) = (500, 5, 0.8f64);
        let mut x = Matrix::zeros(n, p);
        for i in 0..n {
            let f: f64 = StandardNormal.sample(&mut rng);
            for j in 0..p {
                let e: f64 = StandardNormal.sample(&mut rng);
                x[(i, j)] = r.sqrt() * f + (1.0 - r).sqrt() * e;
            }
        }
        let cfg = ParallelAnalysisConfig { iters: 50, ..Default::default() };
        let pa = parallel_analysis(&x, &cfg).unwrap();
        assert_eq!(pa.k, 1);
        assert!((pa.observed[0] - 4.2).abs() < 0.2);
        assert_eq!(parallel_analysis(&x, &cfg).unwrap(), pa);
        assert!(parallel_analysis(&Matrix::<f64>::zeros(5, 5), &cfg).is_err());
    }
}
