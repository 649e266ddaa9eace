//! Score trajectories aligned to each user's t0, smoothed with LOESS.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::UserTimeline;
use crate::efa::{column_stats, FactorScoreMatrix};
use crate::error::{Error, Result};
use crate::forecast::MONTH_SECS;
use crate::linalg::Matrix;
use crate::scalar::Scalar;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompositeMode {
    /// Mean of the per-factor z-scores.
    #[default]
    MeanZ,
    /// One named factor, unstandardized.
    Factor(String),
}

/// Maps a factor score row to a single trajectory value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Composite<T> {
    pub mode: CompositeMode,
    pub means: Vec<T>,
    pub sds: Vec<T>,
    factor: Option<usize>,
}

impl<T: Scalar> Composite<T> {
    /// Standardizes against the rows of `reference`.
    pub fn fit(reference: &FactorScoreMatrix<T>, mode: CompositeMode) -> Result<Self> {
        if reference.k() < 1 || reference.rows() < 2 {
            return Err(Error::InvalidInput("reference needs k >= 1 and at least 2 rows".into()));
        }
        let (means, sds) = column_stats(&reference.scores);
        let sds = sds.into_iter().map(|s| if s > T::zero() { s } else { T::one() }).collect();
        Self::from_stats(&reference.factor_names, means, sds, mode)
    }

    pub fn from_stats(factor_names: &[String], means: Vec<T>, sds: Vec<T>, mode: CompositeMode) -> Result<Self> {
        if means.len() != factor_names.len() || sds.len() != factor_names.len() || means.is_empty() {
            return Err(Error::DimensionMismatch { expected: factor_names.len(), got: means.len() });
        }
        let factor = match &mode {
            CompositeMode::MeanZ => None,
            CompositeMode::Factor(name) => Some(
                factor_names
                    .iter()
                    .position(|f| f == name)
                    .ok_or_else(|| Error::InvalidInput(format!("unknown factor `{name}`")))?,
            ),
        };
        Ok(Composite { mode, means, sds, factor })
    }

    pub fn apply(&self, row: &[T]) -> T {
        match self.factor {
            Some(j) => row[j],
            None => {
                let z: T = row.iter().zip(&self.means).zip(&self.sds).map(|((&v, &m), &s)| (v - m) / s).sum();
                z / T::from_usize_lossy(row.len())
            }
        }
    }
}

/// Signed months from `t0`.
pub fn month_offset(ts: i64, t0: i64) -> f64 {
    (ts - t0) as f64 / MONTH_SECS as f64
}

/// One `(month offset, composite)` point per post of the timeline.
pub fn align_to_t0<T: Scalar>(
    timeline: &UserTimeline,
    scores: &FactorScoreMatrix<T>,
    index: &HashMap<&str, usize>,
    composite: &Composite<T>,
) -> Result<Vec<(f64, T)>> {
    let t0 = timeline.t0.ok_or_else(|| Error::InvalidInput(format!("user `{}` has no t0", timeline.user)))?;
    timeline
        .posts
        .iter()
        .map(|p| {
            let row = index
                .get(p.id.as_str())
                .ok_or_else(|| Error::InvalidInput(format!("post `{}` has no factor scores", p.id)))?;
            Ok((month_offset(p.created_utc, t0), composite.apply(scores.scores.row(*row))))
        })
        .collect()
}

/// Replaces each t0 with the timestamp of one of the user's posts, drawn
/// uniformly; deterministic per (seed, user).
pub fn randomize_t0(timelines: &mut [UserTimeline], seed: u64) {
    for tl in timelines.iter_mut() {
        if tl.posts.is_empty() {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(fnv1a(tl.user.as_bytes()));
        let i = rng.random_range(0..tl.posts.len());
        tl.t0 = Some(tl.posts[i].created_utc);
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoessConfig {
    pub frac: f64,
    pub degree: usize,
    pub grid_points: usize,
}

impl Default for LoessConfig {
    fn default() -> Self {
        LoessConfig { frac: 0.3, degree: 1, grid_points: 100 }
    }
}

impl LoessConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.frac > 0.0 && self.frac <= 1.0) {
            return Err(Error::Config(format!("loess frac must be in (0, 1], got {}", self.frac)));
        }
        if self.degree > 2 {
            return Err(Error::Config(format!("loess degree must be 0, 1 or 2, got {}", self.degree)));
        }
        if self.grid_points < 2 {
            return Err(Error::Config("loess needs at least 2 grid points".into()));
        }
        Ok(())
    }

    pub fn neighbours(&self, n: usize) -> usize {
        ((self.frac * n as f64).ceil() as usize).clamp(1, n)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoessFit<T> {
    pub grid: Vec<f64>,
    pub fitted: Vec<T>,
    pub n_points_in_window: Vec<usize>,
    /// Grid points where the local fit fell back to a weighted mean.
    pub fallbacks: Vec<usize>,
}

/// `n` evenly spaced points spanning `[lo, hi]`.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n).map(|i| if i == n - 1 { hi } else { lo + (hi - lo) * i as f64 / (n - 1) as f64 }).collect()
}

/// LOESS evaluated on an even grid over the range of `x`.
pub fn loess<T: Scalar>(x: &[f64], y: &[T], cfg: &LoessConfig) -> Result<LoessFit<T>> {
    cfg.validate()?;
    if x.is_empty() {
        return Err(Error::InvalidInput("loess needs data".into()));
    }
    let lo = x.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    loess_at(x, y, &linspace(lo, hi, cfg.grid_points), cfg)
}

/// LOESS evaluated at the given points.
pub fn loess_at<T: Scalar>(x: &[f64], y: &[T], points: &[f64], cfg: &LoessConfig) -> Result<LoessFit<T>> {
    cfg.validate()?;
    let n = x.len();
    if y.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: y.len() });
    }
    if n < cfg.degree + 2 {
        return Err(Error::InvalidInput(format!("loess of degree {} needs at least {} points", cfg.degree, cfg.degree + 2)));
    }
    if x.iter().any(|v| !v.is_finite()) || y.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("loess inputs must be finite".into()));
    }
    let q = cfg.neighbours(n);
    if q < cfg.degree + 1 {
        return Err(Error::Config(format!("neighbourhood of {q} points is too small for degree {}", cfg.degree)));
    }
    let fits: Vec<(T, bool)> = points.par_iter().map(|&x0| local_fit(x, y, x0, q, cfg.degree)).collect::<Result<_>>()?;
    let fallbacks = fits.iter().enumerate().filter(|(_, f)| f.1).map(|(i, _)| i).collect();
    Ok(LoessFit {
        grid: points.to_vec(),
        fitted: fits.into_iter().map(|f| f.0).collect(),
        n_points_in_window: vec![q; points.len()],
        fallbacks,
    })
}

/// Tri-cube weighted polynomial fit at `x0`; the bool reports a fallback to
/// the weighted mean.
fn local_fit<T: Scalar>(x: &[f64], y: &[T], x0: f64, q: usize, degree: usize) -> Result<(T, bool)> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| (x[a] - x0).abs().total_cmp(&(x[b] - x0).abs()).then(a.cmp(&b)));
    idx.truncate(q);
    let dmax = idx.iter().map(|&i| (x[i] - x0).abs()).fold(0.0, f64::max);
    let mut w: Vec<f64> = idx
        .iter()
        .map(|&i| {
            if dmax == 0.0 {
                1.0
            } else {
                let u = (x[i] - x0).abs() / dmax;
                let t = 1.0 - u * u * u;
                t * t * t
            }
        })
        .collect();
    if w.iter().all(|&v| v == 0.0) {
        w.iter_mut().for_each(|v| *v = 1.0);
    }
    let weighted_mean = |w: &[f64]| {
        let s: f64 = w.iter().sum();
        T::lit(idx.iter().zip(w).map(|(&i, &wi)| wi * y[i].as_f64()).sum::<f64>() / s)
    };
    let mut distinct: Vec<f64> = idx.iter().zip(&w).filter(|(_, &wi)| wi > 0.0).map(|(&i, _)| x[i]).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if degree == 0 {
        return Ok((weighted_mean(&w), false));
    }
    if distinct.len() < degree + 1 {
        return Ok((weighted_mean(&w), true));
    }
    // local coordinates centred on x0, so the fit at x0 is the intercept
    let d = degree + 1;
    let mut a = Matrix::<f64>::zeros(d, d);
    let mut b = Matrix::<f64>::zeros(d, 1);
    for (&i, &wi) in idx.iter().zip(&w) {
        let u = x[i] - x0;
        let pows: Vec<f64> = (0..d).map(|p| u.powi(p as i32)).collect();
        for r in 0..d {
            b[(r, 0)] += wi * pows[r] * y[i].as_f64();
            for c in 0..d {
                a[(r, c)] += wi * pows[r] * pows[c];
            }
        }
    }
    match a.solve_spd(&b) {
        Ok(beta) if beta[(0, 0)].is_finite() => Ok((T::lit(beta[(0, 0)]), false)),
        _ => Ok((weighted_mean(&w), true)),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Every post is a point.
    #[default]
    Posts,
    /// Each user contributes one averaged point per whole month offset.
    UserMonth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothedPoint<T> {
    pub grid_offset: f64,
    pub fitted: T,
    pub n_points_in_window: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySeries<T> {
    pub cohort: String,
    pub points: Vec<(f64, T)>,
    pub smoothed: Vec<SmoothedPoint<T>>,
    pub fallbacks: usize,
}

/// Aligned points for a cohort, pooled per `pooling`, then smoothed.
pub fn trajectory<T: Scalar>(
    cohort: &str,
    timelines: &[UserTimeline],
    scores: &FactorScoreMatrix<T>,
    composite: &Composite<T>,
    cfg: &LoessConfig,
    pooling: Pooling,
) -> Result<TrajectorySeries<T>> {
    let index: HashMap<&str, usize> = scores.post_ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let mut points = Vec::new();
    for tl in timelines {
        let pts = align_to_t0(tl, scores, &index, composite)?;
        match pooling {
            Pooling::Posts => points.extend(pts),
            Pooling::UserMonth => {
                let mut bins: BTreeMap<i64, (f64, usize)> = BTreeMap::new();
                for (off, v) in pts {
                    let e = bins.entry(off.floor() as i64).or_insert((0.0, 0));
                    e.0 += v.as_f64();
                    e.1 += 1;
                }
                points.extend(bins.into_iter().map(|(m, (s, c))| (m as f64 + 0.5, T::lit(s / c as f64))));
            }
        }
    }
    points.sort_by(|a, b| a.0.total_cmp(&b.0));
    let x: Vec<f64> = points.iter().map(|p| p.0).collect();
    let y: Vec<T> = points.iter().map(|p| p.1).collect();
    let fit = loess(&x, &y, cfg)?;
    let smoothed = fit
        .grid
        .iter()
        .zip(&fit.fitted)
        .zip(&fit.n_points_in_window)
        .map(|((&g, &f), &n)| SmoothedPoint { grid_offset: g, fitted: f, n_points_in_window: n })
        .collect();
    Ok(TrajectorySeries { cohort: cohort.to_string(), points, smoothed, fallbacks: fit.fallbacks.len() })
}

/// `cohort, grid_offset, fitted, n_points_in_window`.
pub fn write_trajectory_csv<W: Write, T: Scalar>(w: W, series: &[TrajectorySeries<T>]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["cohort", "grid_offset", "fitted", "n_points_in_window"])?;
    for s in series {
        for p in &s.smoothed {
            wtr.write_record([s.cohort.clone(), p.grid_offset.to_string(), p.fitted.to_string(), p.n_points_in_window.to_string()])?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Ordinary least-squares slope of `y` on `x`.
pub fn ols_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Cohort, Post};

    fn cfg(frac: f64, degree: usize) -> LoessConfig {
        LoessConfig { frac, degree, grid_points: 25 }
    }

    #[test]
    fn constant_and_linear_reproduced() {
        let x: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin() * 10.0 + i as f64 * 0.1).collect();
        for frac in [0.1, 0.3, 0.5, 1.0] {
            for degree in [0, 1, 2] {
                let c = loess(&x, &vec![2.5f64; 40], &cfg(frac, degree)).unwrap();
                assert!(c.fitted.iter().all(|v| (v - 2.5).abs() < 1e-9));
            }
            let y: Vec<f64> = x.iter().map(|v| 3.0 - 0.7 * v).collect();
            let l = loess(&x, &y, &cfg(frac, 1)).unwrap();
            for (g, f) in l.grid.iter().zip(&l.fitted) {
                assert!((f - (3.0 - 0.7 * g)).abs() < 1e-9, "frac {frac}");
            }
        }
    }

    /// Closed-form weighted simple regression at x0.
    fn wls_line(pts: &[(f64, f64, f64)], x0: f64) -> f64 {
        let sw: f64 = pts.iter().map(|p| p.2).sum();
        let mx = pts.iter().map(|p| p.2 * p.0).sum::<f64>() / sw;
        let my = pts.iter().map(|p| p.2 * p.1).sum::<f64>() / sw;
        let sxy: f64 = pts.iter().map(|p| p.2 * (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| p.2 * (p.0 - mx) * (p.0 - mx)).sum();
        my + sxy / sxx * (x0 - mx)
    }

    fn tricube(u: f64) -> f64 {
        (1.0 - u * u * u).powi(3)
    }

    #[test]
    fn five_point_hand_cases() {
        let x = [0.0, 1.0, 2.0, 3.0, 4.0];
        let y = [1.0f64, 3.0, 2.0, 5.0, 4.0];
        // frac 0.6: neighbours of 1.2 are x=1, 2, 0 (d = .2, .8, 1.2)
        let pts = [(1.0, 3.0, tricube(0.2 / 1.2)), (2.0, 2.0, tricube(0.8 / 1.2)), (0.0, 1.0, tricube(1.0))];
        let got = loess_at(&x, &y, &[1.2], &cfg(0.6, 1)).unwrap();
        assert!((got.fitted[0] - wls_line(&pts, 1.2)).abs() < 1e-9);
        assert_eq!(got.n_points_in_window, [3]);
        // frac 0.8: four neighbours, x=3 sits at d_max
        let pts = [
            (1.0, 3.0, tricube(0.2 / 1.8)),
            (2.0, 2.0, tricube(0.8 / 1.8)),
            (0.0, 1.0, tricube(1.2 / 1.8)),
            (3.0, 5.0, 0.0),
        ];
        let got = loess_at(&x, &y, &[1.2], &cfg(0.8, 1)).unwrap();
        assert!((got.fitted[0] - wls_line(&pts, 1.2)).abs() < 1e-9);
    }

    #[test]
    fn frac_one_is_global_weighted_regression() {
        let x: Vec<f64> = (0..12).map(|i| i as f64 * 0.5).collect();
        let y: Vec<f64> = x.iter().map(|v| (v * 1.3).cos() + 0.2 * v).collect();
        for &x0 in &[0.3, 2.0, 5.1] {
            let dmax = x.iter().map(|v| (v - x0).abs()).fold(0.0, f64::max);
            let pts: Vec<(f64, f64, f64)> =
                x.iter().zip(&y).map(|(&a, &b)| (a, b, tricube((a - x0).abs() / dmax))).collect();
            let got = loess_at(&x, &y, &[x0], &cfg(1.0, 1)).unwrap();
            assert!((got.fitted[0] - wls_line(&pts, x0)).abs() < 1e-9);
        }
    }

    #[test]
    fn translation_equivariant_and_degenerate_fallback() {
        let x: Vec<f64> = (0..30).map(|i| (i * 7 % 30) as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| (v * 0.4).sin()).collect();
        let a = loess(&x, &y, &cfg(0.4, 2)).unwrap();
        let b = loess(&x, &y.iter().map(|v| v + 5.0).collect::<Vec<_>>(), &cfg(0.4, 2)).unwrap();
        for (p, q) in a.fitted.iter().zip(&b.fitted) {
            assert!((q - p - 5.0).abs() < 1e-9);
        }
        let same = loess_at(&[1.0; 6], &[1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0], &[1.0], &cfg(0.5, 1)).unwrap();
        assert_eq!(same.fallbacks, [0]);
        assert!((same.fitted[0] - 2.0).abs() < 1e-12);
        assert!(loess(&[1.0, 2.0], &[1.0f64, 2.0], &cfg(1.0, 1)).is_err());
        assert!(loess(&[1.0, 2.0, 3.0], &[1.0f64, 2.0, 3.0], &LoessConfig { degree: 3, ..cfg(1.0, 1) }).is_err());
    }

    fn fsm(rows: Vec<Vec<f64>>) -> FactorScoreMatrix<f64> {
        FactorScoreMatrix {
            post_ids: (0..rows.len()).map(|i| format!("p{i}")).collect(),
            factor_names: vec!["A".into(), "Radical and Violent Intent".into()],
            scores: Matrix::from_rows(&rows).unwrap(),
            model_fingerprint: String::new(),
        }
    }

    #[test]
    fn composite_modes() {
        let s = fsm(vec![vec![1.0, 10.0], vec![3.0, 20.0], vec![2.0, 15.0]]);
        let c = Composite::fit(&s, CompositeMode::MeanZ).unwrap();
        assert!(c.apply(&c.means.clone()).abs() < 1e-15);
        let v = [2.0 + c.sds[0] * 0.3, 15.0 - c.sds[1] * 0.8];
        let v2 = [2.0 + c.sds[0] * 0.6, 15.0 - c.sds[1] * 1.6];
        assert!((c.apply(&v2) - 2.0 * c.apply(&v)).abs() < 1e-12);
        let single = Composite::fit(&s, CompositeMode::Factor("Radical and Violent Intent".into())).unwrap();
        assert_eq!(single.apply(&[1.0, 7.5]), 7.5);
        assert!(Composite::fit(&s, CompositeMode::Factor("nope".into())).is_err());
    }

    fn post(id: &str, ts: i64) -> Post {
        Post { id: id.into(), user: "u".into(), forum: "f".into(), created_utc: ts, text: "x".into(), lang: None }
    }

    #[test]
    fn alignment_offsets() {
        let t0 = 1_600_000_000;
        let s = fsm(vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]);
        let tl = UserTimeline {
            user: "u".into(),
            posts: vec![post("p0", t0 - MONTH_SECS), post("p1", t0), post("p2", t0 + 86_400)],
            t0: Some(t0),
            cohort: Cohort::Joiner,
        };
        let idx: HashMap<&str, usize> = s.post_ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
        let c = Composite::fit(&s, CompositeMode::Factor("A".into())).unwrap();
        let pts = align_to_t0(&tl, &s, &idx, &c).unwrap();
        assert_eq!(pts.len(), 3);
        assert_eq!(pts[0], (-1.0, 1.0));
        assert_eq!(pts[1], (0.0, 3.0));
        let mut none = tl.clone();
        none.t0 = None;
        assert!(align_to_t0(&none, &s, &idx, &c).is_err());

        let mut tls = vec![tl.clone()];
        randomize_t0(&mut tls, 4);
        let t = tls[0].t0.unwrap();
        assert!(tl.posts.iter().any(|p| p.created_utc == t));
        let mut again = vec![tl];
        randomize_t0(&mut again, 4);
        assert_eq!(again[0].t0, Some(t));
    }

    #[test]
    fn trajectory_csv() {
        let t0 = 1_600_000_000;
        let rows: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64, 0.0]).collect();
        let s = fsm(rows);
        let posts = (0..20).map(|i| post(&format!("p{i}"), t0 + (i as i64 - 10) * MONTH_SECS / 2)).collect();
        let tl = UserTimeline { user: "u".into(), posts, t0: Some(t0), cohort: Cohort::Joiner };
        let c = Composite::fit(&s, CompositeMode::Factor("A".into())).unwrap();
        let lc = LoessConfig { grid_points: 10, ..Default::default() };
        let series = trajectory("joiners", std::slice::from_ref(&tl), &s, &c, &lc, Pooling::Posts).unwrap();
        assert_eq!(series.points.len(), 20);
        let pooled = trajectory("joiners", &[tl], &s, &c, &lc, Pooling::UserMonth).unwrap();
        assert_eq!(pooled.points.len(), 10);
        let mut buf = Vec::new();
        write_trajectory_csv(&mut buf, &[series]).unwrap();
        let out = String::from_utf8(buf).unwrap();
        assert!(out.starts_with("cohort,grid_offset,fitted,n_points_in_window\njoiners,-5,"));
        assert_eq!(out.lines().count(), 11);
    }
}
