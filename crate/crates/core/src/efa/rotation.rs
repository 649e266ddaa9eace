//! Factor rotations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "method")]
pub enum Rotation {
    None,
    #[default]
    Varimax,
    /// Oblique; varimax followed by a power target.
    Promax { power: u32 },
}

impl Rotation {
    pub fn name(&self) -> &'static str {
        match self {
            Rotation::None => "none",
            Rotation::Varimax => "varimax",
            Rotation::Promax { .. } => "promax",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Rotated<T> {
    pub loadings: Matrix<T>,
    /// `loadings = input · rotation`
    pub rotation: Matrix<T>,
    pub iterations: usize,
    pub converged: bool,
}

/// Raw varimax criterion: sum over factors of the variance of squared loadings.
pub fn varimax_criterion<T: Scalar>(l: &Matrix<T>) -> T {
    let pf = T::from_usize_lossy(l.rows());
    (0..l.cols())
        .map(|j| {
            let sq: Vec<T> = (0..l.rows()).map(|i| l[(i, j)] * l[(i, j)]).collect();
            let mean = sq.iter().copied().sum::<T>() / pf;
            sq.iter().map(|&s| (s - mean) * (s - mean)).sum::<T>() / pf
        })
        .sum()
}

/// Orthogonal polar factor `B (BᵀB)^{-1/2}` and the sum of singular values.
fn polar<T: Scalar>(b: &Matrix<T>) -> Result<(Matrix<T>, T)> {
    let btb = b.transpose().matmul(b)?;
    let (vals, vecs) = btb.symmetric_eigen()?;
    let tiny = T::epsilon() * vals[0].max(T::one());
    let inv_sqrt = Matrix::from_diag(&vals.iter().map(|&v| T::one() / v.max(tiny).sqrt()).collect::<Vec<_>>());
    let root = vecs.matmul(&inv_sqrt)?.matmul(&vecs.transpose())?;
    let sum_sv = vals.iter().map(|&v| v.max(T::zero()).sqrt()).sum();
    Ok((b.matmul(&root)?, sum_sv))
}

/// Varimax with Kaiser row normalization.
pub fn varimax<T: Scalar>(l: &Matrix<T>, max_iter: usize, tol: T) -> Result<Rotated<T>> {
    let (p, k) = (l.rows(), l.cols());
    if k == 0 {
        return Err(Error::InvalidInput("varimax needs k >= 1".into()));
    }
    if k == 1 {
        return Ok(Rotated { loadings: l.clone(), rotation: Matrix::identity(1), iterations: 0, converged: true });
    }
    let scale: Vec<T> = (0..p)
        .map(|i| {
            let h = l.row(i).iter().map(|&v| v * v).sum::<T>().sqrt();
            if h > T::zero() { h } else { T::one() }
        })
        .collect();
    let x = Matrix::from_fn(p, k, |i, j| l[(i, j)] / scale[i]);
    let pf = T::from_usize_lossy(p);
    let mut rot = Matrix::identity(k);
    let mut d = T::zero();
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=max_iter {
        iterations = it;
        let z = x.matmul(&rot)?;
        let col_ss: Vec<T> = (0..k).map(|j| (0..p).map(|i| z[(i, j)] * z[(i, j)]).sum::<T>() / pf).collect();
        let target = Matrix::from_fn(p, k, |i, j| {
            let v = z[(i, j)];
            v * v * v - v * col_ss[j]
        });
        let b = x.transpose().matmul(&target)?;
        let (next, sum_sv) = polar(&b)?;
        rot = next;
        let prev = d;
        d = sum_sv;
        if d < prev * (T::one() + tol) {
            converged = true;
            break;
        }
    }
    let z = x.matmul(&rot)?;
    let loadings = Matrix::from_fn(p, k, |i, j| z[(i, j)] * scale[i]);
    Ok(Rotated { loadings, rotation: rot, iterations, converged })
}

/// Promax: varimax, then least-squares fit to `|L|^(power-1) L`.
/// Returns the pattern matrix and the factor correlation matrix.
pub fn promax<T: Scalar>(l: &Matrix<T>, power: u32, max_iter: usize, tol: T) -> Result<(Rotated<T>, Matrix<T>)> {
    let k = l.cols();
    let vm = varimax(l, max_iter, tol)?;
    if k == 1 {
        return Ok((vm, Matrix::identity(1)));
    }
    let x = &vm.loadings;
    let target = x.map(|v| v * v.abs().powi(power as i32 - 1));
    let xtx = x.transpose().matmul(x)?;
    let mut u = xtx.inverse()?.matmul(&x.transpose().matmul(&target)?)?;
    let utu_inv = u.transpose().matmul(&u)?.inverse()?;
    let d: Vec<T> = utu_inv.diag().iter().map(|v| v.sqrt()).collect();
    for i in 0..k {
        for j in 0..k {
            u[(i, j)] *= d[j];
        }
    }
    let pattern = x.matmul(&u)?;
    let total = vm.rotation.matmul(&u)?;
    let phi = total.transpose().matmul(&total)?.inverse()?;
    Ok((Rotated { loadings: pattern, rotation: total, iterations: vm.iterations, converged: vm.converged }, phi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn orthonormal_err(t: &Matrix<f64>) -> f64 {
        t.transpose().matmul(t).unwrap().max_abs_diff(&Matrix::identity(t.cols()))
    }

    #[test]
    fn single_factor_untouched() {
        let l = Matrix::from_rows(&[vec![0.3], vec![-0.7]]).unwrap();
        let r = varimax(&l, 1000, 1e-8).unwrap();
        assert_eq!(r.loadings, l);
    }

    #[test]
    fn simple_structure_is_fixed_point() {
        let l: Matrix<f64> = Matrix::from_rows(&[vec![0.8, 0.0], vec![0.7, 0.0], vec![0.0, 0.6], vec![0.0, 0.9]]).unwrap();
        let r = varimax(&l, 1000, 1e-8).unwrap();
        for i in 0..4 {
            for j in 0..2 {
                assert!((r.loadings[(i, j)].abs() - l[(i, j)].abs()).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn random_loadings_criterion_increases() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let l = Matrix::from_fn(6, 2, |_, _| rng.random_range(-0.9..0.9));
            let r = varimax(&l, 1000, 1e-8).unwrap();
            // raw criterion on Kaiser-normalized rows is what varimax maximizes
            let norm = |m: &Matrix<f64>| {
                Matrix::from_fn(6, 2, |i, j| m[(i, j)] / (m[(i, 0)].powi(2) + m[(i, 1)].powi(2)).sqrt())
            };
            assert!(varimax_criterion(&norm(&r.loadings)) >= varimax_criterion(&norm(&l)) - 1e-12);
            assert!(orthonormal_err(&r.rotation) < 1e-8);
            for i in 0..6 {
                let before: f64 = l.row(i).iter().map(|v| v * v).sum();
                let after: f64 = r.loadings.row(i).iter().map(|v| v * v).sum();
                assert!((before - after).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn promax_keeps_pattern_on_simple_structure() {
        let l = Matrix::from_rows(&[
            vec![0.8, 0.1],
            vec![0.7, 0.05],
            vec![0.75, 0.0],
            vec![0.1, 0.6],
            vec![0.0, 0.9],
            vec![0.05, 0.7],
        ])
        .unwrap();
        let (r, phi) = promax::<f64>(&l, 4, 1000, 1e-8).unwrap();
        assert_eq!(r.loadings.cols(), 2);
        assert!((phi[(0, 0)] - 1.0).abs() < 1e-8 && (phi[(1, 1)] - 1.0).abs() < 1e-8);
        assert!(phi[(0, 1)].abs() < 1.0);
    }
}
