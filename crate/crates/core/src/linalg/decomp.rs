use serde::{Deserialize, Serialize};

use super::matrix::{dot, DenseMatrix};
use super::svd::svd_full;
use crate::error::{Error, Result};

/// Pivots at or below this fraction of the largest diagonal entry are treated
/// as a failed factorization.
const PIVOT_RTOL: f64 = 1e-12;
const SYMMETRY_TOL: f64 = 1e-8;

/// Cholesky factor `L` with `L * L^T = gram + jitter * I`.
pub fn cholesky_lower(gram: &DenseMatrix, jitter: f64) -> Result<DenseMatrix> {
    let (d, c) = gram.shape();
    if d != c || d == 0 {
        return Err(Error::ShapeMismatch(format!("cholesky of {d}x{c} matrix")));
    }
    if jitter < 0.0 || !jitter.is_finite() {
        return Err(Error::InvalidArgument(format!("jitter {jitter}")));
    }
    let asym = gram.max_asymmetry();
    if asym > SYMMETRY_TOL * gram.max_abs().max(1.0) {
        return Err(Error::NotSymmetric(asym));
    }
    let max_diag = (0..d).map(|i| gram[(i, i)]).fold(0.0_f64, f64::max) + jitter;
    let floor = PIVOT_RTOL * max_diag;

    let mut l = DenseMatrix::zeros(d, d);
    for j in 0..d {
        let lj = l.row(j);
        let pivot = gram[(j, j)] + jitter - dot(&lj[..j], &lj[..j]);
        if !(pivot > floor) || pivot <= 0.0 {
            return Err(Error::NotPositiveDefinite {
                index: j,
                pivot,
                jitter,
            });
        }
        let diag = pivot.sqrt();
        l[(j, j)] = diag;
        for i in j + 1..d {
            let s = gram[(i, j)] - dot(&l.row(i)[..j], &l.row(j)[..j]);
            l[(i, j)] = s / diag;
        }
    }
    Ok(l)
}

/// Jitter schedule: zero first, then `1e-8 * trace / d` growing by 10x up to
/// `1e-2 * trace / d`.
pub fn jitter_schedule(gram: &DenseMatrix) -> Vec<f64> {
    let d = gram.rows().max(1) as f64;
    let base = gram.trace() / d;
    let mut out = vec![0.0];
    if base > 0.0 {
        let mut scale = 1e-8;
        while scale <= 1e-2 * (1.0 + 1e-9) {
            out.push(scale * base);
            scale *= 10.0;
        }
    }
    out
}

/// Cholesky with jitter escalation. Returns the factor and the jitter used.
pub fn cholesky_escalating(gram: &DenseMatrix) -> Result<(DenseMatrix, f64)> {
    let mut last = None;
    for jitter in jitter_schedule(gram) {
        match cholesky_lower(gram, jitter) {
            Ok(l) => return Ok((l, jitter)),
            Err(e @ Error::NotPositiveDefinite { .. }) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.unwrap_or(Error::NotPositiveDefinite {
        index: 0,
        pivot: 0.0,
        jitter: 0.0,
    }))
}

/// Solves `L x = b` for lower-triangular `L`.
pub fn solve_lower(l: &DenseMatrix, b: &[f64]) -> Vec<f64> {
    let n = l.rows();
    let mut x = vec![0.0; n];
    for i in 0..n {
        let row = l.row(i);
        x[i] = (b[i] - dot(&row[..i], &x[..i])) / row[i];
    }
    x
}

/// Solves `L^T x = b` for lower-triangular `L` (back substitution on the
/// transpose, without forming it).
pub fn solve_lower_transpose(l: &DenseMatrix, b: &[f64]) -> Vec<f64> {
    let n = l.rows();
    let mut x = b.to_vec();
    for i in (0..n).rev() {
        x[i] /= l[(i, i)];
        let xi = x[i];
        for k in 0..i {
            x[k] -= l[(i, k)] * xi;
        }
    }
    x
}

/// `a * s^{-1}` for lower-triangular `s`, computed row by row through
/// `s^T y = a_row^T`.
pub fn right_solve_lower(a: &DenseMatrix, s: &DenseMatrix) -> Result<DenseMatrix> {
    if a.cols() != s.rows() || s.rows() != s.cols() {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} times inverse of {}x{}",
            a.rows(),
            a.cols(),
            s.rows(),
            s.cols()
        )));
    }
    let mut out = DenseMatrix::zeros(a.rows(), a.cols());
    for r in 0..a.rows() {
        let y = solve_lower_transpose(s, a.row(r));
        out.row_mut(r).copy_from_slice(&y);
    }
    Ok(out)
}

/// Moore-Penrose pseudoinverse; singular values below `1e-10 * sigma_max`
/// are treated as zero.
pub fn pseudoinverse(a: &DenseMatrix) -> Result<DenseMatrix> {
    let f = svd_full(a)?;
    let cutoff = 1e-10 * f.sigma.first().copied().unwrap_or(0.0);
    let (m, n) = a.shape();
    let mut out = DenseMatrix::zeros(n, m);
    for (j, &s) in f.sigma.iter().enumerate() {
        if s <= cutoff || s == 0.0 {
            continue;
        }
        let inv = 1.0 / s;
        for i in 0..n {
            let vi = f.v_t[(j, i)] * inv;
            if vi == 0.0 {
                continue;
            }
            for k in 0..m {
                out[(i, k)] += vi * f.u[(k, j)];
            }
        }
    }
    Ok(out)
}

/// Spectrum summary with the rank chosen by the retained-energy rule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralProfile {
    pub sigma: Vec<f64>,
    pub tau: f64,
    pub full_rank: usize,
    pub chosen_rank: usize,
    pub retained_energy: f64,
}

impl SpectralProfile {
    /// Sum of squared singular values beyond the chosen rank.
    pub fn discarded_energy(&self) -> f64 {
        self.sigma
            .iter()
            .skip(self.chosen_rank)
            .map(|s| s * s)
            .sum()
    }
}

/// Smallest rank keeping at least `tau` of the squared singular-value energy,
/// raised to `floor(full_rank / 2) + 1` when smaller. `tau = 1` keeps the full
/// rank.
pub fn effective_rank(sigma: &[f64], tau: f64, full_rank: usize) -> Result<SpectralProfile> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::InvalidArgument(format!("tau {tau} outside (0, 1]")));
    }
    if sigma.iter().any(|s| *s < 0.0 || !s.is_finite()) || sigma.windows(2).any(|p| p[0] < p[1])
    {
        return Err(Error::InvalidArgument(
            "sigma must be non-negative and non-increasing".into(),
        ));
    }
    let full_rank = full_rank.min(sigma.len());
    let total: f64 = sigma.iter().map(|s| s * s).sum();
    if total == 0.0 {
        return Err(Error::AllZeroSpectrum);
    }
    let cumulative: Vec<f64> = sigma
        .iter()
        .scan(0.0, |acc, s| {
            *acc += s * s;
            Some(*acc)
        })
        .collect();

    let energy_rank = if tau >= 1.0 {
        full_rank
    } else {
        cumulative
            .iter()
            .position(|&c| c / total >= tau)
            .map_or(full_rank, |p| p + 1)
    };
    let floor = full_rank / 2 + 1;
    let chosen_rank = energy_rank.max(floor).min(full_rank);
    let retained_energy = if chosen_rank == 0 {
        0.0
    } else {
        cumulative[chosen_rank - 1] / total
    };
    Ok(SpectralProfile {
        sigma: sigma.to_vec(),
        tau,
        full_rank,
        chosen_rank,
        retained_energy,
    })
}

/// Principal-component projection of the columns of `x` (`d x M`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaFit {
    /// `target_dim x d`, orthonormal rows.
    pub projection: DenseMatrix,
    pub mean: Vec<f64>,
    pub projected: DenseMatrix,
}

impl PcaFit {
    pub fn transform(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        let mut centered = x.clone();
        let neg: Vec<f64> = self.mean.iter().map(|m| -m).collect();
        centered.add_column_vector(&neg);
        self.projection.matmul(&centered)
    }
}

pub fn pca_fit_transform(x: &DenseMatrix, target_dim: usize) -> Result<PcaFit> {
    let (d, m) = x.shape();
    if target_dim == 0 || target_dim > d {
        return Err(Error::InvalidArgument(format!(
            "target_dim {target_dim} for dimension {d}"
        )));
    }
    if m < 2 {
        return Err(Error::DegenerateData(format!("{m} samples")));
    }
    let mean = x.column_mean();
    let mut centered = x.clone();
    let neg: Vec<f64> = mean.iter().map(|v| -v).collect();
    centered.add_column_vector(&neg);
    if centered.frobenius() <= 1e-12 * x.frobenius() || centered.max_abs() == 0.0 {
        return Err(Error::DegenerateData("all columns identical".into()));
    }
    let scatter = centered.matmul_t(&centered)?;
    let f = svd_full(&scatter)?;
    let projection = f.u.take_columns(target_dim).transpose();
    let projected = projection.matmul(&centered)?;
    Ok(PcaFit {
        projection,
        mean,
        projected,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(m: usize, n: usize, seed: u64) -> DenseMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DenseMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn cholesky_identity() {
        let l = cholesky_lower(&DenseMatrix::identity(3), 0.0).unwrap();
        assert_eq!(l, DenseMatrix::identity(3));
    }

    #[test]
    fn cholesky_two_by_two() {
        let g = DenseMatrix::from_rows(&[vec![4.0, 2.0], vec![2.0, 5.0]]).unwrap();
        let l = cholesky_lower(&g, 0.0).unwrap();
        let expected = DenseMatrix::from_rows(&[vec![2.0, 0.0], vec![1.0, 2.0]]).unwrap();
        assert_eq!(l, expected);
        // hand multiplication: [[2,0],[1,2]] * [[2,1],[0,2]] = [[4,2],[2,5]]
        assert_eq!(l.matmul_t(&l).unwrap(), g);
    }

    #[test]
    fn cholesky_rank_deficient_needs_jitter() {
        let g = DenseMatrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        assert!(matches!(
            cholesky_lower(&g, 0.0),
            Err(Error::NotPositiveDefinite { .. })
        ));
        let l = cholesky_lower(&g, 1e-6).unwrap();
        let target = g.add(&DenseMatrix::identity(2).scale(1e-6)).unwrap();
        assert!(l.matmul_t(&l).unwrap().relative_error(&target) < 1e-6);
        assert!((0..2).all(|i| l[(i, i)] > 0.0));
    }

    #[test]
    fn cholesky_rejects_asymmetric() {
        let g = DenseMatrix::from_rows(&[vec![2.0, 1.0], vec![0.0, 2.0]]).unwrap();
        assert!(matches!(cholesky_lower(&g, 0.0), Err(Error::NotSymmetric(_))));
    }

    #[test]
    fn escalation_reports_jitter() {
        let x = random(6, 3, 1);
        let gram = x.matmul_t(&x).unwrap();
        let (l, jitter) = cholesky_escalating(&gram).unwrap();
        assert!(jitter > 0.0);
        let target = gram.add(&DenseMatrix::identity(6).scale(jitter)).unwrap();
        assert!(l.matmul_t(&l).unwrap().relative_error(&target) < 1e-6);
        assert_eq!(jitter_schedule(&gram).len(), 8);
    }

    #[test]
    fn escalation_fails_on_zero_gram() {
        assert!(cholesky_escalating(&DenseMatrix::zeros(3, 3)).is_err());
    }

    #[test]
    fn triangular_solves() {
        let x = random(4, 9, 2);
        let gram = x.matmul_t(&x).unwrap();
        let l = cholesky_lower(&gram, 0.0).unwrap();
        let b = vec![1.0, -2.0, 0.5, 3.0];
        let y = solve_lower(&l, &b);
        assert!(l.matvec(&y).unwrap().iter().zip(&b).all(|(p, q)| (p - q).abs() < 1e-12));
        let z = solve_lower_transpose(&l, &b);
        let lt = l.transpose();
        assert!(lt.matvec(&z).unwrap().iter().zip(&b).all(|(p, q)| (p - q).abs() < 1e-12));
        let a = random(3, 4, 3);
        let a_sinv = right_solve_lower(&a, &l).unwrap();
        assert!(a_sinv.matmul(&l).unwrap().max_abs_diff(&a) < 1e-12);
    }

    #[test]
    fn effective_rank_examples() {
        let p = effective_rank(&[2.0, 1.0, 1.0], 0.95, 3).unwrap();
        assert_eq!(p.chosen_rank, 3);
        assert_eq!(p.retained_energy, 1.0);

        let p = effective_rank(&[1.0, 0.0, 0.0, 0.0], 0.95, 4).unwrap();
        assert_eq!(p.chosen_rank, 3);

        let p = effective_rank(&[5.0, 1.0, 0.5, 0.1], 1.0, 4).unwrap();
        assert_eq!(p.chosen_rank, 4);
        let p = effective_rank(&[1.0, 0.0, 0.0, 0.0], 1.0, 4).unwrap();
        assert_eq!(p.chosen_rank, 4);

        assert_eq!(
            effective_rank(&[0.0, 0.0], 0.5, 2),
            Err(Error::AllZeroSpectrum)
        );
        assert!(effective_rank(&[1.0, 2.0], 0.5, 2).is_err());
        assert!(effective_rank(&[1.0], 0.0, 1).is_err());
    }

    #[test]
    fn effective_rank_energy_threshold() {
        // energies 100, 1, 1, ... (10 values)
        let mut sigma = vec![10.0];
        sigma.extend(std::iter::repeat_n(1.0, 9));
        let p = effective_rank(&sigma, 0.95, 10).unwrap();
        // energy rank 5 (104/109 >= 0.95), raised to the floor 6
        assert_eq!(p.chosen_rank, 6);
        assert!((p.retained_energy - 105.0 / 109.0).abs() < 1e-15);
        assert!((p.discarded_energy() - 4.0).abs() < 1e-12);
        let p = effective_rank(&sigma, 0.97, 10).unwrap();
        // 106/109 = 0.9725
        assert_eq!(p.chosen_rank, 7);
    }

    #[test]
    fn pseudoinverse_cases() {
        assert!(pseudoinverse(&DenseMatrix::identity(3))
            .unwrap()
            .max_abs_diff(&DenseMatrix::identity(3))
            < 1e-15);
        let p = pseudoinverse(&DenseMatrix::from_diag(&[2.0, 0.0])).unwrap();
        assert_eq!(p, DenseMatrix::from_diag(&[0.5, 0.0]));
        assert_eq!(
            pseudoinverse(&DenseMatrix::zeros(2, 3)).unwrap(),
            DenseMatrix::zeros(3, 2)
        );
        // rank-2 4x4
        let a = random(4, 2, 5).matmul(&random(2, 4, 6)).unwrap();
        let ap = pseudoinverse(&a).unwrap();
        let aapa = a.matmul(&ap).unwrap().matmul(&a).unwrap();
        assert!(aapa.max_abs_diff(&a) < 1e-6);
    }

    #[test]
    fn pca_factor_of_eight() {
        let x = random(64, 40, 7);
        let fit = pca_fit_transform(&x, 8).unwrap();
        assert_eq!(fit.projected.shape(), (8, 40));
        let ppt = fit.projection.matmul_t(&fit.projection).unwrap();
        assert!(ppt.max_abs_diff(&DenseMatrix::identity(8)) < 1e-8);
    }

    #[test]
    fn pca_full_dimension_is_isometry() {
        let x = random(5, 30, 8);
        let fit = pca_fit_transform(&x, 5).unwrap();
        for (a, b) in [(0, 1), (3, 17), (29, 4)] {
            let dx: f64 = (0..5).map(|r| (x[(r, a)] - x[(r, b)]).powi(2)).sum();
            let dp: f64 = (0..5)
                .map(|r| (fit.projected[(r, a)] - fit.projected[(r, b)]).powi(2))
                .sum();
            assert!((dx.sqrt() - dp.sqrt()).abs() < 1e-6);
        }
    }

    #[test]
    fn pca_planar_data_reconstructs() {
        // points on a 2-D affine plane in 5-D
        let basis = random(5, 2, 9);
        let coeffs = random(2, 25, 10);
        let offset = [0.3, -1.0, 2.0, 0.0, 0.5];
        let mut x = basis.matmul(&coeffs).unwrap();
        x.add_column_vector(&offset);
        let fit = pca_fit_transform(&x, 2).unwrap();
        let mut back = fit.projection.t_matmul(&fit.projected).unwrap();
        back.add_column_vector(&fit.mean);
        assert!(back.max_abs_diff(&x) < 1e-8);
    }

    #[test]
    fn pca_degenerate() {
        let x = DenseMatrix::from_fn(3, 4, |r, _| 0.1 * r as f64);
        assert!(matches!(
            pca_fit_transform(&x, 2),
            Err(Error::DegenerateData(_))
        ));
    }
}
