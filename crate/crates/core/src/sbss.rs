//! Spatial blind source separation.
//!
//! The data are whitened with the symmetric inverse square root of their
//! sample covariance, `K` kernel-weighted local covariance matrices of the
//! whitened data are jointly diagonalized by an orthogonal `U`, and the
//! unmixing estimate is `Γ = Uᵀ Cov(X)^{-1/2}`. Latent components are
//! ordered by decreasing summed squared local-covariance diagonals, and each
//! row of `Γ` is signed so its largest-magnitude entry is positive.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::spatial::{centre, whiten, MultiField};

pub const DEFAULT_JD_TOL: f64 = 1e-8;
pub const DEFAULT_JD_MAX_SWEEPS: usize = 100;

/// Locality kernel `f(‖h‖)` of a local covariance matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SpatialKernel {
    /// `1` iff `h ≤ radius`.
    Ball { radius: f64 },
    /// `1` iff `inner < h ≤ outer`.
    Ring { inner: f64, outer: f64 },
    /// `exp(-h² / (2 bandwidth²))`.
    Gauss { bandwidth: f64 },
}

impl SpatialKernel {
    pub fn ball(radius: f64) -> Result<Self> {
        let k = Self::Ball { radius };
        k.validate()?;
        Ok(k)
    }

    pub fn ring(inner: f64, outer: f64) -> Result<Self> {
        let k = Self::Ring { inner, outer };
        k.validate()?;
        Ok(k)
    }

    pub fn gauss(bandwidth: f64) -> Result<Self> {
        let k = Self::Gauss { bandwidth };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Self::Ball { radius } => radius > 0.0,
            Self::Ring { inner, outer } => inner >= 0.0 && inner < outer,
            Self::Gauss { bandwidth } => bandwidth > 0.0 && bandwidth.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("invalid kernel {self:?}")))
        }
    }

    /// Kernels on non-overlapping consecutive rings `(r_0, r_1], (r_1, r_2], …`.
    pub fn rings(radii: &[(f64, f64)]) -> Result<Vec<Self>> {
        radii.iter().map(|&(a, b)| Self::ring(a, b)).collect()
    }

    /// Weight at distance `h ≥ 0`.
    #[inline]
    pub fn weight(&self, h: f64) -> f64 {
        match *self {
            Self::Ball { radius } => (h <= radius) as u8 as f64,
            Self::Ring { inner, outer } => (inner < h && h <= outer) as u8 as f64,
            Self::Gauss { bandwidth } => (-h * h / (2.0 * bandwidth * bandwidth)).exp(),
        }
    }
}

pub fn kernel_weight(kernel: &SpatialKernel, h: f64) -> f64 {
    kernel.weight(h)
}

/// `M_f = (1/n) Σ_i Σ_j f(‖s_i − s_j‖) x_i x_jᵀ` for a centred field,
/// returned as `(M + Mᵀ)/2`. The double sum includes `i = j`.
pub fn local_covariance(field: &MultiField, kernel: &SpatialKernel) -> Result<DMatrix<f64>> {
    kernel.validate()?;
    let (n, p) = (field.n(), field.p());
    let x = field.values();
    for c in 0..p {
        let col = x.column(c);
        let mean = col.mean();
        let scale = col.amax().max(1.0);
        if mean.abs() > 1e-8 * scale {
            return Err(Error::NotCentred { column: c, mean });
        }
    }
    let dist = field.locations().distances();
    let mut m = DMatrix::<f64>::zeros(p, p);
    let mut acc = vec![0.0; p];
    for i in 0..n {
        acc.fill(0.0);
        let mut any = false;
        for j in 0..n {
            let w = kernel.weight(dist[(i, j)]);
            if w == 0.0 {
                continue;
            }
            any = true;
            for (b, slot) in acc.iter_mut().enumerate() {
                *slot += w * x[(j, b)];
            }
        }
        if !any {
            continue;
        }
        for a in 0..p {
            let xa = x[(i, a)];
            for (b, &s) in acc.iter().enumerate() {
                m[(a, b)] += xa * s;
            }
        }
    }
    m /= n as f64;
    Ok(linalg::symmetrize(&m))
}

/// Result of an approximate joint diagonalization.
#[derive(Debug, Clone)]
pub struct JointDiagonalization {
    /// Orthogonal `U`; `Uᵀ M_k U` are approximately diagonal.
    pub rotation: DMatrix<f64>,
    pub sweeps: usize,
    pub converged: bool,
    /// Largest rotation angle in the last sweep.
    pub final_angle: f64,
    /// `Σ_k ‖diag(Uᵀ M_k U)‖²` before the first sweep and after each sweep.
    pub objective_trace: Vec<f64>,
}

fn diagonal_objective(mats: &[DMatrix<f64>]) -> f64 {
    mats.iter()
        .map(|m| m.diagonal().iter().map(|d| d * d).sum::<f64>())
        .sum()
}

/// Jacobi-type joint diagonalization of symmetric matrices by Givens
/// rotations. Each pair `(i, j)` gets the closed-form angle maximizing the
/// summed squared diagonals over all matrices; sweeps stop when every
/// angle of a sweep is below `tol`.
pub fn joint_diagonalize(mats: &[DMatrix<f64>], tol: f64, max_sweeps: usize) -> Result<JointDiagonalization> {
    let Some(first) = mats.first() else {
        return Err(Error::InvalidInput("joint diagonalization needs at least one matrix".into()));
    };
    let p = first.nrows();
    for (k, m) in mats.iter().enumerate() {
        if m.nrows() != p || m.ncols() != p {
            return Err(Error::Shape(format!("matrix {k} is not {p}x{p}")));
        }
        if !linalg::is_symmetric(m, 1e-8 * (1.0 + m.amax())) {
            return Err(Error::InvalidInput(format!("matrix {k} is not symmetric")));
        }
    }
    let mut work: Vec<DMatrix<f64>> = mats.iter().map(linalg::symmetrize).collect();
    let mut v = DMatrix::<f64>::identity(p, p);
    let mut trace = vec![diagonal_objective(&work)];
    let mut sweeps = 0;
    let mut final_angle = 0.0;
    let mut converged = p < 2;

    while !converged && sweeps < max_sweeps {
        sweeps += 1;
        let mut largest = 0.0f64;
        for i in 0..p - 1 {
            for j in (i + 1)..p {
                let (mut g11, mut g12, mut g22) = (0.0, 0.0, 0.0);
                for m in &work {
                    let a = m[(i, i)] - m[(j, j)];
                    let b = m[(i, j)] + m[(j, i)];
                    g11 += a * a;
                    g12 += a * b;
                    g22 += b * b;
                }
                let ton = g11 - g22;
                let toff = 2.0 * g12;
                let theta = 0.5 * toff.atan2(ton + (ton * ton + toff * toff).sqrt());
                largest = largest.max(theta.abs());
                if theta.abs() < tol {
                    continue;
                }
                let (s, c) = theta.sin_cos();
                for m in work.iter_mut() {
                    for r in 0..p {
                        let (mi, mj) = (m[(i, r)], m[(j, r)]);
                        m[(i, r)] = c * mi + s * mj;
                        m[(j, r)] = c * mj - s * mi;
                    }
                    for r in 0..p {
                        let (mi, mj) = (m[(r, i)], m[(r, j)]);
                        m[(r, i)] = c * mi + s * mj;
                        m[(r, j)] = c * mj - s * mi;
                    }
                }
                for r in 0..p {
                    let (vi, vj) = (v[(r, i)], v[(r, j)]);
                    v[(r, i)] = c * vi + s * vj;
                    v[(r, j)] = c * vj - s * vi;
                }
            }
        }
        trace.push(diagonal_objective(&work));
        final_angle = largest;
        converged = largest < tol;
    }
    if !converged {
        log::warn!(
            "joint diagonalization stopped after {sweeps} sweeps without convergence (largest angle {final_angle:e})"
        );
    }
    Ok(JointDiagonalization {
        rotation: v,
        sweeps,
        converged,
        final_angle,
        objective_trace: trace,
    })
}

/// Estimated SBSS model.
#[derive(Debug, Clone)]
pub struct SbssFit {
    /// `Γ`, rows ordered and signed by convention.
    pub unmixing: DMatrix<f64>,
    /// `Γ^{-1}`, obtained as `Cov^{1/2} U` without inversion.
    pub mixing: DMatrix<f64>,
    pub mean: DVector<f64>,
    /// `Z(s_i) = Γ (X(s_i) − X̄)`.
    pub latent: MultiField,
    /// Per kernel: squared-diagonal share of `‖Uᵀ M_k U‖²_F`.
    pub diag_scores: Vec<f64>,
    pub kernels: Vec<SpatialKernel>,
    pub sweeps: usize,
    pub converged: bool,
}

/// Estimates the unmixing matrix and latent field from `field`.
pub fn fit_sbss(field: &MultiField, kernels: &[SpatialKernel]) -> Result<SbssFit> {
    if kernels.is_empty() {
        return Err(Error::InvalidInput("SBSS needs at least one kernel".into()));
    }
    let white = whiten(field)?;
    let locals = kernels
        .iter()
        .map(|k| local_covariance(&white.field, k))
        .collect::<Result<Vec<_>>>()?;
    let jd = joint_diagonalize(&locals, DEFAULT_JD_TOL, DEFAULT_JD_MAX_SWEEPS)?;
    let u = jd.rotation;
    let p = field.p();

    let rotated: Vec<DMatrix<f64>> = locals.iter().map(|m| u.transpose() * m * &u).collect();
    let energy: Vec<f64> = (0..p)
        .map(|c| rotated.iter().map(|m| m[(c, c)] * m[(c, c)]).sum())
        .collect();
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| energy[b].total_cmp(&energy[a]).then(a.cmp(&b)));

    let raw = u.transpose() * &white.whitener;
    let mut unmixing = DMatrix::zeros(p, p);
    let mut columns = DMatrix::zeros(p, p);
    for (dst, &src) in order.iter().enumerate() {
        let row = raw.row(src);
        let pivot = row.iter().copied().fold(0.0f64, |best, v| if v.abs() > best.abs() { v } else { best });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        unmixing.set_row(dst, &(row * sign));
        columns.set_column(dst, &(u.column(src) * sign));
    }
    let mixing = &white.dewhitener * columns;

    let diag_scores = rotated
        .iter()
        .map(|m| {
            let total = m.norm_squared();
            if total == 0.0 {
                1.0
            } else {
                m.diagonal().norm_squared() / total
            }
        })
        .collect();

    let latent_values = centre(field.values(), &white.mean) * unmixing.transpose();
    Ok(SbssFit {
        unmixing,
        mixing,
        mean: white.mean,
        latent: MultiField::new(field.locations().clone(), latent_values)?,
        diag_scores,
        kernels: kernels.to_vec(),
        sweeps: jd.sweeps,
        converged: jd.converged,
    })
}

/// Maps latent predictions (`m × p`) back to the data scale:
/// `X = Γ^{-1} Z + X̄` row by row.
pub fn predict_mix(fit: &SbssFit, latent_predictions: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let p = fit.mean.len();
    if latent_predictions.ncols() != p {
        return Err(Error::Shape(format!(
            "latent predictions have {} columns, fit has {p}",
            latent_predictions.ncols()
        )));
    }
    let mut out = latent_predictions * fit.mixing.transpose();
    for mut row in out.row_iter_mut() {
        row += fit.mean.transpose();
    }
    Ok(out)
}

/// Minimum distance index of a gain matrix `G = Γ Ω`:
/// `(1/√(p−1)) · min ‖C G − I‖_F` over scaled signed permutations `C`.
/// Rows are normalized, so the minimum reduces to a maximum-weight
/// assignment on the squared normalized entries. `0` iff `G` is a scaled
/// signed permutation, `1` for maximal mixing.
pub fn md_index(gain: &DMatrix<f64>) -> f64 {
    let p = gain.nrows();
    assert_eq!(p, gain.ncols(), "gain must be square");
    if p < 2 {
        return 0.0;
    }
    let mut weights = DMatrix::zeros(p, p);
    for i in 0..p {
        let norm = gain.row(i).norm_squared();
        for j in 0..p {
            weights[(i, j)] = if norm > 0.0 { gain[(i, j)] * gain[(i, j)] / norm } else { 0.0 };
        }
    }
    let cost = weights.map(|w| -w);
    let assignment = min_cost_assignment(&cost);
    let matched: f64 = assignment.iter().enumerate().map(|(i, &j)| weights[(i, j)]).sum();
    ((p as f64 - matched).max(0.0) / (p as f64 - 1.0)).sqrt().min(1.0)
}

/// Hungarian algorithm (shortest augmenting paths with potentials) for a
/// square cost matrix; returns the column assigned to each row.
pub(crate) fn min_cost_assignment(cost: &DMatrix<f64>) -> Vec<usize> {
    let n = cost.nrows();
    // 1-based arrays; column 0 is the virtual source.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of_col = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of_col[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of_col[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of_col[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of_col[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of_col[j0] = row_of_col[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        if row_of_col[j] > 0 {
            assignment[row_of_col[j] - 1] = j - 1;
        }
    }
    assignment
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spatial::{sample_covariance, LocationSet};
    use std::sync::Arc;

    #[test]
    fn kernel_bounds() {
        let ring = SpatialKernel::ring(2.0, 4.0).unwrap();
        assert_eq!(ring.weight(3.0), 1.0);
        assert_eq!(ring.weight(2.0), 0.0);
        assert_eq!(ring.weight(4.0), 1.0);
        assert_eq!(ring.weight(4.0001), 0.0);
        assert_eq!(SpatialKernel::ball(2.0).unwrap().weight(0.0), 1.0);
        assert_eq!(SpatialKernel::gauss(1.3).unwrap().weight(0.0), 1.0);
        assert!(SpatialKernel::ring(4.0, 2.0).is_err());
        assert!(SpatialKernel::ball(0.0).is_err());
    }

    fn small_field() -> MultiField {
        let pts = [[0.0, 0.0], [1.0, 0.0], [0.0, 3.0], [2.5, 2.5], [4.0, 1.0]];
        let locs = Arc::new(LocationSet::from_points(&pts).unwrap());
        let raw = DMatrix::from_row_slice(5, 2, &[1.0, 2.0, -1.0, 0.5, 0.3, -1.0, 2.0, 0.1, -0.7, 1.3]);
        let mean = raw.row_mean().transpose();
        MultiField::new(locs, centre(&raw, &mean)).unwrap()
    }

    #[test]
    fn local_covariance_tiny_ball_is_sample_covariance() {
        let f = small_field();
        let m = local_covariance(&f, &SpatialKernel::ball(0.5).unwrap()).unwrap();
        assert!((m - sample_covariance(&f).unwrap()).amax() < 1e-15);
    }

    #[test]
    fn local_covariance_empty_ring_is_zero() {
        let f = small_field();
        let m = local_covariance(&f, &SpatialKernel::ring(100.0, 200.0).unwrap()).unwrap();
        assert_eq!(m, DMatrix::zeros(2, 2));
    }

    #[test]
    fn local_covariance_requires_centred_input() {
        let f = small_field();
        let shifted = f.values().add_scalar(1.0);
        let f = MultiField::new(f.locations().clone(), shifted).unwrap();
        assert!(matches!(
            local_covariance(&f, &SpatialKernel::ball(1.0).unwrap()),
            Err(Error::NotCentred { .. })
        ));
    }

    #[test]
    fn diagonal_inputs_need_no_rotation() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 1.0, -2.0]));
        let b = DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, 0.2, 0.9]));
        let jd = joint_diagonalize(&[a.clone(), b.clone()], DEFAULT_JD_TOL, 100).unwrap();
        assert!(jd.converged);
        assert!(md_index(&jd.rotation) < 1e-12);
        assert!((jd.objective_trace.last().unwrap() - jd.objective_trace[0]).abs() < 1e-12);
    }

    #[test]
    fn single_matrix_gives_eigenvectors() {
        let m = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, -0.2, 0.5, -0.2, 1.0]);
        let jd = joint_diagonalize(std::slice::from_ref(&m), 1e-12, 100).unwrap();
        let d = jd.rotation.transpose() * &m * &jd.rotation;
        let (eig, vecs) = linalg::sym_eigen(&m);
        let optimum: f64 = eig.iter().map(|v| v * v).sum();
        let got: f64 = d.diagonal().iter().map(|v| v * v).sum();
        assert!((optimum - got).abs() < 1e-9);
        assert!(md_index(&(jd.rotation.transpose() * vecs)) < 1e-6);
    }

    #[test]
    fn hungarian_matches_brute_force() {
        let cost = DMatrix::from_row_slice(4, 4, &[
            4.0, 1.0, 3.0, 2.5, 2.0, 0.0, 5.0, 1.0, 3.0, 2.0, 2.0, 0.5, 1.0, 3.0, 0.2, 4.0,
        ]);
        let a = min_cost_assignment(&cost);
        let total: f64 = a.iter().enumerate().map(|(i, &j)| cost[(i, j)]).sum();
        let mut best = f64::INFINITY;
        let mut perm = [0usize, 1, 2, 3];
        permute(&mut perm, 0, &mut |p| {
            best = best.min(p.iter().enumerate().map(|(i, &j)| cost[(i, j)]).sum());
        });
        assert!((total - best).abs() < 1e-12);
    }

    fn permute(p: &mut [usize; 4], k: usize, f: &mut impl FnMut(&[usize; 4])) {
        if k == p.len() {
            f(p);
            return;
        }
        for i in k..p.len() {
            p.swap(k, i);
            permute(p, k + 1, f);
            p.swap(k, i);
        }
    }

    #[test]
    fn md_index_reference_values() {
        assert_eq!(md_index(&DMatrix::identity(3, 3)), 0.0);
        let g = DMatrix::from_row_slice(3, 3, &[0.0, -2.0, 0.0, 0.0, 0.0, 0.5, 7.0, 0.0, 0.0]);
        assert!(md_index(&g) < 1e-10);
        // All-ones 2x2: both signed permutations leave squared normalized
        // entries of 1/2 on the matched cells, so MD = sqrt(2 - 1)/1 = 1.
        let ones = DMatrix::from_element(2, 2, 1.0);
        assert!((md_index(&ones) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn scalar_sbss_standardizes() {
        let pts: Vec<[f64; 2]> = (0..30).map(|i| [i as f64, (i * 7 % 11) as f64]).collect();
        let locs = Arc::new(LocationSet::from_points(&pts).unwrap());
        let vals = DMatrix::from_fn(30, 1, |i, _| ((i * 13 % 17) as f64).sin() * 3.0 + 2.0);
        let f = MultiField::new(locs, vals.clone()).unwrap();
        let fit = fit_sbss(&f, &[SpatialKernel::ring(0.0, 3.0).unwrap()]).unwrap();
        let mean = vals.mean();
        let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 30.0).sqrt();
        assert!((fit.unmixing[(0, 0)] - 1.0 / sd).abs() < 1e-12);
        for i in 0..30 {
            assert!((fit.latent.values()[(i, 0)] - (vals[(i, 0)] - mean) / sd).abs() < 1e-12);
        }
    }

    #[test]
    fn predict_mix_round_trip_and_mean() {
        let pts: Vec<[f64; 2]> = (0..40).map(|i| [(i % 8) as f64, (i / 8) as f64]).collect();
        let locs = Arc::new(LocationSet::from_points(&pts).unwrap());
        let vals = DMatrix::from_fn(40, 3, |i, j| ((i * (j + 3)) as f64 * 0.37).sin() + j as f64);
        let f = MultiField::new(locs, vals.clone()).unwrap();
        let kernels = SpatialKernel::rings(&[(0.0, 1.5), (1.5, 3.0)]).unwrap();
        let fit = fit_sbss(&f, &kernels).unwrap();
        let back = predict_mix(&fit, fit.latent.values()).unwrap();
        assert!((back - &vals).amax() < 1e-8);
        let zero = predict_mix(&fit, &DMatrix::zeros(4, 3)).unwrap();
        for r in 0..4 {
            assert!((zero.row(r).transpose() - &fit.mean).amax() < 1e-14);
        }
        // Linear-solve oracle: Γ x = z for each row.
        let z = DMatrix::from_fn(5, 3, |i, j| (i as f64 - j as f64) * 0.3);
        let mixed = predict_mix(&fit, &z).unwrap();
        let lu = fit.unmixing.clone().lu();
        for r in 0..5 {
            let x = lu.solve(&z.row(r).transpose()).unwrap() + &fit.mean;
            assert!((mixed.row(r).transpose() - x).amax() < 1e-10);
        }
        let cov = sample_covariance(&fit.latent).unwrap();
        assert!((cov - DMatrix::<f64>::identity(3, 3)).amax() < 1e-6);
    }

    #[test]
    fn sign_and_order_conventions() {
        let pts: Vec<[f64; 2]> = (0..60).map(|i| [(i % 10) as f64, (i / 10) as f64]).collect();
        let locs = Arc::new(LocationSet::from_points(&pts).unwrap());
        let vals = DMatrix::from_fn(60, 3, |i, j| ((i * (j + 2)) as f64 * 0.61).cos() * (j + 1) as f64);
        let f = MultiField::new(locs, vals).unwrap();
        let kernels = SpatialKernel::rings(&[(0.0, 1.0), (1.0, 2.0), (2.0, 3.0)]).unwrap();
        let fit = fit_sbss(&f, &kernels).unwrap();
        for r in 0..3 {
            let row = fit.unmixing.row(r);
            let pivot = row.iter().copied().fold(0.0f64, |b, v| if v.abs() > b.abs() { v } else { b });
            assert!(pivot > 0.0);
        }
        let white = whiten(&f).unwrap();
        let locals: Vec<_> = kernels.iter().map(|k| local_covariance(&white.field, k).unwrap()).collect();
        // Rows of Γ W^{-1} are the rotation columns; their energy must decrease.
        let ut = &fit.unmixing * &white.dewhitener;
        let energy: Vec<f64> = (0..3)
            .map(|c| {
                let u = ut.row(c).transpose();
                locals.iter().map(|m| (u.transpose() * m * &u)[(0, 0)].powi(2)).sum()
            })
            .collect();
        assert!(energy[0] >= energy[1] && energy[1] >= energy[2], "{energy:?}");
    }
}
