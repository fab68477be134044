//! Empirical (cross-)semivariograms, weighted least-squares fitting of
//! univariate models, and LMC fitting with PSD projection.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::covariance::{CovarianceModel, LmcModel, LmcStructure};
use crate::error::{Error, Result};
use crate::linalg;
use crate::spatial::{LocationSet, MultiField};

pub const DEFAULT_BINS: usize = 15;
/// Floor on the model semivariance in the Cressie weights.
pub const CRESSIE_EPS: f64 = 1e-6;
pub const MATERN_SHAPE_BOUNDS: (f64, f64) = (0.1, 3.0);
const STARTS: usize = 8;
/// Index of the range in the parameter vector of every family.
const RANGE_PARAM: usize = 1;

/// Binning of site pairs: `bins` equal-width bins on `(0, max_dist]`, where
/// `max_dist` defaults to a third of the largest pairwise distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Binning {
    pub bins: usize,
    pub max_dist: Option<f64>,
}

impl Default for Binning {
    fn default() -> Self {
        Self {
            bins: DEFAULT_BINS,
            max_dist: None,
        }
    }
}

impl Binning {
    pub fn resolve_max_dist(&self, locs: &LocationSet) -> f64 {
        self.max_dist.unwrap_or_else(|| locs.max_distance() / 3.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalVariogram {
    /// Mean pair distance in each bin (the bin midpoint when empty).
    pub bin_centers: Vec<f64>,
    /// Semivariance (cross-semivariance for two variables); 0 in empty bins.
    pub gamma: Vec<f64>,
    pub counts: Vec<usize>,
    pub max_dist: f64,
}

impl EmpiricalVariogram {
    /// `(distance, gamma, count)` of the nonempty bins.
    pub fn nonempty(&self) -> impl Iterator<Item = (f64, f64, usize)> + '_ {
        (0..self.counts.len())
            .filter(|&b| self.counts[b] > 0)
            .map(|b| (self.bin_centers[b], self.gamma[b], self.counts[b]))
    }

    pub fn bin_width(&self) -> f64 {
        self.max_dist / self.counts.len() as f64
    }
}

/// Matheron estimator `γ(b) = 1/(2 N_b) Σ (v_i − v_j)(w_i − w_j)` over the
/// pairs in bin `b`; `w = v` unless a second variable is given.
pub fn empirical_variogram(
    v: &DVector<f64>,
    w: Option<&DVector<f64>>,
    locs: &LocationSet,
    binning: Binning,
) -> Result<EmpiricalVariogram> {
    let n = locs.len();
    if n < 2 {
        return Err(Error::Estimation(format!("need at least 2 sites, got {n}")));
    }
    let w = w.unwrap_or(v);
    if v.len() != n || w.len() != n {
        return Err(Error::Shape(format!("{} / {} values for {n} sites", v.len(), w.len())));
    }
    if binning.bins == 0 {
        return Err(Error::InvalidInput("variogram needs at least one bin".into()));
    }
    let max_dist = binning.resolve_max_dist(locs);
    if !(max_dist > 0.0 && max_dist.is_finite()) {
        return Err(Error::Estimation(format!("invalid maximum distance {max_dist}")));
    }
    let bins = binning.bins;
    let width = max_dist / bins as f64;
    let mut sum = vec![0.0; bins];
    let mut dist_sum = vec![0.0; bins];
    let mut counts = vec![0usize; bins];
    let dist = locs.distances();
    for j in 0..n {
        for i in (j + 1)..n {
            let d = dist[(i, j)];
            if d <= 0.0 || d > max_dist {
                continue;
            }
            let b = (((d / width).ceil() as usize).max(1) - 1).min(bins - 1);
            sum[b] += (v[i] - v[j]) * (w[i] - w[j]);
            dist_sum[b] += d;
            counts[b] += 1;
        }
    }
    if counts.iter().all(|&c| c == 0) {
        return Err(Error::Estimation(format!("no site pairs within distance {max_dist}")));
    }
    let mut bin_centers = Vec::with_capacity(bins);
    let mut gamma = Vec::with_capacity(bins);
    for b in 0..bins {
        if counts[b] > 0 {
            bin_centers.push(dist_sum[b] / counts[b] as f64);
            gamma.push(sum[b] / (2.0 * counts[b] as f64));
        } else {
            bin_centers.push((b as f64 + 0.5) * width);
            gamma.push(0.0);
        }
    }
    Ok(EmpiricalVariogram {
        bin_centers,
        gamma,
        counts,
        max_dist,
    })
}

/// Structural family fitted together with a nugget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelFamily {
    Spherical,
    Matern,
}

impl ModelFamily {
    fn n_params(self) -> usize {
        match self {
            Self::Spherical => 3,
            Self::Matern => 4,
        }
    }

    /// Parameters are `[partial sill, range, nugget]` or
    /// `[partial sill, range, shape, nugget]`.
    pub fn model(self, params: &[f64]) -> CovarianceModel {
        let structure = match self {
            Self::Spherical => CovarianceModel::spherical(params[0], params[1]),
            Self::Matern => CovarianceModel::matern(params[0], params[2], params[1]),
        };
        let nugget = params[params.len() - 1];
        CovarianceModel::Sum {
            parts: vec![structure, CovarianceModel::nugget(nugget)],
        }
    }
}

impl std::str::FromStr for ModelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "spherical" | "sph" => Ok(Self::Spherical),
            "matern" | "mat" => Ok(Self::Matern),
            other => Err(Error::InvalidInput(format!("unknown model family `{other}`"))),
        }
    }
}

/// Box constraints, one `(lower, upper)` per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct FitBounds(pub Vec<(f64, f64)>);

impl FitBounds {
    /// Sills in `[0, 2 max γ]`, ranges from half a bin width (Matérn) or one
    /// bin width (spherical) up to `max_dist` (Matérn) or `2 max_dist`
    /// (spherical), Matérn shape in `[0.1, 3]`.
    pub fn default_for(emp: &EmpiricalVariogram, family: ModelFamily) -> Self {
        let gmax = emp.nonempty().map(|(_, g, _)| g).fold(0.0f64, f64::max).max(1e-12);
        let w = emp.bin_width();
        let sill = (0.0, 2.0 * gmax);
        match family {
            ModelFamily::Spherical => Self(vec![sill, (w, 2.0 * emp.max_dist), sill]),
            ModelFamily::Matern => Self(vec![sill, (0.5 * w, emp.max_dist), MATERN_SHAPE_BOUNDS, sill]),
        }
    }

    /// Unit-box coordinates to parameters. The range is searched on a log
    /// scale: its bounds span more than an order of magnitude, and a linear
    /// map leaves short ranges with almost no volume.
    fn to_params(&self, unit: &[f64]) -> Vec<f64> {
        unit.iter()
            .zip(&self.0)
            .enumerate()
            .map(|(j, (&u, &(lo, hi)))| {
                let u = u.clamp(0.0, 1.0);
                if j == RANGE_PARAM && lo > 0.0 {
                    lo * (hi / lo).powf(u)
                } else {
                    lo + u * (hi - lo)
                }
            })
            .collect()
    }

    fn to_unit(&self, params: &[f64]) -> Vec<f64> {
        params
            .iter()
            .zip(&self.0)
            .enumerate()
            .map(|(j, (&x, &(lo, hi)))| {
                let u = if hi <= lo {
                    0.0
                } else if j == RANGE_PARAM && lo > 0.0 {
                    (x / lo).ln() / (hi / lo).ln()
                } else {
                    (x - lo) / (hi - lo)
                };
                u.clamp(0.0, 1.0)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FittedModel {
    pub model: CovarianceModel,
    pub family: ModelFamily,
    pub params: Vec<f64>,
    /// Cressie-weighted SSE at `params`.
    pub objective_value: f64,
    pub converged: bool,
    /// Objective at each deterministic start point.
    pub start_objectives: Vec<f64>,
}

/// `Σ_b N_b (γ̂_b − γ(h_b))² / max(γ(h_b), ε)²`.
pub fn cressie_objective(emp: &EmpiricalVariogram, model: &CovarianceModel) -> f64 {
    emp.nonempty()
        .map(|(h, g, n)| {
            let m = model.semivariance(h);
            let r = g - m;
            n as f64 * r * r / m.max(CRESSIE_EPS).powi(2)
        })
        .sum()
}

/// Radical inverse of `i` in `base`.
fn halton(mut i: usize, base: usize) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while i > 0 {
        f /= base as f64;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

/// Initial guess read off the empirical variogram: the plateau is the mean
/// of the last third of the nonempty bins, the nugget a tenth of it, and the
/// range the first lag reaching 95% of the plateau.
fn eyeball_start(emp: &EmpiricalVariogram, family: ModelFamily) -> Vec<f64> {
    let bins: Vec<(f64, f64)> = emp.nonempty().map(|(h, g, _)| (h, g)).collect();
    let tail = &bins[bins.len() - bins.len().div_ceil(3)..];
    let plateau = tail.iter().map(|&(_, g)| g).sum::<f64>() / tail.len() as f64;
    let reach = bins
        .iter()
        .find(|&&(_, g)| g >= 0.95 * plateau)
        .map_or(emp.max_dist, |&(h, _)| h);
    match family {
        ModelFamily::Spherical => vec![0.9 * plateau, reach, 0.1 * plateau],
        // exponential-like shape: 95% of the sill at about three scale units
        ModelFamily::Matern => vec![0.9 * plateau, reach / 3.0, 0.5, 0.1 * plateau],
    }
}

/// Bounded multi-start Nelder–Mead fit of `family` plus nugget by
/// Cressie-weighted least squares. Starts are a guess read off the
/// empirical variogram and the first eight points of a Halton sequence
/// mapped into `[0.1, 0.9]` of each (log-scaled for the range) parameter
/// interval.
pub fn fit_wls(emp: &EmpiricalVariogram, family: ModelFamily, bounds: Option<FitBounds>) -> Result<FittedModel> {
    let nonempty = emp.nonempty().count();
    if nonempty < 3 {
        return Err(Error::Fit(format!("need at least 3 nonempty bins, got {nonempty}")));
    }
    let bounds = bounds.unwrap_or_else(|| FitBounds::default_for(emp, family));
    let k = family.n_params();
    if bounds.0.len() != k || bounds.0.iter().any(|&(lo, hi)| !(lo <= hi) || !lo.is_finite() || !hi.is_finite()) {
        return Err(Error::Fit(format!("invalid bounds {:?}", bounds.0)));
    }
    const BASES: [usize; 4] = [2, 3, 5, 7];
    let objective = |unit: &[f64]| {
        let params = bounds.to_params(unit);
        let model = family.model(&params);
        let value = cressie_objective(emp, &model);
        if value.is_finite() {
            value
        } else {
            f64::INFINITY
        }
    };

    let mut starts = vec![bounds.to_unit(&eyeball_start(emp, family))];
    starts.extend((0..STARTS).map(|s| (0..k).map(|j| 0.1 + 0.8 * halton(s + 1, BASES[j])).collect::<Vec<_>>()));
    let mut best: Option<(Vec<f64>, f64, bool)> = None;
    let mut start_objectives = Vec::with_capacity(starts.len());
    for start in starts {
        start_objectives.push(objective(&start));
        let (x, fx, converged) = nelder_mead(&objective, &start, 0.15, 1500, 1e-10);
        if fx.is_finite() && best.as_ref().is_none_or(|(_, b, _)| fx < *b) {
            best = Some((x, fx, converged));
        }
    }
    let Some((unit, objective_value, converged)) = best else {
        return Err(Error::Fit("objective is not finite at any start".into()));
    };
    let params = bounds.to_params(&unit);
    Ok(FittedModel {
        model: family.model(&params),
        family,
        params,
        objective_value,
        converged,
        start_objectives,
    })
}

/// Nelder–Mead on the unit box; trial points are clamped to `[0, 1]^k`.
/// Returns `(argmin, min, converged)`.
fn nelder_mead(f: &impl Fn(&[f64]) -> f64, start: &[f64], step: f64, max_iter: usize, ftol: f64) -> (Vec<f64>, f64, bool) {
    let k = start.len();
    let clamp = |x: Vec<f64>| -> Vec<f64> { x.into_iter().map(|v| v.clamp(0.0, 1.0)).collect() };
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(k + 1);
    simplex.push((start.to_vec(), f(start)));
    for j in 0..k {
        let mut x = start.to_vec();
        x[j] = if x[j] + step <= 1.0 { x[j] + step } else { x[j] - step };
        let fx = f(&x);
        simplex.push((x, fx));
    }
    let mut converged = false;
    for _ in 0..max_iter {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let (fbest, fworst) = (simplex[0].1, simplex[k].1);
        let spread = (fworst - fbest).abs();
        let diameter = simplex[1..]
            .iter()
            .map(|(x, _)| x.iter().zip(&simplex[0].0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
            .fold(0.0, f64::max);
        if fworst.is_finite() && spread <= ftol * (fbest.abs() + 1e-12) && diameter < 1e-6 {
            converged = true;
            break;
        }
        let centroid: Vec<f64> = (0..k)
            .map(|j| simplex[..k].iter().map(|(x, _)| x[j]).sum::<f64>() / k as f64)
            .collect();
        let worst = simplex[k].0.clone();
        let along = |t: f64| -> Vec<f64> {
            clamp(centroid.iter().zip(&worst).map(|(c, w)| c + t * (c - w)).collect())
        };
        let xr = along(1.0);
        let fr = f(&xr);
        if fr < simplex[0].1 {
            let xe = along(2.0);
            let fe = f(&xe);
            simplex[k] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[k - 1].1 {
            simplex[k] = (xr, fr);
        } else {
            let (xc, fc) = if fr < simplex[k].1 {
                let xc = along(0.5);
                let fc = f(&xc);
                (xc, fc)
            } else {
                let xc = along(-0.5);
                let fc = f(&xc);
                (xc, fc)
            };
            if fc < simplex[k].1.min(fr) {
                simplex[k] = (xc, fc);
            } else {
                let best = simplex[0].0.clone();
                for entry in simplex.iter_mut().skip(1) {
                    let x: Vec<f64> = entry.0.iter().zip(&best).map(|(x, b)| b + 0.5 * (x - b)).collect();
                    let fx = f(&x);
                    *entry = (x, fx);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (x, fx) = simplex.swap_remove(0);
    (x, fx, converged)
}

/// Range of the spherical LMC structure: the largest pairwise distance
/// divided by six.
pub fn lmc_range_heuristic(locs: &LocationSet) -> f64 {
    locs.max_distance() / 6.0
}

/// Nugget plus spherical structure with the heuristic range.
pub fn default_lmc_structures(locs: &LocationSet) -> Vec<CovarianceModel> {
    vec![
        CovarianceModel::nugget(1.0),
        CovarianceModel::spherical(1.0, lmc_range_heuristic(locs)),
    ]
}

/// Fits an LMC with fixed unit-sill structures: per variable pair, the
/// partial sills solve a weighted linear least-squares problem on the
/// empirical (cross-)variogram (weights `N_b / h_b²`); the resulting
/// coregionalization matrices are projected onto the PSD cone.
pub fn fit_lmc(field: &MultiField, structures: &[CovarianceModel], binning: Binning) -> Result<LmcModel> {
    let r = structures.len();
    if r == 0 {
        return Err(Error::Fit("LMC needs at least one structure".into()));
    }
    for s in structures {
        s.validate()?;
        if (s.sill() - 1.0).abs() > 1e-12 {
            return Err(Error::Fit(format!("structure {s:?} must have unit sill")));
        }
    }
    let p = field.p();
    let locs = field.locations();
    let columns: Vec<DVector<f64>> = (0..p).map(|j| field.column(j)).collect();
    let mut sills = vec![DMatrix::<f64>::zeros(p, p); r];
    for i in 0..p {
        for j in i..p {
            let emp = empirical_variogram(&columns[i], Some(&columns[j]), locs, binning)?;
            let bins: Vec<(f64, f64, usize)> = emp.nonempty().collect();
            if bins.len() < r {
                return Err(Error::Fit(format!(
                    "{} nonempty bins for {r} structures (variables {i}, {j})",
                    bins.len()
                )));
            }
            let design = DMatrix::from_fn(bins.len(), r, |b, k| {
                let sw = (bins[b].2 as f64).sqrt() / bins[b].0;
                sw * structures[k].semivariance(bins[b].0)
            });
            let rhs = DVector::from_fn(bins.len(), |b, _| (bins[b].2 as f64).sqrt() / bins[b].0 * bins[b].1);
            let solution = design
                .svd(true, true)
                .solve(&rhs, 1e-12)
                .map_err(|e| Error::Fit(format!("sill least squares failed: {e}")))?;
            for k in 0..r {
                sills[k][(i, j)] = solution[k];
                sills[k][(j, i)] = solution[k];
            }
        }
    }
    let fitted = sills
        .into_iter()
        .zip(structures)
        .map(|(t, rho)| LmcStructure {
            coregionalization: linalg::psd_project(&t),
            correlation: rho.clone(),
        })
        .collect();
    LmcModel::new(fitted)
}
