//! Simulation study runner: repeated train/grid prediction experiments
//! comparing LMC cokriging with SBSS-kriging.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::{CovarianceModel, PmatModel};
use crate::error::{Error, Result};
use crate::kriging::{cok_build, cok_predict, mse_report, sbss_krige_fitted, MseReport};
use crate::rng::{child_seed, stream_rng, streams};
use crate::sbss::{fit_sbss, md_index, SpatialKernel};
use crate::simulation::{
    make_grid, sample_coordinates, simulate_train_test, CoordinateSampler, CoordinateVariant, FieldModel, Marginal,
    SbssSpec,
};
use crate::spatial::LocationSet;
use crate::variography::{default_lmc_structures, fit_lmc, Binning, ModelFamily};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    /// Gaussian latent fields mixed by a random matrix.
    SbssNormal,
    /// As `SbssNormal` with unit-variance t₅ marginals.
    SbssT5,
    /// Parsimonious multivariate Matérn.
    Pmat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    LmcCokriging,
    SbssSpherical,
    SbssMatern,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::LmcCokriging, Method::SbssSpherical, Method::SbssMatern];

    pub fn name(self) -> &'static str {
        match self {
            Self::LmcCokriging => "lmc-cokriging",
            Self::SbssSpherical => "sbss-spherical",
            Self::SbssMatern => "sbss-matern",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

fn default_n_sites() -> usize {
    1225
}
fn default_grid_side() -> usize {
    35
}
fn default_grid_offset() -> f64 {
    0.5
}
fn default_scale() -> f64 {
    35.0
}
fn default_replicates() -> usize {
    100
}
fn default_methods() -> Vec<Method> {
    Method::ALL.to_vec()
}
fn default_radii() -> Vec<(f64, f64)> {
    vec![(0.0, 2.0), (2.0, 4.0), (4.0, 6.0), (6.0, 8.0)]
}
fn default_base_seed() -> u64 {
    1
}

/// Experiment description, usually read from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub setting: Setting,
    pub variant: CoordinateVariant,
    #[serde(default = "default_n_sites")]
    pub n_sites: usize,
    #[serde(default = "default_grid_side")]
    pub grid_side: usize,
    #[serde(default = "default_grid_offset")]
    pub grid_offset: f64,
    #[serde(default = "default_scale")]
    pub scale: f64,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    /// Ring kernel radii `(inner, outer)`.
    #[serde(default = "default_radii")]
    pub radii: Vec<(f64, f64)>,
    #[serde(default = "default_base_seed")]
    pub base_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Defaults for everything except setting and variant.
    pub fn new(setting: Setting, variant: CoordinateVariant) -> Self {
        Self {
            setting,
            variant,
            n_sites: default_n_sites(),
            grid_side: default_grid_side(),
            grid_offset: default_grid_offset(),
            scale: default_scale(),
            replicates: default_replicates(),
            methods: default_methods(),
            radii: default_radii(),
            base_seed: default_base_seed(),
            out_dir: None,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.replicates == 0 {
            return fail("replicates must be at least 1".into());
        }
        if self.methods.is_empty() {
            return fail("at least one method is required".into());
        }
        for (i, m) in self.methods.iter().enumerate() {
            if self.methods[..i].contains(m) {
                return fail(format!("method `{m}` listed twice"));
            }
        }
        if self.n_sites < 10 {
            return fail(format!("n_sites must be at least 10, got {}", self.n_sites));
        }
        if self.grid_side == 0 {
            return fail("grid_side must be at least 1".into());
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) || !self.grid_offset.is_finite() {
            return fail("scale must be positive and grid_offset finite".into());
        }
        if self.radii.is_empty() {
            return fail("at least one ring is required".into());
        }
        for (i, &(a, b)) in self.radii.iter().enumerate() {
            if !(a >= 0.0 && a < b && b.is_finite()) {
                return fail(format!("ring {i} ({a}, {b}) needs 0 <= inner < outer"));
            }
            if i > 0 && a < self.radii[i - 1].1 {
                return fail(format!("ring {i} overlaps ring {}", i - 1));
            }
        }
        Ok(())
    }

    pub fn kernels(&self) -> Result<Vec<SpatialKernel>> {
        SpatialKernel::rings(&self.radii)
    }
}

/// Latent covariances of both SBSS settings: spherical (1, 2), Matérn
/// (1, ν = 0.5, 2) and Matérn (1, ν = 1, 2).
pub fn sbss_latent_models() -> Vec<CovarianceModel> {
    vec![
        CovarianceModel::spherical(1.0, 2.0),
        CovarianceModel::matern(1.0, 0.5, 2.0),
        CovarianceModel::matern(1.0, 1.0, 2.0),
    ]
}

/// PMat with range 2, shapes (0.25, 0.5, 1), unit variances and all β = 1.
pub fn pmat_setting() -> Result<PmatModel> {
    PmatModel::new(2.0, vec![0.25, 0.5, 1.0], vec![1.0; 3], DMatrix::from_element(3, 3, 1.0), 2)
}

/// Mixing matrix of replicate `seed`, entries i.i.d. N(0, 1) (row-major).
pub fn draw_mixing(seed: u64, p: usize) -> DMatrix<f64> {
    let mut rng = stream_rng(seed, streams::MIXING);
    let draws: Vec<f64> = (0..p * p).map(|_| rng.sample(StandardNormal)).collect();
    DMatrix::from_row_slice(p, p, &draws)
}

/// Field model of one replicate and, for SBSS settings, its mixing matrix.
pub fn replicate_model(setting: Setting, seed: u64) -> Result<(FieldModel, Option<DMatrix<f64>>)> {
    let marginal = match setting {
        Setting::SbssNormal => Marginal::Gaussian,
        Setting::SbssT5 => Marginal::StudentT { dof: 5 },
        Setting::Pmat => return Ok((FieldModel::Pmat(pmat_setting()?), None)),
    };
    let latent = sbss_latent_models();
    let p = latent.len();
    let omega = draw_mixing(seed, p);
    let spec = SbssSpec::new(latent, omega.clone(), DVector::zeros(p), marginal)?;
    Ok((FieldModel::Sbss(spec), Some(omega)))
}

/// Outcome of one method on one replicate.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub replicate: usize,
    pub seed: u64,
    pub method: Method,
    pub outcome: std::result::Result<MethodScore, String>,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodScore {
    pub mse: MseReport,
    /// `md_index(Γ̂ Ω)` for SBSS methods when the true mixing is known.
    pub md_index: Option<f64>,
}

impl ResultRow {
    pub fn mse(&self) -> Option<f64> {
        self.outcome.as_ref().ok().map(|s| s.mse.per_site)
    }
}

/// Runs every configured method on replicate `index`. Failures become rows
/// carrying the error message.
pub fn run_replicate(cfg: &ExperimentConfig, index: usize) -> Vec<ResultRow> {
    let seed = child_seed(cfg.base_seed, index as u64);
    let failed = |reason: String| -> Vec<ResultRow> {
        cfg.methods
            .iter()
            .map(|&method| ResultRow {
                replicate: index,
                seed,
                method,
                outcome: Err(reason.clone()),
                wall_seconds: 0.0,
            })
            .collect()
    };
    let data = (|| -> Result<_> {
        let sampler = CoordinateSampler::new(cfg.variant, cfg.scale, cfg.n_sites)?;
        let train = Arc::new(sample_coordinates(&sampler, seed)?);
        let test = Arc::new(make_grid(cfg.grid_side, cfg.grid_offset)?);
        let (model, omega) = replicate_model(cfg.setting, seed)?;
        let sim = simulate_train_test(&model, &train, &test, seed)?;
        Ok((sim, omega))
    })();
    let (sim, omega) = match data {
        Ok(d) => d,
        Err(e) => {
            log::warn!("replicate {index}: simulation failed: {e}");
            return failed(format!("simulation: {e}"));
        }
    };
    let kernels = match cfg.kernels() {
        Ok(k) => k,
        Err(e) => return failed(e.to_string()),
    };

    // Both SBSS methods share one unmixing estimate.
    let mut sbss_fit = None;
    let mut rows = Vec::with_capacity(cfg.methods.len());
    for &method in &cfg.methods {
        let start = Instant::now();
        let outcome = (|| -> Result<MethodScore> {
            let test_locs: &LocationSet = sim.test.locations();
            match method {
                Method::LmcCokriging => {
                    let structures = default_lmc_structures(sim.train.locations());
                    let lmc = fit_lmc(&sim.train, &structures, Binning::default())?;
                    let out = cok_predict(&cok_build(&sim.train, lmc)?, test_locs)?;
                    Ok(MethodScore {
                        mse: mse_report(&out.predictions, sim.test.values())?,
                        md_index: None,
                    })
                }
                Method::SbssSpherical | Method::SbssMatern => {
                    if sbss_fit.is_none() {
                        sbss_fit = Some(fit_sbss(&sim.train, &kernels)?);
                    }
                    let fit = sbss_fit.clone().expect("fit just stored");
                    let md = omega.as_ref().map(|o| md_index(&(&fit.unmixing * o)));
                    let family = if method == Method::SbssSpherical {
                        ModelFamily::Spherical
                    } else {
                        ModelFamily::Matern
                    };
                    let out = sbss_krige_fitted(fit, family, test_locs)?;
                    Ok(MethodScore {
                        mse: mse_report(&out.predictions, sim.test.values())?,
                        md_index: md,
                    })
                }
            }
        })();
        if let Err(e) = &outcome {
            log::warn!("replicate {index}, {method}: {e}");
        }
        rows.push(ResultRow {
            replicate: index,
            seed,
            method,
            outcome: outcome.map_err(|e| e.to_string()),
            wall_seconds: start.elapsed().as_secs_f64(),
        });
    }
    rows
}

#[derive(Debug, Clone)]
pub struct BenchResult {
    pub config: ExperimentConfig,
    /// Replicate-major, methods in configuration order.
    pub rows: Vec<ResultRow>,
    pub jobs: usize,
    pub wall_seconds: f64,
}

/// Runs all replicates on a pool of `jobs` threads (0 = available
/// parallelism). Rows come back in replicate order whatever the pool size.
pub fn run_bench(cfg: &ExperimentConfig, jobs: usize) -> Result<BenchResult> {
    run_replicates(cfg, 0..cfg.replicates, jobs)
}

/// As [`run_bench`] for an arbitrary set of replicate indices.
pub fn run_replicates(cfg: &ExperimentConfig, indices: std::ops::Range<usize>, jobs: usize) -> Result<BenchResult> {
    cfg.validate()?;
    let jobs = if jobs == 0 {
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
    } else {
        jobs
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {jobs} worker threads: {e}")))?;
    let start = Instant::now();
    let per_replicate: Vec<Vec<ResultRow>> =
        pool.install(|| indices.into_par_iter().map(|i| run_replicate(cfg, i)).collect());
    Ok(BenchResult {
        config: cfg.clone(),
        rows: per_replicate.into_iter().flatten().collect(),
        jobs,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Per-method aggregate of the per-site MSE (and of the grand-mean
/// convention).
#[derive(Debug, Clone, PartialEq)]
pub struct MethodSummary {
    pub method: Method,
    pub n: usize,
    pub failed: usize,
    pub mean: Option<f64>,
    /// Sample standard deviation (divisor n − 1); `None` below two rows.
    pub std: Option<f64>,
    pub grand_mean: Option<f64>,
    pub grand_std: Option<f64>,
    pub median_md: Option<f64>,
}

fn mean_std(values: &[f64]) -> (Option<f64>, Option<f64>) {
    let n = values.len();
    if n == 0 {
        return (None, None);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = (n > 1).then(|| {
        let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
        (ss / (n - 1) as f64).sqrt()
    });
    (Some(mean), std)
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let k = v.len();
    Some(if k % 2 == 1 { v[k / 2] } else { 0.5 * (v[k / 2 - 1] + v[k / 2]) })
}

/// Summary per method, in the order methods first appear. Rows are sorted
/// before aggregation so the result does not depend on their order.
pub fn summarize(rows: &[ResultRow]) -> Vec<MethodSummary> {
    let mut methods: Vec<Method> = Vec::new();
    for r in rows {
        if !methods.contains(&r.method) {
            methods.push(r.method);
        }
    }
    methods
        .into_iter()
        .map(|method| {
            let mut mine: Vec<&ResultRow> = rows.iter().filter(|r| r.method == method).collect();
            mine.sort_by_key(|r| r.replicate);
            let scores: Vec<&MethodScore> = mine.iter().filter_map(|r| r.outcome.as_ref().ok()).collect();
            let per_site: Vec<f64> = scores.iter().map(|s| s.mse.per_site).collect();
            let grand: Vec<f64> = scores.iter().map(|s| s.mse.grand_mean).collect();
            let md: Vec<f64> = scores.iter().filter_map(|s| s.md_index).collect();
            let (mean, std) = mean_std(&per_site);
            let (grand_mean, grand_std) = mean_std(&grand);
            MethodSummary {
                method,
                n: per_site.len(),
                failed: mine.len() - per_site.len(),
                mean,
                std,
                grand_mean,
                grand_std,
                median_md: median(&md),
            }
        })
        .collect()
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn na(v: Option<f64>, digits: usize) -> String {
    v.map(|x| format!("{x:.digits$}")).unwrap_or_else(|| "n/a".into())
}

/// `results.csv`: one row per replicate and method. Wall time is left out
/// so identical runs give identical bytes.
pub fn write_results_csv<W: std::io::Write>(writer: W, rows: &[ResultRow]) -> Result<()> {
    let p = rows
        .iter()
        .filter_map(|r| r.outcome.as_ref().ok())
        .map(|s| s.mse.per_component.len())
        .max()
        .unwrap_or(0);
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = ["replicate", "seed", "method", "mse", "mse_grand_mean"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((1..=p).map(|j| format!("mse_{j}")));
    header.extend(["md_index".to_string(), "error".to_string()]);
    wtr.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.replicate.to_string(), r.seed.to_string(), r.method.to_string()];
        match &r.outcome {
            Ok(s) => {
                rec.push(s.mse.per_site.to_string());
                rec.push(s.mse.grand_mean.to_string());
                rec.extend((0..p).map(|j| cell(s.mse.per_component.get(j).copied())));
                rec.push(cell(s.md_index));
                rec.push(String::new());
            }
            Err(e) => {
                rec.extend(std::iter::repeat_n(String::new(), 2 + p + 1));
                rec.push(e.clone());
            }
        }
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_summary_csv<W: std::io::Write>(writer: W, summary: &[MethodSummary]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record([
        "method",
        "n",
        "failed",
        "mse_mean",
        "mse_std",
        "mse_grand_mean",
        "mse_grand_std",
        "md_index_median",
    ])?;
    for s in summary {
        wtr.write_record([
            s.method.to_string(),
            s.n.to_string(),
            s.failed.to_string(),
            cell(s.mean),
            cell(s.std),
            cell(s.grand_mean),
            cell(s.grand_std),
            cell(s.median_md),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Aligned plain-text table, `mean(std)` per method.
pub fn summary_table(summary: &[MethodSummary]) -> String {
    let header = ["method", "n", "failed", "MSE", "MSE (per variable)", "median MD"];
    let body: Vec<[String; 6]> = summary
        .iter()
        .map(|s| {
            [
                s.method.to_string(),
                s.n.to_string(),
                s.failed.to_string(),
                format!("{}({})", na(s.mean, 3), na(s.std, 3)),
                format!("{}({})", na(s.grand_mean, 3), na(s.grand_std, 3)),
                na(s.median_md, 3),
            ]
        })
        .collect();
    let widths: Vec<usize> = (0..6)
        .map(|c| body.iter().map(|r| r[c].len()).chain([header[c].len()]).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    let line = |cells: Vec<&str>, out: &mut String| {
        let parts: Vec<String> = cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (v, w))| if c == 0 { format!("{v:<w$}") } else { format!("{v:>w$}") })
            .collect();
        out.push_str(parts.join("  ").trim_end());
        out.push('\n');
    };
    line(header.to_vec(), &mut out);
    for r in &body {
        line(r.iter().map(String::as_str).collect(), &mut out);
    }
    out
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    version: &'a str,
    config: &'a ExperimentConfig,
    jobs: usize,
    rows: usize,
    failed_rows: usize,
    wall_seconds: f64,
    method_seconds: Vec<(String, f64)>,
}

/// Writes `results.csv`, `summary.csv`, `summary.txt` and `manifest.json`
/// into `dir`.
pub fn write_outputs(result: &BenchResult, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_results_csv(std::fs::File::create(dir.join("results.csv"))?, &result.rows)?;
    let summary = summarize(&result.rows);
    write_summary_csv(std::fs::File::create(dir.join("summary.csv"))?, &summary)?;
    std::fs::write(dir.join("summary.txt"), summary_table(&summary))?;
    let method_seconds = result
        .config
        .methods
        .iter()
        .map(|m| {
            let t: f64 = result.rows.iter().filter(|r| r.method == *m).map(|r| r.wall_seconds).sum();
            (m.to_string(), t)
        })
        .collect();
    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION"),
        config: &result.config,
        jobs: result.jobs,
        rows: result.rows.len(),
        failed_rows: result.rows.iter().filter(|r| r.outcome.is_err()).count(),
        wall_seconds: result.wall_seconds,
        method_seconds,
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}
