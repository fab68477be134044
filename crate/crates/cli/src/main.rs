//! `sbsskrige` command-line tool.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use serde::Deserialize;

use sbss_geostat::bench::{self, ExperimentConfig, Setting};
use sbss_geostat::compositional::{ilr_forward_rows, ilr_inverse_rows};
use sbss_geostat::covariance::{CovarianceModel, LmcModel, LmcStructure};
use sbss_geostat::io::{self, Table};
use sbss_geostat::kriging::{cok_build, cok_predict, ok_build, ok_predict, sbss_krige};
use sbss_geostat::sbss::{fit_sbss, SpatialKernel};
use sbss_geostat::simulation::{make_grid, sample_coordinates, simulate_train_test, CoordinateSampler, CoordinateVariant};
use sbss_geostat::spatial::{LocationSet, MultiField};
use sbss_geostat::variography::{default_lmc_structures, empirical_variogram, fit_lmc, fit_wls, Binning, ModelFamily};

#[derive(Parser)]
#[command(name = "sbsskrige", version, about = "Multivariate spatial prediction with SBSS-kriging and LMC cokriging")]
struct Cli {
    /// Seed for every random draw (overrides `base_seed` of a bench config).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Log more (-v info, -vv debug).
    #[arg(short, long, action = ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a simulation study described by a TOML config.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        replicates: Option<usize>,
        /// Worker threads; 0 uses all available cores.
        #[arg(long, default_value_t = 0)]
        jobs: usize,
        /// Output directory (default: `out_dir` of the config, else `bench-out`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Simulate one field realization on random sites (and optionally a grid).
    Simulate {
        #[arg(long, value_enum)]
        setting: SettingArg,
        #[arg(long, value_enum, default_value_t = VariantArg::Uniform)]
        variant: VariantArg,
        #[arg(long, default_value_t = 1225)]
        n: usize,
        #[arg(long, default_value_t = 35.0)]
        scale: f64,
        /// Also simulate on a `side,offset` grid, written to `--grid-out`.
        #[arg(long, value_parser = parse_grid, requires = "grid_out")]
        grid: Option<(usize, f64)>,
        #[arg(long)]
        grid_out: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Estimate the SBSS unmixing matrix and latent field.
    Sbss {
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        kernels: KernelArgs,
        /// Latent field CSV (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Unmixing matrix CSV.
        #[arg(long)]
        unmixing_out: Option<PathBuf>,
    },
    /// Empirical (cross-)variogram, optionally with a fitted model.
    Variogram {
        #[arg(long)]
        input: PathBuf,
        /// Variable column (default: the first one).
        #[arg(long)]
        column: Option<String>,
        /// Second variable for a cross-variogram.
        #[arg(long)]
        cross: Option<String>,
        #[arg(long, default_value_t = 15)]
        bins: usize,
        /// Largest lag (default: a third of the largest site distance).
        #[arg(long)]
        max_dist: Option<f64>,
        /// Fit this family plus a nugget and print the model as TOML.
        #[arg(long, value_enum)]
        fit: Option<FamilyArg>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Ordinary kriging of every variable separately.
    Krige {
        #[arg(long)]
        train: PathBuf,
        /// Covariance model TOML used for all variables (default: fit per variable).
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = FamilyArg::Spherical)]
        family: FamilyArg,
        #[command(flatten)]
        targets: TargetArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Ordinary cokriging under a linear model of coregionalization.
    Cokrige {
        #[arg(long)]
        train: PathBuf,
        /// LMC TOML (default: nugget + spherical fitted to the data).
        #[arg(long)]
        model: Option<PathBuf>,
        #[command(flatten)]
        targets: TargetArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// SBSS unmixing, kriging of each latent component, and back-mixing.
    Sbsskrige {
        #[arg(long)]
        train: PathBuf,
        #[command(flatten)]
        kernels: KernelArgs,
        #[arg(long, value_enum, default_value_t = FamilyArg::Matern)]
        family: FamilyArg,
        #[command(flatten)]
        targets: TargetArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pivot ilr coordinates of compositions, or back.
    Ilr {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = Direction::Forward)]
        direction: Direction,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct KernelArgs {
    /// Ring kernel `inner,outer` (repeatable).
    #[arg(long = "ring", value_parser = parse_pair)]
    rings: Vec<(f64, f64)>,
    /// Ball kernel radius (repeatable).
    #[arg(long = "ball")]
    balls: Vec<f64>,
    /// Gaussian kernel bandwidth (repeatable).
    #[arg(long = "gauss")]
    gauss: Vec<f64>,
}

impl KernelArgs {
    /// Without any kernel flag: rings (0,2), (2,4), (4,6), (6,8).
    fn kernels(&self) -> Result<Vec<SpatialKernel>> {
        let mut out = Vec::new();
        for &(a, b) in &self.rings {
            out.push(SpatialKernel::ring(a, b)?);
        }
        for &r in &self.balls {
            out.push(SpatialKernel::ball(r)?);
        }
        for &b in &self.gauss {
            out.push(SpatialKernel::gauss(b)?);
        }
        if out.is_empty() {
            out = SpatialKernel::rings(&[(0.0, 2.0), (2.0, 4.0), (4.0, 6.0), (6.0, 8.0)])?;
        }
        Ok(out)
    }
}

#[derive(Args)]
struct TargetArgs {
    /// CSV with leading x,y[,z] columns.
    #[arg(long, conflicts_with = "grid")]
    targets: Option<PathBuf>,
    /// Regular grid `side,offset`: sites (i + offset, j + offset).
    #[arg(long, value_parser = parse_grid)]
    grid: Option<(usize, f64)>,
}

impl TargetArgs {
    fn load(&self) -> Result<LocationSet> {
        match (&self.targets, self.grid) {
            (Some(path), _) => Ok(io::read_table(path)?.locations()?),
            (None, Some((side, offset))) => Ok(make_grid(side, offset)?),
            (None, None) => bail!("give prediction sites with --targets or --grid"),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SettingArg {
    SbssNormal,
    SbssT5,
    Pmat,
}

impl From<SettingArg> for Setting {
    fn from(s: SettingArg) -> Self {
        match s {
            SettingArg::SbssNormal => Setting::SbssNormal,
            SettingArg::SbssT5 => Setting::SbssT5,
            SettingArg::Pmat => Setting::Pmat,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Uniform,
    Skew,
}

impl From<VariantArg> for CoordinateVariant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Uniform => CoordinateVariant::Uniform,
            VariantArg::Skew => CoordinateVariant::Skew,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FamilyArg {
    Spherical,
    Matern,
}

impl From<FamilyArg> for ModelFamily {
    fn from(f: FamilyArg) -> Self {
        match f {
            FamilyArg::Spherical => ModelFamily::Spherical,
            FamilyArg::Matern => ModelFamily::Matern,
        }
    }
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Direction {
    Forward,
    Inverse,
}

fn parse_pair(s: &str) -> std::result::Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or_else(|| format!("expected `a,b`, got `{s}`"))?;
    let a = a.trim().parse::<f64>().map_err(|e| e.to_string())?;
    let b = b.trim().parse::<f64>().map_err(|e| e.to_string())?;
    Ok((a, b))
}

fn parse_grid(s: &str) -> std::result::Result<(usize, f64), String> {
    let (a, b) = s.split_once(',').ok_or_else(|| format!("expected `side,offset`, got `{s}`"))?;
    let side = a.trim().parse::<usize>().map_err(|e| e.to_string())?;
    let offset = b.trim().parse::<f64>().map_err(|e| e.to_string())?;
    Ok((side, offset))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LmcFile {
    structures: Vec<LmcStructure>,
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).map_err(|e| sbss_geostat::Error::Config(format!("{}: {e}", path.display())).into())
}

/// Writes a CSV table to `out`, or stdout when `None`.
fn emit(out: Option<&Path>, headers: &[String], values: &DMatrix<f64>) -> Result<()> {
    match out {
        Some(path) => io::write_table(path, headers, values)?,
        None => {
            let stdout = std::io::stdout();
            io::write_table_to(stdout.lock(), headers, values)?;
        }
    }
    Ok(())
}

/// Sites followed by value columns.
fn with_coordinates(locs: &LocationSet, names: &[String], values: &DMatrix<f64>) -> (Vec<String>, DMatrix<f64>) {
    let d = locs.dim();
    let mut headers = io::coordinate_headers(d);
    headers.extend_from_slice(names);
    let mut table = DMatrix::zeros(locs.len(), d + values.ncols());
    table.columns_mut(0, d).copy_from(locs.coords());
    table.columns_mut(d, values.ncols()).copy_from(values);
    (headers, table)
}

fn read_field(path: &Path) -> Result<(MultiField, Vec<String>)> {
    Ok(io::read_table(path)?.field()?)
}

/// Interleaves prediction and variance columns: `v, v_variance, …`.
fn prediction_table(names: &[String], pred: &DMatrix<f64>, var: &DMatrix<f64>) -> (Vec<String>, DMatrix<f64>) {
    let p = names.len();
    let mut headers = Vec::with_capacity(2 * p);
    let mut values = DMatrix::zeros(pred.nrows(), 2 * p);
    for (j, name) in names.iter().enumerate() {
        headers.push(name.clone());
        headers.push(format!("{name}_variance"));
        values.set_column(2 * j, &pred.column(j));
        values.set_column(2 * j + 1, &var.column(j));
    }
    (headers, values)
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed.unwrap_or(1);
    match cli.command {
        Command::Bench {
            config,
            replicates,
            jobs,
            out,
        } => {
            let mut cfg = ExperimentConfig::from_file(&config)?;
            if let Some(r) = replicates {
                cfg.replicates = r;
            }
            if let Some(s) = cli.seed {
                cfg.base_seed = s;
            }
            cfg.validate()?;
            let dir = out.or_else(|| cfg.out_dir.clone()).unwrap_or_else(|| PathBuf::from("bench-out"));
            let result = bench::run_bench(&cfg, jobs)?;
            bench::write_outputs(&result, &dir)?;
            print!("{}", bench::summary_table(&bench::summarize(&result.rows)));
            log::info!("wrote {} rows to {}", result.rows.len(), dir.display());
        }
        Command::Simulate {
            setting,
            variant,
            n,
            scale,
            grid,
            grid_out,
            out,
        } => {
            let sampler = CoordinateSampler::new(variant.into(), scale, n)?;
            let train = Arc::new(sample_coordinates(&sampler, seed)?);
            let (model, omega) = bench::replicate_model(setting.into(), seed)?;
            if let Some(omega) = &omega {
                log::info!("mixing matrix: {omega}");
            }
            let sim = match grid {
                Some((side, offset)) => {
                    let test = Arc::new(make_grid(side, offset)?);
                    let s = simulate_train_test(&model, &train, &test, seed)?;
                    (s.train, Some(s.test))
                }
                None => (model.simulate(&train, seed)?, None),
            };
            let names: Vec<String> = (1..=model.p()).map(|j| format!("v{j}")).collect();
            let (headers, table) = with_coordinates(sim.0.locations(), &names, sim.0.values());
            emit(out.as_deref(), &headers, &table)?;
            if let (Some(test), Some(path)) = (sim.1, grid_out) {
                io::write_field(&path, test.locations(), &names, test.values())?;
            }
        }
        Command::Sbss {
            input,
            kernels,
            out,
            unmixing_out,
        } => {
            let (field, names) = read_field(&input)?;
            let fit = fit_sbss(&field, &kernels.kernels()?)?;
            if !fit.converged {
                log::warn!("joint diagonalization did not converge in {} sweeps", fit.sweeps);
            }
            if let Some(path) = unmixing_out {
                io::write_table(&path, &names, &fit.unmixing)?;
            }
            let latent: Vec<String> = (1..=field.p()).map(|j| format!("z{j}")).collect();
            let (headers, table) = with_coordinates(field.locations(), &latent, fit.latent.values());
            emit(out.as_deref(), &headers, &table)?;
        }
        Command::Variogram {
            input,
            column,
            cross,
            bins,
            max_dist,
            fit,
            out,
        } => {
            let (field, names) = read_field(&input)?;
            let index = |name: &str| {
                names
                    .iter()
                    .position(|n| n == name)
                    .with_context(|| format!("no column `{name}` in {}", input.display()))
            };
            let a = match &column {
                Some(c) => index(c)?,
                None => 0,
            };
            let b = cross.as_deref().map(index).transpose()?;
            let v = field.column(a);
            let w = b.map(|b| field.column(b));
            let emp = empirical_variogram(&v, w.as_ref(), field.locations(), Binning { bins, max_dist })?;
            let headers: Vec<String> = ["distance", "gamma", "count"].iter().map(|s| s.to_string()).collect();
            let table = DMatrix::from_fn(bins, 3, |r, c| match c {
                0 => emp.bin_centers[r],
                1 => emp.gamma[r],
                _ => emp.counts[r] as f64,
            });
            emit(out.as_deref(), &headers, &table)?;
            if let Some(family) = fit {
                let fitted = fit_wls(&emp, family.into(), None)?;
                eprint!("{}", toml::to_string(&fitted.model)?);
                eprintln!("# weighted SSE {:.6e}, converged {}", fitted.objective_value, fitted.converged);
            }
        }
        Command::Krige {
            train,
            model,
            family,
            targets,
            out,
        } => {
            let (field, names) = read_field(&train)?;
            let targets = targets.load()?;
            let fixed: Option<CovarianceModel> = model.as_deref().map(read_toml).transpose()?;
            let mut pred = DMatrix::zeros(targets.len(), field.p());
            let mut var = DMatrix::zeros(targets.len(), field.p());
            for j in 0..field.p() {
                let v = field.column(j);
                let m = match &fixed {
                    Some(m) => m.clone(),
                    None => {
                        let emp = empirical_variogram(&v, None, field.locations(), Binning::default())?;
                        fit_wls(&emp, family.into(), None)?.model
                    }
                };
                log::info!("{}: {m:?}", names[j]);
                let sys = ok_build(&v, field.locations().clone(), m)?;
                let o = ok_predict(&sys, &targets)?;
                pred.set_column(j, &o.predictions.column(0));
                var.set_column(j, &o.variances.column(0));
            }
            let (names, values) = prediction_table(&names, &pred, &var);
            let (headers, table) = with_coordinates(&targets, &names, &values);
            emit(out.as_deref(), &headers, &table)?;
        }
        Command::Cokrige {
            train,
            model,
            targets,
            out,
        } => {
            let (field, names) = read_field(&train)?;
            let targets = targets.load()?;
            let lmc = match model {
                Some(path) => LmcModel::new(read_toml::<LmcFile>(&path)?.structures)?,
                None => fit_lmc(&field, &default_lmc_structures(field.locations()), Binning::default())?,
            };
            let o = cok_predict(&cok_build(&field, lmc)?, &targets)?;
            let (names, values) = prediction_table(&names, &o.predictions, &o.variances);
            let (headers, table) = with_coordinates(&targets, &names, &values);
            emit(out.as_deref(), &headers, &table)?;
        }
        Command::Sbsskrige {
            train,
            kernels,
            family,
            targets,
            out,
        } => {
            let (field, names) = read_field(&train)?;
            let targets = targets.load()?;
            let r = sbss_krige(&field, &kernels.kernels()?, family.into(), &targets)?;
            for (c, m) in r.models.iter().enumerate() {
                log::info!("latent {}: {m:?}", c + 1);
            }
            let (headers, table) = with_coordinates(&targets, &names, &r.predictions);
            emit(out.as_deref(), &headers, &table)?;
        }
        Command::Ilr { input, direction, out } => {
            let table: Table = io::read_table(&input)?;
            let d = io::coordinate_columns(&table.headers).unwrap_or(0);
            let data = table.values.columns(d, table.headers.len() - d).into_owned();
            let (names, values) = match direction {
                Direction::Forward => {
                    let z = ilr_forward_rows(&data)?;
                    ((1..=z.ncols()).map(|j| format!("ilr{j}")).collect::<Vec<_>>(), z)
                }
                Direction::Inverse => {
                    let x = ilr_inverse_rows(&data)?;
                    ((1..=x.ncols()).map(|j| format!("part{j}")).collect(), x)
                }
            };
            let mut headers = table.headers[..d].to_vec();
            headers.extend(names);
            let mut out_table = DMatrix::zeros(values.nrows(), d + values.ncols());
            out_table.columns_mut(0, d).copy_from(&table.values.columns(0, d));
            out_table.columns_mut(d, values.ncols()).copy_from(&values);
            emit(out.as_deref(), &headers, &out_table)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let _ = std::io::stdout().flush();
            eprintln!("error: {e:#}");
            match e.downcast_ref::<sbss_geostat::Error>() {
                Some(sbss_geostat::Error::Config(_) | sbss_geostat::Error::Toml(_)) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
