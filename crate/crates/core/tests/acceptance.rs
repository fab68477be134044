//! Acceptance suite. Runs every criterion once, prints one PASS/FAIL line
//! per criterion and exits nonzero if any failed.
//!
//! The simulation-study criteria (1–4) run the full 100-replicate studies
//! and take most of the time.

use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use sbss_geostat::bench::{self, median, BenchResult, ExperimentConfig, Method, Setting};
use sbss_geostat::compositional::{clr, ilr_forward, ilr_inverse, Composition};
use sbss_geostat::covariance::{
    build_joint_covariance, matern_correlation_bessel, CovarianceModel, LmcModel, LmcStructure, DEFAULT_DENSE_CAP,
};
use sbss_geostat::kriging::{cok_build, cok_predict, ok_build, ok_predict};
use sbss_geostat::linalg::min_eigenvalue;
use sbss_geostat::sbss::{joint_diagonalize, local_covariance, md_index, SpatialKernel};
use sbss_geostat::simulation::{simulate_sbss_setting, CoordinateVariant, Marginal, SbssSpec};
use sbss_geostat::spatial::{LocationSet, MultiField};

/// Seed of every study and random instance below, fixed before any run.
const SEED: u64 = 1;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn rng(stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(SEED);
    r.set_stream(stream);
    r
}

fn study(setting: Setting, variant: CoordinateVariant, n_sites: usize, replicates: usize, methods: &[Method]) -> BenchResult {
    let mut cfg = ExperimentConfig::new(setting, variant);
    cfg.n_sites = n_sites;
    cfg.replicates = replicates;
    cfg.methods = methods.to_vec();
    cfg.base_seed = SEED;
    let t = Instant::now();
    let result = bench::run_bench(&cfg, 0).expect("valid config");
    println!(
        "    study {setting:?}/{variant:?} n={n_sites} x{replicates}: {:.0} s",
        t.elapsed().as_secs_f64()
    );
    for line in bench::summary_table(&bench::summarize(&result.rows)).lines() {
        println!("      {line}");
    }
    result
}

fn per_method(result: &BenchResult, method: Method) -> Vec<Option<f64>> {
    result.rows.iter().filter(|r| r.method == method).map(|r| r.mse()).collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn method_means(result: &BenchResult) -> Vec<(Method, f64, f64, usize)> {
    bench::summarize(&result.rows)
        .into_iter()
        .map(|s| (s.method, s.mean.unwrap_or(f64::NAN), s.grand_mean.unwrap_or(f64::NAN), s.failed))
        .collect()
}

fn criterion_1(uniform: &BenchResult) -> Outcome {
    // Bands apply to the per-variable mean; the per-site sum is printed too.
    let bands = [
        (Method::SbssMatern, 0.41, 0.53),
        (Method::SbssSpherical, 0.43, 0.55),
        (Method::LmcCokriging, 0.49, 0.65),
    ];
    let means = method_means(uniform);
    let mut pass = true;
    let mut parts = Vec::new();
    for (method, lo, hi) in bands {
        let (_, per_site, grand, failed) = means.iter().find(|m| m.0 == method).copied().expect("method ran");
        let ok = (lo..=hi).contains(&grand) && failed == 0;
        pass &= ok;
        parts.push(format!("{method} {grand:.3} in [{lo}, {hi}] (per-site {per_site:.3}, failed {failed})"));
    }
    outcome(pass, parts.join("; "))
}

fn criterion_2(uniform: &BenchResult) -> Outcome {
    let sbss = per_method(uniform, Method::SbssMatern);
    let lmc = per_method(uniform, Method::LmcCokriging);
    let pairs: Vec<(f64, f64)> = sbss.iter().zip(&lmc).filter_map(|(a, b)| Some(((*a)?, (*b)?))).collect();
    let wins = pairs.iter().filter(|(a, b)| a < b).count();
    let share = wins as f64 / pairs.len() as f64;
    let (ms, ml) = (mean(&pairs.iter().map(|p| p.0).collect::<Vec<_>>()), mean(&pairs.iter().map(|p| p.1).collect::<Vec<_>>()));
    outcome(
        share >= 0.70 && ms < ml,
        format!("sbss-matern better in {wins}/{} pairs ({:.0}%), means {ms:.4} vs {ml:.4}", pairs.len(), 100.0 * share),
    )
}

fn criterion_3(uniform: &BenchResult, skew: &BenchResult) -> Outcome {
    let u = method_means(uniform);
    let s = method_means(skew);
    let mut pass = true;
    let mut parts = Vec::new();
    for (method, mu, _, _) in &u {
        let ms = s.iter().find(|m| m.0 == *method).map(|m| m.1).unwrap_or(f64::NAN);
        pass &= ms > *mu;
        parts.push(format!("{method} {ms:.3} > {mu:.3}"));
    }
    outcome(pass, parts.join("; "))
}

fn md_values(result: &BenchResult, method: Method, take: usize) -> Vec<f64> {
    result
        .rows
        .iter()
        .filter(|r| r.method == method && r.replicate < take)
        .filter_map(|r| r.outcome.as_ref().ok().and_then(|s| s.md_index))
        .collect()
}

fn criterion_4(uniform: &BenchResult) -> Outcome {
    let large = md_values(uniform, Method::SbssMatern, 50);
    let small_run = study(Setting::SbssNormal, CoordinateVariant::Uniform, 300, 50, &[Method::SbssSpherical]);
    let small = md_values(&small_run, Method::SbssSpherical, 50);
    let (m_large, m_small) = (median(&large).unwrap_or(f64::NAN), median(&small).unwrap_or(f64::NAN));
    outcome(
        large.len() == 50 && small.len() == 50 && m_large < 0.35 && m_large < m_small,
        format!("median MD n=1225: {m_large:.4} (< 0.35), n=300: {m_small:.4}"),
    )
}

fn random_orthogonal(p: usize, r: &mut ChaCha8Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(p, p, |_, _| r.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    let rr = qr.r();
    for j in 0..p {
        if rr[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

fn criterion_5() -> Outcome {
    let mut r = rng(5);
    let (mut worst_md, mut monotone, mut recovered) = (0.0f64, 0usize, 0usize);
    let instances = 200;
    for _ in 0..instances {
        let p = r.random_range(2..=6);
        let k = r.random_range(1..=5);
        let diags: Vec<Vec<f64>> = loop {
            let d: Vec<Vec<f64>> = (0..k).map(|_| (0..p).map(|_| r.random_range(-3.0..3.0)).collect()).collect();
            let gap = (0..p)
                .flat_map(|i| (i + 1..p).map(move |j| (i, j)))
                .map(|(i, j)| d.iter().map(|dk| (dk[i] - dk[j]).abs()).fold(0.0, f64::max))
                .fold(f64::INFINITY, f64::min);
            if gap >= 0.1 {
                break d;
            }
        };
        let q = random_orthogonal(p, &mut r);
        let mats: Vec<DMatrix<f64>> = diags
            .iter()
            .map(|d| &q * DMatrix::from_diagonal(&DVector::from_vec(d.clone())) * q.transpose())
            .collect();
        let jd = joint_diagonalize(&mats, 1e-12, 200).expect("valid input");
        let md = md_index(&(jd.rotation.transpose() * &q));
        worst_md = worst_md.max(md);
        recovered += (md < 1e-6) as usize;
        let ok = jd
            .objective_trace
            .windows(2)
            .all(|w| w[1] >= w[0] - 1e-12 * w[0].abs().max(1.0));
        monotone += ok as usize;
    }
    outcome(
        recovered == instances && monotone == instances,
        format!("recovered {recovered}/{instances} (worst MD {worst_md:.2e}), monotone objective {monotone}/{instances}"),
    )
}

fn random_sites(r: &mut ChaCha8Rng, n: usize, side: f64) -> Vec<[f64; 2]> {
    let mut pts: Vec<[f64; 2]> = Vec::with_capacity(n);
    while pts.len() < n {
        let p = [r.random_range(0.0..side), r.random_range(0.0..side)];
        if pts.iter().all(|q| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt() > 0.05) {
            pts.push(p);
        }
    }
    pts
}

fn random_model(r: &mut ChaCha8Rng) -> CovarianceModel {
    let sill = r.random_range(0.3..3.0);
    if r.random_bool(0.5) {
        CovarianceModel::spherical(sill, r.random_range(0.5..4.0))
    } else {
        CovarianceModel::matern(sill, r.random_range(0.2..2.0), r.random_range(0.3..2.0))
    }
}

fn criterion_6() -> Outcome {
    let mut r = rng(6);
    let instances = 100;
    let mut passed = 0;
    let mut worst = [0.0f64; 4];
    for _ in 0..instances {
        let n = r.random_range(5..=30);
        let locs = Arc::new(LocationSet::from_points(&random_sites(&mut r, n, 10.0)).unwrap());
        let values = DVector::from_fn(n, |_, _| r.random_range(-5.0..5.0));
        let model = random_model(&mut r);
        let targets = LocationSet::from_points(&random_sites(&mut r, 10, 12.0)).unwrap();
        let sys = ok_build(&values, locs.clone(), model).unwrap();

        let at_sites = ok_predict(&sys, &locs).unwrap();
        let interp = (&at_sites.predictions.column(0) - &values).amax();
        let out = ok_predict(&sys, &targets).unwrap();
        let w = sys.weights(&targets).unwrap();
        let wsum = (0..targets.len()).map(|t| (w.column(t).sum() - 1.0).abs()).fold(0.0, f64::max);
        let minvar = out.variances.min().min(at_sites.variances.min());

        // Block-diagonal LMC against independent krigings.
        let p = r.random_range(2..=3);
        let nug: Vec<f64> = (0..p).map(|_| r.random_range(0.0..0.5)).collect();
        let sph: Vec<f64> = (0..p).map(|_| r.random_range(0.5..2.0)).collect();
        let range = r.random_range(1.0..4.0);
        let lmc = LmcModel::new(vec![
            LmcStructure {
                coregionalization: DMatrix::from_diagonal(&DVector::from_vec(nug.clone())),
                correlation: CovarianceModel::nugget(1.0),
            },
            LmcStructure {
                coregionalization: DMatrix::from_diagonal(&DVector::from_vec(sph.clone())),
                correlation: CovarianceModel::spherical(1.0, range),
            },
        ])
        .unwrap();
        let field = MultiField::new(locs.clone(), DMatrix::from_fn(n, p, |_, _| r.random_range(-3.0..3.0))).unwrap();
        let cok = cok_predict(&cok_build(&field, lmc).unwrap(), &targets).unwrap();
        let mut decouple = 0.0f64;
        for v in 0..p {
            let m = CovarianceModel::Sum {
                parts: vec![CovarianceModel::nugget(nug[v]), CovarianceModel::spherical(sph[v], range)],
            };
            let ok = ok_predict(&ok_build(&field.column(v), locs.clone(), m).unwrap(), &targets).unwrap();
            decouple = decouple.max((&cok.predictions.column(v) - &ok.predictions.column(0)).amax());
        }

        worst = [worst[0].max(interp), worst[1].max(wsum), worst[2].min(minvar), worst[3].max(decouple)];
        if interp < 1e-8 && wsum < 1e-10 && minvar >= -1e-8 && decouple < 1e-8 {
            passed += 1;
        }
    }
    outcome(
        passed == instances,
        format!(
            "{passed}/{instances} instances; worst interpolation {:.1e}, weight-sum {:.1e}, min variance {:.1e}, cokriging gap {:.1e}",
            worst[0], worst[1], worst[2], worst[3]
        ),
    )
}

/// `(1/n) Σ_i Σ_j f(d_ij) x_ia x_jb`, entry by entry.
fn reference_local_covariance(locs: &LocationSet, x: &DMatrix<f64>, kernel: &SpatialKernel) -> DMatrix<f64> {
    let (n, p) = x.shape();
    let mut m = DMatrix::zeros(p, p);
    for a in 0..p {
        for b in 0..p {
            let mut s = 0.0;
            for i in 0..n {
                for j in 0..n {
                    s += kernel.weight(locs.distance(i, j)) * x[(i, a)] * x[(j, b)];
                }
            }
            m[(a, b)] = s / n as f64;
        }
    }
    m
}

fn criterion_7() -> Outcome {
    let mut r = rng(7);
    let mut worst = 0.0f64;
    let fields = 50;
    let mut passed = 0;
    for _ in 0..fields {
        let n = r.random_range(3..=40);
        let p = r.random_range(1..=4);
        let locs = Arc::new(LocationSet::from_points(&random_sites(&mut r, n, 6.0)).unwrap());
        let mut x = DMatrix::from_fn(n, p, |_, _| r.random_range(-2.0..2.0));
        for c in 0..p {
            let m = x.column(c).mean();
            x.column_mut(c).add_scalar_mut(-m);
        }
        let field = MultiField::new(locs.clone(), x.clone()).unwrap();
        let kernels = [
            SpatialKernel::ball(r.random_range(0.5..3.0)).unwrap(),
            SpatialKernel::ring(0.7, 2.2).unwrap(),
            SpatialKernel::gauss(r.random_range(0.3..2.0)).unwrap(),
        ];
        let mut ok = true;
        for k in &kernels {
            let fast = local_covariance(&field, k).unwrap();
            let slow = reference_local_covariance(&locs, &x, k);
            let err = (&fast - &slow).amax() / slow.amax().max(1.0);
            worst = worst.max(err);
            ok &= err < 1e-12;
        }
        passed += ok as usize;
    }
    outcome(passed == fields, format!("{passed}/{fields} fields, worst relative error {worst:.1e}"))
}

fn criterion_8() -> Outcome {
    // t₅ marginal over 10⁴ sites (independent sites keep the draw dense-free).
    let n = 10_000;
    let mut r = rng(8);
    let coords = DMatrix::from_fn(n, 2, |_, _| r.random_range(0.0..100.0));
    let locs = Arc::new(LocationSet::new(coords).unwrap());
    let spec = SbssSpec::new(
        vec![CovarianceModel::nugget(1.0)],
        DMatrix::identity(1, 1),
        DVector::zeros(1),
        Marginal::StudentT { dof: 5 },
    )
    .unwrap();
    let v = simulate_sbss_setting(&spec, &locs, SEED).unwrap().column(0);
    let m = v.mean();
    let m2 = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n as f64;
    let m4 = v.iter().map(|x| (x - m).powi(4)).sum::<f64>() / n as f64;
    let kurt = m4 / (m2 * m2) - 3.0;
    let kurt_ok = (4.0..=8.0).contains(&kurt);

    let pmat = bench::pmat_setting().unwrap();
    let sites = LocationSet::from_points(&random_sites(&mut r, 50, 10.0)).unwrap();
    let c = build_joint_covariance(&pmat, &sites, DEFAULT_DENSE_CAP).unwrap();
    let dense = DMatrix::from_fn(c.nrows(), c.ncols(), |i, j| c[(i, j)]);
    let min_eig = min_eigenvalue(&dense);
    let psd_ok = min_eig >= -1e-8;

    let exp_gap = (0..=2000)
        .map(|i| i as f64 * 0.01)
        .map(|x| (matern_correlation_bessel(x, 0.5) - (-x).exp()).abs())
        .fold(0.0, f64::max);
    let exp_ok = exp_gap < 1e-10;
    outcome(
        kurt_ok && psd_ok && exp_ok,
        format!(
            "t5 excess kurtosis {kurt:.3} in [4, 8]: {kurt_ok}; PMat min eigenvalue {min_eig:.2e}: {psd_ok}; Matérn(0.5) vs exp max gap {exp_gap:.1e}: {exp_ok}"
        ),
    )
}

fn criterion_9() -> Outcome {
    let mut r = rng(9);
    let (mut fwd_inv, mut inv_fwd, mut iso) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..1000 {
        let x = Composition::new((0..31).map(|_| r.random_range(1e-3..1e3)).collect()).unwrap();
        let z = ilr_forward(&x);
        let back = ilr_inverse(&z).unwrap();
        let closed = x.closure();
        inv_fwd = inv_fwd.max(back.parts().iter().zip(&closed).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        let zr = DVector::from_fn(30, |_, _| r.random_range(-3.0..3.0));
        fwd_inv = fwd_inv.max((ilr_forward(&ilr_inverse(&zr).unwrap()) - &zr).amax());
        let y = Composition::new((0..31).map(|_| r.random_range(1e-3..1e3)).collect()).unwrap();
        let aitchison = (clr(&x) - clr(&y)).norm();
        iso = iso.max((aitchison - (ilr_forward(&x) - ilr_forward(&y)).norm()).abs());
    }
    outcome(
        fwd_inv < 1e-10 && inv_fwd < 1e-10 && iso < 1e-8,
        format!("forward∘inverse {fwd_inv:.1e}, inverse∘forward {inv_fwd:.1e}, isometry {iso:.1e}"),
    )
}

fn criterion_10() -> Outcome {
    let mut cfg = ExperimentConfig::new(Setting::SbssT5, CoordinateVariant::Skew);
    cfg.n_sites = 200;
    cfg.grid_side = 12;
    cfg.replicates = 4;
    cfg.base_seed = SEED;
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = Vec::new();
    for (i, jobs) in [1usize, 3, 1].into_iter().enumerate() {
        let out = dir.path().join(format!("run{i}"));
        let result = bench::run_bench(&cfg, jobs).unwrap();
        bench::write_outputs(&result, &out).unwrap();
        bytes.push(std::fs::read(out.join("results.csv")).unwrap());
    }
    let same = bytes.windows(2).all(|w| w[0] == w[1]);
    let rows = String::from_utf8_lossy(&bytes[0]).lines().count() - 1;
    outcome(same && rows == 12, format!("3 runs (jobs 1, 3, 1), {rows} rows, byte-identical: {same}"))
}

fn main() {
    let start = Instant::now();
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut report = |id: usize, name: &'static str, o: Outcome| {
        println!("criterion {id:>2} [{}] {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((id, name, o));
    };

    report(5, "joint diagonalizer oracle", criterion_5());
    report(6, "kriging exactness and constraints", criterion_6());
    report(7, "local covariance brute force", criterion_7());
    report(8, "distributional checks", criterion_8());
    report(9, "compositional round trip", criterion_9());
    report(10, "bench determinism", criterion_10());

    let uniform = study(Setting::SbssNormal, CoordinateVariant::Uniform, 1225, 100, &Method::ALL);
    report(1, "SBSS Normal/uniform MSE bands", criterion_1(&uniform));
    report(2, "method ordering", criterion_2(&uniform));
    let skew = study(Setting::SbssNormal, CoordinateVariant::Skew, 1225, 100, &Method::ALL);
    report(3, "skew degradation", criterion_3(&uniform, &skew));
    report(4, "unmixing recovery", criterion_4(&uniform));

    results.sort_by_key(|r| r.0);
    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!("acceptance summary ({:.0} s):", start.elapsed().as_secs_f64());
    for (id, name, o) in &results {
        println!("  {id:>2} {} {name}", if o.pass { "PASS" } else { "FAIL" });
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
