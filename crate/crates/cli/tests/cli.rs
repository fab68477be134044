use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sbsskrige"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_owned).collect())
        .collect()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn simulate_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    let c = dir.path().join("c.csv");
    let common = ["simulate", "--setting", "sbss-normal", "--n", "150", "--scale", "10"];
    ok(&[&common[..], &["--seed", "4", "--out", p(&a)]].concat());
    ok(&[&common[..], &["--seed", "4", "--out", p(&b)]].concat());
    ok(&[&common[..], &["--seed", "5", "--out", p(&c)]].concat());
    let rows = csv_rows(&a);
    assert_eq!(rows[0], vec!["x", "y", "v1", "v2", "v3"]);
    assert_eq!(rows.len(), 151);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());
}

#[test]
fn prediction_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let train = dir.path().join("train.csv");
    let grid = dir.path().join("grid.csv");
    ok(&[
        "simulate", "--setting", "pmat", "--n", "200", "--scale", "12", "--grid", "6,0.5", "--grid-out", p(&grid),
        "--out", p(&train),
    ]);
    assert_eq!(csv_rows(&grid).len(), 37);

    let krige = dir.path().join("krige.csv");
    ok(&["krige", "--train", p(&train), "--grid", "6,0.5", "--out", p(&krige)]);
    let rows = csv_rows(&krige);
    assert_eq!(rows[0], vec!["x", "y", "v1", "v1_variance", "v2", "v2_variance", "v3", "v3_variance"]);
    assert_eq!(rows.len(), 37);

    let cok = dir.path().join("cok.csv");
    ok(&["cokrige", "--train", p(&train), "--targets", p(&grid), "--out", p(&cok)]);
    assert_eq!(csv_rows(&cok).len(), 37);

    let sk = dir.path().join("sk.csv");
    ok(&[
        "sbsskrige", "--train", p(&train), "--ring", "0,1", "--ring", "1,2", "--family", "spherical", "--grid", "6,0.5",
        "--out", p(&sk),
    ]);
    let rows = csv_rows(&sk);
    assert_eq!(rows[0], vec!["x", "y", "v1", "v2", "v3"]);
    assert!(rows[1..].iter().all(|r| r.iter().all(|c| c.parse::<f64>().unwrap().is_finite())));
}

#[test]
fn sbss_and_variogram() {
    let dir = tempfile::tempdir().unwrap();
    let train = dir.path().join("train.csv");
    ok(&["simulate", "--setting", "sbss-t5", "--n", "250", "--scale", "15", "--out", p(&train)]);
    let latent = dir.path().join("latent.csv");
    let unmixing = dir.path().join("unmixing.csv");
    ok(&[
        "sbss", "--input", p(&train), "--ring", "0,1.5", "--ball", "3", "--gauss", "1", "--out", p(&latent),
        "--unmixing-out", p(&unmixing),
    ]);
    assert_eq!(csv_rows(&latent)[0], vec!["x", "y", "z1", "z2", "z3"]);
    assert_eq!(csv_rows(&unmixing).len(), 4);

    let out = ok(&["variogram", "--input", p(&latent), "--column", "z1", "--fit", "matern"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 16);
    assert!(String::from_utf8(out.stderr).unwrap().contains("type = \"sum\""));
    let cross = run(&["variogram", "--input", p(&latent), "--column", "z1", "--cross", "nope"]);
    assert!(!cross.status.success());
}

#[test]
fn ilr_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let comp = dir.path().join("comp.csv");
    std::fs::write(&comp, "x,y,a,b,c,d\n0,0,0.1,0.2,0.3,0.4\n1,2,5,1,1,3\n").unwrap();
    let coords = dir.path().join("ilr.csv");
    let back = dir.path().join("back.csv");
    ok(&["ilr", "--input", p(&comp), "--out", p(&coords)]);
    assert_eq!(csv_rows(&coords)[0], vec!["x", "y", "ilr1", "ilr2", "ilr3"]);
    ok(&["ilr", "--input", p(&coords), "--direction", "inverse", "--out", p(&back)]);
    let rows = csv_rows(&back);
    let second: Vec<f64> = rows[2][2..].iter().map(|c| c.parse().unwrap()).collect();
    for (got, want) in second.iter().zip([0.5, 0.1, 0.1, 0.3]) {
        assert!((got - want).abs() < 1e-12);
    }

    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "a,b\n1,0\n").unwrap();
    assert!(!run(&["ilr", "--input", p(&bad)]).status.success());
}

#[test]
fn bench_runs_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bench.toml");
    std::fs::write(
        &cfg,
        "setting = \"sbss_normal\"\nvariant = \"uniform\"\nn_sites = 120\ngrid_side = 5\nscale = 12\nreplicates = 2\nmethods = [\"lmc-cokriging\", \"sbss-matern\"]\n",
    )
    .unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let out = ok(&["bench", "--config", p(&cfg), "--jobs", "1", "--seed", "9", "--out", p(&a)]);
    assert!(String::from_utf8(out.stdout).unwrap().contains("sbss-matern"));
    ok(&["bench", "--config", p(&cfg), "--jobs", "2", "--seed", "9", "--replicates", "2", "--out", p(&b)]);
    let ra = std::fs::read(a.join("results.csv")).unwrap();
    assert_eq!(ra, std::fs::read(b.join("results.csv")).unwrap());
    assert_eq!(String::from_utf8(ra).unwrap().lines().count(), 5);
    for f in ["summary.csv", "summary.txt", "manifest.json"] {
        assert!(a.join(f).exists(), "{f} missing");
    }
}

#[test]
fn config_errors_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "setting = \"sbss_normal\"\nvariant = \"uniform\"\nreplicates = 0\n").unwrap();
    let out = run(&["bench", "--config", p(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["bench", "--config", p(&dir.path().join("missing.toml"))]);
    assert_eq!(out.status.code(), Some(2));
    std::fs::write(&cfg, "setting = \"elsewhere\"\nvariant = \"uniform\"\n").unwrap();
    assert_eq!(run(&["bench", "--config", p(&cfg)]).status.code(), Some(2));
}

#[test]
fn missing_targets_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let train = dir.path().join("t.csv");
    std::fs::write(&train, "x,y,v\n0,0,1\n1,0,2\n0,1,3\n1,1,4\n").unwrap();
    let out = run(&["krige", "--train", p(&train)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--targets or --grid"));
}
