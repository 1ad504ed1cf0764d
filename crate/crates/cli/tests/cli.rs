use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use tempfile::TempDir;

use samsel_cli::config::{FitConfig, Mode};
use samsel_cli::data::{export_csv, fmt_f64, ingest_csv, read_table, Dataset, Schema};
use samsel_cli::fit::{model_file, prepare, run};
use samsel_cli::predict::predict_rows;
use samsel_cli::CliError;

fn samsel(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_samsel"))
        .args(args)
        .env_remove("SAMSEL_WORKERS")
        .output()
        .expect("binary runs")
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Sites on random coordinates with one row per (site, period); `x1` has a spatial slope.
fn write_panel(path: &Path, sites: usize, periods: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords: Vec<(f64, f64)> = (0..sites).map(|_| (normal(&mut rng), normal(&mut rng))).collect();
    let period_effect: Vec<f64> = (0..periods).map(|_| 0.5 * normal(&mut rng)).collect();
    let mut text = String::from("site,east,north,quarter,y,x1,x2\n");
    for t in 0..periods {
        for (s, &(e, n)) in coords.iter().enumerate() {
            let x1 = normal(&mut rng);
            let x2 = normal(&mut rng);
            let y = 1.0 + (1.0 + 0.8 * e) * x1 + 0.5 * x2 + period_effect[t] + 0.5 * normal(&mut rng);
            text.push_str(&format!(
                "s{s},{},{},q{t},{},{},{}\n",
                fmt_f64(e),
                fmt_f64(n),
                fmt_f64(y),
                fmt_f64(x1),
                fmt_f64(x2)
            ));
        }
    }
    fs::write(path, text).unwrap();
}

const PANEL_CONFIG: &str = r#"
data_path = "panel.csv"
l_max = 40
nvc_size = 4

[data]
site = "site"
east = "east"
north = "north"
response = "y"
covariates = ["x1", "x2"]
groups = ["quarter"]
period = "quarter"
"#;

fn panel_dir(seed: u64) -> TempDir {
    let dir = TempDir::new().unwrap();
    write_panel(&dir.path().join("panel.csv"), 60, 3, seed);
    fs::write(dir.path().join("fit.toml"), PANEL_CONFIG).unwrap();
    dir
}

fn schema() -> Schema {
    FitConfig::from_toml(PANEL_CONFIG).unwrap().data
}

#[test]
fn well_formed_file_is_ingested_in_order() {
    let dir = TempDir::new().unwrap();
    let p = dir.path().join("d.csv");
    fs::write(&p, "site,east,north,quarter,y,x1,x2\na,0,0,q1,1,2,3\nb,1,0,q1,2,3,4\nc,0,1,q1,3,4,5\n").unwrap();
    let ds = ingest_csv(&p, &schema()).unwrap();
    assert_eq!(ds.n(), 3);
    assert_eq!(ds.site_ids, ["a", "b", "c"]);
    assert_eq!(ds.y, [1.0, 2.0, 3.0]);
    assert_eq!(ds.covariates[1], [3.0, 4.0, 5.0]);
}

#[test]
fn ingestion_errors_name_row_and_column() {
    let dir = TempDir::new().unwrap();
    let p = dir.path().join("d.csv");
    let header = "site,east,north,quarter,y,x1,x2\n";

    fs::write(&p, format!("{header}a,0,0,q1,1,2,3\nb,1,0,q1,,3,4\n")).unwrap();
    let err = ingest_csv(&p, &schema()).unwrap_err();
    assert!(matches!(&err, CliError::Cell { row: 2, column, .. } if column == "y"), "{err}");
    assert!(err.to_string().contains("row 2"), "{err}");

    fs::write(&p, format!("{header}a,0,0,q1,1,2,3\nb,1,0,q1,2,abc,4\n")).unwrap();
    let err = ingest_csv(&p, &schema()).unwrap_err();
    assert!(matches!(&err, CliError::Cell { row: 2, column, .. } if column == "x1"), "{err}");

    fs::write(&p, format!("{header}a,0,0,q1,1,2,3\na,0,0,q1,2,3,4\n")).unwrap();
    let err = ingest_csv(&p, &schema()).unwrap_err();
    assert!(matches!(&err, CliError::Cell { row: 2, .. }), "{err}");

    fs::write(&p, "site,east,north,quarter,y,x1\na,0,0,q1,1,2\n").unwrap();
    let err = ingest_csv(&p, &schema()).unwrap_err();
    assert!(err.to_string().contains("x2"), "{err}");
}

fn dataset(values: &[(f64, f64, f64, f64)]) -> Dataset {
    let n = values.len();
    Dataset {
        site_ids: (0..n).map(|i| format!("s{i}")).collect(),
        east: values.iter().map(|v| v.0).collect(),
        north: values.iter().map(|v| v.1).collect(),
        y: values.iter().map(|v| v.2).collect(),
        covariate_names: vec!["x1".into(), "x2".into()],
        covariates: vec![values.iter().map(|v| v.3).collect(), values.iter().map(|v| -v.3 * 1e-300).collect()],
        groups: vec![("quarter".into(), vec!["q1".into(); n])],
        periods: Some(vec!["q1".into(); n]),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn export_then_ingest_is_lossless(values in prop::collection::vec(
        (any::<f64>(), any::<f64>(), any::<f64>(), any::<f64>()).prop_filter("finite", |v| {
            v.0.is_finite() && v.1.is_finite() && v.2.is_finite() && v.3.is_finite()
        }),
        1..20,
    )) {
        let dir = TempDir::new().unwrap();
        let p = dir.path().join("d.csv");
        let ds = dataset(&values);
        export_csv(&p, &ds, &schema()).unwrap();
        let back = ingest_csv(&p, &schema()).unwrap();
        prop_assert_eq!(back, ds);
    }
}

fn coefficient_rows(path: &Path) -> Vec<Vec<String>> {
    let t = read_table(path).unwrap();
    assert_eq!(t.headers, ["row", "site", "term", "type", "estimate", "se", "t", "p_value", "signif"]);
    t.rows
}

#[test]
fn mode_none_with_constant_types_is_ols() {
    let dir = panel_dir(1);
    let cfg = format!("{PANEL_CONFIG}\n").replace(
        "nvc_size = 4\n",
        "nvc_size = 4\nintercept = [\"constant\"]\ndefault_types = [\"constant\"]\n",
    );
    let cfg = cfg.replace("groups = [\"quarter\"]\n", "");
    fs::write(dir.path().join("fit.toml"), cfg).unwrap();
    let out = dir.path().join("out");
    let o = samsel(&["fit", "--config", path_str(&dir.path().join("fit.toml")), "--out", path_str(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let ds = ingest_csv(&dir.path().join("panel.csv"), &schema()).unwrap();
    let n = ds.n();
    let x = DMatrix::from_fn(n, 3, |i, j| if j == 0 { 1.0 } else { ds.covariates[j - 1][i] });
    let y = DVector::from_column_slice(&ds.y);
    let xtx_inv = (x.transpose() * &x).try_inverse().unwrap();
    let b = &xtx_inv * x.transpose() * &y;
    let s2 = (&y - &x * &b).norm_squared() / (n - 3) as f64;

    let rows = coefficient_rows(&out.join("coefficients.csv"));
    assert_eq!(rows.len(), 3 * n);
    for r in &rows {
        let j = ["(intercept)", "x1", "x2"].iter().position(|t| *t == r[2]).unwrap();
        assert_eq!(r[3], "constant");
        let est: f64 = r[4].parse().unwrap();
        let se: f64 = r[5].parse().unwrap();
        assert!((est - b[j]).abs() < 1e-10 * b[j].abs().max(1.0), "{est} vs {}", b[j]);
        let se_ols = (s2 * xtx_inv[(j, j)]).sqrt();
        assert!((se - se_ols).abs() < 1e-10 * se_ols.max(1.0), "{se} vs {se_ols}");
    }
}

#[test]
fn selection_reports_a_type_for_every_term() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("d.csv");
    let o = samsel(&["generate", "--out", path_str(&data), "--n", "300", "--p", "1", "--seed", "4"]);
    assert!(o.status.success());
    let cfg = dir.path().join("fit.toml");
    fs::write(
        &cfg,
        "l_max = 60\nnvc_size = 5\n[data]\nsite = \"site\"\neast = \"east\"\nnorth = \"north\"\nresponse = \"y\"\ncovariates = [\"x1\", \"x1_1\", \"x2_1\"]\n",
    )
    .unwrap();
    let out = dir.path().join("out");
    let o = samsel(&["select", "--config", path_str(&cfg), "--data", path_str(&data), "--out", path_str(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("selection_report.json")).unwrap()).unwrap();
    let terms = report["terms"].as_array().unwrap();
    assert_eq!(terms.len(), 4);
    for t in terms {
        let chosen = t["selected"].as_str().unwrap();
        assert!(["constant", "svc", "nvc", "snvc"].contains(&chosen));
    }
    assert_eq!(report["mode"], "simple");
}

fn files_of(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != "timing.json")
        .map(|p| {
            let bytes = fs::read(&p).unwrap();
            (PathBuf::from(p.file_name().unwrap()), bytes)
        })
        .collect();
    files.sort();
    files
}

#[test]
fn seeded_runs_are_byte_identical() {
    let dir = panel_dir(2);
    let cfg = dir.path().join("fit.toml");
    let mut outputs = Vec::new();
    for (k, workers) in ["1", "2"].iter().enumerate() {
        let out = dir.path().join(format!("out{k}"));
        let o = samsel(&[
            "--verbose", "select", "--config", path_str(&cfg), "--out", path_str(&out), "--mode", "mc", "--replicates", "3",
            "--seed", "11", "--workers", workers,
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        outputs.push(files_of(&out));
    }
    let names: Vec<_> = outputs[0].iter().map(|f| f.0.to_str().unwrap().to_string()).collect();
    assert_eq!(names, ["coefficients.csv", "model.json", "selection_report.json", "trace.jsonl"]);
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn predicting_the_training_data_returns_fitted_values() {
    let dir = panel_dir(3);
    let cfg = FitConfig::load(&dir.path().join("fit.toml")).unwrap();
    let ds = ingest_csv(cfg.data_path.as_ref().unwrap(), &cfg.data).unwrap();
    let prep = prepare(ds, &cfg).unwrap();
    let out = run(&prep, &cfg, Mode::Simple).unwrap();
    let file = model_file(&prep, &cfg, &out);
    let json = serde_json::to_string(&file).unwrap();
    let file = serde_json::from_str(&json).unwrap();
    let preds = predict_rows(&file, cfg.data_path.as_ref().unwrap()).unwrap();
    let fitted = prep.model.fitted(&out.fit);
    assert_eq!(preds.len(), fitted.len());
    for (p, f) in preds.iter().zip(fitted.iter()) {
        assert!((p.value - f).abs() < 1e-10, "{} vs {f}", p.value);
        assert!(p.unseen.is_empty());
    }
}

#[test]
fn zero_covariates_leave_only_group_effects() {
    let dir = panel_dir(4);
    let cfg = FitConfig::load(&dir.path().join("fit.toml")).unwrap();
    let ds = ingest_csv(cfg.data_path.as_ref().unwrap(), &cfg.data).unwrap();
    let prep = prepare(ds, &cfg).unwrap();
    let out = run(&prep, &cfg, Mode::None).unwrap();
    let mut file = model_file(&prep, &cfg, &out);
    file.terms[0].b = 0.0;
    file.terms[0].spatial_effect = None;
    let effects = file.groups[0].effects.clone().expect("group term is included in mode none");
    let req = dir.path().join("req.csv");
    fs::write(&req, "site,quarter,x1,x2\ns0,q0,0,0\ns5,q2,0,0\ns9,q7,0,0\n").unwrap();
    let preds = predict_rows(&file, &req).unwrap();
    assert_eq!(preds[0].value, effects[0]);
    assert_eq!(preds[1].value, effects[2]);
    assert_eq!(preds[2].value, 0.0);
    assert_eq!(preds[2].unseen, ["quarter"]);
}

#[test]
fn prediction_rejects_unknown_sites() {
    let dir = panel_dir(5);
    let out = dir.path().join("out");
    let o = samsel(&["fit", "--config", path_str(&dir.path().join("fit.toml")), "--out", path_str(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let req = dir.path().join("req.csv");
    fs::write(&req, "site,quarter,x1,x2\ns0,q0,1,1\nnowhere,q0,1,1\n").unwrap();
    let o = samsel(&[
        "predict", "--model", path_str(&out.join("model.json")), "--request", path_str(&req), "--out",
        path_str(&dir.path().join("p.csv")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown site `nowhere`"));
}

#[test]
fn exit_status_reflects_convergence() {
    let dir = panel_dir(6);
    let cfg = dir.path().join("fit.toml");
    let text = fs::read_to_string(&cfg).unwrap();
    fs::write(&cfg, format!("{text}\n[tolerances]\nmax_sweeps = 1\n")).unwrap();
    let out = dir.path().join("out");
    let o = samsel(&["select", "--config", path_str(&cfg), "--out", path_str(&out)]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("model.json").exists());
    assert!(!out.join("coefficients.csv").exists());

    let o = samsel(&["select", "--config", path_str(&cfg), "--out", path_str(&out), "--allow-nonconverged"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(out.join("coefficients.csv").exists());

    fs::write(&cfg, format!("{text}\nbogus = 1\n")).unwrap();
    let o = samsel(&["select", "--config", path_str(&cfg), "--out", path_str(&out)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn simulate_smoke_run_is_complete_and_deterministic() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("sim.toml");
    fs::write(
        &cfg,
        "iterations = 2\nl_max = 30\nnvc_size = 4\nmc_replicates = 2\nmodels = [\"lm\", \"true-types\", \"simple-select\"]\n[dgp]\nn = 80\np = 1\n",
    )
    .unwrap();
    let mut reports = Vec::new();
    for k in 0..2 {
        let out = dir.path().join(format!("sim{k}"));
        let o = samsel(&["simulate", "--config", path_str(&cfg), "--out", path_str(&out), "--seed", "5"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        reports.push(files_of(&out));
    }
    assert_eq!(reports[0], reports[1]);
    let t = read_table(&dir.path().join("sim0/report.csv")).unwrap();
    assert_eq!(t.headers, ["model", "class", "metric", "value"]);
    for model in ["lm", "true-types", "simple-select"] {
        for class in ["intercept", "constant", "svc", "nvc"] {
            for metric in ["fits", "rmse", "bias", "se_rmse", "se_bias"] {
                assert!(
                    t.rows.iter().any(|r| r[0] == model && r[1] == class && r[2] == metric),
                    "missing {model}/{class}/{metric}"
                );
            }
        }
    }
}

#[test]
fn bench_separates_precompute_from_selection() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("bench.toml");
    fs::write(&cfg, "n_values = [100, 200]\np = 1\nl_cap = 10\nrepeats = 3\n").unwrap();
    let out = dir.path().join("timing.csv");
    let o = samsel(&["bench", "--config", path_str(&cfg), "--out", path_str(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let t = read_table(&out).unwrap();
    for col in ["n", "precompute_seconds", "selection_seconds", "total_seconds", "fixed_sweep_seconds"] {
        assert!(t.headers.iter().any(|h| h == col), "missing {col}");
    }
    assert_eq!(t.rows.len(), 2);
}

#[test]
fn lag_shifts_within_sites() {
    let dir = TempDir::new().unwrap();
    let input = dir.path().join("in.csv");
    fs::write(&input, "site,t,v\na,1,10\nb,1,20\na,2,11\nb,2,21\na,3,12\n").unwrap();
    let out = dir.path().join("out.csv");
    let o = samsel(&[
        "lag", "--input", path_str(&input), "--out", path_str(&out), "--site", "site", "--lag", "v", "--by", "t",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        fs::read_to_string(&out).unwrap(),
        "site,t,v,v_lag\na,1,10,\nb,1,20,\na,2,11,10\nb,2,21,20\na,3,12,11\n"
    );
}

#[test]
fn basis_export_has_one_row_per_site() {
    let dir = panel_dir(7);
    let out = dir.path().join("basis.csv");
    let o = samsel(&["basis", "--config", path_str(&dir.path().join("fit.toml")), "--out", path_str(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let t = read_table(&out).unwrap();
    assert_eq!(t.rows.len(), 60);
    assert_eq!(t.headers[0], "site");
    assert_eq!(t.headers[1], "e1");
    let l = t.headers.len() - 1;
    for j in 1..=l {
        let col: Vec<f64> = t.rows.iter().map(|r| r[j].parse().unwrap()).collect();
        assert!(col.iter().sum::<f64>().abs() < 1e-8);
        assert!((col.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-10);
    }
}

#[test]
fn forecasts_beat_the_intercept_only_baseline() {
    let seeds = 30;
    let mut wins = 0;
    for seed in 0..seeds {
        let dir = TempDir::new().unwrap();
        let all = dir.path().join("all.csv");
        write_panel(&all, 60, 4, 100 + seed);
        let text = fs::read_to_string(&all).unwrap();
        let mut lines = text.lines();
        let header = lines.next().unwrap();
        let (held, train): (Vec<&str>, Vec<&str>) = lines.partition(|l| l.contains(",q3,"));
        fs::write(dir.path().join("panel.csv"), format!("{header}\n{}\n", train.join("\n"))).unwrap();
        let request = dir.path().join("request.csv");
        fs::write(&request, format!("{header}\n{}\n", held.join("\n"))).unwrap();
        fs::write(dir.path().join("fit.toml"), PANEL_CONFIG).unwrap();

        let cfg = FitConfig::load(&dir.path().join("fit.toml")).unwrap();
        let ds = ingest_csv(cfg.data_path.as_ref().unwrap(), &cfg.data).unwrap();
        let baseline = ds.y.iter().sum::<f64>() / ds.n() as f64;
        let prep = prepare(ds, &cfg).unwrap();
        let out = run(&prep, &cfg, Mode::Simple).unwrap();
        let preds = predict_rows(&model_file(&prep, &cfg, &out), &request).unwrap();
        let truth = ingest_csv(&request, &cfg.data).unwrap().y;
        let rmse = |f: &dyn Fn(usize) -> f64| {
            (truth.iter().enumerate().map(|(i, y)| (y - f(i)).powi(2)).sum::<f64>() / truth.len() as f64).sqrt()
        };
        assert!(preds.iter().all(|p| p.unseen.iter().all(|g| g == "quarter")));
        if rmse(&|i| preds[i].value) < rmse(&|_| baseline) {
            wins += 1;
        }
    }
    assert!(wins * 100 >= 90 * seeds, "{wins}/{seeds} forecasts beat the baseline");
}
