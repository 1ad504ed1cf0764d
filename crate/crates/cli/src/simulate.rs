//! Synthetic data, comparison experiments and the timing benchmark.

use std::path::Path;

use samsel::sim::{bench_timing, generate, run_experiment, BenchConfig, DgpConfig, ExperimentConfig, SyntheticData, TimingRow};

use crate::data::{fmt_f64, write_csv};
use crate::error::{io_err, CliError, Result};
use crate::fit::write_json;

pub fn load_toml<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(io_err(p))?;
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))
        }
    }
}

pub fn experiment(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    let (report, timing) = run_experiment(cfg)?;
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let headers: Vec<String> = ["model", "class", "metric", "value"].iter().map(|s| s.to_string()).collect();
    let mut rows = Vec::new();
    for c in &report.cells {
        for (metric, value) in [
            ("fits", c.fits as f64),
            ("rmse", c.rmse),
            ("bias", c.bias),
            ("se_rmse", c.se_rmse),
            ("se_bias", c.se_bias),
        ] {
            rows.push(vec![
                c.model.as_str().to_string(),
                c.class.as_str().to_string(),
                metric.to_string(),
                fmt_f64(value),
            ]);
        }
    }
    write_csv(&dir.join("report.csv"), &headers, &rows)?;
    let headers: Vec<String> = ["model", "term", "type", "count"].iter().map(|s| s.to_string()).collect();
    let rows: Vec<Vec<String>> = report
        .selection
        .iter()
        .map(|s| {
            vec![
                s.model.as_str().to_string(),
                s.term.clone(),
                s.effect_type.as_str().to_string(),
                s.count.to_string(),
            ]
        })
        .collect();
    write_csv(&dir.join("selection.csv"), &headers, &rows)?;
    write_json(&dir.join("report.json"), &report)?;
    write_json(&dir.join("timing.json"), &timing)?;
    if !report.failures.is_empty() {
        log::warn!("{} fits failed; see report.json", report.failures.len());
    }
    Ok(())
}

pub const TIMING_HEADERS: [&str; 10] = [
    "n",
    "basis_len",
    "basis_seconds",
    "precompute_seconds",
    "selection_seconds",
    "total_seconds",
    "median_sweep_seconds",
    "fixed_sweep_seconds",
    "sweeps",
    "active_blocks",
];

pub fn timing_rows(rows: &[TimingRow]) -> Vec<Vec<String>> {
    rows.iter()
        .map(|r| {
            vec![
                r.n.to_string(),
                r.basis_len.to_string(),
                fmt_f64(r.basis_seconds),
                fmt_f64(r.precompute_seconds),
                fmt_f64(r.selection_seconds),
                fmt_f64(r.total_seconds),
                fmt_f64(r.median_sweep_seconds),
                fmt_f64(r.fixed_sweep_seconds),
                r.sweeps.to_string(),
                r.active_blocks.to_string(),
            ]
        })
        .collect()
}

pub fn bench(cfg: &BenchConfig, path: &Path) -> Result<Vec<TimingRow>> {
    let rows = bench_timing(cfg)?;
    let headers: Vec<String> = TIMING_HEADERS.iter().map(|s| s.to_string()).collect();
    write_csv(path, &headers, &timing_rows(&rows))?;
    Ok(rows)
}

/// Site id, coordinates, response and the `3P` covariates of a synthetic draw.
pub fn synthetic_table(data: &SyntheticData) -> (Vec<String>, Vec<Vec<String>>) {
    let names = data.column_names();
    let mut headers: Vec<String> = ["site", "east", "north", "y"].iter().map(|s| s.to_string()).collect();
    headers.extend(names.iter().skip(1).cloned());
    let x = data.design();
    let pts = data.coords.points();
    let rows = (0..data.y.len())
        .map(|i| {
            let mut r = vec![
                format!("s{}", i + 1),
                fmt_f64(pts[i].0),
                fmt_f64(pts[i].1),
                fmt_f64(data.y[i]),
            ];
            r.extend((1..x.ncols()).map(|j| fmt_f64(x[(i, j)])));
            r
        })
        .collect();
    (headers, rows)
}

pub fn generate_csv(cfg: &DgpConfig, path: &Path) -> Result<SyntheticData> {
    let data = generate(cfg)?;
    let (headers, rows) = synthetic_table(&data);
    write_csv(path, &headers, &rows)?;
    Ok(data)
}
