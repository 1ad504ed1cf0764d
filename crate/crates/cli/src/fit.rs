//! Basis construction, fitting, selection and the files they produce.

use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use samsel::basis::{build_proximity, moran_eigen, MoranBasis, NvcBasis, SiteCoords, DEFAULT_EPS_EIG};
use samsel::model::{nvc_bases, significance, Fit, Model};
use samsel::reml::OptimOptions;
use samsel::selection::{
    mc_select, simple_select, CostKind, McConfig, SelectConfig, SelectionResult, Step, SweepItem,
};
use samsel::terms::{EffectType, GroupTermSpec, TermSpec};

use crate::config::{FitConfig, Mode};
use crate::data::{fmt_f64, write_csv, Dataset, Sites};
use crate::error::{io_err, CliError, Result};

pub const INTERCEPT: &str = "(intercept)";

/// Data, bases and inner products ready for fitting.
pub struct Prepared {
    pub dataset: Dataset,
    pub sites: Sites,
    pub range: f64,
    /// Moran basis with one row per distinct site.
    pub site_moran: MoranBasis,
    pub model: Model,
    pub term_names: Vec<String>,
    pub basis_seconds: f64,
    pub precompute_seconds: f64,
}

pub fn design_matrix(ds: &Dataset) -> DMatrix<f64> {
    DMatrix::from_fn(ds.n(), 1 + ds.covariates.len(), |i, j| {
        if j == 0 {
            1.0
        } else {
            ds.covariates[j - 1][i]
        }
    })
}

pub fn prepare(dataset: Dataset, cfg: &FitConfig) -> Result<Prepared> {
    cfg.validate()?;
    let sites = dataset.sites();
    let coords = SiteCoords::new(sites.coords.clone())?;
    let range = match cfg.range {
        Some(r) => r,
        None => coords.max_nearest_neighbor_distance(),
    };
    if !(range > 0.0) {
        return Err(CliError::Config(
            "cannot derive a proximity range (all sites coincide); set `range`".into(),
        ));
    }
    let t = Instant::now();
    let c = build_proximity(&coords, range)?;
    let site_moran = moran_eigen(&c, cfg.l_max, DEFAULT_EPS_EIG)?;
    drop(c);
    let basis_seconds = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let x = design_matrix(&dataset);
    let y = DVector::from_column_slice(&dataset.y);
    let mut terms = vec![TermSpec::intercept(&cfg.intercept)?];
    for (j, name) in dataset.covariate_names.iter().enumerate() {
        terms.push(TermSpec::new(j + 1, cfg.candidates(name), false)?);
    }
    let nvc = nvc_bases(&x, &terms, cfg.nvc_size, cfg.nvc_kind)?;
    let groups = dataset
        .groups
        .iter()
        .map(|(name, labels)| GroupTermSpec::from_labels(name.clone(), labels))
        .collect::<samsel::Result<Vec<_>>>()?;
    let moran_rows = site_moran.expand_rows(&sites.site_of_row);
    let model = Model::new(&y, &x, terms, groups, moran_rows, nvc)?;
    let precompute_seconds = t.elapsed().as_secs_f64();
    let mut term_names = vec![INTERCEPT.to_string()];
    term_names.extend(dataset.covariate_names.iter().cloned());
    Ok(Prepared {
        dataset,
        sites,
        range,
        site_moran,
        model,
        term_names,
        basis_seconds,
        precompute_seconds,
    })
}

pub fn select_config(cfg: &FitConfig) -> SelectConfig {
    SelectConfig {
        cost: cfg.cost,
        tol_accept: cfg.tolerances.accept,
        tol_outer: cfg.tolerances.outer,
        max_sweeps: cfg.tolerances.max_sweeps,
        optim: OptimOptions {
            rel_tol: cfg.tolerances.optim,
            max_evals: cfg.tolerances.max_evals,
            ..OptimOptions::default()
        },
    }
}

/// Result of fitting in one of the three modes.
pub struct Outcome {
    pub mode: Mode,
    pub fit: Fit,
    pub selection: Option<SelectionResult>,
    pub cost: f64,
    pub q: usize,
    pub selection_seconds: f64,
}

impl Outcome {
    pub fn converged(&self) -> bool {
        self.fit.converged
    }
}

/// In mode `none` each term is fitted at its richest candidate type and every
/// group term is included.
pub fn fixed_types(model: &Model) -> Vec<EffectType> {
    model
        .terms()
        .iter()
        .map(|t| *t.candidate_types().iter().max().expect("constant is always a candidate"))
        .collect()
}

pub fn run(prep: &Prepared, cfg: &FitConfig, mode: Mode) -> Result<Outcome> {
    let model = &prep.model;
    let sel = select_config(cfg);
    let t = Instant::now();
    let (fit, selection) = match mode {
        Mode::None => {
            let groups = vec![true; model.groups().len()];
            let fit = model.fit_types(&fixed_types(model), &groups, &sel.optim, sel.max_sweeps, sel.tol_outer)?;
            (fit, None)
        }
        Mode::Simple => {
            let r = simple_select(model, &sel)?;
            (r.fit.clone(), Some(r))
        }
        Mode::Mc => {
            let mc = McConfig {
                replicates: cfg.replicates,
                seed: cfg.seed,
                workers: cfg.workers,
                force_identity: false,
            };
            let r = mc_select(model, &sel, &mc)?;
            (r.fit.clone(), Some(r))
        }
    };
    let selection_seconds = t.elapsed().as_secs_f64();
    let q = model.count_params(&fit.thetas);
    let cost = samsel::selection::cost(fit.state.loglik, q, model.n(), cfg.cost);
    Ok(Outcome {
        mode,
        fit,
        selection,
        cost,
        q,
        selection_seconds,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteEntry {
    pub id: String,
    pub east: f64,
    pub north: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TermEntry {
    pub name: String,
    pub effect_type: EffectType,
    pub candidates: Vec<EffectType>,
    pub b: f64,
    pub tau_s_over_sigma: Option<f64>,
    pub alpha: Option<f64>,
    pub tau_n_over_sigma: Option<f64>,
    /// `V_s u_s`, multiplied by a site's Moran row.
    pub spatial_effect: Option<Vec<f64>>,
    /// `V_n u_n`, multiplied by the non-spatial basis at the covariate value.
    pub nonspatial_effect: Option<Vec<f64>>,
    pub nvc_basis: Option<NvcBasis>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupEntry {
    pub name: String,
    pub levels: Vec<String>,
    pub included: bool,
    pub tau_over_sigma: Option<f64>,
    pub effects: Option<Vec<f64>>,
}

/// Everything prediction needs, without the training data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelFile {
    pub format: u32,
    pub seed: u64,
    pub mode: Mode,
    pub cost_kind: CostKind,
    pub site_column: String,
    pub response: String,
    pub covariates: Vec<String>,
    pub n: usize,
    pub range: f64,
    pub sites: Vec<SiteEntry>,
    pub moran_eigenvalues: Vec<f64>,
    /// One row of Moran eigenvectors per entry of `sites`.
    pub moran_rows: Vec<Vec<f64>>,
    pub terms: Vec<TermEntry>,
    pub groups: Vec<GroupEntry>,
    pub b_hat: Vec<f64>,
    pub sigma2: f64,
    pub loglik: f64,
    pub cost: f64,
    pub q: usize,
    pub converged: bool,
}

pub const MODEL_FORMAT: u32 = 1;

pub fn model_file(prep: &Prepared, cfg: &FitConfig, out: &Outcome) -> ModelFile {
    let model = &prep.model;
    let fit = &out.fit;
    let vps = model.variance_params(&fit.thetas);
    let terms = model
        .terms()
        .iter()
        .enumerate()
        .map(|(p, term)| {
            let tb = model.term_blocks(p);
            let effect = |b: Option<usize>| {
                b.and_then(|b| fit.state.scaled_effect(model.problem(), b))
                    .map(|v| v.iter().copied().collect::<Vec<f64>>())
            };
            let nonspatial_effect = effect(tb.nonspatial);
            TermEntry {
                name: prep.term_names[p].clone(),
                effect_type: fit.types[p],
                candidates: term.candidate_types().to_vec(),
                b: fit.state.b_hat[term.covariate_index],
                tau_s_over_sigma: vps[p].tau_s_over_sigma,
                alpha: vps[p].alpha,
                tau_n_over_sigma: vps[p].tau_n_over_sigma,
                spatial_effect: effect(tb.spatial),
                nvc_basis: nonspatial_effect.as_ref().and(model.nvc()[p].clone()),
                nonspatial_effect,
            }
        })
        .collect();
    let effects = model.group_effects(fit);
    let groups = model
        .groups()
        .iter()
        .enumerate()
        .map(|(g, spec)| GroupEntry {
            name: spec.name.clone(),
            levels: spec.levels().to_vec(),
            included: fit.groups_included[g],
            tau_over_sigma: fit.thetas[model.group_block(g)].map(|t| t.tau()),
            effects: effects[g].as_ref().map(|e| e.iter().copied().collect()),
        })
        .collect();
    let moran = prep.site_moran.vectors();
    ModelFile {
        format: MODEL_FORMAT,
        seed: cfg.seed,
        mode: out.mode,
        cost_kind: cfg.cost,
        site_column: cfg.data.site.clone(),
        response: cfg.data.response.clone(),
        covariates: prep.dataset.covariate_names.clone(),
        n: model.n(),
        range: prep.range,
        sites: prep
            .sites
            .ids
            .iter()
            .zip(&prep.sites.coords)
            .map(|(id, &(east, north))| SiteEntry {
                id: id.clone(),
                east,
                north,
            })
            .collect(),
        moran_eigenvalues: prep.site_moran.eigenvalues().iter().copied().collect(),
        moran_rows: (0..moran.nrows())
            .map(|i| moran.row(i).iter().copied().collect())
            .collect(),
        terms,
        groups,
        b_hat: fit.state.b_hat.iter().copied().collect(),
        sigma2: fit.state.sigma2_hat,
        loglik: fit.state.loglik,
        cost: out.cost,
        q: out.q,
        converged: fit.converged,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TermChoice {
    pub name: String,
    pub candidates: Vec<EffectType>,
    pub selected: EffectType,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupChoice {
    pub name: String,
    pub included: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunEntry {
    pub sequence: Vec<String>,
    pub cost: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionReport {
    pub mode: Mode,
    pub cost_kind: CostKind,
    pub terms: Vec<TermChoice>,
    pub groups: Vec<GroupChoice>,
    pub q: usize,
    pub loglik: f64,
    pub cost: f64,
    pub converged: bool,
    pub sweeps: usize,
    /// Cost before the first sweep and after each sweep.
    pub trace: Vec<f64>,
    pub sequence: Vec<String>,
    pub runs: Vec<RunEntry>,
    pub best_run: Option<usize>,
    pub accepted_steps: usize,
}

fn item_name(prep: &Prepared, item: SweepItem) -> String {
    match item {
        SweepItem::Term(p) => prep.term_names[p].clone(),
        SweepItem::Group(g) => format!("group:{}", prep.model.groups()[g].name),
    }
}

pub fn selection_report(prep: &Prepared, cfg: &FitConfig, out: &Outcome) -> SelectionReport {
    let model = &prep.model;
    let fit = &out.fit;
    let names = |seq: &[SweepItem]| seq.iter().map(|&i| item_name(prep, i)).collect::<Vec<_>>();
    let sel = out.selection.as_ref();
    SelectionReport {
        mode: out.mode,
        cost_kind: cfg.cost,
        terms: model
            .terms()
            .iter()
            .enumerate()
            .map(|(p, t)| TermChoice {
                name: prep.term_names[p].clone(),
                candidates: t.candidate_types().to_vec(),
                selected: fit.types[p],
            })
            .collect(),
        groups: model
            .groups()
            .iter()
            .enumerate()
            .map(|(g, s)| GroupChoice {
                name: s.name.clone(),
                included: fit.groups_included[g],
            })
            .collect(),
        q: out.q,
        loglik: fit.state.loglik,
        cost: out.cost,
        converged: fit.converged,
        sweeps: fit.sweeps,
        trace: sel.map(|s| s.trace.clone()).unwrap_or_default(),
        sequence: sel.map(|s| names(&s.sequence)).unwrap_or_default(),
        runs: sel
            .map(|s| {
                s.runs
                    .iter()
                    .map(|r| RunEntry {
                        sequence: names(&r.sequence),
                        cost: r.cost,
                        error: r.error.clone(),
                    })
                    .collect()
            })
            .unwrap_or_default(),
        best_run: sel.and_then(|s| s.best_run),
        accepted_steps: sel.map_or(0, |s| s.steps.len()),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Timing {
    pub basis_seconds: f64,
    pub precompute_seconds: f64,
    pub selection_seconds: f64,
    pub total_seconds: f64,
    pub post_precompute_seconds: f64,
    pub sweep_seconds: Vec<f64>,
}

pub fn timing(prep: &Prepared, out: &Outcome) -> Timing {
    Timing {
        basis_seconds: prep.basis_seconds,
        precompute_seconds: prep.precompute_seconds,
        selection_seconds: out.selection_seconds,
        total_seconds: prep.basis_seconds + prep.precompute_seconds + out.selection_seconds,
        post_precompute_seconds: out.selection_seconds,
        sweep_seconds: out
            .selection
            .as_ref()
            .map(|s| s.sweep_seconds.clone())
            .unwrap_or_default(),
    }
}

pub const COEF_HEADERS: [&str; 9] = ["row", "site", "term", "type", "estimate", "se", "t", "p_value", "signif"];

/// Long-format coefficient table: one line per observation and term.
pub fn coefficient_rows(prep: &Prepared, fit: &Fit) -> Result<Vec<Vec<String>>> {
    let table = prep.model.coefficient_table(fit)?;
    let n = prep.model.n();
    let mut rows = Vec::with_capacity(n * table.terms.len());
    for i in 0..n {
        for (p, tc) in table.terms.iter().enumerate() {
            rows.push(vec![
                (i + 1).to_string(),
                prep.dataset.site_ids[i].clone(),
                prep.term_names[p].clone(),
                tc.effect_type.as_str().to_string(),
                fmt_f64(tc.estimate[i]),
                fmt_f64(tc.se[i]),
                fmt_f64(tc.t[i]),
                fmt_f64(tc.p_value[i]),
                significance(tc.p_value[i]).to_string(),
            ]);
        }
    }
    Ok(rows)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(io_err(path))
}

pub fn write_trace(path: &Path, steps: &[Step]) -> Result<()> {
    let mut text = String::new();
    for s in steps {
        text.push_str(&serde_json::to_string(s)?);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(io_err(path))
}

/// Writes the artifacts of one fit into `dir`. Returns whether the coefficient
/// table was written (it is skipped for non-converged fits unless forced).
pub fn write_outputs(
    dir: &Path,
    prep: &Prepared,
    cfg: &FitConfig,
    out: &Outcome,
    verbose: bool,
    force_table: bool,
) -> Result<bool> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_json(&dir.join("model.json"), &model_file(prep, cfg, out))?;
    write_json(&dir.join("selection_report.json"), &selection_report(prep, cfg, out))?;
    write_json(&dir.join("timing.json"), &timing(prep, out))?;
    if verbose {
        let steps = out.selection.as_ref().map(|s| s.steps.as_slice()).unwrap_or(&[]);
        write_trace(&dir.join("trace.jsonl"), steps)?;
    }
    if !out.converged() && !force_table {
        return Ok(false);
    }
    let mut fit = out.fit.clone();
    if !fit.converged {
        log::warn!("writing coefficients of a non-converged fit");
        fit.converged = true;
    }
    let headers: Vec<String> = COEF_HEADERS.iter().map(|s| s.to_string()).collect();
    write_csv(&dir.join("coefficients.csv"), &headers, &coefficient_rows(prep, &fit)?)?;
    Ok(true)
}
