//! Synthetic data with known coefficient surfaces, accuracy metrics and the
//! comparison and timing experiments built on them.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{build_proximity, moran_eigen, nvc_basis, MoranBasis, NvcKind, SiteCoords, DEFAULT_L_MAX, DEFAULT_NVC_SIZE};
use crate::error::{Error, Result};
use crate::model::{nvc_bases, CoefficientTable, Fit, Model};
use crate::selection::{default_sequence, fixed_state_sweep_seconds, mc_select, simple_select, McConfig, SelectConfig};
use crate::terms::{EffectType, TermSpec};

/// How the random parts of the generating process are scaled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DgpScaling {
    /// `C~ u` and `E u` exactly as written, with orthonormal polynomial columns.
    Literal,
    /// Each varying part is multiplied by a fixed constant so its expected
    /// site-level standard deviation equals its `tau` (1 for the intercept).
    #[default]
    Normalized,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DgpConfig {
    pub n: usize,
    pub p: usize,
    pub tau1: f64,
    pub tau2: f64,
    pub seed: u64,
    pub scaling: DgpScaling,
}

impl Default for DgpConfig {
    fn default() -> Self {
        Self {
            n: 1000,
            p: 1,
            tau1: 0.5,
            tau2: 0.5,
            seed: 0,
            scaling: DgpScaling::Normalized,
        }
    }
}

impl DgpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 50 {
            return Err(Error::Parameter(format!("sample size {} is below 50", self.n)));
        }
        if self.p == 0 {
            return Err(Error::Parameter("at least one covariate group is required".into()));
        }
        if !(self.tau1 >= 0.0 && self.tau2 >= 0.0) || !self.tau1.is_finite() || !self.tau2.is_finite() {
            return Err(Error::Parameter("tau values must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Role of a coefficient in the generating process.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoefClass {
    Intercept,
    Constant,
    Svc,
    Nvc,
}

impl CoefClass {
    pub const ALL: [CoefClass; 4] = [CoefClass::Intercept, CoefClass::Constant, CoefClass::Svc, CoefClass::Nvc];

    pub fn as_str(self) -> &'static str {
        match self {
            CoefClass::Intercept => "intercept",
            CoefClass::Constant => "constant",
            CoefClass::Svc => "svc",
            CoefClass::Nvc => "nvc",
        }
    }

    /// The type under which the generating process is recovered exactly.
    pub fn true_type(self) -> EffectType {
        match self {
            CoefClass::Intercept | CoefClass::Svc => EffectType::Svc,
            CoefClass::Constant => EffectType::Constant,
            CoefClass::Nvc => EffectType::Nvc,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Truth {
    pub beta0: DVector<f64>,
    pub b: Vec<f64>,
    pub beta1: Vec<DVector<f64>>,
    pub beta2: Vec<DVector<f64>>,
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub y: DVector<f64>,
    pub x_const: DMatrix<f64>,
    pub x_svc: DMatrix<f64>,
    pub x_nvc: DMatrix<f64>,
    pub coords: SiteCoords,
    pub truth: Truth,
}

impl SyntheticData {
    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.x_const.ncols()
    }

    /// `[1, x_1..x_P, x_{1,1}..x_{1,P}, x_{2,1}..x_{2,P}]`
    pub fn design(&self) -> DMatrix<f64> {
        let (n, p) = (self.n(), self.p());
        let mut x = DMatrix::from_element(n, 1 + 3 * p, 1.0);
        x.view_mut((0, 1), (n, p)).copy_from(&self.x_const);
        x.view_mut((0, 1 + p), (n, p)).copy_from(&self.x_svc);
        x.view_mut((0, 1 + 2 * p), (n, p)).copy_from(&self.x_nvc);
        x
    }

    pub fn column_names(&self) -> Vec<String> {
        let p = self.p();
        let mut names = vec!["intercept".to_string()];
        names.extend((1..=p).map(|j| format!("x{j}")));
        names.extend((1..=p).map(|j| format!("x1_{j}")));
        names.extend((1..=p).map(|j| format!("x2_{j}")));
        names
    }

    pub fn classes(&self) -> Vec<CoefClass> {
        let p = self.p();
        let mut c = vec![CoefClass::Intercept];
        c.extend(std::iter::repeat_n(CoefClass::Constant, p));
        c.extend(std::iter::repeat_n(CoefClass::Svc, p));
        c.extend(std::iter::repeat_n(CoefClass::Nvc, p));
        c
    }

    /// True coefficient of each design column at every site.
    pub fn true_coefficients(&self) -> Vec<DVector<f64>> {
        let n = self.n();
        let mut out = vec![self.truth.beta0.clone()];
        out.extend(self.truth.b.iter().map(|&b| DVector::from_element(n, b)));
        out.extend(self.truth.beta1.iter().cloned());
        out.extend(self.truth.beta2.iter().cloned());
        out
    }
}

/// Per-iteration seed derived from a master seed.
pub fn stream_seed(master: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(index + 1);
    rng.next_u64()
}

/// `C~ U` for the row-standardized `exp(-d)` kernel, one row at a time so the
/// `N x N` matrix is never stored. Also returns `mean_i ||C~_i||^2`, the variance
/// of `(C~ u)_i` for unit-variance `u` averaged over sites.
fn moving_average(coords: &SiteCoords, u: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let n = coords.len();
    let mut out = DMatrix::zeros(n, u.ncols());
    let mut w = vec![0.0; n];
    let mut mean_sq = 0.0;
    for i in 0..n {
        let mut total = 0.0;
        for (j, wj) in w.iter_mut().enumerate() {
            *wj = if i == j { 0.0 } else { (-coords.distance(i, j)).exp() };
            total += *wj;
        }
        mean_sq += w.iter().map(|v| v * v).sum::<f64>() / (total * total);
        for c in 0..u.ncols() {
            let s: f64 = w.iter().zip(u.column(c).iter()).map(|(a, b)| a * b).sum();
            out[(i, c)] = s / total;
        }
    }
    (out, mean_sq / n as f64)
}

/// Draws one data set from the generating process.
pub fn generate(cfg: &DgpConfig) -> Result<SyntheticData> {
    cfg.validate()?;
    let (n, p) = (cfg.n, cfg.p);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut z = || -> f64 { StandardNormal.sample(&mut rng) };
    let pts: Vec<(f64, f64)> = (0..n).map(|_| (z(), z())).collect();
    let x_const = DMatrix::from_fn(n, p, |_, _| z());
    let x_svc = DMatrix::from_fn(n, p, |_, _| z());
    let x_nvc = DMatrix::from_fn(n, p, |_, _| z());
    let mut u = DMatrix::zeros(n, 1 + p);
    for i in 0..n {
        u[(i, 0)] = z();
    }
    for c in 1..=p {
        for i in 0..n {
            u[(i, c)] = cfg.tau1 * z();
        }
    }
    let mut u2 = DMatrix::zeros(DEFAULT_NVC_SIZE, p);
    for c in 0..p {
        for l in 0..DEFAULT_NVC_SIZE {
            u2[(l, c)] = cfg.tau2 * z();
        }
    }
    let eps = DVector::from_fn(n, |_, _| z());

    let coords = SiteCoords::new(pts)?;
    let (ma, mean_sq) = moving_average(&coords, &u);
    let (svc_scale, nvc_scale) = match cfg.scaling {
        DgpScaling::Literal => (1.0, 1.0),
        DgpScaling::Normalized => (1.0 / mean_sq.sqrt(), 1.0 / (DEFAULT_NVC_SIZE as f64).sqrt()),
    };
    let beta0 = ma.column(0) * svc_scale;
    let beta1: Vec<DVector<f64>> = (0..p).map(|c| (ma.column(1 + c) * svc_scale).add_scalar(1.0)).collect();
    let mut beta2 = Vec::with_capacity(p);
    for c in 0..p {
        let e = nvc_basis(&x_nvc.column(c).into_owned(), DEFAULT_NVC_SIZE, NvcKind::Polynomial)?;
        let e = match cfg.scaling {
            // unit-norm columns, as orthogonal polynomial bases are usually returned
            DgpScaling::Literal => {
                let mut v = e.vectors().clone();
                for mut col in v.column_iter_mut() {
                    col /= col.norm();
                }
                v
            }
            DgpScaling::Normalized => e.standardized().vectors().clone(),
        };
        beta2.push((e * u2.column(c) * nvc_scale).add_scalar(1.0));
    }
    let b = vec![1.0; p];
    let mut y = beta0.clone() + eps;
    for c in 0..p {
        y += x_const.column(c) * b[c];
        y += x_svc.column(c).component_mul(&beta1[c]);
        y += x_nvc.column(c).component_mul(&beta2[c]);
    }
    Ok(SyntheticData {
        y,
        x_const,
        x_svc,
        x_nvc,
        coords,
        truth: Truth { beta0, b, beta1, beta2 },
    })
}

fn check_shapes(estimates: &[DVector<f64>], truth: &[DVector<f64>]) -> Result<usize> {
    if estimates.len() != truth.len() || estimates.is_empty() {
        return Err(Error::Input("estimate and truth iteration counts differ or are zero".into()));
    }
    let n = truth[0].len();
    for (e, t) in estimates.iter().zip(truth) {
        if e.len() != t.len() || t.len() != n || n == 0 {
            return Err(Error::Input("estimate and truth vectors differ in length".into()));
        }
    }
    Ok(n)
}

/// Root mean squared error over iterations and sites.
pub fn rmse(estimates: &[DVector<f64>], truth: &[DVector<f64>]) -> Result<f64> {
    let n = check_shapes(estimates, truth)?;
    let sse: f64 = estimates.iter().zip(truth).map(|(e, t)| (e - t).norm_squared()).sum();
    Ok((sse / (estimates.len() * n) as f64).sqrt())
}

/// Mean signed error over iterations and sites.
pub fn bias(estimates: &[DVector<f64>], truth: &[DVector<f64>]) -> Result<f64> {
    let n = check_shapes(estimates, truth)?;
    let total: f64 = estimates.iter().zip(truth).map(|(e, t)| (e - t).sum()).sum();
    Ok(total / (estimates.len() * n) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Lm,
    SvcAll,
    SnvcAll,
    TrueTypes,
    SimpleSelect,
    McSelect,
}

impl ModelKind {
    pub const ALL: [ModelKind; 6] = [
        ModelKind::Lm,
        ModelKind::SvcAll,
        ModelKind::SnvcAll,
        ModelKind::TrueTypes,
        ModelKind::SimpleSelect,
        ModelKind::McSelect,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Lm => "lm",
            ModelKind::SvcAll => "svc-all",
            ModelKind::SnvcAll => "snvc-all",
            ModelKind::TrueTypes => "true-types",
            ModelKind::SimpleSelect => "simple-select",
            ModelKind::McSelect => "mc-select",
        }
    }

    fn types(self, classes: &[CoefClass]) -> Option<Vec<EffectType>> {
        let ty = |c: &CoefClass| match self {
            ModelKind::Lm => EffectType::Constant,
            ModelKind::SvcAll => EffectType::Svc,
            ModelKind::SnvcAll if *c == CoefClass::Intercept => EffectType::Svc,
            ModelKind::SnvcAll => EffectType::Snvc,
            ModelKind::TrueTypes => c.true_type(),
            _ => unreachable!(),
        };
        match self {
            ModelKind::SimpleSelect | ModelKind::McSelect => None,
            _ => Some(classes.iter().map(ty).collect()),
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Spec(format!("unknown model `{s}`")))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dgp: DgpConfig,
    pub iterations: usize,
    pub models: Vec<ModelKind>,
    pub l_max: usize,
    pub nvc_size: usize,
    pub nvc_kind: NvcKind,
    pub select: SelectConfig,
    pub mc_replicates: usize,
    pub workers: usize,
    /// Sweep budget of the fixed-type fits.
    pub fit_max_sweeps: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dgp: DgpConfig::default(),
            iterations: 50,
            models: ModelKind::ALL.to_vec(),
            l_max: DEFAULT_L_MAX,
            nvc_size: DEFAULT_NVC_SIZE,
            nvc_kind: NvcKind::default(),
            select: SelectConfig::default(),
            mc_replicates: 30,
            workers: 1,
            fit_max_sweeps: 50,
        }
    }
}

/// Error sums of one model at one iteration for one coefficient class.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassScore {
    pub class: CoefClass,
    pub count: usize,
    pub sse: f64,
    pub err_sum: f64,
    pub se_sse: f64,
    pub se_err_sum: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub seed: u64,
    pub model: ModelKind,
    pub types: Vec<EffectType>,
    pub cost: f64,
    pub converged: bool,
    pub scores: Vec<ClassScore>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Failure {
    pub iteration: usize,
    pub model: ModelKind,
    pub message: String,
}

/// Aggregated accuracy of one model on one coefficient class.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Cell {
    pub model: ModelKind,
    pub class: CoefClass,
    pub fits: usize,
    pub rmse: f64,
    pub bias: f64,
    pub se_rmse: f64,
    pub se_bias: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionFrequency {
    pub model: ModelKind,
    pub term: String,
    pub effect_type: EffectType,
    pub count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub term_names: Vec<String>,
    pub cells: Vec<Cell>,
    pub selection: Vec<SelectionFrequency>,
    pub records: Vec<IterationRecord>,
    pub failures: Vec<Failure>,
}

/// Wall-clock seconds spent per model, kept apart from the reproducible report.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ExperimentTiming {
    pub model_seconds: Vec<(ModelKind, f64)>,
    pub total_seconds: f64,
}

/// Candidate lists of the generating-process terms: everything, except that the
/// intercept is limited to constant or SVC.
pub fn dgp_terms(classes: &[CoefClass]) -> Result<Vec<TermSpec>> {
    classes
        .iter()
        .enumerate()
        .map(|(j, c)| {
            if *c == CoefClass::Intercept {
                TermSpec::intercept(&[EffectType::Svc])
            } else {
                TermSpec::new(j, &EffectType::ALL, false)
            }
        })
        .collect()
}

/// Moran basis for the generating-process sites (range 1).
pub fn dgp_moran(data: &SyntheticData, l_max: usize) -> Result<MoranBasis> {
    let c = build_proximity(&data.coords, 1.0)?;
    moran_eigen(&c, l_max, crate::basis::DEFAULT_EPS_EIG)
}

pub fn dgp_model(data: &SyntheticData, moran: MoranBasis, nvc_size: usize, nvc_kind: NvcKind) -> Result<Model> {
    let x = data.design();
    let terms = dgp_terms(&data.classes())?;
    let nvc = nvc_bases(&x, &terms, nvc_size, nvc_kind)?;
    Model::new(&data.y, &x, terms, vec![], moran, nvc)
}

struct ModelOutcome {
    model: ModelKind,
    fit: Fit,
    cost: f64,
    converged: bool,
    table: CoefficientTable,
    seconds: f64,
}

fn fit_model(model: &Model, kind: ModelKind, classes: &[CoefClass], cfg: &ExperimentConfig, seed: u64) -> Result<ModelOutcome> {
    let start = Instant::now();
    let (fit, cost, converged) = match kind.types(classes) {
        Some(types) => {
            let fit = model.fit_types(&types, &[], &cfg.select.optim, cfg.fit_max_sweeps, cfg.select.tol_outer * 1e-2)?;
            let q = model.count_params(&fit.thetas);
            let cost = crate::selection::cost(fit.state.loglik, q, model.n(), cfg.select.cost);
            let conv = fit.converged;
            (fit, cost, conv)
        }
        None => {
            let r = if kind == ModelKind::McSelect {
                let mc = McConfig {
                    replicates: cfg.mc_replicates,
                    seed,
                    workers: 1,
                    force_identity: false,
                };
                mc_select(model, &cfg.select, &mc)?
            } else {
                simple_select(model, &cfg.select)?
            };
            (r.fit, r.cost, r.converged)
        }
    };
    // Tables are reported for every fit; non-convergence is recorded separately.
    let table = model.coefficient_table(&crate::model::Fit {
        converged: true,
        ..fit.clone()
    })?;
    Ok(ModelOutcome {
        model: kind,
        fit,
        cost,
        converged,
        table,
        seconds: start.elapsed().as_secs_f64(),
    })
}

type IterationOutput = (Vec<IterationRecord>, Vec<Failure>, Vec<(ModelKind, f64)>);

fn run_iteration(cfg: &ExperimentConfig, iteration: usize) -> IterationOutput {
    let seed = stream_seed(cfg.dgp.seed, iteration as u64);
    let dgp = DgpConfig { seed, ..cfg.dgp.clone() };
    let mut failures = Vec::new();
    let prepared = generate(&dgp).and_then(|data| {
        let moran = dgp_moran(&data, cfg.l_max)?;
        let model = dgp_model(&data, moran, cfg.nvc_size, cfg.nvc_kind)?;
        Ok((data, model))
    });
    let (data, model) = match prepared {
        Ok(v) => v,
        Err(e) => {
            for &m in &cfg.models {
                failures.push(Failure {
                    iteration,
                    model: m,
                    message: e.to_string(),
                });
            }
            return (Vec::new(), failures, Vec::new());
        }
    };
    let classes = data.classes();
    let truth = data.true_coefficients();
    // The true-types fit supplies the reference standard errors.
    let mut kinds = cfg.models.clone();
    if !kinds.contains(&ModelKind::TrueTypes) {
        kinds.insert(0, ModelKind::TrueTypes);
    }
    let mut outcomes = Vec::new();
    for kind in kinds {
        match fit_model(&model, kind, &classes, cfg, stream_seed(seed, 1000 + kind as u64)) {
            Ok(o) => outcomes.push(o),
            Err(e) => {
                log::warn!("iteration {iteration}: {kind} failed: {e}");
                failures.push(Failure {
                    iteration,
                    model: kind,
                    message: e.to_string(),
                });
            }
        }
    }
    let reference = outcomes.iter().find(|o| o.model == ModelKind::TrueTypes).map(|o| o.table.clone());
    let mut records = Vec::new();
    let mut seconds = Vec::new();
    for o in outcomes.iter().filter(|o| cfg.models.contains(&o.model)) {
        let mut scores: Vec<ClassScore> = CoefClass::ALL
            .iter()
            .map(|&class| ClassScore {
                class,
                count: 0,
                sse: 0.0,
                err_sum: 0.0,
                se_sse: 0.0,
                se_err_sum: 0.0,
            })
            .collect();
        for (j, term) in o.table.terms.iter().enumerate() {
            let s = &mut scores[CoefClass::ALL.iter().position(|c| *c == classes[j]).expect("known class")];
            for (i, est) in term.estimate.iter().enumerate() {
                let e = est - truth[j][i];
                s.sse += e * e;
                s.err_sum += e;
                s.count += 1;
                if let Some(r) = &reference {
                    let de = term.se[i] - r.terms[j].se[i];
                    s.se_sse += de * de;
                    s.se_err_sum += de;
                }
            }
        }
        scores.retain(|s| s.count > 0);
        records.push(IterationRecord {
            iteration,
            seed,
            model: o.model,
            types: o.fit.types.clone(),
            cost: o.cost,
            converged: o.converged,
            scores,
        });
        seconds.push((o.model, o.seconds));
    }
    (records, failures, seconds)
}

/// Fits every requested model to `iterations` independent draws and scores them.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<(ExperimentReport, ExperimentTiming)> {
    if cfg.iterations == 0 {
        return Err(Error::Parameter("at least one iteration is required".into()));
    }
    if cfg.models.is_empty() {
        return Err(Error::Parameter("no models requested".into()));
    }
    cfg.dgp.validate()?;
    let start = Instant::now();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.max(1))
        .build()
        .map_err(|e| Error::Parameter(format!("cannot start worker pool: {e}")))?;
    let outputs: Vec<IterationOutput> =
        pool.install(|| (0..cfg.iterations).into_par_iter().map(|it| run_iteration(cfg, it)).collect());

    let mut records = Vec::new();
    let mut failures = Vec::new();
    let mut timing = ExperimentTiming::default();
    for (r, f, s) in outputs {
        records.extend(r);
        failures.extend(f);
        for (m, sec) in s {
            match timing.model_seconds.iter_mut().find(|(k, _)| *k == m) {
                Some(entry) => entry.1 += sec,
                None => timing.model_seconds.push((m, sec)),
            }
        }
    }
    timing.total_seconds = start.elapsed().as_secs_f64();

    let mut cells = Vec::new();
    for &model in &cfg.models {
        for class in CoefClass::ALL {
            let mut fits = 0;
            let (mut count, mut sse, mut err, mut se_sse, mut se_err) = (0usize, 0.0, 0.0, 0.0, 0.0);
            for rec in records.iter().filter(|r| r.model == model) {
                if let Some(s) = rec.scores.iter().find(|s| s.class == class) {
                    fits += 1;
                    count += s.count;
                    sse += s.sse;
                    err += s.err_sum;
                    se_sse += s.se_sse;
                    se_err += s.se_err_sum;
                }
            }
            if count == 0 {
                continue;
            }
            let c = count as f64;
            cells.push(Cell {
                model,
                class,
                fits,
                rmse: (sse / c).sqrt(),
                bias: err / c,
                se_rmse: (se_sse / c).sqrt(),
                se_bias: se_err / c,
            });
        }
    }

    let probe = DgpConfig { n: cfg.dgp.n, p: cfg.dgp.p, ..DgpConfig::default() };
    let term_names = {
        let p = probe.p;
        let mut names = vec!["intercept".to_string()];
        names.extend((1..=p).map(|j| format!("x{j}")));
        names.extend((1..=p).map(|j| format!("x1_{j}")));
        names.extend((1..=p).map(|j| format!("x2_{j}")));
        names
    };
    let mut selection = Vec::new();
    for &model in cfg.models.iter().filter(|m| matches!(m, ModelKind::SimpleSelect | ModelKind::McSelect)) {
        for (j, name) in term_names.iter().enumerate() {
            for ty in EffectType::ALL {
                let count = records
                    .iter()
                    .filter(|r| r.model == model && r.types.get(j) == Some(&ty))
                    .count();
                selection.push(SelectionFrequency {
                    model,
                    term: name.clone(),
                    effect_type: ty,
                    count,
                });
            }
        }
    }
    Ok((
        ExperimentReport {
            config: cfg.clone(),
            term_names,
            cells,
            selection,
            records,
            failures,
        },
        timing,
    ))
}

impl ExperimentReport {
    /// RMSE of `model` on `class` over consecutive batches of `size` iterations.
    pub fn batch_rmse(&self, model: ModelKind, class: CoefClass, size: usize) -> Vec<(usize, f64)> {
        let size = size.max(1);
        let batches = self.config.iterations.div_ceil(size);
        (0..batches)
            .filter_map(|b| {
                let (mut sse, mut count) = (0.0, 0usize);
                for r in self
                    .records
                    .iter()
                    .filter(|r| r.model == model && r.iteration / size == b)
                {
                    if let Some(s) = r.scores.iter().find(|s| s.class == class) {
                        sse += s.sse;
                        count += s.count;
                    }
                }
                (count > 0).then(|| (b, (sse / count as f64).sqrt()))
            })
            .collect()
    }

    pub fn cell(&self, model: ModelKind, class: CoefClass) -> Option<&Cell> {
        self.cells.iter().find(|c| c.model == model && c.class == class)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub n_values: Vec<usize>,
    pub p: usize,
    pub l_cap: usize,
    /// Proximity range for the benchmark basis. Shorter than the generating
    /// kernel's so that `l_cap` eigenvectors exist at every sample size.
    pub range: f64,
    pub repeats: usize,
    pub seed: u64,
    pub select: SelectConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            n_values: vec![1000, 10_000],
            p: 10,
            l_cap: 100,
            range: 0.5,
            repeats: 5,
            seed: 0,
            select: SelectConfig::default(),
        }
    }
}

/// Timings at one sample size, averaged over repeats.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimingRow {
    pub n: usize,
    pub basis_seconds: f64,
    pub precompute_seconds: f64,
    pub selection_seconds: f64,
    pub total_seconds: f64,
    pub median_sweep_seconds: f64,
    /// Median time of one sweep from the true-type state with no transitions
    /// applied, so the same blocks are fitted at every sample size.
    pub fixed_sweep_seconds: f64,
    pub sweeps: usize,
    pub active_blocks: usize,
    pub basis_len: usize,
}

pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite timings"));
    let m = values.len() / 2;
    if values.len() % 2 == 1 {
        values[m]
    } else {
        0.5 * (values[m - 1] + values[m])
    }
}

/// Times precompute and the post-precompute simple selection on one draw per
/// sample size. Basis construction is timed once and reported apart.
pub fn bench_timing(cfg: &BenchConfig) -> Result<Vec<TimingRow>> {
    if cfg.repeats < 3 {
        return Err(Error::Parameter("timing needs at least three repeats".into()));
    }
    let mut rows = Vec::new();
    for &n in &cfg.n_values {
        let data = generate(&DgpConfig {
            n,
            p: cfg.p,
            seed: cfg.seed,
            ..DgpConfig::default()
        })?;
        let t = Instant::now();
        let c = build_proximity(&data.coords, cfg.range)?;
        let moran = moran_eigen(&c, cfg.l_cap, crate::basis::DEFAULT_EPS_EIG)?;
        drop(c);
        let basis_seconds = t.elapsed().as_secs_f64();
        let basis_len = moran.len();
        if basis_len < cfg.l_cap {
            log::warn!("only {basis_len} Moran eigenvectors at n = {n}; timings are not at a common L");
        }
        let true_types: Vec<EffectType> = data.classes().iter().map(|c| c.true_type()).collect();
        let (mut pre, mut sel) = (0.0, 0.0);
        let mut sweep_times = Vec::new();
        let mut fixed_times = Vec::new();
        let mut sweeps = 0;
        let mut active = 0;
        for _ in 0..cfg.repeats {
            let t = Instant::now();
            let model = dgp_model(&data, moran.clone(), DEFAULT_NVC_SIZE, NvcKind::default())?;
            pre += t.elapsed().as_secs_f64();
            let t = Instant::now();
            let r = simple_select(&model, &cfg.select)?;
            sel += t.elapsed().as_secs_f64();
            sweep_times.extend(r.sweep_seconds.iter().copied());
            sweeps = r.sweeps;
            active = r.fit.thetas.iter().filter(|t| t.is_some()).count();
            let start = model.initial_thetas(&true_types, &[], &cfg.select.optim)?;
            fixed_times.push(fixed_state_sweep_seconds(
                &model,
                &cfg.select,
                &default_sequence(&model),
                start,
            )?);
        }
        let reps = cfg.repeats as f64;
        rows.push(TimingRow {
            n,
            basis_seconds,
            precompute_seconds: pre / reps,
            selection_seconds: sel / reps,
            total_seconds: (pre + sel) / reps,
            median_sweep_seconds: median(&mut sweep_times),
            fixed_sweep_seconds: median(&mut fixed_times),
            sweeps,
            active_blocks: active,
            basis_len,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::row_standardize;
    use approx::assert_abs_diff_eq;

    #[test]
    fn moving_average_matches_row_standardized_product() {
        let data = generate(&DgpConfig { n: 60, seed: 3, ..DgpConfig::default() }).unwrap();
        let c = build_proximity(&data.coords, 1.0).unwrap();
        let ct = row_standardize(&c).unwrap();
        let u = DMatrix::from_fn(60, 2, |i, j| ((i * 7 + j * 3) % 11) as f64 - 5.0);
        let direct = &ct * &u;
        let (streamed, mean_sq) = moving_average(&data.coords, &u);
        assert_abs_diff_eq!(direct, streamed, epsilon = 1e-12);
        let expected = ct.row_iter().map(|r| r.norm_squared()).sum::<f64>() / 60.0;
        assert_abs_diff_eq!(mean_sq, expected, epsilon = 1e-14);
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = DgpConfig { n: 80, p: 2, seed: 42, ..DgpConfig::default() };
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert!(a.y.iter().zip(b.y.iter()).all(|(u, v)| u.to_bits() == v.to_bits()));
        assert_eq!(a.design().ncols(), 1 + 3 * 2);
        assert_eq!(a.x_const.ncols() + a.x_svc.ncols() + a.x_nvc.ncols(), 6);
    }

    #[test]
    fn response_is_sum_of_parts() {
        let data = generate(&DgpConfig { n: 70, p: 2, seed: 5, ..DgpConfig::default() }).unwrap();
        let x = data.design();
        let beta = data.true_coefficients();
        let mut signal = DVector::zeros(70);
        for (j, b) in beta.iter().enumerate() {
            signal += x.column(j).component_mul(b);
        }
        let resid = &data.y - signal;
        // what remains is the unit-variance noise
        let var = resid.norm_squared() / 70.0;
        assert!(var > 0.4 && var < 2.0, "{var}");
    }

    #[test]
    fn small_configs_are_rejected() {
        assert!(generate(&DgpConfig { n: 10, ..DgpConfig::default() }).is_err());
        assert!(generate(&DgpConfig { p: 0, ..DgpConfig::default() }).is_err());
        assert!(generate(&DgpConfig { tau1: -1.0, ..DgpConfig::default() }).is_err());
    }

    #[test]
    fn metric_examples() {
        let t = vec![DVector::from_vec(vec![1.0, 2.0]), DVector::from_vec(vec![0.0, -1.0])];
        assert_eq!(rmse(&t, &t).unwrap(), 0.0);
        assert_eq!(bias(&t, &t).unwrap(), 0.0);
        let shifted: Vec<_> = t.iter().map(|v| v.add_scalar(0.5)).collect();
        assert_abs_diff_eq!(rmse(&shifted, &t).unwrap(), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(bias(&shifted, &t).unwrap(), 0.5, epsilon = 1e-15);
        let anti = vec![DVector::from_vec(vec![1.3, 1.7]), DVector::from_vec(vec![0.3, -1.3])];
        let truth = vec![DVector::from_vec(vec![1.0, 2.0]), DVector::from_vec(vec![0.0, -1.0])];
        assert_abs_diff_eq!(bias(&anti, &truth).unwrap(), 0.0, epsilon = 1e-12);
        assert!(rmse(&t[..1], &t).is_err());
    }

    #[test]
    fn single_iteration_has_one_cell_per_class() {
        let cfg = ExperimentConfig {
            dgp: DgpConfig { n: 80, seed: 1, ..DgpConfig::default() },
            iterations: 1,
            models: vec![ModelKind::Lm],
            l_max: 20,
            nvc_size: 4,
            ..ExperimentConfig::default()
        };
        let (report, _) = run_experiment(&cfg).unwrap();
        assert_eq!(report.cells.len(), CoefClass::ALL.len());
        let mut classes: Vec<_> = report.cells.iter().map(|c| c.class).collect();
        classes.dedup();
        assert_eq!(classes.len(), 4);
        for c in &report.cells {
            assert!(c.rmse >= c.bias.abs() * (1.0 - 1e-12));
        }
    }
}
