//! Coefficient-type and group-term selection by marginal information criteria.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Fit, Model};
use crate::reml::{ActiveSystem, OptimOptions, ProfiledBlock, ThetaSet};
use crate::terms::EffectType;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CostKind {
    #[default]
    Bic,
    Aic,
}

impl fmt::Display for CostKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CostKind::Bic => "bic",
            CostKind::Aic => "aic",
        })
    }
}

impl FromStr for CostKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bic" => Ok(CostKind::Bic),
            "aic" => Ok(CostKind::Aic),
            other => Err(Error::Spec(format!("unknown cost `{other}` (expected bic or aic)"))),
        }
    }
}

/// `-2 loglik + q log n` (BIC) or `-2 loglik + 2 q` (AIC).
pub fn cost(loglik: f64, q: usize, n: usize, kind: CostKind) -> f64 {
    let penalty = match kind {
        CostKind::Bic => q as f64 * (n as f64).ln(),
        CostKind::Aic => 2.0 * q as f64,
    };
    -2.0 * loglik + penalty
}

/// Tolerances of the sequential sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectConfig {
    pub cost: CostKind,
    /// A transition must lower the cost by more than this.
    pub tol_accept: f64,
    /// Relative cost change between sweeps that counts as converged.
    pub tol_outer: f64,
    pub max_sweeps: usize,
    pub optim: OptimOptions,
}

impl Default for SelectConfig {
    fn default() -> Self {
        Self {
            cost: CostKind::Bic,
            tol_accept: 1e-6,
            tol_outer: 1e-5,
            max_sweeps: 30,
            optim: OptimOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepItem {
    Term(usize),
    Group(usize),
}

/// The part of a term a step acted on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepPart {
    Spatial,
    NonSpatial,
    Group,
}

/// One accepted transition.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Step {
    pub sweep: usize,
    pub item: SweepItem,
    pub part: StepPart,
    /// Whether the block is active after the step.
    pub active: bool,
    pub loglik: f64,
    pub cost: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McConfig {
    pub replicates: usize,
    pub seed: u64,
    pub workers: usize,
    /// Use the identity order for the first replicate.
    pub force_identity: bool,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            replicates: 30,
            seed: 0,
            workers: 1,
            force_identity: false,
        }
    }
}

/// Outcome of one Monte Carlo replicate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McRun {
    pub sequence: Vec<SweepItem>,
    pub cost: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct SelectionResult {
    pub fit: Fit,
    pub types: Vec<EffectType>,
    pub groups_included: Vec<bool>,
    pub loglik: f64,
    pub cost: f64,
    pub q: usize,
    /// Cost before the first sweep and after each sweep.
    pub trace: Vec<f64>,
    pub steps: Vec<Step>,
    pub sweeps: usize,
    pub sequence: Vec<SweepItem>,
    pub converged: bool,
    pub runs: Vec<McRun>,
    pub best_run: Option<usize>,
    /// Wall time of each sweep (not part of any reproducible output).
    pub sweep_seconds: Vec<f64>,
}

/// Parameter count: fixed coefficients plus the variance parameters of each
/// active block.
pub fn count_params(model: &Model, thetas: &ThetaSet) -> usize {
    model.count_params(thetas)
}

/// Terms in their given order followed by the group terms.
pub fn default_sequence(model: &Model) -> Vec<SweepItem> {
    (0..model.terms().len())
        .map(SweepItem::Term)
        .chain((0..model.groups().len()).map(SweepItem::Group))
        .collect()
}

struct Sweeper<'a> {
    model: &'a Model,
    cfg: &'a SelectConfig,
    thetas: ThetaSet,
    loglik: f64,
    cost: f64,
    steps: Vec<Step>,
    system: Option<ActiveSystem>,
    dry: bool,
}

impl Sweeper<'_> {
    fn cost_of(&self, loglik: f64, thetas: &ThetaSet) -> f64 {
        cost(loglik, self.model.count_params(thetas), self.model.n(), self.cfg.cost)
    }

    /// Fits block `b` and keeps the cheaper of "with" and "without" when it beats
    /// the current cost by more than `tol_accept`.
    fn step(&mut self, sweep: usize, item: SweepItem, part: StepPart, b: usize, on_ok: bool, off_ok: bool) -> Result<()> {
        let active = self.thetas[b].is_some();
        if !on_ok && !(active && off_ok) {
            return Ok(());
        }
        let problem = self.model.problem();
        if self.system.is_none() {
            self.system = Some(ActiveSystem::new(problem, &self.thetas)?);
        }
        let system = self.system.as_ref().expect("system built above");
        let pb = ProfiledBlock::from_system(problem, system, &self.thetas, b)?;
        let mut best: Option<(f64, ThetaSet, f64)> = None;
        if on_ok {
            let opt = pb.optimize(self.thetas[b], &self.cfg.optim);
            let mut with = self.thetas.clone();
            with[b] = Some(opt.theta);
            let c = self.cost_of(opt.loglik, &with);
            best = Some((c, with, opt.loglik));
        }
        if active && off_ok {
            let ll = pb.loglik_without();
            let mut without = self.thetas.clone();
            without[b] = None;
            let c = self.cost_of(ll, &without);
            if best.as_ref().is_none_or(|(bc, _, _)| c < *bc) {
                best = Some((c, without, ll));
            }
        }
        if let Some((c, thetas, ll)) = best {
            if !self.dry && c.is_finite() && c < self.cost - self.cfg.tol_accept {
                self.system = None;
                let now_active = thetas[b].is_some();
                self.thetas = thetas;
                self.cost = c;
                self.loglik = ll;
                self.steps.push(Step {
                    sweep,
                    item,
                    part,
                    active: now_active,
                    loglik: ll,
                    cost: c,
                });
            }
        }
        Ok(())
    }

    fn visit(&mut self, sweep: usize, item: SweepItem) -> Result<()> {
        match item {
            SweepItem::Term(p) => {
                let term = &self.model.terms()[p];
                let tb = self.model.term_blocks(p);
                if let Some(s) = tb.spatial {
                    let ns = tb.nonspatial.is_some_and(|b| self.thetas[b].is_some());
                    let on_ok = term.allows(EffectType::from_parts(true, ns));
                    let off_ok = term.allows(EffectType::from_parts(false, ns));
                    self.step(sweep, item, StepPart::Spatial, s, on_ok, off_ok)?;
                }
                if let Some(nb) = tb.nonspatial {
                    let sp = tb.spatial.is_some_and(|b| self.thetas[b].is_some());
                    let on_ok = term.allows(EffectType::from_parts(sp, true));
                    let off_ok = term.allows(EffectType::from_parts(sp, false));
                    self.step(sweep, item, StepPart::NonSpatial, nb, on_ok, off_ok)?;
                }
            }
            SweepItem::Group(g) => {
                let b = self.model.group_block(g);
                self.step(sweep, item, StepPart::Group, b, true, true)?;
            }
        }
        Ok(())
    }
}

/// Sequential selection over `sequence`, starting from the all-constant model
/// without group terms.
pub fn select_with_sequence(model: &Model, cfg: &SelectConfig, sequence: &[SweepItem]) -> Result<SelectionResult> {
    let thetas = model.problem().empty_thetas();
    let loglik = crate::reml::loglik_fast(model.problem(), &thetas)?;
    let mut sw = Sweeper {
        model,
        cfg,
        cost: 0.0,
        thetas,
        loglik,
        steps: Vec::new(),
        system: None,
        dry: false,
    };
    sw.cost = sw.cost_of(loglik, &sw.thetas);
    let mut trace = vec![sw.cost];
    let mut converged = false;
    let mut sweeps = 0;
    let mut sweep_seconds = Vec::new();
    while sweeps < cfg.max_sweeps {
        sweeps += 1;
        let before = sw.cost;
        let clock = std::time::Instant::now();
        for &item in sequence {
            sw.visit(sweeps, item)?;
        }
        sweep_seconds.push(clock.elapsed().as_secs_f64());
        trace.push(sw.cost);
        log::debug!("sweep {sweeps}: cost {:.10}", sw.cost);
        if (before - sw.cost).abs() <= cfg.tol_outer * sw.cost.abs().max(1.0) {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("selection did not converge within {} sweeps", cfg.max_sweeps);
    }
    let fit = model.evaluate(sw.thetas, converged, sweeps)?;
    let q = model.count_params(&fit.thetas);
    let cost = cost(fit.state.loglik, q, model.n(), cfg.cost);
    Ok(SelectionResult {
        types: fit.types.clone(),
        groups_included: fit.groups_included.clone(),
        loglik: fit.state.loglik,
        cost,
        q,
        trace,
        steps: sw.steps,
        sweeps,
        sequence: sequence.to_vec(),
        converged,
        fit,
        runs: Vec::new(),
        best_run: None,
        sweep_seconds,
    })
}

/// Wall time of one sweep over `sequence` from the fixed state `thetas`: every
/// step fits and scores its block as in a selection sweep, but no transition is
/// applied, so the work done does not depend on what the data would select.
pub fn fixed_state_sweep_seconds(
    model: &Model,
    cfg: &SelectConfig,
    sequence: &[SweepItem],
    thetas: ThetaSet,
) -> Result<f64> {
    let loglik = crate::reml::loglik_fast(model.problem(), &thetas)?;
    let mut sw = Sweeper {
        model,
        cfg,
        cost: 0.0,
        thetas,
        loglik,
        steps: Vec::new(),
        system: None,
        dry: true,
    };
    sw.cost = sw.cost_of(loglik, &sw.thetas);
    let clock = std::time::Instant::now();
    for &item in sequence {
        sw.visit(1, item)?;
    }
    Ok(clock.elapsed().as_secs_f64())
}

/// Sequential selection in the given term order (groups last).
pub fn simple_select(model: &Model, cfg: &SelectConfig) -> Result<SelectionResult> {
    select_with_sequence(model, cfg, &default_sequence(model))
}

/// Order used by replicate `g` of a Monte Carlo run.
pub fn mc_sequence(model: &Model, mc: &McConfig, g: usize) -> Vec<SweepItem> {
    let mut seq = default_sequence(model);
    if mc.force_identity && g == 0 {
        return seq;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mc.seed);
    rng.set_stream(g as u64);
    seq.shuffle(&mut rng);
    seq
}

/// Runs `replicates` sequential selections over random orders and keeps the one
/// with the lowest cost (earliest replicate on ties). Failed replicates are
/// recorded and skipped.
pub fn mc_select(model: &Model, cfg: &SelectConfig, mc: &McConfig) -> Result<SelectionResult> {
    if mc.replicates == 0 {
        return Err(Error::Parameter("Monte Carlo selection needs at least one replicate".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(mc.workers.max(1))
        .build()
        .map_err(|e| Error::Parameter(format!("cannot start worker pool: {e}")))?;
    let outcomes: Vec<(Vec<SweepItem>, Result<SelectionResult>)> = pool.install(|| {
        (0..mc.replicates)
            .into_par_iter()
            .map(|g| {
                let seq = mc_sequence(model, mc, g);
                let res = select_with_sequence(model, cfg, &seq);
                (seq, res)
            })
            .collect()
    });
    let mut runs = Vec::with_capacity(outcomes.len());
    let mut best: Option<(usize, SelectionResult)> = None;
    for (g, (sequence, res)) in outcomes.into_iter().enumerate() {
        match res {
            Ok(r) => {
                runs.push(McRun {
                    sequence,
                    cost: Some(r.cost),
                    error: None,
                });
                if best.as_ref().is_none_or(|(_, b)| r.cost < b.cost) {
                    best = Some((g, r));
                }
            }
            Err(e) => {
                log::warn!("replicate {g} failed: {e}");
                runs.push(McRun {
                    sequence,
                    cost: None,
                    error: Some(e.to_string()),
                });
            }
        }
    }
    let (g, mut result) = best.ok_or_else(|| Error::State("every Monte Carlo replicate failed".into()))?;
    result.runs = runs;
    result.best_run = Some(g);
    Ok(result)
}
