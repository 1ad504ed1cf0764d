//! A prepared model: data reduced to inner products plus the bookkeeping that
//! maps coefficient types and group terms to random blocks.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::basis::{nvc_basis, MoranBasis, NvcBasis, NvcKind};
use crate::error::{Error, Result};
use crate::reml::profile::fit_active;
use crate::reml::{precompute, BlockTheta, OptimOptions, RandomBlock, RemlProblem, RemlState, ThetaSet};
use crate::terms::{hadamard_columns, BlockKind, EffectType, GroupTermSpec, TermSpec, VarianceParams};

/// Random blocks owned by one term.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TermBlocks {
    pub spatial: Option<usize>,
    pub nonspatial: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct Model {
    problem: RemlProblem,
    x: DMatrix<f64>,
    terms: Vec<TermSpec>,
    groups: Vec<GroupTermSpec>,
    term_blocks: Vec<TermBlocks>,
    group_blocks: Vec<usize>,
    moran: MoranBasis,
    nvc: Vec<Option<NvcBasis>>,
}

/// Estimates for one parameter set.
#[derive(Debug, Clone)]
pub struct Fit {
    pub thetas: ThetaSet,
    pub types: Vec<EffectType>,
    pub groups_included: Vec<bool>,
    pub state: RemlState,
    pub converged: bool,
    pub sweeps: usize,
}

/// Per-row coefficient estimates of one term.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TermCoefficients {
    pub covariate_index: usize,
    pub effect_type: EffectType,
    pub estimate: Vec<f64>,
    pub se: Vec<f64>,
    pub t: Vec<f64>,
    pub p_value: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoefficientTable {
    pub terms: Vec<TermCoefficients>,
}

/// Significance marker for a two-sided p-value at the 10/5/1% levels.
pub fn significance(p: f64) -> &'static str {
    if p < 0.01 {
        "***"
    } else if p < 0.05 {
        "**"
    } else if p < 0.1 {
        "*"
    } else {
        ""
    }
}

/// Standardized non-spatial bases for every term that may carry an NVC part.
pub fn nvc_bases(x: &DMatrix<f64>, terms: &[TermSpec], l_n: usize, kind: NvcKind) -> Result<Vec<Option<NvcBasis>>> {
    terms
        .iter()
        .map(|t| {
            if !t.wants_nonspatial() {
                return Ok(None);
            }
            let col = x.column(t.covariate_index).into_owned();
            let basis = nvc_basis(&col, l_n, kind)
                .map_err(|e| Error::Basis(format!("covariate {}: {e}", t.covariate_index)))?;
            Ok(Some(basis.with_covariate_index(t.covariate_index).standardized()))
        })
        .collect()
}

impl Model {
    /// `x` holds every fixed-effect column (intercept included); `terms` must cover
    /// each column exactly once. `moran` has one row per observation.
    pub fn new(
        y: &DVector<f64>,
        x: &DMatrix<f64>,
        terms: Vec<TermSpec>,
        groups: Vec<GroupTermSpec>,
        moran: MoranBasis,
        nvc: Vec<Option<NvcBasis>>,
    ) -> Result<Self> {
        let n = y.len();
        let k = x.ncols();
        if x.nrows() != n {
            return Err(Error::Input(format!("{} response values but {} design rows", n, x.nrows())));
        }
        let mut seen = vec![false; k];
        for t in &terms {
            if t.covariate_index >= k || seen[t.covariate_index] {
                return Err(Error::Spec(format!(
                    "term covariate index {} is out of range or repeated",
                    t.covariate_index
                )));
            }
            seen[t.covariate_index] = true;
        }
        if seen.iter().any(|s| !s) || terms.len() != k {
            return Err(Error::Spec("every fixed-effect column needs exactly one term".into()));
        }
        if nvc.len() != terms.len() {
            return Err(Error::Spec("one (optional) non-spatial basis per term is required".into()));
        }
        if moran.n() != n && !(moran.is_empty() && moran.n() == 0) {
            return Err(Error::Input(format!("Moran basis has {} rows, data has {n}", moran.n())));
        }
        let lambda = moran.scaled_eigenvalues();
        let mut designs = Vec::new();
        let mut blocks = Vec::new();
        let mut term_blocks = Vec::with_capacity(terms.len());
        for (p, t) in terms.iter().enumerate() {
            let col = x.column(t.covariate_index).into_owned();
            let mut tb = TermBlocks::default();
            if t.wants_spatial() {
                if moran.is_empty() {
                    log::warn!("no Moran eigenvectors; term {p} cannot be spatially varying");
                } else {
                    tb.spatial = Some(blocks.len());
                    designs.push(hadamard_columns(&col, moran.vectors()));
                    blocks.push(RandomBlock::spatial(p, lambda.clone()));
                }
            }
            if t.wants_nonspatial() {
                let basis = nvc[p].as_ref().ok_or_else(|| {
                    Error::Spec(format!("term {p} allows nvc but has no non-spatial basis"))
                })?;
                if basis.vectors().nrows() != n {
                    return Err(Error::Input(format!("non-spatial basis of term {p} has the wrong row count")));
                }
                tb.nonspatial = Some(blocks.len());
                designs.push(hadamard_columns(&col, basis.vectors()));
                blocks.push(RandomBlock::nonspatial(p, basis.len()));
            }
            term_blocks.push(tb);
        }
        let mut group_blocks = Vec::with_capacity(groups.len());
        for (g, group) in groups.iter().enumerate() {
            if group.membership().len() != n {
                return Err(Error::Input(format!("group term `{}` has the wrong length", group.name)));
            }
            group_blocks.push(blocks.len());
            designs.push(group.indicator());
            blocks.push(RandomBlock::group(g, group.n_levels()));
        }
        let ip = precompute(y, x, &designs)?;
        drop(designs);
        let problem = RemlProblem::new(ip, blocks)?;
        Ok(Self {
            problem,
            x: x.clone(),
            terms,
            groups,
            term_blocks,
            group_blocks,
            moran,
            nvc,
        })
    }

    /// Raw `N`-row design of every random block, in block order. Only needed
    /// by oracles; the model itself keeps just the inner products.
    pub fn block_designs(&self) -> Vec<DMatrix<f64>> {
        self.problem
            .blocks()
            .iter()
            .map(|blk| match blk.kind {
                BlockKind::Spatial => {
                    let col = self.x.column(self.terms[blk.owner].covariate_index).into_owned();
                    hadamard_columns(&col, self.moran.vectors())
                }
                BlockKind::NonSpatial => {
                    let col = self.x.column(self.terms[blk.owner].covariate_index).into_owned();
                    hadamard_columns(&col, self.nvc[blk.owner].as_ref().expect("checked in new").vectors())
                }
                BlockKind::Group => self.groups[blk.owner].indicator(),
            })
            .collect()
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn problem(&self) -> &RemlProblem {
        &self.problem
    }

    pub fn terms(&self) -> &[TermSpec] {
        &self.terms
    }

    pub fn groups(&self) -> &[GroupTermSpec] {
        &self.groups
    }

    pub fn term_blocks(&self, p: usize) -> TermBlocks {
        self.term_blocks[p]
    }

    pub fn group_block(&self, g: usize) -> usize {
        self.group_blocks[g]
    }

    pub fn moran(&self) -> &MoranBasis {
        &self.moran
    }

    pub fn nvc(&self) -> &[Option<NvcBasis>] {
        &self.nvc
    }

    pub fn n(&self) -> usize {
        self.problem.n()
    }

    pub fn k(&self) -> usize {
        self.problem.k()
    }

    pub fn types_of(&self, thetas: &ThetaSet) -> Vec<EffectType> {
        self.term_blocks
            .iter()
            .map(|tb| {
                let s = tb.spatial.is_some_and(|b| thetas[b].is_some());
                let ns = tb.nonspatial.is_some_and(|b| thetas[b].is_some());
                EffectType::from_parts(s, ns)
            })
            .collect()
    }

    pub fn groups_of(&self, thetas: &ThetaSet) -> Vec<bool> {
        self.group_blocks.iter().map(|&b| thetas[b].is_some()).collect()
    }

    /// Fixed coefficients plus the variance parameters of every active block.
    pub fn count_params(&self, thetas: &ThetaSet) -> usize {
        self.k()
            + thetas
                .iter()
                .zip(self.problem.blocks())
                .filter(|(t, _)| t.is_some())
                .map(|(_, b)| b.n_params())
                .sum::<usize>()
    }

    /// Starting parameters for a fixed choice of types and groups.
    pub fn initial_thetas(&self, types: &[EffectType], groups: &[bool], opts: &OptimOptions) -> Result<ThetaSet> {
        if types.len() != self.terms.len() || groups.len() != self.groups.len() {
            return Err(Error::Spec("one type per term and one flag per group term are required".into()));
        }
        let mut thetas = self.problem.empty_thetas();
        for (p, (&ty, term)) in types.iter().zip(&self.terms).enumerate() {
            if !term.allows(ty) {
                return Err(Error::Spec(format!(
                    "type {ty} is not a candidate for covariate {}",
                    term.covariate_index
                )));
            }
            let tb = self.term_blocks[p];
            if ty.has_spatial() {
                let b = tb
                    .spatial
                    .ok_or_else(|| Error::Spec(format!("term {p} has no spatial basis")))?;
                thetas[b] = Some(self.problem.blocks()[b].default_theta(opts));
            }
            if ty.has_nonspatial() {
                let b = tb
                    .nonspatial
                    .ok_or_else(|| Error::Spec(format!("term {p} has no non-spatial basis")))?;
                thetas[b] = Some(self.problem.blocks()[b].default_theta(opts));
            }
        }
        for (g, &inc) in groups.iter().enumerate() {
            if inc {
                let b = self.group_blocks[g];
                thetas[b] = Some(self.problem.blocks()[b].default_theta(opts));
            }
        }
        Ok(thetas)
    }

    /// Estimates at the given parameters without any search.
    pub fn evaluate(&self, thetas: ThetaSet, converged: bool, sweeps: usize) -> Result<Fit> {
        let state = RemlState::evaluate(&self.problem, thetas)?;
        Ok(Fit {
            types: self.types_of(&state.thetas),
            groups_included: self.groups_of(&state.thetas),
            thetas: state.thetas.clone(),
            state,
            converged,
            sweeps,
        })
    }

    /// REML fit with the coefficient types held fixed.
    pub fn fit_types(
        &self,
        types: &[EffectType],
        groups: &[bool],
        opts: &OptimOptions,
        max_sweeps: usize,
        rel_tol: f64,
    ) -> Result<Fit> {
        let thetas = self.initial_thetas(types, groups, opts)?;
        let (state, sweeps, converged) = fit_active(&self.problem, thetas, opts, max_sweeps, rel_tol)?;
        Ok(Fit {
            types: self.types_of(&state.thetas),
            groups_included: self.groups_of(&state.thetas),
            thetas: state.thetas.clone(),
            state,
            converged,
            sweeps,
        })
    }

    /// Variance parameters of each term in the public per-term form.
    pub fn variance_params(&self, thetas: &ThetaSet) -> Vec<VarianceParams> {
        self.term_blocks
            .iter()
            .map(|tb| {
                let mut vp = VarianceParams::default();
                if let Some(Some(BlockTheta::Spatial { tau, alpha })) = tb.spatial.map(|b| thetas[b]) {
                    vp.tau_s_over_sigma = Some(tau);
                    vp.alpha = Some(alpha);
                }
                if let Some(Some(BlockTheta::Scale { tau })) = tb.nonspatial.map(|b| thetas[b]) {
                    vp.tau_n_over_sigma = Some(tau);
                }
                vp
            })
            .collect()
    }

    /// `V_b u_b` for an active block.
    fn scaled_effect(&self, fit: &Fit, b: usize) -> Option<DVector<f64>> {
        fit.state.scaled_effect(&self.problem, b)
    }

    /// `f_p` per observation: `b_p + E_s V_s u_s + E_n V_n u_n`.
    pub fn term_coefficients(&self, fit: &Fit, p: usize) -> DVector<f64> {
        let term = &self.terms[p];
        let mut f = DVector::from_element(self.n(), fit.state.b_hat[term.covariate_index]);
        let tb = self.term_blocks[p];
        if let Some(vu) = tb.spatial.and_then(|b| self.scaled_effect(fit, b)) {
            f += self.moran.vectors() * vu;
        }
        if let Some(vu) = tb.nonspatial.and_then(|b| self.scaled_effect(fit, b)) {
            f += self.nvc[p].as_ref().expect("checked in new").vectors() * vu;
        }
        f
    }

    /// Level effects `V_g u_g` of each included group term.
    pub fn group_effects(&self, fit: &Fit) -> Vec<Option<DVector<f64>>> {
        self.group_blocks.iter().map(|&b| self.scaled_effect(fit, b)).collect()
    }

    /// In-sample fitted values (random parts included, residual excluded).
    pub fn fitted(&self, fit: &Fit) -> DVector<f64> {
        let mut yhat = DVector::zeros(self.n());
        for (p, term) in self.terms.iter().enumerate() {
            let f = self.term_coefficients(fit, p);
            yhat += f.component_mul(&self.x.column(term.covariate_index));
        }
        for (g, eff) in self.group_effects(fit).into_iter().enumerate() {
            if let Some(eff) = eff {
                for (i, &lvl) in self.groups[g].membership().iter().enumerate() {
                    yhat[i] += eff[lvl];
                }
            }
        }
        yhat
    }

    /// Estimates with standard errors from `s2 * P^{-1}` mapped through
    /// `z_i = (1, V_s e_i, V_n n_i)`.
    pub fn coefficient_table(&self, fit: &Fit) -> Result<CoefficientTable> {
        if !fit.converged {
            return Err(Error::State("coefficient table requested for a non-converged fit".into()));
        }
        let sol = &fit.state.solution;
        let pinv = sol.p_inverse();
        let s2 = fit.state.sigma2_hat;
        let normal = Normal::standard();
        let n = self.n();
        let mut out = Vec::with_capacity(self.terms.len());
        for (p, term) in self.terms.iter().enumerate() {
            let estimate = self.term_coefficients(fit, p);
            // (index into P, scale, basis rows) for each stacked part
            let mut parts: Vec<(usize, DVector<f64>, &DMatrix<f64>)> = Vec::new();
            let tb = self.term_blocks[p];
            for (b, basis) in [
                (tb.spatial, Some(self.moran.vectors())),
                (tb.nonspatial, self.nvc[p].as_ref().map(|v| v.vectors())),
            ] {
                let (Some(b), Some(basis)) = (b, basis) else { continue };
                let Some(theta) = fit.thetas[b] else { continue };
                let start = sol
                    .layout
                    .segments
                    .iter()
                    .find(|s| s.0 == b)
                    .map(|s| s.1)
                    .expect("active block is in the layout");
                parts.push((start, self.problem.blocks()[b].v_diag(&theta), basis));
            }
            let width = 1 + parts.iter().map(|q| q.1.len()).sum::<usize>();
            let mut idx = vec![term.covariate_index];
            let mut z = DMatrix::zeros(n, width);
            z.column_mut(0).fill(1.0);
            let mut at = 1;
            for (start, v, basis) in &parts {
                for j in 0..v.len() {
                    idx.push(start + j);
                    z.column_mut(at + j).copy_from(&(basis.column(j) * v[j]));
                }
                at += v.len();
            }
            let sub = DMatrix::from_fn(width, width, |i, j| pinv[(idx[i], idx[j])]);
            let zs = &z * &sub;
            let mut se = Vec::with_capacity(n);
            let mut t = Vec::with_capacity(n);
            let mut p_value = Vec::with_capacity(n);
            for i in 0..n {
                let var = s2 * zs.row(i).dot(&z.row(i));
                let s = var.max(0.0).sqrt();
                let ti = estimate[i] / s;
                se.push(s);
                t.push(ti);
                p_value.push(2.0 * normal.sf(ti.abs()));
            }
            out.push(TermCoefficients {
                covariate_index: term.covariate_index,
                effect_type: fit.types[p],
                estimate: estimate.iter().copied().collect(),
                se,
                t,
                p_value,
            });
        }
        Ok(CoefficientTable { terms: out })
    }
}
