//! Likelihood as a function of one block's variance parameters, the others held
//! fixed.
//!
//! Ordering the unknowns as `[rest; u_c]` the bordered system is
//! `[[P_rr, B V], [V B', I + V G_cc V]]`, so after one factorization of `P_rr`
//! every evaluation only needs the `L x L` Schur complement `I + V W V` with
//! `W = G_cc - B' P_rr^{-1} B`. This stays well conditioned as `V -> 0`.

use nalgebra::{DMatrix, DVector};

use super::{restricted_loglik, BlockTheta, Layout, OptimOptions, RemlProblem, RemlState, ThetaSet};
use crate::error::{Error, Result};
use crate::linalg::SpdFactor;
use crate::optim::NelderMead;

/// Precomputed pieces for varying the parameters of block `c`.
#[derive(Debug, Clone)]
pub struct ProfiledBlock<'a> {
    problem: &'a RemlProblem,
    block: usize,
    rest: Layout,
    log_det_rest: f64,
    d0: f64,
    a: DVector<f64>,
    g: DMatrix<f64>,
    w: DMatrix<f64>,
    h: DVector<f64>,
}

/// Likelihood pieces at one parameter value.
#[derive(Debug, Clone)]
pub struct BlockEval {
    pub loglik: f64,
    pub log_det: f64,
    pub d: f64,
}

/// Result of [`optimize_effect`].
#[derive(Debug, Clone)]
pub struct BlockOptimum {
    pub block: usize,
    pub theta: BlockTheta,
    pub loglik: f64,
    /// Likelihood with the block removed and everything else unchanged.
    pub loglik_without: f64,
    pub evals: usize,
    pub converged: bool,
}

/// Inverse of the bordered matrix for one parameter set, shared by the
/// [`ProfiledBlock`]s built while that set stays unchanged.
#[derive(Debug, Clone)]
pub struct ActiveSystem {
    layout: Layout,
    m: DMatrix<f64>,
    r: DVector<f64>,
    log_det: f64,
}

impl ActiveSystem {
    pub fn new(problem: &RemlProblem, thetas: &ThetaSet) -> Result<Self> {
        problem.check_thetas(thetas)?;
        let layout = Layout::new(problem, thetas, None);
        let (p, r) = layout.assemble(&problem.ip);
        let factor = SpdFactor::new(p)?;
        Ok(Self {
            layout,
            m: factor.inverse(),
            r,
            log_det: factor.log_det(),
        })
    }

    pub fn dim(&self) -> usize {
        self.layout.dim()
    }
}

impl<'a> ProfiledBlock<'a> {
    pub fn new(problem: &'a RemlProblem, thetas: &ThetaSet, block: usize) -> Result<Self> {
        problem.check_thetas(thetas)?;
        if block >= problem.blocks.len() {
            return Err(Error::Parameter(format!("no random block {block}")));
        }
        let ip = &problem.ip;
        let rest = Layout::new(problem, thetas, Some(block));
        let (p_rr, r_r) = rest.assemble(ip);
        let factor = SpdFactor::new(p_rr)?;
        let a = factor.solve(&r_r);
        let b = rest.cross(ip, block);
        let g = factor.solve_mat(&b);
        Ok(Self::finish(problem, block, rest, factor.log_det(), &r_r, a, &b, g))
    }

    /// Same as [`ProfiledBlock::new`] but reuses the inverse of the system at
    /// `thetas`, which must be the set `system` was built from. When `block`
    /// is active its rows are eliminated from the inverse instead of
    /// refactorizing the rest.
    pub fn from_system(
        problem: &'a RemlProblem,
        system: &ActiveSystem,
        thetas: &ThetaSet,
        block: usize,
    ) -> Result<Self> {
        problem.check_thetas(thetas)?;
        if block >= problem.blocks.len() {
            return Err(Error::Parameter(format!("no random block {block}")));
        }
        let ip = &problem.ip;
        let rest = Layout::new(problem, thetas, Some(block));
        let b = rest.cross(ip, block);
        let seg = system.layout.segments.iter().find(|s| s.0 == block).copied();
        let Some((_, start, len)) = seg else {
            if rest.idx != system.layout.idx || rest.scale != system.layout.scale {
                return Err(Error::State("parameter set differs from the cached system".into()));
            }
            let a = &system.m * &system.r;
            let g = &system.m * &b;
            return Ok(Self::finish(problem, block, rest, system.log_det, &system.r, a, &b, g));
        };
        let d = system.dim();
        let keep: Vec<usize> = (0..start).chain(start + len..d).collect();
        let same = keep.len() == rest.dim()
            && keep.iter().enumerate().all(|(n, &i)| {
                system.layout.idx[i] == rest.idx[n] && system.layout.scale[i] == rest.scale[n]
            });
        if !same {
            return Err(Error::State("parameter set differs from the cached system".into()));
        }
        let m_rr = system.m.select_rows(&keep).select_columns(&keep);
        let m_rc = system.m.select_rows(&keep).columns(start, len).into_owned();
        let m_cc = system.m.view((start, start), (len, len));
        let m_cc = SpdFactor::new((&m_cc + m_cc.transpose()) * 0.5)?;
        let r_r = system.r.select_rows(&keep);
        let a = &m_rr * &r_r - &m_rc * m_cc.solve(&(m_rc.transpose() * &r_r));
        let g = &m_rr * &b - &m_rc * m_cc.solve_mat(&(m_rc.transpose() * &b));
        let log_det_rest = system.log_det + m_cc.log_det();
        Ok(Self::finish(problem, block, rest, log_det_rest, &r_r, a, &b, g))
    }

    #[allow(clippy::too_many_arguments)]
    fn finish(
        problem: &'a RemlProblem,
        block: usize,
        rest: Layout,
        log_det_rest: f64,
        r_r: &DVector<f64>,
        a: DVector<f64>,
        b: &DMatrix<f64>,
        g: DMatrix<f64>,
    ) -> Self {
        let ip = &problem.ip;
        let d0 = ip.myy() - a.dot(r_r);
        let off = ip.block_offset(block);
        let len = ip.block_len(block);
        let gram = ip.gram();
        let mut w = gram.view((off, off), (len, len)) - b.transpose() * &g;
        w = (&w + w.transpose()) * 0.5;
        let m_c = ip.wy().rows(off, len).into_owned();
        let h = m_c - b.transpose() * &a;
        Self {
            problem,
            block,
            rest,
            log_det_rest,
            d0,
            a,
            g,
            w,
            h,
        }
    }

    pub fn block(&self) -> usize {
        self.block
    }

    /// Likelihood without this block (the other active blocks unchanged).
    pub fn loglik_without(&self) -> f64 {
        restricted_loglik(self.log_det_rest, self.d0, self.problem.n(), self.problem.k())
    }

    fn schur(&self, v: &DVector<f64>) -> Result<SpdFactor> {
        let len = v.len();
        let mut s = DMatrix::from_fn(len, len, |i, j| v[i] * self.w[(i, j)] * v[j]);
        for i in 0..len {
            s[(i, i)] += 1.0;
        }
        SpdFactor::new(s)
    }

    pub fn evaluate(&self, theta: &BlockTheta) -> Result<BlockEval> {
        let v = self.problem.blocks[self.block].v_diag(theta);
        let s = self.schur(&v)?;
        let vh = v.component_mul(&self.h);
        let t = s.solve(&vh);
        let d = self.d0 - vh.dot(&t);
        let log_det = self.log_det_rest + s.log_det();
        Ok(BlockEval {
            loglik: restricted_loglik(log_det, d, self.problem.n(), self.problem.k()),
            log_det,
            d,
        })
    }

    pub fn loglik(&self, theta: &BlockTheta) -> f64 {
        self.evaluate(theta)
            .map(|e| e.loglik)
            .unwrap_or(f64::NEG_INFINITY)
    }

    /// Fixed effects and active random coefficients at `theta`, as
    /// `(b, [(block, u)])` with blocks in ascending order.
    pub fn coefficients(&self, theta: &BlockTheta) -> Result<(DVector<f64>, Vec<(usize, DVector<f64>)>)> {
        let v = self.problem.blocks[self.block].v_diag(theta);
        let s = self.schur(&v)?;
        let u = s.solve(&v.component_mul(&self.h));
        let sol_r = &self.a - &self.g * v.component_mul(&u);
        let k = self.rest.k;
        let b = sol_r.rows(0, k).into_owned();
        let mut us: Vec<(usize, DVector<f64>)> = self
            .rest
            .segments
            .iter()
            .map(|&(blk, start, len)| (blk, sol_r.rows(start, len).into_owned()))
            .collect();
        us.push((self.block, u));
        us.sort_by_key(|(blk, _)| *blk);
        Ok((b, us))
    }

    /// Maximizes the likelihood over this block's parameters.
    pub fn optimize(&self, start: Option<BlockTheta>, opts: &OptimOptions) -> BlockOptimum {
        let desc = &self.problem.blocks[self.block];
        let start = start.unwrap_or_else(|| desc.default_theta(opts));
        let (lower, upper) = desc.bounds(opts);
        let mut nm = NelderMead::new(lower, upper);
        nm.rel_tol = opts.rel_tol;
        nm.max_evals = opts.max_evals;
        nm.step = match desc.n_params() {
            2 => vec![1.0, 0.5],
            _ => vec![1.0],
        };
        let x0 = desc.encode(&start);
        let m = nm.minimize_with_restart(|p| -self.loglik(&desc.decode(p)), &x0);
        if !m.converged {
            log::warn!(
                "variance search for block {} stopped after {} evaluations without converging",
                self.block,
                m.evals
            );
        }
        BlockOptimum {
            block: self.block,
            theta: desc.decode(&m.x),
            loglik: -m.f,
            loglik_without: self.loglik_without(),
            evals: m.evals,
            converged: m.converged,
        }
    }
}

/// Optimizes the parameters of `block` with every other block held at `thetas`.
/// The search starts at the block's current value when it is active.
pub fn optimize_effect(
    problem: &RemlProblem,
    thetas: &ThetaSet,
    block: usize,
    opts: &OptimOptions,
) -> Result<BlockOptimum> {
    let pb = ProfiledBlock::new(problem, thetas, block)?;
    Ok(pb.optimize(thetas[block], opts))
}

/// Likelihood after removing `block`'s random part.
pub fn loglik_drop_effect(problem: &RemlProblem, thetas: &ThetaSet, block: usize) -> Result<f64> {
    if thetas.get(block).copied().flatten().is_none() {
        return Err(Error::State(format!("random block {block} is not active")));
    }
    Ok(ProfiledBlock::new(problem, thetas, block)?.loglik_without())
}

/// Cycles through the active blocks re-optimizing each until the likelihood stops
/// improving by more than `rel_tol`.
pub fn fit_active(
    problem: &RemlProblem,
    thetas: ThetaSet,
    opts: &OptimOptions,
    max_sweeps: usize,
    rel_tol: f64,
) -> Result<(RemlState, usize, bool)> {
    let mut thetas = thetas;
    let mut ll = super::loglik_fast(problem, &thetas)?;
    let active: Vec<usize> = (0..thetas.len()).filter(|&b| thetas[b].is_some()).collect();
    let mut converged = active.is_empty();
    let mut sweeps = 0;
    while !converged && sweeps < max_sweeps {
        sweeps += 1;
        let before = ll;
        for &b in &active {
            let opt = optimize_effect(problem, &thetas, b, opts)?;
            if opt.loglik > ll {
                thetas[b] = Some(opt.theta);
                ll = opt.loglik;
            }
        }
        converged = (ll - before).abs() <= rel_tol * ll.abs().max(1.0);
    }
    Ok((RemlState::evaluate(problem, thetas)?, sweeps, converged))
}
