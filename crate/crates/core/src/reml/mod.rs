//! Restricted likelihood of the spatial additive mixed model.
//!
//! The model is `y = X b + sum_b Z_b V_b u_b + e` with `u_b ~ N(0, s2 I)` and
//! `e ~ N(0, s2 I)`, where each random block `b` has a diagonal `V_b` built from
//! its variance parameters. Blocks are the unit of estimation: an SVC term owns a
//! spatial block, an NVC term a non-spatial block, an S&NVC term both, and group
//! intercepts own a group block. `s2` is profiled out.
//!
//! Two evaluation routes exist. [`loglik_direct`] works on the raw `N`-row data
//! and is kept as an oracle. [`loglik_fast`] and everything in [`profile`] only
//! touch the [`InnerProducts`].

mod direct;
pub mod inner;
pub mod profile;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::SpdFactor;
use crate::terms::{spatial_diag, BlockKind, ALPHA_MAX, ALPHA_MIN};

pub use direct::{loglik_direct, DirectFit};
pub use inner::{precompute, InnerProducts};
pub use profile::{loglik_drop_effect, optimize_effect, ActiveSystem, BlockOptimum, ProfiledBlock};

/// Variance parameters of a single random block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum BlockTheta {
    /// `V = tau * lambda^alpha` on scaled Moran eigenvalues.
    Spatial { tau: f64, alpha: f64 },
    /// `V = tau * I`.
    Scale { tau: f64 },
}

impl BlockTheta {
    pub fn tau(&self) -> f64 {
        match *self {
            BlockTheta::Spatial { tau, .. } | BlockTheta::Scale { tau } => tau,
        }
    }
}

/// Bounds and stopping rules for the per-block variance search.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimOptions {
    pub tau_min: f64,
    pub tau_max: f64,
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub rel_tol: f64,
    pub max_evals: usize,
    pub start_tau: f64,
    pub start_alpha: f64,
}

impl Default for OptimOptions {
    fn default() -> Self {
        Self {
            tau_min: 1e-5,
            tau_max: 1e3,
            alpha_min: ALPHA_MIN,
            alpha_max: ALPHA_MAX,
            rel_tol: 1e-6,
            max_evals: 500,
            start_tau: 0.1,
            start_alpha: 1.0,
        }
    }
}

/// One candidate random effect.
#[derive(Debug, Clone)]
pub struct RandomBlock {
    pub kind: BlockKind,
    /// Index of the owning term (or group term for [`BlockKind::Group`]).
    pub owner: usize,
    len: usize,
    scaled_eigenvalues: Option<DVector<f64>>,
}

impl RandomBlock {
    pub fn spatial(owner: usize, scaled_eigenvalues: DVector<f64>) -> Self {
        Self {
            kind: BlockKind::Spatial,
            owner,
            len: scaled_eigenvalues.len(),
            scaled_eigenvalues: Some(scaled_eigenvalues),
        }
    }

    pub fn nonspatial(owner: usize, len: usize) -> Self {
        Self {
            kind: BlockKind::NonSpatial,
            owner,
            len,
            scaled_eigenvalues: None,
        }
    }

    pub fn group(owner: usize, len: usize) -> Self {
        Self {
            kind: BlockKind::Group,
            owner,
            len,
            scaled_eigenvalues: None,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Number of variance parameters this block adds when active.
    pub fn n_params(&self) -> usize {
        match self.kind {
            BlockKind::Spatial => 2,
            BlockKind::NonSpatial | BlockKind::Group => 1,
        }
    }

    pub fn default_theta(&self, opts: &OptimOptions) -> BlockTheta {
        match self.kind {
            BlockKind::Spatial => BlockTheta::Spatial {
                tau: opts.start_tau,
                alpha: opts.start_alpha,
            },
            _ => BlockTheta::Scale {
                tau: opts.start_tau,
            },
        }
    }

    pub fn v_diag(&self, theta: &BlockTheta) -> DVector<f64> {
        match (*theta, &self.scaled_eigenvalues) {
            (BlockTheta::Spatial { tau, alpha }, Some(lambda)) => spatial_diag(tau, alpha, lambda),
            (BlockTheta::Scale { tau }, None) => DVector::from_element(self.len, tau),
            _ => panic!("variance parameters do not match a {:?} block", self.kind),
        }
    }

    pub fn encode(&self, theta: &BlockTheta) -> Vec<f64> {
        match *theta {
            BlockTheta::Spatial { tau, alpha } => vec![tau.ln(), alpha.ln()],
            BlockTheta::Scale { tau } => vec![tau.ln()],
        }
    }

    pub(crate) fn decode(&self, p: &[f64]) -> BlockTheta {
        match self.kind {
            BlockKind::Spatial => BlockTheta::Spatial {
                tau: p[0].exp(),
                alpha: p[1].exp(),
            },
            _ => BlockTheta::Scale { tau: p[0].exp() },
        }
    }

    pub(crate) fn bounds(&self, opts: &OptimOptions) -> (Vec<f64>, Vec<f64>) {
        match self.kind {
            BlockKind::Spatial => (
                vec![opts.tau_min.ln(), opts.alpha_min.ln()],
                vec![opts.tau_max.ln(), opts.alpha_max.ln()],
            ),
            _ => (vec![opts.tau_min.ln()], vec![opts.tau_max.ln()]),
        }
    }
}

/// Inner products plus the description of every candidate random block.
#[derive(Debug, Clone)]
pub struct RemlProblem {
    ip: InnerProducts,
    blocks: Vec<RandomBlock>,
}

/// Per-block parameters; `None` marks an inactive block.
pub type ThetaSet = Vec<Option<BlockTheta>>;

impl RemlProblem {
    pub fn new(ip: InnerProducts, blocks: Vec<RandomBlock>) -> Result<Self> {
        if ip.n_blocks() != blocks.len() {
            return Err(Error::Input(format!(
                "{} inner-product blocks but {} block descriptions",
                ip.n_blocks(),
                blocks.len()
            )));
        }
        for (b, block) in blocks.iter().enumerate() {
            if block.len != ip.block_len(b) {
                return Err(Error::Input(format!(
                    "block {b} has {} columns but its description says {}",
                    ip.block_len(b),
                    block.len
                )));
            }
        }
        if ip.n() <= ip.k() {
            return Err(Error::Input(format!(
                "need more observations than fixed effects (N = {}, K = {})",
                ip.n(),
                ip.k()
            )));
        }
        Ok(Self { ip, blocks })
    }

    pub fn inner(&self) -> &InnerProducts {
        &self.ip
    }

    pub fn blocks(&self) -> &[RandomBlock] {
        &self.blocks
    }

    pub fn n(&self) -> usize {
        self.ip.n()
    }

    pub fn k(&self) -> usize {
        self.ip.k()
    }

    pub fn empty_thetas(&self) -> ThetaSet {
        vec![None; self.blocks.len()]
    }

    fn check_thetas(&self, thetas: &ThetaSet) -> Result<()> {
        if thetas.len() != self.blocks.len() {
            return Err(Error::Parameter(format!(
                "{} parameter slots for {} blocks",
                thetas.len(),
                self.blocks.len()
            )));
        }
        for (b, t) in thetas.iter().enumerate() {
            if let Some(t) = t {
                let ok = matches!(
                    (self.blocks[b].kind, t),
                    (BlockKind::Spatial, BlockTheta::Spatial { .. })
                        | (BlockKind::NonSpatial, BlockTheta::Scale { .. })
                        | (BlockKind::Group, BlockTheta::Scale { .. })
                );
                if !ok {
                    return Err(Error::Parameter(format!(
                        "block {b} ({:?}) got mismatched parameters {t:?}",
                        self.blocks[b].kind
                    )));
                }
                if !(t.tau() >= 0.0) || !t.tau().is_finite() {
                    return Err(Error::Parameter(format!("block {b}: tau must be >= 0")));
                }
            }
        }
        Ok(())
    }
}

/// Column selection and scaling of `[X | Z_1 V_1 | ...]` for a set of active blocks.
#[derive(Debug, Clone)]
pub(crate) struct Layout {
    /// Indices into the full Gram matrix.
    pub idx: Vec<usize>,
    /// Column scale (1 for fixed effects, `V` entries for random columns).
    pub scale: Vec<f64>,
    /// `(block, start, len)` of each active block inside the layout.
    pub segments: Vec<(usize, usize, usize)>,
    pub k: usize,
}

impl Layout {
    pub fn new(problem: &RemlProblem, thetas: &ThetaSet, exclude: Option<usize>) -> Self {
        let ip = &problem.ip;
        let k = ip.k();
        let mut idx: Vec<usize> = (0..k).collect();
        let mut scale = vec![1.0; k];
        let mut segments = Vec::new();
        for (b, theta) in thetas.iter().enumerate() {
            let Some(theta) = theta else { continue };
            if Some(b) == exclude {
                continue;
            }
            let v = problem.blocks[b].v_diag(theta);
            let off = ip.block_offset(b);
            segments.push((b, idx.len(), v.len()));
            idx.extend(off..off + v.len());
            scale.extend(v.iter());
        }
        Self {
            idx,
            scale,
            segments,
            k,
        }
    }

    pub fn dim(&self) -> usize {
        self.idx.len()
    }

    /// `P = S G S + blockdiag(0, I)` and `r = S W'y`.
    pub fn assemble(&self, ip: &InnerProducts) -> (DMatrix<f64>, DVector<f64>) {
        let d = self.dim();
        let g = ip.gram();
        let wy = ip.wy();
        let mut p = DMatrix::zeros(d, d);
        for j in 0..d {
            let gj = self.idx[j];
            let sj = self.scale[j];
            for i in 0..d {
                p[(i, j)] = self.scale[i] * g[(self.idx[i], gj)] * sj;
            }
            if j >= self.k {
                p[(j, j)] += 1.0;
            }
        }
        let r = DVector::from_fn(d, |i, _| self.scale[i] * wy[self.idx[i]]);
        (p, r)
    }

    /// `S G[idx, cols]` for the unscaled columns of block `c`.
    pub fn cross(&self, ip: &InnerProducts, c: usize) -> DMatrix<f64> {
        let g = ip.gram();
        let off = ip.block_offset(c);
        let len = ip.block_len(c);
        DMatrix::from_fn(self.dim(), len, |i, j| self.scale[i] * g[(self.idx[i], off + j)])
    }
}

pub(crate) fn restricted_loglik(log_det: f64, d: f64, n: usize, k: usize) -> f64 {
    let dof = (n - k) as f64;
    if !(d > 0.0) {
        return f64::NEG_INFINITY;
    }
    -0.5 * log_det - 0.5 * dof * (1.0 + (2.0 * std::f64::consts::PI * d / dof).ln())
}

/// Full solve of the bordered system for one parameter set.
#[derive(Debug, Clone)]
pub struct Solution {
    pub log_det: f64,
    /// `||e||^2 + sum ||u_b||^2`
    pub d: f64,
    pub loglik: f64,
    /// `[b; u_active...]` in layout order.
    pub coef: DVector<f64>,
    pub rhs: DVector<f64>,
    pub(crate) layout: Layout,
    pub(crate) factor: SpdFactor,
    pub(crate) p: DMatrix<f64>,
}

impl Solution {
    pub fn jittered(&self) -> bool {
        self.factor.jittered
    }

    /// `P^{-1}` in layout order.
    pub fn p_inverse(&self) -> DMatrix<f64> {
        self.factor.inverse()
    }
}

pub fn full_solve(problem: &RemlProblem, thetas: &ThetaSet) -> Result<Solution> {
    problem.check_thetas(thetas)?;
    let layout = Layout::new(problem, thetas, None);
    let (p, rhs) = layout.assemble(&problem.ip);
    let factor = SpdFactor::new(p.clone())?;
    let coef = factor.solve(&rhs);
    let log_det = factor.log_det();
    let d = problem.ip.myy() - coef.dot(&rhs);
    let loglik = restricted_loglik(log_det, d, problem.n(), problem.k());
    if !loglik.is_finite() {
        return Err(Error::numerical(
            "restricted likelihood is not finite (zero residual sum of squares?)",
            f64::INFINITY,
        ));
    }
    Ok(Solution {
        log_det,
        d,
        loglik,
        coef,
        rhs,
        layout,
        factor,
        p,
    })
}

/// Restricted log-likelihood from the inner products alone.
pub fn loglik_fast(problem: &RemlProblem, thetas: &ThetaSet) -> Result<f64> {
    Ok(full_solve(problem, thetas)?.loglik)
}

/// Fixed and random coefficient estimates for one parameter set.
#[derive(Debug, Clone)]
pub struct Effects {
    pub b_hat: DVector<f64>,
    /// Per block; `None` for inactive blocks.
    pub u_hat: Vec<Option<DVector<f64>>>,
    pub resid_norm2: f64,
    pub sigma2_hat: f64,
}

pub fn solve_effects(problem: &RemlProblem, thetas: &ThetaSet) -> Result<Effects> {
    let sol = full_solve(problem, thetas)?;
    Ok(effects_from(problem, &sol))
}

fn effects_from(problem: &RemlProblem, sol: &Solution) -> Effects {
    let k = problem.k();
    let b_hat = sol.coef.rows(0, k).into_owned();
    let mut u_hat = vec![None; problem.blocks.len()];
    let mut u_norm2 = 0.0;
    for &(b, start, len) in &sol.layout.segments {
        let u = sol.coef.rows(start, len).into_owned();
        u_norm2 += u.norm_squared();
        u_hat[b] = Some(u);
    }
    // ||e||^2 = m_yy - 2 c'r + c' P0 c, with P0 = P minus the identity on random rows.
    let pc = &sol.p * &sol.coef;
    let quad = sol.coef.dot(&pc) - u_norm2;
    let resid_norm2 = (problem.ip.myy() - 2.0 * sol.coef.dot(&sol.rhs) + quad).max(0.0);
    let sigma2_hat = (resid_norm2 + u_norm2) / (problem.n() - k) as f64;
    Effects {
        b_hat,
        u_hat,
        resid_norm2,
        sigma2_hat,
    }
}

/// Converged (or current) estimates for a parameter set.
#[derive(Debug, Clone)]
pub struct RemlState {
    pub thetas: ThetaSet,
    pub b_hat: DVector<f64>,
    pub u_hat: Vec<Option<DVector<f64>>>,
    pub sigma2_hat: f64,
    pub loglik: f64,
    pub resid_norm2: f64,
    pub solution: Solution,
}

impl RemlState {
    pub fn evaluate(problem: &RemlProblem, thetas: ThetaSet) -> Result<Self> {
        let solution = full_solve(problem, &thetas)?;
        let eff = effects_from(problem, &solution);
        Ok(Self {
            thetas,
            b_hat: eff.b_hat,
            u_hat: eff.u_hat,
            sigma2_hat: eff.sigma2_hat,
            loglik: solution.loglik,
            resid_norm2: eff.resid_norm2,
            solution,
        })
    }

    /// `V_b u_b` for an active block.
    pub fn scaled_effect(&self, problem: &RemlProblem, b: usize) -> Option<DVector<f64>> {
        let theta = self.thetas[b].as_ref()?;
        let u = self.u_hat[b].as_ref()?;
        Some(problem.blocks[b].v_diag(theta).component_mul(u))
    }
}

/// Random instances shared by tests and the acceptance suite.
#[cfg(any(test, feature = "testutil"))]
#[doc(hidden)]
pub mod testutil {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    /// Random data plus designs; block kinds cycle spatial, non-spatial, group.
    pub struct Instance {
        pub y: DVector<f64>,
        pub x: DMatrix<f64>,
        pub designs: Vec<DMatrix<f64>>,
        pub problem: RemlProblem,
        pub thetas: ThetaSet,
    }

    pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
        StandardNormal.sample(rng)
    }

    pub fn instance(n: usize, n_blocks: usize, seed: u64) -> Instance {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = 1 + n_blocks;
        let x = DMatrix::from_fn(n, k, |_, j| if j == 0 { 1.0 } else { normal(&mut rng) });
        let mut designs = Vec::new();
        let mut blocks = Vec::new();
        let mut thetas = Vec::new();
        for b in 0..n_blocks {
            let len = 3 + (b * 2) % 5;
            let z = DMatrix::from_fn(n, len, |_, _| normal(&mut rng));
            let design = crate::terms::hadamard_columns(&x.column(1 + b % (k - 1)).into_owned(), &z);
            designs.push(design);
            let tau = (rng.random_range(-3.0..2.0f64)).exp();
            match b % 3 {
                0 => {
                    let mut lambda: Vec<f64> = (0..len).map(|_| rng.random_range(0.01..1.0)).collect();
                    lambda.sort_by(|a, b| b.partial_cmp(a).unwrap());
                    lambda[0] = 1.0;
                    blocks.push(RandomBlock::spatial(b, DVector::from_vec(lambda)));
                    let alpha = rng.random_range(ALPHA_MIN..ALPHA_MAX);
                    thetas.push(Some(BlockTheta::Spatial { tau, alpha }));
                }
                1 => {
                    blocks.push(RandomBlock::nonspatial(b, len));
                    thetas.push(Some(BlockTheta::Scale { tau }));
                }
                _ => {
                    blocks.push(RandomBlock::group(b, len));
                    thetas.push(Some(BlockTheta::Scale { tau }));
                }
            }
        }
        let beta = DVector::from_fn(k, |_, _| normal(&mut rng));
        let mut y = &x * beta;
        for d in &designs {
            let u = DVector::from_fn(d.ncols(), |_, _| 0.5 * normal(&mut rng));
            y += d * u;
        }
        for v in y.iter_mut() {
            *v += normal(&mut rng);
        }
        let ip = precompute(&y, &x, &designs).unwrap();
        let problem = RemlProblem::new(ip, blocks).unwrap();
        Instance {
            y,
            x,
            designs,
            problem,
            thetas,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::testutil::*;
    use super::*;
    use approx::assert_abs_diff_eq;

    fn ols_reml(y: &DVector<f64>, x: &DMatrix<f64>) -> (f64, DVector<f64>) {
        let n = y.len();
        let k = x.ncols();
        let xtx = x.transpose() * x;
        let b = xtx.clone().lu().solve(&(x.transpose() * y)).unwrap();
        let rss = (y - x * &b).norm_squared();
        let logdet = xtx.determinant().ln();
        let dof = (n - k) as f64;
        let ll = -0.5 * logdet - 0.5 * dof * (1.0 + (2.0 * std::f64::consts::PI * rss / dof).ln());
        (ll, b)
    }

    #[test]
    fn zero_variance_reduces_to_ols() {
        let inst = instance(60, 3, 1);
        let (ll, b) = ols_reml(&inst.y, &inst.x);
        let thetas = inst.problem.empty_thetas();
        let eff = solve_effects(&inst.problem, &thetas).unwrap();
        assert_abs_diff_eq!(loglik_fast(&inst.problem, &thetas).unwrap(), ll, epsilon = 1e-10);
        assert_abs_diff_eq!(eff.b_hat, b, epsilon = 1e-10);
        // zero tau is the same model as an inactive block
        let zeros: ThetaSet = inst
            .thetas
            .iter()
            .map(|t| {
                t.map(|t| match t {
                    BlockTheta::Spatial { alpha, .. } => BlockTheta::Spatial { tau: 0.0, alpha },
                    BlockTheta::Scale { .. } => BlockTheta::Scale { tau: 0.0 },
                })
            })
            .collect();
        let sol = full_solve(&inst.problem, &zeros).unwrap();
        assert_abs_diff_eq!(sol.loglik, ll, epsilon = 1e-10);
        let eff = solve_effects(&inst.problem, &zeros).unwrap();
        for u in eff.u_hat.iter().flatten() {
            assert!(u.amax() < 1e-14);
        }
    }

    #[test]
    fn noise_free_fixed_effects_are_exact() {
        let inst = instance(40, 1, 2);
        let b = DVector::from_vec(vec![0.5, -1.5]);
        let y = &inst.x * &b;
        let ip = precompute(&y, &inst.x, &inst.designs).unwrap();
        let problem = RemlProblem::new(ip, inst.problem.blocks().to_vec()).unwrap();
        // d = 0 makes the likelihood degenerate; the coefficients are still exact.
        let layout = Layout::new(&problem, &problem.empty_thetas(), None);
        let (p, r) = layout.assemble(problem.inner());
        let coef = SpdFactor::new(p).unwrap().solve(&r);
        assert_abs_diff_eq!(coef, b, epsilon = 1e-12);
        let resid = problem.inner().myy() - coef.dot(&r);
        assert!(resid.abs() < 1e-12 * y.norm_squared());
        assert!(matches!(
            full_solve(&problem, &problem.empty_thetas()),
            Err(Error::Numerical { .. })
        ));
    }

    #[test]
    fn doubling_y_doubles_coefficients() {
        let inst = instance(50, 2, 3);
        let e1 = solve_effects(&inst.problem, &inst.thetas).unwrap();
        let y2 = &inst.y * 2.0;
        let ip = precompute(&y2, &inst.x, &inst.designs).unwrap();
        let p2 = RemlProblem::new(ip, inst.problem.blocks().to_vec()).unwrap();
        let e2 = solve_effects(&p2, &inst.thetas).unwrap();
        assert_abs_diff_eq!(e2.b_hat, &e1.b_hat * 2.0, epsilon = 1e-9);
        for (a, b) in e1.u_hat.iter().zip(&e2.u_hat) {
            assert_abs_diff_eq!(b.clone().unwrap(), a.clone().unwrap() * 2.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn resid_norm_matches_dense_residual() {
        let inst = instance(70, 3, 4);
        let eff = solve_effects(&inst.problem, &inst.thetas).unwrap();
        let mut fitted = &inst.x * &eff.b_hat;
        for (b, design) in inst.designs.iter().enumerate() {
            let v = inst.problem.blocks()[b].v_diag(inst.thetas[b].as_ref().unwrap());
            let u = eff.u_hat[b].as_ref().unwrap();
            fitted += design * v.component_mul(u);
        }
        let dense = (&inst.y - fitted).norm_squared();
        assert_abs_diff_eq!(eff.resid_norm2, dense, epsilon = 1e-8 * dense.max(1.0));
        assert!(eff.sigma2_hat > 0.0);
    }

    #[test]
    fn saturated_fixed_effects_are_rejected() {
        let n = 3;
        let x = DMatrix::identity(n, n);
        let y = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let ip = precompute(&y, &x, &[]).unwrap();
        assert!(matches!(RemlProblem::new(ip, vec![]), Err(Error::Input(_))));
    }

    #[test]
    fn mismatched_parameters_are_rejected() {
        let inst = instance(30, 2, 5);
        let mut bad = inst.thetas.clone();
        bad[0] = Some(BlockTheta::Scale { tau: 1.0 });
        assert!(matches!(full_solve(&inst.problem, &bad), Err(Error::Parameter(_))));
    }

    #[test]
    fn block_order_does_not_change_the_likelihood() {
        let inst = instance(80, 3, 6);
        let ll = loglik_fast(&inst.problem, &inst.thetas).unwrap();
        let order = [2usize, 0, 1];
        let designs: Vec<_> = order.iter().map(|&b| inst.designs[b].clone()).collect();
        let blocks: Vec<_> = order.iter().map(|&b| inst.problem.blocks()[b].clone()).collect();
        let thetas: ThetaSet = order.iter().map(|&b| inst.thetas[b]).collect();
        let ip = precompute(&inst.y, &inst.x, &designs).unwrap();
        let permuted = RemlProblem::new(ip, blocks).unwrap();
        let ll2 = loglik_fast(&permuted, &thetas).unwrap();
        assert_abs_diff_eq!(ll, ll2, epsilon = 1e-10 * ll.abs().max(1.0));
    }
}
