//! Spatial proximity, Moran eigenvectors and non-spatial coefficient bases.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dense_eigen_desc, subspace_eigen_desc};

/// Default cap on the number of Moran eigenvectors.
pub const DEFAULT_L_MAX: usize = 200;
/// Eigenpairs with `lambda <= DEFAULT_EPS_EIG * lambda_1` are dropped.
pub const DEFAULT_EPS_EIG: f64 = 1e-8;
/// Default number of non-spatial basis columns.
pub const DEFAULT_NVC_SIZE: usize = 10;

/// Planar site coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteCoords {
    points: Vec<(f64, f64)>,
}

impl SiteCoords {
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self> {
        if let Some(i) = points
            .iter()
            .position(|(e, n)| !e.is_finite() || !n.is_finite())
        {
            return Err(Error::Input(format!("site {i} has a non-finite coordinate")));
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        let (a, b) = (self.points[i], self.points[j]);
        (a.0 - b.0).hypot(a.1 - b.1)
    }

    /// Largest nearest-neighbour distance; the data-mode default proximity range.
    pub fn max_nearest_neighbor_distance(&self) -> f64 {
        let n = self.len();
        (0..n)
            .map(|i| {
                (0..n)
                    .filter(|&j| j != i)
                    .map(|j| self.distance(i, j))
                    .fold(f64::INFINITY, f64::min)
            })
            .filter(|d| d.is_finite())
            .fold(0.0, f64::max)
    }
}

/// `C[i,j] = exp(-d_ij / range)` with zero diagonal.
#[derive(Debug, Clone)]
pub struct ProximityMatrix {
    entries: DMatrix<f64>,
    range: f64,
}

impl ProximityMatrix {
    /// Wraps an explicit symmetric, zero-diagonal matrix.
    pub fn from_matrix(entries: DMatrix<f64>, range: f64) -> Result<Self> {
        if !entries.is_square() {
            return Err(Error::Input("proximity matrix must be square".into()));
        }
        let n = entries.nrows();
        for i in 0..n {
            if entries[(i, i)] != 0.0 {
                return Err(Error::Input(format!("proximity diagonal entry {i} is not zero")));
            }
            for j in 0..i {
                if entries[(i, j)] != entries[(j, i)] {
                    return Err(Error::Input(format!(
                        "proximity matrix is not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(Self { entries, range })
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn into_entries(self) -> DMatrix<f64> {
        self.entries
    }

    pub fn range(&self) -> f64 {
        self.range
    }

    pub fn n(&self) -> usize {
        self.entries.nrows()
    }
}

pub fn build_proximity(coords: &SiteCoords, range: f64) -> Result<ProximityMatrix> {
    if !(range > 0.0) || !range.is_finite() {
        return Err(Error::Parameter(format!(
            "proximity range must be positive and finite, got {range}"
        )));
    }
    let n = coords.len();
    let mut c = DMatrix::zeros(n, n);
    for j in 0..n {
        for i in (j + 1)..n {
            let v = (-coords.distance(i, j) / range).exp();
            c[(i, j)] = v;
            c[(j, i)] = v;
        }
    }
    Ok(ProximityMatrix { entries: c, range })
}

/// `M C M` with `M = I - 11'/N`.
pub fn double_center(c: &ProximityMatrix) -> DMatrix<f64> {
    double_center_matrix(c.entries.clone())
}

pub(crate) fn double_center_matrix(mut m: DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    if n == 0 {
        return m;
    }
    let nf = n as f64;
    let col_means: Vec<f64> = (0..n).map(|j| m.column(j).sum() / nf).collect();
    let row_means: Vec<f64> = (0..n).map(|i| m.row(i).sum() / nf).collect();
    let grand = col_means.iter().sum::<f64>() / nf;
    for j in 0..n {
        let cm = col_means[j];
        let mut col = m.column_mut(j);
        for i in 0..n {
            col[i] += grand - row_means[i] - cm;
        }
    }
    m
}

/// Which symmetric eigensolver backs [`moran_eigen_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EigenSolver {
    /// Dense for small problems, subspace iteration once `N` is large.
    #[default]
    Auto,
    Dense,
    Subspace,
}

const DENSE_LIMIT: usize = 1500;

/// Moran eigenvectors with positive eigenvalues, sorted descending.
#[derive(Debug, Clone)]
pub struct MoranBasis {
    vectors: DMatrix<f64>,
    eigenvalues: DVector<f64>,
    l_max: usize,
}

impl MoranBasis {
    pub fn new(vectors: DMatrix<f64>, eigenvalues: DVector<f64>, l_max: usize) -> Result<Self> {
        if vectors.ncols() != eigenvalues.len() {
            return Err(Error::Basis(
                "eigenvector and eigenvalue counts differ".into(),
            ));
        }
        if eigenvalues.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::Basis("Moran eigenvalues must be positive".into()));
        }
        Ok(Self {
            vectors,
            eigenvalues,
            l_max,
        })
    }

    pub fn vectors(&self) -> &DMatrix<f64> {
        &self.vectors
    }

    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    /// Eigenvalues divided by the leading one, so the first entry is 1.
    pub fn scaled_eigenvalues(&self) -> DVector<f64> {
        match self.eigenvalues.get(0) {
            Some(&first) => &self.eigenvalues / first,
            None => DVector::zeros(0),
        }
    }

    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    /// No positive eigenvalue survived; the spatial terms have nothing to vary on.
    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    pub fn n(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn l_max(&self) -> usize {
        self.l_max
    }

    /// Expands a per-site basis to observations via a row index (panel data).
    pub fn expand_rows(&self, site_of_row: &[usize]) -> Self {
        let l = self.len();
        let vectors = DMatrix::from_fn(site_of_row.len(), l, |r, c| self.vectors[(site_of_row[r], c)]);
        Self {
            vectors,
            eigenvalues: self.eigenvalues.clone(),
            l_max: self.l_max,
        }
    }
}

pub fn moran_eigen(c: &ProximityMatrix, l_max: usize, eps_eig: f64) -> Result<MoranBasis> {
    moran_eigen_with(c, l_max, eps_eig, EigenSolver::Auto)
}

pub fn moran_eigen_with(
    c: &ProximityMatrix,
    l_max: usize,
    eps_eig: f64,
    solver: EigenSolver,
) -> Result<MoranBasis> {
    if l_max == 0 {
        return Err(Error::Parameter("l_max must be at least 1".into()));
    }
    if !(eps_eig > 0.0) {
        return Err(Error::Parameter("eps_eig must be positive".into()));
    }
    let n = c.n();
    let centered = double_center(c);
    let use_dense = match solver {
        EigenSolver::Dense => true,
        EigenSolver::Subspace => false,
        EigenSolver::Auto => n <= DENSE_LIMIT || 3 * l_max >= n,
    };
    let (values, vectors) = if use_dense {
        dense_eigen_desc(&centered)
    } else {
        // C = K - I with K a positive semidefinite kernel, so MCM >= -I.
        let res = subspace_eigen_desc(&centered, l_max, 1.0, 1e-11, 400);
        if !res.converged {
            log::warn!(
                "subspace eigensolver stopped after {} iterations, relative residual {:.3e}",
                res.iterations,
                res.max_residual
            );
        }
        (res.values, res.vectors)
    };
    drop(centered);

    let lead = values.get(0).copied().unwrap_or(0.0);
    if !(lead > 0.0) {
        log::warn!("no positive Moran eigenvalue; spatial basis is empty");
        return Ok(MoranBasis {
            vectors: DMatrix::zeros(n, 0),
            eigenvalues: DVector::zeros(0),
            l_max,
        });
    }
    let keep = values
        .iter()
        .take(l_max)
        .take_while(|&&v| v > eps_eig * lead)
        .count();
    let mut vecs = vectors.columns(0, keep).into_owned();
    // Fix the sign so the largest-magnitude entry of each column is positive.
    for mut col in vecs.column_iter_mut() {
        let imax = col.iamax();
        if col[imax] < 0.0 {
            col.neg_mut();
        }
    }
    Ok(MoranBasis {
        vectors: vecs,
        eigenvalues: values.rows(0, keep).into_owned(),
        l_max,
    })
}

pub fn row_standardize(c: &ProximityMatrix) -> Result<DMatrix<f64>> {
    let mut m = c.entries.clone();
    for i in 0..m.nrows() {
        let s = m.row(i).sum();
        if !(s > 0.0) {
            return Err(Error::Input(format!("site {i} is isolated (zero row sum)")));
        }
        m.row_mut(i).scale_mut(1.0 / s);
    }
    Ok(m)
}

/// Moran coefficient of `f` under proximity `c`.
pub fn moran_coefficient(f: &DVector<f64>, c: &ProximityMatrix) -> Result<f64> {
    let n = f.len();
    if n != c.n() {
        return Err(Error::Input(format!(
            "vector length {n} does not match proximity order {}",
            c.n()
        )));
    }
    let mean = f.mean();
    let centered = f.map(|v| v - mean);
    let denom = centered.norm_squared();
    if !(denom > 1e-24 * f.norm_squared().max(f64::MIN_POSITIVE)) || denom == 0.0 {
        return Err(Error::Diagnostic(
            "Moran coefficient undefined for a constant vector".into(),
        ));
    }
    let total = c.entries.sum();
    if total == 0.0 {
        return Err(Error::Diagnostic("proximity matrix sums to zero".into()));
    }
    let num = centered.dot(&(&c.entries * &centered));
    Ok(n as f64 / total * num / denom)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NvcKind {
    #[default]
    NaturalSpline,
    Polynomial,
}

/// How to rebuild the basis columns at arbitrary covariate values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
enum NvcRecipe {
    /// Orthogonal polynomials from the three-term recurrence.
    Polynomial { alpha: Vec<f64>, norm2: Vec<f64> },
    /// Natural cubic spline (truncated power form) on the stored knots.
    NaturalSpline,
}

/// Basis for a coefficient that varies with the covariate's own value.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NvcBasis {
    #[serde(skip, default = "empty_matrix")]
    vectors: DMatrix<f64>,
    covariate_index: usize,
    kind: NvcKind,
    knots: Vec<f64>,
    recipe: NvcRecipe,
    means: Vec<f64>,
    scales: Vec<f64>,
}

impl NvcBasis {
    pub fn vectors(&self) -> &DMatrix<f64> {
        &self.vectors
    }

    pub fn covariate_index(&self) -> usize {
        self.covariate_index
    }

    pub fn kind(&self) -> NvcKind {
        self.kind
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    pub fn with_covariate_index(mut self, index: usize) -> Self {
        self.covariate_index = index;
        self
    }

    /// Rescales every column to unit (population) standard deviation.
    pub fn standardized(mut self) -> Self {
        let n = self.vectors.nrows() as f64;
        for (j, mut col) in self.vectors.column_iter_mut().enumerate() {
            let sd = (col.norm_squared() / n).sqrt();
            if sd > 0.0 {
                col.scale_mut(1.0 / sd);
                self.scales[j] *= sd;
            }
        }
        self
    }

    /// Basis rows at new covariate values, consistent with the training columns.
    pub fn evaluate(&self, x: &[f64]) -> DMatrix<f64> {
        let raw = match &self.recipe {
            NvcRecipe::Polynomial { alpha, norm2 } => poly_eval(x, alpha, norm2),
            NvcRecipe::NaturalSpline => spline_eval(x, &self.knots),
        };
        DMatrix::from_fn(x.len(), self.len(), |i, j| {
            (raw[(i, j)] - self.means[j]) / self.scales[j]
        })
    }
}

fn empty_matrix() -> DMatrix<f64> {
    DMatrix::zeros(0, 0)
}

pub fn nvc_basis(x: &DVector<f64>, l_n: usize, kind: NvcKind) -> Result<NvcBasis> {
    if l_n == 0 {
        return Err(Error::Parameter("non-spatial basis size must be at least 1".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("covariate contains a non-finite value".into()));
    }
    let mut sorted: Vec<f64> = x.iter().copied().collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    sorted.dedup();
    let distinct = sorted.len();
    if distinct < 2 {
        return Err(Error::Basis(
            "covariate is constant; a non-spatially varying coefficient is undefined".into(),
        ));
    }
    let xs: Vec<f64> = x.iter().copied().collect();
    let (raw, recipe, knots) = match kind {
        NvcKind::Polynomial => {
            if distinct < l_n + 1 {
                return Err(Error::Basis(format!(
                    "degree-{l_n} polynomial basis needs {} distinct values, got {distinct}",
                    l_n + 1
                )));
            }
            let (alpha, norm2) = poly_fit(&xs, l_n)?;
            let raw = poly_eval(&xs, &alpha, &norm2);
            (raw, NvcRecipe::Polynomial { alpha, norm2 }, Vec::new())
        }
        NvcKind::NaturalSpline => {
            if distinct < l_n + 2 {
                return Err(Error::Basis(format!(
                    "natural spline with {l_n} columns needs {} distinct values, got {distinct}",
                    l_n + 2
                )));
            }
            let knots = quantile_knots(&xs, l_n + 1)?;
            let raw = spline_eval(&xs, &knots);
            (raw, NvcRecipe::NaturalSpline, knots)
        }
    };
    let n = raw.nrows() as f64;
    let means: Vec<f64> = raw.column_iter().map(|c| c.sum() / n).collect();
    let mut vectors = raw;
    for (j, mut col) in vectors.column_iter_mut().enumerate() {
        col.add_scalar_mut(-means[j]);
        if col.amax() <= 1e-12 * (1.0 + means[j].abs()) {
            return Err(Error::Basis(format!("basis column {j} is constant")));
        }
    }
    Ok(NvcBasis {
        vectors,
        covariate_index: 0,
        kind,
        knots,
        recipe,
        means,
        scales: vec![1.0; l_n],
    })
}

fn poly_fit(x: &[f64], degree: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = x.len();
    let mut alpha = Vec::with_capacity(degree);
    // norm2[0] = 1 by convention, norm2[1] = n, norm2[k+1] = ||Z_k||^2.
    let mut norm2 = vec![1.0, n as f64];
    let mut prev = vec![0.0; n];
    let mut cur = vec![1.0; n];
    for k in 0..degree {
        let nk = norm2[k + 1];
        let a = x.iter().zip(&cur).map(|(xi, zi)| xi * zi * zi).sum::<f64>() / nk;
        alpha.push(a);
        let ratio = nk / norm2[k];
        let next: Vec<f64> = (0..n)
            .map(|i| (x[i] - a) * cur[i] - if k == 0 { 0.0 } else { ratio * prev[i] })
            .collect();
        let nn = next.iter().map(|v| v * v).sum::<f64>();
        if !(nn > 1e-20 * nk) {
            return Err(Error::Basis(format!(
                "orthogonal polynomial degree {} is degenerate",
                k + 1
            )));
        }
        norm2.push(nn);
        prev = cur;
        cur = next;
    }
    Ok((alpha, norm2))
}

fn poly_eval(x: &[f64], alpha: &[f64], norm2: &[f64]) -> DMatrix<f64> {
    let degree = alpha.len();
    let mut out = DMatrix::zeros(x.len(), degree);
    for (i, &xi) in x.iter().enumerate() {
        let mut prev = 0.0;
        let mut cur = 1.0;
        for k in 0..degree {
            let next = (xi - alpha[k]) * cur
                - if k == 0 {
                    0.0
                } else {
                    norm2[k + 1] / norm2[k] * prev
                };
            out[(i, k)] = next;
            prev = cur;
            cur = next;
        }
    }
    out
}

/// `count` knots at equally spaced sample quantiles, endpoints included.
fn quantile_knots(x: &[f64], count: usize) -> Result<Vec<f64>> {
    let mut sorted = x.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let n = sorted.len();
    let knots: Vec<f64> = (0..count)
        .map(|k| {
            let pos = k as f64 / (count - 1) as f64 * (n - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            let w = pos - lo as f64;
            sorted[lo] * (1.0 - w) + sorted[hi] * w
        })
        .collect();
    if knots.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Basis(
            "quantile knots are not distinct; too many ties in the covariate".into(),
        ));
    }
    Ok(knots)
}

/// Natural cubic spline columns `x, N_3, ..., N_K` for knots `k_1 < ... < k_K`.
fn spline_eval(x: &[f64], knots: &[f64]) -> DMatrix<f64> {
    let kk = knots.len();
    let last = knots[kk - 1];
    let d = |xi: f64, k: usize| -> f64 {
        let a = (xi - knots[k]).max(0.0).powi(3);
        let b = (xi - last).max(0.0).powi(3);
        (a - b) / (last - knots[k])
    };
    DMatrix::from_fn(x.len(), kk - 1, |i, j| {
        let xi = x[i];
        if j == 0 {
            xi
        } else {
            d(xi, j - 1) - d(xi, kk - 2)
        }
    })
}
