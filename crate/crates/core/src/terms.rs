//! Coefficient types, their variance structures and random-effect designs.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::{MoranBasis, NvcBasis};
use crate::error::{Error, Result};

pub const ALPHA_MIN: f64 = 0.25;
pub const ALPHA_MAX: f64 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EffectType {
    Constant,
    Svc,
    Nvc,
    Snvc,
}

impl EffectType {
    pub const ALL: [EffectType; 4] = [
        EffectType::Constant,
        EffectType::Svc,
        EffectType::Nvc,
        EffectType::Snvc,
    ];

    pub fn from_parts(spatial: bool, nonspatial: bool) -> Self {
        match (spatial, nonspatial) {
            (false, false) => EffectType::Constant,
            (true, false) => EffectType::Svc,
            (false, true) => EffectType::Nvc,
            (true, true) => EffectType::Snvc,
        }
    }

    pub fn has_spatial(self) -> bool {
        matches!(self, EffectType::Svc | EffectType::Snvc)
    }

    pub fn has_nonspatial(self) -> bool {
        matches!(self, EffectType::Nvc | EffectType::Snvc)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EffectType::Constant => "constant",
            EffectType::Svc => "svc",
            EffectType::Nvc => "nvc",
            EffectType::Snvc => "snvc",
        }
    }
}

impl fmt::Display for EffectType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EffectType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "constant" => Ok(EffectType::Constant),
            "svc" => Ok(EffectType::Svc),
            "nvc" => Ok(EffectType::Nvc),
            "snvc" | "s&nvc" => Ok(EffectType::Snvc),
            other => Err(Error::Spec(format!("unknown coefficient type `{other}`"))),
        }
    }
}

/// One covariate's coefficient specification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermSpec {
    pub covariate_index: usize,
    candidate_types: Vec<EffectType>,
    pub current_type: EffectType,
    pub is_intercept: bool,
}

impl TermSpec {
    /// `Constant` is always added to the candidates; it is also the initial type.
    pub fn new(
        covariate_index: usize,
        candidates: &[EffectType],
        is_intercept: bool,
    ) -> Result<Self> {
        let mut candidate_types: Vec<EffectType> = candidates.to_vec();
        candidate_types.push(EffectType::Constant);
        candidate_types.sort();
        candidate_types.dedup();
        if is_intercept && candidate_types.iter().any(|t| t.has_nonspatial()) {
            return Err(Error::Spec(
                "the intercept has no non-spatial basis; nvc/snvc are not allowed".into(),
            ));
        }
        Ok(Self {
            covariate_index,
            candidate_types,
            current_type: EffectType::Constant,
            is_intercept,
        })
    }

    pub fn intercept(candidates: &[EffectType]) -> Result<Self> {
        Self::new(0, candidates, true)
    }

    pub fn candidate_types(&self) -> &[EffectType] {
        &self.candidate_types
    }

    pub fn allows(&self, ty: EffectType) -> bool {
        self.candidate_types.contains(&ty)
    }

    pub fn wants_spatial(&self) -> bool {
        self.candidate_types.iter().any(|t| t.has_spatial())
    }

    pub fn wants_nonspatial(&self) -> bool {
        self.candidate_types.iter().any(|t| t.has_nonspatial())
    }

    pub fn with_type(mut self, ty: EffectType) -> Result<Self> {
        if !self.allows(ty) {
            return Err(Error::Spec(format!(
                "type {ty} is not among the candidates for covariate {}",
                self.covariate_index
            )));
        }
        self.current_type = ty;
        Ok(self)
    }
}

/// A random intercept over a categorical grouping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupTermSpec {
    pub name: String,
    membership: Vec<usize>,
    levels: Vec<String>,
    pub included: bool,
}

impl GroupTermSpec {
    /// Levels are numbered in order of first appearance.
    pub fn from_labels<S: AsRef<str>>(name: impl Into<String>, labels: &[S]) -> Result<Self> {
        let mut levels: Vec<String> = Vec::new();
        let mut membership = Vec::with_capacity(labels.len());
        for label in labels {
            let label = label.as_ref();
            let idx = match levels.iter().position(|l| l == label) {
                Some(i) => i,
                None => {
                    levels.push(label.to_string());
                    levels.len() - 1
                }
            };
            membership.push(idx);
        }
        if levels.is_empty() {
            return Err(Error::Spec("group term has no levels".into()));
        }
        Ok(Self {
            name: name.into(),
            membership,
            levels,
            included: false,
        })
    }

    pub fn membership(&self) -> &[usize] {
        &self.membership
    }

    pub fn levels(&self) -> &[String] {
        &self.levels
    }

    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn level_index(&self, label: &str) -> Option<usize> {
        self.levels.iter().position(|l| l == label)
    }

    pub fn indicator(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.membership.len(), self.levels.len());
        for (i, &g) in self.membership.iter().enumerate() {
            m[(i, g)] = 1.0;
        }
        m
    }
}

/// Variance parameters of one term, expressed as ratios to the noise scale.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VarianceParams {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau_s_over_sigma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau_n_over_sigma: Option<f64>,
}

impl VarianceParams {
    pub fn spatial(tau: f64, alpha: f64) -> Self {
        Self {
            tau_s_over_sigma: Some(tau),
            alpha: Some(alpha),
            tau_n_over_sigma: None,
        }
    }

    pub fn nonspatial(tau: f64) -> Self {
        Self {
            tau_n_over_sigma: Some(tau),
            ..Self::default()
        }
    }

    pub fn both(tau_s: f64, alpha: f64, tau_n: f64) -> Self {
        Self {
            tau_s_over_sigma: Some(tau_s),
            alpha: Some(alpha),
            tau_n_over_sigma: Some(tau_n),
        }
    }
}

/// `(tau_s) * lambda_l^alpha` on scaled eigenvalues.
pub fn spatial_diag(tau: f64, alpha: f64, scaled_eigenvalues: &DVector<f64>) -> DVector<f64> {
    scaled_eigenvalues.map(|l| tau * l.powf(alpha))
}

/// Diagonal of `V_p(theta_p)` for one term.
pub fn v_diag(
    ty: EffectType,
    params: &VarianceParams,
    scaled_eigenvalues: Option<&DVector<f64>>,
    l_n: Option<usize>,
) -> Result<DVector<f64>> {
    let mut out = Vec::new();
    if ty.has_spatial() {
        let lambda = scaled_eigenvalues
            .ok_or_else(|| Error::Parameter(format!("{ty} needs Moran eigenvalues")))?;
        let tau = params
            .tau_s_over_sigma
            .ok_or_else(|| Error::Parameter(format!("{ty} needs tau_s/sigma")))?;
        let alpha = params
            .alpha
            .ok_or_else(|| Error::Parameter(format!("{ty} needs alpha")))?;
        check_nonneg("tau_s/sigma", tau)?;
        if !(alpha > 0.0) {
            return Err(Error::Parameter(format!("alpha must be positive, got {alpha}")));
        }
        out.extend(spatial_diag(tau, alpha, lambda).iter());
    }
    if ty.has_nonspatial() {
        let l_n = l_n.ok_or_else(|| Error::Parameter(format!("{ty} needs the basis size")))?;
        let tau = params
            .tau_n_over_sigma
            .ok_or_else(|| Error::Parameter(format!("{ty} needs tau_n/sigma")))?;
        check_nonneg("tau_n/sigma", tau)?;
        out.extend(std::iter::repeat(tau).take(l_n));
    }
    Ok(DVector::from_vec(out))
}

fn check_nonneg(name: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Parameter(format!("{name} must be finite and >= 0, got {v}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Spatial,
    NonSpatial,
    Group,
}

/// Random-effect design of a term: `x ∘ basis` per column block.
#[derive(Debug, Clone)]
pub struct TermDesign {
    pub columns: DMatrix<f64>,
    pub blocks: Vec<(BlockKind, Range<usize>)>,
}

impl TermDesign {
    pub fn width(&self) -> usize {
        self.columns.ncols()
    }

    pub fn block(&self, kind: BlockKind) -> Option<DMatrix<f64>> {
        self.blocks
            .iter()
            .find(|(k, _)| *k == kind)
            .map(|(_, r)| self.columns.columns(r.start, r.len()).into_owned())
    }
}

/// Multiplies `x` element-wise into every column of `basis`.
pub fn hadamard_columns(x: &DVector<f64>, basis: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = basis.clone();
    for mut col in out.column_iter_mut() {
        col.component_mul_assign(x);
    }
    out
}

pub fn term_design(
    x: &DVector<f64>,
    ty: EffectType,
    moran: &MoranBasis,
    nvc: Option<&NvcBasis>,
) -> Result<TermDesign> {
    let n = x.len();
    let mut parts: Vec<(BlockKind, DMatrix<f64>)> = Vec::new();
    if ty.has_spatial() {
        if moran.n() != n {
            return Err(Error::Input(format!(
                "Moran basis has {} rows, covariate has {n}",
                moran.n()
            )));
        }
        parts.push((BlockKind::Spatial, hadamard_columns(x, moran.vectors())));
    }
    if ty.has_nonspatial() {
        let nvc = nvc.ok_or_else(|| {
            Error::Spec(format!("{ty} requested but no non-spatial basis was supplied"))
        })?;
        if nvc.vectors().nrows() != n {
            return Err(Error::Input(format!(
                "non-spatial basis has {} rows, covariate has {n}",
                nvc.vectors().nrows()
            )));
        }
        parts.push((BlockKind::NonSpatial, hadamard_columns(x, nvc.vectors())));
    }
    let width: usize = parts.iter().map(|(_, m)| m.ncols()).sum();
    let mut columns = DMatrix::zeros(n, width);
    let mut blocks = Vec::new();
    let mut at = 0;
    for (kind, m) in parts {
        columns.columns_mut(at, m.ncols()).copy_from(&m);
        blocks.push((kind, at..at + m.ncols()));
        at += m.ncols();
    }
    Ok(TermDesign { columns, blocks })
}

pub fn group_design(group: &GroupTermSpec) -> TermDesign {
    let columns = group.indicator();
    let w = columns.ncols();
    TermDesign {
        columns,
        blocks: vec![(BlockKind::Group, 0..w)],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{build_proximity, moran_eigen, nvc_basis, NvcKind, SiteCoords};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn small_moran() -> MoranBasis {
        let coords = SiteCoords::new(vec![
            (0.0, 0.0),
            (1.0, 0.2),
            (0.3, 1.1),
            (2.0, 2.0),
            (1.5, 0.4),
            (0.1, 2.2),
        ])
        .unwrap();
        moran_eigen(&build_proximity(&coords, 1.0).unwrap(), 10, 1e-8).unwrap()
    }

    #[test]
    fn constant_has_empty_variance() {
        let d = v_diag(EffectType::Constant, &VarianceParams::default(), None, None).unwrap();
        assert_eq!(d.len(), 0);
    }

    #[test]
    fn svc_with_unit_alpha() {
        let lambda = DVector::from_vec(vec![1.0, 0.5]);
        let d = v_diag(
            EffectType::Svc,
            &VarianceParams::spatial(1.0, 1.0),
            Some(&lambda),
            None,
        )
        .unwrap();
        assert_eq!(d.as_slice(), &[1.0, 0.5]);
    }

    #[test]
    fn nvc_is_scaled_identity() {
        let d = v_diag(EffectType::Nvc, &VarianceParams::nonspatial(0.5), None, Some(3)).unwrap();
        assert_eq!(d.as_slice(), &[0.5, 0.5, 0.5]);
    }

    #[test]
    fn snvc_concatenates_blocks() {
        let lambda = DVector::from_vec(vec![1.0, 0.25]);
        let d = v_diag(
            EffectType::Snvc,
            &VarianceParams::both(2.0, 0.5, 0.3),
            Some(&lambda),
            Some(2),
        )
        .unwrap();
        assert_abs_diff_eq!(d, DVector::from_vec(vec![2.0, 1.0, 0.3, 0.3]), epsilon = 1e-15);
    }

    #[test]
    fn missing_parameters_are_reported() {
        assert!(matches!(
            v_diag(EffectType::Svc, &VarianceParams::spatial(1.0, 1.0), None, None),
            Err(Error::Parameter(_))
        ));
        assert!(matches!(
            v_diag(EffectType::Nvc, &VarianceParams::default(), None, Some(2)),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn intercept_rejects_nonspatial_types() {
        assert!(TermSpec::intercept(&[EffectType::Svc]).is_ok());
        assert!(matches!(
            TermSpec::intercept(&[EffectType::Nvc]),
            Err(Error::Spec(_))
        ));
        let t = TermSpec::new(2, &[EffectType::Svc], false).unwrap();
        assert!(t.allows(EffectType::Constant));
        assert_eq!(t.current_type, EffectType::Constant);
    }

    #[test]
    fn intercept_svc_design_is_the_basis() {
        let moran = small_moran();
        let ones = DVector::from_element(moran.n(), 1.0);
        let d = term_design(&ones, EffectType::Svc, &moran, None).unwrap();
        assert_eq!(&d.columns, moran.vectors());
    }

    #[test]
    fn constant_design_has_no_columns() {
        let moran = small_moran();
        let x = DVector::from_fn(moran.n(), |i, _| i as f64);
        let d = term_design(&x, EffectType::Constant, &moran, None).unwrap();
        assert_eq!(d.width(), 0);
    }

    #[test]
    fn design_matches_elementwise_loop() {
        let moran = small_moran();
        let x = DVector::from_vec(vec![0.3, -1.2, 2.0, 0.7, -0.1, 1.4]);
        let nvc = nvc_basis(&x, 3, NvcKind::Polynomial).unwrap();
        let d = term_design(&x, EffectType::Snvc, &moran, Some(&nvc)).unwrap();
        assert_eq!(d.width(), moran.len() + 3);
        for i in 0..6 {
            for j in 0..moran.len() {
                assert_eq!(d.columns[(i, j)], x[i] * moran.vectors()[(i, j)]);
            }
            for j in 0..3 {
                assert_eq!(d.columns[(i, moran.len() + j)], x[i] * nvc.vectors()[(i, j)]);
            }
        }
        assert!(matches!(
            term_design(&x, EffectType::Nvc, &moran, None),
            Err(Error::Spec(_))
        ));
    }

    #[test]
    fn group_indicator_counts_members() {
        let g = GroupTermSpec::from_labels("q", &["a", "b", "a", "c", "a"]).unwrap();
        assert_eq!(g.n_levels(), 3);
        let m = g.indicator();
        let sums: Vec<f64> = m.column_iter().map(|c| c.sum()).collect();
        assert_eq!(sums, vec![3.0, 1.0, 1.0]);
    }

    proptest! {
        #[test]
        fn svc_variance_is_monotone(
            tau in 0.0f64..10.0,
            tau2 in 0.0f64..10.0,
            alpha in 0.25f64..8.0,
            mut tail in proptest::collection::vec(1e-6f64..1.0, 1..12),
        ) {
            tail.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let mut lambda = vec![1.0];
            lambda.extend(tail);
            let lambda = DVector::from_vec(lambda);
            let d = v_diag(EffectType::Svc, &VarianceParams::spatial(tau, alpha), Some(&lambda), None).unwrap();
            prop_assert!(d.iter().all(|&v| v >= 0.0));
            for w in d.as_slice().windows(2) {
                prop_assert!(w[1] <= w[0]);
            }
            if tau == 0.0 {
                prop_assert!(d.iter().all(|&v| v == 0.0));
            }
            let (lo, hi) = if tau <= tau2 { (tau, tau2) } else { (tau2, tau) };
            let dl = v_diag(EffectType::Svc, &VarianceParams::spatial(lo, alpha), Some(&lambda), None).unwrap();
            let dh = v_diag(EffectType::Svc, &VarianceParams::spatial(hi, alpha), Some(&lambda), None).unwrap();
            for (a, b) in dl.iter().zip(dh.iter()) {
                prop_assert!(a <= b);
            }
        }
    }
}
