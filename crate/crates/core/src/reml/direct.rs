//! Restricted likelihood computed from the raw data, without inner products.

use nalgebra::{DMatrix, DVector};

use super::{restricted_loglik, RandomBlock, ThetaSet};
use crate::error::{Error, Result};

/// Dense mixed-model solution on the `N`-row data.
#[derive(Debug, Clone)]
pub struct DirectFit {
    pub loglik: f64,
    pub log_det: f64,
    pub b_hat: DVector<f64>,
    pub u_hat: Vec<Option<DVector<f64>>>,
    pub resid_norm2: f64,
}

/// Builds `A = [X | Z_b V_b ...]`, solves the augmented least-squares system
/// `(A'A + J) c = A'y` by LU and evaluates the likelihood from the explicit
/// residual vector.
pub fn loglik_direct(
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    designs: &[DMatrix<f64>],
    blocks: &[RandomBlock],
    thetas: &ThetaSet,
) -> Result<DirectFit> {
    let n = y.len();
    let k = x.ncols();
    if designs.len() != blocks.len() || thetas.len() != blocks.len() {
        return Err(Error::Input("designs, blocks and parameters differ in length".into()));
    }
    if n <= k {
        return Err(Error::Input("need more observations than fixed effects".into()));
    }
    let mut cols: Vec<DMatrix<f64>> = vec![x.clone()];
    let mut segs = Vec::new();
    let mut width = k;
    for (b, theta) in thetas.iter().enumerate() {
        let Some(theta) = theta else { continue };
        let v = blocks[b].v_diag(theta);
        let mut zv = designs[b].clone();
        for (j, mut c) in zv.column_iter_mut().enumerate() {
            c *= v[j];
        }
        segs.push((b, width, v.len()));
        width += v.len();
        cols.push(zv);
    }
    let mut a = DMatrix::zeros(n, width);
    let mut at = 0;
    for c in &cols {
        a.view_mut((0, at), (n, c.ncols())).copy_from(c);
        at += c.ncols();
    }
    let mut p = a.transpose() * &a;
    for i in k..width {
        p[(i, i)] += 1.0;
    }
    let rhs = a.transpose() * y;
    let lu = p.clone().lu();
    let coef = lu
        .solve(&rhs)
        .ok_or_else(|| Error::numerical("singular mixed-model system", f64::INFINITY))?;
    let det = lu.determinant();
    if !(det > 0.0) {
        return Err(Error::numerical("mixed-model system has non-positive determinant", f64::INFINITY));
    }
    let resid = y - &a * &coef;
    let resid_norm2 = resid.norm_squared();
    let u_norm2 = coef.rows(k, width - k).norm_squared();
    let log_det = det.ln();
    let mut u_hat = vec![None; blocks.len()];
    for (b, start, len) in segs {
        u_hat[b] = Some(coef.rows(start, len).into_owned());
    }
    Ok(DirectFit {
        loglik: restricted_loglik(log_det, resid_norm2 + u_norm2, n, k),
        log_det,
        b_hat: coef.rows(0, k).into_owned(),
        u_hat,
        resid_norm2,
    })
}
