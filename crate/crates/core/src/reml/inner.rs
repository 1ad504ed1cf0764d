use nalgebra::{DMatrix, DMatrixView, DVector, DVectorView};

use crate::error::{Error, Result};

/// Gram blocks of `[X | Z_1 | ... | Z_B]` and their products with `y`.
///
/// Built once; every later likelihood evaluation works on these blocks only, so
/// its cost does not depend on the sample size.
#[derive(Debug, Clone)]
pub struct InnerProducts {
    gram: DMatrix<f64>,
    wy: DVector<f64>,
    myy: f64,
    n: usize,
    k: usize,
    offsets: Vec<usize>,
    lens: Vec<usize>,
}

pub fn precompute(y: &DVector<f64>, x: &DMatrix<f64>, blocks: &[DMatrix<f64>]) -> Result<InnerProducts> {
    let n = y.len();
    let k = x.ncols();
    if k == 0 {
        return Err(Error::Input("at least one fixed-effect column is required".into()));
    }
    if x.nrows() != n {
        return Err(Error::Input(format!(
            "X has {} rows but y has {n}",
            x.nrows()
        )));
    }
    if let Some((b, m)) = blocks.iter().enumerate().find(|(_, m)| m.nrows() != n) {
        return Err(Error::Input(format!(
            "random-effect block {b} has {} rows but y has {n}",
            m.nrows()
        )));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("response contains a non-finite value".into()));
    }
    let lens: Vec<usize> = blocks.iter().map(|m| m.ncols()).collect();
    let mut offsets = Vec::with_capacity(blocks.len());
    let mut dim = k;
    for l in &lens {
        offsets.push(dim);
        dim += l;
    }
    let mut w = DMatrix::zeros(n, dim);
    w.columns_mut(0, k).copy_from(x);
    for (b, m) in blocks.iter().enumerate() {
        w.columns_mut(offsets[b], lens[b]).copy_from(m);
    }
    let wt = w.transpose();
    let mut gram = &wt * &w;
    // exact symmetry
    for j in 0..dim {
        for i in (j + 1)..dim {
            let v = 0.5 * (gram[(i, j)] + gram[(j, i)]);
            gram[(i, j)] = v;
            gram[(j, i)] = v;
        }
    }
    let wy = &wt * y;
    Ok(InnerProducts {
        gram,
        wy,
        myy: y.norm_squared(),
        n,
        k,
        offsets,
        lens,
    })
}

impl InnerProducts {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n_blocks(&self) -> usize {
        self.lens.len()
    }

    pub fn block_len(&self, b: usize) -> usize {
        self.lens[b]
    }

    pub(crate) fn block_offset(&self, b: usize) -> usize {
        self.offsets[b]
    }

    pub fn myy(&self) -> f64 {
        self.myy
    }

    /// `X'X`
    pub fn m00(&self) -> DMatrixView<'_, f64> {
        self.gram.view((0, 0), (self.k, self.k))
    }

    /// `X'Z_b`
    pub fn m0p(&self, b: usize) -> DMatrixView<'_, f64> {
        self.gram.view((0, self.offsets[b]), (self.k, self.lens[b]))
    }

    /// `Z_b'Z_c`
    pub fn mpq(&self, b: usize, c: usize) -> DMatrixView<'_, f64> {
        self.gram
            .view((self.offsets[b], self.offsets[c]), (self.lens[b], self.lens[c]))
    }

    /// `X'y`
    pub fn v0(&self) -> DVectorView<'_, f64> {
        self.wy.rows(0, self.k)
    }

    /// `Z_b'y`
    pub fn vp(&self, b: usize) -> DVectorView<'_, f64> {
        self.wy.rows(self.offsets[b], self.lens[b])
    }

    pub(crate) fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    pub(crate) fn wy(&self) -> &DVector<f64> {
        &self.wy
    }
}
