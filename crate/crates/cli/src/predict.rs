//! Same-site prediction from a saved model file.

use std::collections::HashMap;
use std::path::Path;

use crate::data::{fmt_f64, parse_cell, read_table};
use crate::error::{io_err, CliError, Result};
use crate::fit::{ModelFile, MODEL_FORMAT};

pub fn load_model(path: &Path) -> Result<ModelFile> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let m: ModelFile = serde_json::from_str(&text)?;
    if m.format != MODEL_FORMAT {
        return Err(CliError::ModelFile(format!(
            "format {} is not supported (expected {MODEL_FORMAT})",
            m.format
        )));
    }
    if m.terms.len() != m.covariates.len() + 1 || m.moran_rows.len() != m.sites.len() {
        return Err(CliError::ModelFile("inconsistent term or site tables".into()));
    }
    Ok(m)
}

/// One requested prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub site: String,
    pub value: f64,
    /// Group terms whose level was not seen in training (contributing 0).
    pub unseen: Vec<String>,
}

/// Coefficient of term `p` at a site for covariate value `x`.
fn coefficient(m: &ModelFile, p: usize, site: usize, x: f64) -> f64 {
    let t = &m.terms[p];
    let mut f = t.b;
    if let Some(vu) = &t.spatial_effect {
        f += m.moran_rows[site].iter().zip(vu).map(|(e, v)| e * v).sum::<f64>();
    }
    if let (Some(vu), Some(basis)) = (&t.nonspatial_effect, &t.nvc_basis) {
        let row = basis.evaluate(&[x]);
        f += row.row(0).iter().zip(vu).map(|(e, v)| e * v).sum::<f64>();
    }
    f
}

pub fn predict_rows(m: &ModelFile, path: &Path) -> Result<Vec<Prediction>> {
    let table = read_table(path)?;
    let c_site = table.column(&m.site_column, path)?;
    let c_cov: Vec<usize> = m
        .covariates
        .iter()
        .map(|c| table.column(c, path))
        .collect::<Result<_>>()?;
    let c_grp: Vec<Option<usize>> = m
        .groups
        .iter()
        .map(|g| {
            if g.included {
                table.column(&g.name, path).map(Some)
            } else {
                Ok(None)
            }
        })
        .collect::<Result<_>>()?;
    let site_index: HashMap<&str, usize> = m.sites.iter().enumerate().map(|(i, s)| (s.id.as_str(), i)).collect();
    let mut out = Vec::with_capacity(table.rows.len());
    for (i, rec) in table.rows.iter().enumerate() {
        let row = i + 1;
        let site_id = rec.get(c_site).map(String::as_str).unwrap_or("");
        let &site = site_index
            .get(site_id)
            .ok_or_else(|| CliError::Request(format!("row {row}: unknown site `{site_id}`")))?;
        let mut value = coefficient(m, 0, site, 1.0);
        for (k, &c) in c_cov.iter().enumerate() {
            let x = parse_cell(path, row, &m.covariates[k], rec.get(c).map_or("", |s| s))?;
            value += coefficient(m, k + 1, site, x) * x;
        }
        let mut unseen = Vec::new();
        for (g, c) in m.groups.iter().zip(&c_grp) {
            let (Some(c), Some(effects)) = (c, &g.effects) else { continue };
            let label = rec.get(*c).map(String::as_str).unwrap_or("");
            match g.levels.iter().position(|l| l == label) {
                Some(lvl) => value += effects[lvl],
                None => unseen.push(g.name.clone()),
            }
        }
        out.push(Prediction {
            site: site_id.to_string(),
            value,
            unseen,
        });
    }
    Ok(out)
}

pub fn prediction_table(preds: &[Prediction]) -> (Vec<String>, Vec<Vec<String>>) {
    let headers = ["row", "site", "prediction", "unseen_levels"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let rows = preds
        .iter()
        .enumerate()
        .map(|(i, p)| {
            vec![
                (i + 1).to_string(),
                p.site.clone(),
                fmt_f64(p.value),
                p.unseen.join(";"),
            ]
        })
        .collect();
    (headers, rows)
}
