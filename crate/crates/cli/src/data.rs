//! CSV ingestion and export.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{io_err, CliError, Result};

/// Column names of the input file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schema {
    pub site: String,
    pub east: String,
    pub north: String,
    pub response: String,
    pub covariates: Vec<String>,
    #[serde(default)]
    pub groups: Vec<String>,
    #[serde(default)]
    pub period: Option<String>,
}

/// Validated observations in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub site_ids: Vec<String>,
    pub east: Vec<f64>,
    pub north: Vec<f64>,
    pub y: Vec<f64>,
    pub covariate_names: Vec<String>,
    /// One vector per covariate.
    pub covariates: Vec<Vec<f64>>,
    /// `(name, label per row)` for each group column.
    pub groups: Vec<(String, Vec<String>)>,
    pub periods: Option<Vec<String>>,
}

/// Distinct sites in order of first appearance.
#[derive(Debug, Clone, PartialEq)]
pub struct Sites {
    pub ids: Vec<String>,
    pub coords: Vec<(f64, f64)>,
    pub site_of_row: Vec<usize>,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn sites(&self) -> Sites {
        let mut index: HashMap<&str, usize> = HashMap::new();
        let mut ids = Vec::new();
        let mut coords = Vec::new();
        let mut site_of_row = Vec::with_capacity(self.n());
        for (i, id) in self.site_ids.iter().enumerate() {
            let s = *index.entry(id.as_str()).or_insert_with(|| {
                ids.push(id.clone());
                coords.push((self.east[i], self.north[i]));
                ids.len() - 1
            });
            site_of_row.push(s);
        }
        Sites {
            ids,
            coords,
            site_of_row,
        }
    }
}

/// Header and raw cells of a CSV file.
#[derive(Debug, Clone)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn column(&self, name: &str, path: &Path) -> Result<usize> {
        self.headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::Csv {
                path: path.to_path_buf(),
                message: format!("missing column `{name}`"),
            })
    }
}

pub fn read_table(path: &Path) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let headers: Vec<String> = rdr
        .headers()
        .map_err(|e| csv_err(path, e))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        rows.push(rec.iter().map(|c| c.trim().to_string()).collect());
    }
    Ok(Table { headers, rows })
}

fn csv_err(path: &Path, e: csv::Error) -> CliError {
    CliError::Csv {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Parses a finite number; `row` is 1-based and counts data rows only.
pub fn parse_cell(path: &Path, row: usize, column: &str, cell: &str) -> Result<f64> {
    let fail = |message: String| CliError::Cell {
        path: path.to_path_buf(),
        row,
        column: column.to_string(),
        message,
    };
    if cell.is_empty() {
        return Err(fail("missing value".into()));
    }
    let v: f64 = cell
        .parse()
        .map_err(|_| fail(format!("`{cell}` is not a number")))?;
    if !v.is_finite() {
        return Err(fail(format!("`{cell}` is not finite")));
    }
    Ok(v)
}

pub fn ingest_csv(path: &Path, schema: &Schema) -> Result<Dataset> {
    if schema.covariates.is_empty() {
        return Err(CliError::Config("at least one covariate column is required".into()));
    }
    let table = read_table(path)?;
    let col = |name: &str| table.column(name, path);
    let c_site = col(&schema.site)?;
    let c_east = col(&schema.east)?;
    let c_north = col(&schema.north)?;
    let c_y = col(&schema.response)?;
    let c_cov: Vec<usize> = schema.covariates.iter().map(|c| col(c)).collect::<Result<_>>()?;
    let c_grp: Vec<usize> = schema.groups.iter().map(|c| col(c)).collect::<Result<_>>()?;
    let c_per = schema.period.as_deref().map(col).transpose()?;

    let n = table.rows.len();
    if n == 0 {
        return Err(CliError::Csv {
            path: path.to_path_buf(),
            message: "no data rows".into(),
        });
    }
    let mut ds = Dataset {
        site_ids: Vec::with_capacity(n),
        east: Vec::with_capacity(n),
        north: Vec::with_capacity(n),
        y: Vec::with_capacity(n),
        covariate_names: schema.covariates.clone(),
        covariates: vec![Vec::with_capacity(n); c_cov.len()],
        groups: schema.groups.iter().map(|g| (g.clone(), Vec::with_capacity(n))).collect(),
        periods: c_per.map(|_| Vec::with_capacity(n)),
    };
    let mut seen: HashMap<(String, String), usize> = HashMap::new();
    let mut coords: HashMap<String, (f64, f64)> = HashMap::new();
    for (i, rec) in table.rows.iter().enumerate() {
        let row = i + 1;
        let text = |c: usize, name: &str| -> Result<&str> {
            let cell = rec.get(c).map(String::as_str).unwrap_or("");
            if cell.is_empty() {
                return Err(CliError::Cell {
                    path: path.to_path_buf(),
                    row,
                    column: name.to_string(),
                    message: "missing value".into(),
                });
            }
            Ok(cell)
        };
        let site = text(c_site, &schema.site)?.to_string();
        let east = parse_cell(path, row, &schema.east, rec.get(c_east).map_or("", |s| s))?;
        let north = parse_cell(path, row, &schema.north, rec.get(c_north).map_or("", |s| s))?;
        let y = parse_cell(path, row, &schema.response, rec.get(c_y).map_or("", |s| s))?;
        for (k, (&c, name)) in c_cov.iter().zip(&schema.covariates).enumerate() {
            ds.covariates[k].push(parse_cell(path, row, name, rec.get(c).map_or("", |s| s))?);
        }
        for (k, (&c, name)) in c_grp.iter().zip(&schema.groups).enumerate() {
            ds.groups[k].1.push(text(c, name)?.to_string());
        }
        let period = match (c_per, schema.period.as_deref()) {
            (Some(c), Some(name)) => text(c, name)?.to_string(),
            _ => String::new(),
        };
        if let Some(prev) = seen.insert((site.clone(), period.clone()), row) {
            let within = if c_per.is_some() {
                format!(" in period `{period}`")
            } else {
                String::new()
            };
            return Err(CliError::Cell {
                path: path.to_path_buf(),
                row,
                column: schema.site.clone(),
                message: format!("site `{site}` already appears{within} at row {prev}"),
            });
        }
        match coords.get(&site) {
            Some(&(e, nn)) if e != east || nn != north => {
                return Err(CliError::Cell {
                    path: path.to_path_buf(),
                    row,
                    column: schema.east.clone(),
                    message: format!("site `{site}` has different coordinates than on an earlier row"),
                });
            }
            Some(_) => {}
            None => {
                coords.insert(site.clone(), (east, north));
            }
        }
        if let Some(p) = ds.periods.as_mut() {
            p.push(period);
        }
        ds.site_ids.push(site);
        ds.east.push(east);
        ds.north.push(north);
        ds.y.push(y);
    }
    Ok(ds)
}

/// 17 significant digits; parses back to the same `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_csv(path: &Path, headers: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(headers).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

/// Writes a dataset back in the layout described by `schema`.
pub fn export_csv(path: &Path, ds: &Dataset, schema: &Schema) -> Result<()> {
    let mut headers = vec![
        schema.site.clone(),
        schema.east.clone(),
        schema.north.clone(),
        schema.response.clone(),
    ];
    headers.extend(schema.covariates.iter().cloned());
    headers.extend(schema.groups.iter().cloned());
    headers.extend(schema.period.iter().cloned());
    let rows: Vec<Vec<String>> = (0..ds.n())
        .map(|i| {
            let mut r = vec![
                ds.site_ids[i].clone(),
                fmt_f64(ds.east[i]),
                fmt_f64(ds.north[i]),
                fmt_f64(ds.y[i]),
            ];
            r.extend(ds.covariates.iter().map(|c| fmt_f64(c[i])));
            r.extend(ds.groups.iter().map(|g| g.1[i].clone()));
            if let Some(p) = &ds.periods {
                r.push(p[i].clone());
            }
            r
        })
        .collect();
    write_csv(path, &headers, &rows)
}

/// Adds `<column>_lag`: the value of `column` at the same site in the previous
/// period (periods ordered as they first appear in the file). Rows without a
/// previous period get an empty cell.
pub fn lag_table(table: &Table, path: &Path, site: &str, column: &str, by: &str) -> Result<Table> {
    let c_site = table.column(site, path)?;
    let c_val = table.column(column, path)?;
    let c_by = table.column(by, path)?;
    let mut order: Vec<String> = Vec::new();
    for r in &table.rows {
        if !order.contains(&r[c_by]) {
            order.push(r[c_by].clone());
        }
    }
    let mut value: HashMap<(String, String), String> = HashMap::new();
    for (i, r) in table.rows.iter().enumerate() {
        let key = (r[c_site].clone(), r[c_by].clone());
        if value.insert(key, r[c_val].clone()).is_some() {
            return Err(CliError::Cell {
                path: path.to_path_buf(),
                row: i + 1,
                column: site.to_string(),
                message: format!("site `{}` repeats within period `{}`", r[c_site], r[c_by]),
            });
        }
    }
    let name = format!("{column}_lag");
    if table.headers.contains(&name) {
        return Err(CliError::Csv {
            path: path.to_path_buf(),
            message: format!("column `{name}` already exists"),
        });
    }
    let mut headers = table.headers.clone();
    headers.push(name);
    let rows = table
        .rows
        .iter()
        .map(|r| {
            let pos = order.iter().position(|p| *p == r[c_by]).expect("collected above");
            let lagged = if pos == 0 {
                String::new()
            } else {
                value
                    .get(&(r[c_site].clone(), order[pos - 1].clone()))
                    .cloned()
                    .unwrap_or_default()
            };
            let mut out = r.clone();
            out.push(lagged);
            out
        })
        .collect();
    Ok(Table { headers, rows })
}
