//! Tabular units with observed covariates, treatment, outcome and optional
//! oracle confounder columns, plus CSV/JSON-sidecar persistence.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Column roles for a CSV file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Roles {
    pub treatment: String,
    pub outcome: String,
    pub covariates: Vec<String>,
    #[serde(default)]
    pub unobserved: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub notes: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub z: DMatrix<f64>,
    pub z_names: Vec<String>,
    pub x: Vec<u8>,
    pub y: Vec<u8>,
    pub u: Option<DMatrix<f64>>,
    pub u_names: Vec<String>,
    pub notes: Option<Vec<String>>,
    /// SCM spec hash for simulated data, `"external"` otherwise.
    pub provenance: String,
}

fn check_unique(names: &[String]) -> Result<()> {
    let mut seen = HashSet::new();
    for n in names {
        if !seen.insert(n.as_str()) {
            return Err(Error::InvalidArgument(format!("duplicate column name '{n}'")));
        }
    }
    Ok(())
}

impl Dataset {
    pub fn new(
        z: DMatrix<f64>,
        z_names: Vec<String>,
        x: Vec<u8>,
        y: Vec<u8>,
        u: Option<(DMatrix<f64>, Vec<String>)>,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        let n = z.nrows();
        if x.len() != n || y.len() != n || z_names.len() != z.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "Z is {}x{} with {} names, X has {}, Y has {}",
                n,
                z.ncols(),
                z_names.len(),
                x.len(),
                y.len()
            )));
        }
        if x.iter().chain(&y).any(|&v| v > 1) {
            return Err(Error::InvalidArgument("treatment and outcome must be 0/1".into()));
        }
        let (u, u_names) = match u {
            Some((m, names)) => {
                if m.nrows() != n || names.len() != m.ncols() {
                    return Err(Error::DimensionMismatch("U block does not match Z rows".into()));
                }
                (Some(m), names)
            }
            None => (None, Vec::new()),
        };
        let mut all = z_names.clone();
        all.extend(u_names.iter().cloned());
        check_unique(&all)?;
        Ok(Self { z, z_names, x, y, u, u_names, notes: None, provenance: provenance.into() })
    }

    pub fn n(&self) -> usize {
        self.x.len()
    }

    pub fn dz(&self) -> usize {
        self.z.ncols()
    }

    pub fn du(&self) -> usize {
        self.u.as_ref().map_or(0, |u| u.ncols())
    }

    pub fn treated(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.x[i] == 1).collect()
    }

    pub fn untreated(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.x[i] == 0).collect()
    }

    pub fn z_row(&self, i: usize) -> Vec<f64> {
        self.z.row(i).iter().copied().collect()
    }

    pub fn u_row(&self, i: usize) -> Option<Vec<f64>> {
        self.u.as_ref().map(|u| u.row(i).iter().copied().collect())
    }

    /// Column means and (population) standard deviations of Z; zero sds are replaced by 1.
    pub fn z_moments(&self) -> (Vec<f64>, Vec<f64>) {
        column_moments(&self.z)
    }

    /// Z with each column centered and scaled to unit population sd.
    pub fn z_standardized(&self) -> DMatrix<f64> {
        let (m, s) = self.z_moments();
        DMatrix::from_fn(self.n(), self.dz(), |i, k| (self.z[(i, k)] - m[k]) / s[k])
    }

    /// Named columns (from Z or U) as a new matrix.
    pub fn columns(&self, names: &[String]) -> Result<DMatrix<f64>> {
        let mut cols = Vec::with_capacity(names.len());
        for name in names {
            if let Some(k) = self.z_names.iter().position(|c| c == name) {
                cols.push(self.z.column(k).into_owned());
            } else if let (Some(k), Some(u)) = (self.u_names.iter().position(|c| c == name), &self.u) {
                cols.push(u.column(k).into_owned());
            } else {
                return Err(Error::UnknownColumn(name.clone()));
            }
        }
        Ok(DMatrix::from_columns(&cols))
    }

    pub fn roles(&self) -> Roles {
        Roles {
            treatment: "X".into(),
            outcome: "Y".into(),
            covariates: self.z_names.clone(),
            unobserved: self.u_names.clone(),
            notes: self.notes.as_ref().map(|_| "notes".into()),
        }
    }

    pub fn csv_bytes(&self) -> Result<Vec<u8>> {
        let roles = self.roles();
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header: Vec<String> = roles.covariates.clone();
        header.extend(roles.unobserved.iter().cloned());
        header.push(roles.treatment.clone());
        header.push(roles.outcome.clone());
        if let Some(n) = &roles.notes {
            header.push(n.clone());
        }
        w.write_record(&header)?;
        for i in 0..self.n() {
            let mut rec: Vec<String> = self.z.row(i).iter().map(|v| fmt_f64(*v)).collect();
            if let Some(u) = &self.u {
                rec.extend(u.row(i).iter().map(|v| fmt_f64(*v)));
            }
            rec.push(self.x[i].to_string());
            rec.push(self.y[i].to_string());
            if let Some(notes) = &self.notes {
                rec.push(notes[i].clone());
            }
            w.write_record(&rec)?;
        }
        w.into_inner().map_err(|e| Error::Io(e.to_string()))
    }

    /// SHA-256 over the canonical CSV rendering.
    pub fn content_hash(&self) -> String {
        let bytes = self.csv_bytes().expect("in-memory CSV write");
        hex::encode(Sha256::digest(&bytes))
    }

    /// Writes `<stem>.csv` and `<stem>.roles.json` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(format!("{stem}.csv")), self.csv_bytes()?)?;
        let sidecar = serde_json::to_string_pretty(&self.roles())?;
        fs::write(dir.join(format!("{stem}.roles.json")), sidecar)?;
        Ok(())
    }

    /// Reads a CSV given its role sidecar.
    pub fn read(csv_path: &Path, roles_path: &Path) -> Result<Self> {
        let roles: Roles = serde_json::from_str(&fs::read_to_string(roles_path)?)?;
        let text = fs::read(csv_path)?;
        Self::from_csv_bytes(&text, &roles, None)
    }

    pub fn from_csv_bytes(bytes: &[u8], roles: &Roles, provenance: Option<String>) -> Result<Self> {
        let mut r = csv::Reader::from_reader(bytes);
        let header: Vec<String> = r.headers()?.iter().map(|s| s.to_string()).collect();
        let col = |name: &str| -> Result<usize> {
            header
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::UnknownColumn(name.to_string()))
        };
        let zi: Vec<usize> = roles.covariates.iter().map(|c| col(c)).collect::<Result<_>>()?;
        let ui: Vec<usize> = roles.unobserved.iter().map(|c| col(c)).collect::<Result<_>>()?;
        let xi = col(&roles.treatment)?;
        let yi = col(&roles.outcome)?;
        let ni = roles.notes.as_deref().map(col).transpose()?;

        let mut zs = Vec::new();
        let mut us = Vec::new();
        let mut x = Vec::new();
        let mut y = Vec::new();
        let mut notes = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            let num = |k: usize| -> Result<f64> {
                rec[k]
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Parse(format!("row {}, column '{}': {e}", line + 1, header[k])))
            };
            let bin = |k: usize| -> Result<u8> {
                match rec[k].trim() {
                    "0" | "0.0" => Ok(0),
                    "1" | "1.0" => Ok(1),
                    other => Err(Error::Parse(format!(
                        "row {}, column '{}': expected 0/1, got '{other}'",
                        line + 1,
                        header[k]
                    ))),
                }
            };
            for &k in &zi {
                zs.push(num(k)?);
            }
            for &k in &ui {
                us.push(num(k)?);
            }
            x.push(bin(xi)?);
            y.push(bin(yi)?);
            if let Some(k) = ni {
                notes.push(rec[k].to_string());
            }
        }
        let n = x.len();
        let z = DMatrix::from_row_slice(n, zi.len(), &zs);
        let u = if ui.is_empty() {
            None
        } else {
            Some((DMatrix::from_row_slice(n, ui.len(), &us), roles.unobserved.clone()))
        };
        let mut ds = Dataset::new(z, roles.covariates.clone(), x, y, u, provenance.unwrap_or_else(|| "external".into()))?;
        if ni.is_some() {
            ds.notes = Some(notes);
        }
        Ok(ds)
    }

    /// Rows `idx` as a new dataset (bootstrap and fold helpers).
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let z = DMatrix::from_fn(idx.len(), self.dz(), |r, k| self.z[(idx[r], k)]);
        let u = self.u.as_ref().map(|u| DMatrix::from_fn(idx.len(), u.ncols(), |r, k| u[(idx[r], k)]));
        Dataset {
            z,
            z_names: self.z_names.clone(),
            x: idx.iter().map(|&i| self.x[i]).collect(),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            u,
            u_names: self.u_names.clone(),
            notes: self.notes.as_ref().map(|n| idx.iter().map(|&i| n[i].clone()).collect()),
            provenance: self.provenance.clone(),
        }
    }
}

pub fn column_moments(m: &DMatrix<f64>) -> (Vec<f64>, Vec<f64>) {
    let n = m.nrows() as f64;
    let mut means = Vec::with_capacity(m.ncols());
    let mut sds = Vec::with_capacity(m.ncols());
    for col in m.column_iter() {
        let mu = col.sum() / n;
        let var = col.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
        means.push(mu);
        sds.push(if var > 0.0 { var.sqrt() } else { 1.0 });
    }
    (means, sds)
}

/// Shortest decimal that round-trips exactly.
fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}
