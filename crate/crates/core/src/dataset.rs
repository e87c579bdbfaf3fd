//! Subject-level site data, CSV ingestion and the target-site split.
//!
//! CSV layout: UTF-8, header `y,z,x1,...,xD`, one subject per line, `.` as
//! the decimal separator. Values are written with 17 significant digits so a
//! save/load cycle reproduces every binary64 value exactly.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::Stream;

/// One site's rows. Never leaves the site.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteDataset {
    site_id: u32,
    dim: usize,
    y: Vec<f64>,
    z: Vec<bool>,
    // row-major, n × dim
    x: Vec<f64>,
}

impl SiteDataset {
    /// Validates and builds a dataset. `x` is row-major with `dim` columns.
    pub fn new(site_id: u32, y: Vec<f64>, z: Vec<bool>, x: Vec<f64>, dim: usize) -> Result<Self> {
        if site_id == 0 {
            return Err(Error::Validation("site id must be positive".into()));
        }
        if dim == 0 {
            return Err(Error::Validation("feature dimension must be at least 1".into()));
        }
        if z.len() != y.len() || x.len() != y.len() * dim {
            return Err(Error::Validation(format!(
                "column lengths disagree: {} outcomes, {} treatments, {} covariate values for dimension {dim}",
                y.len(),
                z.len(),
                x.len()
            )));
        }
        for (i, v) in y.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::Validation(format!("row {}: non-finite outcome", i + 1)));
            }
        }
        for (i, row) in x.chunks(dim).enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!("row {}: non-finite covariate", i + 1)));
            }
        }
        let treated = z.iter().filter(|&&t| t).count();
        if treated == 0 || treated == z.len() {
            return Err(Error::Positivity(format!(
                "site {site_id} has {treated} treated and {} control rows; both arms are required",
                z.len() - treated
            )));
        }
        Ok(Self { site_id, dim, y, z, x })
    }

    pub fn site_id(&self) -> u32 {
        self.site_id
    }

    pub fn with_site_id(mut self, site_id: u32) -> Self {
        assert!(site_id > 0, "site id must be positive");
        self.site_id = site_id;
        self
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn z(&self) -> &[bool] {
        &self.z
    }

    pub fn x(&self, row: usize) -> &[f64] {
        &self.x[row * self.dim..(row + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = (f64, bool, &[f64])> + '_ {
        self.y
            .iter()
            .zip(&self.z)
            .zip(self.x.chunks(self.dim))
            .map(|((&y, &z), x)| (y, z, x))
    }

    pub fn treated_count(&self) -> usize {
        self.z.iter().filter(|&&t| t).count()
    }

    /// Rows at `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<SiteDataset> {
        let mut y = Vec::with_capacity(indices.len());
        let mut z = Vec::with_capacity(indices.len());
        let mut x = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Validation(format!("row index {i} out of range")));
            }
            y.push(self.y[i]);
            z.push(self.z[i]);
            x.extend_from_slice(self.x(i));
        }
        SiteDataset::new(self.site_id, y, z, x, self.dim)
    }
}

/// Reads a site CSV. The site id defaults to 1.
pub fn load_csv(path: impl AsRef<Path>, expected_dim: Option<usize>) -> Result<SiteDataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(file);

    let headers = reader
        .headers()
        .map_err(|e| Error::Format(format!("cannot read header: {e}")))?
        .clone();
    let dim = check_header(&headers)?;
    if let Some(expected) = expected_dim {
        if expected != dim {
            return Err(Error::Format(format!(
                "header declares {dim} covariates but {expected} were expected"
            )));
        }
    }

    let mut y = Vec::new();
    let mut z = Vec::new();
    let mut x = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| Error::Format(format!("row {row}: {e}")))?;
        if record.len() != dim + 2 {
            return Err(Error::Validation(format!(
                "row {row}: expected {} fields, found {}",
                dim + 2,
                record.len()
            )));
        }
        let field = |j: usize| -> Result<f64> {
            let raw = record[j].trim();
            let v: f64 = raw.parse().map_err(|_| {
                Error::Validation(format!(
                    "row {row}: cannot parse `{raw}` in column {}",
                    headers[j].trim()
                ))
            })?;
            if !v.is_finite() {
                return Err(Error::Validation(format!(
                    "row {row}: non-finite value in column {}",
                    headers[j].trim()
                )));
            }
            Ok(v)
        };
        y.push(field(0)?);
        let zv = field(1)?;
        let treated = if zv == 1.0 {
            true
        } else if zv == 0.0 {
            false
        } else {
            return Err(Error::Validation(format!(
                "row {row}: treatment must be 0 or 1, found {zv}"
            )));
        };
        z.push(treated);
        for j in 0..dim {
            x.push(field(j + 2)?);
        }
    }
    if y.is_empty() {
        return Err(Error::Validation("file contains no data rows".into()));
    }
    SiteDataset::new(1, y, z, x, dim)
}

fn check_header(headers: &csv::StringRecord) -> Result<usize> {
    let names: Vec<&str> = headers.iter().map(str::trim).collect();
    if names.len() < 3 || names[0] != "y" || names[1] != "z" {
        return Err(Error::Format(format!(
            "header must be `y,z,x1,...,xD`, found `{}`",
            names.join(",")
        )));
    }
    for (j, name) in names[2..].iter().enumerate() {
        if *name != format!("x{}", j + 1) {
            return Err(Error::Format(format!(
                "header column {} should be `x{}`, found `{name}`",
                j + 3,
                j + 1
            )));
        }
    }
    Ok(names.len() - 2)
}

/// Writes a site CSV with 17 significant digits per value.
pub fn save_csv(data: &SiteDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::with_capacity(data.len() * (data.dim() + 2) * 24);
    out.push_str("y,z");
    for j in 1..=data.dim() {
        out.push_str(&format!(",x{j}"));
    }
    out.push('\n');
    for (y, z, x) in data.rows() {
        out.push_str(&format_real(y));
        out.push_str(if z { ",1" } else { ",0" });
        for v in x {
            out.push(',');
            out.push_str(&format_real(*v));
        }
        out.push('\n');
    }
    let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// 17 significant digits; parses back to the identical binary64.
pub fn format_real(v: f64) -> String {
    format!("{v:.16e}")
}

/// Target-site partition into the local-training and ensemble-estimation parts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SiteSplit {
    pub training: Vec<usize>,
    pub estimation: Vec<usize>,
}

/// Default share of target-site rows used to train the target's own local model.
pub const DEFAULT_SPLIT_FRACTION: f64 = 0.5;

/// Uniform random partition; `|training| = round(fraction * n)`.
///
/// Both parts must keep at least two treated and two control rows.
pub fn split_site1(data: &SiteDataset, fraction: f64, rng: &mut Stream) -> Result<SiteSplit> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!(
            "split fraction must lie in (0,1), got {fraction}"
        )));
    }
    let n = data.len();
    let n_train = (fraction * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut training = order[..n_train].to_vec();
    let mut estimation = order[n_train..].to_vec();
    training.sort_unstable();
    estimation.sort_unstable();

    for (name, part) in [("training", &training), ("estimation", &estimation)] {
        let treated = part.iter().filter(|&&i| data.z()[i]).count();
        let control = part.len() - treated;
        if treated < 2 || control < 2 {
            return Err(Error::Positivity(format!(
                "{name} part has {treated} treated and {control} control rows; at least 2 of each are required"
            )));
        }
    }
    Ok(SiteSplit { training, estimation })
}
