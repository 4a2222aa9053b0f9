//! Domain types for spectra, labels, datasets and experiment data, plus CSV
//! ingestion and per-band standardization.
//!
//! The CSV format is `b0,...,b{B-1},label` with label codes `"0".."K-1"`,
//! `"outlier"`, `"unlabeled"`. Values are plain decimal, UTF-8, comma
//! separated.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

/// Floor applied to per-band standard deviations so constant bands do not
/// divide by zero.
pub const STD_FLOOR: f64 = 1e-8;

/// A band-indexed reflectance vector. Unitless reflectance, length B.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    values: Vec<f64>,
}

impl Spectrum {
    /// Build a spectrum, checking that it is non-empty and all-finite.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyInput("spectrum has no bands".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "spectrum band {i} is not finite"
            )));
        }
        Ok(Spectrum { values })
    }

    pub fn bands(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Sample label: one of K inlier classes, a labeled outlier, or unlabeled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Inlier(usize),
    Outlier,
    Unlabeled,
}

impl Label {
    /// CSV label code.
    pub fn code(&self) -> String {
        match self {
            Label::Inlier(k) => k.to_string(),
            Label::Outlier => "outlier".to_string(),
            Label::Unlabeled => "unlabeled".to_string(),
        }
    }

    pub fn parse_code(code: &str) -> Option<Label> {
        match code {
            "outlier" => Some(Label::Outlier),
            "unlabeled" => Some(Label::Unlabeled),
            k => k.parse::<usize>().ok().map(Label::Inlier),
        }
    }
}

/// A labeled collection of spectra with uniform band count.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<(Spectrum, Label)>,
    pub band_count: usize,
    pub class_count: usize,
}

impl Dataset {
    /// Build a dataset, checking band uniformity and class indices.
    pub fn new(samples: Vec<(Spectrum, Label)>, class_count: usize) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyInput("dataset has no samples".into()));
        }
        if class_count < 2 {
            return Err(Error::Config(format!(
                "class count must be at least 2, got {class_count}"
            )));
        }
        let band_count = samples[0].0.bands();
        for (i, (s, l)) in samples.iter().enumerate() {
            if s.bands() != band_count {
                return Err(Error::dimension(
                    format!("sample {i}"),
                    band_count,
                    s.bands(),
                ));
            }
            if let Label::Inlier(k) = l {
                if *k >= class_count {
                    return Err(Error::Config(format!(
                        "sample {i} has class {k} but class count is {class_count}"
                    )));
                }
            }
        }
        Ok(Dataset {
            samples,
            band_count,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Spectra whose label satisfies the filter.
    pub fn filtered<'a>(
        &'a self,
        filter: impl Fn(&Label) -> bool + 'a,
    ) -> impl Iterator<Item = &'a Spectrum> + 'a {
        self.samples
            .iter()
            .filter(move |(_, l)| filter(l))
            .map(|(s, _)| s)
    }
}

/// Expected column layout for [`load_csv`]. Leave fields `None` to infer.
#[derive(Debug, Clone, Default)]
pub struct CsvSchema {
    /// Expected band count; inferred from the header when `None`.
    pub bands: Option<usize>,
    /// Number of inlier classes; inferred as `max class index + 1` (at least
    /// 2) when `None`.
    pub class_count: Option<usize>,
}

fn parse_header(line: &str) -> Result<usize> {
    let cols: Vec<&str> = line.trim_end_matches(['\r', '\n']).split(',').collect();
    if cols.len() < 2 || *cols.last().unwrap() != "label" {
        return Err(Error::Parse {
            row: 0,
            msg: format!("header must be b0,...,b{{B-1}},label; got {line:?}"),
        });
    }
    let bands = cols.len() - 1;
    for (i, c) in cols[..bands].iter().enumerate() {
        if *c != format!("b{i}") {
            return Err(Error::Parse {
                row: 0,
                msg: format!("header column {i} must be b{i}, got {c:?}"),
            });
        }
    }
    Ok(bands)
}

/// Read a dataset from CSV. Row indices in errors are 1-based data rows
/// (the header is row 0).
pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Dataset> {
    let file = std::fs::File::open(path.as_ref())?;
    let mut lines = BufReader::new(file).lines();

    let header = match lines.next() {
        Some(l) => l?,
        None => return Err(Error::EmptyInput("csv file is empty".into())),
    };
    let bands = parse_header(&header)?;
    if let Some(expected) = schema.bands {
        if bands != expected {
            return Err(Error::dimension("csv header", expected, bands));
        }
    }

    let mut samples = Vec::new();
    let mut max_class = None::<usize>;
    for (i, line) in lines.enumerate() {
        let row = i + 1;
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.trim_end_matches('\r').split(',').collect();
        if cells.len() != bands + 1 {
            return Err(Error::dimension(format!("csv row {row}"), bands, cells.len() - 1));
        }
        let mut values = Vec::with_capacity(bands);
        for (b, cell) in cells[..bands].iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                row,
                msg: format!("band {b} value {cell:?} is not a number"),
            })?;
            values.push(v);
        }
        let label = Label::parse_code(cells[bands]).ok_or_else(|| Error::Parse {
            row,
            msg: format!("unknown label code {:?}", cells[bands]),
        })?;
        if let Label::Inlier(k) = label {
            max_class = Some(max_class.map_or(k, |m: usize| m.max(k)));
        }
        let spectrum = Spectrum::new(values).map_err(|e| Error::Parse {
            row,
            msg: e.to_string(),
        })?;
        samples.push((spectrum, label));
    }
    if samples.is_empty() {
        return Err(Error::EmptyInput("csv file has a header but no rows".into()));
    }

    let class_count = schema
        .class_count
        .unwrap_or_else(|| max_class.map_or(2, |m| (m + 1).max(2)));
    Dataset::new(samples, class_count)
}

/// Write a dataset in the CSV format read by [`load_csv`]. Values use the
/// shortest round-trip decimal form, so `load_csv(save_csv(d))` reproduces
/// every value bit-identically.
pub fn save_csv(path: impl AsRef<Path>, data: &Dataset) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
    let header: Vec<String> = (0..data.band_count)
        .map(|i| format!("b{i}"))
        .chain(std::iter::once("label".to_string()))
        .collect();
    writeln!(out, "{}", header.join(","))?;
    for (s, l) in &data.samples {
        let mut row: Vec<String> = s.values().iter().map(|v| v.to_string()).collect();
        row.push(l.code());
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

/// Per-band affine transform fitted to training data: `(v - mean) / std`,
/// population (1/N) variance, std floored at [`STD_FLOOR`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Fit a standardizer over the samples whose label passes `filter`.
pub fn fit_standardizer(data: &Dataset, filter: impl Fn(&Label) -> bool) -> Result<Standardizer> {
    let subset: Vec<&Spectrum> = data.filtered(filter).collect();
    if subset.is_empty() {
        return Err(Error::EmptyInput(
            "standardizer subset matched no samples".into(),
        ));
    }
    let b = data.band_count;
    let n = subset.len() as f64;
    let mut mean = vec![0.0; b];
    for s in &subset {
        for (m, v) in mean.iter_mut().zip(s.values()) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n;
    }
    let mut var = vec![0.0; b];
    for s in &subset {
        for ((va, v), m) in var.iter_mut().zip(s.values()).zip(&mean) {
            let d = v - m;
            *va += d * d;
        }
    }
    let std = var
        .iter()
        .map(|v| (v / n).sqrt().max(STD_FLOOR))
        .collect();
    Ok(Standardizer { mean, std })
}

impl Standardizer {
    pub fn bands(&self) -> usize {
        self.mean.len()
    }

    /// `(value - mean) / std` per band.
    pub fn standardize(&self, s: &Spectrum) -> Result<Spectrum> {
        if s.bands() != self.bands() {
            return Err(Error::dimension("standardize", self.bands(), s.bands()));
        }
        let values = s
            .values()
            .iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), sd)| (v - m) / sd)
            .collect();
        Spectrum::new(values)
    }

    /// Inverse of [`Standardizer::standardize`].
    pub fn invert(&self, s: &Spectrum) -> Result<Spectrum> {
        if s.bands() != self.bands() {
            return Err(Error::dimension("invert", self.bands(), s.bands()));
        }
        let values = s
            .values()
            .iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), sd)| v * sd + m)
            .collect();
        Spectrum::new(values)
    }

    /// Invert raw standardized values without constructing a `Spectrum`.
    pub fn invert_values(&self, values: &[f64]) -> Vec<f64> {
        values
            .iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), sd)| v * sd + m)
            .collect()
    }
}
