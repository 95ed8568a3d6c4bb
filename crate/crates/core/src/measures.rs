//! Finitely supported probability measures on R^d and observation samples.
//!
//! Measures are immutable once built. Construction validates normalization
//! (absolute tolerance 1e-12) rather than silently renormalizing; callers that
//! hold raw masses use [`DiscreteMeasure::from_masses`], which normalizes
//! explicitly.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute tolerance on the total mass of a measure.
pub const NORMALIZATION_TOL: f64 = 1e-12;

pub type Point = Vec<f64>;

/// Bitwise key for an atom; `-0.0` and `0.0` name the same point.
pub(crate) fn atom_key(x: &[f64]) -> Vec<u64> {
    x.iter()
        .map(|&v| if v == 0.0 { 0u64 } else { v.to_bits() })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiscreteMeasure {
    dim: usize,
    atoms: Vec<Point>,
    weights: Vec<f64>,
}

#[derive(Deserialize)]
struct RawMeasure {
    dim: usize,
    atoms: Vec<Point>,
    weights: Vec<f64>,
}

impl<'de> Deserialize<'de> for DiscreteMeasure {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = RawMeasure::deserialize(d)?;
        DiscreteMeasure::new(raw.dim, raw.atoms, raw.weights).map_err(serde::de::Error::custom)
    }
}

impl DiscreteMeasure {
    pub fn new(dim: usize, atoms: Vec<Point>, weights: Vec<f64>) -> Result<Self> {
        Self::check_shape(dim, &atoms, &weights)?;
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > NORMALIZATION_TOL {
            return Err(Error::NotNormalized { sum });
        }
        Ok(Self {
            dim,
            atoms,
            weights,
        })
    }

    /// Builds a measure from nonnegative masses, dividing by their total.
    pub fn from_masses(dim: usize, atoms: Vec<Point>, masses: Vec<f64>) -> Result<Self> {
        Self::check_shape(dim, &atoms, &masses)?;
        let total: f64 = masses.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::InvalidMeasure(format!(
                "total mass must be positive and finite, got {total}"
            )));
        }
        let weights = masses.into_iter().map(|m| m / total).collect();
        Ok(Self {
            dim,
            atoms,
            weights,
        })
    }

    /// Convenience constructor for measures on the real line.
    pub fn on_line(points: &[f64], weights: &[f64]) -> Result<Self> {
        Self::new(
            1,
            points.iter().map(|&x| vec![x]).collect(),
            weights.to_vec(),
        )
    }

    pub fn dirac(point: Point) -> Self {
        Self {
            dim: point.len(),
            atoms: vec![point],
            weights: vec![1.0],
        }
    }

    /// Uniform weights on the given atoms.
    pub fn uniform(dim: usize, atoms: Vec<Point>) -> Result<Self> {
        let n = atoms.len();
        Self::from_masses(dim, atoms, vec![1.0; n])
    }

    fn check_shape(dim: usize, atoms: &[Point], weights: &[f64]) -> Result<()> {
        if dim == 0 {
            return Err(Error::InvalidMeasure("dimension must be positive".into()));
        }
        if atoms.is_empty() {
            return Err(Error::InvalidMeasure("measure has no atoms".into()));
        }
        if atoms.len() != weights.len() {
            return Err(Error::InvalidMeasure(format!(
                "{} atoms but {} weights",
                atoms.len(),
                weights.len()
            )));
        }
        for a in atoms {
            if a.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: a.len(),
                });
            }
            if a.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidMeasure("atom has a non-finite coordinate".into()));
            }
        }
        if let Some((i, w)) = weights
            .iter()
            .enumerate()
            .find(|(_, w)| !(**w >= 0.0) || !w.is_finite())
        {
            return Err(Error::InvalidMeasure(format!(
                "weight {i} is {w}, expected a finite nonnegative value"
            )));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn atoms(&self) -> &[Point] {
        &self.atoms
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], f64)> {
        self.atoms
            .iter()
            .map(Vec::as_slice)
            .zip(self.weights.iter().copied())
    }

    /// Merges bitwise-identical atoms, keeping first-occurrence order.
    pub fn canonicalize(&self) -> Self {
        let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
        let mut atoms = Vec::new();
        let mut weights: Vec<f64> = Vec::new();
        for (a, w) in self.iter() {
            match index.get(&atom_key(a)) {
                Some(&k) => weights[k] += w,
                None => {
                    index.insert(atom_key(a), atoms.len());
                    atoms.push(a.to_vec());
                    weights.push(w);
                }
            }
        }
        Self {
            dim: self.dim,
            atoms,
            weights,
        }
    }

    /// Total mass at each distinct atom.
    pub(crate) fn mass_map(&self) -> HashMap<Vec<u64>, f64> {
        let mut map = HashMap::new();
        for (a, w) in self.iter() {
            *map.entry(atom_key(a)).or_insert(0.0) += w;
        }
        map
    }

    /// Mass placed on `point` (summed over duplicate atoms).
    pub fn mass_at(&self, point: &[f64]) -> f64 {
        let key = atom_key(point);
        self.iter()
            .filter(|(a, _)| atom_key(a) == key)
            .map(|(_, w)| w)
            .sum()
    }

    /// Atoms with strictly positive weight.
    pub fn support(&self) -> Self {
        let (atoms, weights) = self
            .iter()
            .filter(|(_, w)| *w > 0.0)
            .map(|(a, w)| (a.to_vec(), w))
            .unzip();
        Self {
            dim: self.dim,
            atoms,
            weights,
        }
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| Error::Json {
            context: path.display().to_string(),
            source,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("measure serializes")
    }
}

/// Observations y_1..y_n in R^d.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    points: Vec<Point>,
}

impl Sample {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        let first = points.first().ok_or(Error::EmptySample)?;
        let dim = first.len();
        if dim == 0 {
            return Err(Error::InvalidMeasure("observations must have dimension ≥ 1".into()));
        }
        if let Some(p) = points.iter().find(|p| p.len() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: p.len(),
            });
        }
        Ok(Self { points })
    }

    pub fn on_line(values: &[f64]) -> Result<Self> {
        Self::new(values.iter().map(|&v| vec![v]).collect())
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn n(&self) -> usize {
        self.points.len()
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    /// Reads a headerless CSV, one observation per row.
    pub fn from_csv_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_csv_reader(file, &path.display().to_string())
    }

    pub fn from_csv_reader(reader: impl std::io::Read, context: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let mut points = Vec::new();
        for (row, record) in rdr.records().enumerate() {
            let record = record.map_err(|source| Error::Csv {
                context: context.to_string(),
                source,
            })?;
            let point = record
                .iter()
                .enumerate()
                .map(|(col, field)| {
                    field.parse::<f64>().map_err(|e| {
                        Error::Parse(format!(
                            "{context}: row {}, column {}: {e} ({field:?})",
                            row + 1,
                            col + 1
                        ))
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            points.push(point);
        }
        Self::new(points)
    }

    pub fn to_csv(&self) -> String {
        let mut wtr = csv::WriterBuilder::new()
            .has_headers(false)
            .from_writer(Vec::new());
        for p in &self.points {
            wtr.write_record(p.iter().map(|v| v.to_string()))
                .expect("in-memory csv write");
        }
        String::from_utf8(wtr.into_inner().expect("in-memory csv flush")).expect("utf-8")
    }
}

/// Uniform measure on the observations, duplicates merged.
pub fn empirical_measure(sample: &Sample) -> DiscreteMeasure {
    DiscreteMeasure::uniform(sample.dim(), sample.points.clone())
        .expect("sample is non-empty with consistent dimension")
        .canonicalize()
}

pub fn second_moment(m: &DiscreteMeasure) -> f64 {
    m.iter()
        .map(|(a, w)| w * a.iter().map(|v| v * v).sum::<f64>())
        .sum()
}

/// ½ Σ |a(x) − b(x)| over the union of both supports.
pub fn total_variation_distance(a: &DiscreteMeasure, b: &DiscreteMeasure) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            found: b.dim(),
        });
    }
    // Iterate in atom order so the floating-point sum is reproducible.
    let (ca, cb) = (a.canonicalize(), b.canonicalize());
    let mb = cb.mass_map();
    let ma = ca.mass_map();
    let mut total = 0.0;
    for (x, wa) in ca.iter() {
        total += (wa - mb.get(&atom_key(x)).copied().unwrap_or(0.0)).abs();
    }
    for (x, wb) in cb.iter() {
        if !ma.contains_key(&atom_key(x)) {
            total += wb;
        }
    }
    Ok((0.5 * total).min(1.0))
}
