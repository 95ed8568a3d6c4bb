use ndarray::Array2;
use serde::ser::{Serialize, SerializeStruct, Serializer};

use crate::error::{Error, Result};
use crate::measures::{DiscreteMeasure, Point};

/// Total-mass tolerance for couplings.
pub const COUPLING_MASS_TOL: f64 = 1e-10;

/// Joint discrete measure on (row atoms) × (column atoms).
#[derive(Debug, Clone, PartialEq)]
pub struct Coupling {
    row_support: Vec<Point>,
    col_support: Vec<Point>,
    mass: Array2<f64>,
}

impl Coupling {
    pub fn new(row_support: Vec<Point>, col_support: Vec<Point>, mass: Array2<f64>) -> Result<Self> {
        if mass.dim() != (row_support.len(), col_support.len()) {
            return Err(Error::InvalidMeasure(format!(
                "coupling mass has shape {:?}, supports are {}×{}",
                mass.dim(),
                row_support.len(),
                col_support.len()
            )));
        }
        if mass.iter().any(|m| !(*m >= 0.0) || !m.is_finite()) {
            return Err(Error::InvalidMeasure(
                "coupling masses must be finite and nonnegative".into(),
            ));
        }
        let total = mass.sum();
        if (total - 1.0).abs() > COUPLING_MASS_TOL {
            return Err(Error::NotNormalized { sum: total });
        }
        Ok(Self {
            row_support,
            col_support,
            mass,
        })
    }

    /// Trusted constructor for solver output whose mass is normalized by construction.
    pub(crate) fn from_parts(row_support: Vec<Point>, col_support: Vec<Point>, mass: Array2<f64>) -> Self {
        debug_assert_eq!(mass.dim(), (row_support.len(), col_support.len()));
        Self {
            row_support,
            col_support,
            mass,
        }
    }

    /// Independent coupling a ⊗ b.
    pub fn product(a: &DiscreteMeasure, b: &DiscreteMeasure) -> Self {
        let mass = Array2::from_shape_fn((a.len(), b.len()), |(i, j)| {
            a.weights()[i] * b.weights()[j]
        });
        Self::from_parts(a.atoms().to_vec(), b.atoms().to_vec(), mass)
    }

    pub fn rows(&self) -> usize {
        self.row_support.len()
    }

    pub fn cols(&self) -> usize {
        self.col_support.len()
    }

    pub fn row_support(&self) -> &[Point] {
        &self.row_support
    }

    pub fn col_support(&self) -> &[Point] {
        &self.col_support
    }

    pub fn mass(&self) -> &Array2<f64> {
        &self.mass
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.mass.rows().into_iter().map(|r| r.sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        self.mass.columns().into_iter().map(|c| c.sum()).collect()
    }

    fn dim(&self) -> usize {
        self.row_support
            .first()
            .or(self.col_support.first())
            .map_or(1, Vec::len)
    }

    /// π_X γ.
    pub fn marginal_x(&self) -> DiscreteMeasure {
        DiscreteMeasure::from_masses(self.dim(), self.row_support.clone(), self.row_sums())
            .expect("coupling rows form a measure")
    }

    /// π_Y γ.
    pub fn marginal_y(&self) -> DiscreteMeasure {
        DiscreteMeasure::from_masses(self.dim(), self.col_support.clone(), self.col_sums())
            .expect("coupling columns form a measure")
    }

    /// Conditional law of X given Y = y_j (the j-th column, normalized).
    pub fn conditional_given_col(&self, j: usize) -> Result<DiscreteMeasure> {
        DiscreteMeasure::from_masses(
            self.dim(),
            self.row_support.clone(),
            self.mass.column(j).to_vec(),
        )
    }

    /// max over both marginals of the L1 deviation from `mu`, `nu` (index-aligned).
    pub fn marginal_error(&self, mu: &[f64], nu: &[f64]) -> f64 {
        let rows: f64 = self
            .row_sums()
            .iter()
            .zip(mu)
            .map(|(r, m)| (r - m).abs())
            .sum();
        let cols: f64 = self
            .col_sums()
            .iter()
            .zip(nu)
            .map(|(c, n)| (c - n).abs())
            .sum();
        rows.max(cols)
    }
}

impl Serialize for Coupling {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mass: Vec<Vec<f64>> = self.mass.rows().into_iter().map(|r| r.to_vec()).collect();
        let mut st = s.serialize_struct("Coupling", 3)?;
        st.serialize_field("row_support", &self.row_support)?;
        st.serialize_field("col_support", &self.col_support)?;
        st.serialize_field("mass", &mass)?;
        st.end()
    }
}
