//! Balanced entropic optimal transport between discrete measures.
//!
//! The value computed here is
//!
//! ```text
//! W_σ²(μ, ν) = min_{γ ∈ M(μ, ν)} ∫ c dγ + σ² I(γ),     I(γ) = D(γ ‖ π_X γ ⊗ π_Y γ)
//! ```
//!
//! together with the information quantities it is built from (Shannon entropy,
//! Kullback–Leibler divergence, mutual information) and the product
//! decomposition `D(γ‖α⊗β) = I(γ) + D(π_Xγ‖α) + D(π_Yγ‖β)`.

mod coupling;
mod sinkhorn;

pub use coupling::Coupling;
pub(crate) use sinkhorn::refine_column_potential;
pub use sinkhorn::{
    entropy_formulation_offset, sinkhorn, sinkhorn_warm, sinkhorn_with_costs, CostMatrix, SinkhornSolution,
    SolverConfig,
};

use std::collections::HashMap;

use crate::costs::{CostModel, ExtReal};
use crate::measures::{atom_key, DiscreteMeasure};

/// Anything carrying a finite family of nonnegative masses keyed by location.
pub trait Masses {
    /// `(location key, mass)` pairs in a deterministic order.
    fn mass_entries(&self) -> Vec<(Vec<u64>, f64)>;
}

impl Masses for DiscreteMeasure {
    fn mass_entries(&self) -> Vec<(Vec<u64>, f64)> {
        self.iter().map(|(a, w)| (atom_key(a), w)).collect()
    }
}

impl Masses for Coupling {
    fn mass_entries(&self) -> Vec<(Vec<u64>, f64)> {
        let mut out = Vec::with_capacity(self.rows() * self.cols());
        for (i, x) in self.row_support().iter().enumerate() {
            for (j, y) in self.col_support().iter().enumerate() {
                let mut key = atom_key(x);
                key.extend(atom_key(y));
                out.push((key, self.mass()[[i, j]]));
            }
        }
        out
    }
}

/// Σ w log(1/w) over strictly positive masses.
pub fn shannon_entropy<M: Masses + ?Sized>(m: &M) -> f64 {
    merged(m)
        .into_iter()
        .filter(|(_, w)| *w > 0.0)
        .map(|(_, w)| -w * w.ln())
        .sum()
}

/// D(a ‖ b) with the union of supports; `+inf` when a ⋪ b.
pub fn kl_divergence<M: Masses + ?Sized>(a: &M, b: &M) -> f64 {
    let b_mass: HashMap<Vec<u64>, f64> = merged(b).into_iter().collect();
    let mut total = 0.0;
    for (k, wa) in merged(a) {
        if wa <= 0.0 {
            continue;
        }
        let wb = b_mass.get(&k).copied().unwrap_or(0.0);
        if wb <= 0.0 {
            return f64::INFINITY;
        }
        total += wa * (wa / wb).ln();
    }
    total.max(0.0)
}

/// Merges repeated keys, preserving first-occurrence order.
fn merged<M: Masses + ?Sized>(m: &M) -> Vec<(Vec<u64>, f64)> {
    let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut out: Vec<(Vec<u64>, f64)> = Vec::new();
    for (k, w) in m.mass_entries() {
        match index.get(&k) {
            Some(&i) => out[i].1 += w,
            None => {
                index.insert(k.clone(), out.len());
                out.push((k, w));
            }
        }
    }
    out
}

/// I(γ) = D(γ ‖ π_Xγ ⊗ π_Yγ), evaluated cell by cell against the coupling's own
/// row and column sums.
pub fn mutual_information(g: &Coupling) -> f64 {
    let rows = g.row_sums();
    let cols = g.col_sums();
    let mut total = 0.0;
    for ((i, j), &m) in g.mass().indexed_iter() {
        if m > 0.0 {
            total += m * (m / (rows[i] * cols[j])).ln();
        }
    }
    total.max(0.0)
}

/// `|D(γ‖α⊗β) − I(γ) − D(π_Xγ‖α) − D(π_Yγ‖β)|`, with the left side summed directly.
///
/// Returns 0 when both sides are infinite, and `+inf` if exactly one is.
pub fn kl_product_decomposition_check(
    g: &Coupling,
    alpha: &DiscreteMeasure,
    beta: &DiscreteMeasure,
) -> f64 {
    let (lhs, rhs) = kl_product_decomposition_sides(g, alpha, beta);
    match (lhs.is_finite(), rhs.is_finite()) {
        (true, true) => (lhs - rhs).abs(),
        (false, false) => 0.0,
        _ => f64::INFINITY,
    }
}

/// Both sides of the product decomposition, for reporting.
pub fn kl_product_decomposition_sides(
    g: &Coupling,
    alpha: &DiscreteMeasure,
    beta: &DiscreteMeasure,
) -> (f64, f64) {
    let alpha_mass = alpha.mass_map();
    let beta_mass = beta.mass_map();
    let mut lhs = 0.0;
    for (i, x) in g.row_support().iter().enumerate() {
        let a = alpha_mass.get(&atom_key(x)).copied().unwrap_or(0.0);
        for (j, y) in g.col_support().iter().enumerate() {
            let m = g.mass()[[i, j]];
            if m <= 0.0 {
                continue;
            }
            let b = beta_mass.get(&atom_key(y)).copied().unwrap_or(0.0);
            if a <= 0.0 || b <= 0.0 {
                lhs = f64::INFINITY;
                break;
            }
            lhs += m * (m / (a * b)).ln();
        }
        if lhs.is_infinite() {
            break;
        }
    }
    let rhs = mutual_information(g)
        + kl_divergence(&g.marginal_x(), alpha)
        + kl_divergence(&g.marginal_y(), beta);
    (lhs, rhs)
}

/// Σ γ_ij c(x_i, y_j); forbidden as soon as a positive-mass cell has infinite cost.
pub fn transport_cost(g: &Coupling, c: &CostModel) -> ExtReal {
    let mut total = 0.0;
    for ((i, j), &m) in g.mass().indexed_iter() {
        if m <= 0.0 {
            continue;
        }
        match c.cost_unchecked(&g.row_support()[i], &g.col_support()[j]) {
            ExtReal::Finite(v) => total += m * v,
            ExtReal::Infinite => return ExtReal::Infinite,
        }
    }
    ExtReal::Finite(total)
}
