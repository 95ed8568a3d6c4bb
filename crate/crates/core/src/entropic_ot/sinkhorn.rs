//! Log-domain Sinkhorn iterations.
//!
//! The coupling is parameterized by dual potentials `f`, `g` (cost units):
//!
//! ```text
//! γ_ij = μ_i ν_j exp((f_i + g_j − c_ij) / σ²)
//! ```
//!
//! and each half-step solves one marginal exactly with a max-shifted
//! log-sum-exp. Cells with infinite cost or zero marginal weight never enter a
//! reduction.

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::coupling::Coupling;
use super::{mutual_information, shannon_entropy, transport_cost};
use crate::costs::{CostModel, ExtReal, NoiseModel};
use crate::error::{Error, Result};
use crate::measures::{DiscreteMeasure, Point};

/// Sinkhorn iterations between semi-dual Newton phases. Plain iterations
/// contract slowly when mass has to cross low-kernel regions; Newton does not.
const NEWTON_PERIOD: usize = 50;
/// An iteration that shrinks the error by less than this factor also starts a
/// Newton phase, at most once per [`NEWTON_COOLDOWN`] iterations.
const STALLED: f64 = 0.99;
const NEWTON_COOLDOWN: usize = 5;
const NEWTON_STEPS: usize = 30;
/// Column residual below which a Newton phase stops early.
const NEWTON_DONE: f64 = 1e-15;
const NEWTON_HALVINGS: usize = 20;
const NEWTON_TRUST: f64 = 4.0;
/// Larger problems skip the Newton phase, whose cost grows as n³.
const NEWTON_MAX_COLUMNS: usize = 400;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// L1 marginal error at which Sinkhorn stops.
    pub tolerance: f64,
    pub max_iterations: usize,
    pub epsilon_scaling: bool,
    /// Objective gain below which EM and outer projection loops stop.
    pub objective_tolerance: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-10,
            max_iterations: 100_000,
            epsilon_scaling: false,
            objective_tolerance: 1e-12,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) || !(self.objective_tolerance > 0.0) {
            return Err(Error::InvalidParameter("tolerances must be positive".into()));
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidParameter("max_iterations must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Costs between two atom lists; forbidden cells are flagged, not stored as large floats.
#[derive(Debug, Clone)]
pub struct CostMatrix {
    values: Array2<f64>,
    allowed: Array2<bool>,
}

impl CostMatrix {
    pub fn new(rows: &[Point], cols: &[Point], c: &CostModel) -> Result<Self> {
        for p in rows.iter().chain(cols) {
            if p.len() != c.dim {
                return Err(Error::DimensionMismatch {
                    expected: c.dim,
                    found: p.len(),
                });
            }
        }
        let mut values = Array2::zeros((rows.len(), cols.len()));
        let mut allowed = Array2::from_elem((rows.len(), cols.len()), false);
        for (i, x) in rows.iter().enumerate() {
            for (j, y) in cols.iter().enumerate() {
                if let ExtReal::Finite(v) = c.cost_unchecked(x, y) {
                    values[[i, j]] = v;
                    allowed[[i, j]] = true;
                }
            }
        }
        Ok(Self { values, allowed })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn get(&self, i: usize, j: usize) -> ExtReal {
        if self.allowed[[i, j]] {
            ExtReal::Finite(self.values[[i, j]])
        } else {
            ExtReal::Infinite
        }
    }

    /// Costs −log f(y − x) read off a noise density.
    pub fn from_noise(rows: &[Point], cols: &[Point], noise: &NoiseModel) -> Result<Self> {
        let mut values = Array2::zeros((rows.len(), cols.len()));
        let mut allowed = Array2::from_elem((rows.len(), cols.len()), false);
        for (i, x) in rows.iter().enumerate() {
            for (j, y) in cols.iter().enumerate() {
                let z: Vec<f64> = y.iter().zip(x).map(|(a, b)| a - b).collect();
                let ld = noise.log_density(&z)?;
                if ld > f64::NEG_INFINITY {
                    values[[i, j]] = -ld;
                    allowed[[i, j]] = true;
                }
            }
        }
        Ok(Self { values, allowed })
    }

    /// Σ γ_ij c_ij; forbidden when a positive-mass cell is forbidden.
    pub fn transport_cost(&self, g: &Coupling) -> ExtReal {
        let mut total = 0.0;
        for ((i, j), &m) in g.mass().indexed_iter() {
            if m <= 0.0 {
                continue;
            }
            match self.get(i, j) {
                ExtReal::Finite(v) => total += m * v,
                ExtReal::Infinite => return ExtReal::Infinite,
            }
        }
        ExtReal::Finite(total)
    }

    pub(crate) fn is_allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[[i, j]]
    }

    pub(crate) fn value(&self, i: usize, j: usize) -> f64 {
        self.values[[i, j]]
    }

    fn max_finite(&self) -> f64 {
        self.values
            .iter()
            .zip(&self.allowed)
            .filter(|(_, a)| **a)
            .map(|(v, _)| *v)
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SinkhornSolution {
    pub coupling: Coupling,
    pub dual_row: Vec<f64>,
    pub dual_col: Vec<f64>,
    pub iterations: usize,
    pub marginal_error: f64,
    /// ∫ c dγ + σ² I(γ), recomputed from the returned coupling.
    pub objective: f64,
    /// Σ μ_i f_i + Σ ν_j g_j; agrees with `objective` at convergence up to a
    /// second-order term in the marginal error.
    pub dual_objective: f64,
    /// Row-marginal L1 error after each full iteration.
    pub error_trace: Vec<f64>,
}

/// max-shifted log Σ exp over the allowed terms; `-inf` when there are none.
fn log_sum_exp(terms: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = terms.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + terms.map(|t| (t - max).exp()).sum::<f64>().ln()
}

struct Problem<'a> {
    costs: &'a CostMatrix,
    mu: &'a [f64],
    nu: &'a [f64],
    log_mu: Vec<f64>,
    log_nu: Vec<f64>,
}

impl Problem<'_> {
    /// f_i = −σ² log Σ_j ν_j exp((g_j − c_ij)/σ²)
    fn row_update(&self, g: &[f64], sigma2: f64, f: &mut [f64]) {
        let (m, n) = self.costs.shape();
        for (i, fi) in f.iter_mut().enumerate().take(m) {
            let terms = (0..n)
                .filter(|&j| self.nu[j] > 0.0 && self.costs.allowed[[i, j]])
                .map(|j| self.log_nu[j] + (g[j] - self.costs.values[[i, j]]) / sigma2);
            *fi = -sigma2 * log_sum_exp(terms);
        }
    }

    /// g_j = −σ² log Σ_i μ_i exp((f_i − c_ij)/σ²)
    fn col_update(&self, f: &[f64], sigma2: f64, g: &mut [f64]) {
        let (m, n) = self.costs.shape();
        for (j, gj) in g.iter_mut().enumerate().take(n) {
            let terms = (0..m)
                .filter(|&i| self.mu[i] > 0.0 && self.costs.allowed[[i, j]])
                .map(|i| self.log_mu[i] + (f[i] - self.costs.values[[i, j]]) / sigma2);
            *gj = -sigma2 * log_sum_exp(terms);
        }
    }

    /// Row conditionals a_ij = ν_j exp((f_i + g_j − c_ij)/σ²) at f = row(g), and
    /// the column residual ν_j − Σ_i μ_i a_ij.
    fn conditionals(&self, f: &[f64], g: &[f64], sigma2: f64) -> (Array2<f64>, Vec<f64>) {
        let (m, n) = self.costs.shape();
        let a = Array2::from_shape_fn((m, n), |(i, j)| {
            if self.mu[i] > 0.0 && self.nu[j] > 0.0 && self.costs.allowed[[i, j]] {
                (self.log_nu[j] + (f[i] + g[j] - self.costs.values[[i, j]]) / sigma2).exp()
            } else {
                0.0
            }
        });
        let residual = (0..n)
            .map(|j| self.nu[j] - (0..m).map(|i| self.mu[i] * a[[i, j]]).sum::<f64>())
            .collect();
        (a, residual)
    }

    /// Σ_i μ_i f_i + Σ_j ν_j g_j.
    fn semi_dual(&self, f: &[f64], g: &[f64]) -> f64 {
        dual_value(self.mu, f) + dual_value(self.nu, g)
    }

    /// Newton ascent on the semi-dual Φ(g) = Σ_i μ_i f_i(g) + Σ_j ν_j g_j, with f
    /// kept equal to row(g). A step is halved until Φ passes an Armijo test or
    /// the column residual shrinks; the loop ends when no step does. Returns the
    /// final residual L1 norm.
    fn newton(&self, sigma2: f64, f: &mut Vec<f64>, g: &mut Vec<f64>, steps: usize) -> f64 {
        let (m, n) = self.costs.shape();
        let l1 = |r: &[f64]| r.iter().map(|x| x.abs()).sum::<f64>();
        let (mut a, mut residual) = self.conditionals(f, g, sigma2);
        let mut value = self.semi_dual(f, g);
        for _ in 0..steps {
            if l1(&residual) <= NEWTON_DONE {
                break;
            }
            // −σ² ∇²Φ = Σ_i μ_i (diag a_i − a_i a_iᵀ); adding 1 1ᵀ removes the gauge direction.
            let mut h = DMatrix::from_element(n, n, 1.0);
            for i in (0..m).filter(|&i| self.mu[i] > 0.0) {
                for j in 0..n {
                    let aij = a[[i, j]];
                    if aij == 0.0 {
                        continue;
                    }
                    h[(j, j)] += self.mu[i] * aij;
                    for k in 0..n {
                        h[(j, k)] -= self.mu[i] * aij * a[[i, k]];
                    }
                }
            }
            let rhs = DVector::from_iterator(n, residual.iter().map(|r| r * sigma2));
            let Some(step) = ascent_step(h, &rhs) else {
                break;
            };
            let slope: f64 = residual.iter().zip(step.iter()).map(|(r, d)| r * d).sum();
            // Near-decoupled blocks give the Hessian tiny eigenvalues and the raw
            // step huge components; each step moves a kernel entry by at most e^TRUST.
            let largest = step.iter().fold(0.0f64, |m, d| m.max(d.abs()));
            let mut t = (NEWTON_TRUST * sigma2 / largest).min(1.0);
            let mut accepted = false;
            for _ in 0..NEWTON_HALVINGS {
                let trial: Vec<f64> = g.iter().zip(step.iter()).map(|(x, d)| x + t * d).collect();
                let mut trial_f = vec![0.0; m];
                self.row_update(&trial, sigma2, &mut trial_f);
                let trial_value = self.semi_dual(&trial_f, &trial);
                let (ta, tr) = self.conditionals(&trial_f, &trial, sigma2);
                if trial_value >= value + 1e-4 * t * slope || l1(&tr) < l1(&residual) {
                    (*g, *f, a, residual, value) = (trial, trial_f, ta, tr, trial_value);
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        l1(&residual)
    }

    fn check_feasible(&self) -> Result<()> {
        let (m, n) = self.costs.shape();
        for i in (0..m).filter(|&i| self.mu[i] > 0.0) {
            if !(0..n).any(|j| self.nu[j] > 0.0 && self.costs.allowed[[i, j]]) {
                return Err(Error::Infeasible(format!(
                    "row atom {i} has no finite-cost route to the second marginal"
                )));
            }
        }
        for j in (0..n).filter(|&j| self.nu[j] > 0.0) {
            if !(0..m).any(|i| self.mu[i] > 0.0 && self.costs.allowed[[i, j]]) {
                return Err(Error::Infeasible(format!(
                    "column atom {j} has no finite-cost route from the first marginal"
                )));
            }
        }
        Ok(())
    }

    /// Runs iterations at regularization `sigma2` until the row error drops to `tol`.
    /// Returns (iterations, final row error).
    fn iterate(
        &self,
        sigma2: f64,
        tol: f64,
        max_iterations: usize,
        f: &mut Vec<f64>,
        g: &mut Vec<f64>,
        trace: &mut Vec<f64>,
    ) -> (usize, f64) {
        let mut next = vec![0.0; f.len()];
        self.row_update(g, sigma2, f);
        let mut err = f64::INFINITY;
        let mut last_newton: Option<usize> = None;
        for k in 1..=max_iterations {
            let previous = err;
            self.col_update(f, sigma2, g);
            self.row_update(g, sigma2, &mut next);
            // Row i currently carries μ_i exp((f_i − f'_i)/σ²).
            err = self
                .mu
                .iter()
                .zip(f.iter().zip(&next))
                .filter(|(m, _)| **m > 0.0)
                .map(|(m, (a, b))| m * ((a - b) / sigma2).exp_m1().abs())
                .sum();
            trace.push(err);
            if !err.is_finite() {
                return (k, f64::INFINITY);
            }
            if err <= tol {
                return (k, err);
            }
            std::mem::swap(f, &mut next);
            let stalled = err > STALLED * previous && last_newton.map_or(true, |l| k >= l + NEWTON_COOLDOWN);
            if (k % NEWTON_PERIOD == 0 || stalled) && g.len() <= NEWTON_MAX_COLUMNS {
                last_newton = Some(k);
                self.newton(sigma2, f, g, NEWTON_STEPS);
            }
        }
        (max_iterations, err)
    }

    fn coupling(&self, f: &[f64], g: &[f64], sigma2: f64, rows: &[Point], cols: &[Point]) -> Coupling {
        let (m, n) = self.costs.shape();
        let mass = Array2::from_shape_fn((m, n), |(i, j)| {
            if self.mu[i] > 0.0 && self.nu[j] > 0.0 && self.costs.allowed[[i, j]] {
                (self.log_mu[i] + self.log_nu[j] + (f[i] + g[j] - self.costs.values[[i, j]]) / sigma2)
                    .exp()
            } else {
                0.0
            }
        });
        Coupling::from_parts(rows.to_vec(), cols.to_vec(), mass)
    }
}

/// Entropic transport between `mu` and `nu` with regularization weight `sigma2`.
pub fn sinkhorn(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    c: &CostModel,
    sigma2: f64,
    cfg: &SolverConfig,
) -> Result<SinkhornSolution> {
    sinkhorn_warm(mu, nu, c, sigma2, cfg, None)
}

/// As [`sinkhorn`], starting from the column potential `init_col` instead of zero.
pub fn sinkhorn_warm(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    c: &CostModel,
    sigma2: f64,
    cfg: &SolverConfig,
    init_col: Option<&[f64]>,
) -> Result<SinkhornSolution> {
    let costs = CostMatrix::new(mu.atoms(), nu.atoms(), c)?;
    sinkhorn_with_costs(mu, nu, &costs, sigma2, cfg, init_col)
}

/// Sinkhorn on a precomputed cost matrix whose rows and columns follow the atoms
/// of `mu` and `nu`.
pub fn sinkhorn_with_costs(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    costs: &CostMatrix,
    sigma2: f64,
    cfg: &SolverConfig,
    init_col: Option<&[f64]>,
) -> Result<SinkhornSolution> {
    cfg.validate()?;
    if !(sigma2 > 0.0) || !sigma2.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "entropic regularization must be positive, got {sigma2}"
        )));
    }
    if mu.dim() != nu.dim() {
        return Err(Error::DimensionMismatch {
            expected: mu.dim(),
            found: nu.dim(),
        });
    }
    if costs.shape() != (mu.len(), nu.len()) {
        return Err(Error::InvalidParameter(format!(
            "cost matrix is {:?}, measures have {}×{} atoms",
            costs.shape(),
            mu.len(),
            nu.len()
        )));
    }
    let problem = Problem {
        costs,
        mu: mu.weights(),
        nu: nu.weights(),
        log_mu: mu.weights().iter().map(|w| w.ln()).collect(),
        log_nu: nu.weights().iter().map(|w| w.ln()).collect(),
    };
    problem.check_feasible()?;

    let (m, n) = costs.shape();
    let mut f = vec![0.0; m];
    let mut g = match init_col {
        Some(g0) if g0.len() == n && g0.iter().all(|v| v.is_finite()) => g0.to_vec(),
        Some(g0) => {
            return Err(Error::InvalidParameter(format!(
                "initial column potential has {} finite entries, expected {n}",
                g0.iter().filter(|v| v.is_finite()).count()
            )))
        }
        None => vec![0.0; n],
    };
    let mut trace = Vec::new();
    let mut iterations = 0;

    if cfg.epsilon_scaling {
        let mut eps = costs.max_finite().max(sigma2);
        while eps > 2.0 * sigma2 {
            let (k, _) = problem.iterate(eps, cfg.tolerance.max(1e-4), cfg.max_iterations, &mut f, &mut g, &mut trace);
            iterations += k;
            eps *= 0.5;
        }
        trace.clear();
    }

    let (k, err) = problem.iterate(sigma2, cfg.tolerance, cfg.max_iterations, &mut f, &mut g, &mut trace);
    iterations += k;
    if !(err <= cfg.tolerance) {
        return Err(Error::NotConverged {
            iterations,
            marginal_error: err,
        });
    }

    let coupling = problem.coupling(&f, &g, sigma2, mu.atoms(), nu.atoms());
    let marginal_error = coupling.marginal_error(mu.weights(), nu.weights());
    let objective = costs.transport_cost(&coupling).to_f64() + sigma2 * mutual_information(&coupling);
    let dual_objective = dual_value(mu.weights(), &f) + dual_value(nu.weights(), &g);
    Ok(SinkhornSolution {
        coupling,
        dual_row: f,
        dual_col: g,
        iterations,
        marginal_error,
        objective,
        dual_objective,
        error_trace: trace,
    })
}

/// Polishes a column potential by Newton steps on the semi-dual at `mu`,
/// returning the improved potential. Sinkhorn meets its marginal tolerance
/// before the slow modes of the potentials settle, so this recovers accuracy
/// in f = row(g) that the tolerance alone does not give.
pub(crate) fn refine_column_potential(
    mu: &[f64],
    nu: &[f64],
    costs: &CostMatrix,
    sigma2: f64,
    g: Vec<f64>,
) -> Vec<f64> {
    let problem = Problem {
        costs,
        mu,
        nu,
        log_mu: mu.iter().map(|w| w.ln()).collect(),
        log_nu: nu.iter().map(|w| w.ln()).collect(),
    };
    let mut g = g;
    let mut f = vec![0.0; mu.len()];
    problem.row_update(&g, sigma2, &mut f);
    problem.newton(sigma2, &mut f, &mut g, NEWTON_STEPS);
    g
}

/// Solves `h d = rhs`, adding a growing ridge while the system is singular or
/// the solution is not an ascent direction.
fn ascent_step(mut h: DMatrix<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    let n = rhs.len();
    let mut ridge = 0.0;
    for _ in 0..8 {
        let step = h.clone().lu().solve(rhs).filter(|d| d.iter().all(|x| x.is_finite()));
        if let Some(step) = step {
            if rhs.dot(&step) > 0.0 {
                return Some(step);
            }
        }
        let added = if ridge == 0.0 { 1e-12 } else { 99.0 * ridge };
        for j in 0..n {
            h[(j, j)] += added;
        }
        ridge += added;
    }
    None
}

fn dual_value(weights: &[f64], potential: &[f64]) -> f64 {
    weights
        .iter()
        .zip(potential)
        .filter(|(w, _)| **w > 0.0)
        .map(|(w, p)| w * p)
        .sum()
}

/// `(measured, predicted)` gap between the mutual-information objective and the
/// negative-entropy objective at the Sinkhorn solution.
///
/// measured = [∫c dγ + σ² I(γ)] − [∫c dγ − σ² H(γ)]; predicted = σ² (H(μ) + H(ν)).
pub fn entropy_formulation_offset(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    c: &CostModel,
    sigma2: f64,
    cfg: &SolverConfig,
) -> Result<(f64, f64)> {
    let sol = sinkhorn(mu, nu, c, sigma2, cfg)?;
    let cost = transport_cost(&sol.coupling, c).to_f64();
    let mi_form = cost + sigma2 * mutual_information(&sol.coupling);
    let entropy_form = cost - sigma2 * shannon_entropy(&sol.coupling);
    let predicted = sigma2 * (shannon_entropy(mu) + shannon_entropy(nu));
    Ok((mi_form - entropy_form, predicted))
}
