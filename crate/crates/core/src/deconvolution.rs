//! Mixing-distribution estimation from noisy observations Y = X + Z.
//!
//! Two families of solvers live here. Likelihood solvers (EM) maximize
//! Σ_i log ∫ f(y_i − x) dP(x). Projection solvers minimize a transport
//! objective W(P, U) between a candidate P and the empirical measure U, either
//! the balanced entropic one (via Sinkhorn) or the relaxed one (closed form).
//! On classes closed under domination the two approaches select the same P;
//! the relaxed projection agrees with the likelihood on every class.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::costs::{CostKind, CostModel, NoiseModel};
use crate::entropic_ot::{refine_column_potential, sinkhorn_with_costs, CostMatrix, SolverConfig};
use crate::error::{Error, Result};
use crate::measures::{DiscreteMeasure, Point, Sample};
use crate::newton::{self, Local, SmoothObjective};
use crate::relaxed_ot::{relaxed_with_costs, relaxed_transport};
use crate::rng::CounterRng;

/// Families of candidate mixing distributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum MixtureClass {
    /// Free weights on a fixed list of atoms.
    Grid { atoms: Vec<Point> },
    /// At most `k` free atoms with free weights; `seed` drives the initialization.
    KAtom {
        k: usize,
        #[serde(default)]
        seed: u64,
    },
    /// A fixed list of candidates.
    Explicit { candidates: Vec<DiscreteMeasure> },
}

impl MixtureClass {
    pub fn closed_under_domination(&self) -> bool {
        !matches!(self, MixtureClass::Explicit { .. })
    }

    fn validate(&self, dim: usize) -> Result<()> {
        match self {
            MixtureClass::Grid { atoms } => {
                if atoms.is_empty() {
                    return Err(Error::InvalidParameter("grid class needs at least one atom".into()));
                }
                if let Some(a) = atoms.iter().find(|a| a.len() != dim) {
                    return Err(Error::DimensionMismatch { expected: dim, found: a.len() });
                }
            }
            MixtureClass::KAtom { k, .. } if *k == 0 => {
                return Err(Error::InvalidParameter("k-atom class needs k ≥ 1".into()));
            }
            MixtureClass::KAtom { .. } => {}
            MixtureClass::Explicit { candidates } => {
                if candidates.is_empty() {
                    return Err(Error::InvalidParameter("explicit class is empty".into()));
                }
                if let Some(c) = candidates.iter().find(|c| c.dim() != dim) {
                    return Err(Error::DimensionMismatch { expected: dim, found: c.dim() });
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    NegLogLikelihood,
    EntropicProjection,
    RelaxedProjection,
}

#[derive(Debug, Clone, Serialize)]
pub struct EstimatorResult {
    pub estimate: DiscreteMeasure,
    pub objective_value: f64,
    pub objective_kind: ObjectiveKind,
    /// `(iteration, objective)`; every iteration up to 100, then every 100th, then the last.
    pub trace: Vec<(usize, f64)>,
    pub converged: bool,
    /// Index of the chosen candidate for explicit classes.
    pub selected_index: Option<usize>,
    /// Objective of every candidate for explicit classes (`+inf` when infeasible).
    pub candidate_values: Vec<f64>,
    pub notes: Vec<String>,
}

impl EstimatorResult {
    fn iterative(estimate: DiscreteMeasure, kind: ObjectiveKind, run: Run) -> Self {
        Self {
            estimate,
            objective_value: run.value,
            objective_kind: kind,
            trace: run.trace,
            converged: run.converged,
            selected_index: None,
            candidate_values: Vec::new(),
            notes: Vec::new(),
        }
    }

    fn explicit(candidates: &[DiscreteMeasure], values: Vec<f64>, kind: ObjectiveKind) -> Result<Self> {
        let best = argmin_first(&values).ok_or_else(|| {
            Error::Infeasible("no candidate has a finite objective".into())
        })?;
        Ok(Self {
            estimate: candidates[best].clone(),
            objective_value: values[best],
            objective_kind: kind,
            trace: values.iter().copied().enumerate().collect(),
            converged: true,
            selected_index: Some(best),
            candidate_values: values,
            notes: Vec::new(),
        })
    }
}

/// Lowest index among the minimal finite values.
fn argmin_first(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, v) in values.iter().enumerate() {
        if v.is_finite() && best.is_none_or(|b| *v < values[b]) {
            best = Some(i);
        }
    }
    best
}

fn record(trace: &mut Vec<(usize, f64)>, k: usize, value: f64) {
    if k <= 100 || k % 100 == 0 {
        trace.push((k, value));
    }
}

fn close_trace(trace: &mut Vec<(usize, f64)>, k: usize, value: f64) {
    if trace.last().map(|t| t.0) != Some(k) {
        trace.push((k, value));
    }
}

struct Run {
    weights: Vec<f64>,
    value: f64,
    trace: Vec<(usize, f64)>,
    converged: bool,
}

fn sample_measure(sample: &Sample) -> DiscreteMeasure {
    DiscreteMeasure::uniform(sample.dim(), sample.points().to_vec()).expect("sample is non-empty")
}

/// Per-observation log ∫ f(y_i − x) dP(x); `-inf` for observations no atom can reach.
pub fn log_likelihood_rows(p: &DiscreteMeasure, sample: &Sample, noise: &NoiseModel) -> Result<Vec<f64>> {
    if p.dim() != noise.dim() || sample.dim() != noise.dim() {
        return Err(Error::DimensionMismatch {
            expected: noise.dim(),
            found: if p.dim() != noise.dim() { p.dim() } else { sample.dim() },
        });
    }
    let mut rows = Vec::with_capacity(sample.n());
    for y in sample.points() {
        let mut terms = Vec::with_capacity(p.len());
        for (x, w) in p.iter().filter(|(_, w)| *w > 0.0) {
            let z: Vec<f64> = y.iter().zip(x).map(|(a, b)| a - b).collect();
            terms.push(w.ln() + noise.log_density(&z)?);
        }
        let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        rows.push(if max == f64::NEG_INFINITY {
            max
        } else {
            max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
        });
    }
    Ok(rows)
}

/// Σ_i log ∫ f(y_i − x) dP(x). Returns `-inf` (and logs the first offending row)
/// when some observation is unreachable.
pub fn log_likelihood(p: &DiscreteMeasure, sample: &Sample, noise: &NoiseModel) -> Result<f64> {
    let rows = log_likelihood_rows(p, sample, noise)?;
    if let Some(i) = rows.iter().position(|r| *r == f64::NEG_INFINITY) {
        log::warn!("observation {i} has zero density under every atom");
        return Ok(f64::NEG_INFINITY);
    }
    Ok(rows.iter().sum())
}

/// Stationarity tolerance of the Newton phase, in cost units.
const KKT_TOL: f64 = 1e-13;
const TRIAL_SINKHORN_ITERATIONS: usize = 2_000;
/// Potentials kept per objective. A [`squarem`] cycle tries at most about 50
/// points after the one it may fall back to, and that point has to stay cached
/// so that its merit is reproduced exactly.
const RECENT_POTENTIALS: usize = 64;
/// Relative weight below which an atom is dropped before the Newton phase.
const PRUNE: f64 = 1e-9;
const NEWTON_MAX_ITER: usize = 500;
/// SQUAREM cycles of mirror descent before the Newton phase takes over.
const WARMUP_CYCLES: usize = 30;
/// Largest extrapolation length tried by [`squarem`].
const MAX_ALPHA: f64 = 64.0;

/// A fixed-point map on weight vectors together with the merit it decreases.
trait FixedPoint {
    /// Merit at `p` and the image F(p); `None` when `p` cannot be evaluated.
    fn eval(&mut self, p: &[f64]) -> Result<Option<(f64, Vec<f64>)>>;
    /// Called when two plain steps fail to decrease the merit; `true` to retry
    /// with a more conservative map.
    fn shrink(&mut self) -> bool;
}

/// Zeroes weights below `PRUNE` times the largest and renormalizes.
fn pruned(mut p: Vec<f64>) -> Vec<f64> {
    let max = p.iter().copied().fold(0.0, f64::max);
    p.iter_mut().filter(|w| **w < PRUNE * max).for_each(|w| *w = 0.0);
    let total: f64 = p.iter().sum();
    p.iter_mut().for_each(|w| *w /= total);
    p
}

fn softmax_masked(logs: &[f64], mask: &[bool]) -> Vec<f64> {
    let max = logs
        .iter()
        .zip(mask)
        .filter(|(_, m)| **m)
        .map(|(l, _)| *l)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logs
        .iter()
        .zip(mask)
        .map(|(l, m)| if *m { (l - max).exp() } else { 0.0 })
        .collect();
    let total: f64 = p.iter().sum();
    p.iter_mut().for_each(|w| *w /= total);
    p
}

/// SQUAREM extrapolation of a fixed-point map, carried out on log-weights.
///
/// Each cycle takes two plain steps p0 → p1 → p2, then tries the point
/// log p0 − 2α r + α² v (r = Δ log p, v = Δ² log p), halving α toward −1 until
/// the merit is no worse than at p2. α = −1 reproduces p2, so cycles never do
/// worse than two plain steps. `scale` converts merit gains into the units of
/// `cfg.objective_tolerance`.
fn squarem(fp: &mut impl FixedPoint, init: Vec<f64>, scale: f64, cfg: &SolverConfig) -> Result<Run> {
    // Multiplicative updates leave mass that only decays geometrically on atoms
    // outside the optimal support; [`polish`] brings back any that are needed.
    fn eval(fp: &mut impl FixedPoint, q: &[f64]) -> Result<Option<(f64, Vec<f64>)>> {
        Ok(fp.eval(q)?.map(|(m, im)| (m, pruned(im))))
    }
    let Some((mut merit, mut image)) = eval(fp, &init)? else {
        return Err(Error::Infeasible("initial weights cannot be evaluated".into()));
    };
    let mut p = init;
    let mut trace = vec![(0, merit)];
    let mut converged = false;
    let mut k = 0;
    'cycles: while k < cfg.max_iterations {
        let p1 = image.clone();
        let e1 = eval(fp, &p1)?;
        let e2 = match &e1 {
            Some((_, n1)) => eval(fp, n1)?.map(|e| (n1.clone(), e)),
            None => None,
        };
        let (Some((m1, _)), Some((p2, (m2, n2)))) = (e1, e2) else {
            k += 1;
            if fp.shrink() {
                match eval(fp, &p)? {
                    Some((m, im)) => (merit, image) = (m, im),
                    None => break,
                }
                continue;
            }
            converged = true;
            break;
        };
        if !(m1 <= merit && m2 <= m1) {
            k += 1;
            if fp.shrink() {
                match eval(fp, &p)? {
                    Some((m, im)) => (merit, image) = (m, im),
                    None => break,
                }
                continue;
            }
            // Rounding-level increase: keep the current iterate.
            converged = true;
            break;
        }
        k += 1;
        let mask: Vec<bool> = (0..p.len()).map(|i| p[i] > 0.0 && p1[i] > 0.0 && p2[i] > 0.0).collect();
        let l = |q: &[f64], i: usize| if mask[i] { q[i].ln() } else { 0.0 };
        let r: Vec<f64> = (0..p.len()).map(|i| l(&p1, i) - l(&p, i)).collect();
        let v: Vec<f64> = (0..p.len()).map(|i| l(&p2, i) - 2.0 * l(&p1, i) + l(&p, i)).collect();
        let norm = |x: &[f64]| x.iter().map(|a| a * a).sum::<f64>().sqrt();
        let (nr, nv) = (norm(&r), norm(&v));
        let (mut next_p, mut next_m, mut next_image) = (p2, m2, n2);
        if nv > 0.0 && nr > 0.0 {
            let mut alpha = (-nr / nv).clamp(-MAX_ALPHA, -1.0);
            while alpha < -1.0 - 1e-12 {
                let logs: Vec<f64> =
                    (0..p.len()).map(|i| l(&p, i) - 2.0 * alpha * r[i] + alpha * alpha * v[i]).collect();
                let q = pruned(softmax_masked(&logs, &mask));
                if q.iter().all(|w| w.is_finite()) {
                    if let Some((m, im)) = eval(fp, &q)? {
                        if m <= next_m {
                            (next_p, next_m, next_image) = (q, m, im);
                            break;
                        }
                    }
                }
                alpha = 0.5 * (alpha - 1.0);
            }
        }
        let gain = (merit - next_m) * scale;
        p = next_p;
        merit = next_m;
        image = next_image;
        record(&mut trace, k, merit);
        if gain < cfg.objective_tolerance {
            converged = true;
            break 'cycles;
        }
    }
    close_trace(&mut trace, k, merit);
    Ok(Run { weights: p, value: merit, trace, converged })
}

/// EM map for Σ_j ν_j log Σ_i p_i exp(−c_ij/σ²) on a column-shifted kernel.
struct EmMap {
    m: usize,
    n: usize,
    nu: Vec<f64>,
    sigma2: f64,
    shift: Vec<f64>,
    kernel: Vec<f64>,
}

impl EmMap {
    fn new(costs: &CostMatrix, nu: &[f64], sigma2: f64) -> Result<Self> {
        let (m, n) = costs.shape();
        // K_ij = exp(−c_ij/σ² + s_j) with max_i K_ij = 1.
        let mut shift = vec![0.0; n];
        let mut kernel = vec![0.0; m * n];
        for j in 0..n {
            let cmin = (0..m)
                .filter(|&i| costs.is_allowed(i, j))
                .map(|i| costs.value(i, j))
                .fold(f64::INFINITY, f64::min);
            if cmin == f64::INFINITY {
                return Err(Error::Infeasible(format!("observation {j} is unreachable from every atom")));
            }
            shift[j] = cmin / sigma2;
            for i in (0..m).filter(|&i| costs.is_allowed(i, j)) {
                kernel[i * n + j] = (shift[j] - costs.value(i, j) / sigma2).exp();
            }
        }
        Ok(Self { m, n, nu: nu.to_vec(), sigma2, shift, kernel })
    }
}

impl FixedPoint for EmMap {
    fn eval(&mut self, p: &[f64]) -> Result<Option<(f64, Vec<f64>)>> {
        let (m, n) = (self.m, self.n);
        let mut value = 0.0;
        let mut ratio = vec![0.0; n];
        for j in (0..n).filter(|&j| self.nu[j] > 0.0) {
            let s: f64 = (0..m).map(|i| p[i] * self.kernel[i * n + j]).sum();
            if !(s > 0.0) {
                return Ok(None);
            }
            value += self.nu[j] * (s.ln() - self.shift[j]);
            ratio[j] = self.nu[j] / s;
        }
        let mut next: Vec<f64> = (0..m)
            .map(|i| {
                if p[i] > 0.0 {
                    p[i] * (0..n).map(|j| ratio[j] * self.kernel[i * n + j]).sum::<f64>()
                } else {
                    0.0
                }
            })
            .collect();
        let total: f64 = next.iter().sum();
        next.iter_mut().for_each(|w| *w /= total);
        Ok(Some((-self.sigma2 * value, next)))
    }

    fn shrink(&mut self) -> bool {
        false
    }
}

impl SmoothObjective for EmMap {
    fn value(&mut self, p: &[f64]) -> Result<Option<f64>> {
        Ok(self.eval(p)?.map(|(v, _)| v))
    }

    fn local(&mut self, p: &[f64], support: &[usize]) -> Result<Option<Local>> {
        let (m, n) = (self.m, self.n);
        let mut value = 0.0;
        let mut sums = vec![0.0; n];
        for j in (0..n).filter(|&j| self.nu[j] > 0.0) {
            sums[j] = (0..m).map(|i| p[i] * self.kernel[i * n + j]).sum();
            if !(sums[j] > 0.0) {
                return Ok(None);
            }
            value += self.nu[j] * (sums[j].ln() - self.shift[j]);
        }
        let live: Vec<usize> = (0..n).filter(|&j| self.nu[j] > 0.0).collect();
        let grad = (0..m)
            .map(|i| -self.sigma2 * live.iter().map(|&j| self.nu[j] * self.kernel[i * n + j] / sums[j]).sum::<f64>())
            .collect();
        let hess = DMatrix::from_fn(support.len(), support.len(), |a, b| {
            let (ia, ib) = (support[a], support[b]);
            self.sigma2
                * live
                    .iter()
                    .map(|&j| self.nu[j] * self.kernel[ia * n + j] * self.kernel[ib * n + j] / (sums[j] * sums[j]))
                    .sum::<f64>()
        });
        Ok(Some(Local { value: -self.sigma2 * value, grad, hess }))
    }
}

/// Appends the Newton phase to a first-order run.
fn polish(run: Run, obj: &mut impl SmoothObjective, allowed: &[bool], kkt_tol: f64) -> Result<Run> {
    let Run { weights, mut trace, .. } = run;
    let start = trace.last().map_or(0, |t| t.0);
    let out = newton::minimize(obj, weights, allowed, kkt_tol, NEWTON_MAX_ITER)?;
    for (k, v) in out.values.iter().enumerate() {
        record(&mut trace, start + k + 1, *v);
    }
    let end = start + out.values.len() + 1;
    close_trace(&mut trace, end, out.value);
    Ok(Run { weights: out.weights, value: out.value, trace, converged: out.converged })
}

/// Fixed-support EM on Σ_j ν_j log Σ_i p_i exp(−c_ij/σ²), accelerated by
/// [`squarem`] and finished by Newton steps on the weights. The merit is the
/// relaxed value −σ² Σ_j ν_j log Σ_i p_i exp(−c_ij/σ²).
fn em_weights(
    costs: &CostMatrix,
    nu: &[f64],
    sigma2: f64,
    init: Vec<f64>,
    scale: f64,
    cfg: &SolverConfig,
) -> Result<Run> {
    let mut map = EmMap::new(costs, nu, sigma2)?;
    let run = squarem(&mut map, init, scale, cfg)?;
    let (m, n) = costs.shape();
    let allowed: Vec<bool> = (0..m).map(|i| (0..n).any(|j| map.kernel[i * n + j] > 0.0)).collect();
    polish(run, &mut map, &allowed, KKT_TOL)
}

fn rescale_trace(trace: &mut [(usize, f64)], factor: f64, offset: f64) {
    for t in trace {
        t.1 = factor * t.1 + offset;
    }
}

/// Grid NPMLE by EM, starting from uniform weights. The objective is the
/// negative log-likelihood −Σ_i ℓ_P(y_i).
pub fn mle_em_grid(sample: &Sample, atoms: &[Point], noise: &NoiseModel, cfg: &SolverConfig) -> Result<EstimatorResult> {
    cfg.validate()?;
    MixtureClass::Grid { atoms: atoms.to_vec() }.validate(noise.dim())?;
    if sample.dim() != noise.dim() {
        return Err(Error::DimensionMismatch { expected: noise.dim(), found: sample.dim() });
    }
    let costs = CostMatrix::from_noise(atoms, sample.points(), noise)?;
    let n = sample.n() as f64;
    let nu = vec![1.0 / n; sample.n()];
    let mut run = em_weights(&costs, &nu, 1.0, vec![1.0 / atoms.len() as f64; atoms.len()], n, cfg)?;
    run.value *= n;
    rescale_trace(&mut run.trace, n, 0.0);
    let estimate = DiscreteMeasure::from_masses(noise.dim(), atoms.to_vec(), run.weights.clone())?;
    Ok(EstimatorResult::iterative(estimate, ObjectiveKind::NegLogLikelihood, run))
}

/// Maximum likelihood over any class.
pub fn mle(sample: &Sample, class: &MixtureClass, noise: &NoiseModel, cfg: &SolverConfig) -> Result<EstimatorResult> {
    class.validate(noise.dim())?;
    match class {
        MixtureClass::Grid { atoms } => mle_em_grid(sample, atoms, noise, cfg),
        MixtureClass::KAtom { k, seed } => {
            // −log f = c/σ²_eff − C, so the relaxed value is an affine image of the NLL.
            let c = noise.cost_model();
            let s2 = c.effective_sigma2();
            let constant = noise.log_normalizer()?;
            let nu = sample_measure(sample);
            let n = sample.n() as f64;
            let mut res = katom_em(&nu, c, s2, *k, *seed, n / s2, cfg)?;
            res.objective_value = n * (res.objective_value / s2 - constant);
            rescale_trace(&mut res.trace, n / s2, -n * constant);
            res.objective_kind = ObjectiveKind::NegLogLikelihood;
            Ok(res)
        }
        MixtureClass::Explicit { candidates } => {
            let values = candidates
                .iter()
                .map(|p| log_likelihood(p, sample, noise).map(|l| -l))
                .collect::<Result<Vec<_>>>()?;
            EstimatorResult::explicit(candidates, values, ObjectiveKind::NegLogLikelihood)
        }
    }
}

fn check_sigma2(sigma2: f64) -> Result<()> {
    if !(sigma2 > 0.0) || !sigma2.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "regularization weight must be positive, got {sigma2}"
        )));
    }
    Ok(())
}

/// argmin_{P ∈ class} W^rel_σ²(P, ν). Grid and k-atom classes run EM; explicit
/// classes are evaluated exhaustively in closed form.
pub fn project_relaxed(
    class: &MixtureClass,
    nu: &DiscreteMeasure,
    c: &CostModel,
    sigma2: f64,
    cfg: &SolverConfig,
) -> Result<EstimatorResult> {
    cfg.validate()?;
    check_sigma2(sigma2)?;
    class.validate(nu.dim())?;
    match class {
        MixtureClass::Grid { atoms } => {
            let costs = CostMatrix::new(atoms, nu.atoms(), c)?;
            project_relaxed_grid(atoms, nu, &costs, sigma2, cfg)
        }
        MixtureClass::KAtom { k, seed } => katom_em(nu, c, sigma2, *k, *seed, 1.0, cfg),
        MixtureClass::Explicit { candidates } => {
            let values = candidates
                .iter()
                .map(|p| match relaxed_transport(p, nu, c, sigma2) {
                    Ok(s) => Ok(s.value),
                    Err(Error::EmptyGibbsSupport { .. }) => Ok(f64::INFINITY),
                    Err(e) => Err(e),
                })
                .collect::<Result<Vec<_>>>()?;
            EstimatorResult::explicit(candidates, values, ObjectiveKind::RelaxedProjection)
        }
    }
}

/// Relaxed projection on a grid with a precomputed cost matrix (rows = grid atoms).
pub fn project_relaxed_grid(
    atoms: &[Point],
    nu: &DiscreteMeasure,
    costs: &CostMatrix,
    sigma2: f64,
    cfg: &SolverConfig,
) -> Result<EstimatorResult> {
    let init = vec![1.0 / atoms.len() as f64; atoms.len()];
    let run = em_weights(costs, nu.weights(), sigma2, init, 1.0, cfg)?;
    let estimate = DiscreteMeasure::from_masses(nu.dim(), atoms.to_vec(), run.weights.clone())?;
    Ok(EstimatorResult::iterative(estimate, ObjectiveKind::RelaxedProjection, run))
}

/// argmin_{P ∈ class} W_σ²(P, ν) for balanced entropic transport.
pub fn project_entropic(
    class: &MixtureClass,
    nu: &DiscreteMeasure,
    c: &CostModel,
    sigma2: f64,
    cfg: &SolverConfig,
) -> Result<EstimatorResult> {
    cfg.validate()?;
    check_sigma2(sigma2)?;
    class.validate(nu.dim())?;
    match class {
        MixtureClass::Grid { atoms } => {
            let costs = CostMatrix::new(atoms, nu.atoms(), c)?;
            project_entropic_grid(atoms, nu, &costs, sigma2, cfg)
        }
        MixtureClass::KAtom { k, seed } => {
            let init = kmeans_pp(nu, c, *k, *seed)?;
            let mut res = project_entropic_katom_from(init, nu, c, sigma2, cfg)?;
            res.notes.push("k-atom projection is a local search; the result may be a local minimum".into());
            Ok(res)
        }
        MixtureClass::Explicit { candidates } => {
            let values = candidates
                .iter()
                .map(|p| {
                    let costs = CostMatrix::new(p.atoms(), nu.atoms(), c)?;
                    Ok(match sinkhorn_with_costs(p, nu, &costs, sigma2, cfg, None) {
                        Ok(s) => s.objective,
                        Err(Error::Infeasible(_)) => f64::INFINITY,
                        Err(e) => return Err(e),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            EstimatorResult::explicit(candidates, values, ObjectiveKind::EntropicProjection)
        }
    }
}

/// Weights of `P` scaled by exp(−t (f_i − min f)/σ²) and renormalized.
fn mirror_step(p: &[f64], f: &[f64], t: f64, sigma2: f64) -> Vec<f64> {
    let fmin = p
        .iter()
        .zip(f)
        .filter(|(w, _)| **w > 0.0)
        .map(|(_, v)| *v)
        .fold(f64::INFINITY, f64::min);
    let mut q: Vec<f64> = p
        .iter()
        .zip(f)
        .map(|(w, v)| if *w > 0.0 { w * (-t * (v - fmin) / sigma2).exp() } else { 0.0 })
        .collect();
    let total: f64 = q.iter().sum();
    q.iter_mut().for_each(|w| *w /= total);
    q
}

/// Mirror-descent map P ↦ P·exp(−t (f − min f)/σ²)/Z, where f is the Sinkhorn
/// row potential at P (the gradient of W_σ²(·, ν)); the merit is W_σ²(P, ν).
struct MirrorMap<'a> {
    objective: EntropicObjective<'a>,
    step: f64,
}

impl FixedPoint for MirrorMap<'_> {
    fn eval(&mut self, p: &[f64]) -> Result<Option<(f64, Vec<f64>)>> {
        let obj = &mut self.objective;
        let Some(g) = obj.potential(p, usize::MAX)? else {
            return Ok(None);
        };
        let f = obj.row_potential(&g);
        let next = mirror_step(p, &f, self.step, obj.sigma2);
        Ok(Some((obj.semi_dual(p, &f, &g), next)))
    }

    fn shrink(&mut self) -> bool {
        self.step *= 0.5;
        self.step > 1e-8
    }
}

/// W_σ²(P, ν) as a function of the weights of P, evaluated through the
/// semi-dual Σ_i p_i f_i(g) + Σ_j ν_j g_j with f the c-transform of the
/// Sinkhorn column potential g. The gradient is f; the Hessian follows from
/// differentiating the marginal conditions.
struct EntropicObjective<'a> {
    atoms: &'a [Point],
    nu: &'a DiscreteMeasure,
    costs: &'a CostMatrix,
    sigma2: f64,
    cfg: &'a SolverConfig,
    warm: Option<Vec<f64>>,
    /// Weights and column potentials of the latest successful solves, newest
    /// last, so that revisited points get identical values.
    recent: Vec<(Vec<f64>, Vec<f64>)>,
}

impl<'a> EntropicObjective<'a> {
    fn new(atoms: &'a [Point], nu: &'a DiscreteMeasure, costs: &'a CostMatrix, sigma2: f64, cfg: &'a SolverConfig) -> Self {
        EntropicObjective { atoms, nu, costs, sigma2, cfg, warm: None, recent: Vec::new() }
    }

    /// Column potential at P, or `None` when Sinkhorn fails there within
    /// `max_iterations`.
    fn potential(&mut self, p: &[f64], max_iterations: usize) -> Result<Option<Vec<f64>>> {
        if let Some((_, g)) = self.recent.iter().rev().find(|(q, _)| q.as_slice() == p) {
            return Ok(Some(g.clone()));
        }
        let mu = DiscreteMeasure::from_masses(self.nu.dim(), self.atoms.to_vec(), p.to_vec())?;
        let cfg = SolverConfig { max_iterations: max_iterations.min(self.cfg.max_iterations), ..*self.cfg };
        match sinkhorn_with_costs(&mu, self.nu, self.costs, self.sigma2, &cfg, self.warm.as_deref()) {
            Ok(sol) => {
                let g = refine_column_potential(p, self.nu.weights(), self.costs, self.sigma2, sol.dual_col);
                self.warm = Some(g.clone());
                if self.recent.len() == RECENT_POTENTIALS {
                    self.recent.remove(0);
                }
                self.recent.push((p.to_vec(), g.clone()));
                Ok(Some(g))
            }
            Err(Error::NotConverged { .. }) | Err(Error::Infeasible(_)) => Ok(None),
            Err(e) => Err(e),
        }
    }

    /// c-transform f_i = −σ² log Σ_j ν_j exp((g_j − c_ij)/σ²).
    fn row_potential(&self, g: &[f64]) -> Vec<f64> {
        let (m, n) = self.costs.shape();
        let nu = self.nu.weights();
        (0..m)
            .map(|i| {
                let terms: Vec<f64> = (0..n)
                    .filter(|&j| nu[j] > 0.0 && self.costs.is_allowed(i, j))
                    .map(|j| nu[j].ln() + (g[j] - self.costs.value(i, j)) / self.sigma2)
                    .collect();
                let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                if max == f64::NEG_INFINITY {
                    return f64::INFINITY;
                }
                -self.sigma2 * (max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln())
            })
            .collect()
    }

    fn semi_dual(&self, p: &[f64], f: &[f64], g: &[f64]) -> f64 {
        let rows: f64 = p.iter().zip(f).filter(|(w, _)| **w > 0.0).map(|(w, v)| w * v).sum();
        rows + self.nu.weights().iter().zip(g).map(|(w, v)| w * v).sum::<f64>()
    }
}

impl SmoothObjective for EntropicObjective<'_> {
    /// Line-search trials get a bounded Sinkhorn budget; near the block masses of
    /// well-separated data some trial points converge very slowly, and the
    /// search then simply tries a shorter step.
    fn value(&mut self, p: &[f64]) -> Result<Option<f64>> {
        Ok(self.potential(p, TRIAL_SINKHORN_ITERATIONS)?.map(|g| {
            let f = self.row_potential(&g);
            self.semi_dual(p, &f, &g)
        }))
    }

    fn local(&mut self, p: &[f64], support: &[usize]) -> Result<Option<Local>> {
        let Some(g) = self.potential(p, usize::MAX)? else {
            return Ok(None);
        };
        let f = self.row_potential(&g);
        let value = self.semi_dual(p, &f, &g);
        let (m, n) = self.costs.shape();
        let nu = self.nu.weights();
        // E_ij = exp((f_i + g_j − c_ij)/σ²), so γ_ij = p_i ν_j E_ij.
        let e = DMatrix::from_fn(m, n, |i, j| {
            if f[i].is_finite() && self.costs.is_allowed(i, j) {
                ((f[i] + g[j] - self.costs.value(i, j)) / self.sigma2).exp()
            } else {
                0.0
            }
        });
        // With A_ij = ν_j E_ij and B_ij = p_i E_ij, a weight perturbation dp moves
        // the potentials by (I − BᵀA) dg = −σ² Eᵀ dp and df = −A dg. The rank-one
        // term 1νᵀ fixes the additive gauge.
        let mut s = DMatrix::from_fn(n, n, |j, k| if j == k { 1.0 } else { 0.0 } + nu[k]);
        for i in (0..m).filter(|&i| p[i] > 0.0) {
            for j in 0..n {
                let b = p[i] * e[(i, j)];
                if b == 0.0 {
                    continue;
                }
                for k in 0..n {
                    s[(j, k)] -= b * nu[k] * e[(i, k)];
                }
            }
        }
        let et = DMatrix::from_fn(n, support.len(), |j, a| e[(support[a], j)]);
        let Some(x) = s.lu().solve(&et) else {
            return Ok(None);
        };
        let a = DMatrix::from_fn(support.len(), n, |a, j| nu[j] * e[(support[a], j)]);
        let h = (a * x) * self.sigma2;
        let hess = (&h + h.transpose()) * 0.5;
        Ok(Some(Local { value, grad: f, hess }))
    }
}

/// Entropic projection on a grid: exponentiated-gradient descent over the
/// weights, accelerated by [`squarem`], followed by Newton steps. The gradient
/// of W_σ²(·, ν) at P is the Sinkhorn row potential.
pub fn project_entropic_grid(
    atoms: &[Point],
    nu: &DiscreteMeasure,
    costs: &CostMatrix,
    sigma2: f64,
    cfg: &SolverConfig,
) -> Result<EstimatorResult> {
    let (m, n) = costs.shape();
    for j in (0..n).filter(|&j| nu.weights()[j] > 0.0) {
        if !(0..m).any(|i| costs.is_allowed(i, j)) {
            return Err(Error::Infeasible(format!("observation {j} is unreachable from every atom")));
        }
    }
    // Atoms with no finite-cost route to ν cannot carry mass.
    let active: Vec<bool> = (0..m)
        .map(|i| (0..n).any(|j| nu.weights()[j] > 0.0 && costs.is_allowed(i, j)))
        .collect();
    let count = active.iter().filter(|a| **a).count() as f64;
    let p: Vec<f64> = active.iter().map(|a| if *a { 1.0 / count } else { 0.0 }).collect();
    let mut map = MirrorMap { objective: EntropicObjective::new(atoms, nu, costs, sigma2, cfg), step: 1.0 };
    let warmup = SolverConfig { max_iterations: WARMUP_CYCLES, objective_tolerance: 1e-9 * sigma2, ..*cfg };
    let run = squarem(&mut map, p, 1.0, &warmup)?;
    let run = polish(run, &mut map.objective, &active, KKT_TOL)?;
    let estimate = DiscreteMeasure::from_masses(nu.dim(), atoms.to_vec(), run.weights.clone())?;
    Ok(EstimatorResult::iterative(estimate, ObjectiveKind::EntropicProjection, run))
}

/// argmin_x Σ_j w_j c(x, y_j) for the cost families with a tractable minimizer.
pub fn weighted_center(c: &CostModel, points: &[Point], weights: &[f64]) -> Result<Point> {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::InvalidParameter("weighted center needs positive total weight".into()));
    }
    let d = c.dim;
    match c.kind {
        CostKind::Gaussian { .. } => Ok((0..d)
            .map(|k| points.iter().zip(weights).map(|(y, w)| w * y[k]).sum::<f64>() / total)
            .collect()),
        CostKind::PExponential { p } => Ok((0..d)
            .map(|k| {
                let coords: Vec<f64> = points.iter().map(|y| y[k]).collect();
                p_center(&coords, weights, p)
            })
            .collect()),
        _ => Err(Error::Unsupported(
            "atom updates are available for gaussian and p-exponential costs only".into(),
        )),
    }
}

/// Minimizer of Σ w_j |x − y_j|^p by bisection on the (monotone) derivative.
fn p_center(ys: &[f64], ws: &[f64], p: f64) -> f64 {
    let derivative = |x: f64| -> f64 {
        ys.iter()
            .zip(ws)
            .map(|(y, w)| {
                let d = x - y;
                if d == 0.0 {
                    0.0
                } else {
                    w * d.signum() * d.abs().powf(p - 1.0)
                }
            })
            .sum()
    };
    let mut lo = ys.iter().copied().fold(f64::INFINITY, f64::min);
    let mut hi = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if derivative(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// k-means++ seeding from the atoms of ν, weighted by ν and the cost to the
/// nearest chosen center.
pub fn kmeans_pp(nu: &DiscreteMeasure, c: &CostModel, k: usize, seed: u64) -> Result<DiscreteMeasure> {
    if k == 0 {
        return Err(Error::InvalidParameter("k must be ≥ 1".into()));
    }
    let mut rng = CounterRng::new(seed);
    let pick = |masses: &[f64], rng: &mut CounterRng| -> usize {
        let total: f64 = masses.iter().sum();
        let mut u = rng.next_f64() * total;
        for (i, m) in masses.iter().enumerate() {
            if u < *m {
                return i;
            }
            u -= m;
        }
        masses.iter().rposition(|m| *m > 0.0).unwrap_or(0)
    };
    let mut centers = vec![nu.atoms()[pick(nu.weights(), &mut rng)].clone()];
    while centers.len() < k {
        let masses: Vec<f64> = nu
            .iter()
            .map(|(y, w)| {
                let d = centers
                    .iter()
                    .map(|x| c.cost_unchecked(x, y).to_f64())
                    .fold(f64::INFINITY, f64::min);
                w * d.min(1e300)
            })
            .collect();
        let next = if masses.iter().sum::<f64>() > 0.0 {
            pick(&masses, &mut rng)
        } else {
            pick(nu.weights(), &mut rng)
        };
        centers.push(nu.atoms()[next].clone());
    }
    DiscreteMeasure::uniform(nu.dim(), centers)
}

/// EM over k free atoms and weights for the relaxed objective. The value is in
/// relaxed-transport units; `scale` converts gains for the stopping rule.
fn katom_em(
    nu: &DiscreteMeasure,
    c: &CostModel,
    sigma2: f64,
    k: usize,
    seed: u64,
    scale: f64,
    cfg: &SolverConfig,
) -> Result<EstimatorResult> {
    let mut p = kmeans_pp(nu, c, k, seed)?;
    let mut sol = relaxed_transport(&p, nu, c, sigma2)?;
    let mut trace = vec![(0, sol.value)];
    let mut converged = false;
    let mut it = 0;
    while it < cfg.max_iterations {
        let gamma = sol.posterior_rows.mass();
        let mut atoms = p.atoms().to_vec();
        let mut weights = vec![0.0; p.len()];
        for (i, atom) in atoms.iter_mut().enumerate() {
            let row: Vec<f64> = gamma.row(i).to_vec();
            weights[i] = row.iter().sum();
            if weights[i] > 0.0 {
                *atom = weighted_center(c, nu.atoms(), &row)?;
            }
        }
        let next_p = DiscreteMeasure::from_masses(nu.dim(), atoms, weights)?;
        let next = relaxed_transport(&next_p, nu, c, sigma2)?;
        let gain = (sol.value - next.value) * scale;
        if !(gain >= 0.0) {
            converged = true;
            break;
        }
        it += 1;
        p = next_p;
        sol = next;
        record(&mut trace, it, sol.value);
        if gain < cfg.objective_tolerance {
            converged = true;
            break;
        }
    }
    close_trace(&mut trace, it, sol.value);
    let run = Run { weights: Vec::new(), value: sol.value, trace, converged };
    let mut res = EstimatorResult::iterative(p, ObjectiveKind::RelaxedProjection, run);
    res.notes.push("k-atom EM is a local search; the result may be a local maximum of the likelihood".into());
    Ok(res)
}

/// Entropic projection over k free atoms from a given starting measure.
///
/// Alternates a move of every atom to the minimizer of its coupling-weighted
/// cost with a Newton solve for the weights at fixed atoms. Each part keeps
/// the objective from increasing.
pub fn project_entropic_katom_from(
    init: DiscreteMeasure,
    nu: &DiscreteMeasure,
    c: &CostModel,
    sigma2: f64,
    cfg: &SolverConfig,
) -> Result<EstimatorResult> {
    let mut p = init;
    let mut costs = CostMatrix::new(p.atoms(), nu.atoms(), c)?;
    let mut sol = sinkhorn_with_costs(&p, nu, &costs, sigma2, cfg, None)?;
    let mut trace = vec![(0, sol.dual_objective)];
    let mut converged = false;
    let mut it = 0;
    while it < cfg.max_iterations {
        let before = sol.dual_objective;
        // Atom moves; the current coupling stays feasible, so W cannot increase.
        let gamma = sol.coupling.mass().clone();
        let atoms: Vec<Point> = p
            .atoms()
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let row = gamma.row(i).to_vec();
                if row.iter().sum::<f64>() > 0.0 {
                    weighted_center(c, nu.atoms(), &row)
                } else {
                    Ok(x.clone())
                }
            })
            .collect::<Result<_>>()?;
        let moved = DiscreteMeasure::from_masses(nu.dim(), atoms, p.weights().to_vec())?;
        let moved_costs = CostMatrix::new(moved.atoms(), nu.atoms(), c)?;
        let moved_sol = sinkhorn_with_costs(&moved, nu, &moved_costs, sigma2, cfg, Some(&sol.dual_col))?;
        if moved_sol.dual_objective <= sol.dual_objective {
            p = moved;
            costs = moved_costs;
            sol = moved_sol;
        }
        let mut objective = EntropicObjective::new(p.atoms(), nu, &costs, sigma2, cfg);
        objective.warm = Some(sol.dual_col.clone());
        let allowed = vec![true; p.len()];
        let out = newton::minimize(&mut objective, p.weights().to_vec(), &allowed, KKT_TOL, NEWTON_MAX_ITER)?;
        let q = DiscreteMeasure::from_masses(nu.dim(), p.atoms().to_vec(), out.weights)?;
        match sinkhorn_with_costs(&q, nu, &costs, sigma2, cfg, Some(&sol.dual_col)) {
            Ok(next) if next.dual_objective <= sol.dual_objective => {
                p = q;
                sol = next;
            }
            Ok(_) | Err(Error::NotConverged { .. }) | Err(Error::Infeasible(_)) => {}
            Err(e) => return Err(e),
        }
        it += 1;
        record(&mut trace, it, sol.dual_objective);
        if before - sol.dual_objective < cfg.objective_tolerance {
            converged = true;
            break;
        }
    }
    close_trace(&mut trace, it, sol.dual_objective);
    let run = Run { weights: Vec::new(), value: sol.dual_objective, trace, converged };
    Ok(EstimatorResult::iterative(p, ObjectiveKind::EntropicProjection, run))
}

/// Hard (σ² = 0) projection onto k-atom measures: Lloyd iterations.
#[derive(Debug, Clone, Serialize)]
pub struct HardClustering {
    pub centers: Vec<Point>,
    pub assignment: Vec<usize>,
    /// Σ_j ν_j c(x_{a(j)}, y_j); for the Gaussian cost and uniform ν this is SSE/(2n).
    pub objective: f64,
}

fn lloyd(nu: &DiscreteMeasure, c: &CostModel, mut centers: Vec<Point>) -> Result<HardClustering> {
    let assign = |centers: &[Point]| -> (Vec<usize>, f64) {
        let mut obj = 0.0;
        let a = nu
            .iter()
            .map(|(y, w)| {
                let (best, cost) = centers
                    .iter()
                    .enumerate()
                    .map(|(i, x)| (i, c.cost_unchecked(x, y).to_f64()))
                    .fold((0, f64::INFINITY), |acc, v| if v.1 < acc.1 { v } else { acc });
                obj += w * cost;
                best
            })
            .collect();
        (a, obj)
    };
    let (mut assignment, mut objective) = assign(&centers);
    for _ in 0..10_000 {
        for (i, center) in centers.iter_mut().enumerate() {
            let w: Vec<f64> = nu
                .weights()
                .iter()
                .zip(&assignment)
                .map(|(w, a)| if *a == i { *w } else { 0.0 })
                .collect();
            if w.iter().sum::<f64>() > 0.0 {
                *center = weighted_center(c, nu.atoms(), &w)?;
            }
        }
        let (a, obj) = assign(&centers);
        let done = a == assignment || obj >= objective;
        if obj <= objective {
            assignment = a;
            objective = obj;
        }
        if done {
            break;
        }
    }
    Ok(HardClustering { centers, assignment, objective })
}

/// Best of `restarts` Lloyd runs from k-means++ seeds `seed, seed + 1, …`.
pub fn project_hard(nu: &DiscreteMeasure, c: &CostModel, k: usize, seed: u64, restarts: usize) -> Result<HardClustering> {
    let mut best: Option<HardClustering> = None;
    for r in 0..restarts.max(1) as u64 {
        let init = kmeans_pp(nu, c, k, seed.wrapping_add(r))?;
        let run = lloyd(nu, c, init.atoms().to_vec())?;
        if best.as_ref().is_none_or(|b| run.objective < b.objective) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Relaxed value of each candidate via a precomputed-cost path, used for the
/// affine identity with the likelihood.
pub fn relaxed_values_from_noise(
    candidates: &[DiscreteMeasure],
    sample: &Sample,
    noise: &NoiseModel,
) -> Result<Vec<f64>> {
    let nu = sample_measure(sample);
    candidates
        .iter()
        .map(|p| {
            let costs = CostMatrix::from_noise(p.atoms(), nu.atoms(), noise)?;
            match relaxed_with_costs(p, &nu, &costs, 1.0) {
                Ok(s) => Ok(s.value),
                Err(Error::EmptyGibbsSupport { .. }) => Ok(f64::INFINITY),
                Err(e) => Err(e),
            }
        })
        .collect()
}
