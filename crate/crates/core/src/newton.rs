//! Active-set Newton method for smooth convex functions on the probability simplex.

use nalgebra::{DMatrix, DVector};

use crate::error::Result;

/// Value, gradient and Hessian of the objective at a point.
pub(crate) struct Local {
    pub value: f64,
    pub grad: Vec<f64>,
    /// Hessian restricted to `support`, in the same order.
    pub hess: DMatrix<f64>,
}

pub(crate) trait SmoothObjective {
    /// Objective value; `None` when the point cannot be evaluated.
    fn value(&mut self, p: &[f64]) -> Result<Option<f64>>;
    /// Full gradient and the Hessian block on `support`.
    fn local(&mut self, p: &[f64], support: &[usize]) -> Result<Option<Local>>;
}

pub(crate) struct Outcome {
    pub weights: Vec<f64>,
    pub value: f64,
    pub values: Vec<f64>,
    pub converged: bool,
}

const ARMIJO: f64 = 1e-4;
/// Smallest coordinate displacement tried by the line search.
const MIN_MOVE: f64 = 1e-17;
/// A stalled run still counts as converged when its gap is within this
/// factor of the requested tolerance.
const STALL_FACTOR: f64 = 1e4;
/// Iterations without progress in value or gap before giving up.
const PATIENCE: usize = 8;
const ROUNDING: f64 = 1e-15;
/// A vertex outside the support enters once the Newton step on the support
/// promises less than this fraction of the gap.
const ENTER_RATIO: f64 = 1e-3;

/// Newton direction on the support under Σ d = 0, with a small ridge added
/// until the bordered system is solvable.
fn newton_direction(hess: &DMatrix<f64>, grad: &[f64]) -> Option<Vec<f64>> {
    let s = grad.len();
    if s <= 1 {
        return Some(vec![0.0; s]);
    }
    let scale = (0..s).map(|i| hess[(i, i)].abs()).fold(0.0, f64::max).max(1e-300);
    let mut ridge = 1e-13 * scale;
    for _ in 0..8 {
        let mut kkt = DMatrix::zeros(s + 1, s + 1);
        for i in 0..s {
            for j in 0..s {
                kkt[(i, j)] = hess[(i, j)];
            }
            kkt[(i, i)] += ridge;
            kkt[(i, s)] = 1.0;
            kkt[(s, i)] = 1.0;
        }
        let mut rhs = DVector::zeros(s + 1);
        for i in 0..s {
            rhs[i] = -grad[i];
        }
        if let Some(sol) = kkt.lu().solve(&rhs) {
            let d: Vec<f64> = (0..s).map(|i| sol[i]).collect();
            if d.iter().all(|x| x.is_finite()) {
                return Some(d);
            }
        }
        ridge *= 100.0;
    }
    None
}

fn normalized(mut q: Vec<f64>) -> Vec<f64> {
    q.iter_mut().for_each(|w| *w = w.max(0.0));
    let total: f64 = q.iter().sum();
    q.iter_mut().for_each(|w| *w /= total);
    q
}

/// Backtracking from `alpha` along `p + α d` until the Armijo condition holds.
/// Once the predicted decrease is below the rounding noise of the value, any
/// step that does not increase the value is accepted.
fn line_search(
    obj: &mut impl SmoothObjective,
    p: &[f64],
    d: &[f64],
    value: f64,
    slope: f64,
    mut alpha: f64,
    blocking: Option<(usize, f64)>,
) -> Result<Option<(Vec<f64>, f64)>> {
    let size = d.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let noise = 4.0 * ROUNDING * (1.0 + value.abs());
    let flat = -slope <= noise;
    while alpha * size > MIN_MOVE {
        let mut q: Vec<f64> = p.iter().zip(d).map(|(a, b)| a + alpha * b).collect();
        if let Some((b, amax)) = blocking {
            if alpha >= amax {
                q[b] = 0.0;
            }
        }
        let q = normalized(q);
        if let Some(v) = obj.value(&q)? {
            if v <= value + ARMIJO * alpha * slope || (flat && v <= value) {
                return Ok(Some((q, v)));
            }
        }
        alpha *= 0.5;
    }
    Ok(None)
}

/// Minimizes `obj` over the simplex restricted to `allowed` coordinates,
/// starting from `init`, which must already be a probability vector.
///
/// Coordinates leave the support when a Newton step would make them negative
/// and enter it through Frank-Wolfe steps, which also take over whenever the
/// Newton step fails to decrease the objective. Stops once the Frank-Wolfe gap
/// Σ p_i ∂_i F − min_i ∂_i F, an upper bound on the suboptimality, is at most
/// `kkt_tol`, or once the value has stopped decreasing beyond rounding.
pub(crate) fn minimize(
    obj: &mut impl SmoothObjective,
    init: Vec<f64>,
    allowed: &[bool],
    kkt_tol: f64,
    max_iter: usize,
) -> Result<Outcome> {
    let mut p = init;
    let mut values = Vec::new();
    let mut converged = false;
    let mut value = f64::NAN;
    let (mut best, mut best_gap, mut stale) = (f64::INFINITY, f64::INFINITY, 0);
    let mut gap = f64::INFINITY;
    // Values never increase, so the smallest gap seen bounds the final
    // suboptimality as well.
    let mut lowest_gap = f64::INFINITY;
    for _ in 0..max_iter {
        let support: Vec<usize> = (0..p.len()).filter(|&i| p[i] > 0.0).collect();
        let Some(local) = obj.local(&p, &support)? else {
            break;
        };
        value = local.value;
        values.push(value);
        let lambda: f64 = support.iter().map(|&i| p[i] * local.grad[i]).sum();
        let Some(vertex) = (0..p.len())
            .filter(|&i| allowed[i] || p[i] > 0.0)
            .min_by(|&a, &b| local.grad[a].total_cmp(&local.grad[b]))
        else {
            break;
        };
        gap = lambda - local.grad[vertex];
        lowest_gap = lowest_gap.min(gap);
        log::trace!("newton: value {value:e}, gap {gap:e}, support {}", support.len());
        if gap <= kkt_tol {
            converged = true;
            break;
        }
        // Progress is either a value decrease beyond rounding or, once values are
        // flat, a halving of the gap.
        if value < best - ROUNDING * (1.0 + value.abs()) || gap < 0.5 * best_gap {
            (best, best_gap, stale) = (value.min(best), gap.min(best_gap), 0);
        } else {
            stale += 1;
            if stale >= PATIENCE {
                converged = lowest_gap <= STALL_FACTOR * kkt_tol;
                break;
            }
        }
        let g_s: Vec<f64> = support.iter().map(|&i| local.grad[i]).collect();
        if let Some(d_s) = newton_direction(&local.hess, &g_s) {
            // Centering both sides keeps the slope accurate when it is far smaller
            // than the gradient itself.
            let shift = d_s.iter().sum::<f64>() / d_s.len() as f64;
            let d_s: Vec<f64> = d_s.iter().map(|x| x - shift).collect();
            let slope: f64 = g_s.iter().zip(&d_s).map(|(a, b)| (a - lambda) * b).sum();
            // Once the support is nearly optimal, progress has to come from
            // bringing in the vertex.
            let enter = p[vertex] == 0.0 && -slope < ENTER_RATIO * gap;
            if slope < 0.0 && !enter {
                let mut d = vec![0.0; p.len()];
                let mut blocking = None;
                let mut amax = f64::INFINITY;
                for (k, &i) in support.iter().enumerate() {
                    d[i] = d_s[k];
                    if d_s[k] < 0.0 && p[i] / -d_s[k] < amax {
                        amax = p[i] / -d_s[k];
                        blocking = Some(i);
                    }
                }
                let blocking = blocking.filter(|_| amax <= 1.0).map(|b| (b, amax));
                if let Some((q, v)) = line_search(obj, &p, &d, value, slope, amax.min(1.0), blocking)? {
                    (p, value) = (q, v);
                    continue;
                }
            }
        }
        let mut d: Vec<f64> = p.iter().map(|w| -w).collect();
        d[vertex] += 1.0;
        match line_search(obj, &p, &d, value, local.grad[vertex] - lambda, 1.0, None)? {
            Some((q, v)) => (p, value) = (q, v),
            None => {
                // No representable decrease left along either direction.
                converged = lowest_gap <= STALL_FACTOR * kkt_tol;
                break;
            }
        }
    }
    if value.is_nan() {
        value = obj.value(&p)?.unwrap_or(f64::NAN);
    }
    log::debug!("newton: {} iterations, gap {gap:e}, converged {converged}", values.len());
    Ok(Outcome { weights: p, value, values, converged })
}
