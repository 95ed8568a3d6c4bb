//! Relaxed entropic transport, where only the second marginal is pinned:
//!
//! ```text
//! W^rel_σ²(P, ν) = min_{γ ∈ M(ν), π_X γ ≪ P} ∫ c dγ + σ² [ I(γ) + D(π_X γ ‖ P) ]
//! ```
//!
//! Conditioning on each column atom y_j splits the problem into independent
//! Gibbs variational problems, so the value has the closed form
//!
//! ```text
//! W^rel = −σ² Σ_j ν_j log Σ_i p_i exp(−c(x_i, y_j) / σ²)
//! ```
//!
//! with optimal conditionals Q_j(x_i) ∝ p_i exp(−c(x_i, y_j)/σ²). The solver
//! always uses this closed form. `ν` may carry arbitrary weights; the empirical
//! (uniform) case is the one tied to maximum likelihood.

use ndarray::Array2;
use serde::Serialize;

use crate::costs::{CostModel, NoiseModel};
use crate::entropic_ot::{
    kl_divergence, mutual_information, sinkhorn_with_costs, Coupling, CostMatrix,
    SinkhornSolution, SolverConfig,
};
use crate::error::{Error, Result};
use crate::measures::{atom_key, DiscreteMeasure};

/// Tolerance on the pinned second marginal in [`vp_objective`].
pub const PINNED_MARGINAL_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Serialize)]
pub struct RelaxedSolution {
    pub value: f64,
    /// Optimal γ: column j carries ν_j · Q_j.
    pub posterior_rows: Coupling,
    /// π_X of the optimal coupling; generally differs from P.
    pub x_marginal: DiscreteMeasure,
    /// Per column atom, −σ² log Σ_i p_i exp(−c_ij/σ²).
    pub per_row_values: Vec<f64>,
}

/// Log-weights of the Gibbs posterior for one column, `None` where excluded.
fn gibbs_log_weights(p: &DiscreteMeasure, costs: &CostMatrix, col: usize, sigma2: f64) -> Vec<Option<f64>> {
    p.weights()
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            (w > 0.0 && costs.is_allowed(i, col)).then(|| w.ln() - costs.value(i, col) / sigma2)
        })
        .collect()
}

fn log_normalize(logw: &[Option<f64>]) -> Option<(f64, Vec<f64>)> {
    let max = logw.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return None;
    }
    let sum: f64 = logw.iter().flatten().map(|l| (l - max).exp()).sum();
    let lse = max + sum.ln();
    let probs = logw
        .iter()
        .map(|l| l.map_or(0.0, |l| (l - lse).exp()))
        .collect();
    Some((lse, probs))
}

/// Q(x_i) ∝ p_i exp(−c(x_i, y)/σ²).
pub fn gibbs_posterior_row(
    p: &DiscreteMeasure,
    y: &[f64],
    c: &CostModel,
    sigma2: f64,
) -> Result<DiscreteMeasure> {
    check_sigma2(sigma2)?;
    let costs = CostMatrix::new(p.atoms(), &[y.to_vec()], c)?;
    let (_, probs) =
        log_normalize(&gibbs_log_weights(p, &costs, 0, sigma2)).ok_or(Error::EmptyGibbsSupport { row: 0 })?;
    DiscreteMeasure::from_masses(p.dim(), p.atoms().to_vec(), probs)
}

fn check_sigma2(sigma2: f64) -> Result<()> {
    if !(sigma2 > 0.0) || !sigma2.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "regularization weight must be positive, got {sigma2}"
        )));
    }
    Ok(())
}

/// Closed-form relaxed transport on a precomputed cost matrix (rows = atoms of `p`,
/// columns = atoms of `nu`).
pub fn relaxed_with_costs(
    p: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    costs: &CostMatrix,
    sigma2: f64,
) -> Result<RelaxedSolution> {
    check_sigma2(sigma2)?;
    let (m, n) = (p.len(), nu.len());
    let mut mass = Array2::zeros((m, n));
    let mut per_row_values = Vec::with_capacity(n);
    let mut value = 0.0;
    for j in 0..n {
        let (lse, probs) = log_normalize(&gibbs_log_weights(p, costs, j, sigma2))
            .ok_or(Error::EmptyGibbsSupport { row: j })?;
        let row_value = -sigma2 * lse;
        per_row_values.push(row_value);
        let nu_j = nu.weights()[j];
        if nu_j > 0.0 {
            value += nu_j * row_value;
        }
        for (i, q) in probs.into_iter().enumerate() {
            mass[[i, j]] = nu_j * q;
        }
    }
    let posterior_rows = Coupling::from_parts(p.atoms().to_vec(), nu.atoms().to_vec(), mass);
    let x_marginal = posterior_rows.marginal_x();
    Ok(RelaxedSolution {
        value,
        posterior_rows,
        x_marginal,
        per_row_values,
    })
}

pub fn relaxed_transport(
    p: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    c: &CostModel,
    sigma2: f64,
) -> Result<RelaxedSolution> {
    let costs = CostMatrix::new(p.atoms(), nu.atoms(), c)?;
    relaxed_with_costs(p, nu, &costs, sigma2)
}

/// ∫ c dγ + σ² I(γ) + σ² D(π_Xγ ‖ P) for a coupling whose second marginal is ν.
pub fn vp_objective(
    p: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    gamma: &Coupling,
    c: &CostModel,
    sigma2: f64,
) -> Result<f64> {
    let costs = CostMatrix::new(gamma.row_support(), gamma.col_support(), c)?;
    vp_objective_with_costs(p, nu, gamma, &costs, sigma2)
}

pub fn vp_objective_with_costs(
    p: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    gamma: &Coupling,
    costs: &CostMatrix,
    sigma2: f64,
) -> Result<f64> {
    let error = pinned_marginal_error(gamma, nu);
    if !(error <= PINNED_MARGINAL_TOL) {
        return Err(Error::MarginalMismatch { error });
    }
    let transport = costs.transport_cost(gamma).to_f64();
    let divergence = kl_divergence(&gamma.marginal_x(), p);
    Ok(transport + sigma2 * (mutual_information(gamma) + divergence))
}

/// L1 distance between π_Y γ and ν, matching atoms bitwise.
fn pinned_marginal_error(gamma: &Coupling, nu: &DiscreteMeasure) -> f64 {
    let target = nu.mass_map();
    let got = gamma.marginal_y().canonicalize();
    let mut err = 0.0;
    let mut seen = 0.0;
    for (y, w) in got.iter() {
        let t = target.get(&atom_key(y)).copied().unwrap_or(0.0);
        err += (w - t).abs();
        seen += t;
    }
    // ν mass on atoms the coupling never mentions.
    err + (1.0 - seen).max(0.0)
}

/// Σ_j ν_j [ E_{Q_j} c(·, y_j) + σ² D(Q_j ‖ P) ], evaluated from the posteriors.
pub fn row_decomposition(
    p: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    c: &CostModel,
    sigma2: f64,
) -> Result<f64> {
    let mut total = 0.0;
    for (y, w) in nu.iter() {
        let q = gibbs_posterior_row(p, y, c, sigma2)?;
        let expected: f64 = q
            .iter()
            .filter(|(_, qw)| *qw > 0.0)
            .map(|(x, qw)| qw * c.cost_unchecked(x, y).to_f64())
            .sum();
        total += w * (expected + sigma2 * kl_divergence(&q, p));
    }
    Ok(total)
}

/// Relaxed transport with cost −log f(y − x) and regularization weight 1.
///
/// For uniform ν on a sample this equals the negative mean log-likelihood.
pub fn general_noise_transport(
    p: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    noise: &NoiseModel,
) -> Result<RelaxedSolution> {
    let costs = CostMatrix::from_noise(p.atoms(), nu.atoms(), noise)?;
    relaxed_with_costs(p, nu, &costs, 1.0)
}

/// Balanced counterpart: min_{γ ∈ M(P, ν)} −∫ log f dγ + I(γ).
pub fn general_noise_sinkhorn(
    p: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    noise: &NoiseModel,
    cfg: &SolverConfig,
) -> Result<SinkhornSolution> {
    let costs = CostMatrix::from_noise(p.atoms(), nu.atoms(), noise)?;
    sinkhorn_with_costs(p, nu, &costs, 1.0, cfg, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::costs::CostKind;
    use crate::entropic_ot::sinkhorn;
    use crate::rng::CounterRng;

    fn gauss() -> CostModel {
        CostModel::gaussian(1.0, 1).unwrap()
    }

    fn line(points: &[f64], weights: &[f64]) -> DiscreteMeasure {
        DiscreteMeasure::on_line(points, weights).unwrap()
    }

    fn random_measure(rng: &mut CounterRng, k: usize, lo: f64, hi: f64) -> DiscreteMeasure {
        DiscreteMeasure::from_masses(1, (0..k).map(|_| vec![rng.uniform(lo, hi)]).collect(), rng.simplex(k)).unwrap()
    }

    #[test]
    fn posterior_examples() {
        let d = DiscreteMeasure::dirac(vec![1.5]);
        assert_eq!(gibbs_posterior_row(&d, &[7.0], &gauss(), 0.3).unwrap().weights(), &[1.0]);

        let p1 = line(&[0.0, 4.0], &[0.5, 0.5]);
        let q = gibbs_posterior_row(&p1, &[2.0], &gauss(), 1.0).unwrap();
        assert!((q.weights()[0] - 0.5).abs() < 1e-15);

        let q = gibbs_posterior_row(&p1, &[1.0], &gauss(), 1.0).unwrap();
        let (a, b) = ((-0.5f64).exp(), (-4.5f64).exp());
        assert!((q.weights()[0] - a / (a + b)).abs() < 1e-15);
        assert!((q.weights()[0] - 0.982_013_790_037_908_5).abs() < 1e-15);
        // The posterior minimizes E_Q c + D(Q‖P) over a weight grid.
        let objective = |t: f64| {
            let qv = line(&[0.0, 4.0], &[t, 1.0 - t]);
            t * 0.5 + (1.0 - t) * 4.5 + kl_divergence(&qv, &p1)
        };
        let best_grid = (1..10_000)
            .map(|k| k as f64 / 10_000.0)
            .min_by(|a, b| objective(*a).total_cmp(&objective(*b)))
            .unwrap();
        assert!((best_grid - q.weights()[0]).abs() < 1e-4);
    }

    #[test]
    fn empty_gibbs_support_is_an_error() {
        let wfr = CostModel::new(CostKind::WfrCosine, 1).unwrap();
        let p = line(&[0.0, 0.5], &[0.5, 0.5]);
        assert!(matches!(
            gibbs_posterior_row(&p, &[4.0], &wfr, 1.0),
            Err(Error::EmptyGibbsSupport { .. })
        ));
    }

    #[test]
    fn relaxed_examples() {
        let sol = relaxed_transport(
            &DiscreteMeasure::dirac(vec![1.0]),
            &DiscreteMeasure::dirac(vec![3.0]),
            &gauss(),
            0.4,
        )
        .unwrap();
        assert!((sol.value - 2.0).abs() < 1e-15);

        let p1 = line(&[0.0, 4.0], &[0.5, 0.5]);
        let sol = relaxed_transport(&p1, &DiscreteMeasure::dirac(vec![2.0]), &gauss(), 1.0).unwrap();
        assert!((sol.value - 2.0).abs() < 1e-14);
        // Oracle: direct minimization of t·2 + (1−t)·2 + D((t, 1−t) ‖ (½, ½)) over t.
        let oracle = (1..100_000)
            .map(|k| {
                let t = k as f64 / 100_000.0;
                2.0 + t * (2.0 * t).ln() + (1.0 - t) * (2.0 * (1.0 - t)).ln()
            })
            .fold(f64::INFINITY, f64::min);
        assert!((sol.value - oracle).abs() < 1e-9);
    }

    #[test]
    fn solution_invariants() {
        let mut rng = CounterRng::new(41);
        for _ in 0..25 {
            let p = random_measure(&mut rng, 5, -2.0, 2.0);
            let nu = random_measure(&mut rng, 4, -3.0, 3.0);
            let s2 = rng.uniform(0.1, 2.0);
            let sol = relaxed_transport(&p, &nu, &gauss(), s2).unwrap();
            // Second marginal pinned exactly (up to rounding of ν_j·Σ Q_j).
            for (c, w) in sol.posterior_rows.col_sums().iter().zip(nu.weights()) {
                assert!((c - w).abs() < 1e-15);
            }
            let recomputed = vp_objective(&p, &nu, &sol.posterior_rows, &gauss(), s2).unwrap();
            assert!((recomputed - sol.value).abs() < 1e-9);
            let rows = row_decomposition(&p, &nu, &gauss(), s2).unwrap();
            assert!((rows - sol.value).abs() < 1e-10);
            // relaxed ≤ W ≤ V at any coupling with first marginal P.
            let balanced = sinkhorn(&p, &nu, &gauss(), s2, &SolverConfig::default()).unwrap();
            assert!(sol.value <= balanced.objective + 1e-10);
            let product = Coupling::product(&p, &nu);
            let at_product = vp_objective(&p, &nu, &product, &gauss(), s2).unwrap();
            assert!(balanced.objective <= at_product + 1e-10);
            // V at the balanced optimum is exactly W (D(π_X γ_P ‖ P) = 0 up to tolerance).
            let at_balanced = vp_objective(&p, &nu, &balanced.coupling, &gauss(), s2).unwrap();
            assert!((at_balanced - balanced.objective).abs() < 1e-8);
        }
    }

    #[test]
    fn closed_form_matches_row_wise_minimization() {
        // Oracle: each column minimized independently over the simplex by
        // exponentiated-gradient descent on E_Q c + σ² D(Q‖P).
        let mut rng = CounterRng::new(77);
        for _ in 0..10 {
            let p = random_measure(&mut rng, 4, -2.0, 2.0);
            let nu = random_measure(&mut rng, 3, -2.0, 2.0);
            let s2 = rng.uniform(0.3, 1.5);
            let mut total = 0.0;
            for (y, w) in nu.iter() {
                let costs: Vec<f64> = p.atoms().iter().map(|x| 0.5 * (x[0] - y[0]).powi(2)).collect();
                let mut q = vec![0.25; 4];
                let obj = |q: &[f64]| -> f64 {
                    q.iter().zip(&costs).zip(p.weights()).map(|((qi, ci), pi)| qi * ci + s2 * qi * (qi / pi).ln()).sum()
                };
                for _ in 0..20_000 {
                    let grad: Vec<f64> = q.iter().zip(&costs).zip(p.weights()).map(|((qi, ci), pi)| ci + s2 * ((qi / pi).ln() + 1.0)).collect();
                    let mut next: Vec<f64> = q.iter().zip(&grad).map(|(qi, g)| qi * (-0.5 * g / s2).exp()).collect();
                    let z: f64 = next.iter().sum();
                    next.iter_mut().for_each(|v| *v /= z);
                    q = next;
                }
                total += w * obj(&q);
            }
            let sol = relaxed_transport(&p, &nu, &gauss(), s2).unwrap();
            assert!((sol.value - total).abs() < 1e-8, "{} vs {total}", sol.value);
        }
    }

    #[test]
    fn relaxed_value_is_continuous_in_weights() {
        let mut rng = CounterRng::new(12);
        let p = random_measure(&mut rng, 4, -1.0, 1.0);
        let nu = random_measure(&mut rng, 5, -2.0, 2.0);
        let base = relaxed_transport(&p, &nu, &gauss(), 0.5).unwrap().value;
        for h in [1e-3, 1e-5, 1e-7] {
            let mut w = p.weights().to_vec();
            w[0] += h;
            let shifted = DiscreteMeasure::from_masses(1, p.atoms().to_vec(), w).unwrap();
            let v = relaxed_transport(&shifted, &nu, &gauss(), 0.5).unwrap().value;
            assert!((v - base).abs() < 20.0 * h);
        }
    }

    #[test]
    fn vp_rejects_wrong_second_marginal() {
        let p = line(&[0.0, 1.0], &[0.5, 0.5]);
        let nu = line(&[0.0, 1.0], &[0.3, 0.7]);
        let g = Coupling::product(&p, &p);
        assert!(matches!(
            vp_objective(&p, &nu, &g, &gauss(), 1.0),
            Err(Error::MarginalMismatch { .. })
        ));
        // First marginal not dominated by P gives +inf.
        let q = DiscreteMeasure::dirac(vec![5.0]);
        let g = Coupling::product(&q, &nu);
        assert_eq!(vp_objective(&p, &nu, &g, &gauss(), 1.0).unwrap(), f64::INFINITY);
    }

    #[test]
    fn gaussian_general_path_matches_after_shift() {
        let mut rng = CounterRng::new(4);
        for &s2 in &[0.5, 1.0, 2.0] {
            let noise = NoiseModel::gaussian(s2, 1).unwrap();
            let c_norm = noise.log_normalizer().unwrap();
            let p = random_measure(&mut rng, 4, -1.0, 1.0);
            let nu = random_measure(&mut rng, 6, -2.0, 2.0);
            let general = general_noise_transport(&p, &nu, &noise).unwrap().value;
            let direct = relaxed_transport(&p, &nu, noise.cost_model(), s2).unwrap().value;
            assert!((general - (direct / s2 - c_norm)).abs() < 1e-9);

            let cfg = SolverConfig::default();
            let general = general_noise_sinkhorn(&p, &nu, &noise, &cfg).unwrap().objective;
            let direct = sinkhorn(&p, &nu, noise.cost_model(), s2, &cfg).unwrap().objective;
            assert!((general - (direct / s2 - c_norm)).abs() < 1e-9);
        }
    }

    #[test]
    fn wfr_feasible_instances_are_finite() {
        let noise = NoiseModel::new(CostKind::WfrCosine, 1).unwrap();
        let p = line(&[0.0, 0.3, 0.6], &[0.2, 0.5, 0.3]);
        let nu = line(&[0.1, 0.5, 0.9], &[0.3, 0.3, 0.4]);
        assert!(general_noise_transport(&p, &nu, &noise).unwrap().value.is_finite());
        let sol = general_noise_sinkhorn(&p, &nu, &noise, &SolverConfig::default()).unwrap();
        assert!(sol.objective.is_finite());
    }
}
