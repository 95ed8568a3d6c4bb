//! Translation-invariant ground costs and the additive noise models that induce them.
//!
//! Every built-in noise density has the form
//!
//! ```text
//! log f(z) = C − cost(z, 0) / s
//! ```
//!
//! where `C` is [`NoiseModel::log_normalizer`] and `s` is
//! [`CostModel::effective_sigma2`]: the noise variance for the Gaussian model
//! (whose cost is ½‖z‖²), and 1 for the other models, whose costs are already
//! the negative log-density up to `C`.

use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Gamma, Normal};

use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::rng::CounterRng;

/// Nonnegative cost extended with +∞ for forbidden transport routes.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub enum ExtReal {
    Finite(f64),
    Infinite,
}

impl ExtReal {
    pub fn finite(self) -> Option<f64> {
        match self {
            ExtReal::Finite(v) => Some(v),
            ExtReal::Infinite => None,
        }
    }

    pub fn is_finite(self) -> bool {
        matches!(self, ExtReal::Finite(_))
    }

    /// IEEE view, mapping the forbidden value to `f64::INFINITY`.
    pub fn to_f64(self) -> f64 {
        self.finite().unwrap_or(f64::INFINITY)
    }
}

impl std::ops::Add for ExtReal {
    type Output = ExtReal;

    fn add(self, rhs: ExtReal) -> ExtReal {
        match (self, rhs) {
            (ExtReal::Finite(a), ExtReal::Finite(b)) => ExtReal::Finite(a + b),
            _ => ExtReal::Infinite,
        }
    }
}

impl std::fmt::Display for ExtReal {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ExtReal::Finite(v) => write!(f, "{v}"),
            ExtReal::Infinite => write!(f, "+inf"),
        }
    }
}

/// Radial cost profile: piecewise-linear in ‖z‖ over `radii`, forbidden beyond
/// the last radius.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabulatedCost {
    pub radii: Vec<f64>,
    pub values: Vec<f64>,
    #[serde(default)]
    pub log_normalizer: Option<f64>,
}

impl TabulatedCost {
    fn validate(&self) -> Result<()> {
        if self.radii.is_empty() || self.radii.len() != self.values.len() {
            return Err(Error::InvalidParameter(
                "tabulated cost needs matching, non-empty radii and values".into(),
            ));
        }
        if self.radii[0] != 0.0 || self.radii.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidParameter(
                "tabulated radii must start at 0 and increase strictly".into(),
            ));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("tabulated values must be finite".into()));
        }
        Ok(())
    }

    fn eval(&self, r: f64) -> ExtReal {
        let last = self.radii.len() - 1;
        if r > self.radii[last] {
            return ExtReal::Infinite;
        }
        if last == 0 {
            return ExtReal::Finite(self.values[0]);
        }
        let k = self.radii.partition_point(|&x| x <= r).clamp(1, last);
        let (r0, r1) = (self.radii[k - 1], self.radii[k]);
        let t = (r - r0) / (r1 - r0);
        ExtReal::Finite(self.values[k - 1] * (1.0 - t) + self.values[k] * t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum CostKind {
    /// ½‖x − y‖², paired with N(0, σ² I) noise.
    Gaussian { sigma2: f64 },
    /// ‖x − y‖_p^p, paired with f(z) ∝ exp(−‖z‖_p^p).
    PExponential { p: f64 },
    /// −log cos²(‖x − y‖ ∧ π/2), paired with f(z) ∝ cos²(‖z‖) on the ball of radius π/2.
    WfrCosine,
    Custom(TabulatedCost),
}

impl CostKind {
    fn validate(&self) -> Result<()> {
        match self {
            CostKind::Gaussian { sigma2 } if !(*sigma2 > 0.0 && sigma2.is_finite()) => Err(
                Error::InvalidParameter(format!("gaussian sigma2 must be positive, got {sigma2}")),
            ),
            CostKind::PExponential { p } if !(*p >= 1.0 && p.is_finite()) => Err(
                Error::InvalidParameter(format!("p-exponential needs p ≥ 1, got {p}")),
            ),
            CostKind::Custom(t) => t.validate(),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    #[serde(flatten)]
    pub kind: CostKind,
    pub dim: usize,
}

impl CostModel {
    pub fn new(kind: CostKind, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter("cost dimension must be positive".into()));
        }
        kind.validate()?;
        Ok(Self { kind, dim })
    }

    pub fn gaussian(sigma2: f64, dim: usize) -> Result<Self> {
        Self::new(CostKind::Gaussian { sigma2 }, dim)
    }

    /// Divisor turning the cost into a negative log-density (up to a constant).
    pub fn effective_sigma2(&self) -> f64 {
        match self.kind {
            CostKind::Gaussian { sigma2 } => sigma2,
            _ => 1.0,
        }
    }

    pub fn cost(&self, x: &[f64], y: &[f64]) -> Result<ExtReal> {
        self.check_dim(x.len())?;
        self.check_dim(y.len())?;
        Ok(self.cost_unchecked(x, y))
    }

    pub(crate) fn cost_unchecked(&self, x: &[f64], y: &[f64]) -> ExtReal {
        let diff = x.iter().zip(y).map(|(a, b)| a - b);
        match &self.kind {
            CostKind::Gaussian { .. } => ExtReal::Finite(0.5 * diff.map(|d| d * d).sum::<f64>()),
            CostKind::PExponential { p } => {
                let p = *p;
                ExtReal::Finite(diff.map(|d| d.abs().powf(p)).sum())
            }
            CostKind::WfrCosine => {
                let r = diff.map(|d| d * d).sum::<f64>().sqrt();
                if r >= FRAC_PI_2 {
                    ExtReal::Infinite
                } else {
                    let c = r.cos();
                    ExtReal::Finite(-(c * c).ln())
                }
            }
            CostKind::Custom(table) => table.eval(diff.map(|d| d * d).sum::<f64>().sqrt()),
        }
    }

    fn check_dim(&self, found: usize) -> Result<()> {
        if found != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found,
            });
        }
        Ok(())
    }
}

/// Additive noise Z with density f, paired with the cost −log f (after rescaling).
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    cost: CostModel,
    log_normalizer: Option<f64>,
}

impl NoiseModel {
    pub fn new(kind: CostKind, dim: usize) -> Result<Self> {
        let cost = CostModel::new(kind, dim)?;
        let log_normalizer = match &cost.kind {
            CostKind::Gaussian { sigma2 } => Some(-0.5 * dim as f64 * (2.0 * PI * sigma2).ln()),
            // ∫ exp(−|t|^p) dt = 2 Γ(1 + 1/p) per coordinate.
            CostKind::PExponential { p } => {
                Some(-(dim as f64) * (2.0f64.ln() + ln_gamma(1.0 + 1.0 / p)))
            }
            CostKind::WfrCosine => Some(-wfr_mass(dim).ln()),
            CostKind::Custom(t) => t.log_normalizer,
        };
        Ok(Self {
            cost,
            log_normalizer,
        })
    }

    pub fn gaussian(sigma2: f64, dim: usize) -> Result<Self> {
        Self::new(CostKind::Gaussian { sigma2 }, dim)
    }

    pub fn dim(&self) -> usize {
        self.cost.dim
    }

    pub fn kind(&self) -> &CostKind {
        &self.cost.kind
    }

    pub fn cost_model(&self) -> &CostModel {
        &self.cost
    }

    pub fn log_normalizer(&self) -> Result<f64> {
        self.log_normalizer.ok_or(Error::MissingNormalizer)
    }

    /// Exact log-density; `-inf` outside the support.
    pub fn log_density(&self, z: &[f64]) -> Result<f64> {
        self.cost.check_dim(z.len())?;
        let c = self.log_normalizer()?;
        Ok(match &self.cost.kind {
            CostKind::Gaussian { sigma2 } => {
                c - z.iter().map(|v| v * v).sum::<f64>() / (2.0 * sigma2)
            }
            CostKind::PExponential { p } => c - z.iter().map(|v| v.abs().powf(*p)).sum::<f64>(),
            CostKind::WfrCosine => {
                let r = z.iter().map(|v| v * v).sum::<f64>().sqrt();
                if r >= FRAC_PI_2 {
                    f64::NEG_INFINITY
                } else {
                    let cr = r.cos();
                    c + (cr * cr).ln()
                }
            }
            CostKind::Custom(t) => match t.eval(z.iter().map(|v| v * v).sum::<f64>().sqrt()) {
                ExtReal::Finite(v) => c - v,
                ExtReal::Infinite => f64::NEG_INFINITY,
            },
        })
    }

    /// One draw of Z, by inverse-CDF transforms of the counter stream.
    pub fn sample(&self, rng: &mut CounterRng) -> Result<Vec<f64>> {
        let d = self.dim();
        match &self.cost.kind {
            CostKind::Gaussian { sigma2 } => {
                let s = sigma2.sqrt();
                Ok((0..d).map(|_| s * standard_normal(rng)).collect())
            }
            CostKind::PExponential { p } => {
                // |Z_k|^p ~ Gamma(1/p, 1), sign symmetric.
                let gamma = Gamma::new(1.0 / p, 1.0)
                    .map_err(|e| Error::InvalidParameter(e.to_string()))?;
                Ok((0..d)
                    .map(|_| {
                        let magnitude = gamma.inverse_cdf(rng.next_f64()).powf(1.0 / p);
                        if rng.next_f64() < 0.5 {
                            -magnitude
                        } else {
                            magnitude
                        }
                    })
                    .collect())
            }
            CostKind::WfrCosine => {
                let r = wfr_radius_quantile(d, rng.next_f64());
                let dir = unit_direction(d, rng);
                Ok(dir.into_iter().map(|u| r * u).collect())
            }
            CostKind::Custom(_) => Err(Error::Unsupported(
                "custom noise models have no sampler".into(),
            )),
        }
    }
}

/// Standard normal CDF, Φ(x) = ½ erfc(−x/√2).
pub fn normal_cdf(x: f64) -> f64 {
    let t = x / std::f64::consts::SQRT_2;
    if x < 0.0 {
        0.5 * libm::erfc(-t)
    } else {
        1.0 - 0.5 * libm::erfc(t)
    }
}

fn standard_normal(rng: &mut CounterRng) -> f64 {
    Normal::standard().inverse_cdf(rng.next_f64())
}

fn unit_direction(d: usize, rng: &mut CounterRng) -> Vec<f64> {
    if d == 1 {
        return vec![if rng.next_f64() < 0.5 { -1.0 } else { 1.0 }];
    }
    loop {
        let v: Vec<f64> = (0..d).map(|_| standard_normal(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-300 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Surface area of the unit sphere in R^d.
fn sphere_area(d: usize) -> f64 {
    let half = d as f64 / 2.0;
    2.0 * PI.powf(half) / ln_gamma(half).exp()
}

/// ∫_0^r s^{d-1} cos²(s) ds.
fn wfr_radial_integral(d: usize, r: f64) -> f64 {
    match d {
        1 => 0.5 * r + 0.25 * (2.0 * r).sin(),
        2 => 0.25 * r * r + 0.25 * r * (2.0 * r).sin() + 0.125 * ((2.0 * r).cos() - 1.0),
        _ => simpson(|s| s.powi(d as i32 - 1) * s.cos().powi(2), 0.0, r, 4096),
    }
}

/// ∫ cos²(‖z‖) over the ball of radius π/2 in R^d.
fn wfr_mass(d: usize) -> f64 {
    sphere_area(d) * wfr_radial_integral(d, FRAC_PI_2)
}

fn wfr_radius_quantile(d: usize, u: f64) -> f64 {
    let total = wfr_radial_integral(d, FRAC_PI_2);
    let (mut lo, mut hi) = (0.0, FRAC_PI_2);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if wfr_radial_integral(d, mid) < u * total {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Composite Simpson rule with `intervals` (rounded up to even) panels.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, intervals: usize) -> f64 {
    let n = intervals + intervals % 2;
    let h = (b - a) / n as f64;
    let mut acc = f(a) + f(b);
    for k in 1..n {
        let w = if k % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(a + k as f64 * h);
    }
    acc * h / 3.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const LOG_SQRT_2PI: f64 = 0.918_938_533_204_672_7;

    fn all_builtins(dim: usize) -> Vec<NoiseModel> {
        vec![
            NoiseModel::gaussian(1.0, dim).unwrap(),
            NoiseModel::gaussian(0.3, dim).unwrap(),
            NoiseModel::new(CostKind::PExponential { p: 1.0 }, dim).unwrap(),
            NoiseModel::new(CostKind::PExponential { p: 3.0 }, dim).unwrap(),
            NoiseModel::new(CostKind::WfrCosine, dim).unwrap(),
        ]
    }

    #[test]
    fn gaussian_cost_examples() {
        let c = CostModel::gaussian(1.0, 1).unwrap();
        assert_eq!(c.cost(&[1.3], &[1.3]).unwrap(), ExtReal::Finite(0.0));
        assert_eq!(c.cost(&[0.0], &[4.0]).unwrap(), ExtReal::Finite(8.0));
        assert!(matches!(
            c.cost(&[0.0, 1.0], &[4.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn wfr_cost_examples() {
        let c = CostModel::new(CostKind::WfrCosine, 1).unwrap();
        assert_eq!(c.cost(&[0.0], &[FRAC_PI_2]).unwrap(), ExtReal::Infinite);
        assert_eq!(c.cost(&[0.0], &[3.0]).unwrap(), ExtReal::Infinite);
        assert_eq!(c.cost(&[0.7], &[0.7]).unwrap(), ExtReal::Finite(0.0));
    }

    #[test]
    fn log_density_examples() {
        let g = NoiseModel::gaussian(1.0, 1).unwrap();
        assert!((g.log_density(&[0.0]).unwrap() + LOG_SQRT_2PI).abs() < 1e-15);
        assert!((g.log_density(&[4.0]).unwrap() - (-LOG_SQRT_2PI - 8.0)).abs() < 1e-14);
        let w = NoiseModel::new(CostKind::WfrCosine, 1).unwrap();
        assert_eq!(w.log_density(&[2.0]).unwrap(), f64::NEG_INFINITY);
    }

    #[test]
    fn log_normalizer_examples() {
        assert!((NoiseModel::gaussian(1.0, 1).unwrap().log_normalizer().unwrap() + LOG_SQRT_2PI).abs() < 1e-15);
        let g2 = NoiseModel::gaussian(2.0, 2).unwrap();
        assert!((g2.log_normalizer().unwrap() + (4.0 * PI).ln()).abs() < 1e-14);
        let w = NoiseModel::new(CostKind::WfrCosine, 1).unwrap();
        assert!((w.log_normalizer().unwrap() + FRAC_PI_2.ln()).abs() < 1e-15);
        let custom = NoiseModel::new(
            CostKind::Custom(TabulatedCost {
                radii: vec![0.0, 1.0],
                values: vec![0.0, 1.0],
                log_normalizer: None,
            }),
            1,
        )
        .unwrap();
        assert!(matches!(custom.log_normalizer(), Err(Error::MissingNormalizer)));
    }

    #[test]
    fn normalizers_match_quadrature() {
        // Quadrature oracle for each built-in in d = 1.
        for noise in all_builtins(1) {
            let mass = simpson(|z| noise.log_density(&[z]).unwrap().exp(), -40.0, 40.0, 400_000);
            assert!((mass - 1.0).abs() < 1e-9, "{:?}: {mass}", noise.kind());
        }
        // Gaussian σ² = 2 in d = 2: the density factorizes, so the 2-d mass is the square.
        let g2 = NoiseModel::gaussian(2.0, 2).unwrap();
        let line = simpson(|z| (-z * z / 4.0).exp(), -40.0, 40.0, 100_000);
        assert!((g2.log_normalizer().unwrap() + 2.0 * line.ln()).abs() < 1e-10);
        // WFR in d = 2 against polar quadrature.
        let w2 = NoiseModel::new(CostKind::WfrCosine, 2).unwrap();
        let polar = 2.0 * PI * simpson(|r| r * r.cos().powi(2), 0.0, FRAC_PI_2, 100_000);
        assert!((w2.log_normalizer().unwrap() + polar.ln()).abs() < 1e-12);
    }

    #[test]
    fn p2_matches_gaussian_up_to_factor() {
        // ‖z‖² = 2 · ½‖z‖², and exp(−‖z‖²) is the N(0, ½ I) density up to its normalizer.
        let p2 = NoiseModel::new(CostKind::PExponential { p: 2.0 }, 2).unwrap();
        let g = NoiseModel::gaussian(0.5, 2).unwrap();
        assert!((p2.log_normalizer().unwrap() - g.log_normalizer().unwrap()).abs() < 1e-14);
        let (x, y) = ([0.3, -1.2], [1.1, 0.4]);
        let cp = p2.cost_model().cost(&x, &y).unwrap().to_f64();
        let cg = g.cost_model().cost(&x, &y).unwrap().to_f64();
        assert!((cp - 2.0 * cg).abs() < 1e-14);
    }

    #[test]
    fn tabulated_profile_interpolates() {
        let t = TabulatedCost {
            radii: vec![0.0, 1.0, 2.0],
            values: vec![0.0, 1.0, 3.0],
            log_normalizer: Some(0.0),
        };
        let c = CostModel::new(CostKind::Custom(t), 1).unwrap();
        assert_eq!(c.cost(&[0.0], &[1.5]).unwrap(), ExtReal::Finite(2.0));
        assert_eq!(c.cost(&[0.0], &[2.5]).unwrap(), ExtReal::Infinite);
    }

    #[test]
    fn samplers_are_deterministic_and_supported() {
        for noise in all_builtins(2) {
            let mut a = CounterRng::new(11);
            let mut b = CounterRng::new(11);
            for _ in 0..50 {
                let z = noise.sample(&mut a).unwrap();
                assert_eq!(z, noise.sample(&mut b).unwrap());
                assert!(noise.log_density(&z).unwrap().is_finite());
            }
        }
    }

    #[test]
    fn sampler_moments() {
        let n = 20_000;
        let mut rng = CounterRng::new(5);
        let lap = NoiseModel::new(CostKind::PExponential { p: 1.0 }, 1).unwrap();
        // Var of density ½e^{−|t|} is 2.
        let var = (0..n).map(|_| lap.sample(&mut rng).unwrap()[0].powi(2)).sum::<f64>() / n as f64;
        assert!((var - 2.0).abs() < 0.1, "{var}");
        // Var of cos² on [−π/2, π/2] normalized: π²/12 − 1/2.
        let w = NoiseModel::new(CostKind::WfrCosine, 1).unwrap();
        let var = (0..n).map(|_| w.sample(&mut rng).unwrap()[0].powi(2)).sum::<f64>() / n as f64;
        assert!((var - (PI * PI / 12.0 - 0.5)).abs() < 0.02, "{var}");
    }

    #[test]
    fn normal_cdf_values() {
        assert!((normal_cdf(0.0) - 0.5).abs() < 1e-16);
        assert!((normal_cdf(1.0) - 0.841_344_746_068_542_9).abs() < 1e-15, "{}", normal_cdf(1.0));
        assert!((normal_cdf(-2.99) - 0.001_394_887_235_492_249_5).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn cost_is_scaled_negative_log_density(x in -3.0f64..3.0, y in -3.0f64..3.0, x2 in -1.0f64..1.0, y2 in -1.0f64..1.0) {
            for noise in all_builtins(2) {
                let (a, b) = ([x, x2], [y, y2]);
                let z = [x - y, x2 - y2];
                let cost = noise.cost_model().cost(&a, &b).unwrap();
                prop_assert_eq!(cost, noise.cost_model().cost(&b, &a).unwrap());
                if let ExtReal::Finite(c) = cost {
                    let lhs = -(noise.log_density(&z).unwrap() - noise.log_normalizer().unwrap())
                        * noise.cost_model().effective_sigma2();
                    prop_assert!((lhs - c).abs() < 1e-12 * (1.0 + c), "{:?}: {} vs {}", noise.kind(), lhs, c);
                } else {
                    prop_assert_eq!(noise.log_density(&z).unwrap(), f64::NEG_INFINITY);
                }
            }
        }
    }
}
