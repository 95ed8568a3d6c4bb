use entropic_deconv::costs::{CostModel, NoiseModel};
use entropic_deconv::deconvolution::{log_likelihood, mle_em_grid, project_entropic, MixtureClass};
use entropic_deconv::entropic_ot::{
    kl_product_decomposition_check, mutual_information, sinkhorn, transport_cost, Coupling, SolverConfig,
};
use entropic_deconv::measures::{empirical_measure, DiscreteMeasure, Sample};
use entropic_deconv::relaxed_ot::{relaxed_transport, row_decomposition, vp_objective};
use ndarray::Array2;
use proptest::prelude::*;

fn measure() -> impl Strategy<Value = DiscreteMeasure> {
    prop::collection::vec((-3.0f64..3.0, 0.05f64..1.0), 1..5).prop_map(|pairs| {
        let atoms: Vec<Vec<f64>> = pairs.iter().map(|(x, _)| vec![*x]).collect();
        let masses = pairs.iter().map(|(_, w)| *w).collect();
        DiscreteMeasure::from_masses(1, atoms, masses).unwrap()
    })
}

fn sample() -> impl Strategy<Value = Sample> {
    prop::collection::vec(-4.0f64..4.0, 1..8).prop_map(|ys| Sample::on_line(&ys).unwrap())
}

fn gauss() -> CostModel {
    CostModel::gaussian(1.0, 1).unwrap()
}

fn product(mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> Coupling {
    Coupling::product(mu, nu)
}

fn cfg() -> SolverConfig {
    SolverConfig::default()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn sinkhorn_error_trace_decreases(mu in measure(), nu in measure(), sigma2 in 0.2f64..3.0) {
        let sol = sinkhorn(&mu, &nu, &gauss(), sigma2, &cfg()).unwrap();
        prop_assert!(sol.marginal_error <= 1e-10);
        prop_assert!(sol.error_trace.iter().skip(1).zip(sol.error_trace.iter().skip(2)).all(|(a, b)| b <= a));
    }

    #[test]
    fn sinkhorn_beats_the_product_coupling(mu in measure(), nu in measure(), sigma2 in 0.2f64..3.0) {
        let sol = sinkhorn(&mu, &nu, &gauss(), sigma2, &cfg()).unwrap();
        let pi = product(&mu, &nu);
        let bound = transport_cost(&pi, &gauss()).to_f64() + sigma2 * mutual_information(&pi);
        prop_assert!(sol.objective <= bound + 1e-9);
        let direct = transport_cost(&sol.coupling, &gauss()).to_f64() + sigma2 * mutual_information(&sol.coupling);
        prop_assert!((direct - sol.objective).abs() <= 1e-12 * (1.0 + direct.abs()));
    }

    #[test]
    fn regularization_path_is_monotone(mu in measure(), nu in measure(), a in 0.2f64..1.0, gap in 0.2f64..2.0) {
        let (lo, hi) = (a, a + gap);
        let s_lo = sinkhorn(&mu, &nu, &gauss(), lo, &cfg()).unwrap();
        let s_hi = sinkhorn(&mu, &nu, &gauss(), hi, &cfg()).unwrap();
        let c_lo = transport_cost(&s_lo.coupling, &gauss()).to_f64();
        let c_hi = transport_cost(&s_hi.coupling, &gauss()).to_f64();
        prop_assert!(c_lo <= c_hi + 1e-8, "{c_lo} > {c_hi}");
        prop_assert!(mutual_information(&s_lo.coupling) >= mutual_information(&s_hi.coupling) - 1e-8);
    }

    #[test]
    fn kl_of_a_product_decomposes(m in 1usize..7, n in 1usize..7, raw in prop::collection::vec(0.01f64..1.0, 49 + 14)) {
        let mass: Vec<f64> = raw[..m * n].to_vec();
        let total: f64 = mass.iter().sum();
        let g = Coupling::new(
            (0..m).map(|i| vec![i as f64]).collect(),
            (0..n).map(|j| vec![j as f64]).collect(),
            Array2::from_shape_vec((m, n), mass.iter().map(|w| w / total).collect()).unwrap(),
        ).unwrap();
        let alpha = DiscreteMeasure::from_masses(1, g.row_support().to_vec(), raw[49..49 + m].to_vec()).unwrap();
        let beta = DiscreteMeasure::from_masses(1, g.col_support().to_vec(), raw[56..56 + n].to_vec()).unwrap();
        prop_assert!(kl_product_decomposition_check(&g, &alpha, &beta) <= 1e-10);
    }

    #[test]
    fn relaxed_value_sits_below_the_balanced_one(p in measure(), nu in measure(), sigma2 in 0.2f64..3.0) {
        let rel = relaxed_transport(&p, &nu, &gauss(), sigma2).unwrap();
        let bal = sinkhorn(&p, &nu, &gauss(), sigma2, &cfg()).unwrap();
        prop_assert!(rel.value <= bal.objective + 1e-9);
        // Any coupling with first marginal P is feasible for the variational form.
        let vp_bal = vp_objective(&p, &nu, &bal.coupling, &gauss(), sigma2).unwrap();
        prop_assert!(bal.objective <= vp_bal + 1e-9);
        let vp_prod = vp_objective(&p, &nu, &product(&p, &nu), &gauss(), sigma2).unwrap();
        prop_assert!(bal.objective <= vp_prod + 1e-9);
        let rows = row_decomposition(&p, &nu, &gauss(), sigma2).unwrap();
        prop_assert!((rows - rel.value).abs() <= 1e-10 * (1.0 + rel.value.abs()));
    }

    #[test]
    fn relaxed_value_tracks_the_likelihood(p in measure(), y in sample(), sigma2 in 0.2f64..3.0) {
        let noise = NoiseModel::gaussian(sigma2, 1).unwrap();
        let nu = empirical_measure(&y);
        let rel = relaxed_transport(&p, &nu, noise.cost_model(), sigma2).unwrap().value;
        let ll = log_likelihood(&p, &y, &noise).unwrap();
        let implied = -sigma2 * ll / y.n() as f64 + sigma2 * noise.log_normalizer().unwrap();
        prop_assert!((rel - implied).abs() <= 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn grid_estimators_stay_on_the_grid(y in sample(), lo in -3.0f64..0.0, width in 1.0f64..5.0, m in 2usize..9) {
        let noise = NoiseModel::gaussian(1.0, 1).unwrap();
        let atoms: Vec<Vec<f64>> = (0..m).map(|i| vec![lo + width * i as f64 / (m - 1) as f64]).collect();
        let em = mle_em_grid(&y, &atoms, &noise, &cfg()).unwrap();
        prop_assert!(em.trace.windows(2).all(|w| w[1].1 <= w[0].1), "{:?}", em.trace);
        prop_assert!(em.estimate.atoms().iter().all(|a| atoms.contains(a)));
        let proj = project_entropic(&MixtureClass::Grid { atoms: atoms.clone() }, &empirical_measure(&y), noise.cost_model(), 1.0, &cfg()).unwrap();
        prop_assert!(proj.trace.windows(2).all(|w| w[1].1 <= w[0].1), "{:?}", proj.trace);
        prop_assert!(proj.estimate.atoms().iter().all(|a| atoms.contains(a)));
        // The likelihood never decreases along EM.
        let start = log_likelihood(&DiscreteMeasure::uniform(1, atoms.clone()).unwrap(), &y, &noise).unwrap();
        prop_assert!(log_likelihood(&em.estimate, &y, &noise).unwrap() >= start - 1e-12);
    }
}
