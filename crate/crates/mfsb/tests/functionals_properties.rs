use mfsb::functionals::{backward_corrector, equilibrium, fisher_information, relative_free_energy, BridgeSolution, SolverDiagnostics};
use mfsb::grid::{density_from_spec, Density, DensitySpec, MarginalFlow, MixtureComponent, SpatialGrid, TimeGrid};
use mfsb::potential::InteractionPotential;
use proptest::prelude::*;

fn grid() -> SpatialGrid {
    SpatialGrid::new(8.0, 160).unwrap()
}

fn mixture(w: f64, m1: f64, s1: f64, m2: f64, s2: f64) -> Density {
    let spec = DensitySpec::Mixture {
        components: vec![MixtureComponent { weight: w, mean: m1, std: s1 }, MixtureComponent { weight: 1.0 - w, mean: m2, std: s2 }],
    };
    density_from_spec(&spec, grid()).unwrap()
}

fn components() -> impl Strategy<Value = (f64, f64, f64, f64, f64)> {
    (0.1f64..0.9, -2.0f64..2.0, 0.4f64..1.2, -2.0f64..2.0, 0.4f64..1.2)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn relative_free_energy_is_nonnegative((w, m1, s1, m2, s2) in components(), kappa in 0.2f64..2.0) {
        let pot = InteractionPotential::quadratic(kappa);
        let f = relative_free_energy(&pot, &mixture(w, m1, s1, m2, s2)).unwrap();
        prop_assert!(f >= -5e-3, "{f}");
    }

    #[test]
    fn log_sobolev_holds_on_the_grid((w, m1, s1, m2, s2) in components(), kappa in 0.2f64..2.0) {
        let pot = InteractionPotential::quadratic(kappa);
        let mu = mixture(w, m1, s1, m2, s2);
        let f = relative_free_energy(&pot, &mu).unwrap();
        let i = fisher_information(&pot, &mu);
        prop_assert!(i >= 4.0 * kappa * f - 1e-3, "I {i} F {f}");
    }

    #[test]
    fn equilibrium_has_no_fisher_information(kappa in 0.2f64..3.0, mean in -1.5f64..1.5) {
        let pot = InteractionPotential::quadratic(kappa);
        let eq = equilibrium(&pot, mean, grid()).unwrap().density;
        prop_assert!(fisher_information(&pot, &eq) <= 1e-6);
        prop_assert!(relative_free_energy(&pot, &eq).unwrap().abs() <= 1e-8);
    }

    #[test]
    fn backward_corrector_is_an_involution(
        means in proptest::collection::vec(-1.0f64..1.0, 9),
        stds in proptest::collection::vec(0.6f64..1.4, 9),
        which in 0usize..3,
    ) {
        let pot = [InteractionPotential::zero(), InteractionPotential::quadratic(0.5), InteractionPotential::gaussian_well(1.0, 0.7)][which];
        let dens = means
            .iter()
            .zip(&stds)
            .map(|(&mean, &std)| density_from_spec(&DensitySpec::Gaussian { mean, std }, grid()).unwrap())
            .collect();
        let flow = MarginalFlow::new(TimeGrid::new(1.5, 8).unwrap(), dens).unwrap();
        let sol = BridgeSolution::from_flow(flow.clone(), &pot, SolverDiagnostics::default()).unwrap();
        let hat = backward_corrector(&sol.corrector, &flow, &pot);
        let back = backward_corrector(&hat, &flow.reversed(), &pot);
        for (a, b) in back.values.iter().flatten().zip(sol.corrector.values.iter().flatten()) {
            prop_assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()));
        }
    }
}
