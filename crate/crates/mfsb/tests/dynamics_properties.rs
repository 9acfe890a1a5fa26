use mfsb::dynamics::{mkv_flow, simulate_particles, tanaka_theta, InitMode, THETA_TOL};
use mfsb::ensemble::path_distance;
use mfsb::functionals::relative_free_energy;
use mfsb::grid::{density_from_spec, Density, DensitySpec, MixtureComponent, SpatialGrid, TimeGrid};
use mfsb::potential::InteractionPotential;
use proptest::prelude::*;

fn mixture(g: SpatialGrid) -> Density {
    let spec = DensitySpec::Mixture {
        components: vec![
            MixtureComponent { weight: 0.7, mean: -0.6, std: 0.5 },
            MixtureComponent { weight: 0.3, mean: 1.4, std: 0.8 },
        ],
    };
    density_from_spec(&spec, g).unwrap()
}

/// ∫|F_emp − F| dx with F piecewise linear per cell, on 16 sub-points per cell.
fn empirical_w1(samples: &[f64], mu: &Density) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let g = mu.grid;
    let cdf = mu.cdf();
    let sub = 16;
    let h = g.dx() / sub as f64;
    let mut total = 0.0;
    for i in 0..g.n_cells {
        let left = if i == 0 { 0.0 } else { cdf[i - 1] };
        for j in 0..sub {
            let frac = (j as f64 + 0.5) / sub as f64;
            let x = g.face(i) + frac * g.dx();
            let f = left + frac * (cdf[i] - left);
            let fe = s.partition_point(|v| *v <= x) as f64 / s.len() as f64;
            total += (fe - f).abs() * h;
        }
    }
    total
}

#[test]
fn particle_marginals_approach_the_mean_field_flow() {
    let g = SpatialGrid::new(8.0, 256).unwrap();
    let mu = mixture(g);
    let w = InteractionPotential::quadratic(0.5);
    let tg = TimeGrid::new(1.0, 200).unwrap();
    let target = mkv_flow(&w, &mu, tg).unwrap();
    let sizes = [500usize, 2000, 8000];
    let errs: Vec<f64> = sizes
        .iter()
        .map(|&n| {
            let seeds = 1..=4u64;
            let count = seeds.clone().count() as f64;
            seeds
                .map(|seed| {
                    let e = simulate_particles(&w, &mu, tg, n, seed, InitMode::Stratified).unwrap();
                    [50, 100, 200].iter().map(|&k| empirical_w1(&e.marginal(k), &target.densities[k])).sum::<f64>() / 3.0
                })
                .sum::<f64>()
                / count
        })
        .collect();
    // least-squares slope of log W1 against log N
    let xs: Vec<f64> = sizes.iter().map(|n| (*n as f64).ln()).collect();
    let ys: Vec<f64> = errs.iter().map(|e| e.ln()).collect();
    let (mx, my) = (xs.iter().sum::<f64>() / 3.0, ys.iter().sum::<f64>() / 3.0);
    let slope = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
    assert!((0.35..=0.65).contains(&-slope), "W1 {errs:?}, exponent {}", -slope);
}

#[test]
fn theta_separates_distinct_noise() {
    let g = SpatialGrid::new(8.0, 128).unwrap();
    let mu = mixture(g);
    let tg = TimeGrid::new(1.0, 32).unwrap();
    for w in [InteractionPotential::quadratic(0.5), InteractionPotential::gaussian_well(1.0, 0.7)] {
        let images: Vec<_> = (0..4u64)
            .map(|seed| {
                let noise = simulate_particles(&w, &mu, tg, 12, seed, InitMode::Iid).unwrap().noise_paths();
                tanaka_theta(&noise, &w, THETA_TOL, 500).unwrap()
            })
            .collect();
        for a in 0..images.len() {
            for b in a + 1..images.len() {
                assert!(path_distance(&images[a], &images[b]).unwrap() > 0.0);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn mean_field_flow_dissipates_free_energy(
        w in 0.1f64..0.9, m1 in -1.5f64..1.5, s1 in 0.4f64..1.0, m2 in -1.5f64..1.5, s2 in 0.4f64..1.0, kappa in 0.3f64..1.5,
    ) {
        let g = SpatialGrid::new(8.0, 128).unwrap();
        let spec = DensitySpec::Mixture {
            components: vec![MixtureComponent { weight: w, mean: m1, std: s1 }, MixtureComponent { weight: 1.0 - w, mean: m2, std: s2 }],
        };
        let pot = InteractionPotential::quadratic(kappa);
        let flow = mkv_flow(&pot, &density_from_spec(&spec, g).unwrap(), TimeGrid::new(2.0, 64).unwrap()).unwrap();
        let f: Vec<f64> = flow.densities.iter().map(|mu| relative_free_energy(&pot, mu).unwrap()).collect();
        for pair in f.windows(2) {
            prop_assert!(pair[1] <= pair[0] + 1e-6, "{} → {}", pair[0], pair[1]);
        }
    }
}
