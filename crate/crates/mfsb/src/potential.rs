//! Pair interaction potentials and their action on grid densities.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Density, SpatialGrid};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PotentialKind {
    Zero,
    /// κ z²/2
    Quadratic { kappa: f64 },
    /// a (1 − exp(−z²/2s²))
    GaussianWell { amplitude: f64, width: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InteractionPotential {
    pub kind: PotentialKind,
    /// Lower bound of W″ (zero when not convex).
    pub kappa: f64,
    /// Upper bound of W″.
    pub hess_sup: f64,
}

impl InteractionPotential {
    pub fn new(kind: PotentialKind) -> Result<Self> {
        let (kappa, hess_sup) = match kind {
            PotentialKind::Zero => (0.0, 0.0),
            PotentialKind::Quadratic { kappa } => {
                if !(kappa >= 0.0 && kappa.is_finite()) {
                    return Err(Error::InvalidPotential(format!("kappa {kappa} must be ≥ 0")));
                }
                (kappa, kappa)
            }
            PotentialKind::GaussianWell { amplitude, width } => {
                if !(amplitude >= 0.0 && width > 0.0 && amplitude.is_finite() && width.is_finite()) {
                    return Err(Error::InvalidPotential("gaussian well needs amplitude ≥ 0, width > 0".into()));
                }
                // W″(z) = (a/s²)(1 − z²/s²) e^{−z²/2s²}: max a/s² at 0, negative for |z| > s.
                (0.0, amplitude / (width * width))
            }
        };
        Ok(Self { kind, kappa, hess_sup })
    }

    pub fn zero() -> Self {
        Self::new(PotentialKind::Zero).unwrap()
    }

    pub fn quadratic(kappa: f64) -> Self {
        Self::new(PotentialKind::Quadratic { kappa }).unwrap()
    }

    pub fn gaussian_well(amplitude: f64, width: f64) -> Self {
        Self::new(PotentialKind::GaussianWell { amplitude, width }).unwrap()
    }

    pub fn is_zero(&self) -> bool {
        match self.kind {
            PotentialKind::Zero => true,
            PotentialKind::Quadratic { kappa } => kappa == 0.0,
            PotentialKind::GaussianWell { amplitude, .. } => amplitude == 0.0,
        }
    }

    pub fn value(&self, z: f64) -> f64 {
        let z = z.abs();
        match self.kind {
            PotentialKind::Zero => 0.0,
            PotentialKind::Quadratic { kappa } => 0.5 * kappa * z * z,
            PotentialKind::GaussianWell { amplitude, width } => {
                amplitude * (1.0 - (-z * z / (2.0 * width * width)).exp())
            }
        }
    }

    /// W′(z), odd by construction.
    pub fn d1(&self, z: f64) -> f64 {
        let s = z.signum();
        let z = z.abs();
        let v = match self.kind {
            PotentialKind::Zero => 0.0,
            PotentialKind::Quadratic { kappa } => kappa * z,
            PotentialKind::GaussianWell { amplitude, width } => {
                let s2 = width * width;
                amplitude * z / s2 * (-z * z / (2.0 * s2)).exp()
            }
        };
        if z == 0.0 {
            0.0
        } else {
            s * v
        }
    }

    pub fn d2(&self, z: f64) -> f64 {
        let z = z.abs();
        match self.kind {
            PotentialKind::Zero => 0.0,
            PotentialKind::Quadratic { kappa } => kappa,
            PotentialKind::GaussianWell { amplitude, width } => {
                let s2 = width * width;
                amplitude / s2 * (1.0 - z * z / s2) * (-z * z / (2.0 * s2)).exp()
            }
        }
    }

    /// Offset tables over d = i − j ∈ [−(n−1), n−1], indexed by d + n − 1.
    pub fn kernels(&self, grid: &SpatialGrid) -> Kernels {
        let n = grid.n_cells;
        let dx = grid.dx();
        let table = |f: &dyn Fn(f64) -> f64| -> Vec<f64> {
            (0..2 * n - 1).map(|idx| f((idx as f64 - (n as f64 - 1.0)) * dx)).collect()
        };
        Kernels {
            n,
            dx,
            w: table(&|z| self.value(z)),
            w1: table(&|z| self.d1(z)),
            w2: table(&|z| self.d2(z)),
            zero: self.is_zero(),
        }
    }
}

/// Precomputed W, W′, W″ on grid offsets; all sums are direct.
#[derive(Debug, Clone)]
pub struct Kernels {
    pub n: usize,
    pub dx: f64,
    pub w: Vec<f64>,
    pub w1: Vec<f64>,
    pub w2: Vec<f64>,
    pub zero: bool,
}

impl Kernels {
    /// (K∗p)_i = Σ_j K(x_i − x_j) p_j Δx.
    pub fn apply(&self, table: &[f64], p: &[f64]) -> Vec<f64> {
        let n = self.n;
        if self.zero {
            return vec![0.0; n];
        }
        (0..n)
            .map(|i| {
                let row = &table[i..i + n];
                // row[j'] = K((i − (n−1−j'))Δx) so walk p backwards
                let mut acc = 0.0;
                for (j, pj) in p.iter().enumerate() {
                    acc += row[n - 1 - j] * pj;
                }
                acc * self.dx
            })
            .collect()
    }

    /// Σ_i g_i K(x_i − x_j) Δx, the transpose action.
    pub fn apply_t(&self, table: &[f64], g: &[f64]) -> Vec<f64> {
        let n = self.n;
        if self.zero {
            return vec![0.0; n];
        }
        (0..n)
            .map(|j| {
                let mut acc = 0.0;
                for (i, gi) in g.iter().enumerate() {
                    acc += table[i + n - 1 - j] * gi;
                }
                acc * self.dx
            })
            .collect()
    }

    pub fn force(&self, p: &[f64]) -> Vec<f64> {
        self.apply(&self.w1, p)
    }

    pub fn potential(&self, p: &[f64]) -> Vec<f64> {
        self.apply(&self.w, p)
    }
}

/// x_i ↦ Σ_j W′(x_i − x_j) p_j Δx.
pub fn conv_force(w: &InteractionPotential, mu: &Density) -> Vec<f64> {
    w.kernels(&mu.grid).force(&mu.values)
}

/// x_i ↦ Σ_j W(x_i − x_j) p_j Δx.
pub fn conv_potential(w: &InteractionPotential, mu: &Density) -> Vec<f64> {
    w.kernels(&mu.grid).potential(&mu.values)
}

/// Σ_i Σ_j W(x_i − x_j) p_i p_j Δx².
pub fn interaction_energy(w: &InteractionPotential, mu: &Density) -> f64 {
    let dx = mu.grid.dx();
    conv_potential(w, mu).iter().zip(&mu.values).map(|(a, p)| a * p).sum::<f64>() * dx
}

/// x_i ↦ Σ_j W″(x_i − x_j)(Ψ_i − Ψ_j) p_j Δx.
pub fn hessian_kernel_term(w: &InteractionPotential, mu: &Density, psi: &[f64]) -> Vec<f64> {
    let k = w.kernels(&mu.grid);
    hessian_term_with(&k, &mu.values, psi)
}

pub(crate) fn hessian_term_with(k: &Kernels, p: &[f64], psi: &[f64]) -> Vec<f64> {
    let a = k.apply(&k.w2, p);
    let pp: Vec<f64> = p.iter().zip(psi).map(|(p, s)| p * s).collect();
    let b = k.apply(&k.w2, &pp);
    (0..p.len()).map(|i| psi[i] * a[i] - b[i]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{density_from_spec, DensitySpec, SpatialGrid};
    use proptest::prelude::*;

    fn gauss(mean: f64, std: f64) -> Density {
        density_from_spec(&DensitySpec::Gaussian { mean, std }, SpatialGrid::new(8.0, 256).unwrap()).unwrap()
    }

    #[test]
    fn symmetry_and_bounds() {
        for w in [InteractionPotential::quadratic(0.7), InteractionPotential::gaussian_well(1.3, 0.8)] {
            for z in [0.0, 0.3, 1.7, 4.0] {
                assert_eq!(w.value(z), w.value(-z));
                assert_eq!(w.d1(z), -w.d1(-z));
                assert!(w.d2(z) <= w.hess_sup + 1e-15);
                assert!(w.d2(z) >= w.kappa - 1e-15 || w.kappa == 0.0);
            }
        }
        assert!(InteractionPotential::new(PotentialKind::GaussianWell { amplitude: 1.0, width: 0.0 }).is_err());
        assert!(InteractionPotential::new(PotentialKind::Quadratic { kappa: -1.0 }).is_err());
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let w = InteractionPotential::gaussian_well(1.3, 0.8);
        let h = 1e-5;
        for z in [0.2, -0.9, 2.1] {
            assert!(((w.value(z + h) - w.value(z - h)) / (2.0 * h) - w.d1(z)).abs() < 1e-8);
            assert!(((w.d1(z + h) - w.d1(z - h)) / (2.0 * h) - w.d2(z)).abs() < 1e-8);
        }
    }

    #[test]
    fn force_of_quadratic_is_affine() {
        let mu = gauss(0.0, 1.0);
        let f = conv_force(&InteractionPotential::quadratic(0.5), &mu);
        let m = mu.mean();
        for (i, fi) in f.iter().enumerate() {
            assert!((fi - 0.5 * (mu.grid.x(i) - m)).abs() < 1e-12);
        }
        assert!(conv_force(&InteractionPotential::zero(), &mu).iter().all(|v| *v == 0.0));
        let g = conv_force(&InteractionPotential::gaussian_well(1.0, 1.0), &mu);
        for i in 0..256 {
            assert!((g[i] + g[255 - i]).abs() < 1e-12);
        }
    }

    #[test]
    fn interaction_energy_oracles() {
        let mu = gauss(0.0, 1.0);
        assert!((interaction_energy(&InteractionPotential::quadratic(0.5), &mu) - 0.5).abs() < 1e-3);
        assert_eq!(interaction_energy(&InteractionPotential::zero(), &mu), 0.0);
        let g = mu.grid;
        let mut v = vec![0.0; 256];
        v[100] = 1.0;
        let dirac = Density::new(g, v).unwrap();
        let w = InteractionPotential::gaussian_well(1.0, 1.0);
        assert!((interaction_energy(&w, &dirac) - w.value(0.0)).abs() < 1e-15);
    }

    #[test]
    fn hessian_term_cases() {
        let mu = gauss(0.0, 1.0);
        let g = mu.grid;
        let c = vec![2.5; 256];
        assert!(hessian_kernel_term(&InteractionPotential::gaussian_well(1.0, 1.0), &mu, &c).iter().all(|v| v.abs() < 1e-12));
        let x = g.centers();
        let m = mu.mean();
        let h = hessian_kernel_term(&InteractionPotential::quadratic(1.0), &mu, &x);
        for i in 0..256 {
            assert!((h[i] - (x[i] - m)).abs() < 1e-12);
        }
        assert!(hessian_kernel_term(&InteractionPotential::zero(), &mu, &x).iter().all(|v| *v == 0.0));
    }

    proptest! {
        #[test]
        fn force_integrates_to_zero_and_energy_reflects(vals in proptest::collection::vec(0.0f64..1.0, 32), which in 0usize..2) {
            let g = SpatialGrid::new(3.0, 32).unwrap();
            prop_assume!(vals.iter().sum::<f64>() > 0.1);
            let mu = Density::new(g, vals.clone()).unwrap();
            let w = if which == 0 { InteractionPotential::quadratic(0.8) } else { InteractionPotential::gaussian_well(1.2, 0.7) };
            let f = conv_force(&w, &mu);
            let total: f64 = f.iter().zip(&mu.values).map(|(a, p)| a * p).sum::<f64>() * g.dx();
            prop_assert!(total.abs() < 1e-10);
            let mut rev = vals.clone();
            rev.reverse();
            let mr = Density::new(g, rev).unwrap();
            prop_assert!((interaction_energy(&w, &mu) - interaction_energy(&w, &mr)).abs() < 1e-12);
            if which == 0 {
                let m = mu.mean();
                for i in 0..32 {
                    prop_assert!((f[i] - 0.8 * (g.x(i) - m)).abs() < 1e-12);
                }
            }
        }
    }
}
