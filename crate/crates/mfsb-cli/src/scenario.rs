//! Scenario files: a JSON document naming the potential, the endpoints, the
//! grids, solver settings and the checks to run. See `docs/scenario.md`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use mfsb::bridge::{SolverConfig, BOUNDARY_MASS_LIMIT};
use mfsb::dynamics::{mkv_flow_with, InitMode};
use mfsb::functionals::equilibrium;
use mfsb::grid::{density_from_spec, Density, DensitySpec, SpatialGrid, TimeGrid};
use mfsb::potential::{InteractionPotential, PotentialKind};

use crate::error::{CliError, Hypothesis, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpecialEndpoint {
    /// Law at T of the McKean–Vlasov flow started from μ_in.
    MkvEndpoint,
    /// μ∞ at the mean of μ_in.
    Equilibrium,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EndpointSpec {
    Special { kind: SpecialEndpoint },
    Density(DensitySpec),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub half_width: f64,
    pub n_cells: usize,
    pub horizon: f64,
    pub n_steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckKind {
    Conserved,
    ConservedBound,
    EntropyBound,
    Turnpike,
    TurnpikeRate,
    Talagrand,
    Hwi,
    MkvDistance,
    CorrectorBounds,
    TimeReversal,
    Theta,
    MeanLinearity,
}

impl CheckKind {
    pub const ALL: [CheckKind; 12] = [
        CheckKind::Conserved,
        CheckKind::ConservedBound,
        CheckKind::EntropyBound,
        CheckKind::Turnpike,
        CheckKind::TurnpikeRate,
        CheckKind::Talagrand,
        CheckKind::Hwi,
        CheckKind::MkvDistance,
        CheckKind::CorrectorBounds,
        CheckKind::TimeReversal,
        CheckKind::Theta,
        CheckKind::MeanLinearity,
    ];

    /// Needs κ > 0 outright (F relative to μ∞ appears in the bound).
    pub fn needs_kappa(self) -> bool {
        matches!(
            self,
            CheckKind::Turnpike | CheckKind::TurnpikeRate | CheckKind::Talagrand | CheckKind::Hwi | CheckKind::MkvDistance
        )
    }

    /// Stated for endpoints with a common mean.
    pub fn needs_same_mean(self) -> bool {
        !matches!(self, CheckKind::Theta | CheckKind::MeanLinearity)
    }

    /// Holds for κ-convex W, and for W = 0 through limit coefficients.
    pub fn needs_convexity(self) -> bool {
        self.needs_same_mean() && !matches!(self, CheckKind::TimeReversal)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParticleSpec {
    pub n: usize,
    #[serde(default)]
    pub init: InitMode,
}

impl Default for ParticleSpec {
    fn default() -> Self {
        Self { n: 64, init: InitMode::Stratified }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub potential: PotentialKind,
    pub mu_in: DensitySpec,
    pub mu_fin: EndpointSpec,
    pub grid: GridSpec,
    #[serde(default)]
    pub solver: SolverConfig,
    /// Empty means every check that applies to the potential and endpoints.
    #[serde(default)]
    pub checks: Vec<CheckKind>,
    /// Second horizon for the turnpike rate fit; defaults to 2T.
    #[serde(default)]
    pub rate_horizon: Option<f64>,
    #[serde(default)]
    pub particles: ParticleSpec,
    /// Per-check tolerance overrides, keyed by check-name prefix.
    #[serde(default)]
    pub tolerances: BTreeMap<String, f64>,
    #[serde(default)]
    pub seed: u64,
}

/// A validated scenario with its grids, potential and endpoints built.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub scenario: Scenario,
    pub potential: InteractionPotential,
    pub grid: SpatialGrid,
    pub time_grid: TimeGrid,
    pub mu_in: Density,
    pub mu_fin: Density,
    pub checks: Vec<CheckKind>,
}

const MEAN_MATCH: f64 = 1e-6;

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// The checks that will run: the explicit list, or every applicable one.
    pub fn selected_checks(&self, w: &InteractionPotential) -> Vec<CheckKind> {
        if !self.checks.is_empty() {
            let mut c = self.checks.clone();
            c.sort();
            c.dedup();
            return c;
        }
        CheckKind::ALL
            .into_iter()
            .filter(|c| {
                if c.needs_kappa() {
                    w.kappa > 0.0
                } else if c.needs_convexity() {
                    w.kappa > 0.0 || w.is_zero()
                } else {
                    true
                }
            })
            .collect()
    }

    pub fn prepare(self) -> Result<Prepared> {
        let g = &self.grid;
        let grid = SpatialGrid::new(g.half_width, g.n_cells).map_err(|e| CliError::Parse(e.to_string()))?;
        let time_grid = TimeGrid::new(g.horizon, g.n_steps).map_err(|e| CliError::Parse(e.to_string()))?;
        self.solver.validate().map_err(|e| CliError::Parse(e.to_string()))?;
        if self.particles.n < 2 {
            return Err(CliError::Parse("particles.n must be at least 2".into()));
        }
        if let Some(t2) = self.rate_horizon {
            if !(t2 > g.horizon && t2.is_finite()) {
                return Err(CliError::Parse("rate_horizon must exceed grid.horizon".into()));
            }
        }
        let potential = InteractionPotential::new(self.potential).map_err(|e| CliError::h(Hypothesis::H1, e.to_string()))?;
        let checks = self.selected_checks(&potential);

        let h2 = |e: mfsb::Error| CliError::h(Hypothesis::H2, e.to_string());
        let mu_in = density_from_spec(&self.mu_in, grid).map_err(h2)?;
        let mu_fin = match &self.mu_fin {
            EndpointSpec::Density(spec) => density_from_spec(spec, grid).map_err(h2)?,
            EndpointSpec::Special { kind: SpecialEndpoint::MkvEndpoint } => {
                mkv_flow_with(&potential, &mu_in, time_grid, &self.solver.fokker_planck)?.last().clone()
            }
            EndpointSpec::Special { kind: SpecialEndpoint::Equilibrium } => {
                if !(potential.kappa > 0.0) {
                    return Err(CliError::h(Hypothesis::H3, "the equilibrium endpoint needs κ > 0"));
                }
                equilibrium(&potential, mu_in.mean(), grid)?.density
            }
        };
        for (name, d) in [("mu_in", &mu_in), ("mu_fin", &mu_fin)] {
            if !d.entropy().is_finite() || !d.variance().is_finite() {
                return Err(CliError::h(Hypothesis::H2, format!("{name} has infinite entropy or second moment")));
            }
            let bm = d.boundary_mass(1);
            if bm > BOUNDARY_MASS_LIMIT {
                return Err(CliError::h(
                    Hypothesis::H2,
                    format!("{name} holds {bm:e} in an outermost cell (limit {BOUNDARY_MASS_LIMIT:e})"),
                ));
            }
        }
        if let Some(c) = checks.iter().find(|c| c.needs_kappa() && !(potential.kappa > 0.0)) {
            return Err(CliError::h(Hypothesis::H3, format!("check {c:?} needs κ > 0")));
        }
        if let Some(c) = checks.iter().find(|c| c.needs_convexity() && !(potential.kappa > 0.0 || potential.is_zero())) {
            return Err(CliError::h(Hypothesis::H3, format!("check {c:?} needs a κ-convex or zero potential")));
        }
        if checks.iter().any(|c| c.needs_same_mean()) {
            let (a, b) = (mu_in.mean(), mu_fin.mean());
            if (a - b).abs() > MEAN_MATCH * (1.0 + a.abs()) {
                return Err(CliError::h(Hypothesis::H4, format!("means differ: {a} vs {b}")));
            }
        }
        Ok(Prepared { scenario: self, potential, grid, time_grid, mu_in, mu_fin, checks })
    }
}

/// Read, parse and validate a scenario file.
pub fn load_scenario(path: &Path) -> Result<Prepared> {
    let text = std::fs::read_to_string(path)?;
    Scenario::from_json(&text)?.prepare()
}
