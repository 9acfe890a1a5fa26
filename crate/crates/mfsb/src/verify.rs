//! Checks of solved bridges against the quantitative bounds.
//!
//! Every check compares a computed `lhs` against a bound `rhs` and passes when
//! `rhs − lhs ≥ −tolerance` with both sides finite. Node-wise bounds produce
//! one entry per node, keyed `name/k=NNN`.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bridge::ResidualNorms;
use crate::dynamics::{mkv_flow, simulate_particles, tanaka_theta, InitMode, THETA_TOL};
use crate::error::{Error, Result};
use crate::functionals::{
    backward_corrector, conserved_quantity_profile, energy_profile, equilibrium, fisher_information, free_energy,
    BridgeSolution, ConservedProfile,
};
use crate::grid::{wasserstein1, wasserstein2, Density, MarginalFlow, TimeGrid};
use crate::potential::{InteractionPotential, PotentialKind};

/// Additive slack allowed on inequality checks.
pub const INEQ_TOL: f64 = 1e-2;
/// Relative spread allowed on the conserved quantity.
pub const TOL_CONSERVE: f64 = 5e-2;
pub const TOL_TREV: f64 = 1e-2;
/// Fraction of the theoretical turnpike rate the two-horizon fit must reach.
pub const RATE_FRACTION: f64 = 0.8;
/// |F(μ_fin)| below this marks μ_fin as the equilibrium.
const EQUILIBRIUM_DETECT: f64 = 1e-9;
/// Node means closer than this to the initial mean share one equilibrium.
const MEAN_REUSE: f64 = 1e-6;
const THETA_MAX_ITERS: usize = 500;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckEntry {
    pub lhs: f64,
    pub rhs: f64,
    pub slack: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub detail: String,
}

impl CheckEntry {
    /// The claim `lhs ≤ rhs` up to `tolerance`.
    pub fn le(lhs: f64, rhs: f64, tolerance: f64, detail: impl Into<String>) -> Self {
        let slack = rhs - lhs;
        let pass = lhs.is_finite() && rhs.is_finite() && slack >= -tolerance;
        Self { lhs, rhs, slack, tolerance, pass, detail: detail.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub half_width: f64,
    pub n_cells: usize,
    pub horizon: f64,
    pub n_steps: usize,
    pub potential: PotentialKind,
    pub seeds: Vec<u64>,
    /// Optimality residual of the solved bridge, reported next to any failure.
    pub residual: Option<ResidualNorms>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub scenario: String,
    pub checks: BTreeMap<String, CheckEntry>,
    pub environment: Environment,
}

impl VerificationReport {
    pub fn new(scenario: impl Into<String>, environment: Environment) -> Self {
        Self { scenario: scenario.into(), checks: BTreeMap::new(), environment }
    }

    pub fn insert(&mut self, name: impl Into<String>, entry: CheckEntry) {
        self.checks.insert(name.into(), entry);
    }

    pub fn extend(&mut self, entries: impl IntoIterator<Item = (String, CheckEntry)>) {
        self.checks.extend(entries);
    }

    pub fn all_pass(&self) -> bool {
        !self.checks.is_empty() && self.checks.values().all(|c| c.pass)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.checks.iter().filter(|(_, c)| !c.pass).map(|(k, _)| k.as_str()).collect()
    }

    /// The entry with the smallest slack among names starting with `prefix`.
    pub fn worst(&self, prefix: &str) -> Option<(&str, &CheckEntry)> {
        self.checks
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .min_by(|a, b| (a.1.slack + a.1.tolerance).total_cmp(&(b.1.slack + b.1.tolerance)))
            .map(|(k, c)| (k.as_str(), c))
    }
}

/// (e^{2κs} − 1)/(2κ), which tends to s as κ → 0.
fn growth(kappa: f64, s: f64) -> f64 {
    if kappa == 0.0 {
        s
    } else {
        (2.0 * kappa * s).exp_m1() / (2.0 * kappa)
    }
}

/// sinh(a)/sinh(b) for 0 ≤ a ≤ b without overflow.
fn sinh_ratio(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        return 1.0;
    }
    (a - b).exp() * (-(-2.0 * a).exp_m1()) / (-(-2.0 * b).exp_m1())
}

fn node_key(name: &str, k: usize) -> String {
    format!("{name}/k={k:03}")
}

/// Quantities shared by the checks on one solved bridge.
#[derive(Debug, Clone)]
pub struct BridgeAnalysis<'a> {
    pub w: &'a InteractionPotential,
    pub sol: &'a BridgeSolution,
    pub kappa: f64,
    /// F̃(P_t) per node.
    pub free: Vec<f64>,
    /// F(P_t) = F̃(P_t) − F̃(μ∞) per node; needs κ > 0.
    pub relative: Option<Vec<f64>>,
    /// E|Ψ_t|² per node.
    pub energy: Vec<f64>,
    pub conserved: ConservedProfile,
}

impl<'a> BridgeAnalysis<'a> {
    pub fn new(w: &'a InteractionPotential, sol: &'a BridgeSolution) -> Result<Self> {
        let flow = &sol.flow;
        let free: Vec<f64> = flow.densities.par_iter().map(|mu| free_energy(w, mu)).collect();
        let relative = if w.kappa > 0.0 {
            let m0 = flow.first().mean();
            let base = free_energy(w, &equilibrium(w, m0, flow.grid())?.density);
            let rel = flow
                .densities
                .par_iter()
                .zip(&free)
                .map(|(mu, f)| {
                    let m = mu.mean();
                    if (m - m0).abs() <= MEAN_REUSE {
                        Ok(f - base)
                    } else {
                        Ok(f - free_energy(w, &equilibrium(w, m, flow.grid())?.density))
                    }
                })
                .collect::<Result<Vec<f64>>>()?;
            Some(rel)
        } else {
            None
        };
        let psi_hat = backward_corrector(&sol.corrector, flow, w);
        let conserved = conserved_quantity_profile(&sol.corrector, &psi_hat, flow);
        let energy = energy_profile(&sol.corrector, flow);
        Ok(Self { w, sol, kappa: w.kappa, free, relative, energy, conserved })
    }

    pub fn horizon(&self) -> f64 {
        self.sol.flow.time_grid.horizon
    }

    pub fn n_steps(&self) -> usize {
        self.sol.flow.time_grid.n_steps
    }

    pub fn cost(&self) -> f64 {
        self.sol.cost
    }

    fn relative(&self) -> Result<&[f64]> {
        self.relative.as_deref().ok_or(Error::NeedsConvexity)
    }

    /// F, or F̃ when F is undefined (κ = 0); the two differ by a constant in t.
    fn divergence(&self) -> &[f64] {
        self.relative.as_deref().unwrap_or(&self.free)
    }

    fn sampled(&self) -> [usize; 3] {
        let n = self.n_steps();
        [n / 4, n / 2, 3 * n / 4]
    }

    /// Checks whose constants rely on κ-convexity also accept W = 0 through
    /// the κ → 0 limit of the coefficients.
    fn require_convex(&self) -> Result<()> {
        if self.kappa > 0.0 || self.w.is_zero() {
            Ok(())
        } else {
            Err(Error::NeedsConvexity)
        }
    }

    pub fn fin_is_equilibrium(&self) -> bool {
        self.relative.as_ref().is_some_and(|f| f[f.len() - 1].abs() <= EQUILIBRIUM_DETECT)
    }
}

pub fn environment(sol: &BridgeSolution, w: &InteractionPotential, seeds: Vec<u64>, residual: Option<ResidualNorms>) -> Environment {
    let g = sol.flow.grid();
    let tg = sol.flow.time_grid;
    Environment {
        half_width: g.half_width,
        n_cells: g.n_cells,
        horizon: tg.horizon,
        n_steps: tg.n_steps,
        potential: w.kind,
        seeds,
        residual,
    }
}

/// E(t) is constant: interior spread against TOL_CONSERVE·(1 + |mean E|).
pub fn check_conserved(a: &BridgeAnalysis) -> CheckEntry {
    let c = &a.conserved;
    CheckEntry::le(c.spread, TOL_CONSERVE * (1.0 + c.mean.abs()), 0.0, format!("mean E = {:.6e}", c.mean))
}

/// |E| ≤ 4κ/(e^{κT} − 1)·√(C_T(in,fin)·C_T(fin,in)), with 4/T at κ = 0.
pub fn check_conserved_bound(a: &BridgeAnalysis, cost_reversed: f64) -> Result<CheckEntry> {
    a.require_convex()?;
    let t = a.horizon();
    let coef = if a.kappa == 0.0 { 4.0 / t } else { 4.0 * a.kappa / (a.kappa * t).exp_m1() };
    let rhs = coef * (a.cost() * cost_reversed).max(0.0).sqrt();
    Ok(CheckEntry::le(
        a.conserved.mean.abs(),
        rhs,
        INEQ_TOL,
        format!("C_fwd = {:.6e}, C_rev = {:.6e}", a.cost(), cost_reversed),
    ))
}

/// C_T(fin,in) from the forward cost and the endpoint free energies.
pub fn reversed_cost_from_identity(a: &BridgeAnalysis) -> f64 {
    let f = &a.free;
    a.cost() + f[0] - f[f.len() - 1]
}

/// F(P_t) ≤ a F(in) + (1 − a) F(fin) − c C_T on interior nodes.
pub fn check_entropy_bound(a: &BridgeAnalysis) -> Result<Vec<(String, CheckEntry)>> {
    a.require_convex()?;
    let tg = a.sol.flow.time_grid;
    let t_end = tg.horizon;
    let n = tg.n_steps;
    let f = a.divergence();
    let gt = growth(a.kappa, t_end);
    Ok((1..n)
        .map(|k| {
            let t = tg.t(k);
            let left = growth(a.kappa, t_end - t) / gt;
            let c = 2.0 * a.kappa * growth(a.kappa, t_end - t) * growth(a.kappa, t) / gt;
            let rhs = left * f[0] + (1.0 - left) * f[n] - c * a.cost();
            (node_key("entropy_bound", k), CheckEntry::le(f[k], rhs, INEQ_TOL, format!("t = {t:.4}")))
        })
        .collect())
}

/// The sinh envelope through F(in), F(fin) and E/2κ on interior nodes.
pub fn check_turnpike(a: &BridgeAnalysis) -> Result<Vec<(String, CheckEntry)>> {
    let f = a.relative()?;
    let tg = a.sol.flow.time_grid;
    let t_end = tg.horizon;
    let n = tg.n_steps;
    let k2 = 2.0 * a.kappa;
    let shift = a.conserved.mean / k2;
    Ok((1..n)
        .map(|k| {
            let t = tg.t(k);
            let rhs = sinh_ratio(k2 * (t_end - t), k2 * t_end) * (f[0] - shift)
                + sinh_ratio(k2 * t, k2 * t_end) * (f[n] - shift)
                + shift;
            (node_key("turnpike", k), CheckEntry::le(f[k], rhs, INEQ_TOL, format!("t = {t:.4}")))
        })
        .collect())
}

/// Fitted decay of F(P_{θT}) between two horizons on the same endpoints,
/// required to reach RATE_FRACTION of 2κ·min(θ, 1 − θ).
pub fn check_turnpike_rate(short: &BridgeAnalysis, long: &BridgeAnalysis, theta: f64) -> Result<CheckEntry> {
    let fs = short.relative()?;
    let fl = long.relative()?;
    let at = |f: &[f64], n: usize| f[(theta * n as f64).round() as usize];
    let a = at(fs, short.n_steps());
    let b = at(fl, long.n_steps());
    let dt = long.horizon() - short.horizon();
    let rate = (a / b).ln() / dt;
    let required = RATE_FRACTION * 2.0 * short.kappa * theta.min(1.0 - theta);
    Ok(CheckEntry::le(
        required,
        rate,
        0.0,
        format!(
            "F(P_θT) = {a:.6e} at T = {}, {b:.6e} at T = {}; fitted rate {rate:.4}",
            short.horizon(),
            long.horizon()
        ),
    ))
}

/// C_T ≤ F(in)/(e^{2κt} − 1) + e^{2κ(T−t)}/(e^{2κ(T−t)} − 1)·F(fin) at three
/// times, and C_T ≤ F(in)/(e^{2κT} − 1) when μ_fin is the equilibrium.
pub fn check_talagrand(a: &BridgeAnalysis) -> Result<Vec<(String, CheckEntry)>> {
    let f = a.relative()?;
    let tg = a.sol.flow.time_grid;
    let t_end = tg.horizon;
    let n = tg.n_steps;
    let k2 = 2.0 * a.kappa;
    let mut out: Vec<(String, CheckEntry)> = a
        .sampled()
        .iter()
        .map(|&k| {
            let t = tg.t(k);
            let s = t_end - t;
            let rhs = f[0] / (k2 * t).exp_m1() + f[n] / (-(-k2 * s).exp_m1());
            (node_key("talagrand", k), CheckEntry::le(a.cost(), rhs, INEQ_TOL, format!("t = {t:.4}")))
        })
        .collect();
    if a.fin_is_equilibrium() {
        let rhs = f[0] / (k2 * t_end).exp_m1();
        out.push(("talagrand_equilibrium".into(), CheckEntry::le(a.cost(), rhs, INEQ_TOL, "μ_fin = μ∞")));
    }
    Ok(out)
}

/// HWI with the conserved quantity, plus the log-Sobolev form it tends to as
/// T → ∞. Requires μ_fin = μ∞.
pub fn check_hwi(a: &BridgeAnalysis) -> Result<Vec<(String, CheckEntry)>> {
    let f = a.relative()?;
    if !a.fin_is_equilibrium() {
        return Err(Error::InfeasibleEndpoints("HWI needs μ_fin = μ∞".into()));
    }
    let flow = &a.sol.flow;
    let n = flow.time_grid.n_steps;
    let fisher = fisher_information(a.w, flow.first());
    let early = flow.densities[..=n / 8]
        .iter()
        .map(|mu| fisher_information(a.w, mu))
        .fold(0.0, f64::max);
    let k2 = 2.0 * a.kappa;
    let damp = -(-k2 * a.horizon()).exp_m1();
    let e = a.conserved.mean;
    // rounding can push an exactly vanishing radicand slightly below zero
    let radicand = fisher * (0.25 * fisher - e);
    let radicand = if radicand > -1e-12 { radicand.max(0.0) } else { radicand };
    let rhs = damp / k2 * radicand.sqrt() - damp * a.cost();
    let detail = format!("I_F(μ_in) = {fisher:.6e}, max I_F on t ≤ T/8 = {early:.6e}, E = {e:.6e}");
    Ok(vec![
        ("hwi".into(), CheckEntry::le(f[0], rhs, INEQ_TOL, detail)),
        ("log_sobolev".into(), CheckEntry::le(f[0], fisher / (2.0 * k2), INEQ_TOL, format!("I_F(μ_in) = {fisher:.6e}"))),
    ])
}

/// dist(P_t, P^MKV_t)² against 2t(F(in)/(e^{2κT}−1) + …·F(fin)) on interior
/// nodes. The distance is W₁ (a lower bound for W₂) unless `strict_w2`.
pub fn check_mkv_distance(a: &BridgeAnalysis, strict_w2: bool) -> Result<Vec<(String, CheckEntry)>> {
    let f = a.relative()?;
    let flow = &a.sol.flow;
    let tg = flow.time_grid;
    let mkv = mkv_flow(a.w, flow.first(), tg)?;
    mkv_distance_against(a, f, &mkv, strict_w2)
}

fn mkv_distance_against(a: &BridgeAnalysis, f: &[f64], mkv: &MarginalFlow, strict_w2: bool) -> Result<Vec<(String, CheckEntry)>> {
    let flow = &a.sol.flow;
    let tg = flow.time_grid;
    let t_end = tg.horizon;
    let n = tg.n_steps;
    let k2 = 2.0 * a.kappa;
    let big = (k2 * t_end).exp_m1();
    (1..n)
        .into_par_iter()
        .map(|k| {
            let t = tg.t(k);
            let d = if strict_w2 {
                wasserstein2(&flow.densities[k], &mkv.densities[k])?
            } else {
                wasserstein1(&flow.densities[k], &mkv.densities[k])?
            };
            let tail = ((k2 * t_end).exp() - (k2 * (t_end - t)).exp()) / (k2 * (t_end - t)).exp_m1();
            let rhs = 2.0 * t * (f[0] / big + tail * f[n] / big);
            let metric = if strict_w2 { "W2" } else { "W1" };
            Ok((node_key("mkv_distance", k), CheckEntry::le(d * d, rhs, INEQ_TOL, format!("{metric} at t = {t:.4}"))))
        })
        .collect()
}

/// ½∫₀ᵗ E|Ψ|² ≤ (e^{2κt}−1)/(e^{2κT}−1)·C_T and ½E|Ψ_t|² ≤ 2κC_T/(e^{2κ(T−t)}−1)
/// at three times; κ = 0 uses the limits t/T and 1/(T − t).
pub fn check_corrector_bounds(a: &BridgeAnalysis) -> Result<Vec<(String, CheckEntry)>> {
    a.require_convex()?;
    let tg = a.sol.flow.time_grid;
    let t_end = tg.horizon;
    let dt = tg.dt();
    let gt = growth(a.kappa, t_end);
    let mut out = Vec::new();
    for k in a.sampled() {
        let t = tg.t(k);
        let weights = (0..=k).map(|j| if j == 0 || j == k { 0.5 } else { 1.0 });
        let partial = 0.5 * dt * weights.zip(&a.energy).map(|(w, e)| w * e).sum::<f64>();
        let rhs1 = growth(a.kappa, t) / gt * a.cost();
        out.push((node_key("corrector_partial", k), CheckEntry::le(partial, rhs1, INEQ_TOL, format!("t = {t:.4}"))));
        let rhs3 = a.cost() / growth(a.kappa, t_end - t);
        out.push((
            node_key("corrector_pointwise", k),
            CheckEntry::le(0.5 * a.energy[k], rhs3, INEQ_TOL, format!("t = {t:.4}")),
        ));
    }
    Ok(out)
}

/// |C_rev − C_fwd − F(in) + F(fin)| ≤ TOL_TREV. Only F̃ differences enter,
/// so W = 0 is allowed.
pub fn check_time_reversal(a: &BridgeAnalysis, reversed: &BridgeSolution) -> CheckEntry {
    let f = &a.free;
    let gap = reversed.cost - a.cost() - f[0] + f[f.len() - 1];
    CheckEntry::le(
        gap.abs(),
        TOL_TREV,
        0.0,
        format!("C_fwd = {:.6e}, C_rev = {:.6e}, F̃(in) − F̃(fin) = {:.6e}", a.cost(), reversed.cost, f[0] - f[f.len() - 1]),
    )
}

/// Θ applied to the simulator's own driving paths reproduces the particles.
pub fn check_theta(w: &InteractionPotential, mu_in: &Density, time_grid: TimeGrid, n: usize, seed: u64) -> Result<CheckEntry> {
    let sim = simulate_particles(w, mu_in, time_grid, n, seed, InitMode::Stratified)?;
    let theta = tanaka_theta(&sim.noise_paths(), w, THETA_TOL, THETA_MAX_ITERS)?;
    let dev = theta
        .positions
        .iter()
        .zip(&sim.positions)
        .flat_map(|(a, b)| a.iter().zip(b).map(|(u, v)| (u - v).abs()))
        .fold(0.0, f64::max);
    Ok(CheckEntry::le(dev, 5.0 * THETA_TOL, 0.0, format!("N = {n}, seed = {seed}")))
}

/// The mean of P_t is the chord between the endpoint means.
pub fn check_mean_linearity(flow: &MarginalFlow) -> CheckEntry {
    let tg = flow.time_grid;
    let m0 = flow.first().mean();
    let m1 = flow.last().mean();
    let dev = flow
        .densities
        .iter()
        .enumerate()
        .map(|(k, mu)| (mu.mean() - (m0 + (m1 - m0) * tg.t(k) / tg.horizon)).abs())
        .fold(0.0, f64::max);
    CheckEntry::le(dev, 1e-3 * (1.0 + (m1 - m0).abs()), 0.0, format!("mean {m0:.6} → {m1:.6}"))
}

/// Every single-bridge check that applies to `a`. `reversed` is the bridge
/// solved from μ_fin to μ_in; without it C_T(fin,in) comes from the
/// time-reversal identity and the identity itself is not checked.
pub fn run_all(a: &BridgeAnalysis, reversed: Option<&BridgeSolution>, strict_w2: bool) -> Result<Vec<(String, CheckEntry)>> {
    let mut out = vec![
        ("conserved".to_string(), check_conserved(a)),
        ("mean_linearity".to_string(), check_mean_linearity(&a.sol.flow)),
    ];
    if let Some(r) = reversed {
        out.push(("time_reversal".into(), check_time_reversal(a, r)));
    }
    if a.kappa > 0.0 || a.w.is_zero() {
        let c_rev = reversed.map_or_else(|| reversed_cost_from_identity(a), |r| r.cost);
        out.push(("conserved_bound".into(), check_conserved_bound(a, c_rev)?));
        out.extend(check_entropy_bound(a)?);
        out.extend(check_corrector_bounds(a)?);
    }
    if a.kappa > 0.0 {
        out.extend(check_turnpike(a)?);
        out.extend(check_talagrand(a)?);
        out.extend(check_mkv_distance(a, strict_w2)?);
        if a.fin_is_equilibrium() {
            out.extend(check_hwi(a)?);
        }
    }
    Ok(out)
}
