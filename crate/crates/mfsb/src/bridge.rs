//! Mean-field Schrödinger bridge by direct minimization of the discrete
//! Benamou–Brenier cost, plus a frozen-drift IPFP baseline and the
//! first-order optimality residual.
//!
//! Densities μ_k live on time nodes and cell centres, face momenta M_{k+½} on
//! time midpoints and cell faces (zero on the two boundary faces). In one
//! dimension the discrete continuity equation fixes M from μ, so the cost is a
//! function of the interior slices alone.
//!
//! The objective is evaluated where M lives: at each midpoint the density is
//! ν = ½(μ_k + μ_{k+1}), on each face Ψ = M/ν_f + ½ ∂ log ν + ∇W∗ν with a
//! compact difference for the score. Averaging momenta back onto nodes and
//! cells instead leaves the (−1)^k and (−1)^i oscillations of μ free of kinetic
//! cost, and a minimizer happily fills them in. The cost reported by a
//! [`BridgeSolution`] is recomputed from its node/cell corrector and agrees
//! with the objective to O(Δx² + Δt²).

use std::sync::Arc;

use rayon::prelude::*;
use rustdct::{Dst1, DctPlanner, TransformType2And3};
use serde::{Deserialize, Serialize};

use crate::dynamics::{interaction_phi, mkv_flow_with, FokkerPlanckConfig, FpStep};
use crate::error::{Error, Result};
use crate::functionals::{
    bulk_mask, face_momentum, BridgeSolution, SolverDiagnostics, BULK_FRACTION,
};
use crate::grid::{grad, Density, MarginalFlow, SpatialGrid, TimeGrid, MASS_FLOOR};
use crate::potential::{hessian_term_with, InteractionPotential, Kernels};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Initialization {
    /// Classical bridge marginals under the discrete heat semigroup.
    HeatInterpolation,
    /// Classical bridge relative to the McKean–Vlasov flow started at μ_in.
    /// Coincides with `HeatInterpolation` when W = 0.
    #[default]
    MkvPullback,
    Provided { flow: MarginalFlow },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Descent iterations.
    pub max_outer: usize,
    /// Backtracking trials per iteration.
    pub max_inner: usize,
    pub armijo: f64,
    pub backtrack: f64,
    /// Marginal damping of the frozen-drift baseline.
    pub damping: f64,
    pub tol_grad: f64,
    pub tol_ce: f64,
    pub tol_bc: f64,
    pub init: Initialization,
    /// Also start from the other built-in initialization and keep the better basin.
    pub multistart: bool,
    pub memory: usize,
    pub sinkhorn_tol: f64,
    pub sinkhorn_max: usize,
    pub ipfp_outer: usize,
    pub ipfp_tol: f64,
    pub fokker_planck: FokkerPlanckConfig,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_outer: 6000,
            max_inner: 40,
            armijo: 1e-4,
            backtrack: 0.5,
            damping: 0.5,
            tol_grad: 1e-4,
            tol_ce: 1e-8,
            tol_bc: 1e-10,
            init: Initialization::MkvPullback,
            multistart: false,
            memory: 20,
            sinkhorn_tol: 1e-13,
            sinkhorn_max: 50_000,
            ipfp_outer: 500,
            ipfp_tol: 1e-10,
            fokker_planck: FokkerPlanckConfig::default(),
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let tols = [self.tol_grad, self.tol_ce, self.tol_bc, self.sinkhorn_tol, self.ipfp_tol, self.armijo];
        if tols.iter().any(|t| !(*t > 0.0)) {
            return Err(Error::InfeasibleEndpoints("solver tolerances must be positive".into()));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) || !(self.backtrack > 0.0 && self.backtrack < 1.0) {
            return Err(Error::InfeasibleEndpoints("damping must lie in (0, 1], backtrack in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Value and gradient machinery of the discrete cost on a fixed grid.
struct Evaluator {
    k: Kernels,
    dx: f64,
    dt: f64,
    n_steps: usize,
    nc: usize,
}

struct MidTerms {
    value: f64,
    d_nu: Vec<f64>,
    d_m: Vec<f64>,
}

impl Evaluator {
    fn new(w: &InteractionPotential, grid: &SpatialGrid, tg: &TimeGrid) -> Self {
        Self { k: w.kernels(grid), dx: grid.dx(), dt: tg.dt(), n_steps: tg.n_steps, nc: grid.n_cells }
    }

    /// Contribution of one time midpoint: ν = ½(μ_k + μ_{k+1}) and its face momenta.
    fn midpoint(&self, nu: &[f64], m: &[f64], want_grad: bool) -> MidTerms {
        let nc = self.nc;
        let dx = self.dx;
        let c = self.dt * dx;
        let max = nu.iter().cloned().fold(0.0, f64::max);
        let keep: Vec<bool> = nu.iter().map(|p| *p > 0.0 && *p >= MASS_FLOOR * max).collect();
        let force = if self.k.zero { vec![0.0; nc] } else { self.k.force(nu) };
        let mut value = 0.0;
        let mut d_nu = vec![0.0; if want_grad { nc } else { 0 }];
        let mut d_m = vec![0.0; if want_grad { nc + 1 } else { 0 }];
        let mut a = vec![0.0; if want_grad { nc } else { 0 }];
        for f in 1..nc {
            let (l, r) = (f - 1, f);
            if !(keep[l] && keep[r]) {
                continue;
            }
            let mu_f = 0.5 * (nu[l] + nu[r]);
            let v = m[f] / mu_f;
            let psi = v + 0.5 * (nu[r].ln() - nu[l].ln()) / dx + 0.5 * (force[l] + force[r]);
            value += 0.5 * c * psi * psi * mu_f;
            if want_grad {
                d_m[f] = c * psi;
                let dmu_f = c * (0.5 * psi * psi - psi * v);
                let u = c * psi * mu_f;
                d_nu[l] += 0.5 * dmu_f - 0.5 * u / (dx * nu[l]);
                d_nu[r] += 0.5 * dmu_f + 0.5 * u / (dx * nu[r]);
                a[l] += 0.5 * u;
                a[r] += 0.5 * u;
            }
        }
        if want_grad && !self.k.zero {
            let fa = self.k.apply_t(&self.k.w1, &a);
            d_nu.iter_mut().zip(&fa).for_each(|(d, x)| *d += x);
        }
        MidTerms { value, d_nu, d_m }
    }

    /// J and its partials with the face momenta held as independent variables.
    fn partials(&self, mus: &[Vec<f64>], faces: &[Vec<f64>], want_grad: bool) -> (f64, Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let terms: Vec<MidTerms> = (0..self.n_steps)
            .into_par_iter()
            .map(|k| {
                let nu: Vec<f64> = mus[k].iter().zip(&mus[k + 1]).map(|(a, b)| 0.5 * (a + b)).collect();
                self.midpoint(&nu, &faces[k], want_grad)
            })
            .collect();
        let value = terms.iter().map(|t| t.value).sum();
        if !want_grad {
            return (value, Vec::new(), Vec::new());
        }
        let mut d_mu = vec![vec![0.0; self.nc]; self.n_steps + 1];
        for (k, t) in terms.iter().enumerate() {
            for i in 0..self.nc {
                d_mu[k][i] += 0.5 * t.d_nu[i];
                d_mu[k + 1][i] += 0.5 * t.d_nu[i];
            }
        }
        (value, d_mu, terms.into_iter().map(|t| t.d_m).collect())
    }

    fn faces(&self, mus: &[Vec<f64>]) -> Vec<Vec<f64>> {
        mus.windows(2)
            .map(|w| {
                let mut acc = 0.0;
                let mut out = Vec::with_capacity(self.nc + 1);
                out.push(0.0);
                for i in 0..self.nc {
                    acc -= (w[1][i] - w[0][i]) / self.dt * self.dx;
                    out.push(acc);
                }
                out
            })
            .collect()
    }

    /// Total derivative in μ when the face momenta follow the continuity equation.
    fn reduced(&self, mus: &[Vec<f64>]) -> (f64, Vec<Vec<f64>>) {
        let faces = self.faces(mus);
        let (value, mut d_mu, d_faces) = self.partials(mus, &faces, true);
        let s = self.dx / self.dt;
        for (k, gf) in d_faces.iter().enumerate() {
            // M_f = −(Δx/Δt) Σ_{i<f} (μ_{k+1,i} − μ_{k,i})
            let mut tail = 0.0;
            for i in (0..self.nc).rev() {
                tail += gf[i + 1];
                d_mu[k + 1][i] -= s * tail;
                d_mu[k][i] += s * tail;
            }
        }
        (value, d_mu)
    }
}

/// Largest violation of the discrete continuity equation, boundary faces included.
pub fn continuity_residual(flow: &MarginalFlow, faces: &[Vec<f64>]) -> f64 {
    let dx = flow.grid().dx();
    let dt = flow.time_grid.dt();
    let mut worst: f64 = 0.0;
    for (k, m) in faces.iter().enumerate() {
        let a = &flow.densities[k].values;
        let b = &flow.densities[k + 1].values;
        worst = worst.max(m[0].abs()).max(m[m.len() - 1].abs());
        for i in 0..a.len() {
            worst = worst.max(((b[i] - a[i]) / dt + (m[i + 1] - m[i]) / dx).abs());
        }
    }
    worst
}

const TOL_CE: f64 = 1e-8;

fn check_pair(flow: &MarginalFlow, faces: &[Vec<f64>]) -> Result<()> {
    if faces.len() != flow.time_grid.n_steps || faces.iter().any(|f| f.len() != flow.grid().n_cells + 1) {
        return Err(Error::GridMismatch);
    }
    let scale = flow
        .densities
        .windows(2)
        .flat_map(|w| w[1].values.iter().zip(&w[0].values).map(|(b, a)| (b - a).abs()))
        .fold(0.0, f64::max)
        / flow.time_grid.dt();
    let r = continuity_residual(flow, faces);
    if r > TOL_CE * (1.0 + scale) {
        return Err(Error::ContinuityViolation(r));
    }
    Ok(())
}

fn slices(flow: &MarginalFlow) -> Vec<Vec<f64>> {
    flow.densities.iter().map(|d| d.values.clone()).collect()
}

/// J = ½ ∫∫ |m/μ + ½∇log μ + ∇W∗μ|² μ for a flow and face momenta satisfying
/// the discrete continuity equation (staggered quadrature, see the module docs).
pub fn bb_objective(flow: &MarginalFlow, faces: &[Vec<f64>], w: &InteractionPotential) -> Result<f64> {
    check_pair(flow, faces)?;
    Ok(bb_objective_unchecked(flow, faces, w))
}

/// As [`bb_objective`] without the continuity check (for probing partials).
pub fn bb_objective_unchecked(flow: &MarginalFlow, faces: &[Vec<f64>], w: &InteractionPotential) -> f64 {
    let ev = Evaluator::new(w, &flow.grid(), &flow.time_grid);
    ev.partials(&slices(flow), faces, false).0
}

#[derive(Debug, Clone, PartialEq)]
pub struct BbGradient {
    /// ∂J/∂μ_{k,i} with the face momenta fixed.
    pub d_mu: Vec<Vec<f64>>,
    /// ∂J/∂M_{k+½,f}.
    pub d_m: Vec<Vec<f64>>,
}

pub fn bb_gradient(flow: &MarginalFlow, faces: &[Vec<f64>], w: &InteractionPotential) -> Result<BbGradient> {
    check_pair(flow, faces)?;
    let ev = Evaluator::new(w, &flow.grid(), &flow.time_grid);
    let (_, d_mu, d_m) = ev.partials(&slices(flow), faces, true);
    Ok(BbGradient { d_mu, d_m })
}

/// J(μ) with momenta slaved to μ, and dJ/dμ for every slice.
pub fn reduced_gradient(flow: &MarginalFlow, w: &InteractionPotential) -> (f64, Vec<Vec<f64>>) {
    let ev = Evaluator::new(w, &flow.grid(), &flow.time_grid);
    ev.reduced(&slices(flow))
}

/// L²(μ dx dt) norm of the projected functional derivative on interior slices.
fn gradient_norm(mus: &[Vec<f64>], d_mu: &[Vec<f64>], dx: f64, dt: f64) -> f64 {
    let n = mus.len() - 1;
    let mut total = 0.0;
    for k in 1..n {
        let mean: f64 = mus[k].iter().zip(&d_mu[k]).map(|(p, g)| p * g).sum::<f64>() * dx;
        for (p, g) in mus[k].iter().zip(&d_mu[k]) {
            let gg = (g - mean) / (dt * dx);
            total += p * gg * gg * dx * dt;
        }
    }
    total.sqrt()
}

/// Coordinates r with μ_k = r_k² / Σ r_k² Δx on interior slices. This is a
/// smooth chart of the simplex in which the Euclidean metric is the
/// Fisher–Rao metric, so descent steps respect positivity and the 1/μ scaling
/// of the kinetic term.
struct Chart<'a> {
    ev: &'a Evaluator,
    mu_in: &'a [f64],
    mu_fin: &'a [f64],
}

impl Chart<'_> {
    fn to_mus(&self, r: &[f64]) -> Vec<Vec<f64>> {
        let nc = self.ev.nc;
        let n = self.ev.n_steps;
        let mut mus = Vec::with_capacity(n + 1);
        mus.push(self.mu_in.to_vec());
        for k in 1..n {
            let rk = &r[(k - 1) * nc..k * nc];
            let z: f64 = rk.iter().map(|v| v * v).sum::<f64>() * self.ev.dx;
            mus.push(rk.iter().map(|v| v * v / z).collect());
        }
        mus.push(self.mu_fin.to_vec());
        mus
    }

    fn value(&self, r: &[f64]) -> f64 {
        let mus = self.to_mus(r);
        let faces = self.ev.faces(&mus);
        self.ev.partials(&mus, &faces, false).0
    }

    fn value_grad(&self, r: &[f64]) -> (f64, Vec<f64>, f64) {
        let nc = self.ev.nc;
        let n = self.ev.n_steps;
        let dx = self.ev.dx;
        let mus = self.to_mus(r);
        let (value, d_mu) = self.ev.reduced(&mus);
        let mut g = vec![0.0; r.len()];
        for k in 1..n {
            let rk = &r[(k - 1) * nc..k * nc];
            let z: f64 = rk.iter().map(|v| v * v).sum::<f64>() * dx;
            let mean: f64 = mus[k].iter().zip(&d_mu[k]).map(|(p, g)| p * g).sum::<f64>() * dx;
            for i in 0..nc {
                g[(k - 1) * nc + i] = 2.0 * rk[i] / z * (d_mu[k][i] - mean);
            }
        }
        let gn = gradient_norm(&mus, &d_mu, dx, self.ev.dt);
        (value, g, gn)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Inverse of a constant-coefficient model of the Hessian in the √μ chart:
/// kinetic symbol 4ω_t²/ω_x² plus the Fisher term ω_x², diagonal in a sine
/// basis in time (pinned ends) and a cosine basis in space.
struct Preconditioner {
    rows: usize,
    cols: usize,
    dct: Arc<dyn TransformType2And3<f64>>,
    dst: Arc<dyn Dst1<f64>>,
    inv_symbol: Vec<f64>,
}

impl Preconditioner {
    fn new(n_steps: usize, nc: usize, dt: f64, dx: f64) -> Self {
        use std::f64::consts::PI;
        let rows = n_steps - 1;
        let mut planner = DctPlanner::new();
        let mut inv_symbol = vec![0.0; rows * nc];
        for j in 0..rows {
            let lt = (2.0 / dt * (PI * (j + 1) as f64 / (2 * n_steps) as f64).sin()).powi(2);
            for l in 0..nc {
                let lx = (2.0 / dx * (PI * l as f64 / (2 * nc) as f64).sin()).powi(2);
                let sym = 4.0 * lt / lx.max(PRECOND_FLOOR) + lx + PRECOND_FLOOR;
                inv_symbol[j * nc + l] = 1.0 / (dt * dx * sym);
            }
        }
        Self { rows, cols: nc, dct: planner.plan_dct2(nc), dst: planner.plan_dst1(rows), inv_symbol }
    }

    /// Orthonormal sine transform along time (its own inverse).
    fn temporal(&self, src: &[f64]) -> Vec<f64> {
        let (rows, cols) = (self.rows, self.cols);
        let scale = (2.0 / (rows + 1) as f64).sqrt();
        let mut t = vec![0.0; rows * cols];
        t.par_chunks_mut(rows).enumerate().for_each(|(i, col)| {
            for (k, v) in col.iter_mut().enumerate() {
                *v = src[k * cols + i];
            }
            self.dst.process_dst1(col);
        });
        let mut out = vec![0.0; rows * cols];
        out.par_chunks_mut(cols).enumerate().for_each(|(k, row)| {
            for (i, v) in row.iter_mut().enumerate() {
                *v = scale * t[i * rows + k];
            }
        });
        out
    }

    fn apply(&self, g: &[f64]) -> Vec<f64> {
        let cols = self.cols;
        let c0 = (1.0 / cols as f64).sqrt();
        let cl = (2.0 / cols as f64).sqrt();
        let mut h = g.to_vec();
        h.par_chunks_mut(cols).for_each(|row| {
            self.dct.process_dct2(row);
            row[0] *= c0;
            row[1..].iter_mut().for_each(|v| *v *= cl);
        });
        let mut h = self.temporal(&h);
        h.iter_mut().zip(&self.inv_symbol).for_each(|(v, s)| *v *= s);
        let mut out = self.temporal(&h);
        out.par_chunks_mut(cols).for_each(|row| {
            row[0] *= 2.0 * c0;
            row[1..].iter_mut().for_each(|v| *v *= cl);
            self.dct.process_dct3(row);
        });
        out
    }
}

const PRECOND_FLOOR: f64 = 1.0;
/// Relative size of rounding noise in one evaluation of J.
const NOISE_LEVEL: f64 = 1e-13;
/// Iterations without progress in J or in the gradient norm before giving up.
const STALL_WINDOW: usize = 50;

struct Lbfgs {
    memory: usize,
    s: Vec<Vec<f64>>,
    y: Vec<Vec<f64>>,
    /// sᵀy / yᵀP⁻¹y for the newest pair.
    gamma: f64,
}

impl Lbfgs {
    fn direction(&self, g: &[f64], pre: &Preconditioner) -> Vec<f64> {
        let mut q = g.to_vec();
        let mut alpha = Vec::with_capacity(self.s.len());
        for (s, y) in self.s.iter().zip(&self.y).rev() {
            let a = dot(s, &q) / dot(y, s);
            q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
            alpha.push(a);
        }
        q = pre.apply(&q);
        q.iter_mut().for_each(|v| *v *= self.gamma);
        for ((s, y), a) in self.s.iter().zip(&self.y).zip(alpha.iter().rev()) {
            let b = dot(y, &q) / dot(y, s);
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
        }
        q.iter_mut().for_each(|v| *v = -*v);
        q
    }

    fn push(&mut self, s: Vec<f64>, y: Vec<f64>, pre: &Preconditioner) {
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() && sy > 0.0 {
            self.gamma = sy / dot(&y, &pre.apply(&y));
            if self.s.len() == self.memory {
                self.s.remove(0);
                self.y.remove(0);
            }
            self.s.push(s);
            self.y.push(y);
        }
    }

    fn clear(&mut self) {
        self.s.clear();
        self.y.clear();
        self.gamma = 1.0;
    }
}

/// Largest mass an endpoint may hold in each outermost cell.
pub const BOUNDARY_MASS_LIMIT: f64 = 1e-8;

fn check_endpoints(mu_in: &Density, mu_fin: &Density) -> Result<()> {
    if mu_in.grid != mu_fin.grid {
        return Err(Error::GridMismatch);
    }
    for (name, d) in [("mu_in", mu_in), ("mu_fin", mu_fin)] {
        if !d.entropy().is_finite() {
            return Err(Error::InfeasibleEndpoints(format!("{name} has infinite entropy")));
        }
        let bm = d.boundary_mass(1);
        if bm > BOUNDARY_MASS_LIMIT {
            return Err(Error::InfeasibleEndpoints(format!("{name} has boundary mass {bm:e}")));
        }
    }
    // disjoint retained supports would need unbounded velocities at fixed Δt
    let a = mu_in.retained();
    let b = mu_fin.retained();
    let lo_a = a.iter().position(|v| *v).unwrap_or(0);
    let hi_a = a.iter().rposition(|v| *v).unwrap_or(0);
    let lo_b = b.iter().position(|v| *v).unwrap_or(0);
    let hi_b = b.iter().rposition(|v| *v).unwrap_or(0);
    if hi_a < lo_b || hi_b < lo_a {
        return Err(Error::InfeasibleEndpoints("effective supports are disjoint".into()));
    }
    Ok(())
}

/// Minimize the discrete Benamou–Brenier cost over flows joining μ_in to μ_fin.
pub fn solve_mfsb(
    w: &InteractionPotential,
    mu_in: &Density,
    mu_fin: &Density,
    time_grid: TimeGrid,
    config: &SolverConfig,
) -> Result<BridgeSolution> {
    config.validate()?;
    check_endpoints(mu_in, mu_fin)?;
    let mut starts = vec![config.init.clone()];
    if config.multistart {
        for alt in [Initialization::HeatInterpolation, Initialization::MkvPullback] {
            if !starts.contains(&alt) {
                starts.push(alt);
            }
        }
    }
    let mut best: Option<BridgeSolution> = None;
    let mut costs = Vec::new();
    for init in &starts {
        let flow0 = initial_flow(w, mu_in, mu_fin, time_grid, init, config)?;
        let sol = descend(w, flow0, config)?;
        costs.push(sol.cost);
        if best.as_ref().is_none_or(|b| sol.cost < b.cost) {
            best = Some(sol);
        }
    }
    let mut best = best.expect("at least one start");
    if costs.len() > 1 {
        let lo = costs.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = costs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        best.diagnostics.notes.push(format!("multistart costs {costs:?}; spread {:.3e}", hi - lo));
    }
    Ok(best)
}

/// Starting flow for the descent.
pub fn initial_flow(
    w: &InteractionPotential,
    mu_in: &Density,
    mu_fin: &Density,
    time_grid: TimeGrid,
    init: &Initialization,
    config: &SolverConfig,
) -> Result<MarginalFlow> {
    match init {
        Initialization::Provided { flow } => {
            if flow.time_grid != time_grid || flow.grid() != mu_in.grid {
                return Err(Error::GridMismatch);
            }
            let mut f = flow.clone();
            f.densities[0] = mu_in.clone();
            let last = f.densities.len() - 1;
            f.densities[last] = mu_fin.clone();
            Ok(f)
        }
        Initialization::HeatInterpolation => {
            let frozen = MarginalFlow::constant(time_grid, mu_in);
            Ok(dynamic_sinkhorn(&InteractionPotential::zero(), &frozen, mu_in, mu_fin, config)?.0)
        }
        Initialization::MkvPullback => {
            let frozen = mkv_flow_with(w, mu_in, time_grid, &config.fokker_planck)?;
            Ok(dynamic_sinkhorn(w, &frozen, mu_in, mu_fin, config)?.0)
        }
    }
}

fn descend(w: &InteractionPotential, flow0: MarginalFlow, config: &SolverConfig) -> Result<BridgeSolution> {
    let tg = flow0.time_grid;
    let grid = flow0.grid();
    let ev = Evaluator::new(w, &grid, &tg);
    let chart = Chart { ev: &ev, mu_in: &flow0.densities[0].values, mu_fin: &flow0.last().values };
    let n = tg.n_steps;
    let mut x: Vec<f64> = flow0.densities[1..n].iter().flat_map(|d| d.values.iter().map(|p| p.sqrt())).collect();
    let (mut f, mut g, mut gn) = chart.value_grad(&x);
    let mut history = vec![f];
    let pre = Preconditioner::new(n, grid.n_cells, tg.dt(), grid.dx());
    let mut lb = Lbfgs { memory: config.memory, s: Vec::new(), y: Vec::new(), gamma: 1.0 };
    let mut evaluations = 1;
    let mut iterations = 0;
    let mut converged = gn <= config.tol_grad;
    let mut notes = Vec::new();
    let mut stalled = 0usize;
    let mut best_gn = gn;
    while !converged && iterations < config.max_outer {
        iterations += 1;
        let mut d = lb.direction(&g, &pre);
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            lb.clear();
            d = pre.apply(&g).iter().map(|v| -v).collect();
            slope = dot(&g, &d);
        }
        // first step of a fresh memory: move r by at most ~1e-2 relative
        let mut step = if lb.s.is_empty() {
            let dn = dot(&d, &d).sqrt();
            let xn = dot(&x, &x).sqrt();
            (1e-2 * xn / dn).min(1.0)
        } else {
            1.0
        };
        let mut accepted = None;
        for _ in 0..config.max_inner {
            let trial: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + step * b).collect();
            evaluations += 1;
            let ft = chart.value(&trial);
            if ft.is_finite() && ft <= f + config.armijo * step * slope {
                accepted = Some((trial, None));
                break;
            }
            // Near the minimum J changes by less than its rounding error and
            // Armijo cannot tell; let the directional derivative decide.
            if ft.is_finite() && (ft - f).abs() <= NOISE_LEVEL * f.abs() {
                evaluations += 1;
                let at = chart.value_grad(&trial);
                if dot(&at.1, &d).abs() <= 0.9 * slope.abs() {
                    accepted = Some((trial, Some(at)));
                    break;
                }
            }
            step *= config.backtrack;
        }
        let Some((xn, known)) = accepted else {
            if lb.s.is_empty() {
                notes.push(format!("line search failed at iteration {iterations}"));
                break;
            }
            lb.clear();
            continue;
        };
        let (fn_, gn_new, gnorm) = match known {
            Some(at) => at,
            None => {
                evaluations += 1;
                chart.value_grad(&xn)
            }
        };
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        lb.push(s, y, &pre);
        if f - fn_ > 1e-15 * f.abs() || gnorm < best_gn {
            stalled = 0;
        } else {
            stalled += 1;
        }
        best_gn = best_gn.min(gnorm);
        x = xn;
        f = fn_.min(f);
        g = gn_new;
        gn = gnorm;
        history.push(f);
        converged = gn <= config.tol_grad;
        if stalled >= STALL_WINDOW {
            notes.push(format!("objective stalled at iteration {iterations}"));
            break;
        }
    }
    let mus = chart.to_mus(&x);
    let densities = mus.into_iter().map(|v| Density { grid, values: v }).collect();
    let flow = MarginalFlow::new(tg, densities)?;
    let faces = face_momentum(&flow)?;
    let ce = continuity_residual(&flow, &faces);
    let diagnostics = SolverDiagnostics {
        method: "bb-lbfgs".into(),
        iterations,
        evaluations,
        converged,
        gradient_norm: gn,
        continuity_residual: ce,
        boundary_residual: 0.0,
        objective_history: history,
        notes,
    };
    BridgeSolution::from_flow(flow, w, diagnostics)
}

/// Schrödinger bridge over the Markov chain of frozen-drift Fokker–Planck
/// steps (drift −∇W∗frozen). Returns the bridge marginals and the path-space
/// relative entropy to the chain started at μ_in.
pub fn dynamic_sinkhorn(
    w: &InteractionPotential,
    frozen: &MarginalFlow,
    mu_in: &Density,
    mu_fin: &Density,
    config: &SolverConfig,
) -> Result<(MarginalFlow, f64)> {
    let tg = frozen.time_grid;
    let grid = mu_in.grid;
    let dx = grid.dx();
    let k = w.kernels(&grid);
    let steps: Vec<FpStep> = frozen.densities[..tg.n_steps]
        .par_iter()
        .map(|nu| FpStep::new(&interaction_phi(&k, &nu.values), dx, tg.dt(), &config.fokker_planck))
        .collect::<Result<_>>()?;
    let a_in: Vec<f64> = mu_in.values.iter().map(|p| p * dx).collect();
    let a_fin: Vec<f64> = mu_fin.values.iter().map(|p| p * dx).collect();
    let nc = grid.n_cells;
    let mut g = vec![1.0; nc];
    let mut f = vec![1.0; nc];
    let ratio = |num: f64, den: f64| if num > 0.0 && den > 0.0 { num / den } else { 0.0 };
    let mut err = f64::INFINITY;
    let mut iters = 0;
    while iters < config.sinkhorn_max {
        iters += 1;
        let mut beta = g.clone();
        for st in steps.iter().rev() {
            beta = st.apply_t(&beta);
        }
        f = a_in.iter().zip(&beta).map(|(a, b)| ratio(*a, *b)).collect();
        let mut alpha = f.clone();
        for st in &steps {
            alpha = st.apply(&alpha);
        }
        err = alpha.iter().zip(&g).zip(&a_fin).map(|((a, g), q)| (a * g - q).abs()).sum();
        g = a_fin.iter().zip(&alpha).map(|(q, a)| ratio(*q, *a)).collect();
        if err <= config.sinkhorn_tol {
            break;
        }
    }
    if err > config.sinkhorn_tol {
        return Err(Error::NoConvergence { what: "sinkhorn", iters, residual: err });
    }
    let mut alphas = Vec::with_capacity(tg.n_nodes());
    let mut alpha = f.clone();
    alphas.push(alpha.clone());
    for st in &steps {
        alpha = st.apply(&alpha);
        alphas.push(alpha.clone());
    }
    let mut betas = vec![g.clone(); tg.n_nodes()];
    for (j, st) in steps.iter().enumerate().rev() {
        betas[j] = st.apply_t(&betas[j + 1]);
    }
    let mut densities = Vec::with_capacity(tg.n_nodes());
    for kk in 0..tg.n_nodes() {
        let v: Vec<f64> = alphas[kk].iter().zip(&betas[kk]).map(|(a, b)| (a * b).max(0.0)).collect();
        densities.push(Density::new(grid, v)?);
    }
    densities[0] = mu_in.clone();
    densities[tg.n_steps] = mu_fin.clone();
    let xlogy = |p: f64, v: f64| if p > 0.0 && v > 0.0 { p * v.ln() } else { 0.0 };
    let kl: f64 = a_in.iter().zip(&f).map(|(a, f)| xlogy(*a, ratio(*f, *a))).sum::<f64>()
        + a_fin.iter().zip(&g).map(|(q, g)| xlogy(*q, *g)).sum::<f64>();
    Ok((MarginalFlow::new(tg, densities)?, kl))
}

/// Baseline: freeze the marginal flow, solve the classical bridge for the
/// frozen-drift reference, damp the marginal update, repeat. Its fixed point
/// ignores the W″ coupling of the true optimality system.
pub fn ipfp_frozen(
    w: &InteractionPotential,
    mu_in: &Density,
    mu_fin: &Density,
    time_grid: TimeGrid,
    config: &SolverConfig,
) -> Result<BridgeSolution> {
    config.validate()?;
    check_endpoints(mu_in, mu_fin)?;
    let mut nu = initial_flow(w, mu_in, mu_fin, time_grid, &config.init, config)?;
    let mut change = f64::INFINITY;
    let mut kl = 0.0;
    let mut iterations = 0;
    let mut bridge = nu.clone();
    while iterations < config.ipfp_outer {
        iterations += 1;
        let (b, path_kl) = dynamic_sinkhorn(w, &nu, mu_in, mu_fin, config)?;
        kl = path_kl;
        change = b
            .densities
            .iter()
            .zip(&nu.densities)
            .flat_map(|(a, c)| a.values.iter().zip(&c.values).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max);
        bridge = b;
        if change <= config.ipfp_tol || w.is_zero() {
            break;
        }
        for (dn, db) in nu.densities.iter_mut().zip(&bridge.densities) {
            for (v, b) in dn.values.iter_mut().zip(&db.values) {
                *v = (1.0 - config.damping) * *v + config.damping * b;
            }
        }
    }
    let converged = change <= config.ipfp_tol || w.is_zero();
    let faces = face_momentum(&bridge)?;
    let diagnostics = SolverDiagnostics {
        method: "ipfp-frozen".into(),
        iterations,
        evaluations: iterations,
        converged,
        gradient_norm: f64::NAN,
        continuity_residual: continuity_residual(&bridge, &faces),
        boundary_residual: 0.0,
        objective_history: Vec::new(),
        notes: vec![format!("path relative entropy to frozen reference {kl:.6e}"), format!("last marginal change {change:.3e}")],
    };
    if !converged {
        return Err(Error::NoConvergence { what: "ipfp_frozen", iters: iterations, residual: change });
    }
    BridgeSolution::from_flow(bridge, w, diagnostics)
}

/// Residual of ∂ₜΨ + ½∂ₓₓΨ + ∂ₓΨ(Ψ − W′∗μ) − ∫W″(x−y)(Ψ(x) − Ψ(y))μ(dy).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualNorms {
    pub sup: f64,
    pub l2: f64,
}

/// Weighted by μ over interior space-time nodes; the sup norm is taken over
/// cells holding at least a 1e-3 fraction of the slice peak.
pub fn optimality_residual(sol: &BridgeSolution, pot: &InteractionPotential) -> ResidualNorms {
    let flow = &sol.flow;
    let grid = flow.grid();
    let dx = grid.dx();
    let dt = flow.time_grid.dt();
    let n = flow.time_grid.n_steps;
    let nc = grid.n_cells;
    let k = pot.kernels(&grid);
    let rows: Vec<(f64, f64, f64)> = (1..n - 1)
        .into_par_iter()
        .map(|t| {
            let mu = &flow.densities[t];
            let s = &sol.corrector.values[t];
            let s1 = &sol.corrector.values[t + 1];
            let keep = mu.retained();
            let mask = bulk_mask(mu, BULK_FRACTION);
            let ds = grad(s, dx);
            let f = k.force(&mu.values);
            let h = hessian_term_with(&k, &mu.values, s);
            let (mut sup, mut sq, mut mass): (f64, f64, f64) = (0.0, 0.0, 0.0);
            for i in 1..nc - 1 {
                if !(keep[i - 1] && keep[i] && keep[i + 1]) {
                    continue;
                }
                let lap = (s[i + 1] - 2.0 * s[i] + s[i - 1]) / (dx * dx);
                let r = (s1[i] - s[i]) / dt + 0.5 * lap + ds[i] * (s[i] - f[i]) - h[i];
                sq += r * r * mu.values[i] * dx;
                mass += mu.values[i] * dx;
                if mask[i] {
                    sup = sup.max(r.abs());
                }
            }
            (sup, sq, mass)
        })
        .collect();
    let sup = rows.iter().fold(0.0, |m, r| f64::max(m, r.0));
    let sq: f64 = rows.iter().map(|r| r.1).sum();
    let mass: f64 = rows.iter().map(|r| r.2).sum();
    ResidualNorms { sup, l2: if mass > 0.0 { (sq / mass).sqrt() } else { 0.0 } }
}



#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{density_from_spec, DensitySpec, MixtureComponent, SpatialGrid};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn asym(g: SpatialGrid) -> (Density, Density) {
        let mix = DensitySpec::Mixture {
            components: vec![
                MixtureComponent { weight: 0.7, mean: -0.6, std: 0.5 },
                MixtureComponent { weight: 0.3, mean: 1.4, std: 0.8 },
            ],
        };
        (
            density_from_spec(&mix, g).unwrap(),
            density_from_spec(&DensitySpec::Gaussian { mean: 0.0, std: 0.5 }, g).unwrap(),
        )
    }

    fn small_bridge() -> MarginalFlow {
        let g = SpatialGrid::new(8.0, 64).unwrap();
        let tg = TimeGrid::new(2.0, 16).unwrap();
        let (a, b) = asym(g);
        dynamic_sinkhorn(&InteractionPotential::zero(), &MarginalFlow::constant(tg, &a), &a, &b, &SolverConfig::default())
            .unwrap()
            .0
    }

    /// Continuity-preserving direction built from face fields φ_k (zero at the
    /// ends in time and space): δμ_k = −div φ_k, δM_{k+½} = (φ_{k+1} − φ_k)/Δt.
    fn direction(flow: &MarginalFlow, rng: &mut ChaCha8Rng) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let n = flow.time_grid.n_steps;
        let dx = flow.grid().dx();
        let dt = flow.time_grid.dt();
        let phi: Vec<Vec<f64>> = (0..=n)
            .map(|k| {
                let mu = &flow.densities[k].values;
                (0..=mu.len())
                    .map(|f| {
                        if k == 0 || k == n || f == 0 || f == mu.len() {
                            0.0
                        } else {
                            mu[f - 1].min(mu[f]) * rng.gen_range(-1.0..1.0)
                        }
                    })
                    .collect()
            })
            .collect();
        let dmu = phi.iter().map(|p| p.windows(2).map(|w| -(w[1] - w[0]) / dx).collect()).collect();
        let dm = phi.windows(2).map(|w| w[1].iter().zip(&w[0]).map(|(b, a)| (b - a) / dt).collect()).collect();
        (dmu, dm)
    }

    fn along(flow: &MarginalFlow, faces: &[Vec<f64>], dmu: &[Vec<f64>], dm: &[Vec<f64>], h: f64) -> (MarginalFlow, Vec<Vec<f64>>) {
        let mut f = flow.clone();
        for (d, v) in f.densities.iter_mut().zip(dmu) {
            d.values.iter_mut().zip(v).for_each(|(x, y)| *x += h * y);
        }
        let m = faces.iter().zip(dm).map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + h * y).collect()).collect();
        (f, m)
    }

    fn pair(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>()).sum()
    }

    fn potentials() -> [InteractionPotential; 3] {
        [InteractionPotential::zero(), InteractionPotential::quadratic(0.5), InteractionPotential::gaussian_well(1.0, 0.7)]
    }

    #[test]
    fn bb_gradient_matches_central_differences() {
        let flow = small_bridge();
        let faces = face_momentum(&flow).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for w in potentials() {
            let gr = bb_gradient(&flow, &faces, &w).unwrap();
            for _ in 0..20 {
                let (dmu, dm) = direction(&flow, &mut rng);
                let analytic = pair(&gr.d_mu, &dmu) + pair(&gr.d_m, &dm);
                let h = 1e-6;
                let (fp, mp) = along(&flow, &faces, &dmu, &dm, h);
                let (fm, mm) = along(&flow, &faces, &dmu, &dm, -h);
                let fd = (bb_objective(&fp, &mp, &w).unwrap() - bb_objective(&fm, &mm, &w).unwrap()) / (2.0 * h);
                assert!((fd - analytic).abs() <= 1e-5 * analytic.abs(), "{:?}: fd {fd} analytic {analytic}", w.kind);
            }
        }
    }

    #[test]
    fn reduced_gradient_is_the_chained_partial() {
        let flow = small_bridge();
        let faces = face_momentum(&flow).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for w in potentials() {
            let gr = bb_gradient(&flow, &faces, &w).unwrap();
            let (j, red) = reduced_gradient(&flow, &w);
            assert!((j - bb_objective(&flow, &faces, &w).unwrap()).abs() < 1e-14);
            for _ in 0..5 {
                let (dmu, dm) = direction(&flow, &mut rng);
                let full = pair(&gr.d_mu, &dmu) + pair(&gr.d_m, &dm);
                let chained = pair(&red, &dmu);
                // tail cells carry |∂J/∂M| ~ 1e4, which amplifies cumsum rounding
                assert!((full - chained).abs() <= 1e-8 * full.abs().max(1e-8), "{full} vs {chained}");
            }
        }
    }

    #[test]
    fn objective_and_field_cost_agree_to_second_order() {
        let gap = |cells: usize, steps: usize| {
            let g = SpatialGrid::new(8.0, cells).unwrap();
            let tg = TimeGrid::new(2.0, steps).unwrap();
            let (a, b) = asym(g);
            let w = InteractionPotential::quadratic(0.5);
            let flow = dynamic_sinkhorn(&w, &crate::dynamics::mkv_flow(&w, &a, tg).unwrap(), &a, &b, &SolverConfig::default()).unwrap().0;
            let j = bb_objective(&flow, &face_momentum(&flow).unwrap(), &w).unwrap();
            let sol = BridgeSolution::from_flow(flow, &w, SolverDiagnostics::default()).unwrap();
            (j - sol.cost).abs() / sol.cost
        };
        let (coarse, fine) = (gap(128, 32), gap(256, 64));
        assert!(fine < 0.05 && coarse / fine > 2.5, "{coarse} {fine}");
    }

    #[test]
    fn preconditioner_matches_dense_transforms() {
        use std::f64::consts::PI;
        let (n, nc, dt, dx) = (9usize, 12usize, 0.1, 0.3);
        let pre = Preconditioner::new(n, nc, dt, dx);
        let rows = n - 1;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g: Vec<f64> = (0..rows * nc).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let sine = |j: usize, k: usize| (2.0 / n as f64).sqrt() * (PI * ((j + 1) * (k + 1)) as f64 / n as f64).sin();
        let cosine = |l: usize, i: usize| {
            let c = if l == 0 { (1.0 / nc as f64).sqrt() } else { (2.0 / nc as f64).sqrt() };
            c * (PI * l as f64 * (i as f64 + 0.5) / nc as f64).cos()
        };
        let mut hat = vec![0.0; rows * nc];
        for j in 0..rows {
            for l in 0..nc {
                let mut acc = 0.0;
                for k in 0..rows {
                    for i in 0..nc {
                        acc += sine(j, k) * cosine(l, i) * g[k * nc + i];
                    }
                }
                hat[j * nc + l] = acc * pre.inv_symbol[j * nc + l];
            }
        }
        let got = pre.apply(&g);
        for k in 0..rows {
            for i in 0..nc {
                let mut acc = 0.0;
                for j in 0..rows {
                    for l in 0..nc {
                        acc += sine(j, k) * cosine(l, i) * hat[j * nc + l];
                    }
                }
                assert!((acc - got[k * nc + i]).abs() < 1e-12 * acc.abs().max(1.0), "{acc} {}", got[k * nc + i]);
            }
        }
    }

    #[test]
    fn continuity_guard() {
        let flow = small_bridge();
        let mut faces = face_momentum(&flow).unwrap();
        faces[3][20] += 1e-3;
        assert!(matches!(bb_objective(&flow, &faces, &InteractionPotential::zero()), Err(Error::ContinuityViolation(_))));
        faces.pop();
        assert_eq!(bb_objective(&flow, &faces, &InteractionPotential::zero()), Err(Error::GridMismatch));
    }

    #[test]
    fn sinkhorn_matches_marginals_and_reference() {
        let flow = small_bridge();
        let (a, b) = (flow.first().clone(), flow.last().clone());
        let cfg = SolverConfig::default();
        let frozen = MarginalFlow::constant(flow.time_grid, &a);
        // bridge to the reference's own endpoint is the reference: zero entropy
        let heat = crate::dynamics::reference_flow(&InteractionPotential::zero(), &frozen, &a).unwrap();
        let (same, kl) = dynamic_sinkhorn(&InteractionPotential::zero(), &frozen, &a, heat.last(), &cfg).unwrap();
        assert!(kl.abs() < 1e-10, "{kl}");
        for (x, y) in same.densities.iter().zip(&heat.densities) {
            assert!(x.values.iter().zip(&y.values).all(|(p, q)| (p - q).abs() < 1e-9));
        }
        let (_, kl) = dynamic_sinkhorn(&InteractionPotential::zero(), &frozen, &a, &b, &cfg).unwrap();
        assert!(kl > 0.0);
    }

    #[test]
    fn ipfp_is_exact_for_zero_interaction() {
        let flow = small_bridge();
        let sol = ipfp_frozen(&InteractionPotential::zero(), flow.first(), flow.last(), flow.time_grid, &SolverConfig::default()).unwrap();
        for (x, y) in sol.flow.densities.iter().zip(&flow.densities) {
            assert!(x.values.iter().zip(&y.values).all(|(p, q)| (p - q).abs() < 1e-12));
        }
    }

    #[test]
    fn rejects_disjoint_and_boundary_mass() {
        let g = SpatialGrid::new(8.0, 64).unwrap();
        let tg = TimeGrid::new(1.0, 8).unwrap();
        let mut left = vec![0.0; 64];
        left[10] = 1.0;
        let mut right = vec![0.0; 64];
        right[50] = 1.0;
        let (l, r) = (Density::new(g, left).unwrap(), Density::new(g, right).unwrap());
        let w = InteractionPotential::zero();
        let cfg = SolverConfig::default();
        assert!(matches!(solve_mfsb(&w, &l, &r, tg, &cfg), Err(Error::InfeasibleEndpoints(_))));
        let mut edge = vec![1.0; 64];
        edge[0] = 5.0;
        let e = Density::new(g, edge).unwrap();
        assert!(matches!(solve_mfsb(&w, &e, &e, tg, &cfg), Err(Error::InfeasibleEndpoints(_))));
    }

    #[test]
    fn solver_keeps_equilibrium() {
        let g = SpatialGrid::new(8.0, 64).unwrap();
        let tg = TimeGrid::new(1.0, 16).unwrap();
        let w = InteractionPotential::quadratic(0.5);
        let eq = crate::functionals::equilibrium(&w, 0.0, g).unwrap().density;
        let sol = solve_mfsb(&w, &eq, &eq, tg, &SolverConfig { init: Initialization::MkvPullback, ..Default::default() }).unwrap();
        assert!(sol.cost < 1e-8, "{}", sol.cost);
    }
}
