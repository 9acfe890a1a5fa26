//! The `solve`, `mkv`, `simulate`, `verify` and `report` pipelines. Each
//! writes its artifacts plus `manifest.json` into the output directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use mfsb::bridge::{optimality_residual, solve_mfsb, ResidualNorms};
use mfsb::dynamics::{mkv_flow_with, simulate_particles};
use mfsb::functionals::{BridgeSolution, SolverDiagnostics};
use mfsb::grid::{Density, TimeGrid};
use mfsb::verify::{self, BridgeAnalysis, CheckEntry, VerificationReport};

use crate::error::{CliError, Result};
use crate::flowio::{load_flow, save_flow, FlowFormat};
use crate::plot::{csv_table, svg_chart, Series};
use crate::scenario::{CheckKind, EndpointSpec, Prepared, SpecialEndpoint};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Solve,
    Mkv,
    Simulate,
    Verify,
    Report,
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub out: PathBuf,
    pub format: FlowFormat,
    pub strict_w2: bool,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: Command,
    scenario: &'a str,
    scenario_sha256: String,
    mfsb_version: &'static str,
    cli_version: &'static str,
    seeds: Vec<u64>,
    format: FlowFormat,
    strict_w2: bool,
    /// File name → SHA-256 of its contents.
    artifacts: BTreeMap<String, String>,
}

#[derive(Debug, Serialize)]
struct SolveSummary<'a> {
    scenario: &'a str,
    cost: f64,
    residual: ResidualNorms,
    diagnostics: &'a SolverDiagnostics,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Collects written files so the manifest can hash them.
struct Artifacts {
    dir: PathBuf,
    written: BTreeMap<String, String>,
}

impl Artifacts {
    fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self { dir: dir.to_path_buf(), written: BTreeMap::new() })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn record(&mut self, name: &str) -> Result<()> {
        let bytes = std::fs::read(self.path(name))?;
        self.written.insert(name.to_string(), hex(&Sha256::digest(bytes)));
        Ok(())
    }

    fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        std::fs::write(self.path(name), contents)?;
        self.record(name)
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text)
    }

    fn manifest(mut self, p: &Prepared, scenario_bytes: &[u8], command: Command, opts: &RunOptions) -> Result<()> {
        let m = Manifest {
            command,
            scenario: &p.scenario.name,
            scenario_sha256: hex(&Sha256::digest(scenario_bytes)),
            mfsb_version: mfsb::VERSION,
            cli_version: env!("CARGO_PKG_VERSION"),
            seeds: vec![p.scenario.seed],
            format: opts.format,
            strict_w2: opts.strict_w2,
            artifacts: std::mem::take(&mut self.written),
        };
        let mut text = serde_json::to_string_pretty(&m)?;
        text.push('\n');
        std::fs::write(self.path("manifest.json"), text)?;
        Ok(())
    }
}

/// Runs `command` on a validated scenario. `scenario_bytes` is the file the
/// scenario was read from and is hashed into the manifest.
pub fn run(p: &Prepared, scenario_bytes: &[u8], command: Command, opts: &RunOptions) -> Result<()> {
    let mut art = Artifacts::new(&opts.out)?;
    let outcome = match command {
        Command::Solve => solve(p, opts, &mut art),
        Command::Mkv => mkv(p, opts, &mut art),
        Command::Simulate => simulate(p, &mut art),
        Command::Verify => verify_cmd(p, opts, &mut art),
        Command::Report => report(p, opts, &mut art),
    };
    art.manifest(p, scenario_bytes, command, opts)?;
    outcome
}

fn solve_between(p: &Prepared, a: &Density, b: &Density, time_grid: TimeGrid) -> Result<BridgeSolution> {
    Ok(solve_mfsb(&p.potential, a, b, time_grid, &p.scenario.solver)?)
}

fn not_converged(sol: &BridgeSolution, what: &str) -> CliError {
    CliError::NoConvergence(format!(
        "{what}: gradient norm {:.3e} after {} iterations",
        sol.diagnostics.gradient_norm, sol.diagnostics.iterations
    ))
}

fn flow_name(stem: &str, format: FlowFormat) -> String {
    format!("{stem}.{}", format.extension())
}

fn solve(p: &Prepared, opts: &RunOptions, art: &mut Artifacts) -> Result<()> {
    let sol = solve_between(p, &p.mu_in, &p.mu_fin, p.time_grid)?;
    write_solution(p, &sol, opts, art)?;
    if !sol.diagnostics.converged {
        return Err(not_converged(&sol, "bridge"));
    }
    Ok(())
}

fn write_solution(p: &Prepared, sol: &BridgeSolution, opts: &RunOptions, art: &mut Artifacts) -> Result<()> {
    let name = flow_name("flow", opts.format);
    save_flow(&sol.flow, &art.path(&name), opts.format)?;
    art.record(&name)?;
    let summary = SolveSummary {
        scenario: &p.scenario.name,
        cost: sol.cost,
        residual: optimality_residual(sol, &p.potential),
        diagnostics: &sol.diagnostics,
    };
    art.json("summary.json", &summary)
}

fn mkv(p: &Prepared, opts: &RunOptions, art: &mut Artifacts) -> Result<()> {
    let flow = mkv_flow_with(&p.potential, &p.mu_in, p.time_grid, &p.scenario.solver.fokker_planck)?;
    let name = flow_name("mkv_flow", opts.format);
    save_flow(&flow, &art.path(&name), opts.format)?;
    art.record(&name)?;
    let t: Vec<f64> = (0..=p.time_grid.n_steps).map(|k| p.time_grid.t(k)).collect();
    let series = [
        Series::new("mean", flow.densities.iter().map(Density::mean).collect()),
        Series::new("variance", flow.densities.iter().map(Density::variance).collect()),
        Series::new("free_energy", flow.densities.iter().map(|d| mfsb::functionals::free_energy(&p.potential, d)).collect()),
    ];
    art.write("mkv_moments.csv", csv_table("t", &t, &series))
}

fn simulate(p: &Prepared, art: &mut Artifacts) -> Result<()> {
    let spec = p.scenario.particles;
    let ens = simulate_particles(&p.potential, &p.mu_in, p.time_grid, spec.n, p.scenario.seed, spec.init)?;
    let t: Vec<f64> = (0..=p.time_grid.n_steps).map(|k| p.time_grid.t(k)).collect();
    let series: Vec<Series> =
        ens.positions.iter().enumerate().map(|(i, path)| Series::new(&format!("x{i}"), path.clone())).collect();
    art.write("particles.csv", csv_table("t", &t, &series))?;
    let theta = verify::check_theta(&p.potential, &p.mu_in, p.time_grid, spec.n, p.scenario.seed)?;
    let mut checks = BTreeMap::new();
    checks.insert("theta", &theta);
    art.json("theta.json", &checks)?;
    if !theta.pass {
        return Err(CliError::ChecksFailed(vec!["theta".into()]));
    }
    Ok(())
}

/// μ_fin for another horizon: only the MKV endpoint depends on T.
fn endpoint_for(p: &Prepared, time_grid: TimeGrid) -> Result<Density> {
    match p.scenario.mu_fin {
        EndpointSpec::Special { kind: SpecialEndpoint::MkvEndpoint } => {
            Ok(mkv_flow_with(&p.potential, &p.mu_in, time_grid, &p.scenario.solver.fokker_planck)?.last().clone())
        }
        _ => Ok(p.mu_fin.clone()),
    }
}

fn apply_overrides(entries: &mut BTreeMap<String, CheckEntry>, overrides: &BTreeMap<String, f64>) {
    for (name, e) in entries.iter_mut() {
        // longest matching prefix wins
        if let Some((_, tol)) = overrides.iter().filter(|(k, _)| name.starts_with(k.as_str())).max_by_key(|(k, _)| k.len()) {
            *e = CheckEntry::le(e.lhs, e.rhs, *tol, e.detail.clone());
        }
    }
}

/// Solves what the selected checks need and runs them.
pub fn build_report(p: &Prepared, strict_w2: bool) -> Result<(VerificationReport, Vec<BridgeSolution>)> {
    let w = &p.potential;
    let wants = |c: CheckKind| p.checks.contains(&c);
    let sol = solve_between(p, &p.mu_in, &p.mu_fin, p.time_grid)?;
    let reversed = if wants(CheckKind::TimeReversal) || wants(CheckKind::ConservedBound) {
        Some(solve_between(p, &p.mu_fin, &p.mu_in, p.time_grid)?)
    } else {
        None
    };
    let a = BridgeAnalysis::new(w, &sol)?;
    let env = verify::environment(&sol, w, vec![p.scenario.seed], Some(optimality_residual(&sol, w)));
    let mut report = VerificationReport::new(&p.scenario.name, env);

    for &c in &p.checks {
        match c {
            CheckKind::Conserved => report.insert("conserved", verify::check_conserved(&a)),
            CheckKind::ConservedBound => {
                let c_rev = reversed.as_ref().map_or_else(|| verify::reversed_cost_from_identity(&a), |r| r.cost);
                report.insert("conserved_bound", verify::check_conserved_bound(&a, c_rev)?);
            }
            CheckKind::EntropyBound => report.extend(verify::check_entropy_bound(&a)?),
            CheckKind::Turnpike => report.extend(verify::check_turnpike(&a)?),
            CheckKind::TurnpikeRate => {}
            CheckKind::Talagrand => report.extend(verify::check_talagrand(&a)?),
            CheckKind::Hwi => {
                if a.fin_is_equilibrium() {
                    report.extend(verify::check_hwi(&a)?);
                }
            }
            CheckKind::MkvDistance => report.extend(verify::check_mkv_distance(&a, strict_w2)?),
            CheckKind::CorrectorBounds => report.extend(verify::check_corrector_bounds(&a)?),
            CheckKind::TimeReversal => {
                if let Some(r) = &reversed {
                    report.insert("time_reversal", verify::check_time_reversal(&a, r));
                }
            }
            CheckKind::Theta => {
                let n = p.scenario.particles.n;
                report.insert("theta", verify::check_theta(w, &p.mu_in, p.time_grid, n, p.scenario.seed)?);
            }
            CheckKind::MeanLinearity => report.insert("mean_linearity", verify::check_mean_linearity(&sol.flow)),
        }
    }
    let mut solutions = vec![];
    if wants(CheckKind::TurnpikeRate) {
        let t2 = p.scenario.rate_horizon.unwrap_or(2.0 * p.time_grid.horizon);
        let tg2 = TimeGrid::new(t2, p.time_grid.n_steps)?;
        let long = solve_between(p, &p.mu_in, &endpoint_for(p, tg2)?, tg2)?;
        let b = BridgeAnalysis::new(w, &long)?;
        for theta in [0.25, 0.5, 0.75] {
            report.insert(format!("turnpike_rate/theta={theta:.2}"), verify::check_turnpike_rate(&a, &b, theta)?);
        }
        solutions.push(long);
    }
    apply_overrides(&mut report.checks, &p.scenario.tolerances);
    solutions.insert(0, sol);
    if let Some(r) = reversed {
        solutions.insert(1, r);
    }
    Ok((report, solutions))
}

fn verify_cmd(p: &Prepared, opts: &RunOptions, art: &mut Artifacts) -> Result<()> {
    let (report, sols) = build_report(p, opts.strict_w2)?;
    art.json("report.json", &report)?;
    if let Some(s) = sols.iter().find(|s| !s.diagnostics.converged) {
        return Err(not_converged(s, "bridge used by the checks"));
    }
    let failed = report.failures();
    if !failed.is_empty() {
        return Err(CliError::ChecksFailed(failed.into_iter().map(String::from).collect()));
    }
    Ok(())
}

/// Plot data for a solved bridge, reusing `flow.*` in the output directory
/// when a previous `solve` left one there.
fn report(p: &Prepared, opts: &RunOptions, art: &mut Artifacts) -> Result<()> {
    let existing = [FlowFormat::Bin, FlowFormat::Csv].into_iter().map(|f| art.path(&flow_name("flow", f))).find(|f| f.exists());
    let sol = match existing {
        Some(path) => {
            let flow = load_flow(&path)?;
            if flow.time_grid != p.time_grid || flow.grid() != p.grid {
                return Err(CliError::Parse(format!("{} does not match the scenario grids", path.display())));
            }
            let diagnostics = SolverDiagnostics {
                method: "loaded".into(),
                converged: true,
                notes: vec![format!("flow read from {}", path.display())],
                ..Default::default()
            };
            BridgeSolution::from_flow(flow, &p.potential, diagnostics)?
        }
        None => {
            let sol = solve_between(p, &p.mu_in, &p.mu_fin, p.time_grid)?;
            write_solution(p, &sol, opts, art)?;
            sol
        }
    };
    let a = BridgeAnalysis::new(&p.potential, &sol)?;
    let tg = p.time_grid;
    let n = tg.n_steps;
    let t: Vec<f64> = (0..=n).map(|k| tg.t(k)).collect();
    let dt = tg.dt();
    let mut cumulative = vec![0.0; n + 1];
    for k in 1..=n {
        cumulative[k] = cumulative[k - 1] + 0.25 * dt * (a.energy[k - 1] + a.energy[k]);
    }
    let by_node = |entries: Vec<(String, CheckEntry)>| {
        let mut v = vec![f64::NAN; n + 1];
        for (k, (_, e)) in (1..n).zip(entries) {
            v[k] = e.rhs;
        }
        v
    };
    let (f_name, f_values) = match &a.relative {
        Some(f) => ("F", f.clone()),
        None => ("F_tilde", a.free.clone()),
    };
    let mut free = vec![Series::new(f_name, f_values)];
    if let Ok(e) = verify::check_entropy_bound(&a) {
        free.push(Series::new("entropy_bound", by_node(e)));
    }
    if let Ok(e) = verify::check_turnpike(&a) {
        free.push(Series::new("turnpike_envelope", by_node(e)));
    }
    let mut conserved = vec![f64::NAN; n + 1];
    for (k, v) in a.conserved.nodes.iter().zip(&a.conserved.values) {
        conserved[*k] = *v;
    }
    let mut columns = vec![Series::new("energy", a.energy.clone()), Series::new("cumulative_cost", cumulative.clone())];
    columns.extend(free.iter().cloned());
    columns.push(Series::new("conserved", conserved.clone()));
    art.write("profile.csv", csv_table("t", &t, &columns))?;
    let title = &p.scenario.name;
    art.write("cost.svg", svg_chart(&format!("{title}: cumulative cost"), "t", &t, &[Series::new("cost", cumulative)]))?;
    art.write("free_energy.svg", svg_chart(&format!("{title}: free energy and bounds"), "t", &t, &free))?;
    art.write("conserved.svg", svg_chart(&format!("{title}: E(t)"), "t", &t, &[Series::new("E", conserved)]))?;
    Ok(())
}

