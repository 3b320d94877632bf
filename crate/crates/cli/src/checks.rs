//! Checks recomputed from the files of a run directory.
//!
//! `run` calls [`evaluate`] on the files it has just written, and `verify`
//! calls it again later, so both report exactly the same checks.

use std::fs;
use std::path::Path as FsPath;

use anyhow::{anyhow, bail, Context, Result};
use mfsc_core::adjoint::{coefficient_reduction, deterministic_adjoint, harvesting_adjoint};
use mfsc_core::meanfield::{empirical_meanfield, Estimate};
use mfsc_core::nash::{check_pair, nash_construct, nash_deviations, StrategyPair};
use mfsc_core::optimality::{check_variational, jump_floor, perturbation_test};
use mfsc_core::reflected::{
    harvest_barrier, merge_worst, picard_diagnostics, power_barriers, quadratic_barriers, BarrierRule,
};
use mfsc_core::uncertainty::{certify_saddle, solve_foc};
use mfsc_core::{Check, CheckReport, MonotonePath, Path, TimeGrid};
use rayon::prelude::*;

use crate::output::Columns;
use crate::scenario::{deviation_family, push_family, Scenario, Spec};

pub const X_PATHS: &str = "x_paths.csv";
pub const XI_PATHS: &str = "xi_paths.csv";
pub const XI1_PATHS: &str = "xi1_paths.csv";
pub const XI2_PATHS: &str = "xi2_paths.csv";
pub const Y: &str = "y.csv";
pub const P: &str = "p.csv";
pub const BARRIER: &str = "barrier.csv";
pub const TRACE: &str = "trace.csv";
pub const J_MATRIX: &str = "j_matrix.csv";
pub const DENSITY: &str = "density_terminal.csv";
pub const FOC: &str = "foc.csv";

/// Adjoint `p` of the kinds that have a closed form.
pub fn adjoint(sc: &Scenario) -> Result<Option<Path>> {
    let grid = sc.grid;
    Ok(match &sc.spec {
        Spec::Harvesting { harvest, .. } | Spec::Uncertainty { harvest, .. } => Some(
            harvesting_adjoint(&harvest.b.to_path(grid)?, &harvest.sigma.to_path(grid)?, harvest.k, grid)?.p,
        ),
        Spec::QuadraticCost { .. } | Spec::PowerCost { .. } => {
            let problem = sc.control_problem().expect("reflected kind");
            let coeffs = coefficient_reduction(&problem.model, &problem.functional, grid)?;
            Some(deterministic_adjoint(&coeffs, grid)?.p)
        }
        _ => None,
    })
}

/// Barrier rule of the reflected kinds, given the adjoint.
pub fn barrier_rule(sc: &Scenario, p: Option<&Path>) -> Result<BarrierRule> {
    let grid = sc.grid;
    let need_p = || p.ok_or_else(|| anyhow!("adjoint required"));
    Ok(match &sc.spec {
        Spec::Harvesting { harvest, .. } => {
            harvest_barrier(need_p()?, &harvest.lambda0.to_path(grid)?, &harvest.h0.to_path(grid)?)?
        }
        Spec::QuadraticCost { h0, h1, .. } => {
            quadratic_barriers(need_p()?, &h0.to_path(grid)?, &h1.to_path(grid)?)?
        }
        Spec::PowerCost { h0, kappa, .. } => power_barriers(need_p()?, &h0.to_path(grid)?, *kappa)?,
        Spec::CustomReflected { barrier, .. } => barrier.rule(grid)?,
        Spec::Game { .. } | Spec::Uncertainty { .. } => bail!("kind {} has no single barrier", sc.kind),
    })
}

fn read_paths(dir: &FsPath, name: &str, sc: &Scenario) -> Result<Vec<Path>> {
    let paths = Columns::read(dir, name)?.into_paths(sc.grid, name)?;
    if paths.len() != sc.particles {
        bail!("{name}: {} paths for {} particles", paths.len(), sc.particles);
    }
    Ok(paths)
}

fn read_series(dir: &FsPath, name: &str, column: &str, grid: TimeGrid) -> Result<Path> {
    let cols = Columns::read(dir, name)?;
    cols.expect_grid(grid, name)?;
    Path::with_sentinels(grid, cols.column(column).with_context(|| name.to_string())?.to_vec())
        .with_context(|| format!("{name}: invalid values"))
}

/// Worst positive value and where it happened.
#[derive(Default)]
struct Worst {
    value: f64,
    at: Option<String>,
}

impl Worst {
    fn observe(&mut self, v: f64, at: impl FnOnce() -> String) {
        let v = if v.is_nan() { f64::INFINITY } else { v };
        if v > self.value || (self.at.is_none() && v > 0.0) {
            self.value = v;
            self.at = Some(at());
        }
    }

    fn merge(mut self, other: Worst) -> Worst {
        if other.value > self.value {
            self = other;
        }
        self
    }

    fn check(self, name: &str, tol: f64) -> Check {
        Check::against(name, self.value, tol, self.at)
    }
}

fn monotone_check(name: &str, paths: &[Path]) -> Check {
    let worst = paths
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let mut w = Worst::default();
            let mut prev = 0.0;
            for (k, &v) in p.values().iter().enumerate() {
                w.observe(prev - v, || format!("particle {i}, node {k}"));
                prev = v;
            }
            w
        })
        .reduce(Worst::default, Worst::merge);
    worst.check(name, 0.0)
}

fn meanfield_check(states: &[Path], y: &Path) -> Result<Check> {
    let expect = empirical_meanfield(states, &|x| x)?;
    let mut w = Worst::default();
    for k in 0..y.values().len() {
        w.observe((expect.get(k) - y.get(k)).abs(), || format!("node {k}"));
    }
    Ok(w.check("meanfield", 0.0))
}

/// `l − tol ≤ X ≤ r + tol`, and every control increment sits on the
/// barrier its direction belongs to.
fn barrier_checks(
    states: &[Path],
    controls: &[Path],
    lower: &[f64],
    upper: &[f64],
    lambda: &Path,
    tol: f64,
) -> Vec<Check> {
    let (constraint, compl) = states
        .par_iter()
        .zip(controls)
        .enumerate()
        .map(|(i, (x, xi))| {
            let mut c = Worst::default();
            let mut s = Worst::default();
            let floor = jump_floor(xi);
            let mut prev = 0.0;
            for k in 0..x.values().len() {
                let xk = x.get(k);
                c.observe((lower[k] - xk).max(xk - upper[k]), || format!("particle {i}, node {k}"));
                let d = xi.get(k) - prev;
                prev = xi.get(k);
                if d.abs() > floor {
                    let d_eta = -lambda.get(k.saturating_sub(1)) * d;
                    let barrier = if d_eta > 0.0 { upper[k] } else { lower[k] };
                    s.observe((xk - barrier).abs(), || format!("particle {i}, node {k}"));
                }
            }
            (c, s)
        })
        .reduce(
            || (Worst::default(), Worst::default()),
            |a, b| (a.0.merge(b.0), a.1.merge(b.1)),
        );
    vec![constraint.check("constraint", tol), compl.check("complementarity", tol)]
}

fn picard_checks(sc: &Scenario, trace: &[f64], kappa: f64) -> Vec<Check> {
    let tol = sc.settings.tol;
    let last = trace.last().copied().unwrap_or(f64::INFINITY);
    let converged = Check::against(
        "picard.converged",
        last,
        tol,
        Some(format!("{} iterations", trace.len())),
    );
    let contracting = match picard_diagnostics(trace, kappa) {
        Ok(d) => Check::flag(
            "picard.contracting",
            d.contracting,
            Some(format!("fitted ratio {:.4}", d.ratio)),
        ),
        Err(_) => Check::flag(
            "picard.contracting",
            last <= tol,
            Some(format!("ratio not fitted after {} iterations", trace.len())),
        ),
    };
    vec![converged, contracting]
}

fn bitwise_check(name: &str, expect: &[f64], got: &[f64]) -> Check {
    let mismatch = expect
        .iter()
        .zip(got)
        .position(|(a, b)| a.to_bits() != b.to_bits())
        .or((expect.len() != got.len()).then_some(expect.len().min(got.len())));
    Check::flag(name, mismatch.is_none(), mismatch.map(|k| format!("node {k}")))
}

fn reflected(sc: &Scenario, dir: &FsPath) -> Result<CheckReport> {
    let grid = sc.grid;
    let tol = 10.0 * sc.settings.tol;
    let states = read_paths(dir, X_PATHS, sc)?;
    let controls = read_paths(dir, XI_PATHS, sc)?;
    let y = read_series(dir, Y, "Y", grid)?;
    let barrier = Columns::read(dir, BARRIER)?;
    barrier.expect_grid(grid, BARRIER)?;
    let (lower, upper) = (barrier.column("l")?, barrier.column("r")?);
    let trace = Columns::read_indexed(dir, TRACE)?;
    let lambda = sc.lambda_path()?.expect("reflected kind");

    let mut report = CheckReport::new();
    if sc.monotone_controls() {
        report.push(monotone_check("xi_monotone", &controls));
    }
    for c in barrier_checks(&states, &controls, lower, upper, &lambda, tol) {
        report.push(c);
    }
    report.push(meanfield_check(&states, &y)?);

    let p = adjoint(sc)?;
    if let Some(p) = &p {
        let stored = read_series(dir, P, "p", grid)?;
        report.push(bitwise_check("adjoint_reproduced", p.values(), stored.values()));
    }
    let rule = barrier_rule(sc, p.as_ref())?;
    match rule.fixed_barriers() {
        Some(b) => {
            report.push(bitwise_check("barrier_reproduced.l", b.lower().values(), lower));
            report.push(bitwise_check("barrier_reproduced.r", b.upper().values(), upper));
        }
        None => {
            let BarrierRule::Custom { rule: f, .. } = &rule else { unreachable!() };
            let mut w = Worst::default();
            let (x0, xi0) = (states[0].values(), controls[0].values());
            for k in 0..grid.len() {
                let (l, r) = f(k, &x0[..=k], &y.values()[..=k], &xi0[..=k]);
                for (a, b) in [(l, lower[k]), (r, upper[k])] {
                    let gap = if a == b { 0.0 } else { (a - b).abs() };
                    w.observe(gap, || format!("node {k}"));
                }
            }
            report.push(w.check("barrier_consistent", tol));
        }
    }
    for c in picard_checks(sc, &trace, rule.kappa()) {
        report.push(c);
    }

    if let Spec::Harvesting { harvest, pushes, amplitude, check_tol } = &sc.spec {
        let p = p.as_ref().expect("harvesting adjoint");
        let lam = harvest.lambda0.to_path(grid)?.map(|v| -v);
        let h0 = harvest.h0.to_path(grid)?;
        let zero = Path::zeros(grid);
        let per: Vec<CheckReport> = states
            .par_iter()
            .zip(&controls)
            .map(|(x, xi)| {
                let h = h0.zip_with(x, |a, b| a * b)?;
                check_variational(x, xi, p, &lam, &h, &zero, *check_tol)
            })
            .collect::<mfsc_core::Result<_>>()?;
        report.extend(merge_worst(per).scoped("variational"));
        if report.get("xi_monotone").is_some_and(|c| c.passed) {
            let problem = sc.control_problem().expect("reflected kind");
            let family = push_family(grid, *pushes, *amplitude)?;
            let out = perturbation_test(&problem, &controls, &family, sc.seed)?;
            report.extend(out.report);
        } else {
            report.push(Check::flag("perturbation", false, Some("skipped: controls are not monotone".into())));
        }
    }
    Ok(report)
}

fn game(sc: &Scenario, dir: &FsPath) -> Result<CheckReport> {
    let Spec::Game { split, pushes, amplitude, .. } = &sc.spec else { unreachable!() };
    let scenario = sc.game()?.expect("game kind");
    let partition = scenario.partition()?;
    let states = read_paths(dir, X_PATHS, sc)?;
    let xi1 = read_paths(dir, XI1_PATHS, sc)?;
    let xi2 = read_paths(dir, XI2_PATHS, sc)?;
    let y = read_series(dir, Y, "Y", sc.grid)?;

    let mut report = CheckReport::new();
    let mono = [monotone_check("xi_monotone.player1", &xi1), monotone_check("xi_monotone.player2", &xi2)];
    let monotone = mono.iter().all(|c| c.passed);
    for c in mono {
        report.push(c);
    }
    report.push(meanfield_check(&states, &y)?);

    let rebuilt: Vec<StrategyPair> = states
        .par_iter()
        .map(|x| nash_construct(x, &partition, *split))
        .collect::<mfsc_core::Result<_>>()?;
    let mut mismatch = None;
    for (i, pair) in rebuilt.iter().enumerate() {
        let same = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(u, v)| u.to_bits() == v.to_bits());
        if !same(pair.xi1.values(), xi1[i].values()) || !same(pair.xi2.values(), xi2[i].values()) {
            mismatch = Some(format!("particle {i}"));
            break;
        }
    }
    report.push(Check::flag("strategy_reproduced", mismatch.is_none(), mismatch));

    if !monotone {
        report.push(Check::flag("construction", false, Some("skipped: strategies are not monotone".into())));
        report.push(Check::flag("deviation", false, Some("skipped: strategies are not monotone".into())));
        return Ok(report);
    }
    let structural: Vec<CheckReport> = states
        .par_iter()
        .zip(rebuilt)
        .enumerate()
        .map(|(i, (x, mut pair))| {
            pair.xi1 = MonotonePath::new(xi1[i].clone())?;
            pair.xi2 = MonotonePath::new(xi2[i].clone())?;
            Ok(check_pair(x, &partition, &pair, 1e-9))
        })
        .collect::<mfsc_core::Result<_>>()?;
    report.extend(merge_worst(structural).scoped("construction"));
    let family = deviation_family(sc.grid, *pushes, *amplitude)?;
    let dev = nash_deviations(&scenario, &states, [&xi1, &xi2], [&family, &family])?;
    report.extend(dev.report);
    Ok(report)
}

/// Parse `mean±se`.
pub fn parse_estimate(s: &str) -> Result<Estimate> {
    let (m, e) = s.split_once('±').ok_or_else(|| anyhow!("`{s}` is not of the form mean±se"))?;
    let parse = |v: &str| v.trim().parse::<f64>().map_err(|_| anyhow!("`{v}` is not a number"));
    Ok(Estimate { mean: parse(m)?, se: parse(e)? })
}

pub fn read_matrix(dir: &FsPath) -> Result<Vec<Vec<Estimate>>> {
    let text = fs::read_to_string(dir.join(J_MATRIX)).with_context(|| format!("missing or unreadable {J_MATRIX}"))?;
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.with_context(|| format!("{J_MATRIX}:{}: malformed row", i + 2))?;
        let row = rec
            .iter()
            .skip(1)
            .map(parse_estimate)
            .collect::<Result<Vec<_>>>()
            .with_context(|| format!("{J_MATRIX}:{}", i + 2))?;
        rows.push(row);
    }
    Ok(rows)
}

fn uncertainty(sc: &Scenario, dir: &FsPath) -> Result<CheckReport> {
    let Spec::Uncertainty { theta, theta_max, q2, .. } = &sc.spec else { unreachable!() };
    let mut report = CheckReport::new();
    let text = fs::read_to_string(dir.join(DENSITY)).with_context(|| format!("missing or unreadable {DENSITY}"))?;
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let mut cols = vec![Vec::with_capacity(sc.particles); theta.len()];
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.with_context(|| format!("{DENSITY}:{}: malformed row", i + 2))?;
        for (j, col) in cols.iter_mut().enumerate() {
            let s = rec.get(j + 1).ok_or_else(|| anyhow!("{DENSITY}:{}: missing column", i + 2))?;
            col.push(s.parse::<f64>().map_err(|_| anyhow!("{DENSITY}:{}: `{s}` is not a number", i + 2))?);
        }
    }
    for (j, col) in cols.iter().enumerate() {
        if col.len() != sc.particles {
            bail!("{DENSITY}: {} rows for {} particles", col.len(), sc.particles);
        }
        let est = Estimate::from_samples(col)?;
        report.push(Check::against(
            format!("martingale.theta{j}"),
            (est.mean - 1.0).abs(),
            3.0 * est.se,
            Some(format!("E[G(T)] = {est}")),
        ));
    }

    let matrix = read_matrix(dir)?;
    match certify_saddle(&matrix) {
        Ok(cert) => {
            report.push(Check::flag(
                "saddle.found",
                true,
                Some(format!("cell ({}, {})", cert.cell.0, cert.cell.1)),
            ));
            report.extend(cert.report);
        }
        Err(e) => report.push(Check::flag("saddle.found", false, Some(e.to_string()))),
    }

    if let Some(q2) = q2 {
        let q2 = q2.to_path(sc.grid)?;
        let sol = solve_foc(&sc.penalty().expect("uncertainty kind"), &q2, *theta_max)?;
        let stored = read_series(dir, FOC, "theta", sc.grid)?;
        report.push(bitwise_check("foc_reproduced", sol.theta.theta().values(), stored.values()));
        let drho = &sc.penalty().expect("uncertainty kind").drho;
        let mut w = Worst::default();
        for k in 0..sc.grid.len() {
            if !sol.clamped.contains(&k) {
                w.observe((drho(stored.get(k)) + q2.get(k)).abs(), || format!("node {k}"));
            }
        }
        report.push(w.check("foc.residual", 1e-10));
    }
    Ok(report)
}

/// All checks of a run, recomputed from its files.
pub fn evaluate(sc: &Scenario, dir: &FsPath) -> Result<CheckReport> {
    match &sc.spec {
        Spec::Game { .. } => game(sc, dir),
        Spec::Uncertainty { .. } => uncertainty(sc, dir),
        _ => reflected(sc, dir),
    }
}
