//! Numerical checks of maximum-principle conditions.
//!
//! A passing report means the candidate was not rejected at the stated
//! tolerance; Monte Carlo checks can never prove optimality.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::meanfield::{
    particle_payoffs, simulate_ensemble, ControlPolicy, Estimate, FunctionalSpec, ModelSpec,
};
use crate::paths::{ensure_same_grid, Path, TimeGrid};
use crate::report::{Check, CheckReport};
use crate::skorohod::Worst;

/// `Δξ_k` counts as active control above `1e-12 · (1 + ξ(T))`.
pub fn jump_floor(xi: &Path) -> f64 {
    1e-12 * (1.0 + xi.last().abs())
}

/// Variational inequality `f_ξ + λp + h ≤ 0` and complementary slackness
/// `(f_ξ + λp + h) dξ = 0`, node by node.
///
/// `h` is the singular cost already evaluated along the state path `x`.
pub fn check_variational(
    x: &Path,
    xi: &Path,
    p: &Path,
    lambda: &Path,
    h: &Path,
    f_xi: &Path,
    tol: f64,
) -> Result<CheckReport> {
    for other in [xi, p, lambda, h, f_xi] {
        ensure_same_grid(x, other)?;
    }
    let floor = jump_floor(xi);
    let mut inequality = Worst::default();
    let mut slackness = Worst::default();
    let mut prev = 0.0;
    for k in 0..x.values().len() {
        let expr = f_xi.get(k) + lambda.get(k) * p.get(k) + h.get(k);
        inequality.observe(k, expr.max(0.0));
        let d = xi.get(k) - prev;
        prev = xi.get(k);
        if d > floor {
            slackness.observe(k, expr.abs());
        }
    }
    let mut report = CheckReport::new();
    report.push(inequality.into_check("inequality", tol));
    report.push(slackness.into_check("complementary_slackness", tol));
    Ok(report)
}

/// Model, payoff and grid of a singular control problem.
#[derive(Debug, Clone)]
pub struct ControlProblem {
    pub model: ModelSpec,
    pub functional: FunctionalSpec,
    pub grid: TimeGrid,
}

#[derive(Debug, Clone)]
pub enum Direction {
    /// `η` added to every particle's control.
    Common(Path),
    /// `η = c · ξ̂_i`, particle by particle.
    ScaledBase(f64),
    /// `η = ξ̂_i(t ∧ t_k) − ξ̂_i(t)`: withhold the increments after node `k`.
    FreezeAfter(usize),
}

#[derive(Debug, Clone)]
pub struct PerturbationFamily {
    pub directions: Vec<(String, Direction)>,
    pub amplitudes: Vec<f64>,
}

impl PerturbationFamily {
    pub fn new(directions: Vec<(String, Direction)>, amplitudes: Vec<f64>) -> Result<Self> {
        if let Some(a) = amplitudes.iter().find(|a| !(**a > 0.0 && a.is_finite())) {
            return Err(Error::invalid(format!("amplitude {a} is not in (0, ∞)")));
        }
        if directions.is_empty() || amplitudes.is_empty() {
            return Err(Error::invalid("empty perturbation family"));
        }
        Ok(Self { directions, amplitudes })
    }

    fn max_amplitude(&self) -> f64 {
        self.amplitudes.iter().copied().fold(0.0, f64::max)
    }
}

/// `ξ̂ + aη` for one particle.
pub(crate) fn perturbed(base: &Path, dir: &Direction, a: f64) -> Result<Path> {
    match dir {
        Direction::Common(eta) => base.zip_with(eta, |b, e| b + a * e),
        Direction::ScaledBase(c) => Ok(base.map(|b| b + a * c * b)),
        Direction::FreezeAfter(node) => {
            let v = base.values();
            let stop = v[(*node).min(v.len() - 1)];
            let out = v
                .iter()
                .enumerate()
                .map(|(k, &b)| if k <= *node { b } else { b + a * (stop - b) })
                .collect();
            Path::new(base.grid(), out)
        }
    }
}

fn admissible(path: &Path) -> bool {
    path.get(0) >= 0.0 && path.is_nondecreasing()
}

/// Check that `ξ̂_i + aη` is nondecreasing with `ξ(0) ≥ 0` for `a ∈ [0, δ]`.
///
/// The perturbed path is affine in `a`, so the endpoints suffice.
pub fn check_admissible(base: &[Path], family: &PerturbationFamily) -> Result<()> {
    let delta = family.max_amplitude();
    for (i, b) in base.iter().enumerate() {
        if !admissible(b) {
            return Err(Error::invalid(format!("base control of particle {i} is not nondecreasing")));
        }
        for (name, dir) in &family.directions {
            if !admissible(&perturbed(b, dir, delta)?) {
                return Err(Error::invalid(format!(
                    "direction {name} is not admissible for particle {i} at amplitude {delta}"
                )));
            }
        }
    }
    Ok(())
}

/// `ΔJ` estimates for every `(direction, amplitude)` pair.
#[derive(Debug, Clone)]
pub struct PerturbationOutcome {
    pub base: Estimate,
    /// `delta[d][a]`, estimated with common random numbers.
    pub delta: Vec<Vec<Estimate>>,
    pub report: CheckReport,
}

/// Estimate `ΔJ = J(ξ̂ + aη) − J(ξ̂)` with common random numbers and check
/// `ΔJ ≤ 2·SE(ΔJ)`.
pub fn perturbation_test(
    problem: &ControlProblem,
    xi_hat: &[Path],
    family: &PerturbationFamily,
    seed: u64,
) -> Result<PerturbationOutcome> {
    check_admissible(xi_hat, family)?;
    let particles = xi_hat.len();
    let run = |controls: Vec<Path>| -> Result<Vec<f64>> {
        let ens = simulate_ensemble(
            &problem.model,
            &ControlPolicy::PerParticle(controls),
            problem.grid,
            particles,
            seed,
        )?;
        Ok(particle_payoffs(&ens, &problem.functional))
    };
    let base = run(xi_hat.to_vec())?;
    let base_est = Estimate::from_samples(&base)?;

    let cells: Vec<(usize, usize)> = (0..family.directions.len())
        .flat_map(|d| (0..family.amplitudes.len()).map(move |a| (d, a)))
        .collect();
    let estimates: Vec<Estimate> = cells
        .par_iter()
        .map(|&(d, a)| {
            let (_, dir) = &family.directions[d];
            let amp = family.amplitudes[a];
            let controls = xi_hat
                .iter()
                .map(|b| perturbed(b, dir, amp))
                .collect::<Result<Vec<_>>>()?;
            let payoffs = run(controls)?;
            let diffs: Vec<f64> = payoffs.iter().zip(&base).map(|(p, b)| p - b).collect();
            Estimate::from_samples(&diffs)
        })
        .collect::<Result<_>>()?;

    let mut report = CheckReport::new();
    let mut delta = vec![Vec::with_capacity(family.amplitudes.len()); family.directions.len()];
    for (&(d, a), est) in cells.iter().zip(estimates) {
        let name = &family.directions[d].0;
        report.push(Check::against(
            format!("perturbation.{name}.a={}", family.amplitudes[a]),
            est.mean,
            2.0 * est.se,
            Some(format!("ΔJ = {est}")),
        ));
        delta[d].push(est);
    }
    Ok(PerturbationOutcome { base: base_est, delta, report })
}

/// Saddle check with no slack.
pub fn saddle_check(j: &[Vec<f64>], cell: (usize, usize)) -> CheckReport {
    saddle_check_within(j, cell, 0.0)
}

/// `J(i, ĵ) ≤ J(î, ĵ) ≤ J(î, j)` for all `i, j` and maximin = minimax = `J(î, ĵ)`,
/// each up to `tol`. Rows belong to the maximizing player.
pub fn saddle_check_within(j: &[Vec<f64>], cell: (usize, usize), tol: f64) -> CheckReport {
    let mut report = CheckReport::new();
    let cols = j.first().map_or(0, Vec::len);
    let well_formed = cols > 0
        && j.iter().all(|r| r.len() == cols && r.iter().all(|v| v.is_finite()))
        && cell.0 < j.len()
        && cell.1 < cols;
    if !well_formed {
        report.push(Check::flag(
            "matrix",
            false,
            Some("matrix must be rectangular, finite and contain the cell".into()),
        ));
        return report;
    }
    let (ri, cj) = cell;
    let value = j[ri][cj];

    let mut row = Worst::default();
    for (i, r) in j.iter().enumerate() {
        row.observe(i, (r[cj] - value).max(0.0));
    }
    let mut col = Worst::default();
    for (c, &v) in j[ri].iter().enumerate() {
        col.observe(c, (value - v).max(0.0));
    }
    let maximin = j
        .iter()
        .map(|r| r.iter().copied().fold(f64::INFINITY, f64::min))
        .fold(f64::NEG_INFINITY, f64::max);
    let minimax = (0..cols)
        .map(|c| j.iter().map(|r| r[c]).fold(f64::NEG_INFINITY, f64::max))
        .fold(f64::INFINITY, f64::min);

    let mut row_check = row.into_check("row_player_deviation", tol);
    row_check.location = row_check.location.map(|l| l.replace("node", "row"));
    let mut col_check = col.into_check("column_player_deviation", tol);
    col_check.location = col_check.location.map(|l| l.replace("node", "column"));
    report.push(row_check);
    report.push(col_check);
    report.push(Check::against(
        "minimax_equality",
        (maximin - value).abs().max((minimax - value).abs()),
        tol,
        Some(format!("maximin = {maximin}, minimax = {minimax}, value = {value}")),
    ));
    report
}
