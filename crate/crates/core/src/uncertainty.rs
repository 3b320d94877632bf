//! Worst-case singular control under Girsanov scenario measures.
//!
//! A scenario control `θ` defines the density
//! `G(t) = exp(∫ θ dB − ½ ∫ θ² dt)` and the penalized objective
//!
//! ```text
//! J(ξ, θ) = E[∫ G (f + ρ(θ)) dt + G(T) g(X(T), Y(T)) + ∫ G h dξ].
//! ```
//!
//! The controller maximizes over `ξ`, the adversary minimizes over `θ`.

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::meanfield::{weighted_payoff, Ensemble, Estimate};
use crate::optimality::{saddle_check_within, ControlProblem};
use crate::paths::{ensure_same_grid, Path, RngStream, TimeGrid};
use crate::reflected::{picard_solve, BarrierRule, PicardSettings};
use crate::report::{Check, CheckReport};

pub const DEFAULT_THETA_MAX: f64 = 5.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioControl {
    theta: Path,
    theta_max: f64,
}

impl ScenarioControl {
    pub fn new(theta: Path, theta_max: f64) -> Result<Self> {
        if !(theta_max >= 0.0) {
            return Err(Error::invalid(format!("theta_max must be nonnegative, got {theta_max}")));
        }
        if let Some(k) = theta.values().iter().position(|v| v.abs() > theta_max) {
            return Err(Error::invalid(format!(
                "|θ| = {} exceeds theta_max = {theta_max} at node {k}",
                theta.get(k).abs()
            )));
        }
        Ok(Self { theta, theta_max })
    }

    pub fn constant(grid: TimeGrid, c: f64) -> Result<Self> {
        Self::new(Path::constant(grid, c), DEFAULT_THETA_MAX)
    }

    /// Piecewise constant on `values.len()` equal blocks of the grid.
    pub fn piecewise(grid: TimeGrid, values: &[f64], theta_max: f64) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("piecewise scenario needs at least one value"));
        }
        let m = values.len();
        let n = grid.steps();
        let theta = Path::new(
            grid,
            (0..=n).map(|k| values[(k * m / n.max(1)).min(m - 1)]).collect(),
        )?;
        Self::new(theta, theta_max)
    }

    pub fn theta(&self) -> &Path {
        &self.theta
    }

    pub fn theta_max(&self) -> f64 {
        self.theta_max
    }
}

/// Positive density path with `G(0) = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityPath(Path);

impl DensityPath {
    pub fn path(&self) -> &Path {
        &self.0
    }

    pub fn values(&self) -> &[f64] {
        self.0.values()
    }
}

/// `G_k = exp(Σ_{j<k} θ_j √Δt Z_j − ½ Σ_{j<k} θ_j² Δt)`.
pub fn density_from_normals(theta: &ScenarioControl, normals: &[f64]) -> Result<DensityPath> {
    let grid = theta.theta.grid();
    if normals.len() < grid.steps() {
        return Err(Error::invalid(format!(
            "{} normals supplied for {} steps",
            normals.len(),
            grid.steps()
        )));
    }
    let (dt, sqrt_dt) = (grid.dt(), grid.dt().sqrt());
    let th = theta.theta.values();
    let mut log_g = 0.0;
    let mut g = Vec::with_capacity(grid.len());
    g.push(1.0);
    for j in 0..grid.steps() {
        log_g += th[j] * sqrt_dt * normals[j] - 0.5 * th[j] * th[j] * dt;
        g.push(log_g.exp());
    }
    if let Some(k) = g.iter().position(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(Error::SimulationDiverged { step: k, particle: 0, value: g[k] });
    }
    Ok(DensityPath(Path::new(grid, g)?))
}

/// Density driven by the same Gaussian stream as the state particle.
pub fn simulate_density(theta: &ScenarioControl, noise: &RngStream) -> Result<DensityPath> {
    density_from_normals(theta, &noise.normals(theta.theta.grid().steps()))
}

/// One density per particle, sharing the particles' Brownian streams.
pub fn simulate_densities(theta: &ScenarioControl, particles: usize, seed: u64) -> Result<Vec<DensityPath>> {
    (0..particles)
        .into_par_iter()
        .map(|i| simulate_density(theta, &RngStream::brownian(seed, i)))
        .collect()
}

/// Sample mean and standard error of `G(T)`.
pub fn terminal_density_estimate(densities: &[DensityPath]) -> Result<Estimate> {
    let finals: Vec<f64> = densities.iter().map(|d| d.0.last()).collect();
    Estimate::from_samples(&finals)
}

/// Convex penalty `ρ` with strictly increasing derivative.
#[derive(Clone)]
pub struct PenaltySpec {
    pub name: String,
    pub rho: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    pub drho: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
}

impl fmt::Debug for PenaltySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PenaltySpec").field("name", &self.name).finish_non_exhaustive()
    }
}

impl PenaltySpec {
    /// Checks `ρ(0) = 0` and strict monotonicity of `ρ′` on `[−θ_max, θ_max]`.
    pub fn new(
        name: impl Into<String>,
        rho: impl Fn(f64) -> f64 + Send + Sync + 'static,
        drho: impl Fn(f64) -> f64 + Send + Sync + 'static,
        theta_max: f64,
    ) -> Result<Self> {
        let spec = Self { name: name.into(), rho: Arc::new(rho), drho: Arc::new(drho) };
        if (spec.rho)(0.0) != 0.0 {
            return Err(Error::invalid(format!("penalty {} has ρ(0) ≠ 0", spec.name)));
        }
        let samples = 401;
        let mut prev = f64::NEG_INFINITY;
        for i in 0..samples {
            let th = -theta_max + 2.0 * theta_max * i as f64 / (samples - 1) as f64;
            let d = (spec.drho)(th);
            if !(d > prev) {
                return Err(Error::invalid(format!(
                    "penalty {} has ρ′ not strictly increasing near θ = {th}",
                    spec.name
                )));
            }
            prev = d;
        }
        Ok(spec)
    }

    /// `ρ(θ) = θ²/2`.
    pub fn quadratic() -> Self {
        Self::new("quadratic", |t| 0.5 * t * t, |t| t, DEFAULT_THETA_MAX).expect("valid penalty")
    }

    /// `ρ(θ) = θ⁴/4`.
    pub fn quartic() -> Self {
        Self::new("quartic", |t| 0.25 * t.powi(4), |t| t.powi(3), DEFAULT_THETA_MAX)
            .expect("valid penalty")
    }
}

/// Density-weighted objective with the penalty added to the running term.
pub fn penalized_j(
    ens: &Ensemble,
    densities: &[DensityPath],
    problem: &ControlProblem,
    penalty: &PenaltySpec,
    theta: &ScenarioControl,
) -> Result<Estimate> {
    if densities.len() != ens.particles() {
        return Err(Error::invalid(format!(
            "{} densities for {} particles",
            densities.len(),
            ens.particles()
        )));
    }
    ensure_same_grid(theta.theta(), &ens.meanfield)?;
    let extra: Vec<f64> = theta.theta.values().iter().map(|&t| (penalty.rho)(t)).collect();
    let y = ens.meanfield.values();
    let payoffs: Vec<f64> = ens
        .states
        .par_iter()
        .zip(ens.controls.par_iter())
        .zip(densities.par_iter())
        .map(|((x, xi), g)| {
            weighted_payoff(
                ens.grid,
                &problem.functional,
                ens.x0,
                x.values(),
                y,
                xi.values(),
                Some(g.values()),
                Some(&extra),
            )
        })
        .collect();
    Estimate::from_samples(&payoffs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FocSolution {
    pub theta: ScenarioControl,
    /// Nodes where the root fell outside `[−θ_max, θ_max]`.
    pub clamped: Vec<usize>,
}

/// Solve `ρ′(θ) = −q₂` node by node by bisection.
pub fn solve_foc(penalty: &PenaltySpec, q2: &Path, theta_max: f64) -> Result<FocSolution> {
    if !(theta_max > 0.0) {
        return Err(Error::invalid("theta_max must be positive"));
    }
    let d = &penalty.drho;
    let mut clamped = Vec::new();
    let values = q2
        .values()
        .iter()
        .enumerate()
        .map(|(k, &q)| {
            let target = -q;
            if d(-theta_max) > target {
                clamped.push(k);
                return -theta_max;
            }
            if d(theta_max) < target {
                clamped.push(k);
                return theta_max;
            }
            let (mut lo, mut hi) = (-theta_max, theta_max);
            while hi - lo > 1e-12 {
                let mid = 0.5 * (lo + hi);
                if mid <= lo || mid >= hi {
                    break;
                }
                if d(mid) < target {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            // keep refining to the last representable midpoint
            loop {
                let mid = 0.5 * (lo + hi);
                if mid <= lo || mid >= hi {
                    break;
                }
                if d(mid) < target {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            if (d(lo) - target).abs() <= (d(hi) - target).abs() {
                lo
            } else {
                hi
            }
        })
        .collect();
    Ok(FocSolution {
        theta: ScenarioControl::new(Path::new(q2.grid(), values)?, theta_max)?,
        clamped,
    })
}

/// Payoff matrix and certified saddle cell.
#[derive(Debug, Clone)]
pub struct SaddleOutcome {
    pub cell: (usize, usize),
    /// `matrix[ξ index][θ index]`.
    pub matrix: Vec<Vec<Estimate>>,
    pub maximin: f64,
    pub minimax: f64,
    pub report: CheckReport,
}

/// Fill `J(ξ_i, θ_j)` with common random numbers and locate a cell that is a
/// column maximum and row minimum within a `2·SE` band.
pub fn parametric_saddle(
    problem: &ControlProblem,
    penalty: &PenaltySpec,
    xi_family: &[BarrierRule],
    theta_family: &[ScenarioControl],
    settings: PicardSettings,
    particles: usize,
    seed: u64,
) -> Result<SaddleOutcome> {
    if xi_family.is_empty() || theta_family.is_empty() {
        return Err(Error::invalid("strategy families must be nonempty"));
    }
    let mut report = CheckReport::new();

    let densities: Vec<Vec<DensityPath>> = theta_family
        .iter()
        .map(|th| simulate_densities(th, particles, seed))
        .collect::<Result<_>>()?;
    for (j, d) in densities.iter().enumerate() {
        let est = terminal_density_estimate(d)?;
        report.push(Check::against(
            format!("martingale.theta{j}"),
            (est.mean - 1.0).abs(),
            3.0 * est.se,
            Some(format!("E[G(T)] = {est}")),
        ));
    }

    let ensembles: Vec<Ensemble> = xi_family
        .iter()
        .map(|rule| {
            picard_solve(&problem.model, rule, problem.grid, particles, seed, settings)
                .map(|s| s.ensemble)
        })
        .collect::<Result<_>>()?;

    let cells: Vec<(usize, usize)> = (0..xi_family.len())
        .flat_map(|i| (0..theta_family.len()).map(move |j| (i, j)))
        .collect();
    let values: Vec<Estimate> = cells
        .par_iter()
        .map(|&(i, j)| penalized_j(&ensembles[i], &densities[j], problem, penalty, &theta_family[j]))
        .collect::<Result<_>>()?;
    let cols = theta_family.len();
    let matrix: Vec<Vec<Estimate>> = values.chunks(cols).map(<[Estimate]>::to_vec).collect();
    let cert = certify_saddle(&matrix)?;
    report.extend(cert.report);
    Ok(SaddleOutcome { cell: cert.cell, matrix, maximin: cert.maximin, minimax: cert.minimax, report })
}

/// Certified cell of a payoff matrix and the checks that certify it.
#[derive(Debug, Clone)]
pub struct SaddleCertificate {
    pub cell: (usize, usize),
    pub maximin: f64,
    pub minimax: f64,
    pub report: CheckReport,
}

/// Pick the cell that is a column maximum and row minimum within `2·SE`,
/// preferring the smallest total deviation; `SE` is the largest cell error.
pub fn certify_saddle(matrix: &[Vec<Estimate>]) -> Result<SaddleCertificate> {
    let cols = matrix.first().map_or(0, Vec::len);
    if cols == 0 || matrix.iter().any(|r| r.len() != cols) {
        return Err(Error::invalid("payoff matrix must be rectangular and nonempty"));
    }
    let cells: Vec<(usize, usize)> = (0..matrix.len())
        .flat_map(|i| (0..cols).map(move |j| (i, j)))
        .collect();
    let means: Vec<Vec<f64>> = matrix.iter().map(|r| r.iter().map(|e| e.mean).collect()).collect();
    let max_se = matrix.iter().flatten().map(|e| e.se).fold(0.0, f64::max);
    let maximin = means
        .iter()
        .map(|r| r.iter().copied().fold(f64::INFINITY, f64::min))
        .fold(f64::NEG_INFINITY, f64::max);
    let minimax = (0..cols)
        .map(|c| means.iter().map(|r| r[c]).fold(f64::NEG_INFINITY, f64::max))
        .fold(f64::INFINITY, f64::min);

    let band = 2.0 * max_se;
    let mut best: Option<((usize, usize), f64, CheckReport)> = None;
    for &cell in &cells {
        let r = saddle_check_within(&means, cell, band);
        let deviation = r
            .checks
            .iter()
            .filter(|c| c.name != "minimax_equality")
            .map(|c| c.violation)
            .sum::<f64>();
        let certified = r
            .checks
            .iter()
            .filter(|c| c.name != "minimax_equality")
            .all(|c| c.passed);
        if certified && best.as_ref().is_none_or(|b| deviation < b.1) {
            best = Some((cell, deviation, r));
        }
    }
    let Some((cell, _, saddle)) = best else {
        return Err(Error::NoSaddleFound { maximin, minimax });
    };
    let mut report = saddle.scoped("saddle");
    report.push(Check::against(
        "saddle_gap",
        minimax - maximin,
        4.0 * max_se,
        Some(format!("maximin = {maximin}, minimax = {minimax}")),
    ));
    let v = means[cell.0][cell.1];
    report.push(Check::against(
        "value_between_maximin_and_minimax",
        (maximin - v).max(v - minimax).max(0.0),
        band,
        Some(format!("cell ({}, {})", cell.0, cell.1)),
    ));
    Ok(SaddleCertificate { cell, maximin, minimax, report })
}
