//! Barrier rules and the Picard solver for reflected mean-field dynamics.
//!
//! Each particle solves `X = ψ − η` with `l ≤ X ≤ r`, where
//!
//! ```text
//! ψ(t) = x₀ + ∫₀ᵗ b(s, X, Y, ξ) ds + ∫₀ᵗ σ(s, X, Y, ξ) dB
//! ```
//!
//! and the singular control follows from the regulator through
//! `λ(t) dξ = −dη`. The coefficients on the right are evaluated along the
//! previous iterate (Jacobi updates) with the Brownian increments frozen.

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::meanfield::{brownian_normals, check_finite, meanfield_at, Ensemble, ModelSpec};
use crate::paths::{ensure_same_grid, sup_distance_slices, Path, TimeGrid};
use crate::report::{Check, CheckReport};
use crate::skorohod::{check_skorohod, regulator, BarrierPair, SkorohodSolution};

/// `(k, X[..=k], Y[..=k], ξ[..=k]) ↦ (l_k, r_k)` for path-dependent barriers.
pub type BarrierFn = Arc<dyn Fn(usize, &[f64], &[f64], &[f64]) -> (f64, f64) + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BarrierKind {
    Power,
    Quadratic,
    Harvesting,
    Given,
}

#[derive(Clone)]
pub enum BarrierRule {
    /// Deterministic barriers (functional-Lipschitz constant 0).
    Fixed { barriers: BarrierPair, kind: BarrierKind },
    /// Path-dependent barriers with declared constant `kappa < 1/4`.
    Custom { kappa: f64, rule: BarrierFn },
}

impl fmt::Debug for BarrierRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BarrierRule::Fixed { kind, .. } => write!(f, "BarrierRule::Fixed({kind:?})"),
            BarrierRule::Custom { kappa, .. } => write!(f, "BarrierRule::Custom(kappa = {kappa})"),
        }
    }
}

impl BarrierRule {
    pub fn fixed(barriers: BarrierPair) -> Self {
        BarrierRule::Fixed { barriers, kind: BarrierKind::Given }
    }

    pub fn custom(
        kappa: f64,
        rule: impl Fn(usize, &[f64], &[f64], &[f64]) -> (f64, f64) + Send + Sync + 'static,
    ) -> Result<Self> {
        if !(0.0..0.25).contains(&kappa) {
            return Err(Error::invalid(format!(
                "barrier Lipschitz constant {kappa} is outside [0, 1/4)"
            )));
        }
        Ok(BarrierRule::Custom { kappa, rule: Arc::new(rule) })
    }

    pub fn kappa(&self) -> f64 {
        match self {
            BarrierRule::Fixed { .. } => 0.0,
            BarrierRule::Custom { kappa, .. } => *kappa,
        }
    }

    pub fn fixed_barriers(&self) -> Option<&BarrierPair> {
        match self {
            BarrierRule::Fixed { barriers, .. } => Some(barriers),
            BarrierRule::Custom { .. } => None,
        }
    }
}

fn require_positive(name: &str, path: &Path) -> Result<()> {
    match path.values().iter().position(|&v| !(v > 0.0)) {
        Some(k) => Err(Error::invalid(format!(
            "{name} must be positive, got {} at node {k}",
            path.get(k)
        ))),
        None => Ok(()),
    }
}

/// Power-cost barriers: `κ > 0` gives `l = 0`, `r = (p/h₀)^{1/κ}`;
/// `κ < 0` gives `l = (h₀/p)^{−1/κ}`, `r = ∞`.
pub fn power_barriers(p: &Path, h0: &Path, kappa: f64) -> Result<BarrierRule> {
    ensure_same_grid(p, h0)?;
    if kappa == 0.0 || !kappa.is_finite() {
        return Err(Error::invalid(format!("exponent must be finite and nonzero, got {kappa}")));
    }
    require_positive("h0", h0)?;
    require_positive("p", p)?;
    let grid = p.grid();
    let barriers = if kappa > 0.0 {
        let upper = p.zip_with(h0, |p, h| (p / h).powf(1.0 / kappa))?;
        BarrierPair::new(Path::zeros(grid), upper)?
    } else {
        let lower = p.zip_with(h0, |p, h| (h / p).powf(-1.0 / kappa))?;
        BarrierPair::lower_only(lower)?
    };
    Ok(BarrierRule::Fixed { barriers, kind: BarrierKind::Power })
}

/// Quadratic-cost barriers `(h₁ ∓ √(h₁² + 4h₀p)) / (2h₀)`.
pub fn quadratic_barriers(p: &Path, h0: &Path, h1: &Path) -> Result<BarrierRule> {
    ensure_same_grid(p, h0)?;
    ensure_same_grid(p, h1)?;
    require_positive("h0", h0)?;
    let n = p.values().len();
    let (mut lower, mut upper) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for k in 0..n {
        let (pk, a, b) = (p.get(k), h0.get(k), h1.get(k));
        let disc = b * b + 4.0 * a * pk;
        if disc < 0.0 {
            return Err(Error::invalid(format!(
                "negative discriminant {disc} at node {k}"
            )));
        }
        let root = disc.sqrt();
        lower.push((b - root) / (2.0 * a));
        upper.push((b + root) / (2.0 * a));
    }
    let grid = p.grid();
    let barriers = BarrierPair::new(Path::new(grid, lower)?, Path::new(grid, upper)?)?;
    Ok(BarrierRule::Fixed { barriers, kind: BarrierKind::Quadratic })
}

/// Harvesting threshold `r = λ₀ p / h₀`, no lower barrier.
pub fn harvest_barrier(p: &Path, lambda0: &Path, h0: &Path) -> Result<BarrierRule> {
    ensure_same_grid(p, lambda0)?;
    ensure_same_grid(p, h0)?;
    require_positive("h0", h0)?;
    require_positive("lambda0", lambda0)?;
    let scaled = p.zip_with(lambda0, |p, l| l * p)?;
    let upper = scaled.zip_with(h0, |v, h| v / h)?;
    Ok(BarrierRule::Fixed {
        barriers: BarrierPair::upper_only(upper)?,
        kind: BarrierKind::Harvesting,
    })
}

/// Barriers actually used for each particle.
#[derive(Debug, Clone, PartialEq)]
pub enum RealizedBarriers {
    Shared(BarrierPair),
    PerParticle(Vec<BarrierPair>),
}

impl RealizedBarriers {
    pub fn get(&self, particle: usize) -> &BarrierPair {
        match self {
            RealizedBarriers::Shared(b) => b,
            RealizedBarriers::PerParticle(v) => &v[particle],
        }
    }
}

/// One Picard iterate for the whole ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct Iterate {
    pub states: Vec<Vec<f64>>,
    pub controls: Vec<Vec<f64>>,
    pub meanfield: Vec<f64>,
    pub drivers: Vec<Vec<f64>>,
    pub regulators: Vec<Vec<f64>>,
    /// Per-particle `(l, r)` for path-dependent rules.
    pub barriers: Option<Vec<(Vec<f64>, Vec<f64>)>>,
}

impl Iterate {
    /// `X ≡ x₀`, `ξ ≡ 0`.
    pub fn initial(model: &ModelSpec, grid: TimeGrid, particles: usize) -> Self {
        let len = grid.len();
        Self {
            states: vec![vec![model.x0; len]; particles],
            controls: vec![vec![0.0; len]; particles],
            meanfield: vec![(model.phi)(model.x0); len],
            drivers: vec![vec![model.x0; len]; particles],
            regulators: vec![vec![0.0; len]; particles],
            barriers: None,
        }
    }

    /// `max_i max(sup|ΔX_i|, sup|Δξ_i|)`.
    pub fn distance(&self, other: &Iterate) -> f64 {
        self.states
            .par_iter()
            .zip(&other.states)
            .zip(self.controls.par_iter().zip(&other.controls))
            .map(|((a, b), (c, d))| sup_distance_slices(a, b).max(sup_distance_slices(c, d)))
            .reduce(|| 0.0, f64::max)
    }
}

/// The fixed-point map `(X, ξ) ↦ (Z, ξ(η))` with frozen noise.
pub struct PicardMap<'a> {
    model: &'a ModelSpec,
    rule: &'a BarrierRule,
    grid: TimeGrid,
    noise: Vec<Vec<f64>>,
    lambda: Vec<f64>,
}

impl<'a> PicardMap<'a> {
    pub fn new(
        model: &'a ModelSpec,
        rule: &'a BarrierRule,
        grid: TimeGrid,
        particles: usize,
        seed: u64,
    ) -> Result<Self> {
        if particles == 0 {
            return Err(Error::invalid("need at least one particle"));
        }
        if let Some(b) = rule.fixed_barriers() {
            ensure_same_grid(b.lower(), &Path::zeros(grid))?;
        }
        let lambda = time_only_lambda(model, grid)?;
        let noise = (0..particles)
            .into_par_iter()
            .map(|i| brownian_normals(seed, i, grid.steps()))
            .collect();
        Ok(Self { model, rule, grid, noise, lambda })
    }

    pub fn particles(&self) -> usize {
        self.noise.len()
    }

    pub fn apply(&self, prev: &Iterate) -> Result<Iterate> {
        let grid = self.grid;
        let n = grid.steps();
        let (dt, sqrt_dt) = (grid.dt(), grid.dt().sqrt());
        let model = self.model;
        let y = &prev.meanfield;

        type Particle = (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, Option<(Vec<f64>, Vec<f64>)>);
        let per: Vec<Particle> = (0..self.particles())
            .into_par_iter()
            .map(|i| {
                let (x, xi, z) = (&prev.states[i], &prev.controls[i], &self.noise[i]);
                let mut psi = Vec::with_capacity(n + 1);
                psi.push(model.x0);
                for k in 0..n {
                    let t = grid.time(k);
                    psi.push(
                        psi[k]
                            + (model.drift)(t, x[k], y[k], xi[k]) * dt
                            + (model.diffusion)(t, x[k], y[k], xi[k]) * sqrt_dt * z[k],
                    );
                }
                let (eta, custom) = match self.rule {
                    BarrierRule::Fixed { barriers, .. } => {
                        (regulator(barriers.lower().values(), barriers.upper().values(), &psi), None)
                    }
                    BarrierRule::Custom { rule, .. } => {
                        let (l, r): (Vec<f64>, Vec<f64>) = (0..=n)
                            .map(|k| rule(k, &x[..=k], &y[..=k], &xi[..=k]))
                            .unzip();
                        (regulator(&l, &r, &psi), Some((l, r)))
                    }
                };
                let states: Vec<f64> = psi.iter().zip(&eta).map(|(p, e)| p - e).collect();
                let mut controls = Vec::with_capacity(n + 1);
                let mut acc = 0.0;
                let mut prev_eta = 0.0;
                for (k, &e) in eta.iter().enumerate() {
                    // λ(t) dξ = −dη, with λ frozen at the left endpoint
                    let lam = self.lambda[k.saturating_sub(1)];
                    acc += -(e - prev_eta) / lam;
                    prev_eta = e;
                    controls.push(acc);
                }
                (states, controls, psi, eta, custom)
            })
            .collect();

        let mut next = Iterate {
            states: Vec::with_capacity(per.len()),
            controls: Vec::with_capacity(per.len()),
            meanfield: Vec::new(),
            drivers: Vec::with_capacity(per.len()),
            regulators: Vec::with_capacity(per.len()),
            barriers: match self.rule {
                BarrierRule::Fixed { .. } => None,
                BarrierRule::Custom { .. } => Some(Vec::with_capacity(per.len())),
            },
        };
        for (s, c, d, e, b) in per {
            next.states.push(s);
            next.controls.push(c);
            next.drivers.push(d);
            next.regulators.push(e);
            if let (Some(v), Some(b)) = (next.barriers.as_mut(), b) {
                v.push(b);
            }
        }
        for k in 0..=n {
            check_finite(&next.states, k)?;
        }
        next.meanfield = (0..=n)
            .map(|k| meanfield_at(next.states.iter().map(|s| s[k]), &*model.phi))
            .collect();
        Ok(next)
    }
}

fn time_only_lambda(model: &ModelSpec, grid: TimeGrid) -> Result<Vec<f64>> {
    grid.times()
        .iter()
        .map(|&t| {
            let l = (model.lambda)(t, model.x0);
            if !(l.is_finite() && l != 0.0) {
                return Err(Error::UnsupportedModel(format!(
                    "singular coefficient must be finite and nonzero, got {l} at t = {t}"
                )));
            }
            for x in [-5.0, 0.0, 1.0, 5.0] {
                if (model.lambda)(t, x) != l {
                    return Err(Error::UnsupportedModel(format!(
                        "singular coefficient of model {} depends on the state",
                        model.name
                    )));
                }
            }
            Ok(l)
        })
        .collect()
}

/// Solver settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PicardSettings {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for PicardSettings {
    fn default() -> Self {
        Self { tol: 1e-6, max_iter: 50 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReflectedSolution {
    /// States, controls `ξ_i` and the mean-field path of the last iterate.
    pub ensemble: Ensemble,
    pub drivers: Vec<Path>,
    pub regulators: Vec<Path>,
    pub barriers: RealizedBarriers,
    /// `d_m`, the sup-norm change produced by iteration `m`.
    pub trace: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub kappa: f64,
}

impl ReflectedSolution {
    pub fn skorohod(&self, particle: usize) -> Result<SkorohodSolution> {
        SkorohodSolution::from_parts(
            self.drivers[particle].clone(),
            self.ensemble.states[particle].clone(),
            self.regulators[particle].clone(),
        )
    }

    /// Worst constraint/additivity/complementarity violation over all particles.
    pub fn check_particles(&self, tol: f64) -> CheckReport {
        let reports: Vec<CheckReport> = (0..self.ensemble.particles())
            .into_par_iter()
            .map(|i| match self.skorohod(i) {
                Ok(sol) => check_skorohod(&sol, self.barriers.get(i), tol),
                Err(e) => {
                    let mut r = CheckReport::new();
                    r.push(Check::flag("skorohod", false, Some(format!("particle {i}: {e}"))));
                    r
                }
            })
            .collect();
        merge_worst(reports)
    }
}

/// Keep, per check name, the worst result and tag it with its particle.
pub fn merge_worst(reports: Vec<CheckReport>) -> CheckReport {
    let mut out = CheckReport::new();
    for (i, report) in reports.into_iter().enumerate() {
        for mut c in report.checks {
            c.location = Some(match c.location {
                Some(loc) => format!("particle {i}, {loc}"),
                None => format!("particle {i}"),
            });
            match out.checks.iter_mut().find(|o| o.name == c.name) {
                Some(o) => {
                    if (o.passed && !c.passed) || (o.passed == c.passed && c.violation > o.violation) {
                        *o = c;
                    }
                }
                None => out.push(c),
            }
        }
    }
    out
}

/// Picard iteration from `X ≡ x₀, ξ ≡ 0` until `d_m ≤ tol`.
pub fn picard_solve(
    model: &ModelSpec,
    rule: &BarrierRule,
    grid: TimeGrid,
    particles: usize,
    seed: u64,
    settings: PicardSettings,
) -> Result<ReflectedSolution> {
    let map = PicardMap::new(model, rule, grid, particles, seed)?;
    let mut current = Iterate::initial(model, grid, particles);
    let mut trace = Vec::new();
    let mut converged = false;
    for _ in 0..settings.max_iter {
        let next = map.apply(&current)?;
        let d = next.distance(&current);
        trace.push(d);
        current = next;
        if d <= settings.tol {
            converged = true;
            break;
        }
    }
    if !converged && trace.len() >= 5 {
        let tail = &trace[trace.len() - 5..];
        if tail.windows(2).all(|w| w[1] >= w[0]) {
            return Err(Error::NoContraction {
                iterations: trace.len(),
                ratio: tail[4] / tail[3],
            });
        }
    }
    let iterations = trace.len();
    let barriers = match (rule, current.barriers.take()) {
        (BarrierRule::Fixed { barriers, .. }, _) => RealizedBarriers::Shared(barriers.clone()),
        (BarrierRule::Custom { .. }, Some(v)) => RealizedBarriers::PerParticle(
            v.into_iter()
                .map(|(l, r)| BarrierPair::new(Path::with_sentinels(grid, l)?, Path::with_sentinels(grid, r)?))
                .collect::<Result<_>>()?,
        ),
        (BarrierRule::Custom { .. }, None) => {
            return Err(Error::Internal("custom rule produced no barriers".into()))
        }
    };
    let to_paths = |v: Vec<Vec<f64>>| -> Result<Vec<Path>> {
        v.into_iter().map(|p| Path::new(grid, p)).collect()
    };
    Ok(ReflectedSolution {
        ensemble: Ensemble {
            grid,
            states: to_paths(current.states)?,
            controls: to_paths(current.controls)?,
            meanfield: Path::new(grid, current.meanfield)?,
            seed,
            x0: model.x0,
        },
        drivers: to_paths(current.drivers)?,
        regulators: to_paths(current.regulators)?,
        barriers,
        trace,
        converged,
        iterations,
        kappa: rule.kappa(),
    })
}

/// Geometric-decay summary of a Picard trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContractionReport {
    /// Median of `d_{m+1} / d_m`.
    pub ratio: f64,
    pub contracting: bool,
    /// `16κ²`, the barrier part of the contraction constant (informational).
    pub barrier_bound: f64,
}

pub fn picard_diagnostics(trace: &[f64], kappa: f64) -> Result<ContractionReport> {
    if trace.len() < 3 {
        return Err(Error::invalid(format!(
            "need at least 3 trace entries, got {}",
            trace.len()
        )));
    }
    let mut ratios: Vec<f64> = trace
        .windows(2)
        .filter(|w| w[0] > 0.0)
        .map(|w| w[1] / w[0])
        .collect();
    if ratios.is_empty() {
        return Err(Error::invalid("trace is identically zero"));
    }
    ratios.sort_by(f64::total_cmp);
    let m = ratios.len();
    let ratio = if m % 2 == 1 {
        ratios[m / 2]
    } else {
        0.5 * (ratios[m / 2 - 1] + ratios[m / 2])
    };
    Ok(ContractionReport {
        ratio,
        contracting: ratio < 1.0,
        barrier_bound: 16.0 * kappa * kappa,
    })
}
