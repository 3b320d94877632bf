//! Particle approximation of controlled McKean–Vlasov dynamics
//!
//! ```text
//! dX = b(t, X, Y, ξ) dt + σ(t, X, Y, ξ) dB + λ(t, X) dξ,   Y = E[φ(X)]
//! ```
//!
//! and Monte Carlo estimation of performance functionals.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::paths::{ensure_same_grid, Path, RngStream, TimeGrid};

/// Deterministic coefficient `t ↦ c(t)`.
pub type TimeFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
/// `(t, x, y, ξ) ↦ value`.
pub type StateFn = Arc<dyn Fn(f64, f64, f64, f64) -> f64 + Send + Sync>;
/// `(t, x) ↦ value`.
pub type TimeStateFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;
/// `x ↦ value`.
pub type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Constant coefficient.
pub fn constant(c: f64) -> TimeFn {
    Arc::new(move |_| c)
}

/// Right-continuous step function through the node values of `path`.
pub fn step_fn(path: Path) -> TimeFn {
    Arc::new(move |t| path.get(path.grid().node_at_or_before(t)))
}

/// Divergence guard on particle states.
pub const STATE_BOUND: f64 = 1e12;

/// Linear structure `b(t, x, y, ξ) = b₀(t, ξ) + b₁(t)x + b₂(t)y`.
#[derive(Clone)]
pub struct LinearDrift {
    pub b1: TimeFn,
    pub b2: TimeFn,
}

#[derive(Clone)]
pub struct ModelSpec {
    pub name: String,
    pub drift: StateFn,
    pub diffusion: StateFn,
    pub lambda: TimeStateFn,
    pub phi: ScalarFn,
    pub dphi: ScalarFn,
    pub x0: f64,
    /// Declared Lipschitz constant of `(b, σ)` in `(x, y, ξ)`.
    pub lipschitz: f64,
    pub linear: Option<LinearDrift>,
}

impl fmt::Debug for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelSpec")
            .field("name", &self.name)
            .field("x0", &self.x0)
            .field("lipschitz", &self.lipschitz)
            .field("linear", &self.linear.is_some())
            .finish_non_exhaustive()
    }
}

impl ModelSpec {
    /// No dynamics: `b = σ = 0`, `λ = 1`, `φ = id`.
    pub fn new(name: impl Into<String>, x0: f64) -> Self {
        Self {
            name: name.into(),
            drift: Arc::new(|_, _, _, _| 0.0),
            diffusion: Arc::new(|_, _, _, _| 0.0),
            lambda: Arc::new(|_, _| 1.0),
            phi: Arc::new(|x| x),
            dphi: Arc::new(|_| 1.0),
            x0,
            lipschitz: 0.0,
            linear: None,
        }
    }

    pub fn with_drift(mut self, b: impl Fn(f64, f64, f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        self.drift = Arc::new(b);
        self.linear = None;
        self
    }

    pub fn with_diffusion(
        mut self,
        s: impl Fn(f64, f64, f64, f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        self.diffusion = Arc::new(s);
        self
    }

    pub fn with_lambda(mut self, l: impl Fn(f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        self.lambda = Arc::new(l);
        self
    }

    pub fn with_meanfield(
        mut self,
        phi: impl Fn(f64) -> f64 + Send + Sync + 'static,
        dphi: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        self.phi = Arc::new(phi);
        self.dphi = Arc::new(dphi);
        self
    }

    pub fn with_lipschitz(mut self, l: f64) -> Self {
        self.lipschitz = l;
        self
    }

    /// Drift `b₀(t) + b₁(t)x + b₂(t)y`, recorded as linear.
    pub fn with_linear_drift(mut self, b0: TimeFn, b1: TimeFn, b2: TimeFn) -> Self {
        let (c0, c1, c2) = (b0.clone(), b1.clone(), b2.clone());
        self.drift = Arc::new(move |t, x, y, _| c0(t) + c1(t) * x + c2(t) * y);
        self.linear = Some(LinearDrift { b1, b2 });
        self
    }

    /// Population model `dX = E[X] b(t) dt + X σ(t) dB − λ₀(t) dξ`.
    pub fn harvesting(x0: f64, b: TimeFn, sigma: TimeFn, lambda0: TimeFn) -> Self {
        let s = sigma.clone();
        Self::new("harvesting", x0)
            .with_linear_drift(constant(0.0), constant(0.0), b)
            .with_diffusion(move |t, x, _, _| x * s(t))
            .with_lambda(move |t, _| -lambda0(t))
    }

    /// Sampled Lipschitz check of `(b, σ)` in `(x, y, ξ)` on `[0, T] × [−R, R]³`.
    pub fn check_lipschitz(&self, horizon: f64, radius: f64, samples: usize, seed: u64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let draw = |rng: &mut ChaCha8Rng| rng.random_range(-radius..=radius);
        for _ in 0..samples {
            let t = rng.random_range(0.0..=horizon);
            let a = [draw(&mut rng), draw(&mut rng), draw(&mut rng)];
            let c = [draw(&mut rng), draw(&mut rng), draw(&mut rng)];
            let dist: f64 = a.iter().zip(&c).map(|(u, v)| (u - v).abs()).sum();
            let db = ((self.drift)(t, a[0], a[1], a[2]) - (self.drift)(t, c[0], c[1], c[2])).abs();
            let ds = ((self.diffusion)(t, a[0], a[1], a[2]) - (self.diffusion)(t, c[0], c[1], c[2])).abs();
            if db + ds > self.lipschitz * dist * (1.0 + 1e-12) + 1e-12 {
                return Err(Error::invalid(format!(
                    "model {} violates declared Lipschitz constant {} at t = {t}, {a:?} vs {c:?}",
                    self.name, self.lipschitz
                )));
            }
        }
        Ok(())
    }
}

/// Singular control applied in a forward simulation.
#[derive(Debug, Clone)]
pub enum ControlPolicy {
    Zero,
    Common(Path),
    PerParticle(Vec<Path>),
}

impl ControlPolicy {
    fn resolve(&self, grid: TimeGrid, n: usize) -> Result<Vec<Path>> {
        let out = match self {
            ControlPolicy::Zero => vec![Path::zeros(grid); n],
            ControlPolicy::Common(p) => vec![p.clone(); n],
            ControlPolicy::PerParticle(v) => {
                if v.len() != n {
                    return Err(Error::invalid(format!(
                        "{} control paths supplied for {n} particles",
                        v.len()
                    )));
                }
                v.clone()
            }
        };
        let reference = Path::zeros(grid);
        for p in &out {
            ensure_same_grid(&reference, p)?;
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub grid: TimeGrid,
    pub states: Vec<Path>,
    /// Controls `ξ_i` with `ξ_i(0⁻) = 0`; finite variation in general.
    pub controls: Vec<Path>,
    /// `Y_k = (1/N) Σ φ(X_i(t_k))`.
    pub meanfield: Path,
    pub seed: u64,
    pub x0: f64,
}

impl Ensemble {
    pub fn particles(&self) -> usize {
        self.states.len()
    }

    /// Node-wise mean of the controls.
    pub fn mean_control(&self) -> Path {
        mean_paths(self.grid, &self.controls)
    }

    /// Node-wise empirical quantiles of the states.
    pub fn state_quantiles(&self, probs: &[f64]) -> Vec<Path> {
        let mut cols: Vec<Vec<f64>> = vec![Vec::with_capacity(self.grid.len()); probs.len()];
        let mut buf = Vec::with_capacity(self.particles());
        for k in 0..self.grid.len() {
            buf.clear();
            buf.extend(self.states.iter().map(|p| p.get(k)));
            buf.sort_by(f64::total_cmp);
            for (c, &q) in cols.iter_mut().zip(probs) {
                let pos = q.clamp(0.0, 1.0) * (buf.len() - 1) as f64;
                let lo = pos.floor() as usize;
                let hi = pos.ceil() as usize;
                let w = pos - lo as f64;
                c.push(buf[lo] * (1.0 - w) + buf[hi] * w);
            }
        }
        cols.into_iter()
            .map(|v| Path::new(self.grid, v).expect("quantiles of finite states"))
            .collect()
    }
}

pub(crate) fn mean_paths(grid: TimeGrid, paths: &[Path]) -> Path {
    let n = paths.len() as f64;
    let mut acc = vec![0.0; grid.len()];
    for p in paths {
        for (a, v) in acc.iter_mut().zip(p.values()) {
            *a += v;
        }
    }
    Path::new(grid, acc.into_iter().map(|a| a / n).collect()).expect("finite mean")
}

/// `Y_k = (1/N) Σ_i φ(X_i(t_k))`, summed in particle order.
pub fn empirical_meanfield(states: &[Path], phi: &dyn Fn(f64) -> f64) -> Result<Path> {
    let first = states
        .first()
        .ok_or_else(|| Error::invalid("empty ensemble"))?;
    let grid = first.grid();
    for p in states {
        ensure_same_grid(first, p)?;
    }
    let values = (0..grid.len())
        .map(|k| meanfield_at(states.iter().map(|p| p.get(k)), phi))
        .collect();
    Path::new(grid, values)
}

pub(crate) fn meanfield_at(xs: impl ExactSizeIterator<Item = f64>, phi: &dyn Fn(f64) -> f64) -> f64 {
    let n = xs.len() as f64;
    xs.map(phi).sum::<f64>() / n
}

/// Standard normals driving particle `i`; shared by every module that needs them.
pub fn brownian_normals(seed: u64, particle: usize, steps: usize) -> Vec<f64> {
    RngStream::brownian(seed, particle).normals(steps)
}

/// Euler–Maruyama with synchronous mean-field coupling.
///
/// `Y_k` is formed from all particles (in particle order) before any particle
/// advances, so results do not depend on the thread count.
pub fn simulate_ensemble(
    model: &ModelSpec,
    policy: &ControlPolicy,
    grid: TimeGrid,
    particles: usize,
    seed: u64,
) -> Result<Ensemble> {
    if particles == 0 {
        return Err(Error::invalid("need at least one particle"));
    }
    let controls = policy.resolve(grid, particles)?;
    let n = grid.steps();
    let noise: Vec<Vec<f64>> = (0..particles)
        .into_par_iter()
        .map(|i| brownian_normals(seed, i, n))
        .collect();

    let mut states: Vec<Vec<f64>> = controls
        .iter()
        .map(|xi| {
            let mut v = Vec::with_capacity(grid.len());
            v.push(model.x0 + (model.lambda)(0.0, model.x0) * xi.get(0));
            v
        })
        .collect();
    check_finite(&states, 0)?;

    let (dt, sqrt_dt) = (grid.dt(), grid.dt().sqrt());
    let mut y = Vec::with_capacity(grid.len());
    for k in 0..n {
        let yk = meanfield_at(states.iter().map(|s| s[k]), &*model.phi);
        y.push(yk);
        let t = grid.time(k);
        states
            .par_iter_mut()
            .zip(controls.par_iter())
            .zip(noise.par_iter())
            .for_each(|((s, xi), z)| {
                let x = s[k];
                let (xik, dxi) = (xi.get(k), xi.get(k + 1) - xi.get(k));
                let next = x
                    + (model.drift)(t, x, yk, xik) * dt
                    + (model.diffusion)(t, x, yk, xik) * sqrt_dt * z[k]
                    + (model.lambda)(t, x) * dxi;
                s.push(next);
            });
        check_finite(&states, k + 1)?;
    }
    y.push(meanfield_at(states.iter().map(|s| s[n]), &*model.phi));

    Ok(Ensemble {
        grid,
        states: states
            .into_iter()
            .map(|v| Path::new(grid, v))
            .collect::<Result<_>>()?,
        controls,
        meanfield: Path::new(grid, y)?,
        seed,
        x0: model.x0,
    })
}

pub(crate) fn check_finite(states: &[Vec<f64>], step: usize) -> Result<()> {
    for (i, s) in states.iter().enumerate() {
        let v = s[step];
        if !v.is_finite() || v.abs() > STATE_BOUND {
            return Err(Error::SimulationDiverged { step, particle: i, value: v });
        }
    }
    Ok(())
}

/// Linear structure `f = f₁(t)x + f₂(t)y + f₃(t, ξ)`, `g = Kx`.
#[derive(Clone)]
pub struct LinearPayoff {
    pub f1: TimeFn,
    pub f2: TimeFn,
    pub k: f64,
}

/// `J = E[∫ f dt + g(X(T), Y(T)) + ∫ h dξ]`.
#[derive(Clone)]
pub struct FunctionalSpec {
    pub f: StateFn,
    pub g: Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>,
    pub h: TimeStateFn,
    pub linear: Option<LinearPayoff>,
}

impl fmt::Debug for FunctionalSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FunctionalSpec")
            .field("linear", &self.linear.is_some())
            .finish_non_exhaustive()
    }
}

impl FunctionalSpec {
    pub fn new(
        f: impl Fn(f64, f64, f64, f64) -> f64 + Send + Sync + 'static,
        g: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
        h: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self { f: Arc::new(f), g: Arc::new(g), h: Arc::new(h), linear: None }
    }

    /// `f = f₁(t)x + f₂(t)y`, `g = Kx`, with singular cost `h`.
    pub fn linear(f1: TimeFn, f2: TimeFn, k: f64, h: TimeStateFn) -> Self {
        let (a, b) = (f1.clone(), f2.clone());
        Self {
            f: Arc::new(move |t, x, y, _| a(t) * x + b(t) * y),
            g: Arc::new(move |x, _| k * x),
            h,
            linear: Some(LinearPayoff { f1, f2, k }),
        }
    }

    /// Harvesting payoff `E[∫ h₀(t) X dξ + K X(T)]`.
    pub fn harvesting(h0: TimeFn, k: f64) -> Self {
        Self::linear(constant(0.0), constant(0.0), k, Arc::new(move |t, x| h0(t) * x))
    }
}

/// Monte Carlo mean and standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub se: f64,
}

impl Estimate {
    /// Sample mean and `std / √N` (zero for a single sample).
    pub fn from_samples(xs: &[f64]) -> Result<Self> {
        if xs.is_empty() {
            return Err(Error::EstimationFailed("no samples".into()));
        }
        if let Some(i) = xs.iter().position(|v| !v.is_finite()) {
            return Err(Error::EstimationFailed(format!(
                "non-finite payoff for particle {i}"
            )));
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let se = if xs.len() < 2 {
            0.0
        } else {
            let var = xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        };
        Ok(Self { mean, se })
    }
}

impl fmt::Display for Estimate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.10e}±{:.3e}", self.mean, self.se)
    }
}

/// One particle's payoff with optional density weights `G_k` and an extra
/// running term `extra_k`.
///
/// Running terms use left endpoints, the `dξ` term the left limit
/// `h(t_{k−1}, X_{k−1})` (pre-jump state `x0` at `k = 0`), and weights are
/// taken at the same evaluation times as the integrands.
pub(crate) fn weighted_payoff(
    grid: TimeGrid,
    spec: &FunctionalSpec,
    x0: f64,
    x: &[f64],
    y: &[f64],
    xi: &[f64],
    weights: Option<&[f64]>,
    extra: Option<&[f64]>,
) -> f64 {
    let n = grid.steps();
    let dt = grid.dt();
    let w = |k: usize| weights.map_or(1.0, |g| g[k]);
    let mut running = 0.0;
    for k in 0..n {
        let mut v = (spec.f)(grid.time(k), x[k], y[k], xi[k]);
        if let Some(e) = extra {
            v += e[k];
        }
        running += w(k) * v * dt;
    }
    let terminal = w(n) * (spec.g)(x[n], y[n]);
    let mut singular = 0.0;
    let mut prev_xi = 0.0;
    for k in 0..=n {
        let d = xi[k] - prev_xi;
        prev_xi = xi[k];
        if d != 0.0 {
            let (wk, hk) = if k == 0 {
                (1.0, (spec.h)(grid.time(0), x0))
            } else {
                (w(k - 1), (spec.h)(grid.time(k - 1), x[k - 1]))
            };
            singular += wk * hk * d;
        }
    }
    running + terminal + singular
}

/// Per-particle payoffs `j_i`.
pub fn particle_payoffs(ens: &Ensemble, spec: &FunctionalSpec) -> Vec<f64> {
    let y = ens.meanfield.values();
    ens.states
        .par_iter()
        .zip(ens.controls.par_iter())
        .map(|(x, xi)| weighted_payoff(ens.grid, spec, ens.x0, x.values(), y, xi.values(), None, None))
        .collect()
}

/// Sample mean and standard error of the payoff over the ensemble.
pub fn estimate_j(ens: &Ensemble, spec: &FunctionalSpec) -> Result<Estimate> {
    Estimate::from_samples(&particle_payoffs(ens, spec))
}
