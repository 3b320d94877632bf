//! Linear adjoint equations with deterministic coefficients.
//!
//! The adjoint solves `dp = −(α p + φ) dt + q dB`, `p(T) = Θ`. When α and φ
//! are deterministic so is `p`, `q ≡ 0`, and
//!
//! ```text
//! p(t) = Θ e^{∫ₜᵀ α} + ∫ₜᵀ e^{∫ₜʳ α} φ(r) dr.
//! ```

use std::io::{self, Write};

use crate::error::{Error, Result};
use crate::meanfield::{FunctionalSpec, ModelSpec};
use crate::paths::{ensure_same_grid, fmt_f64, Path, TimeGrid};

#[derive(Debug, Clone, PartialEq)]
pub struct AdjointCoefficients {
    pub alpha: Path,
    /// Martingale coefficient; reported, unused by the deterministic solver.
    pub beta: Path,
    pub phi: Path,
    pub theta: f64,
}

impl AdjointCoefficients {
    pub fn new(alpha: Path, beta: Path, phi: Path, theta: f64) -> Result<Self> {
        ensure_same_grid(&alpha, &beta)?;
        ensure_same_grid(&alpha, &phi)?;
        if !theta.is_finite() {
            return Err(Error::invalid("terminal value must be finite"));
        }
        Ok(Self { alpha, beta, phi, theta })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdjointCase {
    Deterministic,
    Harvesting,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdjointSolution {
    pub p: Path,
    pub q: Path,
    pub case: AdjointCase,
}

impl AdjointSolution {
    /// CSV columns `t,p`.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> io::Result<()> {
        writeln!(out, "t,p")?;
        let grid = self.p.grid();
        for k in 0..grid.len() {
            writeln!(out, "{},{}", fmt_f64(grid.time(k)), fmt_f64(self.p.get(k)))?;
        }
        Ok(())
    }
}

/// Exponential kernel `α(t_i, t_j) = exp(∫_{t_i}^{t_j} α)` with the exponent
/// integrated by the trapezoid rule.
#[derive(Debug, Clone)]
pub struct ExpKernel {
    cumulative: Vec<f64>,
}

impl ExpKernel {
    pub fn new(alpha: &Path) -> Self {
        let dt = alpha.grid().dt();
        let a = alpha.values();
        let mut cumulative = Vec::with_capacity(a.len());
        let mut acc = 0.0;
        cumulative.push(acc);
        for k in 1..a.len() {
            acc += 0.5 * (a[k - 1] + a[k]) * dt;
            cumulative.push(acc);
        }
        Self { cumulative }
    }

    /// `∫_{t_i}^{t_j} α`.
    pub fn exponent(&self, i: usize, j: usize) -> f64 {
        self.cumulative[j] - self.cumulative[i]
    }

    pub fn eval(&self, i: usize, j: usize) -> f64 {
        self.exponent(i, j).exp()
    }
}

/// Reduce a linear model to adjoint coefficients.
///
/// Requires `b = b₀(t) + b₁(t)x + b₂(t)y`, `f = f₁(t)x + f₂(t)y`, `g = Kx`
/// and a mean-field map with constant derivative `c`; then `α = −b₁ − c b₂`,
/// `φ = −f₁ − c f₂`, `Θ = K`. `β` is a finite-difference estimate of
/// `σ_x + c σ_y` along the initial state.
pub fn coefficient_reduction(
    model: &ModelSpec,
    functional: &FunctionalSpec,
    grid: TimeGrid,
) -> Result<AdjointCoefficients> {
    let drift = model.linear.as_ref().ok_or_else(|| {
        Error::UnsupportedModel(format!("model {} has no declared linear drift", model.name))
    })?;
    let payoff = functional
        .linear
        .as_ref()
        .ok_or_else(|| Error::UnsupportedModel("functional is not declared linear".into()))?;
    let c = (model.dphi)(model.x0);
    for x in [-10.0, -1.0, 0.0, 0.5, 1.0, 3.0, 10.0, model.x0] {
        if ((model.dphi)(x) - c).abs() > 1e-12 * (1.0 + c.abs()) {
            return Err(Error::UnsupportedModel(format!(
                "mean-field map of model {} is not affine (φ′({x}) ≠ φ′({}))",
                model.name, model.x0
            )));
        }
    }
    let alpha = Path::new(
        grid,
        grid.times().iter().map(|&t| -(drift.b1)(t) - c * (drift.b2)(t)).collect(),
    )?;
    let phi = Path::new(
        grid,
        grid.times().iter().map(|&t| -(payoff.f1)(t) - c * (payoff.f2)(t)).collect(),
    )?;
    let (x, y) = (model.x0, (model.phi)(model.x0));
    let eps = 1e-6 * (1.0 + x.abs());
    let beta = Path::new(
        grid,
        grid.times()
            .iter()
            .map(|&t| {
                let s = &model.diffusion;
                let sx = (s(t, x + eps, y, 0.0) - s(t, x - eps, y, 0.0)) / (2.0 * eps);
                let sy = (s(t, x, y + eps, 0.0) - s(t, x, y - eps, 0.0)) / (2.0 * eps);
                sx + c * sy
            })
            .collect(),
    )?;
    AdjointCoefficients::new(alpha, beta, phi, payoff.k)
}

/// Closed-form adjoint: trapezoid exponent, left-endpoint `dr` integral.
pub fn deterministic_adjoint(coeffs: &AdjointCoefficients, grid: TimeGrid) -> Result<AdjointSolution> {
    ensure_same_grid(&Path::zeros(grid), &coeffs.alpha)?;
    let kernel = ExpKernel::new(&coeffs.alpha);
    let n = grid.steps();
    let dt = grid.dt();
    let phi = coeffs.phi.values();
    let mut p = vec![0.0; n + 1];
    let mut tail = 0.0;
    p[n] = coeffs.theta;
    for k in (0..n).rev() {
        tail = phi[k] * dt + kernel.eval(k, k + 1) * tail;
        p[k] = coeffs.theta * kernel.eval(k, n) + tail;
    }
    Ok(AdjointSolution {
        p: Path::new(grid, p)?,
        q: Path::zeros(grid),
        case: AdjointCase::Deterministic,
    })
}

/// Harvesting adjoint `dp = −(b p + σ q) dt + q dB`, `p(T) = K`; with
/// deterministic `b, σ` this is `p(t) = K exp(∫ₜᵀ b)`, `q ≡ 0`.
pub fn harvesting_adjoint(b: &Path, sigma: &Path, k: f64, grid: TimeGrid) -> Result<AdjointSolution> {
    ensure_same_grid(&Path::zeros(grid), b)?;
    ensure_same_grid(b, sigma)?;
    if !k.is_finite() {
        return Err(Error::invalid("terminal value must be finite"));
    }
    let kernel = ExpKernel::new(b);
    let n = grid.steps();
    let mut p: Vec<f64> = (0..=n).map(|j| k * kernel.eval(j, n)).collect();
    p[n] = k;
    Ok(AdjointSolution {
        p: Path::new(grid, p)?,
        q: Path::zeros(grid),
        case: AdjointCase::Harvesting,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::meanfield::constant;
    use std::f64::consts::E;
    use std::sync::Arc;

    fn grid(n: usize) -> TimeGrid {
        TimeGrid::new(1.0, n).unwrap()
    }

    fn coeffs(g: TimeGrid, a: f64, phi: f64, k: f64) -> AdjointCoefficients {
        AdjointCoefficients::new(Path::constant(g, a), Path::zeros(g), Path::constant(g, phi), k).unwrap()
    }

    /// Direct double sum of the closed form on the grid.
    fn brute_force(c: &AdjointCoefficients) -> Vec<f64> {
        let g = c.alpha.grid();
        let a = c.alpha.values();
        let dt = g.dt();
        let integral = |i: usize, j: usize| -> f64 {
            (i..j).map(|m| 0.5 * (a[m] + a[m + 1]) * dt).sum()
        };
        (0..=g.steps())
            .map(|k| {
                let head = c.theta * integral(k, g.steps()).exp();
                let tail: f64 = (k..g.steps())
                    .map(|r| integral(k, r).exp() * c.phi.get(r) * dt)
                    .sum();
                head + tail
            })
            .collect()
    }

    #[test]
    fn constant_terminal_value() {
        let g = grid(50);
        let sol = deterministic_adjoint(&coeffs(g, 0.0, 0.0, 1.0), g).unwrap();
        assert!(sol.p.values().iter().all(|&v| v == 1.0));
        assert!(sol.q.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unit_running_reward_gives_remaining_time() {
        let g = grid(64);
        let sol = deterministic_adjoint(&coeffs(g, 0.0, 1.0, 0.0), g).unwrap();
        for k in 0..g.len() {
            assert!((sol.p.get(k) - (1.0 - g.time(k))).abs() < 1e-12);
        }
    }

    #[test]
    fn discounted_terminal_value() {
        let g = grid(2000);
        let sol = deterministic_adjoint(&coeffs(g, -1.0, 0.0, 1.0), g).unwrap();
        assert!((sol.p.get(0) - (-1.0f64).exp()).abs() < 1e-12);
        assert_eq!(sol.p.last(), 1.0);
    }

    #[test]
    fn recursion_matches_double_sum() {
        let g = grid(40);
        let c = AdjointCoefficients::new(
            Path::from_fn(g, |t| (3.0 * t).sin() - 0.5),
            Path::zeros(g),
            Path::from_fn(g, |t| t * t - 0.2),
            1.7,
        )
        .unwrap();
        let fast = deterministic_adjoint(&c, g).unwrap();
        for (a, b) in fast.p.values().iter().zip(brute_force(&c)) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn nonnegative_inputs_give_nonnegative_adjoint() {
        let g = grid(100);
        let c = AdjointCoefficients::new(
            Path::from_fn(g, |t| 2.0 * (5.0 * t).cos()),
            Path::zeros(g),
            Path::from_fn(g, |t| (t - 0.5).abs()),
            0.0,
        )
        .unwrap();
        let sol = deterministic_adjoint(&c, g).unwrap();
        assert!(sol.p.values().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn kernel_flow_property() {
        let g = grid(100);
        let kern = ExpKernel::new(&Path::from_fn(g, |t| (7.0 * t).sin()));
        for (i, r, s) in [(0, 10, 100), (3, 50, 51), (20, 20, 90)] {
            assert!((kern.eval(i, r) * kern.eval(r, s) - kern.eval(i, s)).abs() < 1e-12);
        }
    }

    #[test]
    fn harvesting_closed_forms() {
        let g = grid(2000);
        let zero = Path::zeros(g);
        let p = harvesting_adjoint(&zero, &zero, 3.0, g).unwrap().p;
        assert!(p.values().iter().all(|&v| v == 3.0));
        let p = harvesting_adjoint(&Path::constant(g, 1.0), &zero, 1.0, g).unwrap().p;
        assert!((p.get(0) - E).abs() < 1e-12);
        let p = harvesting_adjoint(&Path::from_fn(g, |t| t), &zero, 2.0, g).unwrap().p;
        assert!((p.get(0) - 2.0 * 0.5f64.exp()).abs() < 1e-12);
        assert_eq!(p.last(), 2.0);
    }

    #[test]
    fn reduction_of_linear_model() {
        let g = grid(10);
        let model = ModelSpec::new("lin", 1.0).with_linear_drift(constant(0.0), constant(0.3), constant(0.2));
        let f = FunctionalSpec::linear(constant(0.0), constant(0.0), 1.0, Arc::new(|_, _| 0.0));
        let c = coefficient_reduction(&model, &f, g).unwrap();
        assert!(c.alpha.values().iter().all(|&v| (v + 0.5).abs() < 1e-15));
        assert!(c.phi.values().iter().all(|&v| v == 0.0));
        assert_eq!(c.theta, 1.0);

        let f = FunctionalSpec::linear(constant(1.0), constant(2.0), 0.0, Arc::new(|_, _| 0.0));
        let c = coefficient_reduction(&model, &f, g).unwrap();
        assert!(c.phi.values().iter().all(|&v| v == -3.0));

        let zero = ModelSpec::new("zero", 1.0).with_linear_drift(constant(0.0), constant(0.0), constant(0.0));
        let f = FunctionalSpec::linear(constant(0.0), constant(0.0), 0.0, Arc::new(|_, _| 0.0));
        let c = coefficient_reduction(&zero, &f, g).unwrap();
        assert!(c.alpha.values().iter().chain(c.phi.values()).all(|&v| v == 0.0));
        assert_eq!(c.theta, 0.0);
    }

    #[test]
    fn reduction_reports_beta_of_geometric_noise() {
        let g = grid(4);
        let model = ModelSpec::harvesting(1.0, constant(1.0), constant(0.2), constant(1.0));
        let f = FunctionalSpec::harvesting(constant(1.0), 1.0);
        let c = coefficient_reduction(&model, &f, g).unwrap();
        assert!(c.alpha.values().iter().all(|&v| v == -1.0));
        assert!(c.beta.values().iter().all(|&v| (v - 0.2).abs() < 1e-8));
    }

    #[test]
    fn reduction_rejects_nonlinear_inputs() {
        let g = grid(4);
        let f = FunctionalSpec::linear(constant(0.0), constant(0.0), 1.0, Arc::new(|_, _| 0.0));
        let nonlinear = ModelSpec::new("nl", 1.0).with_drift(|_, x, _, _| x.sin());
        assert!(matches!(coefficient_reduction(&nonlinear, &f, g), Err(Error::UnsupportedModel(_))));
        let quad_field = ModelSpec::new("q", 1.0)
            .with_linear_drift(constant(0.0), constant(0.0), constant(1.0))
            .with_meanfield(|x| x * x, |x| 2.0 * x);
        assert!(matches!(coefficient_reduction(&quad_field, &f, g), Err(Error::UnsupportedModel(_))));
        let lin = ModelSpec::new("l", 1.0).with_linear_drift(constant(0.0), constant(1.0), constant(0.0));
        let plain = FunctionalSpec::new(|_, _, _, _| 0.0, |x, _| x, |_, _| 0.0);
        assert!(matches!(coefficient_reduction(&lin, &plain, g), Err(Error::UnsupportedModel(_))));
    }

    #[test]
    fn first_order_convergence_with_running_term() {
        // α ≡ −1, φ ≡ 1, K = 1 has exact solution p ≡ 1
        let err = |n: usize| {
            let g = grid(n);
            let sol = deterministic_adjoint(&coeffs(g, -1.0, 1.0, 1.0), g).unwrap();
            sol.p.values().iter().fold(0.0f64, |m, v| m.max((v - 1.0).abs()))
        };
        let (e1, e2) = (err(1000), err(2000));
        let ratio = e2 / e1;
        assert!((0.4..=0.6).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn csv_header() {
        let g = grid(2);
        let sol = deterministic_adjoint(&coeffs(g, 0.0, 0.0, 1.0), g).unwrap();
        let mut buf = Vec::new();
        sol.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("t,p\n0.0"));
    }
}
