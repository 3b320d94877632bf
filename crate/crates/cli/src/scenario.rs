//! Typed scenarios built from a [`Config`].

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use mfsc_core::meanfield::{FunctionalSpec, ModelSpec};
use mfsc_core::nash::{GameScenario, SplitRule};
use mfsc_core::optimality::{ControlProblem, Direction, PerturbationFamily};
use mfsc_core::reflected::{BarrierRule, PicardSettings};
use mfsc_core::uncertainty::PenaltySpec;
use mfsc_core::{Path, TimeGrid};

use crate::config::{Coef, Config};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Harvesting,
    QuadraticCost,
    PowerCost,
    Game,
    Uncertainty,
    CustomReflected,
}

impl Kind {
    pub const ALL: [Kind; 6] = [
        Kind::Harvesting,
        Kind::QuadraticCost,
        Kind::PowerCost,
        Kind::Game,
        Kind::Uncertainty,
        Kind::CustomReflected,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Kind::Harvesting => "harvesting",
            Kind::QuadraticCost => "quadratic-cost",
            Kind::PowerCost => "power-cost",
            Kind::Game => "game",
            Kind::Uncertainty => "uncertainty",
            Kind::CustomReflected => "custom-reflected",
        }
    }
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Kind {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Kind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .with_context(|| {
                let names: Vec<&str> = Kind::ALL.iter().map(|k| k.name()).collect();
                format!("unknown scenario kind `{s}` (expected one of {})", names.join(", "))
            })
    }
}

/// Population dynamics and harvesting payoff.
#[derive(Debug, Clone)]
pub struct Harvest {
    pub x0: f64,
    pub b: Coef,
    pub sigma: Coef,
    pub lambda0: Coef,
    pub h0: Coef,
    pub k: f64,
}

impl Harvest {
    fn read(c: &Config) -> Result<Self> {
        let h = Self {
            x0: c.num_or("model.x0", 1.0)?,
            b: c.coef("model.b")?,
            sigma: c.coef("model.sigma")?,
            lambda0: c.coef("model.lambda0")?,
            h0: c.coef("cost.h0")?,
            k: c.num("cost.K")?,
        };
        if !(h.x0 > 0.0) {
            bail!("model.x0 must be positive for a population model");
        }
        Ok(h)
    }

    pub fn model(&self) -> ModelSpec {
        ModelSpec::harvesting(self.x0, self.b.to_fn(), self.sigma.to_fn(), self.lambda0.to_fn())
    }

    pub fn functional(&self) -> FunctionalSpec {
        FunctionalSpec::harvesting(self.h0.to_fn(), self.k)
    }
}

/// `dX = (b₀ + b₁X + b₂Y) dt + (σ₀ + σ₁X) dB + λ dξ` with `Y = E[X]` and
/// payoff `f = f₁X + f₂Y`, `g = KX`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub x0: f64,
    pub b0: Coef,
    pub b1: Coef,
    pub b2: Coef,
    pub sigma0: Coef,
    pub sigma1: Coef,
    pub f1: Coef,
    pub f2: Coef,
    pub k: f64,
}

impl Linear {
    fn read(c: &Config) -> Result<Self> {
        Ok(Self {
            x0: c.num("model.x0")?,
            b0: c.coef_or("model.b0", 0.0)?,
            b1: c.coef_or("model.b1", 0.0)?,
            b2: c.coef_or("model.b2", 0.0)?,
            sigma0: c.coef_or("model.sigma0", 0.0)?,
            sigma1: c.coef_or("model.sigma1", 0.0)?,
            f1: c.coef_or("payoff.f1", 0.0)?,
            f2: c.coef_or("payoff.f2", 0.0)?,
            k: c.num("payoff.K")?,
        })
    }

    pub fn model(&self, name: &str, lambda: f64) -> ModelSpec {
        let (s0, s1) = (self.sigma0.to_fn(), self.sigma1.to_fn());
        ModelSpec::new(name, self.x0)
            .with_linear_drift(self.b0.to_fn(), self.b1.to_fn(), self.b2.to_fn())
            .with_diffusion(move |t, x, _, _| s0(t) + s1(t) * x)
            .with_lambda(move |_, _| lambda)
    }

    pub fn functional(&self, h: impl Fn(f64, f64) -> f64 + Send + Sync + 'static) -> FunctionalSpec {
        FunctionalSpec::linear(self.f1.to_fn(), self.f2.to_fn(), self.k, Arc::new(h))
    }
}

/// Barriers `l(t) + c_l Y`, `r(t) + c_r Y` with a declared Lipschitz constant.
#[derive(Debug, Clone)]
pub struct MeanfieldBarrier {
    pub lower: Option<Coef>,
    pub upper: Option<Coef>,
    pub lower_meanfield: f64,
    pub upper_meanfield: f64,
    pub kappa: f64,
}

impl MeanfieldBarrier {
    fn read(c: &Config) -> Result<Self> {
        let b = Self {
            lower: c.coef_opt("barrier.lower")?,
            upper: c.coef_opt("barrier.upper")?,
            lower_meanfield: c.num_or("barrier.lower_meanfield", 0.0)?,
            upper_meanfield: c.num_or("barrier.upper_meanfield", 0.0)?,
            kappa: c.num("barrier.kappa")?,
        };
        if b.lower.is_none() && b.upper.is_none() {
            bail!("custom-reflected needs `barrier.lower` or `barrier.upper`");
        }
        if b.lower.is_none() && b.lower_meanfield != 0.0 || b.upper.is_none() && b.upper_meanfield != 0.0 {
            bail!("a mean-field barrier coefficient is set for a barrier that is absent");
        }
        let needed = b.lower_meanfield.abs().max(b.upper_meanfield.abs());
        if b.kappa < needed {
            bail!("barrier.kappa = {} is below the barrier's mean-field sensitivity {needed}", b.kappa);
        }
        Ok(b)
    }

    pub fn rule(&self, grid: TimeGrid) -> Result<BarrierRule> {
        let times = grid.times();
        let eval = |c: &Option<Coef>, inf: f64| -> Vec<f64> {
            match c {
                Some(c) => times.iter().map(|&t| c.eval(t)).collect(),
                None => vec![inf; times.len()],
            }
        };
        let (lo, hi) = (eval(&self.lower, f64::NEG_INFINITY), eval(&self.upper, f64::INFINITY));
        let (cl, cu) = (self.lower_meanfield, self.upper_meanfield);
        // finite base values never combine with an infinite sentinel
        let shift = move |base: f64, c: f64, y: f64| if base.is_finite() { base + c * y } else { base };
        Ok(BarrierRule::custom(self.kappa, move |k, _x, y, _xi| {
            (shift(lo[k], cl, y[k]), shift(hi[k], cu, y[k]))
        })?)
    }
}

#[derive(Debug, Clone)]
pub enum Spec {
    Harvesting {
        harvest: Harvest,
        pushes: usize,
        amplitude: f64,
        check_tol: f64,
    },
    QuadraticCost {
        linear: Linear,
        h0: Coef,
        h1: Coef,
    },
    PowerCost {
        linear: Linear,
        h0: Coef,
        kappa: f64,
    },
    CustomReflected {
        linear: Linear,
        h0: Coef,
        lambda: f64,
        barrier: MeanfieldBarrier,
    },
    Game {
        x0: f64,
        b: Coef,
        sigma: Coef,
        pi: Coef,
        h1: Coef,
        h2: Coef,
        split: SplitRule,
        pushes: usize,
        amplitude: f64,
    },
    Uncertainty {
        harvest: Harvest,
        penalty: String,
        theta: Vec<f64>,
        theta_max: f64,
        xi_scales: Vec<f64>,
        q2: Option<Coef>,
    },
}

/// Validated scenario: common settings plus the kind-specific part.
#[derive(Debug)]
pub struct Scenario {
    pub kind: Kind,
    pub seed: u64,
    pub particles: usize,
    pub grid: TimeGrid,
    pub output: Option<String>,
    pub settings: PicardSettings,
    pub spec: Spec,
}

fn read_split(c: &Config) -> Result<SplitRule> {
    let rule = c.string_opt("game.split")?.unwrap_or_else(|| "all-to-1".into());
    let split = match rule.as_str() {
        "all-to-1" => SplitRule::AllToFirst,
        "all-to-2" => SplitRule::AllToSecond,
        "proportional" => {
            let g = c.num("game.gamma")?;
            if !(0.0..=1.0).contains(&g) {
                bail!("game.gamma must lie in [0, 1], got {g}");
            }
            SplitRule::Proportional(g)
        }
        other => bail!("game.split must be all-to-1, all-to-2 or proportional, got `{other}`"),
    };
    Ok(split)
}

impl Scenario {
    pub fn from_config(c: &Config) -> Result<Self> {
        let kind: Kind = c.string("kind")?.parse()?;
        let horizon = c.num("grid.T")?;
        if !(horizon > 0.0) {
            bail!("grid.T must be positive, got {horizon}");
        }
        let steps = c.count("grid.n", 1)? as usize;
        let grid = TimeGrid::new(horizon, steps)?;
        let particles = c.count("particles", 1)? as usize;
        let seed = c.count("seed", 0)?;
        let output = c.string_opt("output")?;
        let settings = PicardSettings {
            tol: c.num_or("solver.tol", 1e-6)?,
            max_iter: c.count_or("solver.max_iter", 1, 50)? as usize,
        };
        if !(settings.tol >= 0.0) {
            bail!("solver.tol must be nonnegative");
        }
        let spec = match kind {
            Kind::Harvesting => Spec::Harvesting {
                harvest: Harvest::read(c)?,
                pushes: c.count_or("perturbation.pushes", 1, 10)? as usize,
                amplitude: c.num_or("perturbation.amplitude", 0.1)?,
                check_tol: c.num_or("check.tol", 1e-5)?,
            },
            Kind::QuadraticCost => Spec::QuadraticCost {
                linear: Linear::read(c)?,
                h0: c.coef("cost.h0")?,
                h1: c.coef_or("cost.h1", 0.0)?,
            },
            Kind::PowerCost => {
                let linear = Linear::read(c)?;
                if !(linear.x0 > 0.0) {
                    bail!("model.x0 must be positive for power costs");
                }
                Spec::PowerCost { linear, h0: c.coef("cost.h0")?, kappa: c.num("cost.kappa")? }
            }
            Kind::CustomReflected => Spec::CustomReflected {
                linear: Linear::read(c)?,
                h0: c.coef("cost.h0")?,
                lambda: c.num_or("model.lambda", -1.0)?,
                barrier: MeanfieldBarrier::read(c)?,
            },
            Kind::Game => Spec::Game {
                x0: c.num_or("model.x0", 1.0)?,
                b: c.coef("model.b")?,
                sigma: c.coef("model.sigma")?,
                pi: c.coef("payoff.pi")?,
                h1: c.coef("cost.h1")?,
                h2: c.coef("cost.h2")?,
                split: read_split(c)?,
                pushes: c.count_or("deviation.pushes", 1, 4)? as usize,
                amplitude: c.num_or("deviation.amplitude", 0.1)?,
            },
            Kind::Uncertainty => {
                let theta_max = c.num_or("theta.max", mfsc_core::uncertainty::DEFAULT_THETA_MAX)?;
                let penalty = c.string_opt("penalty")?.unwrap_or_else(|| "quadratic".into());
                if penalty != "quadratic" && penalty != "quartic" {
                    bail!("penalty must be quadratic or quartic, got `{penalty}`");
                }
                let xi_scales = c.list_or("xi.scales", &[1.0])?;
                if let Some(s) = xi_scales.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
                    bail!("xi.scales entries must be positive, got {s}");
                }
                Spec::Uncertainty {
                    harvest: Harvest::read(c)?,
                    penalty,
                    theta: c.list("theta.values")?,
                    theta_max,
                    xi_scales,
                    q2: c.coef_opt("foc.q2")?,
                }
            }
        };
        c.finish(kind.name())?;
        Ok(Self { kind, seed, particles, grid, output, settings, spec })
    }

    /// Problem for the reflected kinds.
    pub fn control_problem(&self) -> Option<ControlProblem> {
        let (model, functional) = match &self.spec {
            Spec::Harvesting { harvest, .. } | Spec::Uncertainty { harvest, .. } => {
                (harvest.model(), harvest.functional())
            }
            Spec::QuadraticCost { linear, h0, h1 } => {
                let (a, b) = (h0.to_fn(), h1.to_fn());
                (linear.model("quadratic-cost", -1.0), linear.functional(move |t, x| a(t) * x * x + b(t) * x))
            }
            Spec::PowerCost { linear, h0, kappa } => {
                let (a, k) = (h0.to_fn(), *kappa);
                (linear.model("power-cost", -1.0), linear.functional(move |t, x| a(t) * x.powf(k)))
            }
            Spec::CustomReflected { linear, h0, lambda, .. } => {
                let a = h0.to_fn();
                (linear.model("custom-reflected", *lambda), linear.functional(move |t, _| a(t)))
            }
            Spec::Game { .. } => return None,
        };
        Some(ControlProblem { model, functional, grid: self.grid })
    }

    pub fn game(&self) -> Result<Option<GameScenario>> {
        let Spec::Game { x0, b, sigma, pi, h1, h2, .. } = &self.spec else {
            return Ok(None);
        };
        if !(*x0 > 0.0) {
            bail!("model.x0 must be positive for demand dynamics");
        }
        let one = mfsc_core::meanfield::constant(1.0);
        Ok(Some(GameScenario {
            model: ModelSpec::harvesting(*x0, b.to_fn(), sigma.to_fn(), one),
            grid: self.grid,
            pi: pi.to_path(self.grid)?,
            h1: h1.to_path(self.grid)?,
            h2: h2.to_path(self.grid)?,
        }))
    }

    pub fn penalty(&self) -> Option<PenaltySpec> {
        match &self.spec {
            Spec::Uncertainty { penalty, .. } if penalty == "quartic" => Some(PenaltySpec::quartic()),
            Spec::Uncertainty { .. } => Some(PenaltySpec::quadratic()),
            _ => None,
        }
    }

    /// Sign of the singular coefficient `λ`, used to tell which barrier a
    /// control increment belongs to.
    pub fn lambda_path(&self) -> Result<Option<Path>> {
        Ok(match &self.spec {
            Spec::Harvesting { harvest, .. } | Spec::Uncertainty { harvest, .. } => {
                Some(harvest.lambda0.to_path(self.grid)?.map(|v| -v))
            }
            Spec::QuadraticCost { .. } | Spec::PowerCost { .. } => Some(Path::constant(self.grid, -1.0)),
            Spec::CustomReflected { lambda, .. } => Some(Path::constant(self.grid, *lambda)),
            Spec::Game { .. } => None,
        })
    }

    /// Whether every control path must be nondecreasing.
    pub fn monotone_controls(&self) -> bool {
        matches!(self.spec, Spec::Harvesting { .. } | Spec::Game { .. } | Spec::Uncertainty { .. })
    }
}

/// `count` unit pushes `1{t ≥ s}` at `s = jT/count`, `j = 0..count`.
pub fn push_family(grid: TimeGrid, count: usize, amplitude: f64) -> Result<PerturbationFamily> {
    let directions = (0..count)
        .map(|j| {
            let s = grid.horizon() * j as f64 / count as f64;
            let k0 = grid.node_at_or_before(s);
            let path = Path::new(grid, (0..grid.len()).map(|k| if k >= k0 { 1.0 } else { 0.0 }).collect())?;
            Ok((format!("push{j}"), Direction::Common(path)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PerturbationFamily::new(directions, vec![amplitude])?)
}

/// Pushes plus a proportional cut of the player's own strategy.
pub fn deviation_family(grid: TimeGrid, count: usize, amplitude: f64) -> Result<PerturbationFamily> {
    let mut family = push_family(grid, count, amplitude)?;
    family.directions.push(("cut".into(), Direction::ScaledBase(-1.0)));
    Ok(family)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::Path as FsPath;

    fn scenario(text: &str) -> Result<Scenario> {
        Scenario::from_config(&Config::parse(text, "s.conf", FsPath::new("."))?)
    }

    const HARVEST: &str = "kind = \"harvesting\"\nseed = 1\nparticles = 10\ngrid.T = 1\ngrid.n = 20\n\
        model.b = 1\nmodel.sigma = 0.2\nmodel.lambda0 = 1\ncost.h0 = 1\ncost.K = 1\n";

    #[test]
    fn harvesting_reads_defaults() {
        let s = scenario(HARVEST).unwrap();
        assert_eq!(s.kind, Kind::Harvesting);
        assert_eq!(s.settings, PicardSettings::default());
        assert!(matches!(s.spec, Spec::Harvesting { pushes: 10, .. }));
        assert!(s.monotone_controls());
    }

    #[test]
    fn missing_cost_is_named() {
        let err = scenario(&HARVEST.replace("cost.h0 = 1\n", "")).unwrap_err().to_string();
        assert!(err.contains("`cost.h0`"), "{err}");
    }

    #[test]
    fn unknown_kind_and_stray_keys() {
        let err = scenario(&HARVEST.replace("harvesting", "fishing")).unwrap_err().to_string();
        assert!(err.contains("fishing"), "{err}");
        let err = scenario(&format!("{HARVEST}cost.h1 = 2\n")).unwrap_err().to_string();
        assert!(err.contains("unknown key `cost.h1`"), "{err}");
    }

    #[test]
    fn custom_barrier_kappa_must_cover_sensitivity() {
        let text = "kind = \"custom-reflected\"\nseed = 1\nparticles = 4\ngrid.T = 1\ngrid.n = 10\n\
            model.x0 = 0\npayoff.K = 1\ncost.h0 = 1\nbarrier.upper = 1\nbarrier.upper_meanfield = 0.2\n";
        assert!(scenario(&format!("{text}barrier.kappa = 0.1\n")).is_err());
        let s = scenario(&format!("{text}barrier.kappa = 0.2\n")).unwrap();
        let Spec::CustomReflected { barrier, .. } = &s.spec else { panic!() };
        let rule = barrier.rule(s.grid).unwrap();
        let BarrierRule::Custom { rule, .. } = rule else { panic!() };
        assert_eq!(rule(0, &[0.0], &[1.0], &[0.0]), (f64::NEG_INFINITY, 1.2));
    }

    #[test]
    fn push_family_positions() {
        let g = TimeGrid::new(1.0, 8).unwrap();
        let fam = push_family(g, 4, 0.1).unwrap();
        let Direction::Common(p) = &fam.directions[2].1 else { panic!() };
        assert_eq!(p.values(), &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
        assert_eq!(deviation_family(g, 4, 0.1).unwrap().directions.len(), 5);
    }
}
