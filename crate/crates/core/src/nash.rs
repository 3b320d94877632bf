//! Two-producer capacity game on an uncontrolled demand path.
//!
//! Player `i` earns `E[∫ π min(X, ξ₁ + ξ₂) dt + ∫ hᵢ dξᵢ]`. On intervals
//! where the signs of `π + h₁` and `π + h₂` are fixed, an equilibrium is
//! built pathwise: nobody invests where both margins are negative, the
//! profitable player tops capacity up to demand where only one margin is
//! nonnegative, and the total tracks the running maximum of demand (split
//! by a fixed rule) where both are.

use std::fmt;
use std::io::{self, Write};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::meanfield::{simulate_ensemble, ControlPolicy, Ensemble, Estimate, ModelSpec};
use crate::optimality::{check_admissible, perturbed, PerturbationFamily};
use crate::paths::{ensure_same_grid, fmt_f64, integrate_dxi, MonotonePath, Path, TimeGrid};
use crate::report::{Check, CheckReport};
use crate::skorohod::Worst;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sign {
    Negative,
    NonNegative,
}

impl Sign {
    /// Zero counts as nonnegative.
    pub fn of(v: f64) -> Self {
        if v < 0.0 {
            Sign::Negative
        } else {
            Sign::NonNegative
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CaseLabel {
    /// Both margins negative: nobody invests.
    I,
    /// Only player 2's margin is nonnegative.
    IIa,
    /// Only player 1's margin is nonnegative.
    IIb,
    /// Both margins nonnegative.
    III,
}

impl CaseLabel {
    pub fn from_signs(s1: Sign, s2: Sign) -> Self {
        match (s1, s2) {
            (Sign::Negative, Sign::Negative) => CaseLabel::I,
            (Sign::Negative, Sign::NonNegative) => CaseLabel::IIa,
            (Sign::NonNegative, Sign::Negative) => CaseLabel::IIb,
            (Sign::NonNegative, Sign::NonNegative) => CaseLabel::III,
        }
    }
}

impl fmt::Display for CaseLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CaseLabel::I => "i",
            CaseLabel::IIa => "ii-a",
            CaseLabel::IIb => "ii-b",
            CaseLabel::III => "iii",
        })
    }
}

/// Nodes `start..=end` share one sign pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Interval {
    pub start: usize,
    pub end: usize,
    pub signs: (Sign, Sign),
}

impl Interval {
    pub fn label(&self) -> CaseLabel {
        CaseLabel::from_signs(self.signs.0, self.signs.1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SignPartition {
    pub grid: TimeGrid,
    pub intervals: Vec<Interval>,
}

impl SignPartition {
    /// Interval start times after `t = 0`.
    pub fn breakpoints(&self) -> Vec<f64> {
        self.intervals.iter().skip(1).map(|i| self.grid.time(i.start)).collect()
    }

    pub fn label_at(&self, k: usize) -> CaseLabel {
        self.intervals
            .iter()
            .find(|i| i.start <= k && k <= i.end)
            .map(Interval::label)
            .expect("partition covers the grid")
    }
}

/// Maximal runs of nodes with constant `(sign(π + h₁), sign(π + h₂))`.
pub fn sign_partition(pi: &Path, h1: &Path, h2: &Path) -> Result<SignPartition> {
    ensure_same_grid(pi, h1)?;
    ensure_same_grid(pi, h2)?;
    let signs: Vec<(Sign, Sign)> = (0..pi.values().len())
        .map(|k| (Sign::of(pi.get(k) + h1.get(k)), Sign::of(pi.get(k) + h2.get(k))))
        .collect();
    let mut intervals: Vec<Interval> = Vec::new();
    for (k, &s) in signs.iter().enumerate() {
        match intervals.last_mut() {
            Some(last) if last.signs == s => last.end = k,
            _ => intervals.push(Interval { start: k, end: k, signs: s }),
        }
    }
    Ok(SignPartition { grid: pi.grid(), intervals })
}

/// How case-iii capacity increments are divided between the players.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SplitRule {
    AllToFirst,
    AllToSecond,
    /// Fraction `γ ∈ [0, 1]` to player 1.
    Proportional(f64),
}

impl SplitRule {
    pub fn first_share(&self) -> f64 {
        match self {
            SplitRule::AllToFirst => 1.0,
            SplitRule::AllToSecond => 0.0,
            SplitRule::Proportional(g) => *g,
        }
    }

    fn validate(&self) -> Result<()> {
        let g = self.first_share();
        if (0.0..=1.0).contains(&g) {
            Ok(())
        } else {
            Err(Error::invalid(format!("split fraction {g} is outside [0, 1]")))
        }
    }
}

impl fmt::Display for SplitRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SplitRule::AllToFirst => f.write_str("all-to-1"),
            SplitRule::AllToSecond => f.write_str("all-to-2"),
            SplitRule::Proportional(g) => write!(f, "proportional({g})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StrategyPair {
    pub xi1: MonotonePath,
    pub xi2: MonotonePath,
    /// Case label per interval of the partition.
    pub labels: Vec<CaseLabel>,
    /// Intervals (by index) where the carried-over capacity exceeded the
    /// interval's own formula somewhere.
    pub max_binds: Vec<usize>,
    pub split: SplitRule,
}

impl StrategyPair {
    pub fn total(&self) -> Vec<f64> {
        self.xi1.values().iter().zip(self.xi2.values()).map(|(a, b)| a + b).collect()
    }
}

/// Build the equilibrium pair along one demand path.
///
/// Capacities are carried continuously across interval boundaries; in the
/// active cases the interval formula is combined with the carried value by
/// a maximum so strategies never decrease.
pub fn nash_construct(x: &Path, partition: &SignPartition, split: SplitRule) -> Result<StrategyPair> {
    split.validate()?;
    if x.grid() != partition.grid {
        return Err(Error::invalid("demand path and partition use different grids"));
    }
    let gamma = split.first_share();
    let xv = x.values();
    let len = xv.len();
    let (mut xi1, mut xi2) = (Vec::with_capacity(len), Vec::with_capacity(len));
    let (mut c1, mut c2) = (0.0f64, 0.0f64);
    let mut max_binds = Vec::new();
    let mut labels = Vec::with_capacity(partition.intervals.len());

    for (idx, iv) in partition.intervals.iter().enumerate() {
        let label = iv.label();
        labels.push(label);
        let mut binds = false;
        match label {
            CaseLabel::I => {
                for _ in iv.start..=iv.end {
                    xi1.push(c1);
                    xi2.push(c2);
                }
            }
            CaseLabel::IIa | CaseLabel::IIb => {
                // the acting player tops up to demand minus the other's frozen capacity
                let (fixed, carried) = if label == CaseLabel::IIa { (c1, c2) } else { (c2, c1) };
                let mut sup = 0.0f64;
                let mut acting = carried;
                for k in iv.start..=iv.end {
                    sup = sup.max((xv[k] - fixed).max(0.0));
                    binds |= carried > sup;
                    acting = carried.max(sup);
                    if label == CaseLabel::IIa {
                        xi1.push(fixed);
                        xi2.push(acting);
                    } else {
                        xi1.push(acting);
                        xi2.push(fixed);
                    }
                }
                if label == CaseLabel::IIa {
                    c2 = acting;
                } else {
                    c1 = acting;
                }
            }
            CaseLabel::III => {
                let carried = c1 + c2;
                let mut sup = 0.0f64;
                let (mut n1, mut n2) = (c1, c2);
                for k in iv.start..=iv.end {
                    sup = sup.max(xv[k].max(0.0));
                    binds |= carried > sup;
                    let added = carried.max(sup) - carried;
                    n1 = c1 + gamma * added;
                    n2 = c2 + (1.0 - gamma) * added;
                    xi1.push(n1);
                    xi2.push(n2);
                }
                c1 = n1;
                c2 = n2;
            }
        }
        if binds {
            max_binds.push(idx);
        }
    }
    let grid = x.grid();
    Ok(StrategyPair {
        xi1: MonotonePath::new(Path::new(grid, xi1)?)?,
        xi2: MonotonePath::new(Path::new(grid, xi2)?)?,
        labels,
        max_binds,
        split,
    })
}

/// Structural checks on one pair: monotonicity, the case-iii running-max
/// identity, no investment by players with a negative margin, and
/// complementarity `[ξ − X] dξ = 0` (relative to `1 + sup|X|`) where capacity is added.
pub fn check_pair(x: &Path, partition: &SignPartition, pair: &StrategyPair, tol: f64) -> CheckReport {
    let xv = x.values();
    let (a, b) = (pair.xi1.values(), pair.xi2.values());
    let scale = 1.0 + x.sup_abs();
    let mut monotone = Worst::default();
    let mut identity = Worst::default();
    let mut complementarity = Worst::default();
    let mut inactive = Worst::default();
    let (mut prev1, mut prev2) = (0.0, 0.0);
    for iv in &partition.intervals {
        let label = iv.label();
        let carried = prev1 + prev2;
        let mut sup = 0.0f64;
        for k in iv.start..=iv.end {
            let (d1, d2) = (a[k] - prev1, b[k] - prev2);
            monotone.observe(k, (-d1).max(-d2).max(0.0));
            let total = a[k] + b[k];
            match label {
                CaseLabel::I => inactive.observe(k, d1.abs().max(d2.abs())),
                CaseLabel::IIa => inactive.observe(k, d1.abs()),
                CaseLabel::IIb => inactive.observe(k, d2.abs()),
                CaseLabel::III => {
                    sup = sup.max(xv[k].max(0.0));
                    identity.observe(k, (total - carried.max(sup)).abs());
                }
            }
            if d1 > 0.0 || d2 > 0.0 {
                complementarity.observe(k, (total - xv[k]).abs() / scale);
            }
            prev1 = a[k];
            prev2 = b[k];
        }
    }
    let mut report = CheckReport::new();
    report.push(monotone.into_check("monotone", 0.0));
    report.push(identity.into_check("case_iii_identity", 0.0));
    report.push(inactive.into_check("inactive_player", 0.0));
    report.push(complementarity.into_check("complementarity", tol));
    report
}

/// Demand dynamics, prices and unit costs of the game.
#[derive(Debug, Clone)]
pub struct GameScenario {
    pub model: ModelSpec,
    pub grid: TimeGrid,
    pub pi: Path,
    pub h1: Path,
    pub h2: Path,
}

impl GameScenario {
    pub fn partition(&self) -> Result<SignPartition> {
        sign_partition(&self.pi, &self.h1, &self.h2)
    }

    pub fn simulate(&self, particles: usize, seed: u64) -> Result<Ensemble> {
        simulate_ensemble(&self.model, &ControlPolicy::Zero, self.grid, particles, seed)
    }

    /// `∫ π min(X, ξ₁ + ξ₂) dt + ∫ hᵢ dξᵢ` for player `i ∈ {1, 2}`.
    pub fn payoff(&self, player: usize, x: &Path, xi1: &Path, xi2: &Path) -> f64 {
        let dt = self.grid.dt();
        let n = self.grid.steps();
        let mut revenue = 0.0;
        for k in 0..n {
            revenue += self.pi.get(k) * x.get(k).min(xi1.get(k) + xi2.get(k)) * dt;
        }
        let (h, own) = if player == 1 { (&self.h1, xi1) } else { (&self.h2, xi2) };
        revenue + integrate_dxi(h.values(), h.get(0), own.values())
    }
}

/// Write `t, X, ξ₁, ξ₂, case` for one path.
pub fn write_strategy_csv<W: Write>(
    out: &mut W,
    x: &Path,
    partition: &SignPartition,
    pair: &StrategyPair,
) -> io::Result<()> {
    writeln!(out, "t,X,xi1,xi2,case")?;
    let grid = x.grid();
    for k in 0..grid.len() {
        writeln!(
            out,
            "{},{},{},{},{}",
            fmt_f64(grid.time(k)),
            fmt_f64(x.get(k)),
            fmt_f64(pair.xi1.values()[k]),
            fmt_f64(pair.xi2.values()[k]),
            partition.label_at(k)
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct NashOutcome {
    pub ensemble: Ensemble,
    pub partition: SignPartition,
    pub pairs: Vec<StrategyPair>,
    pub values: [Estimate; 2],
    /// `deltas[player][direction][amplitude]`.
    pub deltas: [Vec<Vec<Estimate>>; 2],
    pub report: CheckReport,
}

/// Build the pair on every simulated path and test unilateral deviations:
/// each `ΔJᵢ` must stay below `2·SE`.
pub fn nash_verify(
    scenario: &GameScenario,
    split: SplitRule,
    deviations: [&PerturbationFamily; 2],
    particles: usize,
    seed: u64,
) -> Result<NashOutcome> {
    let ens = scenario.simulate(particles, seed)?;
    let partition = scenario.partition()?;
    let pairs: Vec<StrategyPair> = ens
        .states
        .par_iter()
        .map(|x| nash_construct(x, &partition, split))
        .collect::<Result<_>>()?;

    let mut report = CheckReport::new();
    let structural: Vec<CheckReport> = ens
        .states
        .par_iter()
        .zip(&pairs)
        .map(|(x, p)| check_pair(x, &partition, p, 1e-9))
        .collect();
    report.extend(crate::reflected::merge_worst(structural).scoped("construction"));

    let xi1: Vec<Path> = pairs.iter().map(|p| p.xi1.path().clone()).collect();
    let xi2: Vec<Path> = pairs.iter().map(|p| p.xi2.path().clone()).collect();
    let dev = nash_deviations(scenario, &ens.states, [&xi1, &xi2], deviations)?;
    report.extend(dev.report);
    Ok(NashOutcome { ensemble: ens, partition, pairs, values: dev.values, deltas: dev.deltas, report })
}

/// Payoffs and unilateral deviation estimates for given strategy paths.
#[derive(Debug, Clone)]
pub struct DeviationOutcome {
    pub values: [Estimate; 2],
    /// `deltas[player][direction][amplitude]`.
    pub deltas: [Vec<Vec<Estimate>>; 2],
    pub report: CheckReport,
}

/// Deviation checks `player{i}.{direction}.a={a}` on fixed demand paths.
pub fn nash_deviations(
    scenario: &GameScenario,
    states: &[Path],
    controls: [&[Path]; 2],
    deviations: [&PerturbationFamily; 2],
) -> Result<DeviationOutcome> {
    if controls.iter().any(|c| c.len() != states.len()) {
        return Err(Error::invalid("one strategy path per demand path is required"));
    }
    let mut report = CheckReport::new();
    let mut values = [Estimate { mean: 0.0, se: 0.0 }; 2];
    let mut deltas: [Vec<Vec<Estimate>>; 2] = [Vec::new(), Vec::new()];
    for player in [1usize, 2] {
        let family = deviations[player - 1];
        let own = controls[player - 1];
        check_admissible(own, family)
            .map_err(|e| Error::invalid(format!("player {player}: {e}")))?;
        let base: Vec<f64> = states
            .par_iter()
            .enumerate()
            .map(|(i, x)| scenario.payoff(player, x, &controls[0][i], &controls[1][i]))
            .collect();
        values[player - 1] = Estimate::from_samples(&base)?;
        for (name, dir) in &family.directions {
            let mut row = Vec::with_capacity(family.amplitudes.len());
            for &a in &family.amplitudes {
                let diffs: Vec<f64> = states
                    .par_iter()
                    .enumerate()
                    .zip(&base)
                    .map(|((i, x), b)| {
                        let (c1, c2) = (&controls[0][i], &controls[1][i]);
                        let (xi1, xi2) = if player == 1 {
                            (perturbed(c1, dir, a)?, c2.clone())
                        } else {
                            (c1.clone(), perturbed(c2, dir, a)?)
                        };
                        Ok(scenario.payoff(player, x, &xi1, &xi2) - b)
                    })
                    .collect::<Result<_>>()?;
                let est = Estimate::from_samples(&diffs)?;
                report.push(Check::against(
                    format!("player{player}.{name}.a={a}"),
                    est.mean,
                    2.0 * est.se,
                    Some(format!("ΔJ = {est}")),
                ));
                row.push(est);
            }
            deltas[player - 1].push(row);
        }
    }
    Ok(DeviationOutcome { values, deltas, report })
}
