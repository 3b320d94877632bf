//! Two-sided Skorohod reflection on a grid.
//!
//! Given a driver `ψ` and barriers `l < r`, find `(Z, η)` with `Z = ψ − η`,
//! `l ≤ Z ≤ r`, and `η` increasing only while `Z` sits on `r` and decreasing
//! only while `Z` sits on `l`. [`skorohod_map`] evaluates the explicit
//! max/sup/inf representation of the regulator,
//!
//! ```text
//! η(t) = max{ (ψ(0) − r(0))⁺ ∧ inf_{u≤t} (ψ(u) − l(u)),
//!             sup_{s≤t} [ (ψ(s) − r(s)) ∧ inf_{s≤u≤t} (ψ(u) − l(u)) ] }
//! ```
//!
//! with extrema over grid nodes, in one forward pass. [`clamp_oracle`] is an
//! independent step-by-step projection used to cross-check it.

use std::io::{self, Write};

use crate::error::{Error, Result};
use crate::paths::{ensure_same_grid, fmt_f64, MonotonePath, Path, TimeGrid};
use crate::report::{Check, CheckReport};

/// Lower/upper barrier paths; `−∞`/`+∞` sentinels mark a missing side.
#[derive(Debug, Clone, PartialEq)]
pub struct BarrierPair {
    lower: Path,
    upper: Path,
}

impl BarrierPair {
    pub fn new(lower: Path, upper: Path) -> Result<Self> {
        ensure_same_grid(&lower, &upper)?;
        for (k, (&l, &r)) in lower.values().iter().zip(upper.values()).enumerate() {
            if l == f64::NEG_INFINITY && r == f64::INFINITY {
                return Err(Error::InvalidBarrier {
                    node: k,
                    reason: "both barriers are infinite".into(),
                });
            }
            if l >= r {
                return Err(Error::InvalidBarrier {
                    node: k,
                    reason: format!("lower barrier {l} is not below upper barrier {r}"),
                });
            }
        }
        Ok(Self { lower, upper })
    }

    pub fn upper_only(upper: Path) -> Result<Self> {
        let lower = Path::constant(upper.grid(), f64::NEG_INFINITY);
        Self::new(lower, upper)
    }

    pub fn lower_only(lower: Path) -> Result<Self> {
        let upper = Path::constant(lower.grid(), f64::INFINITY);
        Self::new(lower, upper)
    }

    pub fn constant(grid: TimeGrid, lower: f64, upper: f64) -> Result<Self> {
        Self::new(Path::constant(grid, lower), Path::constant(grid, upper))
    }

    pub fn lower(&self) -> &Path {
        &self.lower
    }

    pub fn upper(&self) -> &Path {
        &self.upper
    }

    pub fn grid(&self) -> TimeGrid {
        self.lower.grid()
    }
}

/// Output of the reflection map.
#[derive(Debug, Clone, PartialEq)]
pub struct SkorohodSolution {
    pub psi: Path,
    pub z: Path,
    pub eta: Path,
    /// Total upward regulation (pushes off the upper barrier).
    pub eta_plus: MonotonePath,
    /// Total downward regulation (pushes off the lower barrier).
    pub eta_minus: MonotonePath,
}

impl SkorohodSolution {
    /// Build from a driver, constrained path and regulator; the Jordan
    /// decomposition is taken from the increments of `eta`.
    pub fn from_parts(psi: Path, z: Path, eta: Path) -> Result<Self> {
        ensure_same_grid(&psi, &z)?;
        ensure_same_grid(&psi, &eta)?;
        Self::assemble(psi, z.into_values(), eta.into_values())
    }

    fn assemble(psi: Path, z: Vec<f64>, eta: Vec<f64>) -> Result<Self> {
        let grid = psi.grid();
        let eta = Path::new(grid, eta)?;
        let (mut up, mut down) = (Vec::with_capacity(grid.len()), Vec::with_capacity(grid.len()));
        let (mut acc_up, mut acc_down) = (0.0, 0.0);
        for d in eta.increments() {
            if d > 0.0 {
                acc_up += d;
            } else if d < 0.0 {
                acc_down -= d;
            }
            up.push(acc_up);
            down.push(acc_down);
        }
        Ok(Self {
            z: Path::new(grid, z)?,
            eta,
            eta_plus: MonotonePath::new(Path::new(grid, up)?)?,
            eta_minus: MonotonePath::new(Path::new(grid, down)?)?,
            psi,
        })
    }

    /// CSV columns `t,psi,l,r,Z,eta`.
    pub fn write_csv<W: Write>(&self, barriers: &BarrierPair, out: &mut W) -> io::Result<()> {
        writeln!(out, "t,psi,l,r,Z,eta")?;
        let grid = self.psi.grid();
        for k in 0..grid.len() {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                fmt_f64(grid.time(k)),
                fmt_f64(self.psi.get(k)),
                fmt_f64(barriers.lower.get(k)),
                fmt_f64(barriers.upper.get(k)),
                fmt_f64(self.z.get(k)),
                fmt_f64(self.eta.get(k)),
            )?;
        }
        Ok(())
    }
}

fn check_inputs(barriers: &BarrierPair, psi: &Path) -> Result<()> {
    ensure_same_grid(barriers.lower(), psi)?;
    if let Some(k) = psi.values().iter().position(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("driver is not finite at node {k}")));
    }
    Ok(())
}

/// Regulator from the explicit Ξ representation, O(n).
///
/// With `a = ψ − l` and `c = ψ − r` the inner supremum obeys
/// `B_k = max(min(B_{k−1}, a_k), min(c_k, a_k))`, and the first term is a
/// running minimum of `a` capped by `c_0⁺`.
pub(crate) fn regulator(lower: &[f64], upper: &[f64], psi: &[f64]) -> Vec<f64> {
    let mut eta = Vec::with_capacity(psi.len());
    let first_cap = (psi[0] - upper[0]).max(0.0);
    let mut running_min_a = f64::INFINITY;
    let mut inner = f64::NEG_INFINITY;
    for k in 0..psi.len() {
        let a = psi[k] - lower[k];
        let c = psi[k] - upper[k];
        running_min_a = running_min_a.min(a);
        inner = inner.min(a).max(c.min(a));
        eta.push(first_cap.min(running_min_a).max(inner));
    }
    eta
}

/// The reflection map `ψ ↦ (Z, η)` with `η = Ξ(l, r, ψ)`.
pub fn skorohod_map(barriers: &BarrierPair, psi: &Path) -> Result<SkorohodSolution> {
    check_inputs(barriers, psi)?;
    let eta = regulator(barriers.lower.values(), barriers.upper.values(), psi.values());
    let z = psi.values().iter().zip(&eta).map(|(p, e)| p - e).collect();
    SkorohodSolution::assemble(psi.clone(), z, eta)
}

/// Minimal-push projection, one node at a time:
/// `Z_k = clamp(Z_{k−1} + Δψ_k, l_k, r_k)`.
pub fn clamp_oracle(barriers: &BarrierPair, psi: &Path) -> Result<SkorohodSolution> {
    check_inputs(barriers, psi)?;
    let (l, r, p) = (barriers.lower.values(), barriers.upper.values(), psi.values());
    let mut z = Vec::with_capacity(p.len());
    let mut eta = Vec::with_capacity(p.len());
    let z0 = p[0].max(l[0]).min(r[0]);
    z.push(z0);
    eta.push(p[0] - z0);
    for k in 1..p.len() {
        let free = z[k - 1] + (p[k] - p[k - 1]);
        let zk = free.max(l[k]).min(r[k]);
        eta.push(eta[k - 1] + (free - zk));
        z.push(zk);
    }
    SkorohodSolution::assemble(psi.clone(), z, eta)
}

/// Default checker tolerance `1e-9 · (1 + sup|ψ|)`.
pub fn default_tolerance(psi: &Path) -> f64 {
    1e-9 * (1.0 + psi.sup_abs())
}

/// Constraint, additivity and complementarity of a candidate solution.
///
/// Complementarity is checked on per-node increments of `η`.
pub fn check_skorohod(sol: &SkorohodSolution, barriers: &BarrierPair, tol: f64) -> CheckReport {
    let (l, r) = (barriers.lower.values(), barriers.upper.values());
    let (z, psi, eta) = (sol.z.values(), sol.psi.values(), sol.eta.values());

    let mut constraint = Worst::default();
    let mut additivity = Worst::default();
    let mut complementarity = Worst::default();
    let mut prev_eta = 0.0;
    for k in 0..z.len() {
        constraint.observe(k, (l[k] - z[k]).max(z[k] - r[k]).max(0.0));
        additivity.observe(k, (z[k] - (psi[k] - eta[k])).abs());
        let d = eta[k] - prev_eta;
        prev_eta = eta[k];
        if d > 0.0 {
            complementarity.observe(k, (z[k] - r[k]).abs());
        } else if d < 0.0 {
            complementarity.observe(k, (z[k] - l[k]).abs());
        }
    }

    let mut report = CheckReport::new();
    report.push(constraint.into_check("constraint", tol));
    report.push(additivity.into_check("additivity", tol));
    report.push(complementarity.into_check("complementarity", tol));
    report
}

#[derive(Default)]
pub(crate) struct Worst {
    value: f64,
    at: Option<usize>,
}

impl Worst {
    pub(crate) fn observe(&mut self, k: usize, v: f64) {
        // NaN counts as the worst possible violation
        let v = if v.is_nan() { f64::INFINITY } else { v };
        if v > self.value || (self.at.is_none() && v > 0.0) {
            self.value = v;
            self.at = Some(k);
        }
    }

    pub(crate) fn into_check(self, name: &str, tol: f64) -> Check {
        Check::against(
            name,
            self.value,
            tol,
            self.at.map(|k| format!("node {k}")),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::paths::sup_distance;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Literal O(n²) evaluation of the Ξ formula.
    fn xi_brute_force(l: &[f64], r: &[f64], psi: &[f64]) -> Vec<f64> {
        (0..psi.len())
            .map(|t| {
                let inf_a = |from: usize| {
                    (from..=t)
                        .map(|u| psi[u] - l[u])
                        .fold(f64::INFINITY, f64::min)
                };
                let first = (psi[0] - r[0]).max(0.0).min(inf_a(0));
                let second = (0..=t)
                    .map(|s| (psi[s] - r[s]).min(inf_a(s)))
                    .fold(f64::NEG_INFINITY, f64::max);
                first.max(second)
            })
            .collect()
    }

    fn grid(n: usize) -> TimeGrid {
        TimeGrid::new(1.0, n).unwrap()
    }

    #[test]
    fn inactive_barrier_leaves_driver_alone() {
        let g = grid(100);
        let b = BarrierPair::lower_only(Path::zeros(g)).unwrap();
        let psi = Path::from_fn(g, |t| t);
        let sol = skorohod_map(&b, &psi).unwrap();
        assert!(sol.eta.values().iter().all(|&e| e == 0.0));
        assert_eq!(sol.z, psi);
    }

    #[test]
    fn lower_reflection_of_decreasing_driver() {
        let g = grid(100);
        let b = BarrierPair::lower_only(Path::zeros(g)).unwrap();
        let psi = Path::from_fn(g, |t| -t);
        let sol = skorohod_map(&b, &psi).unwrap();
        for k in 0..g.len() {
            assert!((sol.eta.get(k) + g.time(k)).abs() <= 1e-15);
            assert!(sol.z.get(k).abs() <= 1e-15);
        }
        assert_eq!(sol.eta_plus.values().last(), Some(&0.0));
        assert!((sol.eta_minus.values().last().unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn two_sided_reflection_of_ramp() {
        let g = grid(64);
        let b = BarrierPair::constant(g, 0.0, 1.0).unwrap();
        let psi = Path::from_fn(g, |t| 2.0 * t);
        for sol in [skorohod_map(&b, &psi).unwrap(), clamp_oracle(&b, &psi).unwrap()] {
            for k in 0..g.len() {
                let t = g.time(k);
                assert!((sol.z.get(k) - (2.0 * t).min(1.0)).abs() <= 1e-12);
                assert!((sol.eta.get(k) - (2.0 * t - 1.0).max(0.0)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn clamp_oracle_inactive_case() {
        let g = grid(10);
        let b = BarrierPair::lower_only(Path::zeros(g)).unwrap();
        let psi = Path::from_fn(g, |t| t);
        let sol = clamp_oracle(&b, &psi).unwrap();
        assert_eq!(sol.z, psi);
        assert!(sol.eta.values().iter().all(|&e| e == 0.0));
    }

    #[test]
    fn initial_jump_above_upper_barrier() {
        let g = grid(4);
        let b = BarrierPair::upper_only(Path::constant(g, 1.0)).unwrap();
        let psi = Path::constant(g, 2.0);
        let sol = skorohod_map(&b, &psi).unwrap();
        assert_eq!(sol.z.values(), &[1.0; 5]);
        assert_eq!(sol.eta.values(), &[1.0; 5]);
        assert_eq!(sol.eta_plus.values(), &[1.0; 5]);
    }

    #[test]
    fn invalid_barriers_are_rejected() {
        let g = grid(3);
        let err = BarrierPair::new(
            Path::new(g, vec![0.0, 0.0, 1.0, 0.0]).unwrap(),
            Path::constant(g, 1.0),
        )
        .unwrap_err();
        assert_eq!(
            err,
            Error::InvalidBarrier {
                node: 2,
                reason: "lower barrier 1 is not below upper barrier 1".into()
            }
        );
        assert!(matches!(
            BarrierPair::constant(g, f64::NEG_INFINITY, f64::INFINITY),
            Err(Error::InvalidBarrier { node: 0, .. })
        ));
    }

    #[test]
    fn checker_accepts_map_output() {
        let g = grid(50);
        let b = BarrierPair::new(
            Path::from_fn(g, |t| -0.5 + 0.2 * t),
            Path::from_fn(g, |t| 0.5 + 0.3 * (5.0 * t).sin()),
        )
        .unwrap();
        let psi = Path::from_fn(g, |t| 3.0 * (9.0 * t).sin());
        let sol = skorohod_map(&b, &psi).unwrap();
        let report = check_skorohod(&sol, &b, default_tolerance(&psi));
        assert!(report.verdict(), "{report}");
    }

    #[test]
    fn checker_flags_constraint_violation() {
        let g = grid(10);
        let b = BarrierPair::constant(g, 0.0, 1.0).unwrap();
        let psi = Path::from_fn(g, |t| 2.0 * t);
        let mut sol = skorohod_map(&b, &psi).unwrap();
        let mut z = sol.z.clone().into_values();
        z[7] += 0.25;
        sol.z = Path::new(g, z).unwrap();
        let report = check_skorohod(&sol, &b, 1e-9);
        let c = report.get("constraint").unwrap();
        assert!(!c.passed);
        assert_eq!(c.location.as_deref(), Some("node 7"));
        assert!((c.violation - 0.25).abs() < 1e-12);
    }

    #[test]
    fn checker_flags_regulator_moving_in_interior() {
        let g = grid(10);
        let b = BarrierPair::constant(g, -1.0, 1.0).unwrap();
        let psi = Path::zeros(g);
        let mut sol = skorohod_map(&b, &psi).unwrap();
        let mut eta = sol.eta.clone().into_values();
        let mut z = sol.z.clone().into_values();
        for k in 4..eta.len() {
            eta[k] += 0.1;
            z[k] -= 0.1;
        }
        sol.eta = Path::new(g, eta).unwrap();
        sol.z = Path::new(g, z).unwrap();
        let report = check_skorohod(&sol, &b, 1e-9);
        assert!(report.get("constraint").unwrap().passed);
        assert!(report.get("additivity").unwrap().passed);
        let c = report.get("complementarity").unwrap();
        assert!(!c.passed);
        assert_eq!(c.location.as_deref(), Some("node 4"));
    }

    fn random_driver(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        // piecewise-linear with a handful of random knots
        let knots = rng.random_range(2..8usize);
        let kv: Vec<f64> = (0..=knots).map(|_| rng.random_range(-3.0..3.0)).collect();
        (0..=n)
            .map(|k| {
                let x = k as f64 / n as f64 * knots as f64;
                let i = (x.floor() as usize).min(knots - 1);
                let w = x - i as f64;
                kv[i] * (1.0 - w) + kv[i + 1] * w
            })
            .collect()
    }

    #[test]
    fn recursion_matches_brute_force_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let n = rng.random_range(1..40usize);
            let l: Vec<f64> = (0..=n).map(|_| rng.random_range(-2.0..0.0)).collect();
            let r: Vec<f64> = l.iter().map(|v| v + rng.random_range(0.05..2.0)).collect();
            let psi: Vec<f64> = (0..=n).map(|_| rng.random_range(-4.0..4.0)).collect();
            let fast = regulator(&l, &r, &psi);
            let slow = xi_brute_force(&l, &r, &psi);
            for (a, b) in fast.iter().zip(&slow) {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn recursion_matches_brute_force_with_sentinels() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..100 {
            let n = rng.random_range(1..30usize);
            let upper_side = rng.random_bool(0.5);
            let bar: Vec<f64> = (0..=n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let inf: Vec<f64> = vec![if upper_side { f64::NEG_INFINITY } else { f64::INFINITY }; n + 1];
            let (l, r) = if upper_side { (inf, bar) } else { (bar, inf) };
            let psi: Vec<f64> = (0..=n).map(|_| rng.random_range(-3.0..3.0)).collect();
            assert_eq!(regulator(&l, &r, &psi), xi_brute_force(&l, &r, &psi));
        }
    }

    #[test]
    fn oracle_equivalence_on_random_drivers() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let n = rng.random_range(10..200usize);
            let g = grid(n);
            let lo = rng.random_range(-2.0..0.5);
            let hi = lo + rng.random_range(0.01..3.0);
            let b = BarrierPair::constant(g, lo, hi).unwrap();
            let psi = Path::new(g, random_driver(&mut rng, n)).unwrap();
            let a = skorohod_map(&b, &psi).unwrap();
            let o = clamp_oracle(&b, &psi).unwrap();
            assert!(sup_distance(&a.z, &o.z).unwrap() <= 1e-9);
        }
    }

    proptest! {
        #[test]
        fn lower_regulator_is_antitone_in_driver(
            base in prop::collection::vec(-3.0..3.0f64, 21),
            bump in prop::collection::vec(0.0..2.0f64, 21),
        ) {
            let g = grid(20);
            let b = BarrierPair::lower_only(Path::constant(g, -0.5)).unwrap();
            let lo = Path::new(g, base.clone()).unwrap();
            let hi = Path::new(g, base.iter().zip(&bump).map(|(a, d)| a + d).collect()).unwrap();
            let e1 = skorohod_map(&b, &lo).unwrap().eta_minus;
            let e2 = skorohod_map(&b, &hi).unwrap().eta_minus;
            for k in 0..g.len() {
                prop_assert!(e2.values()[k] <= e1.values()[k] + 1e-12);
            }
        }

        #[test]
        fn lower_reflection_comparison_for_increasing_gap(
            base in prop::collection::vec(-3.0..3.0f64, 21),
            steps in prop::collection::vec(0.0..0.5f64, 21),
        ) {
            let g = grid(20);
            let b = BarrierPair::lower_only(Path::constant(g, -0.5)).unwrap();
            let mut gap = 0.0;
            let hi: Vec<f64> = base.iter().zip(&steps).map(|(a, d)| { gap += d; a + gap }).collect();
            let z1 = skorohod_map(&b, &Path::new(g, base.clone()).unwrap()).unwrap().z;
            let z2 = skorohod_map(&b, &Path::new(g, hi).unwrap()).unwrap().z;
            for k in 0..g.len() {
                prop_assert!(z1.get(k) <= z2.get(k) + 1e-12);
            }
        }

        #[test]
        fn regulator_lipschitz_bound(
            psi1 in prop::collection::vec(-3.0..3.0f64, 16),
            dpsi in prop::collection::vec(-0.5..0.5f64, 16),
            l1 in prop::collection::vec(-2.0..-1.0f64, 16),
            dl in prop::collection::vec(-0.3..0.3f64, 16),
            width in prop::collection::vec(1.0..2.0f64, 16),
            dr in prop::collection::vec(-0.3..0.3f64, 16),
        ) {
            let r1: Vec<f64> = l1.iter().zip(&width).map(|(l, w)| l + 2.0 * w).collect();
            let l2: Vec<f64> = l1.iter().zip(&dl).map(|(a, d)| a + d).collect();
            let r2: Vec<f64> = r1.iter().zip(&dr).map(|(a, d)| a + d).collect();
            let psi2: Vec<f64> = psi1.iter().zip(&dpsi).map(|(a, d)| a + d).collect();
            let e1 = regulator(&l1, &r1, &psi1);
            let e2 = regulator(&l2, &r2, &psi2);
            let lhs = e1.iter().zip(&e2).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            let sup_lr = dl.iter().zip(&dr).fold(0.0f64, |m, (a, b)| m.max(a.abs() + b.abs()));
            let sup_psi = dpsi.iter().fold(0.0f64, |m, d| m.max(d.abs()));
            prop_assert!(lhs <= 2.0 * sup_lr + 4.0 * sup_psi + 1e-12);
        }
    }

    #[test]
    fn pointwise_larger_driver_can_give_smaller_reflected_path() {
        let g = grid(2);
        let b = BarrierPair::lower_only(Path::constant(g, -0.5)).unwrap();
        let z1 = skorohod_map(&b, &Path::new(g, vec![0.0, -2.0, -1.0]).unwrap()).unwrap().z;
        let z2 = skorohod_map(&b, &Path::new(g, vec![0.0, 0.0, -1.0]).unwrap()).unwrap().z;
        assert_eq!(z1.get(2), 0.5);
        assert_eq!(z2.get(2), -0.5);
    }

    #[test]
    fn upper_reflection_regulator_is_running_sup() {
        let g = grid(200);
        let psi = Path::from_fn(g, |t| (7.0 * t).sin() + t);
        let b = BarrierPair::upper_only(Path::zeros(g)).unwrap();
        let sol = skorohod_map(&b, &psi).unwrap();
        let mut run = 0.0f64;
        for k in 0..g.len() {
            run = run.max(psi.get(k).max(0.0));
            assert_eq!(sol.eta.get(k), run);
        }
        assert!(sol.eta_minus.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn csv_columns() {
        let g = grid(1);
        let b = BarrierPair::upper_only(Path::constant(g, 1.0)).unwrap();
        let sol = skorohod_map(&b, &Path::constant(g, 0.5)).unwrap();
        let mut buf = Vec::new();
        sol.write_csv(&b, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("t,psi,l,r,Z,eta"));
        assert!(lines.next().unwrap().contains(",-inf,"));
    }
}
