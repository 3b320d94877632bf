//! Uniform time grids, grid-aligned paths and the random-number contract.
//!
//! Every process in the crate (states, controls, adjoints, barriers) is a
//! [`Path`]: one value per node of a uniform [`TimeGrid`] on `[0, T]`.
//! Left limits follow the càdlàg convention `v(t_k⁻) = v_{k-1}`; at the first
//! node the caller supplies the pre-jump value explicitly.

use std::io::{self, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Uniform grid `t_k = k T / n`, `k = 0..=n`.
///
/// Both `T` and `n` are stored so node times are reproduced from integers
/// rather than by accumulating `Δt`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::invalid(format!(
                "grid horizon must be positive and finite, got {horizon}"
            )));
        }
        if steps == 0 {
            return Err(Error::invalid("grid needs at least one step"));
        }
        Ok(Self { horizon, steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Number of nodes, `n + 1`.
    pub fn len(&self) -> usize {
        self.steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        if k == self.steps {
            self.horizon
        } else {
            k as f64 * self.horizon / self.steps as f64
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.len()).map(|k| self.time(k)).collect()
    }

    /// Index of the last node with `t_k <= t` (clamped to the grid).
    pub fn node_at_or_before(&self, t: f64) -> usize {
        if t <= 0.0 {
            return 0;
        }
        let raw = (t / self.horizon * self.steps as f64).floor();
        let mut k = (raw.max(0.0) as usize).min(self.steps);
        // floor of a rounded quotient can land one node too far either way
        while k > 0 && self.time(k) > t {
            k -= 1;
        }
        while k < self.steps && self.time(k + 1) <= t {
            k += 1;
        }
        k
    }
}

/// Real-valued function sampled at every node of a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    grid: TimeGrid,
    values: Vec<f64>,
}

impl Path {
    /// Finite-valued path.
    pub fn new(grid: TimeGrid, values: Vec<f64>) -> Result<Self> {
        let path = Self::with_sentinels(grid, values)?;
        if let Some(k) = path.values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "path value at node {k} is not finite ({})",
                path.values[k]
            )));
        }
        Ok(path)
    }

    /// Path that may carry `±∞` sentinels (barriers). NaN is always rejected.
    pub fn with_sentinels(grid: TimeGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::invalid(format!(
                "path has {} values but grid has {} nodes",
                values.len(),
                grid.len()
            )));
        }
        if let Some(k) = values.iter().position(|v| v.is_nan()) {
            return Err(Error::invalid(format!("path value at node {k} is NaN")));
        }
        Ok(Self { grid, values })
    }

    pub fn constant(grid: TimeGrid, value: f64) -> Self {
        Self {
            grid,
            values: vec![value; grid.len()],
        }
    }

    pub fn zeros(grid: TimeGrid) -> Self {
        Self::constant(grid, 0.0)
    }

    pub fn from_fn(grid: TimeGrid, mut f: impl FnMut(f64) -> f64) -> Self {
        let values = (0..grid.len()).map(|k| f(grid.time(k))).collect();
        Self { grid, values }
    }

    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, k: usize) -> f64 {
        self.values[k]
    }

    pub fn last(&self) -> f64 {
        self.values[self.values.len() - 1]
    }

    /// `v(t_k⁻)`: the previous node's value, or `initial` at `k = 0`.
    pub fn left_limit(&self, k: usize, initial: f64) -> f64 {
        if k == 0 {
            initial
        } else {
            self.values[k - 1]
        }
    }

    /// `Δv_k = v_k − v_{k−1}` with `v_{−1} := 0`.
    pub fn increments(&self) -> Vec<f64> {
        let mut prev = 0.0;
        self.values
            .iter()
            .map(|&v| {
                let d = v - prev;
                prev = v;
                d
            })
            .collect()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            grid: self.grid,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_with(&self, other: &Path, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        ensure_same_grid(self, other)?;
        Ok(Self {
            grid: self.grid,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn sup_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_nondecreasing(&self) -> bool {
        self.values.windows(2).all(|w| w[1] >= w[0])
    }

    /// CSV with header `t,value`, 17 significant digits.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> io::Result<()> {
        writeln!(out, "t,value")?;
        for (k, v) in self.values.iter().enumerate() {
            writeln!(out, "{},{}", fmt_f64(self.grid.time(k)), fmt_f64(*v))?;
        }
        Ok(())
    }
}

/// Fixed 17-significant-digit rendering used by every CSV writer.
pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else if v.is_nan() {
        "nan".to_string()
    } else if v > 0.0 {
        "inf".to_string()
    } else {
        "-inf".to_string()
    }
}

pub(crate) fn ensure_same_grid(a: &Path, b: &Path) -> Result<()> {
    if a.grid != b.grid {
        return Err(Error::invalid(format!(
            "grid mismatch: (T={}, n={}) vs (T={}, n={})",
            a.grid.horizon, a.grid.steps, b.grid.horizon, b.grid.steps
        )));
    }
    Ok(())
}

/// Nondecreasing path with `v_0 >= 0`; encodes a singular control with
/// `ξ(0⁻) = 0` and a possible initial jump `v_0`.
#[derive(Debug, Clone, PartialEq)]
pub struct MonotonePath(Path);

impl MonotonePath {
    pub fn new(path: Path) -> Result<Self> {
        if path.values[0] < 0.0 {
            return Err(Error::invalid(format!(
                "monotone path must start at a nonnegative value, got {}",
                path.values[0]
            )));
        }
        if let Some(k) = path.values.windows(2).position(|w| w[1] < w[0]) {
            return Err(Error::invalid(format!(
                "path decreases between nodes {} and {} ({} -> {})",
                k,
                k + 1,
                path.values[k],
                path.values[k + 1]
            )));
        }
        Ok(Self(path))
    }

    pub fn zeros(grid: TimeGrid) -> Self {
        Self(Path::zeros(grid))
    }

    pub fn path(&self) -> &Path {
        &self.0
    }

    pub fn into_path(self) -> Path {
        self.0
    }

    pub fn values(&self) -> &[f64] {
        self.0.values()
    }
}

/// Sup-norm distance `max_k |a_k − b_k|`.
pub fn sup_distance(a: &Path, b: &Path) -> Result<f64> {
    ensure_same_grid(a, b)?;
    Ok(sup_distance_slices(&a.values, &b.values))
}

pub(crate) fn sup_distance_slices(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()))
}

/// Left-endpoint Riemann sum `Σ_{k<n} a_k Δt`.
pub fn integrate_dt(a: &[f64], grid: TimeGrid) -> f64 {
    let dt = grid.dt();
    a[..grid.steps()].iter().map(|v| v * dt).sum()
}

/// `Σ_k a(t_k⁻) Δξ_k`, with `a(t_0⁻) = a_pre` and `Δξ_0 = ξ_0`.
pub fn integrate_dxi(a: &[f64], a_pre: f64, xi: &[f64]) -> f64 {
    let mut acc = 0.0;
    let mut prev_xi = 0.0;
    let mut left = a_pre;
    for (k, &x) in xi.iter().enumerate() {
        acc += left * (x - prev_xi);
        prev_xi = x;
        left = a[k];
    }
    acc
}

/// Purpose tag of a random stream; distinct purposes never share draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Purpose {
    /// Brownian increments driving a particle (and its density process).
    Brownian,
    /// Auxiliary draws for randomized checks.
    Auxiliary(u32),
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::Brownian => 0x42_524f_574e,
            Purpose::Auxiliary(i) => 0xa0_0000_0000 ^ u64::from(i),
        }
    }
}

/// Counter-based Gaussian stream keyed by `(seed, particle, purpose)`.
///
/// The stream for one key is independent of how many other streams exist or
/// in which order they are drawn, so per-particle work can run on any number
/// of threads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngStream {
    pub seed: u64,
    pub particle: u64,
    pub purpose: Purpose,
}

impl RngStream {
    pub fn new(seed: u64, particle: u64, purpose: Purpose) -> Self {
        Self {
            seed,
            particle,
            purpose,
        }
    }

    pub fn brownian(seed: u64, particle: usize) -> Self {
        Self::new(seed, particle as u64, Purpose::Brownian)
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(self.seed ^ self.purpose.tag()));
        rng.set_stream(self.particle);
        rng
    }

    /// First `count` standard normal draws of the stream.
    pub fn normals(&self, count: usize) -> Vec<f64> {
        let mut rng = self.rng();
        (0..count)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect()
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn grid_nodes() {
        let g = TimeGrid::new(1.0, 4).unwrap();
        assert_eq!(g.times(), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        let g = TimeGrid::new(2.0, 1).unwrap();
        assert_eq!(g.times(), vec![0.0, 2.0]);
        assert_eq!(g.dt(), 2.0);
    }

    #[test]
    fn grid_rejects_bad_arguments() {
        assert!(matches!(
            TimeGrid::new(1.0, 0),
            Err(Error::InvalidArgument(_))
        ));
        assert!(TimeGrid::new(0.0, 3).is_err());
        assert!(TimeGrid::new(-1.0, 3).is_err());
        assert!(TimeGrid::new(f64::INFINITY, 3).is_err());
    }

    #[test]
    fn last_node_is_exactly_horizon() {
        let g = TimeGrid::new(0.3, 7).unwrap();
        assert_eq!(g.time(7), 0.3);
        assert_eq!(g.time(0), 0.0);
    }

    #[test]
    fn node_lookup() {
        let g = TimeGrid::new(1.0, 10).unwrap();
        assert_eq!(g.node_at_or_before(0.3), 3);
        assert_eq!(g.node_at_or_before(0.35), 3);
        assert_eq!(g.node_at_or_before(5.0), 10);
        assert_eq!(g.node_at_or_before(-1.0), 0);
    }

    #[test]
    fn sup_distance_examples() {
        let g = TimeGrid::new(1.0, 2).unwrap();
        let p = Path::new(g, vec![0.0, 0.5, 1.0]).unwrap();
        assert_eq!(sup_distance(&p, &p).unwrap(), 0.0);
        assert_eq!(
            sup_distance(&Path::constant(g, 1.0), &Path::constant(g, 3.0)).unwrap(),
            2.0
        );
        assert_eq!(sup_distance(&p, &Path::zeros(g)).unwrap(), 1.0);
    }

    #[test]
    fn sup_distance_grid_mismatch() {
        let a = Path::zeros(TimeGrid::new(1.0, 2).unwrap());
        let b = Path::zeros(TimeGrid::new(1.0, 3).unwrap());
        assert!(matches!(sup_distance(&a, &b), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn path_validation() {
        let g = TimeGrid::new(1.0, 2).unwrap();
        assert!(Path::new(g, vec![0.0, 1.0]).is_err());
        assert!(Path::new(g, vec![0.0, f64::INFINITY, 1.0]).is_err());
        assert!(Path::with_sentinels(g, vec![0.0, f64::INFINITY, 1.0]).is_ok());
        assert!(Path::with_sentinels(g, vec![0.0, f64::NAN, 1.0]).is_err());
    }

    #[test]
    fn monotone_path_validation() {
        let g = TimeGrid::new(1.0, 2).unwrap();
        assert!(MonotonePath::new(Path::new(g, vec![0.5, 0.5, 1.0]).unwrap()).is_ok());
        assert!(MonotonePath::new(Path::new(g, vec![-0.1, 0.5, 1.0]).unwrap()).is_err());
        assert!(MonotonePath::new(Path::new(g, vec![0.0, 0.5, 0.4]).unwrap()).is_err());
    }

    #[test]
    fn integrals_follow_left_conventions() {
        let g = TimeGrid::new(1.0, 2).unwrap();
        // left endpoint: only nodes 0 and 1 count
        assert_eq!(integrate_dt(&[1.0, 3.0, 100.0], g), 2.0);
        // initial jump of 1 priced at the pre-jump value 2
        let xi = [1.0, 1.0, 1.0];
        assert_eq!(integrate_dxi(&[1.0, 1.0, 1.0], 2.0, &xi), 2.0);
        // increment at node 2 priced at node 1
        let xi = [0.0, 0.0, 2.0];
        assert_eq!(integrate_dxi(&[5.0, 7.0, 9.0], 0.0, &xi), 14.0);
    }

    #[test]
    fn csv_layout() {
        let g = TimeGrid::new(1.0, 1).unwrap();
        let p = Path::new(g, vec![0.1, 2.0]).unwrap();
        let mut buf = Vec::new();
        p.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "t,value\n0.0000000000000000e0,1.0000000000000001e-1\n1.0000000000000000e0,2.0000000000000000e0\n"
        );
        assert_eq!("1.0000000000000001e-1".parse::<f64>().unwrap(), 0.1);
    }

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a = RngStream::brownian(7, 3).normals(64);
        let b = RngStream::brownian(7, 3).normals(64);
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_ne!(a, RngStream::brownian(7, 4).normals(64));
        assert_ne!(a, RngStream::brownian(8, 3).normals(64));
        assert_ne!(
            a,
            RngStream::new(7, 3, Purpose::Auxiliary(0)).normals(64)
        );
        // prefix property: drawing more does not change earlier draws
        assert_eq!(&RngStream::brownian(7, 3).normals(128)[..64], &a[..]);
    }

    #[test]
    fn stream_draws_look_standard_normal() {
        let z = RngStream::brownian(1, 0).normals(20_000);
        let mean = z.iter().sum::<f64>() / z.len() as f64;
        let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (z.len() - 1) as f64;
        assert!(mean.abs() < 0.03, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    fn path_strategy(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-10.0..10.0f64, n + 1)
    }

    proptest! {
        #[test]
        fn sup_distance_is_a_metric(a in path_strategy(12), b in path_strategy(12), c in path_strategy(12)) {
            let g = TimeGrid::new(1.0, 12).unwrap();
            let (a, b, c) = (Path::new(g, a).unwrap(), Path::new(g, b).unwrap(), Path::new(g, c).unwrap());
            let ab = sup_distance(&a, &b).unwrap();
            prop_assert_eq!(ab, sup_distance(&b, &a).unwrap());
            prop_assert!(ab <= sup_distance(&a, &c).unwrap() + sup_distance(&c, &b).unwrap() + 1e-12);
            prop_assert_eq!(sup_distance(&a, &a).unwrap(), 0.0);
            prop_assert_eq!(ab == 0.0, a == b);
        }
    }
}
