use mfsc_core::adjoint::{coefficient_reduction, deterministic_adjoint, harvesting_adjoint};
use mfsc_core::meanfield::{constant, estimate_j, FunctionalSpec, ModelSpec};
use mfsc_core::optimality::{check_variational, perturbation_test, ControlProblem, Direction, PerturbationFamily};
use mfsc_core::reflected::{harvest_barrier, picard_solve, quadratic_barriers, PicardSettings, ReflectedSolution};
use mfsc_core::{Path, TimeGrid};
use std::sync::Arc;

fn grid(n: usize) -> TimeGrid {
    TimeGrid::new(1.0, n).unwrap()
}

fn harvesting(g: TimeGrid, sigma: f64, particles: usize, seed: u64, tol: f64) -> (ControlProblem, Path, ReflectedSolution) {
    let one = Path::constant(g, 1.0);
    let p = harvesting_adjoint(&one, &Path::constant(g, sigma), 1.0, g).unwrap().p;
    let rule = harvest_barrier(&p, &one, &one).unwrap();
    let problem = ControlProblem {
        model: ModelSpec::harvesting(1.0, constant(1.0), constant(sigma), constant(1.0)),
        functional: FunctionalSpec::harvesting(constant(1.0), 1.0),
        grid: g,
    };
    let settings = PicardSettings { tol, max_iter: 50 };
    let sol = picard_solve(&problem.model, &rule, g, particles, seed, settings).unwrap();
    (problem, p, sol)
}

#[test]
fn deterministic_harvesting_matches_stepwise_recursion() {
    let g = grid(400);
    let (problem, _, sol) = harvesting(g, 0.0, 3, 0, 1e-13);
    assert!(sol.converged);

    // grow by Euler, cut back to e^{1-t}, sell each cut at the previous state
    let dt = g.dt();
    let r = |k: usize| (1.0 - g.time(k)).exp();
    let mut x = vec![1.0f64.min(r(0))];
    let mut xi = vec![1.0 - x[0]];
    let mut value = 1.0 * xi[0];
    for k in 1..g.len() {
        let prev = x[k - 1];
        let grown = prev + prev * dt;
        let next = grown.min(r(k));
        xi.push(xi[k - 1] + (grown - next));
        value += prev * (grown - next);
        x.push(next);
    }
    value += x[g.steps()];

    for i in 0..3 {
        let states = sol.ensemble.states[i].values();
        let controls = sol.ensemble.controls[i].values();
        for k in 0..g.len() {
            assert!((states[k] - x[k]).abs() <= 1e-9, "state at {k}: {} vs {}", states[k], x[k]);
            assert!((controls[k] - xi[k]).abs() <= 1e-9, "control at {k}");
        }
    }
    let j = estimate_j(&sol.ensemble, &problem.functional).unwrap();
    assert!((j.mean - value).abs() <= 1e-9, "{} vs {value}", j.mean);
    assert!(j.se <= 1e-12, "{}", j.se);
    // the state meets the threshold e^{1-t} at t = 1/2
    let first = xi.iter().position(|&v| v > 0.0).unwrap();
    assert!((g.time(first) - 0.5).abs() < 0.01, "{}", g.time(first));
}

#[test]
fn stochastic_harvesting_passes_every_check() {
    let g = grid(100);
    let (problem, p, sol) = harvesting(g, 0.2, 400, 17, 1e-6);
    assert!(sol.converged);
    assert!(sol.check_particles(1e-5).verdict());
    let lambda = Path::constant(g, -1.0);
    let zero = Path::zeros(g);
    for (x, xi) in sol.ensemble.states.iter().zip(&sol.ensemble.controls) {
        let report = check_variational(x, xi, &p, &lambda, x, &zero, 1e-5).unwrap();
        assert!(report.verdict(), "{report}");
    }
    let early = Path::from_fn(g, |t| if t >= 0.2 { 1.0 } else { 0.0 });
    let family = PerturbationFamily::new(
        vec![("early".into(), Direction::Common(early)), ("more".into(), Direction::ScaledBase(1.0))],
        vec![0.05, 0.1],
    )
    .unwrap();
    let out = perturbation_test(&problem, &sol.ensemble.controls, &family, 17).unwrap();
    assert!(out.report.verdict(), "{}", out.report);
    // overharvesting costs more than the noise can hide
    assert!(out.delta[1][1].mean < -2.0 * out.delta[1][1].se);
}

#[test]
fn linear_quadratic_pipeline() {
    let g = grid(200);
    let model = ModelSpec::new("lq", 0.5)
        .with_linear_drift(constant(0.2), constant(-0.5), constant(0.3))
        .with_diffusion(|_, _, _, _| 0.3)
        .with_lambda(|_, _| -1.0);
    let functional = FunctionalSpec::linear(constant(-0.5), constant(0.0), 1.0, Arc::new(|_, x| x * x));
    let coeffs = coefficient_reduction(&model, &functional, g).unwrap();
    let p = deterministic_adjoint(&coeffs, g).unwrap().p;

    // α = 0.2, φ = 0.5, Θ = 1
    let exact = |t: f64| (0.2 * (1.0 - t)).exp() * 3.5 - 2.5;
    for k in 0..g.len() {
        assert!((p.get(k) - exact(g.time(k))).abs() < 5e-3, "node {k}");
    }

    let rule = quadratic_barriers(&p, &Path::constant(g, 1.0), &Path::zeros(g)).unwrap();
    let sol = picard_solve(&model, &rule, g, 300, 4, PicardSettings::default()).unwrap();
    assert!(sol.converged);
    assert!(sol.check_particles(1e-5).verdict());
    for x in &sol.ensemble.states {
        for k in 0..g.len() {
            let r = p.get(k).sqrt();
            assert!(x.get(k).abs() <= r + 1e-9, "node {k}: {} outside ±{r}", x.get(k));
        }
    }
}

#[test]
fn thread_count_does_not_change_results() {
    let g = grid(80);
    let in_pool = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| harvesting(g, 0.3, 257, 5, 1e-6).2)
    };
    assert_eq!(in_pool(1), in_pool(4));
}

#[test]
fn harvesting_less_raises_the_payoff_at_the_threshold_barrier() {
    // the price h0·X depends on the state, which the adjoint ignores, so the
    // threshold rule is beaten by harvesting a fraction less
    let g = grid(200);
    let (problem, _, sol) = harvesting(g, 0.0, 2, 42, 1e-13);
    let base = sol.ensemble.controls[0].values();
    let dt = g.dt();
    let scaled_value = |a: f64| {
        let (mut x, mut prev_x, mut prev_xi, mut value) = (1.0f64, 1.0f64, 0.0f64, 0.0f64);
        for k in 0..g.len() {
            if k > 0 {
                prev_x = x;
                x += x * dt;
            }
            let d = (1.0 - a) * (base[k] - prev_xi);
            prev_xi = base[k];
            value += prev_x * d;
            x -= d;
        }
        value + x
    };
    let family = PerturbationFamily::new(vec![("less".into(), Direction::ScaledBase(-1.0))], vec![0.1, 0.5]).unwrap();
    let out = perturbation_test(&problem, &sol.ensemble.controls, &family, 42).unwrap();
    for (a, est) in [0.1, 0.5].iter().zip(&out.delta[0]) {
        let exact = scaled_value(*a) - scaled_value(0.0);
        assert!(exact > 0.05, "a = {a}: {exact}");
        assert!((est.mean - exact).abs() <= 1e-9, "a = {a}: {} vs {exact}", est.mean);
    }
    assert!(!out.report.verdict());
}
