//! `run` and `verify`.

use std::fs;
use std::path::{Path as FsPath, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use mfsc_core::meanfield::{estimate_j, Ensemble};
use mfsc_core::nash::{nash_construct, write_strategy_csv, StrategyPair};
use mfsc_core::paths::fmt_f64;
use mfsc_core::reflected::{harvest_barrier, picard_solve, BarrierRule};
use mfsc_core::uncertainty::{parametric_saddle, simulate_densities, solve_foc, ScenarioControl};
use mfsc_core::{Check, CheckReport, Path};
use rayon::prelude::*;

use crate::checks::{self, adjoint, barrier_rule};
use crate::config::{Config, Value};
use crate::output::{
    columns_csv, config_hash, paths_csv, sha256_hex, CheckVerdict, RunManifest, RunWriter, CONFIG_COPY,
};
use crate::scenario::{Scenario, Spec};

pub const CHECKS: &str = "checks.txt";
pub const SUMMARY: &str = "summary.txt";
const QUANTILES: [f64; 5] = [0.05, 0.25, 0.5, 0.75, 0.95];

/// Command-line overrides of config values.
#[derive(Debug, Clone, Copy, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub particles: Option<usize>,
    pub steps: Option<usize>,
}

impl Overrides {
    fn apply(&self, c: &mut Config) {
        if let Some(s) = self.seed {
            c.set("seed", Value::Num(s as f64));
        }
        if let Some(n) = self.particles {
            c.set("particles", Value::Num(n as f64));
        }
        if let Some(n) = self.steps {
            c.set("grid.n", Value::Num(n as f64));
        }
    }
}

/// Outcome of a finished run.
#[derive(Debug)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub report: CheckReport,
    pub manifest: RunManifest,
}

/// Directory for a run: `out` if given, otherwise `<root>/<output or config stem>`.
pub fn run_dir(config_path: &FsPath, sc: &Scenario, root: &FsPath, out: Option<&FsPath>) -> PathBuf {
    if let Some(o) = out {
        return o.to_path_buf();
    }
    let name = sc.output.clone().unwrap_or_else(|| {
        config_path.file_stem().map_or("run".into(), |s| s.to_string_lossy().into_owned())
    });
    root.join(name)
}

fn write_ensemble(w: &mut RunWriter, ens: &Ensemble, control_file: Option<&str>) -> Result<()> {
    let grid = ens.grid;
    let qs = ens.state_quantiles(&QUANTILES);
    let names: Vec<String> = QUANTILES.iter().map(|q| format!("q{:02}", (q * 100.0).round())).collect();
    let series: Vec<&[f64]> = qs.iter().map(Path::values).collect();
    w.write("x_quantiles.csv", &columns_csv(grid, &names, &series))?;
    w.write(checks::Y, &columns_csv(grid, &["Y".into()], &[ens.meanfield.values()]))?;
    w.write(checks::X_PATHS, &paths_csv(grid, &ens.states))?;
    if let Some(name) = control_file {
        let mean = ens.mean_control();
        w.write("mean_xi.csv", &columns_csv(grid, &["xi".into()], &[mean.values()]))?;
        w.write(name, &paths_csv(grid, &ens.controls))?;
    }
    Ok(())
}

fn trace_csv(trace: &[f64]) -> Vec<u8> {
    let mut s = String::from("m,d\n");
    for (m, d) in trace.iter().enumerate() {
        s.push_str(&format!("{},{}\n", m + 1, fmt_f64(*d)));
    }
    s.into_bytes()
}

struct Produced {
    value: Option<String>,
    summary: String,
    cell: Option<[usize; 2]>,
    model: String,
}

fn run_reflected(sc: &Scenario, w: &mut RunWriter) -> Result<Produced> {
    let grid = sc.grid;
    let problem = sc.control_problem().expect("reflected kind");
    let p = adjoint(sc).context("adjoint")?;
    if let Some(p) = &p {
        w.write(checks::P, &columns_csv(grid, &["p".into()], &[p.values()]))?;
    }
    let rule = barrier_rule(sc, p.as_ref()).context("barrier construction")?;
    let sol = picard_solve(&problem.model, &rule, grid, sc.particles, sc.seed, sc.settings)
        .context("reflected solver")?;
    let barriers = sol.barriers.get(0).clone();
    w.write(
        checks::BARRIER,
        &columns_csv(grid, &["l".into(), "r".into()], &[barriers.lower().values(), barriers.upper().values()]),
    )?;
    write_ensemble(w, &sol.ensemble, Some(checks::XI_PATHS))?;
    w.write(checks::TRACE, &trace_csv(&sol.trace))?;
    let mut first = Vec::new();
    sol.skorohod(0)?.write_csv(&barriers, &mut first)?;
    w.write("particle0.csv", &first)?;

    let j = estimate_j(&sol.ensemble, &problem.functional)?;
    let summary = format!(
        "J = {}±{}\niterations = {}\nconverged = {}\n",
        fmt_f64(j.mean),
        fmt_f64(j.se),
        sol.iterations,
        sol.converged
    );
    Ok(Produced {
        value: Some(format!("{}±{}", fmt_f64(j.mean), fmt_f64(j.se))),
        summary,
        cell: None,
        model: problem.model.name.clone(),
    })
}

fn run_game(sc: &Scenario, w: &mut RunWriter) -> Result<Produced> {
    let Spec::Game { split, .. } = &sc.spec else { unreachable!() };
    let scenario = sc.game()?.expect("game kind");
    let grid = sc.grid;
    let partition = scenario.partition()?;
    let ens = scenario.simulate(sc.particles, sc.seed).context("demand simulation")?;
    let pairs: Vec<StrategyPair> = ens
        .states
        .par_iter()
        .map(|x| nash_construct(x, &partition, *split))
        .collect::<mfsc_core::Result<_>>()?;
    write_ensemble(w, &ens, None)?;
    let xi1: Vec<Path> = pairs.iter().map(|p| p.xi1.path().clone()).collect();
    let xi2: Vec<Path> = pairs.iter().map(|p| p.xi2.path().clone()).collect();
    w.write(checks::XI1_PATHS, &paths_csv(grid, &xi1))?;
    w.write(checks::XI2_PATHS, &paths_csv(grid, &xi2))?;
    let mut strat = Vec::new();
    write_strategy_csv(&mut strat, &ens.states[0], &partition, &pairs[0])?;
    w.write("strategies.csv", &strat)?;
    let mut part = String::from("start,end,case\n");
    for iv in &partition.intervals {
        part.push_str(&format!("{},{},{}\n", fmt_f64(grid.time(iv.start)), fmt_f64(grid.time(iv.end)), iv.label()));
    }
    w.write("partition.csv", part.as_bytes())?;

    let payoffs = |player: usize| -> Result<String> {
        let v: Vec<f64> = ens
            .states
            .par_iter()
            .zip(&pairs)
            .map(|(x, p)| scenario.payoff(player, x, p.xi1.path(), p.xi2.path()))
            .collect();
        let e = mfsc_core::meanfield::Estimate::from_samples(&v)?;
        Ok(format!("{}±{}", fmt_f64(e.mean), fmt_f64(e.se)))
    };
    let (j1, j2) = (payoffs(1)?, payoffs(2)?);
    Ok(Produced {
        summary: format!("J1 = {j1}\nJ2 = {j2}\nsplit = {split}\n"),
        value: Some(format!("{j1}; {j2}")),
        cell: None,
        model: "game".into(),
    })
}

fn run_uncertainty(sc: &Scenario, w: &mut RunWriter) -> Result<Produced> {
    let Spec::Uncertainty { harvest, theta, theta_max, xi_scales, q2, .. } = &sc.spec else { unreachable!() };
    let grid = sc.grid;
    let problem = sc.control_problem().expect("uncertainty kind");
    let penalty = sc.penalty().expect("uncertainty kind");
    let p = adjoint(sc)?.expect("harvesting adjoint");
    let lambda0 = harvest.lambda0.to_path(grid)?;
    let h0 = harvest.h0.to_path(grid)?;
    let rules: Vec<BarrierRule> = xi_scales
        .iter()
        .map(|&s| harvest_barrier(&p.map(|v| s * v), &lambda0, &h0))
        .collect::<mfsc_core::Result<_>>()?;
    let thetas: Vec<ScenarioControl> = theta
        .iter()
        .map(|&c| ScenarioControl::new(Path::constant(grid, c), *theta_max))
        .collect::<mfsc_core::Result<_>>()?;

    let names: Vec<String> = xi_scales.iter().map(|s| format!("scale={s}")).collect();
    let uppers: Vec<&[f64]> = rules.iter().map(|r| r.fixed_barriers().expect("fixed").upper().values()).collect();
    w.write("barriers.csv", &columns_csv(grid, &names, &uppers))?;

    let mut dens = String::from("particle");
    for j in 0..theta.len() {
        dens.push_str(&format!(",theta{j}"));
    }
    dens.push('\n');
    let terminal: Vec<Vec<f64>> = thetas
        .iter()
        .map(|th| Ok(simulate_densities(th, sc.particles, sc.seed)?.iter().map(|d| d.path().last()).collect()))
        .collect::<Result<_>>()?;
    for i in 0..sc.particles {
        dens.push_str(&i.to_string());
        for col in &terminal {
            dens.push_str(&format!(",{}", fmt_f64(col[i])));
        }
        dens.push('\n');
    }
    w.write(checks::DENSITY, dens.as_bytes())?;

    let out = parametric_saddle(&problem, &penalty, &rules, &thetas, sc.settings, sc.particles, sc.seed)
        .context("parametric saddle")?;
    let mut m = String::from("scale");
    for c in theta {
        m.push_str(&format!(",theta={c}"));
    }
    m.push('\n');
    for (s, row) in xi_scales.iter().zip(&out.matrix) {
        m.push_str(&s.to_string());
        for e in row {
            m.push_str(&format!(",{}±{}", fmt_f64(e.mean), fmt_f64(e.se)));
        }
        m.push('\n');
    }
    w.write(checks::J_MATRIX, m.as_bytes())?;

    if let Some(q2) = q2 {
        let q2 = q2.to_path(grid)?;
        let sol = solve_foc(&penalty, &q2, *theta_max)?;
        w.write(
            checks::FOC,
            &columns_csv(grid, &["q2".into(), "theta".into()], &[q2.values(), sol.theta.theta().values()]),
        )?;
    }
    let (i, j) = out.cell;
    let v = &out.matrix[i][j];
    Ok(Produced {
        value: Some(format!("{}±{}", fmt_f64(v.mean), fmt_f64(v.se))),
        summary: format!(
            "cell = ({i}, {j})\nscale = {}\ntheta = {}\nmaximin = {}\nminimax = {}\n",
            xi_scales[i],
            theta[j],
            fmt_f64(out.maximin),
            fmt_f64(out.minimax)
        ),
        cell: Some([i, j]),
        model: problem.model.name.clone(),
    })
}

/// Execute a scenario file and write its run directory.
pub fn run_scenario(config_path: &FsPath, overrides: Overrides, root: &FsPath, out: Option<&FsPath>) -> Result<RunOutcome> {
    let start = Instant::now();
    let mut config = Config::load(config_path)?;
    overrides.apply(&mut config);
    let sc = Scenario::from_config(&config)?;
    let (text, tables) = config.canonical();
    let hash = config_hash(&text, &tables);
    let dir = run_dir(config_path, &sc, root, out);
    let mut w = RunWriter::create(dir.clone())?;
    w.write(CONFIG_COPY, text.as_bytes())?;
    for (name, body) in &tables {
        w.write(name, body.as_bytes())?;
    }

    let produced = match &sc.spec {
        Spec::Game { .. } => run_game(&sc, &mut w),
        Spec::Uncertainty { .. } => run_uncertainty(&sc, &mut w),
        _ => run_reflected(&sc, &mut w),
    }
    .with_context(|| format!("{} pipeline", sc.kind))?;
    w.write(SUMMARY, produced.summary.as_bytes())?;

    let report = checks::evaluate(&sc, &dir).context("evaluating checks")?;
    w.write(CHECKS, report.to_string().as_bytes())?;

    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        kind: sc.kind.to_string(),
        config_hash: hash,
        seed: sc.seed,
        particles: sc.particles,
        steps: sc.grid.steps(),
        horizon: sc.grid.horizon(),
        model: produced.model,
        value: produced.value,
        equilibrium_cell: produced.cell,
        checks: report.checks.iter().map(|c| CheckVerdict { name: c.name.clone(), passed: c.passed }).collect(),
        verdict: report.verdict(),
        files: Vec::new(),
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    };
    w.finish(manifest.clone())?;
    let manifest = RunManifest::load(&dir)?;
    Ok(RunOutcome { dir, report, manifest })
}

/// Recompute every check of a run directory from its files.
pub fn verify_run(dir: &FsPath) -> Result<CheckReport> {
    let manifest = RunManifest::load(dir)?;
    let mut report = CheckReport::new();

    let mut broken = None;
    for f in &manifest.files {
        match fs::read(dir.join(&f.name)) {
            Ok(bytes) if sha256_hex(&bytes) == f.sha256 => {}
            Ok(_) => {
                broken.get_or_insert_with(|| format!("{} changed", f.name));
            }
            Err(_) => {
                broken.get_or_insert_with(|| format!("{} missing", f.name));
            }
        }
    }
    report.push(Check::flag("files_unchanged", broken.is_none(), broken));

    let config = Config::load(&dir.join(CONFIG_COPY)).with_context(|| format!("{CONFIG_COPY} in {}", dir.display()))?;
    let (text, tables) = config.canonical();
    let same = config_hash(&text, &tables) == manifest.config_hash;
    report.push(Check::flag("config_hash", same, (!same).then(|| "config differs from the manifest".into())));
    let sc = Scenario::from_config(&config)?;
    if sc.seed != manifest.seed || sc.particles != manifest.particles || sc.grid.steps() != manifest.steps {
        report.push(Check::flag("manifest_consistent", false, Some("seed, particles or steps differ".into())));
    }
    report.extend(checks::evaluate(&sc, dir)?);
    if let Some([i, j]) = manifest.equilibrium_cell {
        let found = report.get("saddle.found").and_then(|c| c.location.clone());
        let expect = format!("cell ({i}, {j})");
        let ok = found.as_deref() == Some(expect.as_str());
        report.push(Check::flag("equilibrium_cell", ok, Some(expect)));
    }
    Ok(report)
}
