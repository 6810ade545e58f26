use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use sdeinv::quadrature::QuadratureSpec;
use sdeinv::resolvent::{
    check_duality, check_l1_contraction, check_nested_monotone, check_submarkov, discretize, global_resolvent, invariance_probe_chi,
    resolvent_equation_residual, ResolventSolver,
};
use sdeinv::rng::{stream_rng, uniform};
use sdeinv::simulator::{
    empirical_invariance_test, marginal_bins, martingale_test, martingale_trace, quadratic_variation_test, simulate, time_reversal_test,
    InitialLaw, PathEnsemble, SimConfig,
};
use sdeinv::validators::run_validation;
use sdeinv::{load_scenario, Direction, ReportEntry, Scenario, ValidationReport};
use serde_json::{json, Value};

use crate::args::{Common, TestKind};
use crate::manifest::{scale_tolerances, RunManifest, RunReport, MANIFEST_FILE, REPORT_FILE};
use crate::plot;

/// Paths written to `paths.csv`; the full ensemble rarely fits a text file.
pub const CSV_PATHS: usize = 100;

/// Failure of a command before any check could run (exit code 2).
#[derive(Debug)]
pub struct UsageError(pub String);

impl<E: std::fmt::Display> From<E> for UsageError {
    fn from(e: E) -> Self {
        UsageError(e.to_string())
    }
}

pub type CmdResult = Result<Outcome, UsageError>;

/// What `main` needs to print and to pick the exit code.
pub struct Outcome {
    pub passed: bool,
    pub manifest: PathBuf,
    pub report: ValidationReport,
}

/// Output directory and file bookkeeping for one run.
struct Run {
    dir: PathBuf,
    started: Instant,
    outputs: Vec<String>,
}

impl Run {
    fn new(root: &Path, scenario: &Scenario, command: &str) -> Result<Self, UsageError> {
        let dir = root.join(&scenario.name).join(command);
        fs::create_dir_all(&dir).map_err(|e| UsageError(format!("cannot create {}: {e}", dir.display())))?;
        Ok(Self { dir, started: Instant::now(), outputs: Vec::new() })
    }

    fn create(&mut self, name: &str) -> Result<BufWriter<File>, UsageError> {
        self.outputs.push(name.to_string());
        Ok(BufWriter::new(File::create(self.dir.join(name))?))
    }

    #[allow(clippy::too_many_arguments)]
    fn finish(
        mut self,
        command: &str,
        scenario: &Scenario,
        common: &Common,
        mut options: BTreeMap<String, Value>,
        mut rerun: Vec<String>,
        mut report: ValidationReport,
        extra: Value,
    ) -> CmdResult {
        scale_tolerances(&mut report, common.tolerance_scale);
        let passed = report.all_passed();
        let run_report = RunReport { command: command.into(), scenario: scenario.spec_string(), passed, report: report.clone(), extra };
        let mut w = self.create(REPORT_FILE)?;
        w.write_all(serde_json::to_string_pretty(&run_report)?.as_bytes())?;
        w.flush()?;

        options.insert("tolerance_scale".into(), json!(common.tolerance_scale));
        rerun.splice(0..0, [command.to_string(), "--scenario".into(), scenario.spec_string()]);
        rerun.extend(["--tolerance-scale".into(), common.tolerance_scale.to_string()]);
        let mut outputs = self.outputs.clone();
        outputs.push(MANIFEST_FILE.into());
        let manifest = RunManifest {
            tool: "sdeinv".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            scenario: scenario.spec_string(),
            params: scenario.params.clone(),
            options,
            rerun,
            wall_clock_seconds: self.started.elapsed().as_secs_f64(),
            outputs,
            passed,
            failures: report.failures().map(|e| e.check_id.clone()).collect(),
        };
        let path = self.dir.join(MANIFEST_FILE);
        fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
        Ok(Outcome { passed, manifest: path, report })
    }
}

fn scenario_of(common: &Common) -> Result<Scenario, UsageError> {
    let spec = common.scenario_spec().ok_or_else(|| UsageError("a scenario is required (name, --scenario or --config)".into()))?;
    Ok(load_scenario(&spec)?)
}

/// Turns an error from a single check into a failing entry, as the validators do.
fn entry_or_failure(id: &str, r: sdeinv::Result<ReportEntry>) -> ReportEntry {
    r.unwrap_or_else(|e| ReportEntry::judged(id, f64::INFINITY, 0.0, format!("error: {e}")))
}

pub fn validate(common: &Common) -> CmdResult {
    let scenario = scenario_of(common)?;
    let run = Run::new(&common.out_dir, &scenario, "validate")?;
    let report = run_validation(&scenario.coefficients, &scenario.validation_plan());
    run.finish("validate", &scenario, common, BTreeMap::new(), Vec::new(), report, Value::Null)
}

pub fn resolvent(common: &Common, alpha: Option<f64>, boxes: Option<usize>) -> CmdResult {
    let scenario = scenario_of(common)?;
    let alpha = alpha.unwrap_or(scenario.resolvent.alpha);
    if !(alpha > 0.0) {
        return Err(UsageError("--alpha must be positive".into()));
    }
    if boxes.is_some_and(|b| b < 2) {
        return Err(UsageError("--boxes needs at least 2 nested boxes".into()));
    }
    let family = scenario.nested_boxes(boxes)?;
    let mut run = Run::new(&common.out_dir, &scenario, "resolvent")?;
    let cs = &scenario.coefficients;
    let seed = common.seed;
    let largest = family.last().expect("at least two boxes");
    let mut report = ValidationReport::new();
    scenario.advisories.iter().cloned().for_each(|e| report.push(e));

    let op = discretize(cs, largest, Direction::Forward)?;
    report.push(entry_or_failure("submarkov", check_submarkov(&op, alpha, 5, seed)));
    report.push(entry_or_failure("l1-contraction", check_l1_contraction(&op, alpha, 5, seed.wrapping_add(1))));
    let gauss = |x: &[f64]| (-x.iter().map(|v| v * v).sum::<f64>()).exp();
    let f = largest.sample(gauss);
    report.push(entry_or_failure(
        "resolvent-equation",
        resolvent_equation_residual(&op, alpha, 2.5 * alpha, &f).map(|r| {
            ReportEntry::judged("resolvent-equation", r, 1e-8, format!("relative residual, alpha = {alpha}, beta = {}", 2.5 * alpha))
        }),
    ));
    match check_duality(cs, largest, alpha, 3, seed.wrapping_add(2)) {
        Ok(entries) => entries.into_iter().for_each(|e| report.push(e)),
        Err(e) => report.push(entry_or_failure("duality-weighted-adjoint", Err(e))),
    }
    for (k, pair) in family.windows(2).enumerate() {
        let data: Vec<Vec<f64>> = (0..20)
            .map(|j| {
                let mut rng = stream_rng(seed.wrapping_add(3), (k * 20 + j) as u64);
                (0..pair[0].len()).map(|_| uniform(&mut rng)).collect()
            })
            .collect();
        let mut e = entry_or_failure("nested-monotone", check_nested_monotone(cs, &pair[0], &pair[1], alpha, &data));
        e.check_id = format!("nested-monotone-{}-{}", k + 1, k + 2);
        report.push(e);
    }

    // invariance probe on a window half the size of the smallest box
    let small = &family[0];
    let (wlo, whi): (Vec<f64>, Vec<f64>) = small
        .lo
        .iter()
        .zip(&small.hi)
        .map(|(lo, hi)| {
            let (c, r) = (0.5 * (lo + hi), 0.25 * (hi - lo));
            (c - r, c + r)
        })
        .unzip();
    let chi = invariance_probe_chi(cs, &family, alpha, &wlo, &whi, 0.0)?;
    let rises = chi.window_norms.windows(2).map(|p| p[1] - p[0]).fold(f64::NEG_INFINITY, f64::max);
    report.push(ReportEntry::judged(
        "chi-decreasing",
        rises.max(0.0),
        0.0,
        format!("largest increase of the window norm, profile {:?}", chi.window_norms),
    ));
    report.push(ReportEntry::judged("chi-final", chi.last(), 0.05, format!("window norm on the largest of {} boxes", family.len())));
    let global = global_resolvent(cs, &family, alpha, &gauss, 1e-6);
    let global_profile = match &global {
        Ok(g) => {
            let last = g.profile.last().copied().unwrap_or(0.0);
            report.push(ReportEntry::warning("global-resolvent", last, 1e-6, format!("weighted L1 increments {:?}", g.profile)));
            g.profile.clone()
        }
        Err(sdeinv::Error::NotConverged { last_increment, profile }) => {
            report.push(ReportEntry::warning(
                "global-resolvent",
                *last_increment,
                1e-6,
                format!("weighted L1 increments {profile:?}; more boxes needed"),
            ));
            profile.clone()
        }
        Err(e) => {
            report.push(ReportEntry::warning("global-resolvent", f64::INFINITY, 1e-6, format!("error: {e}")));
            Vec::new()
        }
    };

    let small_op = discretize(cs, small, Direction::Forward)?;
    let mut w = run.create("operator.coo")?;
    small_op.dump_coo(&mut w)?;
    w.flush()?;
    let u = ResolventSolver::new(&op, alpha)?.solve(&f)?.solution;
    let mut w = run.create("resolvent.csv")?;
    op.dump_csv(&u, &mut w)?;
    w.flush()?;
    let mut w = run.create("chi.csv")?;
    writeln!(w, "box,half_width,nodes,window_norm")?;
    for (k, (spec, v)) in family.iter().zip(&chi.window_norms).enumerate() {
        writeln!(w, "{},{},{},{v:.17e}", k + 1, scenario.resolvent.half_widths[k], spec.len())?;
    }
    w.flush()?;

    let mut options = BTreeMap::new();
    options.insert("alpha".into(), json!(alpha));
    options.insert("boxes".into(), json!(family.len()));
    options.insert("h".into(), json!(scenario.resolvent.h));
    options.insert("seed".into(), json!(seed));
    let rerun = vec!["--alpha".into(), alpha.to_string(), "--boxes".into(), family.len().to_string(), "--seed".into(), seed.to_string()];
    let extra =
        json!({ "chi_window_norms": chi.window_norms, "global_resolvent_increments": global_profile, "largest_box_nodes": largest.len() });
    run.finish("resolvent", &scenario, common, options, rerun, report, extra)
}

/// Record every `k` steps so the stored grid is about 0.01 apart.
fn record_stride(n_steps: usize, dt: f64) -> usize {
    let want = ((0.01 / dt).round() as usize).max(1);
    (1..=want).rev().find(|k| n_steps.is_multiple_of(*k)).unwrap_or(1)
}

pub fn simulate_cmd(common: &Common, paths: Option<usize>, dt: Option<f64>, horizon: Option<f64>, tests: &[TestKind]) -> CmdResult {
    let scenario = scenario_of(common)?;
    let d = scenario.dim();
    let sim = &scenario.simulation;
    let (paths, dt, horizon) = (paths.unwrap_or(sim.paths), dt.unwrap_or(sim.dt), horizon.unwrap_or(sim.horizon));
    let tests: Vec<TestKind> = if tests.is_empty() { vec![TestKind::Invariance, TestKind::Martingale] } else { tests.to_vec() };
    let initial = match (&scenario.envelope, scenario.normalization) {
        (Some(env), Some(_)) => InitialLaw::Stationary(*env),
        _ => InitialLaw::Point(vec![1.0; d]),
    };
    let mut cfg = SimConfig::new(dt, horizon, paths, common.seed, initial);
    let n_steps = cfg.n_steps()?;
    cfg = cfg.with_record_every(record_stride(n_steps, dt));
    let mut run = Run::new(&common.out_dir, &scenario, "simulate")?;
    let cs = &scenario.coefficients;
    let ens = simulate(cs, &cfg)?;
    let summary = ens.summary();
    let mut report = ValidationReport::new();
    scenario.advisories.iter().cloned().for_each(|e| report.push(e));
    report.push(ReportEntry::judged(
        "explosions",
        summary.exploded as f64 / summary.n_paths as f64,
        1e-3,
        format!("{} of {} paths left |x| <= {}", summary.exploded, summary.n_paths, cfg.r_explode),
    ));
    let u = scenario.battery().functions[0].field.clone();
    let nt = ens.n_times();
    let checkpoints = [ens.times[(nt - 1) / 4], ens.times[(nt - 1) / 2], ens.times[nt - 1]];
    let mut extra = json!({ "summary": summary, "record_every": cfg.record_every });

    for test in &tests {
        match test {
            TestKind::Invariance => {
                let Some(z) = scenario.normalization else {
                    report.push(ReportEntry::warning("empirical-invariance", f64::NAN, 1.0, "measure is not finite; test skipped"));
                    continue;
                };
                let r = empirical_invariance_test(&ens, cs, z, horizon, &sim.histogram_lo, &sim.histogram_hi, sim.bins)?;
                report.push(r.to_entry());
                let mut w = run.create("marginals.csv")?;
                write_marginals(&mut w, &ens, &scenario, z)?;
                w.flush()?;
            }
            TestKind::Martingale => {
                report.push(martingale_test(&ens, cs, &u, &checkpoints)?.to_entry());
                let mut w = run.create("martingale.csv")?;
                writeln!(w, "t,mean,standard_error")?;
                for (t, m, se) in martingale_trace(&ens, cs, &u) {
                    writeln!(w, "{t},{m:.12e},{se:.12e}")?;
                }
                w.flush()?;
            }
            TestKind::Qv => report.push(quadratic_variation_test(&ens, cs, &u, horizon)?.to_entry()),
            TestKind::Reversal => {
                let dual_cfg = SimConfig { seed: common.seed.wrapping_add(1), ..cfg.clone() }.with_direction(Direction::Dual);
                let dual = simulate(cs, &dual_cfg)?;
                report.push(time_reversal_test(&ens, &dual, &[0.0, checkpoints[1], horizon])?.to_entry());
            }
        }
    }
    extra["tests"] = json!(tests.iter().map(|t| t.name()).collect::<Vec<_>>());
    let mut w = run.create("paths.csv")?;
    ens.write_csv_first(&mut w, CSV_PATHS)?;
    w.flush()?;
    let mut w = run.create("plot.py")?;
    w.write_all(plot::script(&scenario.name).as_bytes())?;
    w.flush()?;

    let mut options = BTreeMap::new();
    options.insert("paths".into(), json!(paths));
    options.insert("dt".into(), json!(dt));
    options.insert("horizon".into(), json!(horizon));
    options.insert("seed".into(), json!(common.seed));
    options.insert("taming".into(), json!(cfg.taming));
    options.insert("r_explode".into(), json!(cfg.r_explode));
    let mut rerun = vec![
        "--paths".into(),
        paths.to_string(),
        "--dt".into(),
        dt.to_string(),
        "--horizon".into(),
        horizon.to_string(),
        "--seed".into(),
        common.seed.to_string(),
    ];
    for t in &tests {
        rerun.extend(["--test".to_string(), t.name().to_string()]);
    }
    run.finish("simulate", &scenario, common, options, rerun, report, extra)
}

/// `axis,bin_lo,bin_hi,empirical,expected` at the final time.
fn write_marginals(w: &mut impl Write, ens: &PathEnsemble, scenario: &Scenario, z: f64) -> Result<(), UsageError> {
    let sim = &scenario.simulation;
    let (lo, hi, bins) = (&sim.histogram_lo, &sim.histogram_hi, sim.bins);
    let spec = QuadratureSpec::for_histograms(scenario.dim());
    writeln!(w, "axis,bin_lo,bin_hi,empirical,expected")?;
    for axis in 0..ens.dim {
        let p = marginal_bins(&scenario.coefficients, z, axis, lo, hi, bins, &spec)?;
        let xs = ens.coordinate(ens.n_times() - 1, axis);
        let width = (hi[axis] - lo[axis]) / bins as f64;
        let mut counts = vec![0usize; bins];
        for x in &xs {
            let b = ((x - lo[axis]) / width).floor();
            if b >= 0.0 && (b as usize) < bins {
                counts[b as usize] += 1;
            }
        }
        for b in 0..bins {
            let a = lo[axis] + b as f64 * width;
            writeln!(w, "{},{a},{},{:.8e},{:.8e}", axis + 1, a + width, counts[b] as f64 / xs.len() as f64, p[b])?;
        }
    }
    Ok(())
}

/// Consolidates the reports behind `manifests` into `consolidated.json`.
pub fn report(manifests: &[PathBuf], out_dir: &Path) -> Result<(bool, PathBuf, Vec<String>), UsageError> {
    let mut runs = Vec::new();
    let mut lines = Vec::new();
    let mut all = true;
    for path in manifests {
        let m = RunManifest::load(path).map_err(UsageError)?;
        let report_path = RunManifest::report_path(path);
        let text = fs::read_to_string(&report_path).map_err(|e| UsageError(format!("{}: {e}", report_path.display())))?;
        let r: RunReport = serde_json::from_str(&text)?;
        all &= r.passed;
        for e in &r.report.entries {
            lines.push(format!(
                "{:<10} {:<28} {:<30} {:?} metric {:.3e} tol {:.1e}",
                m.command, m.scenario, e.check_id, e.status, e.metric, e.tolerance
            ));
        }
        runs.push(json!({ "manifest": path.display().to_string(), "command": m.command, "scenario": m.scenario,
            "version": m.version, "passed": r.passed, "entries": r.report.entries, "extra": r.extra }));
    }
    fs::create_dir_all(out_dir)?;
    let out = out_dir.join("consolidated.json");
    fs::write(&out, serde_json::to_string_pretty(&json!({ "passed": all, "runs": runs }))?)?;
    Ok((all, out, lines))
}
