//! Tamed Euler-Maruyama ensembles and the statistical tests run on them.
//!
//! One step is
//!
//! ```text
//! X_{k+1} = X_k + sigma_hat(X_k) dW_k + G(X_k) / (1 + dt |G(X_k)|) dt
//! ```
//!
//! with `dW_k` drawn from a per-path ChaCha stream, so path `p` is the same whatever
//! the ensemble size and however the work is scheduled.

use std::io::Write;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::coefficients::{CoefficientSet, Direction};
use crate::error::{Error, Result};
use crate::field::{ScalarField, SingularSet};
use crate::par;
use crate::quadrature::{integrate, QuadratureSpec};
use crate::report::ReportEntry;
use crate::rng::{stream_rng, uniform};

/// Paths with `|X| > R_EXPLODE` are frozen and flagged.
pub const R_EXPLODE: f64 = 1e6;
/// A step counts as tamed when `dt |G|` exceeds this.
pub const TAMING_REPORT_THRESHOLD: f64 = 0.01;
/// `c(alpha)` of the two-sample KS test at the 3-sigma level (`alpha = 0.0027`).
pub const KS_C_3SIGMA: f64 = 1.8176;

/// Proposal law for rejection sampling of `psi rho`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Envelope {
    /// `q(x) = |x|^(-radial_power) exp(-|x|^2 / (2 scale^2))`, `radial_power < d`.
    Gaussian { scale: f64, radial_power: f64, bound: f64 },
    /// `q(x) = (1 + |x|^2 / scale^2)^(-(d+1)/2)`.
    Cauchy { scale: f64, bound: f64 },
}

impl Envelope {
    pub fn gaussian(scale: f64, bound: f64) -> Self {
        Envelope::Gaussian { scale, radial_power: 0.0, bound }
    }

    fn bound(&self) -> f64 {
        match *self {
            Envelope::Gaussian { bound, .. } | Envelope::Cauchy { bound, .. } => bound,
        }
    }

    /// Unnormalized proposal density.
    pub fn density(&self, x: &[f64]) -> f64 {
        let r2: f64 = x.iter().map(|v| v * v).sum();
        match *self {
            Envelope::Gaussian { scale, radial_power, .. } => r2.powf(-0.5 * radial_power) * (-r2 / (2.0 * scale * scale)).exp(),
            Envelope::Cauchy { scale, .. } => (1.0 + r2 / (scale * scale)).powf(-0.5 * (x.len() as f64 + 1.0)),
        }
    }

    fn draw(&self, dim: usize, rng: &mut ChaCha8Rng, out: &mut [f64]) {
        for o in out.iter_mut() {
            *o = StandardNormal.sample(rng);
        }
        match *self {
            Envelope::Gaussian { scale, radial_power, .. } => {
                if radial_power == 0.0 {
                    out.iter_mut().for_each(|v| *v *= scale);
                } else {
                    // r^2 / (2 s^2) ~ Gamma((d - p) / 2)
                    let shape = 0.5 * (dim as f64 - radial_power);
                    let g: f64 = Gamma::new(shape, 1.0).expect("valid gamma shape").sample(rng);
                    let r = scale * (2.0 * g).sqrt();
                    let n = out.iter().map(|v| v * v).sum::<f64>().sqrt();
                    out.iter_mut().for_each(|v| *v *= r / n);
                }
            }
            Envelope::Cauchy { scale, .. } => {
                let w: f64 = StandardNormal.sample(rng);
                out.iter_mut().for_each(|v| *v *= scale / w.abs());
            }
        }
    }

    fn validate(&self, dim: usize) -> Result<()> {
        let ok = match *self {
            Envelope::Gaussian { scale, radial_power, bound } => {
                scale > 0.0 && bound > 0.0 && radial_power >= 0.0 && radial_power < dim as f64
            }
            Envelope::Cauchy { scale, bound } => scale > 0.0 && bound > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid envelope {self:?} for dimension {dim}")))
        }
    }
}

/// Starting law of the ensemble.
#[derive(Clone, Debug)]
pub enum InitialLaw {
    Point(Vec<f64>),
    /// `mu_hat` itself, by rejection against the envelope.
    Stationary(Envelope),
    /// Any density dominated by `bound * envelope`.
    Density(ScalarField, Envelope),
}

#[derive(Clone, Debug)]
pub struct SimConfig {
    pub dt: f64,
    pub horizon: f64,
    pub n_paths: usize,
    pub seed: u64,
    pub taming: bool,
    pub direction: Direction,
    pub initial: InitialLaw,
    /// Store every `record_every`-th step (the final step is always on the grid).
    pub record_every: usize,
    /// Each increment is the sum of `2^noise_refinement` Brownian sub-increments, so a
    /// run at `dt` with refinement `k` shares its Brownian paths with a run at `dt / 2^k`.
    pub noise_refinement: u32,
    pub r_explode: f64,
}

impl SimConfig {
    pub fn new(dt: f64, horizon: f64, n_paths: usize, seed: u64, initial: InitialLaw) -> Self {
        Self {
            dt,
            horizon,
            n_paths,
            seed,
            taming: true,
            direction: Direction::Forward,
            initial,
            record_every: 1,
            noise_refinement: 0,
            r_explode: R_EXPLODE,
        }
    }

    pub fn with_direction(mut self, direction: Direction) -> Self {
        self.direction = direction;
        self
    }

    pub fn with_record_every(mut self, k: usize) -> Self {
        self.record_every = k;
        self
    }

    /// Records only the start and the end of each path.
    pub fn recording_only_at_end(mut self) -> Self {
        self.record_every = self.n_steps().unwrap_or(1).max(1);
        self
    }

    pub fn with_taming(mut self, on: bool) -> Self {
        self.taming = on;
        self
    }

    pub fn with_noise_refinement(mut self, k: u32) -> Self {
        self.noise_refinement = k;
        self
    }

    pub fn n_steps(&self) -> Result<usize> {
        if !(self.dt > 0.0) || !(self.horizon >= self.dt) {
            return Err(Error::invalid(format!("need 0 < dt <= T (dt = {}, T = {})", self.dt, self.horizon)));
        }
        let n = (self.horizon / self.dt).round();
        if (n * self.dt - self.horizon).abs() > 1e-9 * self.horizon {
            return Err(Error::invalid(format!("T = {} is not a multiple of dt = {}", self.horizon, self.dt)));
        }
        Ok(n as usize)
    }

    fn validate(&self, dim: usize) -> Result<usize> {
        let n = self.n_steps()?;
        if self.n_paths == 0 || self.record_every == 0 || n % self.record_every != 0 {
            return Err(Error::invalid("need n_paths >= 1 and record_every dividing the number of steps"));
        }
        match &self.initial {
            InitialLaw::Point(x) if x.len() != dim => return Err(Error::DimensionMismatch { expected: dim, got: x.len() }),
            InitialLaw::Stationary(e) | InitialLaw::Density(_, e) => e.validate(dim)?,
            _ => {}
        }
        Ok(n)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathDiagnostics {
    pub taming_activations: u64,
    pub exploded: bool,
    pub singular_hits: u64,
    /// Proposals drawn for the starting point (1 for a fixed start).
    pub initial_attempts: u64,
    /// Proposals where `density > bound * envelope`, i.e. the envelope was too low.
    pub envelope_violations: u64,
}

/// `states[(p * n_times + k) * dim + i]` is coordinate `i` of path `p` at `times[k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PathEnsemble {
    pub dim: usize,
    /// Integration step; 0 for exact transition samples.
    pub dt: f64,
    pub direction: Direction,
    pub times: Vec<f64>,
    pub states: Vec<f64>,
    pub diagnostics: Vec<PathDiagnostics>,
}

impl PathEnsemble {
    pub fn n_paths(&self) -> usize {
        self.diagnostics.len()
    }

    pub fn n_times(&self) -> usize {
        self.times.len()
    }

    pub fn state(&self, path: usize, k: usize) -> &[f64] {
        let i = (path * self.n_times() + k) * self.dim;
        &self.states[i..i + self.dim]
    }

    /// Index of the recorded time closest to `t`, which must lie on the record grid.
    pub fn time_index(&self, t: f64) -> Result<usize> {
        let (k, err) =
            self.times.iter().enumerate().map(|(k, s)| (k, (s - t).abs())).fold((0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
        if err > 1e-9 * t.abs().max(1.0) {
            return Err(Error::invalid(format!("time {t} is not on the recorded grid")));
        }
        Ok(k)
    }

    pub fn live_paths(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.n_paths()).filter(|&p| !self.diagnostics[p].exploded)
    }

    /// Coordinate `i` at time index `k` over the paths that did not explode.
    pub fn coordinate(&self, k: usize, i: usize) -> Vec<f64> {
        self.live_paths().map(|p| self.state(p, k)[i]).collect()
    }

    /// The same paths read backwards in time: `Y_t = X_{T - t}`.
    pub fn reversed(&self) -> PathEnsemble {
        let nt = self.n_times();
        let t_end = *self.times.last().expect("non-empty time grid");
        let mut states = Vec::with_capacity(self.states.len());
        for p in 0..self.n_paths() {
            for k in (0..nt).rev() {
                states.extend_from_slice(self.state(p, k));
            }
        }
        let times = self.times.iter().rev().map(|t| t_end - t).collect();
        PathEnsemble { states, times, ..self.clone() }
    }

    pub fn summary(&self) -> EnsembleSummary {
        let nt = self.n_times();
        let live: Vec<usize> = self.live_paths().collect();
        let mut mean = vec![0.0; self.dim];
        let mut var = vec![0.0; self.dim];
        for i in 0..self.dim {
            let xs: Vec<f64> = live.iter().map(|&p| self.state(p, nt - 1)[i]).collect();
            let (m, v) = mean_var(&xs);
            mean[i] = m;
            var[i] = v;
        }
        let attempts: u64 = self.diagnostics.iter().map(|d| d.initial_attempts).sum();
        EnsembleSummary {
            n_paths: self.n_paths(),
            exploded: self.n_paths() - live.len(),
            taming_activations: self.diagnostics.iter().map(|d| d.taming_activations).sum(),
            singular_hits: self.diagnostics.iter().map(|d| d.singular_hits).sum(),
            initial_acceptance_rate: self.n_paths() as f64 / attempts.max(1) as f64,
            envelope_violations: self.diagnostics.iter().map(|d| d.envelope_violations).sum(),
            final_time: self.times[nt - 1],
            final_mean: mean,
            final_variance: var,
        }
    }

    /// `path_id,t,x_1,..,x_d`, one row per path and recorded time.
    pub fn write_csv(&self, out: &mut impl Write) -> Result<()> {
        self.write_csv_first(out, self.n_paths())
    }

    /// Same layout as [`write_csv`](Self::write_csv), limited to the first `max_paths` paths.
    pub fn write_csv_first(&self, out: &mut impl Write, max_paths: usize) -> Result<()> {
        let header: Vec<String> = (1..=self.dim).map(|i| format!("x_{i}")).collect();
        writeln!(out, "path_id,t,{}", header.join(","))?;
        for p in 0..self.n_paths().min(max_paths) {
            for (k, t) in self.times.iter().enumerate() {
                let xs: Vec<String> = self.state(p, k).iter().map(|v| format!("{v:.12e}")).collect();
                writeln!(out, "{p},{t},{}", xs.join(","))?;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSummary {
    pub n_paths: usize,
    pub exploded: usize,
    pub taming_activations: u64,
    pub singular_hits: u64,
    pub initial_acceptance_rate: f64,
    pub envelope_violations: u64,
    pub final_time: f64,
    pub final_mean: Vec<f64>,
    pub final_variance: Vec<f64>,
}

/// Mean and unbiased variance.
pub fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = xs.iter().sum::<f64>() / n;
    let v = if xs.len() > 1 { xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (m, v)
}

fn draw_initial(cs: &CoefficientSet, law: &InitialLaw, rng: &mut ChaCha8Rng, out: &mut [f64], diag: &mut PathDiagnostics) -> Result<()> {
    let d = cs.dim();
    let (envelope, density): (&Envelope, Box<dyn Fn(&[f64]) -> f64 + '_>) = match law {
        InitialLaw::Point(x) => {
            if cs.singular().contains(x) {
                return Err(Error::SingularPoint { point: x.clone() });
            }
            out.copy_from_slice(x);
            diag.initial_attempts = 1;
            return Ok(());
        }
        InitialLaw::Stationary(e) => (e, Box::new(|x: &[f64]| cs.psi().value(x) * cs.rho().value(x))),
        InitialLaw::Density(f, e) => (e, Box::new(move |x: &[f64]| f.value(x))),
    };
    let bound = envelope.bound();
    loop {
        diag.initial_attempts += 1;
        if diag.initial_attempts > 10_000_000 {
            return Err(Error::invalid("rejection sampler accepted nothing in 1e7 proposals"));
        }
        envelope.draw(d, rng, out);
        let u = uniform(rng);
        if cs.singular().contains(out) {
            continue;
        }
        let ratio = density(out) / (bound * envelope.density(out));
        if ratio > 1.0 {
            diag.envelope_violations += 1;
        }
        if u < ratio {
            return Ok(());
        }
    }
}

/// Moves `x` out of the singular ball it fell into, along the first axis.
fn nudge(x: &mut [f64], singular: &SingularSet) {
    for s in singular.as_slice() {
        let dist = x.iter().zip(s).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        if dist <= singular.radius() {
            x[0] = s[0] + 2.0 * singular.radius();
        }
    }
}

struct Stepper<'a> {
    cs: &'a CoefficientSet,
    cfg: &'a SimConfig,
    g: Vec<f64>,
    dw: Vec<f64>,
}

impl Stepper<'_> {
    /// Drift and dispersion at `x`, nudging off singular points first.
    fn coefficients(&mut self, x: &mut [f64], diag: &mut PathDiagnostics) -> Option<Vec<f64>> {
        for _ in 0..2 {
            if self.cs.singular().contains(x) {
                nudge(x, self.cs.singular());
                diag.singular_hits += 1;
            }
            if let (Ok(()), Ok(s)) = (self.cs.drift_into(x, self.cfg.direction, &mut self.g), self.cs.dispersion(x)) {
                return Some(s);
            }
            diag.singular_hits += 1;
            x[0] += 2.0 * self.cs.singular().radius().max(f64::EPSILON * x[0].abs().max(1.0));
        }
        None
    }

    fn step(&mut self, x: &mut [f64], rng: &mut ChaCha8Rng, diag: &mut PathDiagnostics) {
        let d = x.len();
        let dt = self.cfg.dt;
        let Some(sigma) = self.coefficients(x, diag) else {
            diag.exploded = true;
            return;
        };
        let sub = 1usize << self.cfg.noise_refinement;
        let sd = (dt / sub as f64).sqrt();
        self.dw.fill(0.0);
        for _ in 0..sub {
            for w in self.dw.iter_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *w += sd * z;
            }
        }
        let gn = self.g.iter().map(|v| v * v).sum::<f64>().sqrt();
        let scale = if self.cfg.taming {
            if dt * gn > TAMING_REPORT_THRESHOLD {
                diag.taming_activations += 1;
            }
            1.0 / (1.0 + dt * gn)
        } else {
            1.0
        };
        for i in 0..d {
            let noise: f64 = (0..d).map(|j| sigma[i * d + j] * self.dw[j]).sum();
            x[i] += noise + self.g[i] * scale * dt;
        }
        let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(r <= self.cfg.r_explode) {
            diag.exploded = true;
        }
        if !diag.exploded && self.cs.singular().contains(x) {
            nudge(x, self.cs.singular());
            diag.singular_hits += 1;
        }
    }
}

fn simulate_path(cs: &CoefficientSet, cfg: &SimConfig, n_steps: usize, path: usize) -> Result<(Vec<f64>, PathDiagnostics)> {
    let d = cs.dim();
    let mut rng = stream_rng(cfg.seed, path as u64);
    let mut diag = PathDiagnostics::default();
    let mut x = vec![0.0; d];
    draw_initial(cs, &cfg.initial, &mut rng, &mut x, &mut diag)?;
    let n_rec = n_steps / cfg.record_every + 1;
    let mut rec = Vec::with_capacity(n_rec * d);
    rec.extend_from_slice(&x);
    let mut stepper = Stepper { cs, cfg, g: vec![0.0; d], dw: vec![0.0; d] };
    let mut frozen = x.clone();
    for k in 1..=n_steps {
        if !diag.exploded {
            stepper.step(&mut x, &mut rng, &mut diag);
            if diag.exploded {
                // keep the last finite state
                x.copy_from_slice(&frozen);
            } else {
                frozen.copy_from_slice(&x);
            }
        }
        if k % cfg.record_every == 0 {
            rec.extend_from_slice(&x);
        }
    }
    Ok((rec, diag))
}

/// Runs the ensemble. Pathologies along a path become diagnostics; only invalid
/// configurations (or a start inside the singular set) are errors.
pub fn simulate(cs: &CoefficientSet, cfg: &SimConfig) -> Result<PathEnsemble> {
    let d = cs.dim();
    let n_steps = cfg.validate(d)?;
    let ids: Vec<usize> = (0..cfg.n_paths).collect();
    let paths = par::map(&ids, |&p| simulate_path(cs, cfg, n_steps, p));
    let n_rec = n_steps / cfg.record_every + 1;
    let mut states = Vec::with_capacity(cfg.n_paths * n_rec * d);
    let mut diagnostics = Vec::with_capacity(cfg.n_paths);
    for r in paths {
        let (s, diag) = r?;
        states.extend(s);
        diagnostics.push(diag);
    }
    let times = (0..n_rec).map(|k| (k * cfg.record_every) as f64 * cfg.dt).collect();
    Ok(PathEnsemble { dim: d, dt: cfg.dt, direction: cfg.direction, times, states, diagnostics })
}

/// Exact transitions of `dX = -theta X dt + sqrt(2 theta v) dW` (stationary law
/// `N(0, v I)`) on the time grid `times`, started from `initial`.
pub fn exact_ou_ensemble(dim: usize, theta: f64, v: f64, times: &[f64], initial: &[Vec<f64>], seed: u64) -> PathEnsemble {
    let mut states = Vec::with_capacity(initial.len() * times.len() * dim);
    for (p, x0) in initial.iter().enumerate() {
        let mut rng = stream_rng(seed, p as u64);
        let mut x = x0.clone();
        let mut t_prev = times[0];
        for &t in times {
            let h = t - t_prev;
            let decay = (-theta * h).exp();
            let sd = (v * (1.0 - decay * decay)).sqrt();
            for xi in x.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *xi = decay * *xi + sd * z;
            }
            states.extend_from_slice(&x);
            t_prev = t;
        }
    }
    PathEnsemble {
        dim,
        // exact transitions carry no discretization bias
        dt: 0.0,
        direction: Direction::Forward,
        times: times.to_vec(),
        states,
        diagnostics: vec![PathDiagnostics { initial_attempts: 1, ..Default::default() }; initial.len()],
    }
}

/// Outcome of one statistical test. `passed` iff `|statistic| <= threshold`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatTestResult {
    pub name: String,
    pub statistic: f64,
    pub standard_error: f64,
    pub threshold: f64,
    pub passed: bool,
    pub n_effective: usize,
    pub details: String,
}

impl StatTestResult {
    fn new(name: &str, statistic: f64, standard_error: f64, threshold: f64, n_effective: usize, details: String) -> Self {
        let passed = statistic.abs() <= threshold;
        Self { name: name.to_string(), statistic, standard_error, threshold, passed, n_effective, details }
    }

    pub fn to_entry(&self) -> ReportEntry {
        ReportEntry::judged(self.name.clone(), self.statistic.abs(), self.threshold, self.details.clone())
    }
}

/// `Lu` along every live path at every recorded time; `None` where undefined.
fn generator_along(ens: &PathEnsemble, cs: &CoefficientSet, u: &ScalarField, upto: usize) -> Vec<(usize, Vec<f64>)> {
    let live: Vec<usize> = ens.live_paths().collect();
    par::map(&live, |&p| {
        let lu = (0..=upto).map(|k| cs.generator_apply(u, ens.state(p, k), ens.direction).unwrap_or(f64::NAN)).collect();
        (p, lu)
    })
}

/// `M_t = u(X_t) - u(X_0) - int_0^t Lu(X_s) ds` (trapezoid on the recorded grid) for
/// every live path and recorded time up to index `upto`.
fn martingale_paths(ens: &PathEnsemble, cs: &CoefficientSet, u: &ScalarField, upto: usize) -> Vec<Vec<f64>> {
    generator_along(ens, cs, u, upto)
        .into_iter()
        .map(|(p, lu)| {
            let u0 = u.value(ens.state(p, 0));
            let mut integral = 0.0;
            let mut m = Vec::with_capacity(upto + 1);
            m.push(0.0);
            for k in 1..=upto {
                integral += 0.5 * (lu[k - 1] + lu[k]) * (ens.times[k] - ens.times[k - 1]);
                m.push(u.value(ens.state(p, k)) - u0 - integral);
            }
            m
        })
        .collect()
}

/// Mean and standard error of `M_t` at recorded index `k`, ignoring undefined values.
fn martingale_moments(paths: &[Vec<f64>], k: usize) -> (f64, f64, usize) {
    let ms: Vec<f64> = paths.iter().map(|m| m[k]).filter(|m| m.is_finite()).collect();
    let (m, v) = mean_var(&ms);
    (m, (v / ms.len() as f64).sqrt(), ms.len())
}

/// `mean / SE` of `M_t` must stay within 3 at every checkpoint.
pub fn martingale_test(ens: &PathEnsemble, cs: &CoefficientSet, u: &ScalarField, checkpoints: &[f64]) -> Result<StatTestResult> {
    let ks: Vec<usize> = checkpoints.iter().map(|&t| ens.time_index(t)).collect::<Result<_>>()?;
    let upto = ks.iter().copied().max().unwrap_or(0);
    let paths = martingale_paths(ens, cs, u, upto);
    let mut worst = 0.0f64;
    let mut worst_se = 0.0;
    let mut lines = Vec::new();
    let mut n_eff = 0;
    for (&t, &k) in checkpoints.iter().zip(&ks) {
        let (m, se, n) = martingale_moments(&paths, k);
        n_eff = n;
        let z = if se > 0.0 {
            m / se
        } else if m == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
        lines.push(format!("t={t}: mean {m:.3e}, SE {se:.3e}, z {z:.2}"));
        if z.abs() > worst.abs() || z.is_nan() {
            worst = z;
            worst_se = se;
        }
    }
    Ok(StatTestResult::new("martingale", worst, worst_se, 3.0, n_eff, lines.join("; ")))
}

/// `(t, mean M_t, SE)` at every recorded time, for plotting.
pub fn martingale_trace(ens: &PathEnsemble, cs: &CoefficientSet, u: &ScalarField) -> Vec<(f64, f64, f64)> {
    let upto = ens.n_times() - 1;
    let paths = martingale_paths(ens, cs, u, upto);
    (0..=upto)
        .map(|k| {
            let (m, se, _) = martingale_moments(&paths, k);
            (ens.times[k], m, se)
        })
        .collect()
}

/// Realized `sum (dM)^2` against `int <A_hat grad u, grad u> ds`, both averaged over
/// paths; the statistic is the relative discrepancy of the means.
pub fn quadratic_variation_test(ens: &PathEnsemble, cs: &CoefficientSet, u: &ScalarField, t: f64) -> Result<StatTestResult> {
    let k_end = ens.time_index(t)?;
    let d = ens.dim;
    let lus = generator_along(ens, cs, u, k_end);
    let per_path: Vec<(f64, f64)> = par::map(&lus, |(p, lu)| {
        let (mut realized, mut predicted) = (0.0, 0.0);
        let energy = |x: &[f64]| -> f64 {
            let (Ok(ah), Ok(g)) = (cs.a_hat(x), u.gradient(x)) else { return f64::NAN };
            let mut e = 0.0;
            for i in 0..d {
                for j in 0..d {
                    e += ah[i * d + j] * g[i] * g[j];
                }
            }
            e
        };
        let mut e_prev = energy(ens.state(*p, 0));
        for j in 0..k_end {
            let h = ens.times[j + 1] - ens.times[j];
            let dm = u.value(ens.state(*p, j + 1)) - u.value(ens.state(*p, j)) - 0.5 * (lu[j] + lu[j + 1]) * h;
            realized += dm * dm;
            let e_next = energy(ens.state(*p, j + 1));
            predicted += 0.5 * (e_prev + e_next) * h;
            e_prev = e_next;
        }
        (realized, predicted)
    });
    let ok: Vec<&(f64, f64)> = per_path.iter().filter(|(a, b)| a.is_finite() && b.is_finite()).collect();
    let n = ok.len().max(1) as f64;
    let mr = ok.iter().map(|v| v.0).sum::<f64>() / n;
    let mp = ok.iter().map(|v| v.1).sum::<f64>() / n;
    let diffs: Vec<f64> = ok.iter().map(|v| v.0 - v.1).collect();
    let (_, vd) = mean_var(&diffs);
    let rel = if mp > 0.0 {
        (mr - mp) / mp
    } else if mr == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    let se = if mp > 0.0 { (vd / n).sqrt() / mp } else { 0.0 };
    Ok(StatTestResult::new(
        "quadratic-variation",
        rel,
        se,
        0.05,
        ok.len(),
        format!("mean realized {mr:.6e}, mean predicted {mp:.6e} at t={t}"),
    ))
}

/// Histogram of one coordinate on `bins` equal cells of `[lo, hi]` plus a tail cell.
fn histogram(xs: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<f64> {
    let mut h = vec![0.0; bins + 1];
    for &x in xs {
        let b = ((x - lo) / (hi - lo) * bins as f64).floor();
        if b >= 0.0 && (b as usize) < bins {
            h[b as usize] += 1.0;
        } else {
            h[bins] += 1.0;
        }
    }
    let n = xs.len().max(1) as f64;
    h.iter_mut().for_each(|v| *v /= n);
    h
}

/// Bin probabilities of coordinate `axis` under `psi rho / z`, restricted to the box.
pub fn marginal_bins(
    cs: &CoefficientSet,
    z: f64,
    axis: usize,
    lo: &[f64],
    hi: &[f64],
    bins: usize,
    spec: &QuadratureSpec,
) -> Result<Vec<f64>> {
    let density = |x: &[f64], out: &mut [f64]| out[0] = cs.psi().value(x) * cs.rho().value(x) / z;
    let edges: Vec<f64> = (0..=bins).map(|b| lo[axis] + (hi[axis] - lo[axis]) * b as f64 / bins as f64).collect();
    let cells: Vec<usize> = (0..bins).collect();
    let vals = par::map(&cells, |&b| {
        let mut l = lo.to_vec();
        let mut h = hi.to_vec();
        l[axis] = edges[b];
        h[axis] = edges[b + 1];
        integrate(&density, 1, &l, &h, cs.singular(), spec).map(|r| r.values[0])
    });
    let mut p: Vec<f64> = vals.into_iter().collect::<Result<_>>()?;
    let inside: f64 = p.iter().sum();
    p.push((1.0 - inside).max(0.0));
    Ok(p)
}

/// Total-variation distance of each coordinate marginal at `t_check` from the
/// `mu_hat / z` marginal, against `3 * sum_b sqrt(p_b (1 - p_b) / n) / 2`.
pub fn empirical_invariance_test(
    ens: &PathEnsemble,
    cs: &CoefficientSet,
    z: f64,
    t_check: f64,
    lo: &[f64],
    hi: &[f64],
    bins: usize,
) -> Result<StatTestResult> {
    let k = ens.time_index(t_check)?;
    let spec = QuadratureSpec::for_histograms(cs.dim());
    let mut worst = (0.0, 1.0, 0.0);
    let mut lines = Vec::new();
    let mut n_eff = 0;
    for axis in 0..ens.dim {
        let xs = ens.coordinate(k, axis);
        n_eff = xs.len();
        let n = xs.len() as f64;
        let p = marginal_bins(cs, z, axis, lo, hi, bins, &spec)?;
        let q = histogram(&xs, lo[axis], hi[axis], bins);
        let tv = 0.5 * p.iter().zip(&q).map(|(a, b)| (a - b).abs()).sum::<f64>();
        let budget = 0.5 * p.iter().map(|pb| (pb * (1.0 - pb) / n).sqrt()).sum::<f64>();
        lines.push(format!("x_{}: TV {tv:.4e}, budget {budget:.4e}", axis + 1));
        if tv / (3.0 * budget) > worst.0 / (3.0 * worst.1) {
            worst = (tv, budget, 3.0 * budget);
        }
    }
    // statistic scaled so that the common threshold is 1
    let stat = worst.0 / (3.0 * worst.1);
    Ok(StatTestResult::new("empirical-invariance", stat, worst.1, 1.0, n_eff, lines.join("; ")))
}

/// Two-sample Kolmogorov-Smirnov distance.
pub fn ks_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    d
}

/// KS threshold `c sqrt((n + m) / (n m))` at the 3-sigma level.
pub fn ks_threshold(n: usize, m: usize) -> f64 {
    KS_C_3SIGMA * ((n + m) as f64 / (n as f64 * m as f64)).sqrt()
}

/// Per coordinate and mark, KS between `X^fwd_{T-t}` and `X^dual_t`; the statistic
/// is the worst ratio of distance to threshold.
pub fn time_reversal_test(forward: &PathEnsemble, dual: &PathEnsemble, t_marks: &[f64]) -> Result<StatTestResult> {
    let rev = forward.reversed();
    let mut worst: f64 = 0.0;
    let mut lines = Vec::new();
    for &t in t_marks {
        let (kr, kd) = (rev.time_index(t)?, dual.time_index(t)?);
        for i in 0..forward.dim {
            let (a, b) = (rev.coordinate(kr, i), dual.coordinate(kd, i));
            let ks = ks_distance(&a, &b);
            let thr = ks_threshold(a.len(), b.len());
            lines.push(format!("t={t} x_{}: KS {ks:.4} / {thr:.4}", i + 1));
            worst = worst.max(ks / thr);
        }
    }
    Ok(StatTestResult::new("time-reversal", worst, 0.0, 1.0, forward.n_paths().min(dual.n_paths()), lines.join("; ")))
}

/// Mean and standard error of `f(X_t) g(X_{t+s})`.
pub fn two_time_moment(
    ens: &PathEnsemble,
    f: &dyn Fn(&[f64]) -> f64,
    g: &dyn Fn(&[f64]) -> f64,
    t: f64,
    s: f64,
) -> Result<(f64, f64, usize)> {
    let (k1, k2) = (ens.time_index(t)?, ens.time_index(t + s)?);
    let vals: Vec<f64> = ens.live_paths().map(|p| f(ens.state(p, k1)) * g(ens.state(p, k2))).collect();
    let (m, v) = mean_var(&vals);
    Ok((m, (v / vals.len() as f64).sqrt(), vals.len()))
}

/// Compares `E f(X_t) g(X_{t+s})` between two ensembles; the statistic is the
/// difference over its pooled standard error, threshold 3.
pub fn two_time_diagnostic(
    a: &PathEnsemble,
    b: &PathEnsemble,
    f: &dyn Fn(&[f64]) -> f64,
    g: &dyn Fn(&[f64]) -> f64,
    t: f64,
    s: f64,
) -> Result<StatTestResult> {
    let (ma, sa, na) = two_time_moment(a, f, g, t, s)?;
    let (mb, sb, nb) = two_time_moment(b, f, g, t, s)?;
    let se = (sa * sa + sb * sb).sqrt();
    let z = if se > 0.0 { (ma - mb) / se } else { 0.0 };
    Ok(StatTestResult::new("two-time", z, se, 3.0, na.min(nb), format!("E f(X_{t}) g(X_{}) = {ma:.5} vs {mb:.5}", t + s)))
}

/// A two-time moment functional `f1(X_t1) f2(X_t2)`.
pub struct Functional<'a> {
    pub label: &'a str,
    pub t1: f64,
    pub t2: f64,
    pub f1: &'a (dyn Fn(&[f64]) -> f64 + Sync),
    pub f2: &'a (dyn Fn(&[f64]) -> f64 + Sync),
}

/// `|E_A - E_B| <= 3 * pooled SE + bias_constant * dt` for every functional; the
/// statistic is the worst ratio of difference to allowance.
pub fn marginal_agreement_test(
    a: &PathEnsemble,
    b: &PathEnsemble,
    functionals: &[Functional],
    bias_constant: f64,
) -> Result<StatTestResult> {
    let dt = a.dt.max(b.dt);
    let mut worst: f64 = 0.0;
    let mut worst_se = 0.0;
    let mut lines = Vec::new();
    for fnl in functionals {
        let (ma, sa, _) = two_time_moment(a, fnl.f1, fnl.f2, fnl.t1, fnl.t2 - fnl.t1)?;
        let (mb, sb, _) = two_time_moment(b, fnl.f1, fnl.f2, fnl.t1, fnl.t2 - fnl.t1)?;
        let se = (sa * sa + sb * sb).sqrt();
        let allowance = 3.0 * se + bias_constant * dt;
        let ratio = (ma - mb).abs() / allowance;
        lines.push(format!("{}: {ma:.4} vs {mb:.4} (allowance {allowance:.2e})", fnl.label));
        if ratio > worst || ratio.is_nan() {
            worst = if ratio.is_nan() { f64::INFINITY } else { ratio };
            worst_se = se;
        }
    }
    Ok(StatTestResult::new("marginal-agreement", worst, worst_se, 1.0, a.n_paths().min(b.n_paths()), lines.join("; ")))
}

/// Sample variance of coordinate `axis` at the final time against `target`:
/// the statistic is the deviation in units of `SE = sqrt(2 / (n - 1)) * target`.
pub fn variance_test(ens: &PathEnsemble, axis: usize, target: f64) -> StatTestResult {
    let xs = ens.coordinate(ens.n_times() - 1, axis);
    let (_, v) = mean_var(&xs);
    let se = (2.0 / (xs.len() as f64 - 1.0)).sqrt() * target;
    StatTestResult::new("variance", (v - target) / se, se, 3.0, xs.len(), format!("sample variance {v:.5} vs {target:.5}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{MatrixField, VectorField};
    use crate::validators::TestFunction;

    fn gaussian(d: usize) -> ScalarField {
        ScalarField::new(d, |x| (-x.iter().map(|v| v * v).sum::<f64>()).exp()).with_log_grad(|x, g| {
            for (gi, xi) in g.iter_mut().zip(x) {
                *gi = -2.0 * xi;
            }
        })
    }

    fn ou(d: usize) -> CoefficientSet {
        CoefficientSet::new(gaussian(d), ScalarField::constant(d, 1.0), MatrixField::identity(d), VectorField::zero(d)).unwrap()
    }

    fn rotating_ou() -> CoefficientSet {
        let c = MatrixField::constant(2, &[0.0, 1.0, -1.0, 0.0]).unwrap();
        CoefficientSet::with_stream(gaussian(2), ScalarField::constant(2, 1.0), MatrixField::identity(2), c).unwrap()
    }

    fn bump(d: usize, w: f64) -> ScalarField {
        TestFunction::bump_polynomial(vec![0.1; d], vec![w; d], 1.0, vec![0.3; d], vec![0.0; d * d]).field
    }

    #[test]
    fn zero_coefficients_give_constant_paths() {
        let one = ScalarField::constant(1, 1.0);
        let cs = CoefficientSet::new(one.clone(), one, MatrixField::constant(1, &[0.0]).unwrap(), VectorField::zero(1)).unwrap();
        let ens = simulate(&cs, &SimConfig::new(0.01, 1.0, 5, 3, InitialLaw::Point(vec![0.7]))).unwrap();
        assert!(ens.states.iter().all(|&v| v == 0.7));
    }

    #[test]
    fn ou_variance_relaxes_to_one_half() {
        let cfg = SimConfig::new(0.01, 3.0, 4000, 11, InitialLaw::Point(vec![0.0])).recording_only_at_end();
        let ens = simulate(&ou(1), &cfg).unwrap();
        assert_eq!(ens.n_times(), 2);
        let target = 0.5 * (1.0 - (-6.0f64).exp());
        // the EM stationary variance is 1 / (2 - dt), inside the 3-sigma band at this size
        assert!(variance_test(&ens, 0, target).passed);
    }

    #[test]
    fn taming_is_idle_for_lipschitz_drift_at_small_steps() {
        let cfg = SimConfig::new(1e-3, 1.0, 300, 12, InitialLaw::Stationary(Envelope::gaussian(0.8, 1.0)));
        let ens = simulate(&ou(2), &cfg).unwrap();
        assert_eq!(ens.summary().taming_activations, 0);
    }

    #[test]
    fn reproducible_and_independent_of_ensemble_size() {
        let cs = rotating_ou();
        let a = simulate(&cs, &SimConfig::new(0.01, 0.5, 8, 5, InitialLaw::Point(vec![0.3, -0.2]))).unwrap();
        let b = simulate(&cs, &SimConfig::new(0.01, 0.5, 8, 5, InitialLaw::Point(vec![0.3, -0.2]))).unwrap();
        let c = simulate(&cs, &SimConfig::new(0.01, 0.5, 3, 5, InitialLaw::Point(vec![0.3, -0.2]))).unwrap();
        assert_eq!(a, b);
        for p in 0..3 {
            for k in 0..a.n_times() {
                assert_eq!(a.state(p, k), c.state(p, k));
            }
        }
    }

    #[test]
    fn dual_direction_equals_negated_b() {
        let cs = rotating_ou();
        let neg = cs.clone().with_b(cs.b().negated());
        let cfg = SimConfig::new(0.01, 0.5, 4, 9, InitialLaw::Point(vec![0.3, -0.2]));
        let a = simulate(&cs, &cfg.clone().with_direction(Direction::Dual)).unwrap();
        let b = simulate(&neg, &cfg).unwrap();
        assert_eq!(a.states, b.states);
    }

    #[test]
    fn refuses_singular_start_and_invalid_configs() {
        let cs = ou(2);
        let psi = ScalarField::new(2, |x| 1.0 / x.iter().map(|v| v * v).sum::<f64>().sqrt()).with_singular(SingularSet::origin(2));
        let sing = CoefficientSet::new(gaussian(2), psi, MatrixField::identity(2), VectorField::zero(2)).unwrap();
        assert!(matches!(
            simulate(&sing, &SimConfig::new(0.01, 0.1, 1, 0, InitialLaw::Point(vec![0.0, 0.0]))),
            Err(Error::SingularPoint { .. })
        ));
        assert!(simulate(&cs, &SimConfig::new(0.2, 0.1, 1, 0, InitialLaw::Point(vec![0.0, 0.0]))).is_err());
        assert!(simulate(&cs, &SimConfig::new(0.03, 0.1, 1, 0, InitialLaw::Point(vec![0.0, 0.0]))).is_err());
        assert!(simulate(&cs, &SimConfig::new(0.01, 0.1, 0, 0, InitialLaw::Point(vec![0.0, 0.0]))).is_err());
        assert!(simulate(&cs, &SimConfig::new(0.01, 0.1, 1, 0, InitialLaw::Point(vec![0.0]))).is_err());
    }

    #[test]
    fn untamed_superlinear_drift_explodes_and_is_frozen() {
        let cs = ou(1).with_b(VectorField::new(1, |x, o| o[0] = x[0] * x[0] * x[0] + x[0]));
        let cfg = SimConfig::new(0.01, 2.0, 4, 1, InitialLaw::Point(vec![3.0])).with_taming(false);
        let ens = simulate(&cs, &cfg).unwrap();
        assert!(ens.diagnostics.iter().all(|d| d.exploded));
        assert!(ens.states.iter().all(|v| v.is_finite()));
        let tamed = simulate(&cs, &cfg.with_taming(true)).unwrap();
        assert!(tamed.diagnostics.iter().all(|d| !d.exploded && d.taming_activations > 0));
    }

    #[test]
    fn rejection_sampler_matches_ou_moments() {
        let cs = ou(2);
        let cfg = SimConfig::new(0.01, 0.01, 20_000, 2, InitialLaw::Stationary(Envelope::gaussian(0.8, 1.0)));
        let ens = simulate(&cs, &cfg).unwrap();
        for i in 0..2 {
            let (m, v) = mean_var(&ens.coordinate(0, i));
            assert!(m.abs() < 0.02 && (v - 0.5).abs() < 0.03, "{m} {v}");
        }
        let s = ens.summary();
        assert_eq!(s.envelope_violations, 0);
        // exp(-r^2) against exp(-r^2 / 1.28) in the plane: acceptance 1 / 1.28
        assert!((s.initial_acceptance_rate - 0.78125).abs() < 0.01, "{}", s.initial_acceptance_rate);
    }

    #[test]
    fn radial_power_and_cauchy_envelopes() {
        let d = 2;
        let psi = ScalarField::new(d, |x| 1.0 / x.iter().map(|v| v * v).sum::<f64>().sqrt()).with_singular(SingularSet::origin(d));
        let cs = CoefficientSet::new(gaussian(d), psi, MatrixField::identity(d), VectorField::zero(d)).unwrap();
        let env = Envelope::Gaussian { scale: 0.5f64.sqrt(), radial_power: 1.0, bound: 1.0 };
        let ens = simulate(&cs, &SimConfig::new(0.01, 0.01, 4000, 3, InitialLaw::Stationary(env))).unwrap();
        // the proposal equals the target exactly
        assert_eq!(ens.summary().initial_acceptance_rate, 1.0);
        let r: Vec<f64> = ens.live_paths().map(|p| ens.state(p, 0).iter().map(|v| v * v).sum::<f64>()).collect();
        // |x|^2 ~ Gamma(1/2, 1): mean 1/2
        assert!((mean_var(&r).0 - 0.5).abs() < 0.03);

        let rho = ScalarField::new(1, |x| (1.0 + x[0] * x[0]).powi(-2));
        let cs1 = CoefficientSet::new(rho, ScalarField::constant(1, 1.0), MatrixField::identity(1), VectorField::zero(1)).unwrap();
        let ens =
            simulate(&cs1, &SimConfig::new(0.01, 0.01, 20_000, 4, InitialLaw::Stationary(Envelope::Cauchy { scale: 1.0, bound: 1.0 })))
                .unwrap();
        let xs = ens.coordinate(0, 0);
        // P(|X| <= 1) = 1/2 + 1/pi under density (1 + x^2)^-2 / (pi / 2)
        let frac = xs.iter().filter(|x| x.abs() <= 1.0).count() as f64 / xs.len() as f64;
        assert!((frac - (0.5 + 1.0 / std::f64::consts::PI)).abs() < 0.015, "{frac}");
        assert!((ens.summary().initial_acceptance_rate - 0.5).abs() < 0.02);
    }

    #[test]
    fn martingale_statistic_trivial_and_detects_corruption() {
        let cs = ou(1);
        let cfg = SimConfig::new(0.01, 1.0, 2000, 7, InitialLaw::Point(vec![0.2]));
        let ens = simulate(&cs, &cfg).unwrap();
        let zero = ScalarField::constant(1, 0.0).with_grad(|_, o| o.fill(0.0)).with_hess(|_, o| o.fill(0.0));
        assert_eq!(martingale_test(&ens, &cs, &zero, &[0.5, 1.0]).unwrap().statistic, 0.0);
        let u = bump(1, 2.0);
        assert!(martingale_test(&ens, &cs, &u, &[0.5, 1.0]).unwrap().passed);
        let bad = cs.clone().with_extra_drift(VectorField::new(1, |_, o| o[0] = 0.5));
        let ens_bad = simulate(&bad, &cfg).unwrap();
        assert!(!martingale_test(&ens_bad, &cs, &u, &[1.0]).unwrap().passed);
        assert!(martingale_test(&ens, &cs, &u, &[0.505]).is_err());
    }

    #[test]
    fn quadratic_variation_of_brownian_motion() {
        let one = ScalarField::constant(1, 1.0);
        let bm = CoefficientSet::new(one.clone(), one.clone(), MatrixField::identity(1), VectorField::zero(1)).unwrap();
        let u = bump(1, 1.5);
        let ens = simulate(&bm, &SimConfig::new(0.005, 1.0, 2000, 8, InitialLaw::Point(vec![0.0]))).unwrap();
        let r = quadratic_variation_test(&ens, &bm, &u, 1.0).unwrap();
        assert!(r.passed, "{r:?}");
        let still = CoefficientSet::new(one.clone(), one, MatrixField::constant(1, &[0.0]).unwrap(), VectorField::zero(1)).unwrap();
        let ens = simulate(&still, &SimConfig::new(0.01, 1.0, 3, 8, InitialLaw::Point(vec![0.0]))).unwrap();
        assert_eq!(quadratic_variation_test(&ens, &still, &u, 1.0).unwrap().statistic, 0.0);
    }

    #[test]
    fn coupled_noise_refinement_shares_brownian_paths() {
        let one = ScalarField::constant(1, 1.0);
        let bm = CoefficientSet::new(one.clone(), one, MatrixField::identity(1), VectorField::zero(1)).unwrap();
        let coarse = simulate(&bm, &SimConfig::new(0.02, 1.0, 3, 4, InitialLaw::Point(vec![0.0])).with_noise_refinement(1)).unwrap();
        let fine = simulate(&bm, &SimConfig::new(0.01, 1.0, 3, 4, InitialLaw::Point(vec![0.0])).with_record_every(2)).unwrap();
        for (a, b) in coarse.states.iter().zip(&fine.states) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn martingale_trace_starts_at_zero_and_matches_the_test() {
        let cs = ou(1);
        let ens = simulate(&cs, &SimConfig::new(0.01, 0.5, 500, 5, InitialLaw::Point(vec![0.2])).with_record_every(10)).unwrap();
        let u = bump(1, 1.5);
        let trace = martingale_trace(&ens, &cs, &u);
        assert_eq!(trace.len(), ens.n_times());
        assert_eq!(trace[0], (0.0, 0.0, 0.0));
        let r = martingale_test(&ens, &cs, &u, &[0.5]).unwrap();
        let (_, m, se) = trace[trace.len() - 1];
        assert!((r.statistic - m / se).abs() < 1e-12);
    }

    #[test]
    fn ks_distance_basics() {
        let a = [0.1, 0.2, 0.3, 0.4];
        assert_eq!(ks_distance(&a, &a), 0.0);
        assert_eq!(ks_distance(&a, &[1.0, 2.0]), 1.0);
        assert!((ks_distance(&[1.0, 2.0, 3.0, 4.0], &[2.5, 3.5]) - 0.5).abs() < 1e-15);
        assert!((ks_threshold(100, 100) - 1.8176 * 0.02f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn invariance_at_time_zero_and_after_relaxation() {
        let cs = ou(2);
        let cfg = SimConfig::new(0.01, 0.5, 5000, 21, InitialLaw::Stationary(Envelope::gaussian(0.8, 1.0))).with_record_every(50);
        let ens = simulate(&cs, &cfg).unwrap();
        let (lo, hi) = (vec![-3.0, -3.0], vec![3.0, 3.0]);
        let z = std::f64::consts::PI;
        assert!(empirical_invariance_test(&ens, &cs, z, 0.0, &lo, &hi, 30).unwrap().passed);
        assert!(empirical_invariance_test(&ens, &cs, z, 0.5, &lo, &hi, 30).unwrap().passed);
        let shifted = cs.clone().with_extra_drift(VectorField::new(2, |_, o| {
            o[0] = 0.5;
            o[1] = 0.0;
        }));
        let bad = simulate(&shifted, &cfg).unwrap();
        assert!(!empirical_invariance_test(&bad, &cs, z, 0.5, &lo, &hi, 30).unwrap().passed);
    }

    #[test]
    fn reversal_and_two_time_diagnostic() {
        let cs = rotating_ou();
        let cfg = SimConfig::new(0.01, 1.0, 4000, 31, InitialLaw::Stationary(Envelope::gaussian(0.8, 1.0))).with_record_every(10);
        let fwd = simulate(&cs, &cfg).unwrap();
        let dual = simulate(&cs, &SimConfig { seed: 32, ..cfg.clone() }.with_direction(Direction::Dual)).unwrap();
        assert!(time_reversal_test(&fwd, &dual, &[0.0, 0.5, 1.0]).unwrap().passed);
        let f = |x: &[f64]| x[0];
        let g = |x: &[f64]| x[1];
        let rev = fwd.reversed();
        assert!(!two_time_diagnostic(&fwd, &rev, &f, &g, 0.2, 0.5).unwrap().passed);
        assert!(two_time_diagnostic(&rev, &dual, &f, &g, 0.2, 0.5).unwrap().passed);
        assert_eq!(rev.reversed().states, fwd.states);
    }

    #[test]
    fn em_agrees_with_exact_transitions() {
        let cs = ou(1);
        let cfg = SimConfig::new(0.01, 1.0, 4000, 41, InitialLaw::Point(vec![0.5])).with_record_every(25);
        let em = simulate(&cs, &cfg).unwrap();
        let starts = vec![vec![0.5]; 4000];
        let exact = exact_ou_ensemble(1, 1.0, 0.5, &em.times, &starts, 42);
        let id = |x: &[f64]| x[0];
        let sq = |x: &[f64]| x[0] * x[0];
        let one = |_: &[f64]| 1.0;
        let fs = [
            Functional { label: "x(1)", t1: 0.0, t2: 1.0, f1: &one, f2: &id },
            Functional { label: "x(0.5)x(1)", t1: 0.5, t2: 1.0, f1: &id, f2: &id },
            Functional { label: "x(0.25)^2", t1: 0.0, t2: 0.25, f1: &one, f2: &sq },
        ];
        assert!(marginal_agreement_test(&em, &exact, &fs, 1.0).unwrap().passed);
        let bad = simulate(&cs.clone().with_extra_drift(VectorField::new(1, |_, o| o[0] = 0.5)), &cfg).unwrap();
        assert!(!marginal_agreement_test(&bad, &exact, &fs, 1.0).unwrap().passed);
    }

    #[test]
    fn csv_export_layout() {
        let ens = simulate(&ou(2), &SimConfig::new(0.5, 1.0, 2, 1, InitialLaw::Point(vec![0.0, 1.0]))).unwrap();
        let mut buf = Vec::new();
        ens.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "path_id,t,x_1,x_2");
        assert_eq!(lines.len(), 1 + 2 * 3);
        assert!(lines[1].starts_with("0,0,0.0"));
    }
}
