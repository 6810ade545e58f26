//! Numerical checks of the structural assumptions.
//!
//! Integral identities are tested against a battery of compactly supported smooth
//! functions and evaluated with [`crate::quadrature`]; tail conditions are sampled
//! on a finite shell `N0 < |x| <= R_max`, so a pass only certifies that range.

use serde::{Deserialize, Serialize};

use crate::coefficients::{CoefficientSet, Direction, MeasureDensity};
use crate::error::{Error, Result};
use crate::field::ScalarField;
use crate::par;
use crate::qmc::{points_in_box, points_in_shell};
use crate::quadrature::{gauss_legendre, integrate, QuadratureSpec};
use crate::report::{ReportEntry, ValidationReport};

/// Tolerance of the integral identities.
pub const INTEGRAL_TOLERANCE: f64 = 1e-6;
/// Slack allowed on sampled inequalities.
pub const INEQUALITY_SLACK: f64 = 1e-10;

/// Smooth function supported in the box `[lo, hi]`.
#[derive(Clone, Debug)]
pub struct TestFunction {
    pub field: ScalarField,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

/// `exp(-1/(1-t^2))` and the first two derivatives of its logarithm.
fn bump_log(t: f64) -> Option<(f64, f64, f64)> {
    let s = 1.0 - t * t;
    if s <= 0.0 {
        return None;
    }
    let q1 = -2.0 * t / (s * s);
    let q2 = -2.0 / (s * s) - 8.0 * t * t / (s * s * s);
    Some(((-1.0 / s).exp(), q1, q2))
}

impl TestFunction {
    /// `P(x) * prod_i exp(-1/(1 - t_i^2))`, `t_i = (x_i - c_i) / w_i`, with the quadratic
    /// `P(x) = p0 + <g, y> + 1/2 <y, Q y>`, `y = x - c`.
    pub fn bump_polynomial(centre: Vec<f64>, width: Vec<f64>, p0: f64, g: Vec<f64>, q: Vec<f64>) -> Self {
        let d = centre.len();
        assert!(width.len() == d && g.len() == d && q.len() == d * d);
        let lo: Vec<f64> = (0..d).map(|i| centre[i] - width[i]).collect();
        let hi: Vec<f64> = (0..d).map(|i| centre[i] + width[i]).collect();
        let parts = std::sync::Arc::new((centre, width, p0, g, q));

        // value, gradient, Hessian in one pass; None outside the support
        let eval = move |x: &[f64], grad: Option<&mut [f64]>, hess: Option<&mut [f64]>| -> f64 {
            let (c, w, p0, g, q) = &*parts;
            let mut phi = 1.0;
            let mut q1 = vec![0.0; d];
            let mut q2 = vec![0.0; d];
            for i in 0..d {
                match bump_log((x[i] - c[i]) / w[i]) {
                    Some((v, a, b)) => {
                        phi *= v;
                        q1[i] = a / w[i];
                        q2[i] = b / (w[i] * w[i]);
                    }
                    None => {
                        if let Some(gr) = grad {
                            gr.fill(0.0);
                        }
                        if let Some(h) = hess {
                            h.fill(0.0);
                        }
                        return 0.0;
                    }
                }
            }
            let y: Vec<f64> = (0..d).map(|i| x[i] - c[i]).collect();
            let qy: Vec<f64> = (0..d).map(|i| (0..d).map(|j| q[i * d + j] * y[j]).sum()).collect();
            let p = p0 + (0..d).map(|i| g[i] * y[i] + 0.5 * y[i] * qy[i]).sum::<f64>();
            let dp: Vec<f64> = (0..d).map(|i| g[i] + qy[i]).collect();
            if let Some(gr) = grad {
                for i in 0..d {
                    gr[i] = phi * (dp[i] + p * q1[i]);
                }
            }
            if let Some(h) = hess {
                for i in 0..d {
                    for j in 0..d {
                        let dphi_ij = if i == j { q1[i] * q1[i] + q2[i] } else { q1[i] * q1[j] };
                        h[i * d + j] = phi * (q[i * d + j] + dp[i] * q1[j] + dp[j] * q1[i] + p * dphi_ij);
                    }
                }
            }
            p * phi
        };
        let e1 = eval.clone();
        let e2 = eval.clone();
        let e3 = eval;
        let field = ScalarField::new(d, move |x| e1(x, None, None))
            .with_grad(move |x, out| {
                e2(x, Some(out), None);
            })
            .with_hess(move |x, out| {
                e3(x, None, Some(out));
            });
        Self { field, lo, hi }
    }

    /// `prod_i (1 - t_i^2)^k`, `t_i = (x_i - c_i) / w_i`: only `C^(k-1)`, but with tame
    /// derivatives, which keeps finite-difference error studies in their asymptotic range.
    pub fn polynomial_cutoff(centre: Vec<f64>, width: Vec<f64>, k: i32) -> Self {
        let d = centre.len();
        assert!(width.len() == d && k >= 3);
        let lo: Vec<f64> = (0..d).map(|i| centre[i] - width[i]).collect();
        let hi: Vec<f64> = (0..d).map(|i| centre[i] + width[i]).collect();
        let kf = k as f64;
        // per-axis value and first two derivatives in x
        let axes = move |x: &[f64]| -> Vec<[f64; 3]> {
            (0..d)
                .map(|i| {
                    let t = (x[i] - centre[i]) / width[i];
                    let s = 1.0 - t * t;
                    if s <= 0.0 {
                        return [0.0; 3];
                    }
                    let w = width[i];
                    let d1 = -2.0 * kf * t * s.powi(k - 1) / w;
                    let d2 = (-2.0 * kf * s.powi(k - 1) + 4.0 * kf * (kf - 1.0) * t * t * s.powi(k - 2)) / (w * w);
                    [s.powi(k), d1, d2]
                })
                .collect()
        };
        let (a1, a2) = (axes.clone(), axes.clone());
        let field = ScalarField::new(d, move |x| axes(x).iter().map(|a| a[0]).product())
            .with_grad(move |x, out| {
                let a = a1(x);
                for (i, o) in out.iter_mut().enumerate() {
                    *o = (0..d).map(|m| if m == i { a[m][1] } else { a[m][0] }).product();
                }
            })
            .with_hess(move |x, out| {
                let a = a2(x);
                for i in 0..d {
                    for j in 0..d {
                        out[i * d + j] = (0..d)
                            .map(|m| match (m == i, m == j) {
                                (true, true) => a[m][2],
                                (true, false) | (false, true) => a[m][1],
                                _ => a[m][0],
                            })
                            .product();
                    }
                }
            });
        Self { field, lo, hi }
    }
}

/// Twelve bump-times-quadratic functions with overlapping supports.
#[derive(Clone, Debug)]
pub struct TestFunctionBattery {
    pub functions: Vec<TestFunction>,
}

impl TestFunctionBattery {
    pub const SIZE: usize = 12;

    /// Centres spiral out from the origin up to about `0.7 * spread`; half-widths lie
    /// in `[0.7, 1.3] * spread`.
    pub fn standard(dim: usize, spread: f64) -> Self {
        let mut functions = Vec::with_capacity(Self::SIZE);
        for j in 0..Self::SIZE {
            let jf = j as f64;
            let radius = 0.7 * spread * jf / (Self::SIZE - 1) as f64;
            let centre: Vec<f64> = (0..dim).map(|i| radius * (2.4 * jf + 1.3 * i as f64).cos()).collect();
            let width: Vec<f64> = (0..dim).map(|i| spread * (1.0 + 0.3 * (jf + 2.0 * i as f64).sin())).collect();
            let g: Vec<f64> = if j % 3 == 0 { vec![0.0; dim] } else { (0..dim).map(|i| 0.4 * (jf + i as f64).sin() / spread).collect() };
            let mut q = vec![0.0; dim * dim];
            if j % 2 == 1 {
                for a in 0..dim {
                    for b in 0..dim {
                        q[a * dim + b] = 0.25 * ((jf * (a + b + 1) as f64).cos()) / (spread * spread);
                    }
                }
            }
            functions.push(TestFunction::bump_polynomial(centre, width, 1.0, g, q));
        }
        Self { functions }
    }

    pub fn len(&self) -> usize {
        self.functions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.functions.is_empty()
    }

    /// Twenty `(f, g)` index pairs: eight diagonal pairs and twelve neighbours.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let n = self.len();
        let mut p: Vec<(usize, usize)> = (0..n.min(8)).map(|i| (i, i)).collect();
        p.extend((0..n).map(|i| (i, (i + 1) % n)));
        p
    }
}

/// `int <B, grad u> psi rho dx` and `int |.|` over `[lo, hi]`.
pub fn divergence_integral(cs: &CoefficientSet, u: &ScalarField, lo: &[f64], hi: &[f64], spec: &QuadratureSpec) -> Result<(f64, f64)> {
    let d = cs.dim();
    let integrand = |x: &[f64], out: &mut [f64]| {
        let mut g = vec![0.0; d];
        if u.gradient_into(x, &mut g).is_err() {
            out[0] = f64::NAN;
            return;
        }
        if g.iter().all(|v| *v == 0.0) {
            out[0] = 0.0;
            return;
        }
        let b = cs.b().eval(x);
        let w = cs.psi().value(x) * cs.rho().value(x);
        out[0] = w * b.iter().zip(&g).map(|(p, q)| p * q).sum::<f64>();
    };
    let r = integrate(&integrand, 1, lo, hi, cs.singular(), spec)?;
    Ok((r.values[0], r.abs[0]))
}

/// `int L u psi rho dx` (forward generator) and `int |.|`.
pub fn invariance_integral(cs: &CoefficientSet, u: &ScalarField, lo: &[f64], hi: &[f64], spec: &QuadratureSpec) -> Result<(f64, f64)> {
    let integrand = |x: &[f64], out: &mut [f64]| {
        if u.value(x) == 0.0 && u.gradient(x).map(|g| g.iter().all(|v| *v == 0.0)).unwrap_or(false) {
            out[0] = 0.0;
            return;
        }
        out[0] = match cs.generator_apply(u, x, Direction::Forward) {
            Ok(l) => l * cs.psi().value(x) * cs.rho().value(x),
            Err(_) => f64::NAN,
        };
    };
    let r = integrate(&integrand, 1, lo, hi, cs.singular(), spec)?;
    Ok((r.values[0], r.abs[0]))
}

fn battery_check(
    id: &str,
    cs: &CoefficientSet,
    battery: &TestFunctionBattery,
    spec: &QuadratureSpec,
    integral: fn(&CoefficientSet, &ScalarField, &[f64], &[f64], &QuadratureSpec) -> Result<(f64, f64)>,
) -> Result<ReportEntry> {
    let results = par::map(&battery.functions, |t| integral(cs, &t.field, &t.lo, &t.hi, spec));
    let mut worst: f64 = 0.0;
    let mut arg = 0;
    for (j, r) in results.into_iter().enumerate() {
        let (v, s) = r?;
        let m = v.abs() / (1.0 + s);
        if m > worst || m.is_nan() {
            worst = if m.is_nan() { f64::INFINITY } else { m };
            arg = j;
        }
    }
    Ok(ReportEntry::judged(
        id,
        worst,
        spec.tolerance,
        format!("max over {} test functions of |I(u)| / (1 + int |integrand|); worst at function {arg}", battery.len()),
    ))
}

/// `int <B, grad u> d mu_hat = 0` for the battery.
pub fn check_divergence_free(cs: &CoefficientSet, battery: &TestFunctionBattery, spec: &QuadratureSpec) -> Result<ReportEntry> {
    battery_check("divergence-free", cs, battery, spec, divergence_integral)
}

/// `int L u d mu_hat = 0` for the battery.
pub fn check_infinitesimal_invariance(cs: &CoefficientSet, battery: &TestFunctionBattery, spec: &QuadratureSpec) -> Result<ReportEntry> {
    battery_check("infinitesimal-invariance", cs, battery, spec, invariance_integral)
}

/// Energy `1/2 int <A_hat grad f, grad g> d mu_hat` and `int (L0 f) g d mu_hat`,
/// each with the integral of its absolute integrand.
pub fn integration_by_parts_terms(
    cs: &CoefficientSet,
    f: &TestFunction,
    g: &TestFunction,
    spec: &QuadratureSpec,
) -> Result<[(f64, f64); 2]> {
    let d = cs.dim();
    let lo: Vec<f64> = (0..d).map(|i| f.lo[i].max(g.lo[i])).collect();
    let hi: Vec<f64> = (0..d).map(|i| f.hi[i].min(g.hi[i])).collect();
    if (0..d).any(|i| lo[i] >= hi[i]) {
        return Ok([(0.0, 0.0), (0.0, 0.0)]);
    }
    let integrand = |x: &[f64], out: &mut [f64]| {
        let gv = g.field.value(x);
        let (Ok(df), Ok(dg)) = (f.field.gradient(x), g.field.gradient(x)) else {
            out.fill(f64::NAN);
            return;
        };
        if gv == 0.0 && dg.iter().all(|v| *v == 0.0) {
            out.fill(0.0);
            return;
        }
        let w = cs.psi().value(x) * cs.rho().value(x);
        let (Ok(ah), Ok(l0f)) = (cs.a_hat(x), cs.symmetric_generator_apply(&f.field, x)) else {
            out.fill(f64::NAN);
            return;
        };
        let mut e = 0.0;
        for i in 0..d {
            for j in 0..d {
                e += ah[i * d + j] * df[j] * dg[i];
            }
        }
        out[0] = 0.5 * e * w;
        out[1] = l0f * gv * w;
    };
    let r = integrate(&integrand, 2, &lo, &hi, cs.singular(), spec)?;
    Ok([(r.values[0], r.abs[0]), (r.values[1], r.abs[1])])
}

/// `E0(f, g) = -int (L0 f) g d mu_hat`; metric is `|E + R| / (int|E| + int|R|)`.
pub fn check_integration_by_parts(cs: &CoefficientSet, f: &TestFunction, g: &TestFunction, spec: &QuadratureSpec) -> Result<ReportEntry> {
    let [(e, se), (r, sr)] = integration_by_parts_terms(cs, f, g, spec)?;
    let scale = se + sr;
    let metric = if scale > 0.0 { (e + r).abs() / scale } else { 0.0 };
    Ok(ReportEntry::judged("integration-by-parts", metric, spec.tolerance, format!("E0(f,g) = {e:.6e}, -int (L0 f) g dmu = {:.6e}", -r)))
}

/// Integration by parts over all battery pairs, reported as one entry.
pub fn check_integration_by_parts_battery(
    cs: &CoefficientSet,
    battery: &TestFunctionBattery,
    spec: &QuadratureSpec,
) -> Result<ReportEntry> {
    let pairs = battery.pairs();
    let entries = par::map(&pairs, |&(i, j)| check_integration_by_parts(cs, &battery.functions[i], &battery.functions[j], spec));
    let mut worst: f64 = 0.0;
    for e in entries {
        let e = e?;
        worst = worst.max(if e.metric.is_nan() { f64::INFINITY } else { e.metric });
    }
    Ok(ReportEntry::judged(
        "integration-by-parts",
        worst,
        spec.tolerance,
        format!("max relative residual |E0(f,g) + int (L0 f) g dmu| over {} pairs", pairs.len()),
    ))
}

/// Which matrix `check_ellipticity` inspects.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EllipticityTarget {
    A,
    AHat,
}

/// Smallest and largest eigenvalue of `A` (or `A_hat`) over quasi-random points.
/// The metric is `1 / lambda_min`, infinite when `lambda_min <= 0`.
pub fn check_ellipticity(
    cs: &CoefficientSet,
    lo: &[f64],
    hi: &[f64],
    n_samples: usize,
    target: EllipticityTarget,
) -> Result<(f64, f64, ReportEntry)> {
    if n_samples < 100 {
        return Err(Error::invalid("ellipticity check needs at least 100 samples"));
    }
    let d = cs.dim();
    let (mut lmin, mut lmax) = (f64::INFINITY, f64::NEG_INFINITY);
    for x in points_in_box(lo, hi, n_samples) {
        if cs.singular().contains(&x) {
            continue;
        }
        let m = match target {
            EllipticityTarget::A => cs.a().eval(&x),
            EllipticityTarget::AHat => cs.a_hat(&x)?,
        };
        let eig = nalgebra::SymmetricEigen::new(nalgebra::DMatrix::from_row_slice(d, d, &m));
        for &ev in eig.eigenvalues.iter() {
            lmin = lmin.min(ev);
            lmax = lmax.max(ev);
        }
    }
    let metric = if lmin > 0.0 { 1.0 / lmin } else { f64::INFINITY };
    let entry = ReportEntry::judged(
        "ellipticity",
        metric,
        1e12,
        format!("{:?} eigenvalues in [{lmin:.6e}, {lmax:.6e}] over {n_samples} points; metric 1/lambda_min", target),
    );
    Ok((lmin, lmax, entry))
}

/// Parameters of a tail condition, checked on `N0 < |x| <= R_max`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailRange {
    pub m: f64,
    pub n0: f64,
    pub r_max: f64,
    pub n_samples: usize,
}

impl TailRange {
    /// `R_max = 10 N0`, 4000 samples.
    pub fn new(m: f64, n0: f64) -> Self {
        Self { m, n0, r_max: 10.0 * n0, n_samples: 4000 }
    }
}

/// `L u` for `u = ln|x|^2 + 2` at `|x| > N0`:
/// `tr A_hat / r^2 - 2 <A_hat x, x> / r^4 + 2 <G, x> / r^2`.
pub fn lyapunov_generator(cs: &CoefficientSet, x: &[f64], direction: Direction) -> Result<f64> {
    let d = cs.dim();
    let ah = cs.a_hat(x)?;
    let g = cs.drift(x, direction)?;
    let r2: f64 = x.iter().map(|v| v * v).sum();
    let tr: f64 = (0..d).map(|i| ah[i * d + i]).sum();
    let mut axx = 0.0;
    for i in 0..d {
        for j in 0..d {
            axx += x[i] * ah[i * d + j] * x[j];
        }
    }
    let gx: f64 = g.iter().zip(x).map(|(p, q)| p * q).sum();
    Ok(tr / r2 - 2.0 * axx / (r2 * r2) + 2.0 * gx / r2)
}

fn sampled_max(cs: &CoefficientSet, range: &TailRange, f: impl Fn(&[f64]) -> Result<f64>) -> Result<(f64, Vec<f64>)> {
    let mut worst = f64::NEG_INFINITY;
    let mut at = Vec::new();
    for x in points_in_shell(cs.dim(), range.n0, range.r_max, range.n_samples) {
        if cs.singular().contains(&x) {
            continue;
        }
        let v = f(&x)?;
        if v > worst || v.is_nan() {
            worst = if v.is_nan() { f64::INFINITY } else { v };
            at = x;
        }
    }
    Ok((worst, at))
}

/// `L u <= M u` (or `L' u <= M u`) with `u = ln(|x|^2 v N0^2) + 2`.
pub fn check_lyapunov_conservative(cs: &CoefficientSet, range: &TailRange, direction: Direction) -> Result<ReportEntry> {
    if !(range.m > 0.0) || !(range.n0 >= 1.0) {
        return Err(Error::invalid("Lyapunov check needs M > 0 and N0 >= 1"));
    }
    let (worst, at) = sampled_max(cs, range, |x| {
        let r2: f64 = x.iter().map(|v| v * v).sum();
        let u = r2.ln() + 2.0;
        Ok(lyapunov_generator(cs, x, direction)? - range.m * u)
    })?;
    let id = match direction {
        Direction::Forward => "lyapunov-forward",
        Direction::Dual => "lyapunov-dual",
    };
    Ok(ReportEntry::judged(
        id,
        worst,
        INEQUALITY_SLACK,
        format!(
            "max of Lu - Mu verified on N0 = {} < |x| <= R_max = {} with {} samples, M = {}; worst at {:?}",
            range.n0, range.r_max, range.n_samples, range.m, at
        ),
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GrowthVariant {
    /// `-<A_hat x,x>/r^2 + tr A_hat / 2 + <G, x> <= M r^2 (ln r + 1)`.
    GForm,
    /// As `GForm` with `beta + B`.
    BPlus,
    /// As `GForm` with `beta - B`.
    BMinus,
    /// `<A x, x> / (psi r^2) + |<B, x>| <= M r^2 ln(r + 1)`.
    DivfreeForm,
}

impl GrowthVariant {
    pub fn id(self) -> &'static str {
        match self {
            GrowthVariant::GForm => "growth-g-form",
            GrowthVariant::BPlus => "growth-b-plus",
            GrowthVariant::BMinus => "growth-b-minus",
            GrowthVariant::DivfreeForm => "growth-divfree-form",
        }
    }
}

/// Left minus right side of the growth condition at `x`.
pub fn growth_margin(cs: &CoefficientSet, variant: GrowthVariant, m: f64, x: &[f64]) -> Result<f64> {
    let d = cs.dim();
    let ah = cs.a_hat(x)?;
    let r2: f64 = x.iter().map(|v| v * v).sum();
    let r = r2.sqrt();
    let mut axx = 0.0;
    for i in 0..d {
        for j in 0..d {
            axx += x[i] * ah[i * d + j] * x[j];
        }
    }
    let dot = |v: &[f64]| -> f64 { v.iter().zip(x).map(|(p, q)| p * q).sum() };
    match variant {
        GrowthVariant::DivfreeForm => {
            let bx = dot(&cs.b().eval(x));
            Ok(axx / r2 + bx.abs() - m * r2 * (r + 1.0).ln())
        }
        _ => {
            let dir = if variant == GrowthVariant::BMinus { Direction::Dual } else { Direction::Forward };
            let gx = dot(&cs.drift(x, dir)?);
            let tr: f64 = (0..d).map(|i| ah[i * d + i]).sum();
            Ok(-axx / r2 + 0.5 * tr + gx - m * r2 * (r.ln() + 1.0))
        }
    }
}

pub fn check_growth_condition(cs: &CoefficientSet, variant: GrowthVariant, range: &TailRange) -> Result<ReportEntry> {
    let (worst, at) = sampled_max(cs, range, |x| growth_margin(cs, variant, range.m, x))?;
    Ok(ReportEntry::judged(
        variant.id(),
        worst,
        INEQUALITY_SLACK,
        format!(
            "max of LHS - RHS verified on N0 = {} < |x| <= R_max = {} with {} samples, M = {}; worst at {:?}",
            range.n0, range.r_max, range.n_samples, range.m, at
        ),
    ))
}

/// `mu_hat(B_{4n} \ B_{2n})` by polar quadrature (`d <= 3`) or quasi-Monte Carlo.
pub fn annulus_mass(measure: &MeasureDensity, dim: usize, n: usize) -> f64 {
    let (r0, r1) = (2.0 * n as f64, 4.0 * n as f64);
    let (rn, rw) = gauss_legendre(64);
    let radial = |r_at: &dyn Fn(f64) -> f64| -> f64 {
        rn.iter()
            .zip(&rw)
            .map(|(t, w)| {
                let r = 0.5 * (r0 + r1) + 0.5 * (r1 - r0) * t;
                0.5 * (r1 - r0) * w * r_at(r)
            })
            .sum()
    };
    match dim {
        1 => radial(&|r| measure.value(&[r]) + measure.value(&[-r])),
        2 => {
            let k = 256;
            radial(&|r| {
                let s: f64 = (0..k)
                    .map(|j| {
                        let th = 2.0 * std::f64::consts::PI * (j as f64 + 0.5) / k as f64;
                        measure.value(&[r * th.cos(), r * th.sin()])
                    })
                    .sum();
                s * 2.0 * std::f64::consts::PI / k as f64 * r
            })
        }
        3 => {
            let (cn, cw) = gauss_legendre(48);
            let k = 96;
            radial(&|r| {
                let mut s = 0.0;
                for (c, w) in cn.iter().zip(&cw) {
                    let sn = (1.0 - c * c).sqrt();
                    for j in 0..k {
                        let ph = 2.0 * std::f64::consts::PI * (j as f64 + 0.5) / k as f64;
                        s += w * measure.value(&[r * sn * ph.cos(), r * sn * ph.sin(), r * c]);
                    }
                }
                s * 2.0 * std::f64::consts::PI / k as f64 * r * r
            })
        }
        _ => {
            let pts = points_in_shell(dim, r0, r1, 200_000);
            // points are uniform in radius, so weight by the shell density r^(d-1)
            let unit_sphere = 2.0 * std::f64::consts::PI.powf(dim as f64 / 2.0) / gamma(dim as f64 / 2.0);
            let mean: f64 = pts
                .iter()
                .map(|x| {
                    let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                    measure.value(x) * r.powi(dim as i32 - 1)
                })
                .sum::<f64>()
                / pts.len() as f64;
            mean * unit_sphere * (r1 - r0)
        }
    }
}

/// Lanczos approximation of the Gamma function (positive arguments).
pub fn gamma(x: f64) -> f64 {
    const G: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        return std::f64::consts::PI / ((std::f64::consts::PI * x).sin() * gamma(1.0 - x));
    }
    let x = x - 1.0;
    let t = x + 7.5;
    let mut a = G[0];
    for (i, g) in G.iter().enumerate().skip(1) {
        a += g / (x + i as f64);
    }
    (2.0 * std::f64::consts::PI).sqrt() * t.powf(x + 0.5) * (-t).exp() * a
}

/// `mu_hat(B_{4n} \ B_{2n}) <= (4n)^c` for `n = 1..n_max` (5% allowance).
pub fn check_annulus_volume(measure: &MeasureDensity, dim: usize, c: f64, n_max: usize) -> Result<ReportEntry> {
    if !(c > 0.0) {
        return Err(Error::invalid("annulus exponent c must be positive"));
    }
    let mut worst: f64 = 0.0;
    for n in 1..=n_max {
        let ratio = annulus_mass(measure, dim, n) / (4.0 * n as f64).powf(c);
        worst = worst.max(ratio);
    }
    Ok(ReportEntry::judged("annulus-volume", worst, 1.05, format!("max over n = 1..{n_max} of mu(B_4n minus B_2n) / (4n)^{c}")))
}

/// Mass of `psi rho / Z` on the envelope box must lie in `[0.99, 1.01]`.
pub fn check_normalization(measure: &MeasureDensity, lo: &[f64], hi: &[f64], spec: &QuadratureSpec) -> Result<ReportEntry> {
    let z = measure.normalization.ok_or_else(|| Error::invalid("normalization check needs a finite measure"))?;
    let f = |x: &[f64], out: &mut [f64]| out[0] = measure.value(x) / z;
    // wide boxes are tiled so each Gauss rule sees a cell of side <= 2
    let cells: Vec<usize> = lo.iter().zip(hi).map(|(a, b)| ((b - a) / 2.0).ceil().max(1.0) as usize).collect();
    let total: usize = cells.iter().product();
    let tiles: Vec<usize> = (0..total).collect();
    let parts = par::map(&tiles, |&t| {
        let (mut clo, mut chi) = (lo.to_vec(), hi.to_vec());
        let mut rest = t;
        for i in 0..lo.len() {
            let k = rest % cells[i];
            rest /= cells[i];
            let w = (hi[i] - lo[i]) / cells[i] as f64;
            clo[i] = lo[i] + k as f64 * w;
            chi[i] = clo[i] + w;
        }
        integrate(&f, 1, &clo, &chi, measure.density.singular(), spec).map(|r| r.values[0])
    });
    let mut mass = 0.0;
    for p in parts {
        mass += p?;
    }
    Ok(ReportEntry::judged("normalization", (mass - 1.0).abs(), 0.01, format!("int psi rho / Z over the envelope box = {mass:.9}")))
}

/// What a scenario asks the validator battery to run.
#[derive(Clone, Debug)]
pub struct ValidationPlan {
    pub battery: TestFunctionBattery,
    pub quadrature: QuadratureSpec,
    pub ellipticity_box: (Vec<f64>, Vec<f64>),
    pub lyapunov: TailRange,
    pub growth: TailRange,
    /// Extra growth variant for divergence-free drifts.
    pub divfree_growth: Option<TailRange>,
    /// Envelope box for the normalization check of finite measures.
    pub normalization_box: Option<(Vec<f64>, Vec<f64>)>,
    pub normalization: Option<f64>,
    /// `(c, n_max)` for the annulus bound.
    pub annulus: Option<(f64, usize)>,
    /// Advisory entries computed by the scenario itself.
    pub advisories: Vec<ReportEntry>,
}

/// Runs the full battery; errors in individual checks become failing entries.
pub fn run_validation(cs: &CoefficientSet, plan: &ValidationPlan) -> ValidationReport {
    let mut report = ValidationReport::new();
    let mut push = |id: &str, r: Result<ReportEntry>| {
        report.push(r.unwrap_or_else(|e| ReportEntry::judged(id, f64::INFINITY, 0.0, format!("error: {e}"))));
    };
    let (lo, hi) = &plan.ellipticity_box;
    push("ellipticity", check_ellipticity(cs, lo, hi, 1000, EllipticityTarget::A).map(|t| t.2));
    push("divergence-free", check_divergence_free(cs, &plan.battery, &plan.quadrature));
    push("infinitesimal-invariance", check_infinitesimal_invariance(cs, &plan.battery, &plan.quadrature));
    push("integration-by-parts", check_integration_by_parts_battery(cs, &plan.battery, &plan.quadrature));
    push("lyapunov-forward", check_lyapunov_conservative(cs, &plan.lyapunov, Direction::Forward));
    push("lyapunov-dual", check_lyapunov_conservative(cs, &plan.lyapunov, Direction::Dual));
    push("growth-b-plus", check_growth_condition(cs, GrowthVariant::BPlus, &plan.growth));
    push("growth-b-minus", check_growth_condition(cs, GrowthVariant::BMinus, &plan.growth));
    if let Some(range) = &plan.divfree_growth {
        push("growth-divfree-form", check_growth_condition(cs, GrowthVariant::DivfreeForm, range));
    }
    let measure = cs.measure_density(plan.normalization);
    if let (Some((lo, hi)), Some(_)) = (&plan.normalization_box, plan.normalization) {
        push("normalization", check_normalization(&measure, lo, hi, &plan.quadrature));
    }
    if let Some((c, n_max)) = plan.annulus {
        push("annulus-volume", check_annulus_volume(&measure, cs.dim(), c, n_max));
    }
    for a in &plan.advisories {
        report.push(a.clone());
    }
    report.psi_floor_activations = cs.floor_activations();
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{fd_gradient, fd_hessian, MatrixField, VectorField};
    use crate::report::Status;
    use proptest::prelude::*;

    fn norm2(x: &[f64]) -> f64 {
        x.iter().map(|v| v * v).sum()
    }

    fn gaussian(d: usize) -> ScalarField {
        ScalarField::new(d, |x| (-norm2(x)).exp()).with_log_grad(|x, g| {
            for (gi, xi) in g.iter_mut().zip(x) {
                *gi = -2.0 * xi;
            }
        })
    }

    fn ou(d: usize) -> CoefficientSet {
        CoefficientSet::new(gaussian(d), ScalarField::constant(d, 1.0), MatrixField::identity(d), VectorField::zero(d)).unwrap()
    }

    fn rotating_ou() -> CoefficientSet {
        let c = MatrixField::constant(2, &[0.0, 2.0, -2.0, 0.0]).unwrap();
        CoefficientSet::with_stream(gaussian(2), ScalarField::constant(2, 1.0), MatrixField::identity(2), c).unwrap()
    }

    fn spec2() -> QuadratureSpec {
        QuadratureSpec::for_dim(2)
    }

    #[test]
    fn bump_derivatives_match_finite_differences() {
        let b = TestFunctionBattery::standard(2, 1.5);
        for t in &b.functions {
            for x in points_in_box(&t.lo, &t.hi, 20) {
                let g = t.field.gradient(&x).unwrap();
                let gf = fd_gradient(&t.field, &x, 1e-6).unwrap();
                let h = t.field.hessian(&x).unwrap();
                let hf = fd_hessian(&t.field, &x, 1e-4).unwrap();
                for i in 0..2 {
                    assert!((g[i] - gf[i]).abs() < 1e-6, "{g:?} {gf:?}");
                    for j in 0..2 {
                        assert!((h[i * 2 + j] - hf[i * 2 + j]).abs() < 1e-4);
                        assert!((h[i * 2 + j] - h[j * 2 + i]).abs() <= 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn polynomial_cutoff_derivatives_match_finite_differences() {
        let t = TestFunction::polynomial_cutoff(vec![0.3, -0.2], vec![1.1, 0.8], 4);
        for x in [[0.1, 0.0], [0.9, -0.5], [-0.4, 0.3]] {
            let g = t.field.gradient(&x).unwrap();
            let gf = fd_gradient(&t.field, &x, 1e-6).unwrap();
            let h = t.field.hessian(&x).unwrap();
            let hf = fd_hessian(&t.field, &x, 1e-4).unwrap();
            for i in 0..2 {
                assert!((g[i] - gf[i]).abs() < 1e-7);
                for j in 0..2 {
                    assert!((h[i * 2 + j] - hf[i * 2 + j]).abs() < 1e-4);
                }
            }
        }
        assert_eq!(t.field.value(&[1.5, 0.0]), 0.0);
        assert_eq!(t.field.value(&[0.3, -0.2]), 1.0);
    }

    #[test]
    fn battery_vanishes_outside_support() {
        let b = TestFunctionBattery::standard(2, 1.0);
        for t in &b.functions {
            let out = vec![t.hi[0] + 1e-9, t.lo[1]];
            assert_eq!(t.field.value(&out), 0.0);
            assert!(t.field.gradient(&out).unwrap().iter().all(|v| *v == 0.0));
            assert!(t.field.hessian(&out).unwrap().iter().all(|v| *v == 0.0));
        }
        assert_eq!(b.len(), 12);
        assert_eq!(b.pairs().len(), 20);
    }

    #[test]
    fn ou_passes_the_integral_checks() {
        let cs = ou(2);
        let b = TestFunctionBattery::standard(2, 1.5);
        let e = check_divergence_free(&cs, &b, &spec2()).unwrap();
        assert!(e.metric == 0.0, "{e:?}");
        let e = check_infinitesimal_invariance(&cs, &b, &spec2()).unwrap();
        assert!(e.metric <= 1e-8, "{e:?}");
        let e = check_integration_by_parts_battery(&cs, &b, &spec2()).unwrap();
        assert!(e.metric <= 1e-8, "{e:?}");
    }

    #[test]
    fn rotational_stream_is_divergence_free() {
        let cs = rotating_ou();
        let b = TestFunctionBattery::standard(2, 1.5);
        assert!(check_divergence_free(&cs, &b, &spec2()).unwrap().passed());
        assert!(check_infinitesimal_invariance(&cs, &b, &spec2()).unwrap().passed());
    }

    #[test]
    fn radial_outward_field_is_not_divergence_free() {
        let cs = ou(2).with_b(VectorField::new(2, |x, o| o.copy_from_slice(x)));
        let b = TestFunctionBattery::standard(2, 1.5);
        let e = check_divergence_free(&cs, &b, &spec2()).unwrap();
        assert_eq!(e.status, Status::Fail);
        assert!(e.metric > 1e-3);
    }

    #[test]
    fn shifted_drift_breaks_invariance() {
        let cs = ou(2).with_extra_drift(VectorField::new(2, |_, o| {
            o[0] = 0.1;
            o[1] = 0.0;
        }));
        let b = TestFunctionBattery::standard(2, 1.5);
        assert_eq!(check_infinitesimal_invariance(&cs, &b, &spec2()).unwrap().status, Status::Fail);
    }

    #[test]
    fn integrals_are_linear_in_the_test_function() {
        let cs = rotating_ou().with_extra_drift(VectorField::new(2, |x, o| {
            o[0] = 0.3 * x[1];
            o[1] = 0.1;
        }));
        // same support, different polynomial factors
        let (c, w) = (vec![0.3, -0.2], vec![1.4, 1.1]);
        let u = &TestFunction::bump_polynomial(c.clone(), w.clone(), 1.0, vec![0.2, 0.0], vec![0.0; 4]);
        let v = &TestFunction::bump_polynomial(c, w, -0.5, vec![0.0, 0.7], vec![0.3, 0.1, 0.1, -0.2]);
        let lo: Vec<f64> = (0..2).map(|i| u.lo[i].min(v.lo[i])).collect();
        let hi: Vec<f64> = (0..2).map(|i| u.hi[i].max(v.hi[i])).collect();
        let (uf, vf) = (u.field.clone(), v.field.clone());
        let sum = ScalarField::new(2, {
            let (a, b) = (uf.clone(), vf.clone());
            move |x| a.value(x) + b.value(x)
        })
        .with_grad({
            let (a, b) = (uf.clone(), vf.clone());
            move |x, o| {
                let (ga, gb) = (a.gradient(x).unwrap(), b.gradient(x).unwrap());
                for i in 0..2 {
                    o[i] = ga[i] + gb[i];
                }
            }
        })
        .with_hess(move |x, o| {
            let (ha, hb) = (uf.hessian(x).unwrap(), vf.hessian(x).unwrap());
            for i in 0..4 {
                o[i] = ha[i] + hb[i];
            }
        });
        let spec = spec2();
        for integral in [divergence_integral, invariance_integral] {
            let (iu, su) = integral(&cs, &u.field, &lo, &hi, &spec).unwrap();
            let (iv, sv) = integral(&cs, &v.field, &lo, &hi, &spec).unwrap();
            let (iw, _) = integral(&cs, &sum, &lo, &hi, &spec).unwrap();
            assert!((iw - iu - iv).abs() <= 1e-12 * (su + sv));
        }
    }

    #[test]
    fn integration_by_parts_is_symmetric_and_trivial_for_constants() {
        let cs = rotating_ou();
        let b = TestFunctionBattery::standard(2, 1.5);
        let (f, g) = (&b.functions[1], &b.functions[2]);
        let m1 = check_integration_by_parts(&cs, f, g, &spec2()).unwrap().metric;
        let m2 = check_integration_by_parts(&cs, g, f, &spec2()).unwrap().metric;
        assert!((m1 - m2).abs() <= 1e-10);
        // f = constant on a large box around g
        let g0 = &b.functions[0];
        let big = TestFunction {
            field: ScalarField::constant(2, 1.0).with_grad(|_, o| o.fill(0.0)).with_hess(|_, o| o.fill(0.0)),
            lo: g0.lo.clone(),
            hi: g0.hi.clone(),
        };
        let [(e, _), (r, _)] = integration_by_parts_terms(&cs, &big, &b.functions[0], &spec2()).unwrap();
        assert!(e.abs() < 1e-6 && r.abs() < 1e-6);
    }

    #[test]
    fn ellipticity_of_identity_and_of_a_planted_counterexample() {
        let (l, u, e) = check_ellipticity(&ou(2), &[-1.0, -1.0], &[1.0, 1.0], 100, EllipticityTarget::A).unwrap();
        assert!(l == 1.0 && u == 1.0 && e.passed());
        let bad = CoefficientSet::new(
            gaussian(2),
            ScalarField::constant(2, 1.0),
            MatrixField::new(2, true, |x, o| {
                o.copy_from_slice(&[1.0, 0.0, 0.0, 1.0 - x[0]]);
            }),
            VectorField::zero(2),
        )
        .unwrap();
        let (_, _, e) = check_ellipticity(&bad, &[-1.0, -1.0], &[2.0, 1.0], 100, EllipticityTarget::A).unwrap();
        assert_eq!(e.status, Status::Fail);
        assert!(check_ellipticity(&bad, &[0.0], &[1.0], 10, EllipticityTarget::A).is_err());
    }

    #[test]
    fn ellipticity_of_a_hat_for_singular_weight() {
        let d = 2;
        let psi = ScalarField::new(d, |x| 1.0 / norm2(x).sqrt());
        let cs = CoefficientSet::new(gaussian(d), psi, MatrixField::identity(d), VectorField::zero(d)).unwrap();
        let (l, u, _) = check_ellipticity(&cs, &[1.0, 1.0], &[2.0, 2.0], 500, EllipticityTarget::AHat).unwrap();
        assert!(l >= 2f64.sqrt() - 1e-9 && u <= 8f64.sqrt() + 1e-9);
        assert!(l >= 1.0 - 1e-9);
    }

    #[test]
    fn lyapunov_and_growth_on_ou() {
        for d in 1..=3 {
            let cs = ou(d);
            let r = TailRange::new(1.0, 2.0);
            assert!(check_lyapunov_conservative(&cs, &r, Direction::Forward).unwrap().passed());
            assert!(check_lyapunov_conservative(&cs, &r, Direction::Dual).unwrap().passed());
            for v in [GrowthVariant::GForm, GrowthVariant::BPlus, GrowthVariant::BMinus] {
                let e = check_growth_condition(&cs, v, &r).unwrap();
                assert!(e.passed(), "{e:?}");
                assert!(e.details.contains("R_max = 20"));
            }
        }
    }

    #[test]
    fn lyapunov_formula_matches_generator_on_smooth_u() {
        let cs = rotating_ou();
        let u = ScalarField::new(2, |x| norm2(x).ln() + 2.0);
        for x in points_in_shell(2, 2.0, 5.0, 20) {
            let a = lyapunov_generator(&cs, &x, Direction::Forward).unwrap();
            let b = cs.generator_apply(&u, &x, Direction::Forward).unwrap();
            assert!((a - b).abs() < 1e-5, "{a} {b}");
        }
    }

    #[test]
    fn superlinear_outward_drift_fails() {
        let cs = ou(2).with_b(VectorField::new(2, |x, o| {
            let r2 = norm2(x);
            for i in 0..2 {
                o[i] = x[i] + x[i] * r2;
            }
        }));
        let r = TailRange::new(0.1, 2.0);
        assert_eq!(check_lyapunov_conservative(&cs, &r, Direction::Forward).unwrap().status, Status::Fail);
        assert_eq!(check_growth_condition(&cs, GrowthVariant::BPlus, &r).unwrap().status, Status::Fail);
    }

    #[test]
    fn exponential_drift_fails_growth() {
        let cs = ou(2).with_b(VectorField::new(2, |x, o| {
            let e = norm2(x).sqrt().exp();
            for i in 0..2 {
                o[i] = x[i] * e + x[i];
            }
        }));
        let r = TailRange::new(1.0, 2.0);
        assert_eq!(check_growth_condition(&cs, GrowthVariant::GForm, &r).unwrap().status, Status::Fail);
    }

    #[test]
    fn flat_coefficients_pass_growth() {
        let one = ScalarField::constant(2, 1.0);
        let cs = CoefficientSet::new(one.clone(), one, MatrixField::identity(2), VectorField::zero(2)).unwrap();
        assert!(check_growth_condition(&cs, GrowthVariant::GForm, &TailRange::new(1.0, 2.0)).unwrap().passed());
    }

    #[test]
    fn annulus_bounds() {
        let one = ScalarField::constant(2, 1.0);
        let lebesgue = CoefficientSet::new(one.clone(), one, MatrixField::identity(2), VectorField::zero(2)).unwrap();
        let m = lebesgue.measure_density(None);
        let area = annulus_mass(&m, 2, 3);
        assert!((area - 12.0 * std::f64::consts::PI * 9.0).abs() < 1e-8);
        assert!(check_annulus_volume(&m, 2, 3.0, 6).unwrap().passed());
        let g = ou(2).measure_density(Some(std::f64::consts::PI));
        assert!(check_annulus_volume(&g, 2, 0.5, 5).unwrap().passed());
        assert!(check_annulus_volume(&m, 2, 100.0, 3).unwrap().passed());
        let g3 = ou(3).measure_density(None);
        // 4 pi int_2^4 r^2 exp(-r^2) dr by a fine midpoint rule
        let k = 200_000;
        let exact: f64 = (0..k)
            .map(|j| {
                let r = 2.0 + 2.0 * (j as f64 + 0.5) / k as f64;
                r * r * (-r * r).exp()
            })
            .sum::<f64>()
            * 2.0
            / k as f64
            * 4.0
            * std::f64::consts::PI;
        assert!((annulus_mass(&g3, 3, 1) - exact).abs() < 1e-8 * exact.max(1.0));
    }

    #[test]
    fn gamma_function_values() {
        assert!((gamma(5.0) - 24.0).abs() < 1e-10);
        assert!((gamma(0.5) - std::f64::consts::PI.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn ou_normalization() {
        let m = ou(2).measure_density(Some(std::f64::consts::PI));
        assert!(check_normalization(&m, &[-6.0, -6.0], &[6.0, 6.0], &spec2()).unwrap().passed());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn b_plus_equals_b_minus_of_negated_field(x0 in 2.1f64..8.0, x1 in -8.0f64..8.0, m in 0.1f64..3.0) {
            let cs = rotating_ou();
            let x = [x0, x1];
            let a = growth_margin(&cs, GrowthVariant::BPlus, m, &x).unwrap();
            let b = growth_margin(&cs.dual(), GrowthVariant::BMinus, m, &x).unwrap();
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
