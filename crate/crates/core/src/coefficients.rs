//! The coefficient bundle `(rho, psi, A, B)` and everything derived from it.
//!
//! With `A_hat = A / psi` the generator is
//!
//! ```text
//! L f = 1/2 tr(A_hat D^2 f) + <beta + B, grad f>,
//! beta = (1 / (2 psi)) div A + (1 / (2 psi rho)) A grad rho,
//! ```
//!
//! and the co-generator `L'` flips the sign of `B`. Matrix divergence is taken
//! column-wise, `(div M)_j = sum_i d_i m_ij`.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{MatrixField, ScalarField, SingularSet, VectorField};
use crate::qmc::Halton;
use crate::quadrature::gauss_legendre;

/// Which of the two generators is meant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Dual,
}

impl Direction {
    /// Sign applied to `B`.
    pub fn sign(self) -> f64 {
        match self {
            Direction::Forward => 1.0,
            Direction::Dual => -1.0,
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            Direction::Forward => Direction::Dual,
            Direction::Dual => Direction::Forward,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MeasureMode {
    FiniteNormalized,
    SigmaFinite,
}

/// The density `psi * rho` of the reference measure.
#[derive(Clone, Debug)]
pub struct MeasureDensity {
    pub density: ScalarField,
    /// Total mass when the measure is finite.
    pub normalization: Option<f64>,
    pub mode: MeasureMode,
}

impl MeasureDensity {
    pub fn value(&self, x: &[f64]) -> f64 {
        self.density.value(x)
    }

    /// Probability density when the measure is finite.
    pub fn normalized(&self, x: &[f64]) -> Option<f64> {
        self.normalization.map(|z| self.density.value(x) / z)
    }
}

/// Validated `(rho, psi, A, B)` with an optional anti-symmetric stream matrix `C`
/// generating `B`.
#[derive(Clone, Debug)]
pub struct CoefficientSet {
    dim: usize,
    rho: ScalarField,
    psi: ScalarField,
    a: MatrixField,
    b: VectorField,
    stream: Option<MatrixField>,
    psi_floor: f64,
    floor_hits: Arc<AtomicU64>,
    singular: SingularSet,
}

pub const DEFAULT_PSI_FLOOR: f64 = 1e-12;

impl CoefficientSet {
    pub fn new(rho: ScalarField, psi: ScalarField, a: MatrixField, b: VectorField) -> Result<Self> {
        let dim = rho.dim();
        for got in [psi.dim(), a.dim(), b.dim()] {
            if got != dim {
                return Err(Error::DimensionMismatch { expected: dim, got });
            }
        }
        if !a.is_symmetric() {
            return Err(Error::invalid("diffusion matrix A must be flagged symmetric"));
        }
        let singular = rho.singular().union(psi.singular()).union(a.singular()).union(b.singular());
        Ok(Self { dim, rho, psi, a, b, stream: None, psi_floor: DEFAULT_PSI_FLOOR, floor_hits: Arc::new(AtomicU64::new(0)), singular })
    }

    /// Builds `B` from an anti-symmetric `C` so that `psi rho B = 1/2 div(rho C)`.
    pub fn with_stream(rho: ScalarField, psi: ScalarField, a: MatrixField, c: MatrixField) -> Result<Self> {
        let b = antisymmetric_divfree(&rho, &psi, &c)?;
        let mut cs = Self::new(rho, psi, a, b)?;
        cs.singular = cs.singular.union(c.singular());
        cs.stream = Some(c);
        Ok(cs)
    }

    pub fn with_psi_floor(mut self, floor: f64) -> Self {
        self.psi_floor = floor;
        self
    }

    /// Replaces `B` (dropping any stream matrix).
    pub fn with_b(mut self, b: VectorField) -> Self {
        self.singular = self.singular.union(b.singular());
        self.b = b;
        self.stream = None;
        self
    }

    /// Adds `extra` to `B`, so to the drift.
    pub fn with_extra_drift(self, extra: VectorField) -> Self {
        let b = self.b.clone();
        let dim = self.dim;
        let sum = VectorField::new(dim, move |x, out| {
            b.eval_into(x, out);
            let mut e = vec![0.0; dim];
            extra.eval_into(x, &mut e);
            for (o, v) in out.iter_mut().zip(e) {
                *o += v;
            }
        });
        self.with_b(sum)
    }

    /// Coefficients of the co-process: `B -> -B` (and `C -> -C`).
    pub fn dual(&self) -> Self {
        let mut out = self.clone();
        out.b = self.b.negated();
        out.stream = self.stream.as_ref().map(MatrixField::negated);
        out
    }

    pub fn oriented(&self, direction: Direction) -> Self {
        match direction {
            Direction::Forward => self.clone(),
            Direction::Dual => self.dual(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rho(&self) -> &ScalarField {
        &self.rho
    }

    pub fn psi(&self) -> &ScalarField {
        &self.psi
    }

    pub fn a(&self) -> &MatrixField {
        &self.a
    }

    pub fn b(&self) -> &VectorField {
        &self.b
    }

    pub fn stream(&self) -> Option<&MatrixField> {
        self.stream.as_ref()
    }

    pub fn singular(&self) -> &SingularSet {
        &self.singular
    }

    pub fn psi_floor(&self) -> f64 {
        self.psi_floor
    }

    /// How often `psi` was replaced by the floor so far (shared by clones).
    pub fn floor_activations(&self) -> u64 {
        self.floor_hits.load(Ordering::Relaxed)
    }

    fn guard(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: x.len() });
        }
        if self.singular.contains(x) {
            return Err(Error::SingularPoint { point: x.to_vec() });
        }
        Ok(())
    }

    /// `max(psi(x), psi_floor)`, counting floor activations.
    pub fn psi_value(&self, x: &[f64]) -> Result<f64> {
        let p = self.psi.value(x);
        if p.is_nan() {
            return Err(Error::NonFinite { what: "psi", point: x.to_vec() });
        }
        if p < self.psi_floor {
            self.floor_hits.fetch_add(1, Ordering::Relaxed);
            return Ok(self.psi_floor);
        }
        Ok(p)
    }

    /// `beta = (1/(2 psi)) div A + (1/(2 psi)) A grad(ln rho)`.
    pub fn log_derivative_into(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        self.guard(x)?;
        let d = self.dim;
        let psi = self.psi_value(x)?;
        let mut lg = vec![0.0; d];
        self.rho.log_gradient_into(x, &mut lg)?;
        let mut a = vec![0.0; d * d];
        self.a.eval_into(x, &mut a);
        self.a.divergence_into(x, out)?;
        for i in 0..d {
            let mut acc = 0.0;
            for j in 0..d {
                acc += a[i * d + j] * lg[j];
            }
            out[i] = (out[i] + acc) / (2.0 * psi);
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: "logarithmic derivative", point: x.to_vec() });
        }
        Ok(())
    }

    pub fn log_derivative(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim];
        self.log_derivative_into(x, &mut out)?;
        Ok(out)
    }

    /// `G = beta + s B` with `s` the direction sign.
    pub fn drift_into(&self, x: &[f64], direction: Direction, out: &mut [f64]) -> Result<()> {
        self.log_derivative_into(x, out)?;
        let mut b = vec![0.0; self.dim];
        self.b.eval_into(x, &mut b);
        let s = direction.sign();
        for (o, bi) in out.iter_mut().zip(b) {
            *o += s * bi;
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: "drift", point: x.to_vec() });
        }
        Ok(())
    }

    pub fn drift(&self, x: &[f64], direction: Direction) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim];
        self.drift_into(x, direction, &mut out)?;
        Ok(out)
    }

    /// The drift as a field; points where it is undefined evaluate to NaN.
    pub fn assemble_drift(&self, direction: Direction) -> VectorField {
        let cs = self.clone();
        VectorField::new(self.dim, move |x, out| {
            if cs.drift_into(x, direction, out).is_err() {
                out.fill(f64::NAN);
            }
        })
        .with_singular(self.singular.clone())
    }

    /// `A_hat = A / psi`, row-major.
    pub fn a_hat(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.guard(x)?;
        let psi = self.psi_value(x)?;
        let mut a = self.a.eval(x);
        for v in a.iter_mut() {
            *v /= psi;
        }
        Ok(a)
    }

    /// `sigma_hat = psi^{-1/2} sqrt(A)` with the symmetric PSD square root.
    pub fn dispersion(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.guard(x)?;
        let psi = self.psi_value(x)?;
        let mut s = psd_sqrt(&self.a.eval(x), self.dim, self.a.is_diagonal(), x)?;
        let scale = psi.recip().sqrt();
        for v in s.iter_mut() {
            *v *= scale;
        }
        Ok(s)
    }

    /// `1/2 tr(A_hat D^2 u) + <beta, grad u>`, the symmetric part of the generator.
    pub fn symmetric_generator_apply(&self, u: &ScalarField, x: &[f64]) -> Result<f64> {
        let d = self.dim;
        let ah = self.a_hat(x)?;
        let beta = self.log_derivative(x)?;
        let g = u.gradient(x)?;
        let h = u.hessian(x)?;
        let mut tr = 0.0;
        for i in 0..d {
            for j in 0..d {
                tr += ah[i * d + j] * h[j * d + i];
            }
        }
        let v = 0.5 * tr + beta.iter().zip(&g).map(|(p, q)| p * q).sum::<f64>();
        finite(v, "generator", x)
    }

    /// `L u(x)` (forward) or `L' u(x)` (dual).
    pub fn generator_apply(&self, u: &ScalarField, x: &[f64], direction: Direction) -> Result<f64> {
        let sym = self.symmetric_generator_apply(u, x)?;
        let g = u.gradient(x)?;
        let b = self.b.eval(x);
        let v = sym + direction.sign() * b.iter().zip(&g).map(|(p, q)| p * q).sum::<f64>();
        finite(v, "generator", x)
    }

    pub fn measure_density(&self, normalization: Option<f64>) -> MeasureDensity {
        let rho = self.rho.clone();
        let psi = self.psi.clone();
        let density = ScalarField::new(self.dim, move |x| psi.value(x) * rho.value(x)).with_singular(self.singular.clone());
        let mode = if normalization.is_some() { MeasureMode::FiniteNormalized } else { MeasureMode::SigmaFinite };
        MeasureDensity { density, normalization, mode }
    }
}

fn finite(v: f64, what: &'static str, x: &[f64]) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { what, point: x.to_vec() })
    }
}

/// Symmetric PSD square root of a row-major `d x d` matrix.
pub fn psd_sqrt(a: &[f64], d: usize, diagonal: bool, x: &[f64]) -> Result<Vec<f64>> {
    let clip = |ev: f64| -> Result<f64> {
        if ev < -1e-10 {
            Err(Error::NotPsd { point: x.to_vec(), eigenvalue: ev })
        } else {
            Ok(ev.max(0.0).sqrt())
        }
    };
    let mut out = vec![0.0; d * d];
    if diagonal || d == 1 {
        for i in 0..d {
            out[i * d + i] = clip(a[i * d + i])?;
        }
        return Ok(out);
    }
    let m = DMatrix::from_row_slice(d, d, a);
    let m = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(m);
    let mut roots = Vec::with_capacity(d);
    for &ev in eig.eigenvalues.iter() {
        roots.push(clip(ev)?);
    }
    let q = &eig.eigenvectors;
    for i in 0..d {
        for j in 0..d {
            out[i * d + j] = (0..d).map(|k| q[(i, k)] * roots[k] * q[(j, k)]).sum();
        }
    }
    Ok(out)
}

/// `B = (1/(2 psi)) div C + (1/(2 psi)) C^T grad(ln rho)` for anti-symmetric `C`;
/// equivalently `psi rho B = 1/2 div(rho C)`, which is divergence free.
pub fn antisymmetric_divfree(rho: &ScalarField, psi: &ScalarField, c: &MatrixField) -> Result<VectorField> {
    let d = c.dim();
    let singular = rho.singular().union(psi.singular()).union(c.singular());
    // anti-symmetry on a quasi-random cloud around the origin
    for u in Halton::new(d).take(256) {
        let x: Vec<f64> = u.iter().map(|t| 8.0 * t - 4.0 + 1e-3).collect();
        if singular.contains(&x) {
            continue;
        }
        let defect = c.antisymmetry_defect(&x);
        if !(defect <= 1e-12) {
            return Err(Error::NotAntisymmetric { point: x, defect });
        }
    }
    let (rho, psi, c) = (rho.clone(), psi.clone(), c.clone());
    Ok(VectorField::new(d, move |x, out| {
        let p = psi.value(x);
        let mut lg = vec![0.0; d];
        let mut cm = vec![0.0; d * d];
        if rho.log_gradient_into(x, &mut lg).is_err() || c.divergence_into(x, out).is_err() {
            out.fill(f64::NAN);
            return;
        }
        c.eval_into(x, &mut cm);
        for j in 0..d {
            // (C^T g)_j = sum_i c_ij g_i
            let ctg: f64 = (0..d).map(|i| cm[i * d + j] * lg[i]).sum();
            out[j] = (out[j] + ctg) / (2.0 * p);
        }
    })
    .with_singular(singular))
}

/// Panel count used by [`rho_from_drift_1d`].
const DEFAULT_PANELS: usize = 8;

/// Integrand `(2/a)(psi g_hat - a'/2)` of `ln rho` in one dimension.
fn log_rho_integrand(a: &ScalarField, psi: &ScalarField, g_hat: &ScalarField, y: f64) -> Result<f64> {
    let av = a.value(&[y]);
    if !(av > 0.0) {
        return Err(Error::NonPositiveDiffusion { at: y, value: av });
    }
    let da = a.gradient(&[y])?[0];
    let v = 2.0 / av * (psi.value(&[y]) * g_hat.value(&[y]) - 0.5 * da);
    finite(v, "one-dimensional density integrand", &[y])
}

/// `int_0^x` of the log-density integrand with `panels` 16-point Gauss panels.
pub fn log_rho_from_drift_1d_panels(a: &ScalarField, psi: &ScalarField, g_hat: &ScalarField, x: f64, panels: usize) -> Result<f64> {
    let (nodes, weights) = gauss_legendre(16);
    let h = x / panels as f64;
    let mut acc = 0.0;
    for p in 0..panels {
        let mid = (p as f64 + 0.5) * h;
        for (t, w) in nodes.iter().zip(&weights) {
            acc += w * 0.5 * h * log_rho_integrand(a, psi, g_hat, mid + 0.5 * h * t)?;
        }
    }
    Ok(acc)
}

/// `rho(x) = exp(int_0^x (2/a)(psi g_hat - a'/2) dy)`, doubling panels until the
/// logarithm moves by less than `1e-12` (relative to `1 + |ln rho|`).
pub fn rho_from_drift_1d(a: &ScalarField, psi: &ScalarField, g_hat: &ScalarField, x: f64) -> Result<f64> {
    if a.dim() != 1 || psi.dim() != 1 || g_hat.dim() != 1 {
        return Err(Error::invalid("the explicit density construction is one-dimensional"));
    }
    if x == 0.0 {
        // still probe the diffusion at the anchor
        log_rho_integrand(a, psi, g_hat, 0.0)?;
        return Ok(1.0);
    }
    let mut panels = DEFAULT_PANELS;
    let mut prev = log_rho_from_drift_1d_panels(a, psi, g_hat, x, panels)?;
    for _ in 0..12 {
        panels *= 2;
        let next = log_rho_from_drift_1d_panels(a, psi, g_hat, x, panels)?;
        if (next - prev).abs() <= 1e-12 * (1.0 + next.abs()) {
            return Ok(next.exp());
        }
        prev = next;
    }
    Ok(prev.exp())
}

/// The density of [`rho_from_drift_1d`] as a field, with exact logarithmic gradient.
pub fn density_from_drift_1d(a: ScalarField, psi: ScalarField, g_hat: ScalarField) -> ScalarField {
    let (a1, p1, g1) = (a.clone(), psi.clone(), g_hat.clone());
    let (a2, p2, g2) = (a.clone(), psi.clone(), g_hat.clone());
    let eval = move |x: &[f64]| rho_from_drift_1d(&a1, &p1, &g1, x[0]).unwrap_or(f64::NAN);
    let eval2 = eval.clone();
    ScalarField::new(1, eval)
        .with_log_grad(move |x, out| out[0] = log_rho_integrand(&a2, &p2, &g2, x[0]).unwrap_or(f64::NAN))
        .with_grad(move |x, out| out[0] = eval2(x) * log_rho_integrand(&a, &psi, &g_hat, x[0]).unwrap_or(f64::NAN))
}
