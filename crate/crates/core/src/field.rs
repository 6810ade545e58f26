//! Scalar, vector and matrix fields on R^d.
//!
//! Fields wrap shared closures, so cloning is cheap and every field can be
//! evaluated concurrently. Derivatives are either supplied analytically or
//! recovered by central differences with the per-coordinate step
//! `h_i = h * (1 + |x_i|)`.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Default relative step for finite-difference gradients.
pub const DEFAULT_FD_STEP: f64 = 1e-5;
/// Default relative step for finite-difference Hessians (second differences
/// lose precision as `eps / h^2`, so the step is larger).
pub const DEFAULT_FD_HESSIAN_STEP: f64 = 1e-4;

pub type ScalarFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
/// Writes a vector (or a row-major matrix) into the output slice.
pub type FillFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

/// Finite set of points where a field is undefined.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SingularSet {
    points: Vec<Vec<f64>>,
    radius: f64,
}

impl SingularSet {
    pub const DEFAULT_RADIUS: f64 = 1e-12;

    pub fn empty() -> Self {
        Self { points: Vec::new(), radius: Self::DEFAULT_RADIUS }
    }

    pub fn points(points: Vec<Vec<f64>>) -> Self {
        Self { points, radius: Self::DEFAULT_RADIUS }
    }

    pub fn origin(dim: usize) -> Self {
        Self::points(vec![vec![0.0; dim]])
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn as_slice(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        self.points.iter().any(|p| dist2(p, x) <= self.radius * self.radius)
    }

    pub fn union(&self, other: &SingularSet) -> SingularSet {
        let mut points = self.points.clone();
        for p in &other.points {
            if !points.iter().any(|q| q == p) {
                points.push(p.clone());
            }
        }
        SingularSet { points, radius: self.radius.max(other.radius) }
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum()
}

fn check_point(dim: usize, x: &[f64], singular: &SingularSet) -> Result<()> {
    if x.len() != dim {
        return Err(Error::DimensionMismatch { expected: dim, got: x.len() });
    }
    if singular.contains(x) {
        return Err(Error::SingularPoint { point: x.to_vec() });
    }
    Ok(())
}

/// Real-valued field with optional analytic gradient, Hessian and
/// logarithmic gradient `grad f / f`.
#[derive(Clone)]
pub struct ScalarField {
    dim: usize,
    eval: ScalarFn,
    grad: Option<FillFn>,
    hess: Option<FillFn>,
    log_grad: Option<FillFn>,
    singular: SingularSet,
}

impl fmt::Debug for ScalarField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ScalarField")
            .field("dim", &self.dim)
            .field("grad", &self.grad.is_some())
            .field("hess", &self.hess.is_some())
            .field("log_grad", &self.log_grad.is_some())
            .field("singular", &self.singular)
            .finish()
    }
}

impl ScalarField {
    pub fn new(dim: usize, eval: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        assert!(dim > 0, "fields need a positive dimension");
        Self { dim, eval: Arc::new(eval), grad: None, hess: None, log_grad: None, singular: SingularSet::empty() }
    }

    pub fn constant(dim: usize, value: f64) -> Self {
        Self::new(dim, move |_| value).with_grad(|_, g| g.fill(0.0)).with_hess(|_, h| h.fill(0.0)).with_log_grad(|_, g| g.fill(0.0))
    }

    pub fn with_grad(mut self, grad: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.grad = Some(Arc::new(grad));
        self
    }

    pub fn with_hess(mut self, hess: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.hess = Some(Arc::new(hess));
        self
    }

    pub fn with_log_grad(mut self, lg: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.log_grad = Some(Arc::new(lg));
        self
    }

    pub fn with_singular(mut self, singular: SingularSet) -> Self {
        self.singular = singular;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn singular(&self) -> &SingularSet {
        &self.singular
    }

    pub fn has_grad(&self) -> bool {
        self.grad.is_some()
    }

    pub fn has_hess(&self) -> bool {
        self.hess.is_some()
    }

    /// Raw evaluation without the singular-set check.
    #[inline]
    pub fn value(&self, x: &[f64]) -> f64 {
        (self.eval)(x)
    }

    pub fn try_value(&self, x: &[f64]) -> Result<f64> {
        check_point(self.dim, x, &self.singular)?;
        let v = self.value(x);
        if !v.is_finite() {
            return Err(Error::NonFinite { what: "scalar field", point: x.to_vec() });
        }
        Ok(v)
    }

    /// Gradient into `out`; analytic when available, otherwise central differences.
    pub fn gradient_into(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        match &self.grad {
            Some(g) => {
                g(x, out);
                Ok(())
            }
            None => {
                let g = fd_gradient(self, x, DEFAULT_FD_STEP)?;
                out.copy_from_slice(&g);
                Ok(())
            }
        }
    }

    pub fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut g = vec![0.0; self.dim];
        self.gradient_into(x, &mut g)?;
        Ok(g)
    }

    /// Row-major Hessian into `out` (length `dim * dim`).
    pub fn hessian_into(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        match &self.hess {
            Some(h) => {
                h(x, out);
                Ok(())
            }
            None => {
                let h = fd_hessian(self, x, DEFAULT_FD_HESSIAN_STEP)?;
                out.copy_from_slice(&h);
                Ok(())
            }
        }
    }

    pub fn hessian(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut h = vec![0.0; self.dim * self.dim];
        self.hessian_into(x, &mut h)?;
        Ok(h)
    }

    /// `grad f / f`, from the dedicated closure when present (robust where `f`
    /// underflows), else from the gradient.
    pub fn log_gradient_into(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        if let Some(lg) = &self.log_grad {
            lg(x, out);
            return Ok(());
        }
        let v = self.value(x);
        self.gradient_into(x, out)?;
        for o in out.iter_mut() {
            *o /= v;
        }
        Ok(())
    }
}

/// Central-difference gradient with step `h * (1 + |x_i|)` per coordinate.
pub fn fd_gradient(f: &ScalarField, x: &[f64], h: f64) -> Result<Vec<f64>> {
    if !(h > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    check_point(f.dim, x, &f.singular)?;
    let mut y = x.to_vec();
    let mut g = vec![0.0; f.dim];
    for i in 0..f.dim {
        let hi = h * (1.0 + x[i].abs());
        y[i] = x[i] + hi;
        let fp = stencil_value(f, &y)?;
        y[i] = x[i] - hi;
        let fm = stencil_value(f, &y)?;
        y[i] = x[i];
        g[i] = (fp - fm) / (2.0 * hi);
    }
    Ok(g)
}

/// Central-difference Hessian, symmetrized by averaging the two mixed stencils.
pub fn fd_hessian(f: &ScalarField, x: &[f64], h: f64) -> Result<Vec<f64>> {
    if !(h > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    check_point(f.dim, x, &f.singular)?;
    let d = f.dim;
    let steps: Vec<f64> = x.iter().map(|xi| h * (1.0 + xi.abs())).collect();
    let f0 = stencil_value(f, x)?;
    let mut y = x.to_vec();
    let mut hess = vec![0.0; d * d];
    for i in 0..d {
        let hi = steps[i];
        y[i] = x[i] + hi;
        let fp = stencil_value(f, &y)?;
        y[i] = x[i] - hi;
        let fm = stencil_value(f, &y)?;
        y[i] = x[i];
        hess[i * d + i] = (fp - 2.0 * f0 + fm) / (hi * hi);
        for j in (i + 1)..d {
            let hj = steps[j];
            let mut corner = |si: f64, sj: f64| -> Result<f64> {
                y[i] = x[i] + si * hi;
                y[j] = x[j] + sj * hj;
                let v = stencil_value(f, &y);
                y[i] = x[i];
                y[j] = x[j];
                v
            };
            let fpp = corner(1.0, 1.0)?;
            let fpm = corner(1.0, -1.0)?;
            let fmp = corner(-1.0, 1.0)?;
            let fmm = corner(-1.0, -1.0)?;
            let mixed = (fpp - fpm - fmp + fmm) / (4.0 * hi * hj);
            hess[i * d + j] = mixed;
            hess[j * d + i] = mixed;
        }
    }
    Ok(hess)
}

fn stencil_value(f: &ScalarField, y: &[f64]) -> Result<f64> {
    if f.singular.contains(y) {
        return Err(Error::SingularPoint { point: y.to_vec() });
    }
    let v = f.value(y);
    if !v.is_finite() {
        return Err(Error::NonFinite { what: "finite-difference stencil", point: y.to_vec() });
    }
    Ok(v)
}

/// Vector-valued field `R^d -> R^d`.
#[derive(Clone)]
pub struct VectorField {
    dim: usize,
    eval: FillFn,
    jacobian: Option<FillFn>,
    singular: SingularSet,
}

impl fmt::Debug for VectorField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("VectorField").field("dim", &self.dim).field("singular", &self.singular).finish()
    }
}

impl VectorField {
    pub fn new(dim: usize, eval: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        assert!(dim > 0, "fields need a positive dimension");
        Self { dim, eval: Arc::new(eval), jacobian: None, singular: SingularSet::empty() }
    }

    pub fn zero(dim: usize) -> Self {
        Self::new(dim, |_, out| out.fill(0.0))
    }

    pub fn with_jacobian(mut self, jac: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.jacobian = Some(Arc::new(jac));
        self
    }

    pub fn with_singular(mut self, singular: SingularSet) -> Self {
        self.singular = singular;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn singular(&self) -> &SingularSet {
        &self.singular
    }

    #[inline]
    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        (self.eval)(x, out)
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.eval_into(x, &mut out);
        out
    }

    pub fn try_eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_point(self.dim, x, &self.singular)?;
        let v = self.eval(x);
        if v.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite { what: "vector field", point: x.to_vec() });
        }
        Ok(v)
    }

    /// Row-major Jacobian `J[i][j] = d v_i / d x_j`.
    pub fn jacobian(&self, x: &[f64]) -> Result<Vec<f64>> {
        let d = self.dim;
        let mut jac = vec![0.0; d * d];
        if let Some(j) = &self.jacobian {
            j(x, &mut jac);
            return Ok(jac);
        }
        check_point(d, x, &self.singular)?;
        let mut y = x.to_vec();
        let mut vp = vec![0.0; d];
        let mut vm = vec![0.0; d];
        for k in 0..d {
            let hk = DEFAULT_FD_STEP * (1.0 + x[k].abs());
            y[k] = x[k] + hk;
            self.eval_into(&y, &mut vp);
            y[k] = x[k] - hk;
            self.eval_into(&y, &mut vm);
            y[k] = x[k];
            for i in 0..d {
                jac[i * d + k] = (vp[i] - vm[i]) / (2.0 * hk);
            }
        }
        if jac.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: "jacobian", point: x.to_vec() });
        }
        Ok(jac)
    }

    /// Pointwise negation, used to build the co-process coefficients.
    pub fn negated(&self) -> VectorField {
        let inner = self.eval.clone();
        let jac = self.jacobian.clone();
        let mut out = VectorField::new(self.dim, move |x, o| {
            inner(x, o);
            for v in o.iter_mut() {
                *v = -*v;
            }
        })
        .with_singular(self.singular.clone());
        if let Some(j) = jac {
            out = out.with_jacobian(move |x, o| {
                j(x, o);
                for v in o.iter_mut() {
                    *v = -*v;
                }
            });
        }
        out
    }
}

/// Matrix-valued field, evaluated row-major into a `dim * dim` slice.
#[derive(Clone)]
pub struct MatrixField {
    dim: usize,
    eval: FillFn,
    symmetric: bool,
    diagonal: bool,
    divergence: Option<VectorField>,
    singular: SingularSet,
}

impl fmt::Debug for MatrixField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MatrixField")
            .field("dim", &self.dim)
            .field("symmetric", &self.symmetric)
            .field("diagonal", &self.diagonal)
            .field("divergence", &self.divergence.is_some())
            .finish()
    }
}

impl MatrixField {
    pub fn new(dim: usize, symmetric: bool, eval: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        assert!(dim > 0, "fields need a positive dimension");
        Self { dim, eval: Arc::new(eval), symmetric, diagonal: false, divergence: None, singular: SingularSet::empty() }
    }

    pub fn identity(dim: usize) -> Self {
        Self::constant(dim, &identity(dim)).expect("identity has the right size")
    }

    /// `f(x) * Id`, with the divergence `grad f` when `f` carries a gradient.
    pub fn scalar(dim: usize, f: ScalarField) -> Self {
        let g = f.clone();
        let mut m = Self::new(dim, true, move |x, out| {
            let v = g.value(x);
            out.fill(0.0);
            for i in 0..dim {
                out[i * dim + i] = v;
            }
        });
        m.diagonal = true;
        if f.has_grad() {
            let fg = f.clone();
            // (div fI)_j = sum_i d_i (f delta_ij) = d_j f
            m.divergence = Some(VectorField::new(dim, move |x, out| {
                fg.gradient_into(x, out).expect("analytic gradient");
            }));
        }
        m.singular = f.singular().clone();
        m
    }

    pub fn constant(dim: usize, values: &[f64]) -> Result<Self> {
        if values.len() != dim * dim {
            return Err(Error::DimensionMismatch { expected: dim * dim, got: values.len() });
        }
        let vals = values.to_vec();
        let symmetric = (0..dim).all(|i| (0..dim).all(|j| (vals[i * dim + j] - vals[j * dim + i]).abs() <= 1e-12));
        let diagonal = (0..dim).all(|i| (0..dim).all(|j| i == j || vals[i * dim + j] == 0.0));
        let mut m = Self::new(dim, symmetric, move |_, out| out.copy_from_slice(&vals));
        m.diagonal = diagonal;
        m.divergence = Some(VectorField::zero(dim));
        Ok(m)
    }

    pub fn with_divergence(mut self, div: VectorField) -> Self {
        self.divergence = Some(div);
        self
    }

    /// Marks the field as diagonal; the square root is then taken entrywise.
    pub fn with_diagonal(mut self) -> Self {
        self.diagonal = true;
        self
    }

    pub fn with_singular(mut self, singular: SingularSet) -> Self {
        self.singular = singular;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_symmetric(&self) -> bool {
        self.symmetric
    }

    pub fn is_diagonal(&self) -> bool {
        self.diagonal
    }

    pub fn singular(&self) -> &SingularSet {
        &self.singular
    }

    pub fn has_divergence(&self) -> bool {
        self.divergence.is_some()
    }

    #[inline]
    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        (self.eval)(x, out)
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim * self.dim];
        self.eval_into(x, &mut out);
        out
    }

    /// Column divergence `(div M)_j = sum_i d_i m_ij`; analytic when supplied,
    /// otherwise central differences of the entries.
    pub fn divergence_into(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        if let Some(div) = &self.divergence {
            div.eval_into(x, out);
            return Ok(());
        }
        let d = self.dim;
        let mut y = x.to_vec();
        let mut mp = vec![0.0; d * d];
        let mut mm = vec![0.0; d * d];
        out.fill(0.0);
        for i in 0..d {
            let hi = DEFAULT_FD_STEP * (1.0 + x[i].abs());
            y[i] = x[i] + hi;
            if self.singular.contains(&y) {
                return Err(Error::SingularPoint { point: y.clone() });
            }
            self.eval_into(&y, &mut mp);
            y[i] = x[i] - hi;
            if self.singular.contains(&y) {
                return Err(Error::SingularPoint { point: y.clone() });
            }
            self.eval_into(&y, &mut mm);
            y[i] = x[i];
            for j in 0..d {
                out[j] += (mp[i * d + j] - mm[i * d + j]) / (2.0 * hi);
            }
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: "matrix divergence", point: x.to_vec() });
        }
        Ok(())
    }

    pub fn divergence(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim];
        self.divergence_into(x, &mut out)?;
        Ok(out)
    }

    /// `max_ij |M_ij - M_ji|` at `x`.
    pub fn asymmetry(&self, x: &[f64]) -> f64 {
        let m = self.eval(x);
        let d = self.dim;
        let mut worst: f64 = 0.0;
        for i in 0..d {
            for j in 0..d {
                worst = worst.max((m[i * d + j] - m[j * d + i]).abs());
            }
        }
        worst
    }

    /// `max_ij |M_ij + M_ji|` at `x`.
    pub fn antisymmetry_defect(&self, x: &[f64]) -> f64 {
        let m = self.eval(x);
        let d = self.dim;
        let mut worst: f64 = 0.0;
        for i in 0..d {
            for j in 0..d {
                worst = worst.max((m[i * d + j] + m[j * d + i]).abs());
            }
        }
        worst
    }

    pub fn negated(&self) -> MatrixField {
        let inner = self.eval.clone();
        let mut out = MatrixField::new(self.dim, self.symmetric, move |x, o| {
            inner(x, o);
            for v in o.iter_mut() {
                *v = -*v;
            }
        });
        out.diagonal = self.diagonal;
        out.singular = self.singular.clone();
        out.divergence = self.divergence.as_ref().map(VectorField::negated);
        out
    }
}

pub(crate) fn identity(dim: usize) -> Vec<f64> {
    let mut m = vec![0.0; dim * dim];
    for i in 0..dim {
        m[i * dim + i] = 1.0;
    }
    m
}
