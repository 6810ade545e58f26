//! Box quadrature.
//!
//! Tensor Gauss-Legendre for `d <= 3`, Halton points beyond. Boxes that contain a
//! declared singular point are split at that point and then graded geometrically
//! towards it; the innermost cell (side `2^-max_depth` of the original) is dropped,
//! which is harmless for the integrable singularities the scenarios carry.
//! Every integral is recomputed at doubled resolution and the two values are compared.

use crate::error::{Error, Result};
use crate::field::SingularSet;
use crate::qmc::halton_into;

/// Legendre polynomial `P_n(z)` and its derivative.
fn legendre(n: usize, z: f64) -> (f64, f64) {
    let (mut p0, mut p1) = (1.0, 0.0);
    for j in 1..=n {
        let p2 = p1;
        p1 = p0;
        p0 = ((2 * j - 1) as f64 * z * p1 - (j - 1) as f64 * p2) / j as f64;
    }
    (p0, n as f64 * (z * p0 - p1) / (z * z - 1.0))
}

/// Gauss-Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (p, dp) = legendre(n, z);
            let dz = p / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        let (_, dp) = legendre(n, z);
        let w = 2.0 / ((1.0 - z * z) * dp * dp);
        nodes[i] = -z;
        nodes[n - 1 - i] = z;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuadratureSpec {
    /// Gauss-Legendre nodes per axis on ordinary boxes.
    pub nodes: usize,
    /// Nodes per axis on the graded cells around a singular point.
    pub refine_nodes: usize,
    /// Halton points used when `dim >= 4`.
    pub qmc_points: usize,
    /// Grading levels towards a singular point.
    pub max_depth: usize,
    /// Integral tolerance; doubling may move a value by at most `10 * tolerance`.
    pub tolerance: f64,
}

impl QuadratureSpec {
    pub fn for_dim(dim: usize) -> Self {
        let nodes = match dim {
            0..=2 => 64,
            3 => 24,
            _ => 0,
        };
        Self { nodes, refine_nodes: if dim <= 2 { 16 } else { 8 }, qmc_points: 1_000_000, max_depth: 30, tolerance: 1e-6 }
    }

    /// Looser tolerance for quantities compared against Monte Carlo noise, such as
    /// histogram bin probabilities.
    pub fn for_histograms(dim: usize) -> Self {
        Self { tolerance: 1e-4, ..Self::for_dim(dim) }
    }

    pub fn doubled(&self) -> Self {
        Self { nodes: 2 * self.nodes, refine_nodes: 2 * self.refine_nodes, qmc_points: 2 * self.qmc_points, ..self.clone() }
    }
}

/// Result of integrating an `m`-component integrand.
#[derive(Clone, Debug)]
pub struct Integral {
    /// Values at doubled resolution.
    pub values: Vec<f64>,
    /// Integrals of the absolute values, used as scales.
    pub abs: Vec<f64>,
    /// `max_k |I_n - I_2n| / (1 + S_k)`.
    pub change: f64,
}

/// Integrates `f: x -> R^m` over `[lo, hi]`, checking stability under doubling.
pub fn integrate<F>(f: &F, m: usize, lo: &[f64], hi: &[f64], singular: &SingularSet, spec: &QuadratureSpec) -> Result<Integral>
where
    F: Fn(&[f64], &mut [f64]) + Sync + ?Sized,
{
    let (coarse, _) = integrate_once(f, m, lo, hi, singular, spec);
    let (fine, abs) = integrate_once(f, m, lo, hi, singular, &spec.doubled());
    let mut change: f64 = 0.0;
    for k in 0..m {
        let c = (coarse[k] - fine[k]).abs() / (1.0 + abs[k]);
        change = if c.is_nan() { f64::INFINITY } else { change.max(c) };
    }
    let allowed = 10.0 * spec.tolerance;
    if change > allowed {
        return Err(Error::QuadratureNonConvergent { change, allowed });
    }
    Ok(Integral { values: fine, abs, change })
}

/// Single-resolution integral; returns `(values, abs values)`.
pub fn integrate_once<F>(f: &F, m: usize, lo: &[f64], hi: &[f64], singular: &SingularSet, spec: &QuadratureSpec) -> (Vec<f64>, Vec<f64>)
where
    F: Fn(&[f64], &mut [f64]) + Sync + ?Sized,
{
    let d = lo.len();
    let mut acc = vec![0.0; m];
    let mut abs = vec![0.0; m];
    if d >= 4 || spec.nodes == 0 {
        qmc_box(f, m, lo, hi, singular, spec.qmc_points, &mut acc, &mut abs);
        return (acc, abs);
    }
    let main = gauss_legendre(spec.nodes);
    let fine = gauss_legendre(spec.refine_nodes);
    let rules = Rules { main: &main, graded: &fine, switch_depth: spec.max_depth.saturating_sub(1) };
    refine(f, m, lo.to_vec(), hi.to_vec(), singular, spec.max_depth, &rules, false, &mut acc, &mut abs);
    (acc, abs)
}

struct Rules<'a> {
    main: &'a (Vec<f64>, Vec<f64>),
    graded: &'a (Vec<f64>, Vec<f64>),
    /// Grading depth below which cells are small enough for the graded rule.
    switch_depth: usize,
}

#[allow(clippy::too_many_arguments)]
fn refine<F>(
    f: &F,
    m: usize,
    lo: Vec<f64>,
    hi: Vec<f64>,
    singular: &SingularSet,
    depth: usize,
    rules: &Rules<'_>,
    graded: bool,
    acc: &mut [f64],
    abs: &mut [f64],
) where
    F: Fn(&[f64], &mut [f64]) + Sync + ?Sized,
{
    let d = lo.len();
    let hit = singular.as_slice().iter().find(|p| p.len() == d && (0..d).all(|i| lo[i] <= p[i] && p[i] <= hi[i]));
    let rule = if graded { rules.graded } else { rules.main };
    let Some(p) = hit else {
        tensor_box(f, m, &lo, &hi, rule, acc, abs);
        return;
    };
    let interior: Vec<usize> = (0..d).filter(|&i| lo[i] < p[i] && p[i] < hi[i]).collect();
    if !interior.is_empty() {
        // split at the singular point so it becomes a corner of every child
        for mask in 0..(1usize << interior.len()) {
            let (mut clo, mut chi) = (lo.clone(), hi.clone());
            for (bit, &i) in interior.iter().enumerate() {
                if mask >> bit & 1 == 0 {
                    chi[i] = p[i];
                } else {
                    clo[i] = p[i];
                }
            }
            refine(f, m, clo, chi, singular, depth, rules, graded, acc, abs);
        }
        return;
    }
    if depth == 0 {
        return;
    }
    let mid: Vec<f64> = (0..d).map(|i| 0.5 * (lo[i] + hi[i])).collect();
    for mask in 0..(1usize << d) {
        let (mut clo, mut chi) = (lo.clone(), hi.clone());
        for i in 0..d {
            if mask >> i & 1 == 0 {
                chi[i] = mid[i];
            } else {
                clo[i] = mid[i];
            }
        }
        refine(f, m, clo, chi, singular, depth - 1, rules, depth - 1 < rules.switch_depth, acc, abs);
    }
}

fn tensor_box<F>(f: &F, m: usize, lo: &[f64], hi: &[f64], rule: &(Vec<f64>, Vec<f64>), acc: &mut [f64], abs: &mut [f64])
where
    F: Fn(&[f64], &mut [f64]) + Sync + ?Sized,
{
    let d = lo.len();
    let (nodes, weights) = rule;
    let n = nodes.len();
    let half: Vec<f64> = (0..d).map(|i| 0.5 * (hi[i] - lo[i])).collect();
    let centre: Vec<f64> = (0..d).map(|i| 0.5 * (hi[i] + lo[i])).collect();
    let jac: f64 = half.iter().product();
    if jac == 0.0 {
        return;
    }
    let total = n.pow(d as u32);
    let mut idx = vec![0usize; d];
    let mut x = vec![0.0; d];
    let mut val = vec![0.0; m];
    for _ in 0..total {
        let mut w = jac;
        for i in 0..d {
            x[i] = centre[i] + half[i] * nodes[idx[i]];
            w *= weights[idx[i]];
        }
        f(&x, &mut val);
        for k in 0..m {
            acc[k] += w * val[k];
            abs[k] += w * val[k].abs();
        }
        for i in 0..d {
            idx[i] += 1;
            if idx[i] < n {
                break;
            }
            idx[i] = 0;
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn qmc_box<F>(f: &F, m: usize, lo: &[f64], hi: &[f64], singular: &SingularSet, n: usize, acc: &mut [f64], abs: &mut [f64])
where
    F: Fn(&[f64], &mut [f64]) + Sync + ?Sized,
{
    let d = lo.len();
    let vol: f64 = (0..d).map(|i| hi[i] - lo[i]).product();
    let mut u = vec![0.0; d];
    let mut x = vec![0.0; d];
    let mut val = vec![0.0; m];
    for j in 1..=n as u64 {
        halton_into(j, &mut u);
        for i in 0..d {
            x[i] = lo[i] + u[i] * (hi[i] - lo[i]);
        }
        if singular.contains(&x) {
            continue;
        }
        f(&x, &mut val);
        for k in 0..m {
            acc[k] += val[k];
            abs[k] += val[k].abs();
        }
    }
    let scale = vol / n as f64;
    for k in 0..m {
        acc[k] *= scale;
        abs[k] *= scale;
    }
}

/// Convenience wrapper for scalar integrands.
pub fn integrate_scalar<F>(f: &F, lo: &[f64], hi: &[f64], singular: &SingularSet, spec: &QuadratureSpec) -> Result<(f64, f64)>
where
    F: Fn(&[f64]) -> f64 + Sync + ?Sized,
{
    let g = |x: &[f64], out: &mut [f64]| out[0] = f(x);
    let r = integrate(&g, 1, lo, hi, singular, spec)?;
    Ok((r.values[0], r.abs[0]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn gauss_legendre_integrates_polynomials_exactly() {
        let (x, w) = gauss_legendre(5);
        for k in 0..10 {
            let exact = if k % 2 == 1 { 0.0 } else { 2.0 / (k as f64 + 1.0) };
            let got: f64 = x.iter().zip(&w).map(|(xi, wi)| wi * xi.powi(k)).sum();
            assert!((got - exact).abs() < 1e-14, "k={k}");
        }
        let (_, w) = gauss_legendre(128);
        assert!((w.iter().sum::<f64>() - 2.0).abs() < 1e-13);
    }

    #[test]
    fn gaussian_mass_in_two_dimensions() {
        let spec = QuadratureSpec::for_dim(2);
        let f = |x: &[f64]| (-(x[0] * x[0] + x[1] * x[1])).exp();
        let (v, _) = integrate_scalar(&f, &[-8.0, -8.0], &[8.0, 8.0], &SingularSet::empty(), &spec).unwrap();
        assert!((v - std::f64::consts::PI).abs() < 1e-12, "{v}");
    }

    #[test]
    fn integrable_point_singularity_is_resolved() {
        // int over [-1,1]^2 of |x|^-1 = 8 asinh(1)
        let spec = QuadratureSpec::for_dim(2);
        let f = |x: &[f64]| 1.0 / (x[0] * x[0] + x[1] * x[1]).sqrt();
        let (v, _) = integrate_scalar(&f, &[-1.0, -1.0], &[1.0, 1.0], &SingularSet::origin(2), &spec).unwrap();
        let exact = 8.0 * 1f64.asinh();
        assert!((v - exact).abs() < 1e-8, "{v} vs {exact}");
    }

    #[test]
    fn singular_point_off_centre_and_on_the_boundary() {
        let spec = QuadratureSpec::for_dim(2);
        let f = |x: &[f64]| 1.0 / (x[0] * x[0] + x[1] * x[1]).sqrt();
        let (a, _) = integrate_scalar(&f, &[-0.3, -1.0], &[1.7, 1.0], &SingularSet::origin(2), &spec).unwrap();
        let (b, _) = integrate_scalar(&f, &[-0.3, -1.0], &[0.0, 1.0], &SingularSet::origin(2), &spec).unwrap();
        let (c, _) = integrate_scalar(&f, &[0.0, -1.0], &[1.7, 1.0], &SingularSet::origin(2), &spec).unwrap();
        assert!((a - b - c).abs() < 1e-9);
    }

    #[test]
    fn unresolvable_integrand_reports_non_convergence() {
        let spec = QuadratureSpec { nodes: 4, ..QuadratureSpec::for_dim(1) };
        let f = |x: &[f64]| (40.0 * x[0]).sin().abs();
        let err = integrate_scalar(&f, &[0.0], &[3.0], &SingularSet::empty(), &spec).unwrap_err();
        assert!(matches!(err, Error::QuadratureNonConvergent { .. }));
    }

    #[test]
    fn qmc_handles_four_dimensions() {
        let spec = QuadratureSpec { qmc_points: 200_000, tolerance: 1e-3, ..QuadratureSpec::for_dim(4) };
        let f = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
        let (v, _) = integrate_scalar(&f, &[0.0; 4], &[1.0; 4], &SingularSet::empty(), &spec).unwrap();
        assert!((v - 4.0 / 3.0).abs() < 1e-3, "{v}");
    }

    proptest! {
        #[test]
        fn integral_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, shift in -0.5f64..0.5) {
            let spec = QuadratureSpec::for_dim(2);
            let s = SingularSet::empty();
            let lo = [-1.0 + shift, -1.0];
            let hi = [1.0 + shift, 2.0];
            let u = |x: &[f64]| (x[0] * x[1]).cos();
            let v = |x: &[f64]| x[0].exp() * x[1];
            let w = |x: &[f64]| a * u(x) + b * v(x);
            let (iu, su) = integrate_scalar(&u, &lo, &hi, &s, &spec).unwrap();
            let (iv, sv) = integrate_scalar(&v, &lo, &hi, &s, &spec).unwrap();
            let (iw, _) = integrate_scalar(&w, &lo, &hi, &s, &spec).unwrap();
            prop_assert!((iw - a * iu - b * iv).abs() <= 1e-12 * (1.0 + a.abs() * su + b.abs() * sv));
        }
    }
}
