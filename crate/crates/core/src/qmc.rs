//! Halton low-discrepancy points.

const PRIMES: [u64; 32] =
    [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89, 97, 101, 103, 107, 109, 113, 127, 131];

/// Maximum supported dimension.
pub const MAX_DIM: usize = PRIMES.len();

fn radical_inverse(mut n: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut out = 0.0;
    while n > 0 {
        out += f * (n % base) as f64;
        n /= base;
        f *= inv;
    }
    out
}

/// The `index`-th Halton point in `[0,1)^dim`, written into `out`.
pub fn halton_into(index: u64, out: &mut [f64]) {
    assert!(out.len() <= MAX_DIM, "Halton sequence supports at most {MAX_DIM} dimensions");
    for (k, o) in out.iter_mut().enumerate() {
        *o = radical_inverse(index, PRIMES[k]);
    }
}

/// Iterator over Halton points, skipping index 0 (the origin).
#[derive(Clone, Debug)]
pub struct Halton {
    dim: usize,
    next: u64,
}

impl Halton {
    pub fn new(dim: usize) -> Self {
        assert!(dim <= MAX_DIM);
        Self { dim, next: 1 }
    }

    pub fn skip_to(mut self, index: u64) -> Self {
        self.next = index.max(1);
        self
    }
}

impl Iterator for Halton {
    type Item = Vec<f64>;

    fn next(&mut self) -> Option<Vec<f64>> {
        let mut p = vec![0.0; self.dim];
        halton_into(self.next, &mut p);
        self.next += 1;
        Some(p)
    }
}

/// `n` quasi-random points in the box `[lo, hi]`.
pub fn points_in_box(lo: &[f64], hi: &[f64], n: usize) -> Vec<Vec<f64>> {
    Halton::new(lo.len()).take(n).map(|u| u.iter().enumerate().map(|(i, t)| lo[i] + t * (hi[i] - lo[i])).collect()).collect()
}

/// `n` quasi-random points with `r_min < |x| <= r_max`, spread uniformly in the
/// radius and in direction.
pub fn points_in_shell(dim: usize, r_min: f64, r_max: f64, n: usize) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(n);
    let mut u = vec![0.0; dim + 1];
    let mut idx = 1u64;
    while out.len() < n {
        halton_into(idx, &mut u);
        idx += 1;
        // direction from a Gaussian via the inverse normal of the remaining coordinates
        let mut dir: Vec<f64> = u[1..].iter().map(|&t| inverse_normal(t.clamp(1e-12, 1.0 - 1e-12))).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-12 {
            continue;
        }
        // open at r_min: t in (0,1] maps to (r_min, r_max]
        let t = 1.0 - u[0];
        let r = r_min + t * (r_max - r_min);
        if r <= r_min {
            continue;
        }
        for v in dir.iter_mut() {
            *v *= r / norm;
        }
        out.push(dir);
    }
    out
}

/// Acklam's rational approximation of the standard normal quantile
/// (relative error below 1.2e-9).
pub fn inverse_normal(p: f64) -> f64 {
    const A: [f64; 6] =
        [-3.969683028665376e1, 2.209460984245205e2, -2.759285104469687e2, 1.383_577_518_672_69e2, -3.066479806614716e1, 2.506628277459239];
    const B: [f64; 5] = [-5.447609879822406e1, 1.615858368580409e2, -1.556989798598866e2, 6.680131188771972e1, -1.328068155288572e1];
    const C: [f64; 6] =
        [-7.784894002430293e-3, -3.223964580411365e-1, -2.400758277161838, -2.549732539343734, 4.374664141464968, 2.938163982698783];
    const D: [f64; 4] = [7.784695709041462e-3, 3.224671290700398e-1, 2.445134137142996, 3.754408661907416];
    let plow = 0.02425;
    if p < plow {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5]) / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - plow {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5]) / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    }
}
