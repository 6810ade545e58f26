//! Grid discretization of the generator and the resolvent machinery built on it.
//!
//! The operator is assembled in flux form. With node weights `w_i = psi rho V`
//! (`V` the cell volume) every row reads
//!
//! ```text
//! (L f)_i = 1/(2 w_i) sum_j k_ij (f_j - f_i) + 1/w_i sum_j max(F_ij, 0) (f_j - f_i),
//! ```
//!
//! where `k_ij = k_ji >= 0` are diffusion conductances built from `rho A` at edge
//! midpoints and `F_ij = -F_ji` are fluxes of `psi rho B` through cell faces,
//! upwinded. Neighbours outside the box are absorbing (Dirichlet), so they only
//! feed the diagonal. The consequences are exact rather than asymptotic: the
//! off-diagonals are non-negative, `sum_i w_i L_ij <= 0` whenever the discrete flux
//! is divergence free, and the dual operator built with `-F` is the weighted
//! adjoint `D^-1 L^T D` up to rounding.
//!
//! Off-diagonal entries of `A` use the symmetric diagonal-edge stencil, which stays
//! monotone while `a_kk / h_k >= sum_l |a_kl| / h_l`; otherwise assembly fails with
//! [`Error::NonMonotoneStencil`].

use std::io::Write;

use rand_core::RngCore;
use serde::{Deserialize, Serialize};

use crate::coefficients::{CoefficientSet, Direction};
use crate::error::{Error, Result};
use crate::field::ScalarField;
use crate::linalg::{CsrMatrix, Factored, SolveOutcome};
use crate::report::ReportEntry;
use crate::rng::{stream_rng, uniform};

/// Axis-aligned box with `n_i` interior nodes per axis; the boundary carries no nodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub n: Vec<usize>,
}

impl GridSpec {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>, n: Vec<usize>) -> Result<Self> {
        if lo.len() != hi.len() || lo.len() != n.len() || lo.is_empty() {
            return Err(Error::invalid("grid bounds and node counts must share one positive dimension"));
        }
        for i in 0..lo.len() {
            if !(hi[i] > lo[i]) {
                return Err(Error::invalid(format!("grid axis {i} has empty extent")));
            }
            if n[i] < 3 {
                return Err(Error::invalid(format!("grid axis {i} needs at least 3 interior nodes")));
            }
        }
        Ok(Self { lo, hi, n })
    }

    /// Cube `[lo, hi]^dim` with `n` interior nodes per axis.
    pub fn cube(dim: usize, lo: f64, hi: f64, n: usize) -> Result<Self> {
        Self::new(vec![lo; dim], vec![hi; dim], vec![n; dim])
    }

    /// Box with spacing `h` on every axis; the extents must be multiples of `h`.
    pub fn with_step(lo: Vec<f64>, hi: Vec<f64>, h: f64) -> Result<Self> {
        let mut n = Vec::with_capacity(lo.len());
        for i in 0..lo.len() {
            let cells = (hi[i] - lo[i]) / h;
            let rounded = cells.round();
            if (cells - rounded).abs() > 1e-9 * cells.max(1.0) {
                return Err(Error::invalid(format!("axis {i}: extent is not a multiple of the step {h}")));
            }
            n.push((rounded as usize).saturating_sub(1));
        }
        Self::new(lo, hi, n)
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn len(&self) -> usize {
        self.n.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn h(&self, axis: usize) -> f64 {
        (self.hi[axis] - self.lo[axis]) / (self.n[axis] + 1) as f64
    }

    pub fn steps(&self) -> Vec<f64> {
        (0..self.dim()).map(|k| self.h(k)).collect()
    }

    pub fn cell_volume(&self) -> f64 {
        self.steps().iter().product()
    }

    /// Multi-index of a flat index; axis 0 varies fastest.
    pub fn multi_index(&self, mut flat: usize) -> Vec<usize> {
        let mut idx = vec![0; self.dim()];
        for (k, slot) in idx.iter_mut().enumerate() {
            *slot = flat % self.n[k];
            flat /= self.n[k];
        }
        idx
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        let mut flat = 0;
        for k in (0..self.dim()).rev() {
            flat = flat * self.n[k] + idx[k];
        }
        flat
    }

    pub fn coordinate(&self, axis: usize, i: usize) -> f64 {
        self.lo[axis] + (i + 1) as f64 * self.h(axis)
    }

    pub fn node(&self, flat: usize) -> Vec<f64> {
        self.multi_index(flat).iter().enumerate().map(|(k, &i)| self.coordinate(k, i)).collect()
    }

    pub fn nodes(&self) -> Vec<Vec<f64>> {
        (0..self.len()).map(|i| self.node(i)).collect()
    }

    /// Samples a function at every node.
    pub fn sample(&self, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
        (0..self.len()).map(|i| f(&self.node(i))).collect()
    }

    /// Distance of node `flat` from the boundary, in units of the grid step (minimum over axes).
    pub fn boundary_distance(&self, flat: usize) -> usize {
        self.multi_index(flat).iter().enumerate().map(|(k, &i)| (i + 1).min(self.n[k] - i)).min().unwrap_or(0)
    }

    /// For every node of `self`, the flat index of the same node in `larger`.
    pub fn embed_in(&self, larger: &GridSpec) -> Result<Vec<usize>> {
        if self.dim() != larger.dim() {
            return Err(Error::DimensionMismatch { expected: larger.dim(), got: self.dim() });
        }
        let mut offsets = Vec::with_capacity(self.dim());
        for k in 0..self.dim() {
            let (hs, hl) = (self.h(k), larger.h(k));
            if (hs - hl).abs() > 1e-12 * hl {
                return Err(Error::invalid(format!("axis {k}: grids have different steps")));
            }
            let shift = (self.lo[k] - larger.lo[k]) / hl;
            let rounded = shift.round();
            if (shift - rounded).abs() > 1e-9 || rounded < 0.0 || rounded as usize + self.n[k] > larger.n[k] {
                return Err(Error::invalid(format!("axis {k}: box is not a commensurate sub-box")));
            }
            offsets.push(rounded as usize);
        }
        Ok((0..self.len())
            .map(|flat| {
                let idx: Vec<usize> = self.multi_index(flat).iter().zip(&offsets).map(|(i, o)| i + o).collect();
                larger.flat_index(&idx)
            })
            .collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StencilKind {
    /// Symmetric conductances for `A`, upwinded face fluxes for `B`.
    FluxUpwind,
}

/// Discretized generator on a box with absorbing boundary.
#[derive(Clone, Debug)]
pub struct GridOperator {
    pub spec: GridSpec,
    pub matrix: CsrMatrix,
    /// `w_i = psi(x_i) rho(x_i) V`.
    pub mu_hat_weights: Vec<f64>,
    pub direction: Direction,
    pub stencil_kind: StencilKind,
    /// Constant killing rate subtracted on the diagonal.
    pub killing: f64,
}

/// Assembles `L` (forward) or `L'` (dual) on `spec`.
pub fn discretize(cs: &CoefficientSet, spec: &GridSpec, direction: Direction) -> Result<GridOperator> {
    discretize_with_killing(cs, spec, direction, 0.0)
}

/// As [`discretize`], with an extra killing term `-c` on the diagonal.
pub fn discretize_with_killing(cs: &CoefficientSet, spec: &GridSpec, direction: Direction, killing: f64) -> Result<GridOperator> {
    if spec.dim() != cs.dim() {
        return Err(Error::DimensionMismatch { expected: cs.dim(), got: spec.dim() });
    }
    if !(killing >= 0.0) {
        return Err(Error::invalid("killing rate must be non-negative"));
    }
    let cs = cs.oriented(direction);
    let d = spec.dim();
    let steps = spec.steps();
    let vol = spec.cell_volume();
    let n = spec.len();
    let singular = cs.singular().clone();

    let point_ok = |p: &[f64]| -> Result<()> {
        if singular.contains(p) {
            Err(Error::SingularPoint { point: p.to_vec() })
        } else {
            Ok(())
        }
    };

    let mut weights = Vec::with_capacity(n);
    for i in 0..n {
        let x = spec.node(i);
        point_ok(&x)?;
        let w = cs.psi_value(&x)? * cs.rho().value(&x) * vol;
        if !(w.is_finite() && w > 0.0) {
            return Err(Error::NonFinite { what: "node weight", point: x });
        }
        weights.push(w);
    }

    let rho_a = |m: &[f64], buf: &mut [f64]| -> Result<f64> {
        point_ok(m)?;
        cs.a().eval_into(m, buf);
        let r = cs.rho().value(m);
        if !r.is_finite() || buf.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: "rho A at an edge midpoint", point: m.to_vec() });
        }
        Ok(r)
    };

    // outward flux of psi rho B through the face centred at `m` with normal +e_k
    let face_flux = |m: &[f64], k: usize| -> Result<f64> {
        if let Some(c) = cs.stream() {
            let mut corner = m.to_vec();
            let mut cm = vec![0.0; d * d];
            let mut acc = 0.0;
            for i in (0..d).filter(|&i| i != k) {
                let mut side = [0.0; 2];
                for (s, sign) in [1.0, -1.0].iter().enumerate() {
                    corner[i] = m[i] + sign * 0.5 * steps[i];
                    point_ok(&corner)?;
                    c.eval_into(&corner, &mut cm);
                    side[s] = cs.rho().value(&corner) * cm[i * d + k];
                }
                corner[i] = m[i];
                acc += 0.5 * vol / (steps[i] * steps[k]) * (side[0] - side[1]);
            }
            finite_or(acc, "stream flux", m)
        } else {
            point_ok(m)?;
            let b = cs.b().eval(m);
            let v = cs.psi_value(m)? * cs.rho().value(m) * b[k] * vol / steps[k];
            finite_or(v, "face flux", m)
        }
    };

    let diagonal_a = cs.a().is_diagonal();
    let mut triplets = Vec::with_capacity(n * (2 * d + 1 + if diagonal_a { 0 } else { 2 * d * (d - 1) }));
    let mut abuf = vec![0.0; d * d];
    for i in 0..n {
        let idx = spec.multi_index(i);
        let x = spec.node(i);
        let wi = weights[i];
        let mut diag = -killing;
        for k in 0..d {
            for sign in [1.0, -1.0] {
                let mut m = x.clone();
                m[k] += sign * 0.5 * steps[k];
                let r = rho_a(&m, &mut abuf)?;
                let mut cond = abuf[k * d + k] / (steps[k] * steps[k]);
                if !diagonal_a {
                    for l in (0..d).filter(|&l| l != k) {
                        cond -= abuf[k * d + l].abs() / (steps[k] * steps[l]);
                    }
                }
                if cond < -1e-12 * abuf[k * d + k].abs() / (steps[k] * steps[k]) {
                    return Err(Error::NonMonotoneStencil { node: x.clone(), conductance: cond });
                }
                let kappa = r * vol * cond.max(0.0);
                let flux = sign * face_flux(&m, k)?;
                let rate = 0.5 * kappa / wi + flux.max(0.0) / wi;
                diag -= rate;
                let inside = if sign > 0.0 { idx[k] + 1 < spec.n[k] } else { idx[k] > 0 };
                if inside && rate != 0.0 {
                    let mut j = idx.clone();
                    if sign > 0.0 {
                        j[k] += 1;
                    } else {
                        j[k] -= 1;
                    }
                    triplets.push((i, spec.flat_index(&j), rate));
                }
            }
        }
        if !diagonal_a {
            for k in 0..d {
                for l in (k + 1)..d {
                    for (sk, sl) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
                        let mut m = x.clone();
                        m[k] += sk * 0.5 * steps[k];
                        m[l] += sl * 0.5 * steps[l];
                        let r = rho_a(&m, &mut abuf)?;
                        let akl = abuf[k * d + l];
                        if akl == 0.0 || (sk * sl > 0.0) != (akl > 0.0) {
                            continue;
                        }
                        let rate = 0.5 * akl.abs() * r * vol / (steps[k] * steps[l]) / wi;
                        diag -= rate;
                        let nk = idx[k] as isize + sk as isize;
                        let nl = idx[l] as isize + sl as isize;
                        if nk >= 0 && (nk as usize) < spec.n[k] && nl >= 0 && (nl as usize) < spec.n[l] {
                            let mut j = idx.clone();
                            j[k] = nk as usize;
                            j[l] = nl as usize;
                            triplets.push((i, spec.flat_index(&j), rate));
                        }
                    }
                }
            }
        }
        triplets.push((i, i, diag));
    }
    let matrix = CsrMatrix::from_triplets(n, n, triplets);
    if !matrix.is_finite() {
        return Err(Error::NonFinite { what: "assembled operator", point: Vec::new() });
    }
    Ok(GridOperator { spec: spec.clone(), matrix, mu_hat_weights: weights, direction, stencil_kind: StencilKind::FluxUpwind, killing })
}

fn finite_or(v: f64, what: &'static str, x: &[f64]) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { what, point: x.to_vec() })
    }
}

/// One resolvent solve and its diagnostics.
#[derive(Clone, Debug)]
pub struct ResolventSolve {
    pub alpha: f64,
    pub rhs: Vec<f64>,
    pub solution: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
}

/// `alpha I - L_h`, prepared for repeated solves.
pub struct ResolventSolver {
    alpha: f64,
    system: Factored,
}

impl ResolventSolver {
    pub fn new(op: &GridOperator, alpha: f64) -> Result<Self> {
        Self::from_matrix(&op.matrix, alpha)
    }

    pub fn from_matrix(l: &CsrMatrix, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0) {
            return Err(Error::invalid("alpha must be positive"));
        }
        Ok(Self { alpha, system: Factored::new(l.scale_shift(-1.0, alpha)) })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn solve(&self, f: &[f64]) -> Result<ResolventSolve> {
        if f.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("resolvent right-hand side must be finite"));
        }
        let SolveOutcome { solution, iterations, residual } = self.system.solve(f)?;
        Ok(ResolventSolve { alpha: self.alpha, rhs: f.to_vec(), solution, iterations, residual })
    }
}

impl GridOperator {
    pub fn len(&self) -> usize {
        self.spec.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spec.is_empty()
    }

    pub fn apply(&self, f: &[f64]) -> Vec<f64> {
        self.matrix.mul_vec(f)
    }

    /// `D^-1 L^T D`.
    pub fn weighted_adjoint(&self) -> CsrMatrix {
        self.matrix.weighted_adjoint(&self.mu_hat_weights)
    }

    /// `sum_i w_i L_ij` for every column `j`.
    pub fn weighted_column_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        for (r, c, v) in self.matrix.triplets() {
            out[c] += self.mu_hat_weights[r] * v;
        }
        out
    }

    pub fn weighted_sum(&self, f: &[f64]) -> f64 {
        self.mu_hat_weights.iter().zip(f).map(|(w, v)| w * v).sum()
    }

    pub fn weighted_l1(&self, f: &[f64]) -> f64 {
        self.mu_hat_weights.iter().zip(f).map(|(w, v)| w * v.abs()).sum()
    }

    /// Writes the matrix as `row col value` lines with 17 significant digits.
    pub fn dump_coo(&self, out: &mut impl Write) -> Result<()> {
        writeln!(out, "% {} {} {}", self.len(), self.len(), self.matrix.nnz())?;
        for (r, c, v) in self.matrix.triplets() {
            writeln!(out, "{r} {c} {v:.16e}")?;
        }
        Ok(())
    }

    /// Writes `x_1,..,x_d,value` rows for a node vector.
    pub fn dump_csv(&self, values: &[f64], out: &mut impl Write) -> Result<()> {
        let d = self.spec.dim();
        let header: Vec<String> = (1..=d).map(|k| format!("x_{k}")).chain(std::iter::once("value".into())).collect();
        writeln!(out, "{}", header.join(","))?;
        for (i, v) in values.iter().enumerate() {
            let x = self.spec.node(i);
            let cols: Vec<String> = x.iter().chain(std::iter::once(v)).map(|c| format!("{c:.16e}")).collect();
            writeln!(out, "{}", cols.join(","))?;
        }
        Ok(())
    }
}

/// Solves `(alpha I - L_h) u = f`.
pub fn resolvent(op: &GridOperator, alpha: f64, f: &[f64]) -> Result<Vec<f64>> {
    Ok(ResolventSolver::new(op, alpha)?.solve(f)?.solution)
}

fn random_unit_vector(n: usize, rng: &mut impl RngCore) -> Vec<f64> {
    (0..n).map(|_| uniform(rng)).collect()
}

/// Data vectors for structural checks: constants, a point mass and random `[0,1]` fields.
fn probe_vectors(n: usize, trials: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = stream_rng(seed, 0x5eed);
    let mut fs = vec![vec![1.0; n], vec![0.0; n]];
    let mut point = vec![0.0; n];
    point[n / 2] = 1.0;
    fs.push(point);
    fs.extend((0..trials).map(|_| random_unit_vector(n, &mut rng)));
    fs
}

/// Worst violation of `0 <= alpha G_alpha f <= 1` for data `0 <= f <= 1`.
pub fn submarkov_violation(solver: &ResolventSolver, f: &[f64]) -> Result<f64> {
    if f.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::invalid("sub-Markov check needs data with 0 <= f <= 1"));
    }
    let u = solver.solve(f)?.solution;
    let a = solver.alpha();
    Ok(u.iter().map(|&v| (-a * v).max(a * v - 1.0).max(0.0)).fold(0.0, f64::max))
}

pub fn check_submarkov(op: &GridOperator, alpha: f64, trials: usize, seed: u64) -> Result<ReportEntry> {
    let solver = ResolventSolver::new(op, alpha)?;
    let mut worst: f64 = 0.0;
    for f in probe_vectors(op.len(), trials, seed) {
        worst = worst.max(submarkov_violation(&solver, &f)?);
    }
    Ok(ReportEntry::judged(
        "submarkov",
        worst,
        1e-9,
        format!("max violation of 0 <= alpha G f <= 1 over {} data vectors, {} nodes, alpha = {alpha}", trials + 3, op.len()),
    ))
}

pub fn check_l1_contraction(op: &GridOperator, alpha: f64, trials: usize, seed: u64) -> Result<ReportEntry> {
    let solver = ResolventSolver::new(op, alpha)?;
    let mut worst: f64 = 0.0;
    for f in probe_vectors(op.len(), trials, seed) {
        let mass = op.weighted_sum(&f);
        let u = solver.solve(&f)?.solution;
        let out = alpha * op.weighted_sum(&u);
        let excess = if mass > 0.0 { (out - mass) / mass } else { out.abs() };
        worst = worst.max(excess.max(0.0));
    }
    Ok(ReportEntry::judged(
        "l1-contraction",
        worst,
        1e-9,
        format!("max relative excess of int alpha G f dmu over int f dmu, {} data vectors", trials + 3),
    ))
}

/// `G^{V1} f <= G^{V2} f` on shared nodes, `f` given on the small grid and extended by zero.
pub fn check_nested_monotone(
    cs: &CoefficientSet,
    small: &GridSpec,
    large: &GridSpec,
    alpha: f64,
    data: &[Vec<f64>],
) -> Result<ReportEntry> {
    let map = small.embed_in(large)?;
    let s_op = discretize(cs, small, Direction::Forward)?;
    let l_op = discretize(cs, large, Direction::Forward)?;
    let s_solver = ResolventSolver::new(&s_op, alpha)?;
    let l_solver = ResolventSolver::new(&l_op, alpha)?;
    let mut worst: f64 = 0.0;
    for f in data {
        if f.len() != small.len() {
            return Err(Error::DimensionMismatch { expected: small.len(), got: f.len() });
        }
        if f.iter().any(|&v| v < 0.0) {
            return Err(Error::invalid("nested monotonicity needs f >= 0"));
        }
        let mut big = vec![0.0; large.len()];
        for (i, &j) in map.iter().enumerate() {
            big[j] = f[i];
        }
        let us = s_solver.solve(f)?.solution;
        let ul = l_solver.solve(&big)?.solution;
        for (i, &j) in map.iter().enumerate() {
            worst = worst.max(us[i] - ul[j]);
        }
    }
    Ok(ReportEntry::judged(
        "nested-monotone",
        worst.max(0.0),
        1e-8,
        format!("max of G_small f - G_large f on {} shared nodes over {} data vectors", map.len(), data.len()),
    ))
}

/// Relative weighted L1 residual of `(b - a) G_a G_b f - (G_a f - G_b f)`.
pub fn resolvent_equation_residual(op: &GridOperator, alpha: f64, beta: f64, f: &[f64]) -> Result<f64> {
    let ga = ResolventSolver::new(op, alpha)?;
    let gb = ResolventSolver::new(op, beta)?;
    let gbf = gb.solve(f)?.solution;
    let gaf = ga.solve(f)?.solution;
    let gagbf = ga.solve(&gbf)?.solution;
    let res: Vec<f64> = (0..f.len()).map(|i| (beta - alpha) * gagbf[i] - (gaf[i] - gbf[i])).collect();
    let scale = op.weighted_l1(&gaf).max(op.weighted_l1(&gbf)).max(f64::MIN_POSITIVE);
    Ok(op.weighted_l1(&res) / scale)
}

/// Increasing-domain limit of the resolvent.
#[derive(Clone, Debug)]
pub struct GlobalResolvent {
    /// Values on the nodes of the first (smallest) box, one vector per box.
    pub restricted: Vec<Vec<f64>>,
    /// Weighted L1 increments between consecutive boxes on the shared nodes.
    pub profile: Vec<f64>,
    /// Full solution on the largest box.
    pub finest: Vec<f64>,
    pub finest_spec: GridSpec,
}

impl GlobalResolvent {
    pub fn limit(&self) -> &[f64] {
        self.restricted.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Solves on each box of an increasing, commensurate family and tracks the increments.
/// Fails with [`Error::NotConverged`] when the last increment exceeds `tol`.
pub fn global_resolvent(
    cs: &CoefficientSet,
    family: &[GridSpec],
    alpha: f64,
    f: &(dyn Fn(&[f64]) -> f64 + Sync),
    tol: f64,
) -> Result<GlobalResolvent> {
    let first = family.first().ok_or_else(|| Error::invalid("empty box family"))?;
    let shared_weights = discretize(cs, first, Direction::Forward)?.mu_hat_weights;
    let mut restricted = Vec::with_capacity(family.len());
    let mut profile = Vec::new();
    let mut finest = Vec::new();
    for spec in family {
        let map = first.embed_in(spec)?;
        let op = discretize(cs, spec, Direction::Forward)?;
        let u = ResolventSolver::new(&op, alpha)?.solve(&spec.sample(f))?.solution;
        let r: Vec<f64> = map.iter().map(|&j| u[j]).collect();
        if let Some(prev) = restricted.last() {
            let prev: &Vec<f64> = prev;
            profile.push(prev.iter().zip(&r).zip(&shared_weights).map(|((p, q), w)| w * (p - q).abs()).sum());
        }
        restricted.push(r);
        finest = u;
    }
    let last = profile.last().copied().unwrap_or(0.0);
    if last > tol {
        return Err(Error::NotConverged { last_increment: last, profile });
    }
    Ok(GlobalResolvent { restricted, profile, finest, finest_spec: family.last().expect("non-empty").clone() })
}

/// Duality metrics between forward and dual discretizations.
#[derive(Clone, Debug)]
pub struct DualityMetrics {
    /// `|<alpha G u, v>_w - <u, alpha G' v>_w|`, relative, with independently built `G'`.
    pub independent: f64,
    /// Same with `G'` solving against `D^-1 (alpha I - L)^T D`.
    pub weighted_adjoint: f64,
}

pub fn duality_metrics(cs: &CoefficientSet, spec: &GridSpec, alpha: f64, trials: usize, seed: u64) -> Result<DualityMetrics> {
    let fwd = discretize(cs, spec, Direction::Forward)?;
    let dual = discretize(cs, spec, Direction::Dual)?;
    let g = ResolventSolver::new(&fwd, alpha)?;
    let gd = ResolventSolver::new(&dual, alpha)?;
    let gadj = ResolventSolver::from_matrix(&fwd.weighted_adjoint(), alpha)?;
    let w = &fwd.mu_hat_weights;
    let inner = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).zip(w).map(|((p, q), r)| p * q * r).sum() };
    let mut rng = stream_rng(seed, 0xd0a1);
    let (mut m1, mut m2): (f64, f64) = (0.0, 0.0);
    for _ in 0..trials {
        let u: Vec<f64> = (0..spec.len()).map(|_| 2.0 * uniform(&mut rng) - 1.0).collect();
        let v: Vec<f64> = (0..spec.len()).map(|_| 2.0 * uniform(&mut rng) - 1.0).collect();
        let scale: f64 = u.iter().zip(&v).zip(w).map(|((p, q), r)| (p * q).abs() * r).sum::<f64>().max(f64::MIN_POSITIVE);
        let gu = g.solve(&u)?.solution;
        let lhs = alpha * inner(&gu, &v);
        let rhs1 = alpha * inner(&u, &gd.solve(&v)?.solution);
        let rhs2 = alpha * inner(&u, &gadj.solve(&v)?.solution);
        m1 = m1.max((lhs - rhs1).abs() / scale);
        m2 = m2.max((lhs - rhs2).abs() / scale);
    }
    Ok(DualityMetrics { independent: m1, weighted_adjoint: m2 })
}

pub fn check_duality(cs: &CoefficientSet, spec: &GridSpec, alpha: f64, trials: usize, seed: u64) -> Result<Vec<ReportEntry>> {
    let m = duality_metrics(cs, spec, alpha, trials, seed)?;
    let h = spec.steps().into_iter().fold(0.0, f64::max);
    Ok(vec![
        ReportEntry::judged("duality-weighted-adjoint", m.weighted_adjoint, 1e-10, format!("{trials} random pairs, {} nodes", spec.len())),
        ReportEntry::judged(
            "duality-independent",
            m.independent,
            h,
            format!("independently assembled dual operator, allowance C h with C = 1, h = {h:.4e}"),
        ),
    ])
}

/// `max_i |(D^-1 L^T D g)_i - L' g(x_i)|` for a smooth `g`, over nodes at least
/// `margin` steps away from the boundary.
pub fn adjoint_consistency_error(cs: &CoefficientSet, spec: &GridSpec, g: &ScalarField, margin: usize) -> Result<f64> {
    let fwd = discretize(cs, spec, Direction::Forward)?;
    let gv = spec.sample(|x| g.value(x));
    let adj = fwd.weighted_adjoint().mul_vec(&gv);
    let mut worst: f64 = 0.0;
    for (i, a) in adj.iter().enumerate() {
        if spec.boundary_distance(i) < margin {
            continue;
        }
        let exact = cs.generator_apply(g, &spec.node(i), Direction::Dual)?;
        worst = worst.max((a - exact).abs());
    }
    Ok(worst)
}

/// Implicit-Euler semigroup: `(alpha G_alpha)^n f` with `alpha = n / t`.
pub fn semigroup_step(op: &GridOperator, t: f64, n_steps: usize, f: &[f64]) -> Result<Vec<f64>> {
    if !(t > 0.0) || n_steps == 0 {
        return Err(Error::invalid("semigroup step needs t > 0 and at least one step"));
    }
    let alpha = n_steps as f64 / t;
    let solver = ResolventSolver::new(op, alpha)?;
    let mut u = f.to_vec();
    for _ in 0..n_steps {
        u = solver.solve(&u)?.solution;
        for v in u.iter_mut() {
            *v *= alpha;
        }
    }
    Ok(u)
}

/// Decay profile of the invariance probe.
#[derive(Clone, Debug, Serialize)]
pub struct ChiProfile {
    /// Normalized `mu_hat`-weighted L1 norm of `chi_n` on the window, one per box.
    pub window_norms: Vec<f64>,
    pub alpha: f64,
    pub killing: f64,
}

impl ChiProfile {
    pub fn strictly_decreasing(&self) -> bool {
        self.window_norms.windows(2).all(|p| p[1] < p[0])
    }

    pub fn last(&self) -> f64 {
        self.window_norms.last().copied().unwrap_or(f64::NAN)
    }
}

/// `chi_n = 1 - alpha G'_alpha 1` on each box (dual operator), averaged against
/// `mu_hat` over the nodes inside `[window_lo, window_hi]`.
pub fn invariance_probe_chi(
    cs: &CoefficientSet,
    family: &[GridSpec],
    alpha: f64,
    window_lo: &[f64],
    window_hi: &[f64],
    killing: f64,
) -> Result<ChiProfile> {
    let mut window_norms = Vec::with_capacity(family.len());
    for spec in family {
        let op = discretize_with_killing(cs, spec, Direction::Dual, killing)?;
        let u = ResolventSolver::new(&op, alpha)?.solve(&vec![1.0; spec.len()])?.solution;
        let (mut num, mut den) = (0.0, 0.0);
        for (i, ui) in u.iter().enumerate() {
            let x = spec.node(i);
            if x.iter().enumerate().all(|(k, &xk)| window_lo[k] <= xk && xk <= window_hi[k]) {
                let w = op.mu_hat_weights[i];
                num += w * (1.0 - alpha * ui).abs();
                den += w;
            }
        }
        if den == 0.0 {
            return Err(Error::invalid("probe window contains no grid nodes"));
        }
        window_norms.push(num / den);
    }
    Ok(ChiProfile { window_norms, alpha, killing })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{MatrixField, VectorField};
    use proptest::prelude::*;

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

    fn brownian() -> CoefficientSet {
        let one = ScalarField::constant(1, 1.0);
        CoefficientSet::new(one.clone(), one, MatrixField::identity(1), VectorField::zero(1)).unwrap()
    }

    fn rotating_ou() -> CoefficientSet {
        let c = MatrixField::constant(2, &[0.0, 1.0, -1.0, 0.0]).unwrap();
        CoefficientSet::with_stream(gaussian(2), ScalarField::constant(2, 1.0), MatrixField::identity(2), c).unwrap()
    }

    #[test]
    fn half_laplacian_stencil() {
        let spec = GridSpec::new(vec![0.0], vec![1.0], vec![3]).unwrap();
        let op = discretize(&brownian(), &spec, Direction::Forward).unwrap();
        let dense = op.matrix.to_dense();
        // 1/2 * (1, -2, 1) / h^2 with h = 0.25
        assert!((dense[(1, 0)] - 8.0).abs() < 1e-12 && (dense[(1, 1)] + 16.0).abs() < 1e-12 && (dense[(1, 2)] - 8.0).abs() < 1e-12);
        let sums: Vec<f64> = (0..3).map(|r| (0..3).map(|c| dense[(r, c)]).sum()).collect();
        assert!(sums[1].abs() < 1e-12 && sums[0] < 0.0 && sums[2] < 0.0);
    }

    #[test]
    fn ou_off_diagonals_are_non_negative() {
        let spec = GridSpec::new(vec![-4.0], vec![4.0], vec![127]).unwrap();
        let op = discretize(&ou(1), &spec, Direction::Forward).unwrap();
        for (r, c, v) in op.matrix.triplets() {
            if r != c {
                assert!(v >= 0.0);
            } else {
                assert!(v <= 0.0);
            }
        }
        assert!(op.weighted_column_sums().iter().all(|&s| s <= 1e-12 * op.mu_hat_weights.iter().fold(0.0, |a: f64, b| a.max(*b))));
    }

    #[test]
    fn strong_cross_diffusion_is_not_monotone() {
        let a = MatrixField::constant(2, &[1.0, 1.2, 1.2, 1.0]).unwrap();
        let cs = CoefficientSet::new(gaussian(2), ScalarField::constant(2, 1.0), a, VectorField::zero(2)).unwrap();
        let spec = GridSpec::cube(2, -1.0, 1.0, 7).unwrap();
        assert!(matches!(discretize(&cs, &spec, Direction::Forward), Err(Error::NonMonotoneStencil { .. })));
        let mild = MatrixField::constant(2, &[1.0, 0.3, 0.3, 1.0]).unwrap();
        let cs = CoefficientSet::new(gaussian(2), ScalarField::constant(2, 1.0), mild, VectorField::zero(2)).unwrap();
        let op = discretize(&cs, &spec, Direction::Forward).unwrap();
        assert!(op.matrix.triplets().all(|(r, c, v)| r == c || v >= 0.0));
    }

    #[test]
    fn laplacian_resolvent_of_first_eigenfunction() {
        let n = 31;
        let spec = GridSpec::new(vec![0.0], vec![1.0], vec![n]).unwrap();
        let op = discretize(&brownian(), &spec, Direction::Forward).unwrap();
        let h = spec.h(0);
        let f = spec.sample(|x| (std::f64::consts::PI * x[0]).sin());
        // discrete eigenvalue of -1/2 d^2: 2 sin^2(pi h / 2) / h^2
        let lam = 2.0 * (std::f64::consts::PI * h / 2.0).sin().powi(2) / (h * h);
        let u = resolvent(&op, 1.0, &f).unwrap();
        for (ui, fi) in u.iter().zip(&f) {
            assert!((ui - fi / (1.0 + lam)).abs() < 1e-12);
        }
        assert!(resolvent(&op, 1.0, &vec![0.0; n]).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_data_are_absorbed_at_the_boundary() {
        let spec = GridSpec::cube(1, -2.0, 2.0, 15).unwrap();
        let op = discretize(&ou(1), &spec, Direction::Forward).unwrap();
        let u = resolvent(&op, 2.0, &vec![2.0; spec.len()]).unwrap();
        assert!(u.iter().all(|&v| v <= 1.0 + 1e-12));
        assert!(u[0] < 1.0 - 1e-3);
    }

    #[test]
    fn submarkov_and_contraction_on_rotating_ou() {
        let spec = GridSpec::cube(2, -3.0, 3.0, 19).unwrap();
        for dir in [Direction::Forward, Direction::Dual] {
            let op = discretize(&rotating_ou(), &spec, dir).unwrap();
            assert!(check_submarkov(&op, 1.0, 10, 1).unwrap().passed());
            let e = check_l1_contraction(&op, 1.0, 10, 2).unwrap();
            assert!(e.passed(), "{e:?}");
        }
    }

    #[test]
    fn negative_data_are_rejected() {
        let spec = GridSpec::cube(1, -1.0, 1.0, 5).unwrap();
        let op = discretize(&ou(1), &spec, Direction::Forward).unwrap();
        let solver = ResolventSolver::new(&op, 1.0).unwrap();
        assert!(submarkov_violation(&solver, &[0.5, -0.1, 0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn dual_of_dual_reproduces_forward() {
        let spec = GridSpec::cube(2, -2.0, 2.0, 9).unwrap();
        let cs = rotating_ou();
        let a = discretize(&cs, &spec, Direction::Forward).unwrap();
        let b = discretize(&cs.dual(), &spec, Direction::Dual).unwrap();
        assert_eq!(a.matrix, b.matrix);
    }

    #[test]
    fn stream_dual_is_the_weighted_adjoint() {
        let spec = GridSpec::cube(2, -2.5, 2.5, 13).unwrap();
        let cs = rotating_ou();
        let fwd = discretize(&cs, &spec, Direction::Forward).unwrap();
        let dual = discretize(&cs, &spec, Direction::Dual).unwrap();
        let adj = fwd.weighted_adjoint();
        for (r, c, v) in dual.matrix.triplets() {
            assert!((v - adj.get(r, c)).abs() <= 1e-10 * (1.0 + v.abs()));
        }
        let m = duality_metrics(&cs, &spec, 1.0, 5, 3).unwrap();
        assert!(m.weighted_adjoint < 1e-10 && m.independent < 1e-10);
    }

    #[test]
    fn nested_boxes_and_identical_boxes() {
        let cs = ou(1);
        let small = GridSpec::with_step(vec![-2.0], vec![2.0], 0.125).unwrap();
        let large = GridSpec::with_step(vec![-4.0], vec![4.0], 0.125).unwrap();
        let bump = small.sample(|x| (1.0 - x[0] * x[0] / 4.0).max(0.0));
        let e = check_nested_monotone(&cs, &small, &large, 1.0, &[bump.clone(), vec![0.0; small.len()]]).unwrap();
        assert!(e.passed(), "{e:?}");
        let same = check_nested_monotone(&cs, &small, &small, 1.0, &[bump]).unwrap();
        assert!(same.metric.abs() <= 1e-12);
    }

    #[test]
    fn incommensurate_boxes_are_rejected() {
        let small = GridSpec::with_step(vec![-2.05], vec![1.95], 0.125).unwrap();
        let large = GridSpec::with_step(vec![-4.0], vec![4.0], 0.125).unwrap();
        assert!(small.embed_in(&large).is_err());
    }

    #[test]
    fn resolvent_equation_holds_on_one_box() {
        let spec = GridSpec::cube(2, -3.0, 3.0, 15).unwrap();
        let op = discretize(&rotating_ou(), &spec, Direction::Forward).unwrap();
        let f = spec.sample(|x| (-x[0] * x[0] - 2.0 * x[1] * x[1]).exp());
        assert!(resolvent_equation_residual(&op, 1.0, 2.5, &f).unwrap() < 1e-8);
    }

    #[test]
    fn global_resolvent_converges_for_compact_data() {
        let h = 0.125;
        let family: Vec<GridSpec> = [2.0, 3.0, 4.0, 5.0, 6.0].iter().map(|&l| GridSpec::with_step(vec![-l], vec![l], h).unwrap()).collect();
        let f = |x: &[f64]| if x[0].abs() < 1.0 { 1.0 - x[0] * x[0] } else { 0.0 };
        let g = global_resolvent(&ou(1), &family, 1.0, &f, 1e-6).unwrap();
        assert!(g.profile.windows(2).all(|p| p[1] < p[0]), "{:?}", g.profile);
        let zero = |_: &[f64]| 0.0;
        let z = global_resolvent(&ou(1), &family, 1.0, &zero, 1e-6).unwrap();
        assert!(z.limit().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn semigroup_limits() {
        let spec = GridSpec::cube(1, -1.0, 1.0, 31).unwrap();
        let op = discretize(&ou(1), &spec, Direction::Forward).unwrap();
        let t1 = semigroup_step(&op, 0.5, 50, &vec![1.0; spec.len()]).unwrap();
        assert!(t1.iter().all(|&v| (0.0..1.0).contains(&v)));
        let f = spec.sample(|x| (-(x[0] * x[0]) * 20.0).exp());
        let lf = op.apply(&f);
        let t = 1e-4;
        let tf = semigroup_step(&op, t, 4, &f).unwrap();
        let err = tf.iter().zip(&f).zip(&lf).map(|((a, b), c)| ((a - b) / t - c).abs()).fold(0.0, f64::max);
        let scale = lf.iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(err < 0.05 * scale, "{err} vs {scale}");
    }

    #[test]
    fn chi_probe_decays_for_ou_and_stalls_with_killing() {
        let family: Vec<GridSpec> = [1.0, 2.0, 3.0, 4.0].iter().map(|&l| GridSpec::with_step(vec![-l], vec![l], 0.0625).unwrap()).collect();
        let p = invariance_probe_chi(&ou(1), &family, 1.0, &[-0.5], &[0.5], 0.0).unwrap();
        assert!(p.strictly_decreasing() && p.last() <= 0.05, "{:?}", p.window_norms);
        let k = invariance_probe_chi(&ou(1), &family, 1.0, &[-0.5], &[0.5], 0.5).unwrap();
        assert!(k.last() > 0.1);
        let big_alpha = invariance_probe_chi(&ou(1), &family[..1], 1e6, &[-0.5], &[0.5], 0.0).unwrap();
        assert!((0.0..=1.0).contains(&big_alpha.last()));
    }

    #[test]
    fn coo_dump_has_seventeen_digits() {
        let spec = GridSpec::new(vec![0.0], vec![1.0], vec![3]).unwrap();
        let op = discretize(&brownian(), &spec, Direction::Forward).unwrap();
        let mut buf = Vec::new();
        op.dump_coo(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.lines().nth(1).unwrap().ends_with("-1.6000000000000000e1"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn nested_monotone_for_random_data(seed in 0u64..1000) {
            let cs = rotating_ou();
            let small = GridSpec::with_step(vec![-1.5, -1.5], vec![1.5, 1.5], 0.25).unwrap();
            let large = GridSpec::with_step(vec![-2.5, -2.0], vec![2.5, 3.0], 0.25).unwrap();
            let mut rng = stream_rng(seed, 1);
            let f: Vec<f64> = (0..small.len()).map(|_| uniform(&mut rng)).collect();
            let e = check_nested_monotone(&cs, &small, &large, 0.7, &[f]).unwrap();
            prop_assert!(e.passed());
        }
    }
}
