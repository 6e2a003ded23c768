//! Low-rank bivariate kernel approximation.
//!
//! Smooth kernels K(x, y) are represented as short sums of separated terms
//! sum_i A_i(x) B_i(y), each slice a univariate Chebyshev expansion. The
//! workhorse is a greedy rank-revealing construction (a continuous analogue
//! of Gaussian elimination with complete pivoting): sample on a grid, peel
//! off the rank-one term through the absolute maximum of the residual,
//! repeat. A Cholesky variant pivots on the diagonal for Hermitian
//! non-negative definite kernels and stores half the slices.
//!
//! Grids are "skewed": Chebyshev points of the first kind in x against
//! points of the second kind in y, so the sample never lands on x = y. This
//! is what lets [`extract_splitting`] fit the log-free part of a fundamental
//! solution by evaluating it arbitrarily close to, but never on, the
//! singular diagonal.

use crate::cheb::{
    cheb_points, chop, values_to_coeffs, Basis, CoeffExpansion, GridSample, NodeKind, Segment,
    C64,
};
use crate::error::{Error, Result};
use nalgebra::DMatrix;
use std::f64::consts::PI;

/// Default relative tolerance for kernel fits.
pub const DEFAULT_KERNEL_TOL: f64 = 1e-14;

const MAX_RANK: usize = 4096;
const MAX_GRID: usize = 4096;

fn cz() -> C64 {
    C64::new(0.0, 0.0)
}

/// Separated-variable kernel approximation K(x, y) ~ sum_i A_i(x) B_i(y).
///
/// Slices live in the local variables of their segments; rank is at least 1
/// (the zero kernel keeps one zero term).
#[derive(Debug, Clone)]
pub struct LowRankKernel {
    /// (A_i over the x segment, B_i over the y segment).
    pub terms: Vec<(CoeffExpansion, CoeffExpansion)>,
    /// Local pivot coordinates chosen during greedy construction; empty for
    /// SVD recompression.
    pub pivots: Vec<(f64, f64)>,
}

impl LowRankKernel {
    pub fn zero(segx: Segment, segy: Segment) -> LowRankKernel {
        LowRankKernel {
            terms: vec![(
                CoeffExpansion::zero(Basis::T, segx),
                CoeffExpansion::zero(Basis::T, segy),
            )],
            pivots: Vec::new(),
        }
    }

    pub fn rank(&self) -> usize {
        self.terms.len()
    }

    /// Evaluate in the local variables of the two segments.
    pub fn eval_local(&self, s: C64, t: C64) -> Result<C64> {
        let mut acc = cz();
        for (a, b) in &self.terms {
            acc += a.eval_local(s)? * b.eval_local(t)?;
        }
        Ok(acc)
    }

    /// Evaluate at global points (x on the target segment, y on the source).
    pub fn eval(&self, x: C64, y: C64) -> Result<C64> {
        let mut acc = cz();
        for (a, b) in &self.terms {
            acc += a.eval(x)? * b.eval(y)?;
        }
        Ok(acc)
    }

    /// JSON dump: a list of [A_i, B_i] pairs in the expansion format.
    pub fn dump_json(&self) -> String {
        let terms: Vec<_> = self
            .terms
            .iter()
            .map(|(a, b)| serde_json::json!([a.to_json(), b.to_json()]))
            .collect();
        serde_json::Value::Array(terms).to_string()
    }
}

/// Sample f on the diagonal-avoiding grid: m first-kind points in x crossed
/// with n second-kind points in y. First-kind points are interior and
/// interlace the second-kind points, so x_i = y_j never occurs.
pub fn skewed_grid_sample(
    f: impl Fn(f64, f64) -> C64,
    m: usize,
    n: usize,
) -> Result<DMatrix<C64>> {
    let xs = cheb_points(NodeKind::First, m)?;
    let ys = cheb_points(NodeKind::Second, n)?;
    Ok(DMatrix::from_fn(m, n, |i, j| f(xs[i], ys[j])))
}

/// Coefficient matrix of the product-basis interpolant
/// f(x, y) ~ sum_{ij} A_ij T_i(x) T_j(y) on the skewed m x n grid.
pub fn tensor_interpolant(
    f: impl Fn(f64, f64) -> C64,
    m: usize,
    n: usize,
) -> Result<DMatrix<C64>> {
    let xs = cheb_points(NodeKind::First, m)?;
    let ys = cheb_points(NodeKind::Second, n)?;
    let v = skewed_grid_sample(f, m, n)?;
    let mut half = DMatrix::from_element(m, n, cz());
    for j in 0..n {
        let col: Vec<C64> = (0..m).map(|i| v[(i, j)]).collect();
        let e = values_to_coeffs(&GridSample::new(NodeKind::First, xs.clone(), col)?)?;
        for i in 0..m {
            half[(i, j)] = e.coeffs[i];
        }
    }
    let mut a = DMatrix::from_element(m, n, cz());
    for i in 0..m {
        let row: Vec<C64> = (0..n).map(|j| half[(i, j)]).collect();
        let e = values_to_coeffs(&GridSample::new(NodeKind::Second, ys.clone(), row)?)?;
        for j in 0..n {
            a[(i, j)] = e.coeffs[j];
        }
    }
    Ok(a)
}

/// Rank-revealing truncation of a tensor coefficient matrix. Terms come out
/// ordered by decreasing singular value, truncated at `tol * sigma_1`; the
/// zero matrix yields one zero term.
pub fn svd_recompress(coeffs: &DMatrix<C64>, tol: f64) -> LowRankKernel {
    svd_recompress_on(coeffs, Segment::unit(), Segment::unit(), tol)
}

pub fn svd_recompress_on(
    coeffs: &DMatrix<C64>,
    segx: Segment,
    segy: Segment,
    tol: f64,
) -> LowRankKernel {
    let (s, u, v) = jacobi_svd(coeffs);
    let smax = s.first().copied().unwrap_or(0.0);
    if smax == 0.0 {
        return LowRankKernel::zero(segx, segy);
    }
    let mut terms = Vec::new();
    for k in 0..s.len() {
        if s[k] <= tol * smax && k > 0 {
            break;
        }
        let mut a = CoeffExpansion::new(
            Basis::T,
            segx,
            u.column(k).iter().map(|v| v * s[k]).collect(),
        );
        let mut b = CoeffExpansion::new(
            Basis::T,
            segy,
            v.column(k).iter().map(|v| v.conj()).collect(),
        );
        a.trim(tol);
        b.trim(tol);
        terms.push((a, b));
    }
    LowRankKernel {
        terms,
        pivots: Vec::new(),
    }
}

/// One-sided Jacobi SVD: A = U diag(s) V^H with s sorted descending.
/// Chosen over iterative bidiagonalization for its high relative accuracy on
/// small singular values, which the rank cutoff depends on.
fn jacobi_svd(a: &DMatrix<C64>) -> (Vec<f64>, DMatrix<C64>, DMatrix<C64>) {
    let (m, n) = (a.nrows(), a.ncols());
    let mut w = a.clone();
    let mut v = DMatrix::from_diagonal_element(n, n, C64::new(1.0, 0.0));
    let eps = f64::EPSILON;
    for _sweep in 0..60 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let mut app = 0.0f64;
                let mut aqq = 0.0f64;
                let mut apq = cz();
                for i in 0..m {
                    app += w[(i, p)].norm_sqr();
                    aqq += w[(i, q)].norm_sqr();
                    apq += w[(i, p)].conj() * w[(i, q)];
                }
                let g = apq.norm();
                if g <= eps * (app * aqq).sqrt() || g == 0.0 {
                    continue;
                }
                rotated = true;
                // absorb the phase of the inner product, then rotate as in
                // the real symmetric 2x2 case
                let alpha = apq / g;
                let tau = (aqq - app) / (2.0 * g);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let cs = 1.0 / (1.0 + t * t).sqrt();
                let sn = cs * t;
                for i in 0..m {
                    let wp = w[(i, p)];
                    let wq = w[(i, q)] * alpha.conj();
                    w[(i, p)] = cs * wp - sn * wq;
                    w[(i, q)] = (sn * wp + cs * wq) * alpha;
                }
                for i in 0..n {
                    let vp = v[(i, p)];
                    let vq = v[(i, q)] * alpha.conj();
                    v[(i, p)] = cs * vp - sn * vq;
                    v[(i, q)] = (sn * vp + cs * vq) * alpha;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    let norms: Vec<f64> = (0..n)
        .map(|j| (0..m).map(|i| w[(i, j)].norm_sqr()).sum::<f64>().sqrt())
        .collect();
    order.sort_by(|&x, &y| norms[y].partial_cmp(&norms[x]).unwrap().then(x.cmp(&y)));
    let k = m.min(n);
    let mut s = Vec::with_capacity(k);
    let mut u = DMatrix::from_element(m, k, cz());
    let mut vs = DMatrix::from_element(n, k, cz());
    for (col, &j) in order.iter().take(k).enumerate() {
        let sj = norms[j];
        s.push(sj);
        for i in 0..m {
            u[(i, col)] = if sj > 0.0 { w[(i, j)] / sj } else { cz() };
        }
        for i in 0..n {
            vs[(i, col)] = v[(i, j)];
        }
    }
    (s, u, vs)
}

fn argmax(r: &DMatrix<C64>) -> (usize, usize, f64) {
    // strict comparison in row-major order: ties resolve to the smallest
    // row index, then the smallest column index
    let (mut bi, mut bj, mut bv) = (0usize, 0usize, -1.0f64);
    for i in 0..r.nrows() {
        for j in 0..r.ncols() {
            let v = r[(i, j)].norm();
            if v > bv {
                bi = i;
                bj = j;
                bv = v;
            }
        }
    }
    (bi, bj, bv)
}

/// True when the coefficient tail never drops below `cutoff` (absolute), i.e.
/// the grid under-resolved this slice at a level that still matters. The
/// cutoff must be absolute: slices peeled near the termination threshold
/// carry elimination roundoff far above machine precision relative to their
/// own size, so a per-slice relative test would refine forever.
fn saturated(coeffs: &[C64], cutoff: f64) -> bool {
    let mx = coeffs.iter().map(|v| v.norm()).fold(0.0, f64::max);
    if mx <= cutoff {
        return false;
    }
    chop(coeffs, cutoff / mx) == coeffs.len() && coeffs.len() > 4
}

/// Greedy rank-revealing approximation of f on the reference square.
pub fn ge_lowrank(f: impl Fn(f64, f64) -> C64, tol: f64) -> Result<LowRankKernel> {
    ge_local(&f, Segment::unit(), Segment::unit(), tol, 0.0)
}

/// Greedy approximation of a kernel of global points; slices are produced in
/// each segment's local variable.
pub fn ge_lowrank_on(
    f: impl Fn(C64, C64) -> C64,
    segx: Segment,
    segy: Segment,
    tol: f64,
) -> Result<LowRankKernel> {
    let fl =
        move |s: f64, t: f64| f(segx.map(C64::new(s, 0.0)), segy.map(C64::new(t, 0.0)));
    ge_local(&fl, segx, segy, tol, 0.0)
}

/// `floor` is an absolute stopping level: residuals below it count as zero.
/// It guards fits of differences that cancel to rounding noise (a noise
/// matrix is numerically full rank, so a purely relative criterion would
/// refine forever).
fn ge_local(
    f: &dyn Fn(f64, f64) -> C64,
    segx: Segment,
    segy: Segment,
    tol: f64,
    floor: f64,
) -> Result<LowRankKernel> {
    let mut m = 16usize;
    let mut n = 17usize;
    loop {
        let xs = cheb_points(NodeKind::First, m)?;
        let ys = cheb_points(NodeKind::Second, n)?;
        let mut r = DMatrix::from_fn(m, n, |i, j| f(xs[i], ys[j]));
        let scale0 = r.iter().map(|v| v.norm()).fold(0.0, f64::max);
        if scale0 <= floor {
            return Ok(LowRankKernel::zero(segx, segy));
        }
        let mut cols: Vec<Vec<C64>> = Vec::new();
        let mut rows: Vec<Vec<C64>> = Vec::new();
        let mut pivots: Vec<(f64, f64)> = Vec::new();
        loop {
            let (p, q, mx) = argmax(&r);
            if mx <= (tol * scale0).max(floor) {
                break;
            }
            if cols.len() >= MAX_RANK {
                return Err(Error::ResolutionFailure {
                    context: "low rank construction",
                    reached: cols.len(),
                    tail: mx / scale0,
                });
            }
            let piv = r[(p, q)];
            let c: Vec<C64> = (0..m).map(|i| r[(i, q)]).collect();
            let w: Vec<C64> = (0..n).map(|j| r[(p, j)] / piv).collect();
            for i in 0..m {
                for j in 0..n {
                    r[(i, j)] -= c[i] * w[j];
                }
            }
            pivots.push((xs[p], ys[q]));
            cols.push(c);
            rows.push(w);
        }
        let cut = (tol * scale0).max(floor);
        let mut terms = Vec::with_capacity(cols.len());
        let mut resolved = true;
        for (c, w) in cols.iter().zip(&rows) {
            // a carries the pivot magnitude, b is normalized to max 1; a
            // coefficient of one slice matters at cut scaled by the other.
            let sa = c.iter().map(|v| v.norm()).fold(0.0, f64::max);
            let sb = w.iter().map(|v| v.norm()).fold(0.0, f64::max);
            let mut a =
                values_to_coeffs(&GridSample::new(NodeKind::First, xs.clone(), c.clone())?)?;
            let mut b =
                values_to_coeffs(&GridSample::new(NodeKind::Second, ys.clone(), w.clone())?)?;
            if saturated(&a.coeffs, cut / sb) || saturated(&b.coeffs, cut / sa) {
                resolved = false;
                break;
            }
            a.trim(tol);
            b.trim(tol);
            terms.push((a.on_segment(segx), b.on_segment(segy)));
        }
        if resolved {
            return Ok(LowRankKernel { terms, pivots });
        }
        if m.max(n) >= MAX_GRID {
            return Err(Error::ResolutionFailure {
                context: "kernel slice resolution",
                reached: m.max(n),
                tail: tol,
            });
        }
        m *= 2;
        n = 2 * (n - 1) + 1;
    }
}

/// Cholesky-flavoured greedy approximation for Hermitian non-negative
/// definite kernels on one segment: pivots are searched on the diagonal only
/// and terms take the form A_i(x) A_i*(y).
pub fn cholesky_lowrank(f: impl Fn(f64, f64) -> C64, tol: f64) -> Result<LowRankKernel> {
    chol_local(&f, Segment::unit(), tol)
}

pub fn cholesky_lowrank_on(
    f: impl Fn(C64, C64) -> C64,
    seg: Segment,
    tol: f64,
) -> Result<LowRankKernel> {
    let fl = move |s: f64, t: f64| f(seg.map(C64::new(s, 0.0)), seg.map(C64::new(t, 0.0)));
    chol_local(&fl, seg, tol)
}

fn chol_local(f: &dyn Fn(f64, f64) -> C64, seg: Segment, tol: f64) -> Result<LowRankKernel> {
    let mut m = 17usize;
    loop {
        let ts = cheb_points(NodeKind::Second, m)?;
        // Hermitian kernels have a real diagonal; by the Cauchy-Schwarz
        // inequality a zero diagonal residual bounds the whole residual.
        let mut d: Vec<f64> = ts.iter().map(|&t| f(t, t).re).collect();
        let scale0 = d.iter().map(|v| v.abs()).fold(0.0, f64::max);
        if scale0 == 0.0 {
            return Ok(LowRankKernel::zero(seg, seg));
        }
        let mut slices: Vec<Vec<C64>> = Vec::new();
        let mut pivots: Vec<(f64, f64)> = Vec::new();
        loop {
            let mut p = 0usize;
            for (i, v) in d.iter().enumerate() {
                if *v > d[p] {
                    p = i;
                }
            }
            let neg = d.iter().cloned().fold(0.0, f64::min);
            if neg < -10.0 * tol * scale0 {
                return Err(Error::NotNonnegativeDefinite {
                    value: neg,
                    step: slices.len(),
                });
            }
            if d[p] <= tol * scale0 {
                break;
            }
            if slices.len() >= MAX_RANK {
                return Err(Error::ResolutionFailure {
                    context: "low rank construction",
                    reached: slices.len(),
                    tail: d[p] / scale0,
                });
            }
            let root = d[p].sqrt();
            let col: Vec<C64> = (0..m)
                .map(|i| {
                    let mut v = f(ts[i], ts[p]);
                    for s in &slices {
                        v -= s[i] * s[p].conj();
                    }
                    v / root
                })
                .collect();
            for i in 0..m {
                d[i] -= col[i].norm_sqr();
            }
            pivots.push((ts[p], ts[p]));
            slices.push(col);
        }
        let mut terms = Vec::with_capacity(slices.len().max(1));
        let mut resolved = true;
        for s in &slices {
            // the term is s (x) conj(s), so a coefficient of s matters at
            // the global cut scaled by the slice's own size
            let ms = s.iter().map(|v| v.norm()).fold(0.0, f64::max);
            let mut a =
                values_to_coeffs(&GridSample::new(NodeKind::Second, ts.clone(), s.clone())?)?;
            if saturated(&a.coeffs, tol * scale0 / ms) {
                resolved = false;
                break;
            }
            a.trim(tol);
            let b = CoeffExpansion::new(
                Basis::T,
                seg,
                a.coeffs.iter().map(|c| c.conj()).collect(),
            );
            terms.push((a.on_segment(seg), b));
        }
        if resolved {
            if terms.is_empty() {
                return Ok(LowRankKernel::zero(seg, seg));
            }
            return Ok(LowRankKernel { terms, pivots });
        }
        if m >= MAX_GRID {
            return Err(Error::ResolutionFailure {
                context: "kernel slice resolution",
                reached: m,
                tail: tol,
            });
        }
        m = 2 * (m - 1) + 1;
    }
}

/// Rank of the greedy approximation at the given tolerance.
pub fn numerical_rank(f: impl Fn(f64, f64) -> C64, tol: f64) -> Result<usize> {
    Ok(ge_lowrank(f, tol)?.rank())
}

/// A fundamental solution split into its logarithmic and smooth parts:
/// Phi(x, y) = A(x, y) log|x - y| + B(x, y), with the second-derivative
/// kernels optionally attached for Neumann problems.
#[derive(Debug, Clone)]
pub struct KernelSplitting {
    pub a: LowRankKernel,
    pub b: LowRankKernel,
    pub a_dd: Option<LowRankKernel>,
    pub b_dd: Option<LowRankKernel>,
    /// A on the diagonal; -1/(2 pi) for operators in canonical form.
    pub diagonal_value: C64,
}

/// Fit the splitting from evaluators of the fundamental solution and the
/// associated Riemann function: A = -R/(2 pi) is smooth by construction, and
/// B = Phi - A log|x - y| is sampled on the skewed grid so the singular
/// diagonal is never touched.
pub fn extract_splitting(
    phi: impl Fn(C64, C64) -> C64,
    riemann: impl Fn(C64, C64) -> C64,
    segx: Segment,
    segy: Segment,
    tol: f64,
) -> Result<KernelSplitting> {
    let a_fn = |zx: C64, zy: C64| -riemann(zx, zy) / (2.0 * PI);
    let a = ge_lowrank_on(&a_fn, segx, segy, tol)?;
    let b_fn = |s: f64, t: f64| {
        let (zx, zy) = (segx.map(C64::new(s, 0.0)), segy.map(C64::new(t, 0.0)));
        phi(zx, zy) - a_fn(zx, zy) * (zx - zy).norm().ln()
    };
    // B is a difference of two near-equal quantities; when it cancels to
    // rounding noise the fit must stop at Phi's noise level, not chase a
    // relative tolerance of the noise itself.
    let mut phi_scale = 0.0f64;
    for &s in cheb_points(NodeKind::First, 16)?.iter() {
        for &t in cheb_points(NodeKind::Second, 17)?.iter() {
            let v = phi(segx.map(C64::new(s, 0.0)), segy.map(C64::new(t, 0.0)));
            phi_scale = phi_scale.max(v.norm());
        }
    }
    let floor = 64.0 * f64::EPSILON * phi_scale;
    let b = match ge_local(&b_fn, segx, segy, tol, floor) {
        Ok(b) => b,
        // non-decaying remainder means the Riemann function does not match
        // the log strength of Phi
        Err(Error::ResolutionFailure { reached, tail, .. }) => {
            return Err(Error::ResolutionFailure {
                context: "log-free remainder of the fundamental solution",
                reached,
                tail,
            })
        }
        Err(e) => return Err(e),
    };
    let z0 = segx.map(cz());
    let diagonal_value = -riemann(z0, z0) / (2.0 * PI);
    Ok(KernelSplitting {
        a,
        b,
        a_dd: None,
        b_dd: None,
        diagonal_value,
    })
}
