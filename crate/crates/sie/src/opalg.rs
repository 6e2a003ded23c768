//! Banded operator algebra on coefficient space.
//!
//! Operators are lazy row generators with a synchronized memo of finished
//! rows, so finite sections can be pulled on demand (and concurrently)
//! without committing to a truncation in advance. Rows respect declared
//! bandwidths; probing outside the band returns exact zeros.
//!
//! The constructors realize the sparse calculus of the ultraspherical
//! spectral method: differentiation `T -> C(lambda)`, conversion
//! `C(lambda) -> C(lambda+1)`, and multiplication within `T` or `C(lambda)`.
//! Almost-banded systems stack finitely many dense constraint rows
//! (`RowFunctional`) above a banded operator; `interlace` shuffles a d x d
//! block grid of operators over d segments into one almost-banded system.

use crate::cheb::{Basis, CoeffExpansion, Segment, C64};
use crate::error::{Error, Result};
use nalgebra::DMatrix;
use std::sync::{Arc, Mutex};

/// One operator row: dense values over columns `start .. start + vals.len()`.
#[derive(Debug, Clone, Default)]
pub struct OpRow {
    pub start: usize,
    pub vals: Vec<C64>,
}

impl OpRow {
    pub fn get(&self, j: usize) -> C64 {
        if j < self.start || j >= self.start + self.vals.len() {
            C64::new(0.0, 0.0)
        } else {
            self.vals[j - self.start]
        }
    }

    pub fn end(&self) -> usize {
        self.start + self.vals.len()
    }

    fn trimmed(mut self) -> OpRow {
        while self.vals.last().is_some_and(|v| v.norm() == 0.0) {
            self.vals.pop();
        }
        let lead = self.vals.iter().take_while(|v| v.norm() == 0.0).count();
        if lead > 0 {
            self.vals.drain(..lead);
            self.start += lead;
        }
        self
    }
}

trait RowGen: Send + Sync {
    fn row(&self, i: usize) -> OpRow;
}

struct OpInner {
    lower: usize,
    upper: usize,
    domain: Basis,
    range: Basis,
    gen: Box<dyn RowGen>,
    rows: Mutex<Vec<Option<Arc<OpRow>>>>,
}

/// Banded operator between coefficient bases, with lazily memoized rows.
#[derive(Clone)]
pub struct BandedOperator {
    inner: Arc<OpInner>,
}

impl std::fmt::Debug for BandedOperator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BandedOperator")
            .field("lower", &self.inner.lower)
            .field("upper", &self.inner.upper)
            .field("domain", &self.inner.domain)
            .field("range", &self.inner.range)
            .finish()
    }
}

impl BandedOperator {
    fn from_gen(
        lower: usize,
        upper: usize,
        domain: Basis,
        range: Basis,
        gen: Box<dyn RowGen>,
    ) -> BandedOperator {
        BandedOperator {
            inner: Arc::new(OpInner {
                lower,
                upper,
                domain,
                range,
                gen,
                rows: Mutex::new(Vec::new()),
            }),
        }
    }

    /// Build from a row closure. The closure must respect the declared band.
    pub fn from_rows(
        lower: usize,
        upper: usize,
        domain: Basis,
        range: Basis,
        f: impl Fn(usize) -> OpRow + Send + Sync + 'static,
    ) -> BandedOperator {
        struct FnGen<F>(F);
        impl<F: Fn(usize) -> OpRow + Send + Sync> RowGen for FnGen<F> {
            fn row(&self, i: usize) -> OpRow {
                (self.0)(i)
            }
        }
        BandedOperator::from_gen(lower, upper, domain, range, Box::new(FnGen(f)))
    }

    pub fn lower_bw(&self) -> usize {
        self.inner.lower
    }

    pub fn upper_bw(&self) -> usize {
        self.inner.upper
    }

    pub fn domain(&self) -> Basis {
        self.inner.domain
    }

    pub fn range(&self) -> Basis {
        self.inner.range
    }

    /// Memoized row access.
    pub fn row(&self, i: usize) -> Arc<OpRow> {
        {
            let rows = self.inner.rows.lock().unwrap();
            if let Some(Some(r)) = rows.get(i) {
                return r.clone();
            }
        }
        let mut r = self.inner.gen.row(i).trimmed();
        // Band discipline is an invariant of every constructor.
        debug_assert!(
            r.vals.is_empty() || (r.start + self.inner.lower >= i && r.end() <= i + self.inner.upper + 1),
            "row {i} spans [{}, {}) outside band ({}, {})",
            r.start,
            r.end(),
            self.inner.lower,
            self.inner.upper
        );
        if r.vals.is_empty() {
            r.start = i;
        }
        let r = Arc::new(r);
        let mut rows = self.inner.rows.lock().unwrap();
        if rows.len() <= i {
            rows.resize(i + 1, None);
        }
        rows[i] = Some(r.clone());
        r
    }

    pub fn entry(&self, i: usize, j: usize) -> C64 {
        if j + self.inner.lower < i || j > i + self.inner.upper {
            return C64::new(0.0, 0.0);
        }
        self.row(i).get(j)
    }

    /// Apply to a finite coefficient vector; the result has `x.len() + lower`
    /// entries (every row that can see the input).
    pub fn apply(&self, x: &[C64]) -> Vec<C64> {
        let n = x.len() + self.inner.lower;
        let mut out = vec![C64::new(0.0, 0.0); n];
        for (i, oi) in out.iter_mut().enumerate() {
            let row = self.row(i);
            let mut acc = C64::new(0.0, 0.0);
            for (off, v) in row.vals.iter().enumerate() {
                let j = row.start + off;
                if j < x.len() {
                    acc += v * x[j];
                }
            }
            *oi = acc;
        }
        while out.last().is_some_and(|v| v.norm() == 0.0) && out.len() > 1 {
            out.pop();
        }
        out
    }

    /// Dense finite section for oracles and diagnostics.
    pub fn dense_section(&self, nrows: usize, ncols: usize) -> DMatrix<C64> {
        let mut m = DMatrix::from_element(nrows, ncols, C64::new(0.0, 0.0));
        for i in 0..nrows {
            let row = self.row(i);
            for (off, v) in row.vals.iter().enumerate() {
                let j = row.start + off;
                if j < ncols {
                    m[(i, j)] = *v;
                }
            }
        }
        m
    }

    /// Finite section as CSV lines `row,col,re,im` (band entries only).
    pub fn section_csv(&self, nrows: usize, ncols: usize) -> String {
        let mut s = String::from("row,col,re,im\n");
        for i in 0..nrows {
            let row = self.row(i);
            for (off, v) in row.vals.iter().enumerate() {
                let j = row.start + off;
                if j < ncols {
                    s.push_str(&format!("{i},{j},{:.17e},{:.17e}\n", v.re, v.im));
                }
            }
        }
        s
    }

    /// Identity on a basis.
    pub fn identity(basis: Basis) -> BandedOperator {
        BandedOperator::from_rows(0, 0, basis, basis, |i| OpRow {
            start: i,
            vals: vec![C64::new(1.0, 0.0)],
        })
    }

    /// Diagonal operator from an entry function.
    pub fn diagonal(
        domain: Basis,
        range: Basis,
        f: impl Fn(usize) -> C64 + Send + Sync + 'static,
    ) -> BandedOperator {
        BandedOperator::from_rows(0, 0, domain, range, move |i| OpRow {
            start: i,
            vals: vec![f(i)],
        })
    }

    pub fn scale(&self, s: C64) -> BandedOperator {
        let a = self.clone();
        BandedOperator::from_rows(
            self.inner.lower,
            self.inner.upper,
            self.inner.domain,
            self.inner.range,
            move |i| {
                let r = a.row(i);
                OpRow {
                    start: r.start,
                    vals: r.vals.iter().map(|v| v * s).collect(),
                }
            },
        )
    }

    pub fn add(&self, other: &BandedOperator) -> Result<BandedOperator> {
        if self.inner.domain != other.inner.domain || self.inner.range != other.inner.range {
            return Err(Error::BasisMismatch(format!(
                "add: ({:?} -> {:?}) vs ({:?} -> {:?})",
                self.inner.domain, self.inner.range, other.inner.domain, other.inner.range
            )));
        }
        let a = self.clone();
        let b = other.clone();
        BandedOperator::from_rows(
            self.inner.lower.max(other.inner.lower),
            self.inner.upper.max(other.inner.upper),
            self.inner.domain,
            self.inner.range,
            move |i| {
                let ra = a.row(i);
                let rb = b.row(i);
                if ra.vals.is_empty() {
                    return (*rb).clone();
                }
                if rb.vals.is_empty() {
                    return (*ra).clone();
                }
                let start = ra.start.min(rb.start);
                let end = ra.end().max(rb.end());
                let mut vals = vec![C64::new(0.0, 0.0); end - start];
                for (off, v) in ra.vals.iter().enumerate() {
                    vals[ra.start - start + off] += v;
                }
                for (off, v) in rb.vals.iter().enumerate() {
                    vals[rb.start - start + off] += v;
                }
                OpRow { start, vals }
            },
        )
        .pipe_ok()
    }

    /// Operator product `self * other` (apply `other` first).
    pub fn compose(&self, other: &BandedOperator) -> Result<BandedOperator> {
        if self.inner.domain != other.inner.range {
            return Err(Error::BasisMismatch(format!(
                "compose: inner bases {:?} vs {:?}",
                self.inner.domain, other.inner.range
            )));
        }
        let a = self.clone();
        let b = other.clone();
        BandedOperator::from_rows(
            self.inner.lower + other.inner.lower,
            self.inner.upper + other.inner.upper,
            other.inner.domain,
            self.inner.range,
            move |i| {
                // row_i(A B) = sum_k A[i,k] row_k(B), k over A's band
                let ra = a.row(i);
                if ra.vals.is_empty() {
                    return OpRow::default();
                }
                let mut start = usize::MAX;
                let mut end = 0usize;
                let parts: Vec<(C64, Arc<OpRow>)> = ra
                    .vals
                    .iter()
                    .enumerate()
                    .filter(|(_, v)| v.norm() != 0.0)
                    .map(|(off, v)| (*v, b.row(ra.start + off)))
                    .collect();
                for (_, rb) in &parts {
                    if !rb.vals.is_empty() {
                        start = start.min(rb.start);
                        end = end.max(rb.end());
                    }
                }
                if start == usize::MAX {
                    return OpRow::default();
                }
                let mut vals = vec![C64::new(0.0, 0.0); end - start];
                for (w, rb) in &parts {
                    for (off, v) in rb.vals.iter().enumerate() {
                        vals[rb.start - start + off] += w * v;
                    }
                }
                OpRow { start, vals }
            },
        )
        .pipe_ok()
    }

    /// Sum a nonempty list of same-shaped operators.
    pub fn sum(ops: &[BandedOperator]) -> Result<BandedOperator> {
        let mut it = ops.iter();
        let first = it
            .next()
            .ok_or_else(|| Error::InvalidArgument("empty operator sum".into()))?
            .clone();
        it.try_fold(first, |acc, op| acc.add(op))
    }
}

trait PipeOk: Sized {
    fn pipe_ok(self) -> Result<Self> {
        Ok(self)
    }
}
impl PipeOk for BandedOperator {}

/// Differentiation `T -> C(lambda)` on the reference interval:
/// entry(n, n+lambda) = 2^{lambda-1} (lambda-1)! (n+lambda).
pub fn derivative_op(lambda: u32) -> Result<BandedOperator> {
    if lambda < 1 {
        return Err(Error::InvalidArgument(
            "derivative order must be at least 1".into(),
        ));
    }
    let l = lambda as usize;
    let mut factor = 1.0f64;
    for k in 1..lambda {
        factor *= k as f64;
    }
    factor *= 2f64.powi(lambda as i32 - 1);
    Ok(BandedOperator::from_rows(
        0,
        l,
        Basis::T,
        Basis::Ultra(lambda),
        move |i| OpRow {
            start: i + l,
            vals: vec![C64::new(factor * (i + l) as f64, 0.0)],
        },
    ))
}

/// Differentiation with the affine chart factor (2/(b-a))^lambda of a segment.
pub fn derivative_op_on(lambda: u32, segment: Segment) -> Result<BandedOperator> {
    let base = derivative_op(lambda)?;
    let s = (C64::new(2.0, 0.0) / (segment.b - segment.a)).powu(lambda);
    Ok(base.scale(s))
}

/// Conversion operators: `S_0: T -> C(1)` for lambda = 0, else
/// `S_lambda: C(lambda) -> C(lambda+1)`.
pub fn conversion_op(lambda: u32) -> BandedOperator {
    if lambda == 0 {
        BandedOperator::from_rows(0, 2, Basis::T, Basis::Ultra(1), |i| OpRow {
            start: i,
            vals: if i == 0 {
                vec![C64::new(1.0, 0.0), C64::new(0.0, 0.0), C64::new(-0.5, 0.0)]
            } else {
                vec![C64::new(0.5, 0.0), C64::new(0.0, 0.0), C64::new(-0.5, 0.0)]
            },
        })
    } else {
        let lam = lambda as f64;
        BandedOperator::from_rows(
            0,
            2,
            Basis::Ultra(lambda),
            Basis::Ultra(lambda + 1),
            move |i| {
                let n = i as f64;
                OpRow {
                    start: i,
                    vals: vec![
                        C64::new(lam / (lam + n), 0.0),
                        C64::new(0.0, 0.0),
                        C64::new(-lam / (lam + n + 2.0), 0.0),
                    ],
                }
            },
        )
    }
}

/// Convert T coefficients to C(lambda) coefficients (lambda >= 1) by the
/// conversion chain, or return them unchanged for lambda = 0.
pub fn t_to_ultra(coeffs: &[C64], lambda: u32) -> Vec<C64> {
    let mut c = coeffs.to_vec();
    for l in 0..lambda {
        let s = conversion_op(l);
        c = apply_to_len(&s, &c);
    }
    c
}

fn apply_to_len(op: &BandedOperator, x: &[C64]) -> Vec<C64> {
    // conversion operators are upper triangular; output length = input length
    let mut out = vec![C64::new(0.0, 0.0); x.len()];
    for (i, oi) in out.iter_mut().enumerate() {
        let row = op.row(i);
        let mut acc = C64::new(0.0, 0.0);
        for (off, v) in row.vals.iter().enumerate() {
            let j = row.start + off;
            if j < x.len() {
                acc += v * x[j];
            }
        }
        *oi = acc;
    }
    out
}

/// Solve `S_0 y = c` by back substitution: C(1) coefficients of a function to
/// its T coefficients.
pub fn ultra1_to_t(coeffs: &[C64]) -> Vec<C64> {
    let n = coeffs.len();
    let mut y = vec![C64::new(0.0, 0.0); n];
    for i in (0..n).rev() {
        let diag = if i == 0 { 1.0 } else { 0.5 };
        let up = y.get(i + 2).copied().unwrap_or_default();
        y[i] = (coeffs[i] + 0.5 * up) / diag;
    }
    y
}

struct UltraMulGen {
    lambda: u32,
    acoef: Vec<C64>,
    built: Mutex<Vec<OpRow>>,
}

impl UltraMulGen {
    /// Run the three-term multiplication recurrence to materialize rows
    /// 0..nrows. Only three generations of the per-degree operators are kept,
    /// each band-packed as gen[i][off] = entry(i, i - m + off).
    fn build(&self, nrows: usize) -> Vec<OpRow> {
        let m = self.acoef.len() - 1;
        let lam = self.lambda as f64;
        // generation d+1 row i reads generation d rows i-1 and i+1, so the
        // top m rows of the working range are contaminated; overshoot by m.
        let r = nrows + m + 2;
        let width = 2 * m + 1;
        let zero_rows = || vec![vec![C64::new(0.0, 0.0); width]; r];
        let mut acc = zero_rows();
        for row in acc.iter_mut() {
            row[m] = self.acoef[0]; // P_0 = I
        }
        if m > 0 {
            // Jacobi operator X = M_lambda[x]:
            // X[i][i-1] = i/(2(i-1+lambda)), X[i][i+1] = (i+2 lambda)/(2(i+1+lambda))
            let xlo = |i: usize| i as f64 / (2.0 * (i as f64 - 1.0 + lam));
            let xhi = |i: usize| (i as f64 + 2.0 * lam) / (2.0 * (i as f64 + 1.0 + lam));
            let mut prev = zero_rows();
            for row in prev.iter_mut() {
                row[m] = C64::new(1.0, 0.0);
            }
            // P_1 = 2 lambda X
            let mut cur = zero_rows();
            for (i, row) in cur.iter_mut().enumerate() {
                if i >= 1 {
                    row[m - 1] = C64::new(2.0 * lam * xlo(i), 0.0);
                }
                row[m + 1] = C64::new(2.0 * lam * xhi(i), 0.0);
            }
            for i in 0..r {
                for off in 0..width {
                    acc[i][off] += self.acoef[1] * cur[i][off];
                }
            }
            for d in 1..m {
                // P_{d+1} = alpha_d X P_d - beta_d P_{d-1}; in packed offsets
                // (X P)[i][off] = xlo(i) P[i-1][off+1] + xhi(i) P[i+1][off-1]
                let df = d as f64;
                let alpha = 2.0 * (df + lam) / (df + 1.0);
                let beta = (df + 2.0 * lam - 1.0) / (df + 1.0);
                let mut next = zero_rows();
                for i in 0..r {
                    for off in 0..width {
                        let mut xp = C64::new(0.0, 0.0);
                        if i >= 1 && off + 1 < width {
                            xp += xlo(i) * cur[i - 1][off + 1];
                        }
                        if i + 1 < r && off >= 1 {
                            xp += xhi(i) * cur[i + 1][off - 1];
                        }
                        next[i][off] = alpha * xp - beta * prev[i][off];
                    }
                }
                prev = std::mem::replace(&mut cur, next);
                for i in 0..r {
                    for off in 0..width {
                        acc[i][off] += self.acoef[d + 1] * cur[i][off];
                    }
                }
            }
        }
        (0..nrows)
            .map(|i| {
                let lo = i.saturating_sub(m);
                let skip = m - (i - lo);
                OpRow {
                    start: lo,
                    vals: acc[i][skip..].to_vec(),
                }
            })
            .collect()
    }
}

impl RowGen for UltraMulGen {
    fn row(&self, i: usize) -> OpRow {
        let mut built = self.built.lock().unwrap();
        if i >= built.len() {
            let target = (2 * (i + 1)).max(64);
            *built = self.build(target);
        }
        built[i].clone()
    }
}

struct UltraOneGen {
    // parity suffix sums s[p] = sum of a_q for q >= p, q == p (mod 2);
    // entry (i, j) = s[|i-j|] - s[i+j+2] by the U_p U_j linearization
    suffix: Vec<C64>,
    m: usize,
}

impl UltraOneGen {
    fn new(acoef: &[C64]) -> UltraOneGen {
        let m = acoef.len() - 1;
        let mut suffix = vec![C64::new(0.0, 0.0); m + 3];
        for p in (0..=m).rev() {
            suffix[p] = acoef[p] + suffix.get(p + 2).copied().unwrap_or_default();
        }
        UltraOneGen { suffix, m }
    }

    fn entry(&self, i: usize, j: usize) -> C64 {
        let lo = i.abs_diff(j);
        if lo > self.m {
            return C64::new(0.0, 0.0);
        }
        let hi = i + j + 2;
        let tail = if hi < self.suffix.len() {
            self.suffix[hi]
        } else {
            C64::new(0.0, 0.0)
        };
        self.suffix[lo] - tail
    }
}

impl RowGen for UltraOneGen {
    fn row(&self, i: usize) -> OpRow {
        let lo = i.saturating_sub(self.m);
        let vals = (lo..=i + self.m).map(|j| self.entry(i, j)).collect();
        OpRow { start: lo, vals }
    }
}

struct ToeplitzHankelGen {
    acoef: Vec<C64>,
}

impl RowGen for ToeplitzHankelGen {
    fn row(&self, i: usize) -> OpRow {
        let m = self.acoef.len() - 1;
        let a = |k: usize| self.acoef.get(k).copied().unwrap_or_default();
        let lo = i.saturating_sub(m);
        let hi = i + m;
        let mut vals = Vec::with_capacity(hi - lo + 1);
        for j in lo..=hi {
            let toeplitz = if i == j { 2.0 * a(0) } else { a(i.abs_diff(j)) };
            let hankel = if i == 0 { C64::new(0.0, 0.0) } else { a(i + j) };
            vals.push(0.5 * (toeplitz + hankel));
        }
        OpRow { start: lo, vals }
    }
}

/// Multiplication operator by the function with expansion `a`.
///
/// For lambda = 0 the operator acts on T coefficients and uses the closed
/// Toeplitz-plus-Hankel form; for lambda >= 1 it acts on C(lambda)
/// coefficients and is materialized through the three-term recurrence
/// M[C_{n+1}] = (2(n+lambda)/(n+1)) M[x] M[C_n] - ((n+2 lambda-1)/(n+1)) M[C_{n-1}].
///
/// `a` may be supplied in T coefficients (converted internally) or already in
/// the target basis.
pub fn multiplication_op(a: &CoeffExpansion, lambda: u32) -> Result<BandedOperator> {
    let coeffs = match (a.basis, lambda) {
        (Basis::T, 0) => a.coeffs.clone(),
        (Basis::T, l) => t_to_ultra(&a.coeffs, l),
        (Basis::Ultra(m), l) if m == l && l >= 1 => a.coeffs.clone(),
        _ => {
            return Err(Error::BasisMismatch(format!(
                "multiplication by {:?} coefficients in C({lambda}) space",
                a.basis
            )))
        }
    };
    let mut coeffs = coeffs;
    while coeffs.last().is_some_and(|c| c.norm() == 0.0) && coeffs.len() > 1 {
        coeffs.pop();
    }
    if coeffs.is_empty() {
        coeffs.push(C64::new(0.0, 0.0));
    }
    let m = coeffs.len() - 1;
    let (domain, range) = if lambda == 0 {
        (Basis::T, Basis::T)
    } else {
        (Basis::Ultra(lambda), Basis::Ultra(lambda))
    };
    let gen: Box<dyn RowGen> = match lambda {
        0 => Box::new(ToeplitzHankelGen { acoef: coeffs }),
        1 => Box::new(UltraOneGen::new(&coeffs)),
        _ => Box::new(UltraMulGen {
            lambda,
            acoef: coeffs,
            built: Mutex::new(Vec::new()),
        }),
    };
    Ok(BandedOperator::from_gen(m, m, domain, range, gen))
}

/// Multiplication in the C(2) basis through the generic recurrence; used to
/// cross-check the closed-form generators.
#[cfg(test)]
fn multiplication_op_recurrence(coeffs: Vec<C64>, lambda: u32) -> BandedOperator {
    let m = coeffs.len() - 1;
    BandedOperator::from_gen(
        m,
        m,
        Basis::Ultra(lambda),
        Basis::Ultra(lambda),
        Box::new(UltraMulGen {
            lambda,
            acoef: coeffs,
            built: Mutex::new(Vec::new()),
        }),
    )
}

/// How far a functional's entries extend.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decay {
    /// Entries vanish at and beyond the given column.
    FiniteSupport(usize),
    /// Entries are uniformly bounded (endpoint evaluation rows and the like).
    Bounded,
}

trait EntryGen: Send + Sync {
    /// Append entries so `out` covers indices `0..=j`.
    fn extend_to(&self, j: usize, out: &mut Vec<C64>);
}

struct FnEntries<F>(F);
impl<F: Fn(usize) -> C64 + Send + Sync> EntryGen for FnEntries<F> {
    fn extend_to(&self, j: usize, out: &mut Vec<C64>) {
        while out.len() <= j {
            out.push((self.0)(out.len()));
        }
    }
}

/// Dense constraint row over coefficient space, with memoized entries.
#[derive(Clone)]
pub struct RowFunctional {
    gen: Arc<dyn EntryGen>,
    cache: Arc<Mutex<Vec<C64>>>,
    decay: Decay,
}

impl std::fmt::Debug for RowFunctional {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RowFunctional").field("decay", &self.decay).finish()
    }
}

impl RowFunctional {
    pub fn from_fn(decay: Decay, f: impl Fn(usize) -> C64 + Send + Sync + 'static) -> Self {
        RowFunctional {
            gen: Arc::new(FnEntries(f)),
            cache: Arc::new(Mutex::new(Vec::new())),
            decay,
        }
    }

    /// Functional with finitely many explicit entries.
    pub fn from_vec(entries: Vec<C64>) -> Self {
        let support = entries.len();
        RowFunctional::from_fn(Decay::FiniteSupport(support), move |j| {
            entries.get(j).copied().unwrap_or_default()
        })
    }

    pub fn entry(&self, j: usize) -> C64 {
        let mut cache = self.cache.lock().unwrap();
        if cache.len() <= j {
            self.gen.extend_to(j, &mut cache);
        }
        cache[j]
    }

    pub fn entries(&self, n: usize) -> Vec<C64> {
        let mut cache = self.cache.lock().unwrap();
        if cache.len() < n {
            self.gen.extend_to(n.saturating_sub(1), &mut cache);
        }
        cache[..n].to_vec()
    }

    pub fn decay(&self) -> Decay {
        self.decay
    }

    pub fn scale(&self, s: C64) -> RowFunctional {
        let base = self.clone();
        RowFunctional::from_fn(self.decay, move |j| s * base.entry(j))
    }

    /// Apply to a finite coefficient vector.
    pub fn dot(&self, x: &[C64]) -> C64 {
        x.iter()
            .enumerate()
            .map(|(j, v)| self.entry(j) * v)
            .sum()
    }
}

/// Constraint row kinds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FunctionalKind {
    EvalLeft,
    EvalRight,
    EvalAt(f64),
    Sum,
}

/// Boundary and integral functionals on the standard bases.
///
/// `Sum` is normalized as (1/pi) times the integral over the reference
/// interval, matching the compact functional rows of the singular operator
/// calculus; segment scaling belongs to the caller.
pub fn boundary_functionals(kind: FunctionalKind, basis: Basis) -> Result<RowFunctional> {
    match (kind, basis) {
        (FunctionalKind::EvalLeft | FunctionalKind::EvalRight, Basis::WT) => Err(
            Error::Unsupported("endpoint evaluation of an inverse-square-root basis".into()),
        ),
        (FunctionalKind::EvalLeft | FunctionalKind::EvalRight, Basis::WU) => {
            Ok(RowFunctional::from_fn(Decay::FiniteSupport(0), |_| {
                C64::new(0.0, 0.0)
            }))
        }
        (FunctionalKind::EvalLeft, Basis::T) => Ok(RowFunctional::from_fn(Decay::Bounded, |j| {
            C64::new(if j % 2 == 0 { 1.0 } else { -1.0 }, 0.0)
        })),
        (FunctionalKind::EvalRight, Basis::T) => {
            Ok(RowFunctional::from_fn(Decay::Bounded, |_| C64::new(1.0, 0.0)))
        }
        (FunctionalKind::EvalLeft | FunctionalKind::EvalRight, Basis::MT) => {
            let sign = if kind == FunctionalKind::EvalLeft { -1.0 } else { 1.0 };
            Ok(RowFunctional::from_fn(Decay::FiniteSupport(2), move |j| {
                match j {
                    0 => C64::new(1.0, 0.0),
                    1 => C64::new(sign, 0.0),
                    _ => C64::new(0.0, 0.0),
                }
            }))
        }
        (FunctionalKind::EvalLeft | FunctionalKind::EvalRight, Basis::Ultra(l)) => {
            let sign = if kind == FunctionalKind::EvalLeft { -1.0 } else { 1.0 };
            // C_n^(lambda)(1) = binom(n + 2 lambda - 1, n), by upward recurrence
            Ok(RowFunctional::from_fn(Decay::Bounded, move |j| {
                let mut v = 1.0f64;
                for k in 1..=j {
                    v *= (k as f64 + 2.0 * l as f64 - 1.0) / k as f64;
                }
                C64::new(if j % 2 == 0 { v } else { sign * v }, 0.0)
            }))
        }
        (FunctionalKind::EvalAt(x), Basis::T) => {
            struct ChebAt(f64);
            impl EntryGen for ChebAt {
                fn extend_to(&self, j: usize, out: &mut Vec<C64>) {
                    while out.len() <= j {
                        let n = out.len();
                        let v = match n {
                            0 => 1.0,
                            1 => self.0,
                            _ => 2.0 * self.0 * out[n - 1].re - out[n - 2].re,
                        };
                        out.push(C64::new(v, 0.0));
                    }
                }
            }
            Ok(RowFunctional {
                gen: Arc::new(ChebAt(x)),
                cache: Arc::new(Mutex::new(Vec::new())),
                decay: Decay::Bounded,
            })
        }
        (FunctionalKind::Sum, Basis::T) => Ok(RowFunctional::from_fn(Decay::Bounded, |j| {
            if j % 2 == 1 {
                C64::new(0.0, 0.0)
            } else {
                C64::new(2.0 / (std::f64::consts::PI * (1.0 - (j * j) as f64)), 0.0)
            }
        })),
        (FunctionalKind::Sum, Basis::WT) => Ok(RowFunctional::from_fn(
            Decay::FiniteSupport(1),
            |j| C64::new(if j == 0 { 1.0 } else { 0.0 }, 0.0),
        )),
        (FunctionalKind::Sum, Basis::WU) => Ok(RowFunctional::from_fn(
            Decay::FiniteSupport(1),
            |j| C64::new(if j == 0 { 0.5 } else { 0.0 }, 0.0),
        )),
        (FunctionalKind::Sum, Basis::Ultra(1)) => {
            Ok(RowFunctional::from_fn(Decay::Bounded, |j| {
                if j % 2 == 1 {
                    C64::new(0.0, 0.0)
                } else {
                    C64::new(2.0 / (std::f64::consts::PI * (j as f64 + 1.0)), 0.0)
                }
            }))
        }
        (k, b) => Err(Error::Unsupported(format!(
            "functional {k:?} on basis {b:?}"
        ))),
    }
}

/// Rank-one correction `col ⊗ row` added to a banded operator. Columns come
/// from coefficient vectors of smooth functions, so they have finite support;
/// this keeps almost-banded solvers exact while representing integral terms
/// whose output is a smooth function of the target variable.
#[derive(Clone)]
pub struct LowRankTerm {
    pub col: Vec<C64>,
    pub row: RowFunctional,
}

impl LowRankTerm {
    pub fn new(mut col: Vec<C64>, row: RowFunctional) -> LowRankTerm {
        while col.last().is_some_and(|v| v.norm() == 0.0) {
            col.pop();
        }
        LowRankTerm { col, row }
    }
}

/// Where a solved coefficient vector lives.
#[derive(Debug, Clone)]
pub enum DomainTag {
    Single(Basis, Segment),
    /// Unknowns of d segments interleaved u_{1,0}, .., u_{d,0}, u_{1,1}, ..
    Interlaced(Vec<(Basis, Segment)>),
}

/// Finitely many dense constraint rows stacked above a banded operator plus
/// an optional low-rank correction.
pub struct AlmostBandedSystem {
    pub constraints: Vec<(RowFunctional, C64)>,
    pub op: BandedOperator,
    /// Low-rank corrections: the full operator is `op + Σ colₗ ⊗ rowₗ`.
    pub tails: Vec<LowRankTerm>,
    /// Range-basis coefficients of the right-hand side (interleaved when the
    /// domain is interlaced).
    pub rhs: Vec<C64>,
    pub domain: DomainTag,
}

impl AlmostBandedSystem {
    /// Residual of a candidate solution over the rows that can see it,
    /// including constraint rows and low-rank corrections.
    pub fn residual_norm(&self, x: &[C64]) -> f64 {
        let mut worst = 0.0f64;
        for (f, c) in &self.constraints {
            worst = worst.max((f.dot(x) - c).norm());
        }
        let mut ax = self.op.apply(x);
        for t in &self.tails {
            let rx = t.row.dot(x);
            if ax.len() < t.col.len() {
                ax.resize(t.col.len(), C64::new(0.0, 0.0));
            }
            for (i, v) in t.col.iter().enumerate() {
                ax[i] += v * rx;
            }
        }
        for (i, v) in ax.iter().enumerate() {
            let want = self.rhs.get(i).copied().unwrap_or_default();
            worst = worst.max((v - want).norm());
        }
        worst
    }
}

impl AlmostBandedSystem {
    /// Split an interlaced coefficient vector back into per-segment
    /// expansions (or wrap a single-segment solution).
    pub fn unknowns_to_expansions(&self, x: &[C64]) -> Vec<CoeffExpansion> {
        match &self.domain {
            DomainTag::Single(basis, seg) => {
                vec![CoeffExpansion::new(*basis, *seg, x.to_vec())]
            }
            DomainTag::Interlaced(tags) => {
                let d = tags.len();
                tags.iter()
                    .enumerate()
                    .map(|(b, (basis, seg))| {
                        let coeffs: Vec<C64> = x
                            .iter()
                            .enumerate()
                            .filter(|(i, _)| i % d == b)
                            .map(|(_, v)| *v)
                            .collect();
                        CoeffExpansion::new(*basis, *seg, coeffs)
                    })
                    .collect()
            }
        }
    }
}

/// Assemble a linear ODE `sum_k a_k(x) u^(k) = f` with `N = coeffs.len() - 1`
/// boundary rows into an almost-banded system in the C(N) range.
pub fn assemble_ode(
    coeff_funs: &[CoeffExpansion],
    bcs: Vec<(RowFunctional, C64)>,
    f: &CoeffExpansion,
) -> Result<AlmostBandedSystem> {
    if coeff_funs.len() < 2 {
        return Err(Error::InvalidArgument(
            "need at least a first-order differential term".into(),
        ));
    }
    let order = coeff_funs.len() - 1;
    if bcs.len() != order {
        return Err(Error::InvalidArgument(format!(
            "expected {order} boundary rows, got {}",
            bcs.len()
        )));
    }
    if f.basis != Basis::T {
        return Err(Error::BasisMismatch("rhs must be in T coefficients".into()));
    }
    let seg = f.segment;
    let n_l = order as u32;
    // conversion chain S_{N-1} .. S_k
    let chain = |k: u32| -> Result<BandedOperator> {
        let mut op: Option<BandedOperator> = None;
        for l in k..n_l {
            let s = conversion_op(l);
            op = Some(match op {
                None => s,
                Some(prev) => s.compose(&prev)?,
            });
        }
        Ok(op.unwrap_or_else(|| {
            BandedOperator::identity(if k == 0 { Basis::T } else { Basis::Ultra(k) })
        }))
    };
    let mut terms = Vec::new();
    for (k, a) in coeff_funs.iter().enumerate() {
        let mul = multiplication_op(a, n_l)?;
        let term = if k == 0 {
            mul.compose(&chain(0)?)?
        } else {
            let dk = derivative_op_on(k as u32, seg)?;
            mul.compose(&chain(k as u32)?.compose(&dk)?)?
        };
        terms.push(term);
    }
    let op = BandedOperator::sum(&terms)?;
    let rhs = apply_to_len(&chain(0)?, &f.coeffs);
    Ok(AlmostBandedSystem {
        constraints: bcs,
        op,
        tails: Vec::new(),
        rhs,
        domain: DomainTag::Single(Basis::T, seg),
    })
}

/// Interlace a d x d grid of blocks, multi-segment constraint rows, and
/// per-segment right-hand sides into one almost-banded system by the perfect
/// shuffle: interlaced entry (i, j) = block (i mod d, j mod d) entry
/// (floor(i/d), floor(j/d)). Low-rank block corrections are given as
/// (row block, column block, term) triples and shuffled the same way.
pub fn interlace(
    blocks: Vec<Vec<BandedOperator>>,
    block_tails: Vec<(usize, usize, LowRankTerm)>,
    constraints: Vec<(Vec<RowFunctional>, C64)>,
    rhs_blocks: Vec<Vec<C64>>,
    tags: Vec<(Basis, Segment)>,
) -> Result<AlmostBandedSystem> {
    let d = blocks.len();
    if d == 0 || blocks.iter().any(|r| r.len() != d) {
        return Err(Error::InvalidArgument(
            "interlace needs a nonempty square grid of blocks".into(),
        ));
    }
    if rhs_blocks.len() != d || tags.len() != d {
        return Err(Error::InvalidArgument(
            "one rhs and one domain tag per segment".into(),
        ));
    }
    for (fs, _) in &constraints {
        if fs.len() != d {
            return Err(Error::InvalidArgument(
                "each constraint row needs one functional per segment".into(),
            ));
        }
    }
    let max_l = blocks
        .iter()
        .flatten()
        .map(|b| b.lower_bw())
        .max()
        .unwrap_or(0);
    let max_u = blocks
        .iter()
        .flatten()
        .map(|b| b.upper_bw())
        .max()
        .unwrap_or(0);
    let range = blocks[0][0].range();
    let domain = blocks[0][0].domain();
    let grid = Arc::new(blocks);
    let g = grid.clone();
    let op = BandedOperator::from_rows(
        d * max_l + d - 1,
        d * max_u + d - 1,
        domain,
        range,
        move |i| {
            let br = i % d;
            let ir = i / d;
            let mut start = usize::MAX;
            let mut end = 0usize;
            let rows: Vec<(usize, Arc<OpRow>)> = (0..d)
                .map(|bc| (bc, g[br][bc].row(ir)))
                .filter(|(_, r)| !r.vals.is_empty())
                .collect();
            for (bc, r) in &rows {
                start = start.min(bc + d * r.start);
                end = end.max(bc + d * (r.end() - 1) + 1);
            }
            if start == usize::MAX {
                return OpRow::default();
            }
            let mut vals = vec![C64::new(0.0, 0.0); end - start];
            for (bc, r) in &rows {
                for (off, v) in r.vals.iter().enumerate() {
                    vals[bc + d * (r.start + off) - start] = *v;
                }
            }
            OpRow { start, vals }
        },
    );
    let funcs = constraints
        .into_iter()
        .map(|(fs, c)| {
            let decay = if fs
                .iter()
                .all(|f| matches!(f.decay(), Decay::FiniteSupport(_)))
            {
                let sup = fs
                    .iter()
                    .map(|f| match f.decay() {
                        Decay::FiniteSupport(s) => s,
                        Decay::Bounded => 0,
                    })
                    .max()
                    .unwrap_or(0);
                Decay::FiniteSupport(d * sup)
            } else {
                Decay::Bounded
            };
            let row = RowFunctional::from_fn(decay, move |j| fs[j % d].entry(j / d));
            (row, c)
        })
        .collect();
    let tails = block_tails
        .into_iter()
        .map(|(br, bc, t)| {
            if br >= d || bc >= d {
                return Err(Error::InvalidArgument(format!(
                    "tail block ({br}, {bc}) outside {d} x {d} grid"
                )));
            }
            let mut col = vec![C64::new(0.0, 0.0); br + d * t.col.len().max(1)];
            for (i, v) in t.col.iter().enumerate() {
                col[br + d * i] = *v;
            }
            let inner = t.row;
            let row = RowFunctional::from_fn(
                match inner.decay() {
                    Decay::FiniteSupport(s) => Decay::FiniteSupport(bc + d * s),
                    Decay::Bounded => Decay::Bounded,
                },
                move |j| {
                    if j % d == bc {
                        inner.entry(j / d)
                    } else {
                        C64::new(0.0, 0.0)
                    }
                },
            );
            Ok(LowRankTerm::new(col, row))
        })
        .collect::<Result<Vec<_>>>()?;
    let max_len = rhs_blocks.iter().map(|r| r.len()).max().unwrap_or(0);
    let mut rhs = vec![C64::new(0.0, 0.0); d * max_len];
    for (b, rb) in rhs_blocks.iter().enumerate() {
        for (i, v) in rb.iter().enumerate() {
            rhs[b + d * i] = *v;
        }
    }
    while rhs.last().is_some_and(|v| v.norm() == 0.0) && rhs.len() > 1 {
        rhs.pop();
    }
    Ok(AlmostBandedSystem {
        constraints: funcs,
        op,
        tails,
        rhs,
        domain: DomainTag::Interlaced(tags),
    })
}
