//! Adaptive QR factorization of almost-banded infinite systems.
//!
//! The stacked system puts the dense constraint rows on top of the banded
//! operator rows; low-rank corrections `col ⊗ row` contribute per-row fill
//! coefficients. Columns are eliminated left to right with Givens rotations
//! against a FIFO pivot. Every row in play is a window of explicit entries
//! plus a small vector of fill coefficients multiplying the dense functional
//! tails, a representation closed under rotations, so elimination never
//! truncates anything: the factorization is exact for the infinite system up
//! to the adaptive stopping point.
//!
//! Termination watches the transformed right-hand side: once every entry held
//! by a not-yet-finalized row is below `tol * ‖rhs‖`, the remaining tail of
//! the solution is negligible and back substitution runs over the finalized
//! triangular rows.
//!
//! A [`QrCache`] keeps the rotation log and triangular rows. Replaying the
//! log against a new right-hand side costs O(rotations) with no operator
//! entry evaluations, and the factorization can be grown in place because the
//! operator is banded below: the working rows at the frontier are stored and
//! elimination simply resumes.

use crate::cheb::{CoeffExpansion, C64};
use crate::error::{Error, Result};
use crate::opalg::{AlmostBandedSystem, BandedOperator, RowFunctional};
use std::collections::VecDeque;

fn cz() -> C64 {
    C64::new(0.0, 0.0)
}

/// Hard cap on eliminated columns; `SIE_MAX_N` overrides the default 2^20.
fn resolution_cap() -> usize {
    std::env::var("SIE_MAX_N")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .unwrap_or(1 << 20)
}

/// Givens rotation zeroing `g` against `f`: returns (c, s) with c real such
/// that c·f + s·g = r and -conj(s)·f + c·g = 0.
fn crotg(f: C64, g: C64) -> (f64, C64) {
    let ag = g.norm();
    if ag == 0.0 {
        return (1.0, cz());
    }
    let af = f.norm();
    if af == 0.0 {
        return (0.0, g.conj() / ag);
    }
    let r = af.hypot(ag);
    (af / r, (f / af) * (g.conj() / r))
}

#[derive(Debug, Clone)]
struct RotRec {
    other: u32,
    c: f64,
    s: C64,
}

/// Finalized triangular row for column j: explicit window over columns
/// j, j+1, .. plus fill coefficients against the functional tails.
#[derive(Debug, Clone)]
struct RRow {
    win: Vec<C64>,
    fill: Vec<C64>,
}

#[derive(Debug, Clone)]
struct WorkRow {
    id: usize,
    start: usize,
    win: Vec<C64>,
    fill: Vec<C64>,
    rhs: C64,
}

impl WorkRow {
    fn end(&self) -> usize {
        self.start + self.win.len()
    }

    /// Entries left of column j are dead once column j is being eliminated.
    fn trim_to(&mut self, j: usize) {
        if self.start < j {
            let cut = (j - self.start).min(self.win.len());
            self.win.drain(..cut);
            self.start = j;
        }
    }

    fn expand(&mut self, start: usize, end: usize) {
        debug_assert!(start <= self.start);
        let len = end - start;
        if self.start == start && self.win.len() == len {
            return;
        }
        let mut nw = vec![cz(); len];
        let off = self.start - start;
        nw[off..off + self.win.len()].copy_from_slice(&self.win);
        self.win = nw;
        self.start = start;
    }

    /// Matrix entry at column j given this column's functional values.
    fn total(&self, j: usize, fvals: &[C64]) -> C64 {
        let mut v = if j >= self.start && j < self.end() {
            self.win[j - self.start]
        } else {
            cz()
        };
        for (t, b) in self.fill.iter().enumerate() {
            if b.norm() != 0.0 {
                v += b * fvals[t];
            }
        }
        v
    }
}

fn rotate(p: &mut WorkRow, w: &mut WorkRow, c: f64, s: C64) {
    let start = p.start.min(w.start);
    let end = p.end().max(w.end()).max(start);
    p.expand(start, end);
    w.expand(start, end);
    for t in 0..end - start {
        let a = p.win[t];
        let b = w.win[t];
        p.win[t] = c * a + s * b;
        w.win[t] = -s.conj() * a + c * b;
    }
    let nf = p.fill.len().max(w.fill.len());
    p.fill.resize(nf, cz());
    w.fill.resize(nf, cz());
    for t in 0..nf {
        let a = p.fill[t];
        let b = w.fill[t];
        p.fill[t] = c * a + s * b;
        w.fill[t] = -s.conj() * a + c * b;
    }
    let (a, b) = (p.rhs, w.rhs);
    p.rhs = c * a + s * b;
    w.rhs = -s.conj() * a + c * b;
}

fn stacked_norm(sys: &AlmostBandedSystem) -> f64 {
    let mut n = 0.0f64;
    for (_, c) in &sys.constraints {
        n = n.max(c.norm());
    }
    for v in &sys.rhs {
        n = n.max(v.norm());
    }
    n
}

enum ReplayOutcome {
    Done { transformed: Vec<C64> },
    Short { stat: f64 },
}

/// Growable QR factorization of one almost-banded system.
///
/// Rotations are appended per eliminated column and reference stacked row
/// ids (constraint rows first, then operator rows); replaying them on a
/// fresh right-hand side reproduces the transformed data bit for bit. The
/// working rows at the frontier are retained so the factorization extends
/// without recomputation.
///
/// A cache is single-writer: extension needs `&mut self`, while
/// [`QrCache::solve_shared`] replays concurrently from `&self` once the
/// frontier suffices.
pub struct QrCache {
    k: usize,
    lower: usize,
    nfill: usize,
    funcs: Vec<RowFunctional>,
    tail_cols: Vec<Vec<C64>>,
    fingerprint: Vec<u64>,
    nrots_per_col: Vec<u32>,
    rots: Vec<RotRec>,
    rrows: Vec<RRow>,
    transformed0: Vec<C64>,
    work: VecDeque<WorkRow>,
    loaded: usize,
}

fn fingerprint(sys: &AlmostBandedSystem) -> Vec<u64> {
    let mut fp = vec![
        sys.constraints.len() as u64,
        sys.tails.len() as u64,
        sys.op.lower_bw() as u64,
        sys.op.upper_bw() as u64,
    ];
    for i in [0usize, 1, 2, 3, 5, 8, 13, 21] {
        let r = sys.op.row(i);
        fp.push(r.start as u64);
        fp.push(r.vals.len() as u64);
        for v in r.vals.iter().take(24) {
            fp.push(v.re.to_bits());
            fp.push(v.im.to_bits());
        }
    }
    for (f, _) in &sys.constraints {
        for j in 0..12 {
            let v = f.entry(j);
            fp.push(v.re.to_bits());
            fp.push(v.im.to_bits());
        }
    }
    for t in &sys.tails {
        fp.push(t.col.len() as u64);
        for v in t.col.iter().take(8) {
            fp.push(v.re.to_bits());
            fp.push(v.im.to_bits());
        }
        for j in 0..8 {
            let v = t.row.entry(j);
            fp.push(v.re.to_bits());
            fp.push(v.im.to_bits());
        }
    }
    fp
}

impl QrCache {
    /// Factorize until the transformed rhs tail of `sys` drops below
    /// `tol * ‖rhs‖`.
    pub fn build(sys: &AlmostBandedSystem, tol: f64) -> Result<QrCache> {
        let k = sys.constraints.len();
        let nfill = k + sys.tails.len();
        let mut funcs: Vec<RowFunctional> =
            sys.constraints.iter().map(|(f, _)| f.clone()).collect();
        funcs.extend(sys.tails.iter().map(|t| t.row.clone()));
        let mut work = VecDeque::new();
        for (r, (_, c)) in sys.constraints.iter().enumerate() {
            let mut fill = vec![cz(); r + 1];
            fill[r] = C64::new(1.0, 0.0);
            work.push_back(WorkRow {
                id: r,
                start: 0,
                win: Vec::new(),
                fill,
                rhs: *c,
            });
        }
        let mut cache = QrCache {
            k,
            lower: sys.op.lower_bw(),
            nfill,
            funcs,
            tail_cols: sys.tails.iter().map(|t| t.col.clone()).collect(),
            fingerprint: fingerprint(sys),
            nrots_per_col: Vec::new(),
            rots: Vec::new(),
            rrows: Vec::new(),
            transformed0: Vec::new(),
            work,
            loaded: 0,
        };
        cache.run_to_tolerance(sys, tol, "adaptive qr factorization")?;
        Ok(cache)
    }

    pub fn frontier(&self) -> usize {
        self.rrows.len()
    }

    pub fn rotation_count(&self) -> usize {
        self.rots.len()
    }

    fn check_fingerprint(&self, sys: &AlmostBandedSystem) -> Result<()> {
        if fingerprint(sys) != self.fingerprint {
            return Err(Error::CacheMismatch(
                "system does not match the factorized one".into(),
            ));
        }
        Ok(())
    }

    fn work_stat(&self) -> f64 {
        self.work.iter().map(|w| w.rhs.norm()).fold(0.0, f64::max)
    }

    /// The live-row residual is the exact error of truncating the solution at
    /// the frontier, so it alone decides termination; unresolved constraints
    /// keep it large until their rows join the triangle.
    fn satisfied(&self, tol: f64, rhs_norm: f64, rhs_len: usize) -> bool {
        let f = self.frontier();
        f >= 1 && f + self.lower >= rhs_len && self.work_stat() <= tol * rhs_norm
    }

    fn run_to_tolerance(
        &mut self,
        sys: &AlmostBandedSystem,
        tol: f64,
        context: &'static str,
    ) -> Result<()> {
        let rhs_norm = stacked_norm(sys);
        let rhs_len = sys.rhs.len();
        let cap = resolution_cap();
        loop {
            if self.satisfied(tol, rhs_norm, rhs_len) {
                return Ok(());
            }
            if self.frontier() >= cap {
                let stat = self.work_stat();
                return Err(Error::ResolutionFailure {
                    context,
                    reached: self.frontier(),
                    tail: if rhs_norm > 0.0 { stat / rhs_norm } else { stat },
                });
            }
            self.eliminate_one(&sys.op, &sys.rhs)?;
        }
    }

    fn eliminate_one(&mut self, op: &BandedOperator, rhs: &[C64]) -> Result<()> {
        let j = self.frontier();
        while self.loaded <= j + self.lower {
            let i = self.loaded;
            let r = op.row(i);
            let mut fill = Vec::new();
            for (t, col) in self.tail_cols.iter().enumerate() {
                if let Some(v) = col.get(i) {
                    if v.norm() != 0.0 {
                        fill.resize(self.k + t + 1, cz());
                        fill[self.k + t] = *v;
                    }
                }
            }
            self.work.push_back(WorkRow {
                id: self.k + i,
                start: r.start,
                win: r.vals.clone(),
                fill,
                rhs: rhs.get(i).copied().unwrap_or_default(),
            });
            self.loaded += 1;
        }
        let mut fvals = vec![cz(); self.nfill];
        for (t, f) in self.funcs.iter().enumerate() {
            fvals[t] = f.entry(j);
        }
        let mut pivot = self.work.pop_front().expect("working set nonempty");
        debug_assert_eq!(pivot.id, j, "FIFO pivot is the stacked row of the column");
        pivot.trim_to(j);
        let mut nrots = 0u32;
        for w in self.work.iter_mut() {
            let g = w.total(j, &fvals);
            if g == cz() {
                continue;
            }
            w.trim_to(j);
            let f = pivot.total(j, &fvals);
            let (c, s) = crotg(f, g);
            rotate(&mut pivot, w, c, s);
            self.rots.push(RotRec {
                other: w.id as u32,
                c,
                s,
            });
            nrots += 1;
        }
        let diag = pivot.total(j, &fvals);
        if diag == cz() {
            return Err(Error::SingularSystem { column: j });
        }
        let pad = pivot.start - j;
        let mut win = vec![cz(); pad];
        win.extend_from_slice(&pivot.win);
        if win.is_empty() {
            win.push(cz());
        }
        let mut fill = pivot.fill;
        while fill.last().is_some_and(|v| *v == cz()) {
            fill.pop();
        }
        self.rrows.push(RRow { win, fill });
        self.transformed0.push(pivot.rhs);
        self.nrots_per_col.push(nrots);
        Ok(())
    }

    /// Grow the factorization to at least `new_frontier` eliminated columns.
    /// A no-op when the frontier is already there.
    pub fn extend(&mut self, sys: &AlmostBandedSystem, new_frontier: usize) -> Result<()> {
        self.check_fingerprint(sys)?;
        self.extend_unchecked(sys, new_frontier)
    }

    fn extend_unchecked(&mut self, sys: &AlmostBandedSystem, new_frontier: usize) -> Result<()> {
        let target = new_frontier.min(resolution_cap());
        while self.frontier() < target {
            self.eliminate_one(&sys.op, &sys.rhs)?;
        }
        Ok(())
    }

    /// Apply the rotation log to a new stacked right-hand side, monitoring
    /// the live tail for early termination.
    fn replay(&self, sys: &AlmostBandedSystem, tol: f64) -> ReplayOutcome {
        let k = self.k;
        let l = self.lower;
        let rhs_len = sys.rhs.len();
        let rhs_norm = stacked_norm(sys);
        let total = k + self.loaded;
        let mut vals = vec![cz(); total];
        for (r, (_, c)) in sys.constraints.iter().enumerate() {
            vals[r] = *c;
        }
        for i in 0..self.loaded {
            if let Some(v) = sys.rhs.get(i) {
                vals[k + i] = *v;
            }
        }
        let mut ri = 0usize;
        let mut stat = f64::INFINITY;
        for j in 0..self.frontier() {
            for _ in 0..self.nrots_per_col[j] {
                let rot = &self.rots[ri];
                ri += 1;
                let o = rot.other as usize;
                let a = vals[j];
                let b = vals[o];
                vals[j] = rot.c * a + rot.s * b;
                vals[o] = -rot.s.conj() * a + rot.c * b;
            }
            let f = j + 1;
            if f + l >= rhs_len {
                let hi = (k + f + l).min(total);
                stat = vals[f..hi].iter().map(|v| v.norm()).fold(0.0, f64::max);
                if stat <= tol * rhs_norm {
                    vals.truncate(f);
                    return ReplayOutcome::Done { transformed: vals };
                }
            }
        }
        ReplayOutcome::Short { stat }
    }

    fn back_substitute(&self, transformed: &[C64]) -> Result<Vec<C64>> {
        let n = transformed.len();
        let nf = self.nfill;
        let mut x = vec![cz(); n];
        let mut tails = vec![cz(); nf];
        let mut fvals = vec![cz(); nf];
        for j in (0..n).rev() {
            for (t, f) in self.funcs.iter().enumerate() {
                fvals[t] = f.entry(j);
            }
            let row = &self.rrows[j];
            let mut v = transformed[j];
            for (off, w) in row.win.iter().enumerate().skip(1) {
                let col = j + off;
                if col >= n {
                    break;
                }
                v -= w * x[col];
            }
            let mut diag = row.win[0];
            for (t, b) in row.fill.iter().enumerate() {
                if b.norm() != 0.0 {
                    v -= b * tails[t];
                    diag += b * fvals[t];
                }
            }
            if diag == cz() {
                return Err(Error::SingularSystem { column: j });
            }
            let xj = v / diag;
            x[j] = xj;
            if xj != cz() {
                for t in 0..nf {
                    if fvals[t].norm() != 0.0 {
                        tails[t] += fvals[t] * xj;
                    }
                }
            }
        }
        Ok(x)
    }

    /// Solve for a (possibly new) right-hand side, growing the factorization
    /// as needed. Returns the raw stacked coefficient vector.
    pub fn solve_raw(&mut self, sys: &AlmostBandedSystem, tol: f64) -> Result<Vec<C64>> {
        self.check_fingerprint(sys)?;
        let cap = resolution_cap();
        loop {
            match self.replay(sys, tol) {
                ReplayOutcome::Done { transformed } => return self.back_substitute(&transformed),
                ReplayOutcome::Short { stat } => {
                    if self.frontier() >= cap {
                        return Err(Error::ResolutionFailure {
                            context: "cached qr solve",
                            reached: self.frontier(),
                            tail: stat,
                        });
                    }
                    let target = self.frontier().saturating_mul(2).clamp(32, cap);
                    if let Err(e) = self.extend_unchecked(sys, target) {
                        // a dead column ends triangularization; the frontier
                        // reached can still satisfy the gates (rank-deficient
                        // but consistent systems)
                        if let ReplayOutcome::Done { transformed } = self.replay(sys, tol) {
                            return self.back_substitute(&transformed);
                        }
                        return Err(e);
                    }
                }
            }
        }
    }

    /// Like [`QrCache::solve_raw`] followed by per-segment chopping.
    pub fn solve(&mut self, sys: &AlmostBandedSystem, tol: f64) -> Result<Vec<CoeffExpansion>> {
        let x = self.solve_raw(sys, tol)?;
        Ok(package(sys, x, tol))
    }

    /// Replay-only solve from a shared reference. Fails with a resolution
    /// error when the stored frontier is insufficient for this data.
    pub fn solve_shared(&self, sys: &AlmostBandedSystem, tol: f64) -> Result<Vec<CoeffExpansion>> {
        self.check_fingerprint(sys)?;
        match self.replay(sys, tol) {
            ReplayOutcome::Done { transformed } => {
                let x = self.back_substitute(&transformed)?;
                Ok(package(sys, x, tol))
            }
            ReplayOutcome::Short { stat } => Err(Error::ResolutionFailure {
                context: "cached qr frontier",
                reached: self.frontier(),
                tail: stat,
            }),
        }
    }
}

fn package(sys: &AlmostBandedSystem, x: Vec<C64>, tol: f64) -> Vec<CoeffExpansion> {
    let mut out = sys.unknowns_to_expansions(&x);
    for e in &mut out {
        e.trim(tol);
    }
    out
}

/// Factorize and solve in one call; the solution is chopped at `tol` in each
/// segment's basis.
pub fn adaptive_qr_solve(sys: &AlmostBandedSystem, tol: f64) -> Result<Vec<CoeffExpansion>> {
    Ok(package(sys, adaptive_qr_solve_raw(sys, tol)?, tol))
}

/// Factorize and solve, returning the raw stacked coefficient vector.
pub fn adaptive_qr_solve_raw(sys: &AlmostBandedSystem, tol: f64) -> Result<Vec<C64>> {
    let cache = QrCache::build(sys, tol)?;
    cache.back_substitute(&cache.transformed0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cheb::{Basis, Segment};
    use crate::opalg::{
        assemble_ode, boundary_functionals, multiplication_op, FunctionalKind, LowRankTerm,
        OpRow,
    };
    use crate::opalg::DomainTag;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn re_vec(v: &[f64]) -> Vec<C64> {
        v.iter().map(|&x| c(x, 0.0)).collect()
    }

    fn single_domain() -> DomainTag {
        DomainTag::Single(Basis::T, Segment::unit())
    }

    #[test]
    fn identity_returns_rhs() {
        let sys = AlmostBandedSystem {
            constraints: vec![],
            op: BandedOperator::identity(Basis::T),
            tails: vec![],
            rhs: vec![c(1.0, 0.0)],
            domain: single_domain(),
        };
        let sol = adaptive_qr_solve(&sys, 1e-14).unwrap();
        assert_eq!(sol.len(), 1);
        assert_eq!(sol[0].coeffs, vec![c(1.0, 0.0)]);
    }

    #[test]
    fn second_derivative_with_endpoint_values() {
        // u'' = 0, u(-1) = 0, u(1) = 1 -> u = (1 + x)/2
        let seg = Segment::unit();
        let zero = CoeffExpansion::new(Basis::T, seg, vec![cz()]);
        let one = CoeffExpansion::new(Basis::T, seg, vec![c(1.0, 0.0)]);
        let sys = assemble_ode(
            &[zero.clone(), zero.clone(), one],
            vec![
                (
                    boundary_functionals(FunctionalKind::EvalLeft, Basis::T).unwrap(),
                    cz(),
                ),
                (
                    boundary_functionals(FunctionalKind::EvalRight, Basis::T).unwrap(),
                    c(1.0, 0.0),
                ),
            ],
            &zero,
        )
        .unwrap();
        let sol = &adaptive_qr_solve(&sys, 1e-14).unwrap()[0];
        assert!((sol.coeffs[0] - c(0.5, 0.0)).norm() < 1e-14);
        assert!((sol.coeffs[1] - c(0.5, 0.0)).norm() < 1e-14);
        assert!(sol.coeffs.len() <= 3);
        let x = adaptive_qr_solve_raw(&sys, 1e-14).unwrap();
        assert!(sys.residual_norm(&x) <= 1e-13);
    }

    #[test]
    fn boundary_layer_termination_degree() {
        // eps (eps + x^2) u'' = x u, u(-1) = 1, u(1) = 0 at eps = 1e-4 needs a
        // degree in the low thousands to resolve the interior layer.
        let seg = Segment::unit();
        let eps = 1e-4;
        let a0 = CoeffExpansion::new(Basis::T, seg, re_vec(&[0.0, -1.0]));
        let a1 = CoeffExpansion::new(Basis::T, seg, vec![cz()]);
        let a2 = CoeffExpansion::new(
            Basis::T,
            seg,
            re_vec(&[eps * eps + eps / 2.0, 0.0, eps / 2.0]),
        );
        let f = CoeffExpansion::new(Basis::T, seg, vec![cz()]);
        let sys = assemble_ode(
            &[a0, a1, a2],
            vec![
                (
                    boundary_functionals(FunctionalKind::EvalLeft, Basis::T).unwrap(),
                    c(1.0, 0.0),
                ),
                (
                    boundary_functionals(FunctionalKind::EvalRight, Basis::T).unwrap(),
                    cz(),
                ),
            ],
            &f,
        )
        .unwrap();
        let tol = f64::EPSILON;
        let cache = QrCache::build(&sys, tol).unwrap();
        assert!(
            (2600..=4100).contains(&cache.frontier()),
            "termination degree {}",
            cache.frontier()
        );
        let sol = &cache.solve_shared(&sys, tol).unwrap()[0];
        assert!((sol.eval_local(c(-1.0, 0.0)).unwrap() - c(1.0, 0.0)).norm() < 1e-10);
        assert!(sol.eval_local(c(1.0, 0.0)).unwrap().norm() < 1e-10);
    }

    fn bessel_by_miller(x: f64, count: usize) -> Vec<f64> {
        let start = count + 30 + x as usize;
        let mut y = vec![0.0f64; start + 2];
        y[start] = 1.0;
        for n in (1..=start).rev() {
            y[n - 1] = (2.0 * n as f64 / x) * y[n] - y[n + 1];
        }
        let mut norm = y[0];
        for m in (2..start).step_by(2) {
            norm += 2.0 * y[m];
        }
        y.iter().take(count).map(|v| v / norm).collect()
    }

    #[test]
    fn recurrence_solver_selects_minimal_solution() {
        // three-term Bessel recurrence rows with the even-sum normalization;
        // the dominant solution family is suppressed automatically
        let x = 1.0;
        let op = BandedOperator::from_rows(0, 2, Basis::T, Basis::T, move |i| OpRow {
            start: i,
            vals: vec![
                c(1.0, 0.0),
                c(-2.0 * (i as f64 + 1.0) / x, 0.0),
                c(1.0, 0.0),
            ],
        });
        let norm_row = RowFunctional::from_fn(crate::opalg::Decay::Bounded, |j| {
            if j == 0 {
                c(1.0, 0.0)
            } else if j % 2 == 0 {
                c(2.0, 0.0)
            } else {
                cz()
            }
        });
        let sys = AlmostBandedSystem {
            constraints: vec![(norm_row, c(1.0, 0.0))],
            op,
            tails: vec![],
            rhs: vec![],
            domain: single_domain(),
        };
        let sol = &adaptive_qr_solve(&sys, 1e-15).unwrap()[0];
        let oracle = bessel_by_miller(x, 11);
        for (n, want) in oracle.iter().enumerate() {
            let got = sol.coeffs.get(n).copied().unwrap_or_default();
            assert!(
                (got.re - want).abs() < 1e-10 && got.im.abs() < 1e-14,
                "J_{n}: {} vs {want}",
                got.re
            );
        }
        assert!((sol.coeffs[0].re - 0.7651976865579666).abs() < 1e-12);
        assert!((sol.coeffs[1].re - 0.4400505857449335).abs() < 1e-12);
    }

    #[test]
    fn zero_leading_column_reports_singular() {
        let op = BandedOperator::diagonal(Basis::T, Basis::T, |i| {
            if i == 0 {
                cz()
            } else {
                c(1.0, 0.0)
            }
        });
        let sys = AlmostBandedSystem {
            constraints: vec![],
            op,
            tails: vec![],
            rhs: vec![c(1.0, 0.0)],
            domain: single_domain(),
        };
        match adaptive_qr_solve(&sys, 1e-14) {
            Err(Error::SingularSystem { column }) => assert_eq!(column, 0),
            other => panic!("expected singular system, got {other:?}"),
        }
    }

    #[test]
    fn rank_one_correction_feeds_back_substitution() {
        // I + e0 (x) e1^T: x0 + x1 = 2, x_j = rhs_j beyond
        let sys = AlmostBandedSystem {
            constraints: vec![],
            op: BandedOperator::identity(Basis::T),
            tails: vec![LowRankTerm::new(
                re_vec(&[1.0]),
                RowFunctional::from_vec(re_vec(&[0.0, 1.0])),
            )],
            rhs: re_vec(&[2.0, 1.0]),
            domain: single_domain(),
        };
        let x = adaptive_qr_solve_raw(&sys, 1e-14).unwrap();
        assert!((x[0] - c(1.0, 0.0)).norm() < 1e-14);
        assert!((x[1] - c(1.0, 0.0)).norm() < 1e-14);
        assert!(sys.residual_norm(&x) < 1e-13);
    }

    /// u' + (2 + 0.3x) u plus a rank-one integral coupling, one boundary row.
    fn mixed_test_system(f_coeffs: Vec<C64>, bc: C64) -> AlmostBandedSystem {
        let seg = Segment::unit();
        let a0 = CoeffExpansion::new(Basis::T, seg, re_vec(&[2.0, 0.3]));
        let a1 = CoeffExpansion::new(Basis::T, seg, re_vec(&[1.0]));
        let f = CoeffExpansion::new(Basis::T, seg, f_coeffs);
        let right = boundary_functionals(FunctionalKind::EvalRight, Basis::T).unwrap();
        let mut sys = assemble_ode(&[a0, a1], vec![(right, bc)], &f).unwrap();
        sys.tails.push(LowRankTerm::new(
            re_vec(&[0.2, 0.1]),
            RowFunctional::from_vec(re_vec(&[0.0, 0.4, 0.1])),
        ));
        sys
    }

    #[test]
    fn cached_solves_are_bit_identical_to_fresh() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let rhs: Vec<C64> = (0..12)
            .map(|_| c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let sys = mixed_test_system(rhs, c(1.0, 0.0));
        let fresh = adaptive_qr_solve_raw(&sys, 1e-13).unwrap();
        assert!(sys.residual_norm(&fresh) <= 10.0 * 1e-13 * stacked_norm(&sys));
        let mut cache = QrCache::build(&sys, 1e-13).unwrap();
        let replayed = cache.solve_raw(&sys, 1e-13).unwrap();
        assert_eq!(fresh, replayed);
        // a different rhs and constraint value reuse the same rotations
        let mut rng2 = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        let rhs2: Vec<C64> = (0..9)
            .map(|_| c(rng2.gen_range(-1.0..1.0), 0.0))
            .collect();
        let sys2 = mixed_test_system(rhs2, c(-0.25, 0.5));
        let fresh2 = adaptive_qr_solve_raw(&sys2, 1e-13).unwrap();
        let replayed2 = cache.solve_raw(&sys2, 1e-13).unwrap();
        assert_eq!(fresh2, replayed2);
    }

    #[test]
    fn extend_is_idempotent_and_diagonal_needs_no_rotations() {
        let sys = AlmostBandedSystem {
            constraints: vec![],
            op: BandedOperator::identity(Basis::T),
            tails: vec![],
            rhs: re_vec(&[1.0, 0.5]),
            domain: single_domain(),
        };
        let mut cache = QrCache::build(&sys, 1e-14).unwrap();
        let f0 = cache.frontier();
        let r0 = cache.rotation_count();
        cache.extend(&sys, f0).unwrap();
        assert_eq!(cache.frontier(), f0);
        assert_eq!(cache.rotation_count(), r0);
        cache.extend(&sys, f0 + 1).unwrap();
        assert_eq!(cache.frontier(), f0 + 1);
        assert_eq!(cache.rotation_count(), r0);
        // resolving the same rhs after extension is unchanged
        let sol = cache.solve_raw(&sys, 1e-14).unwrap();
        assert_eq!(sol, re_vec(&[1.0, 0.5]));
    }

    #[test]
    fn mismatched_system_is_rejected() {
        let sys = mixed_test_system(re_vec(&[1.0, 0.0, 0.25]), c(1.0, 0.0));
        let cache = QrCache::build(&sys, 1e-13).unwrap();
        let mut other = mixed_test_system(re_vec(&[1.0, 0.0, 0.25]), c(1.0, 0.0));
        other.op = other.op.scale(c(1.5, 0.0));
        match cache.solve_shared(&other, 1e-13) {
            Err(Error::CacheMismatch(_)) => {}
            other => panic!("expected cache mismatch, got {other:?}"),
        }
    }

    #[test]
    fn rotations_preserve_two_norm() {
        let sys = mixed_test_system(re_vec(&[0.3, -0.7, 0.2, 0.9]), c(0.4, -0.1));
        let cache = QrCache::build(&sys, 1e-13).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let mut vals: Vec<C64> = (0..cache.k + cache.loaded)
            .map(|_| c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let before: f64 = vals.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
        let mut ri = 0;
        for j in 0..cache.frontier() {
            for _ in 0..cache.nrots_per_col[j] {
                let rot = &cache.rots[ri];
                ri += 1;
                let o = rot.other as usize;
                let a = vals[j];
                let b = vals[o];
                vals[j] = rot.c * a + rot.s * b;
                vals[o] = -rot.s.conj() * a + rot.c * b;
            }
        }
        let after: f64 = vals.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
        assert!((before - after).abs() <= 1e-13 * before);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn residual_bound_and_cache_consistency(
            seed in 0u64..1000,
            nrhs in 1usize..14,
            with_bc in proptest::bool::ANY,
        ) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<C64> = (0..nrhs)
                .map(|_| c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
                .collect();
            let seg = Segment::unit();
            let a = CoeffExpansion::new(
                Basis::T,
                seg,
                re_vec(&[1.5 + rng.gen_range(0.0..1.0), rng.gen_range(-0.3..0.3), rng.gen_range(-0.2..0.2)]),
            );
            let sys = if with_bc {
                // first-order equation u' + a(x) u = f with one boundary row
                let one = CoeffExpansion::new(Basis::T, seg, re_vec(&[1.0]));
                let f = CoeffExpansion::new(Basis::T, seg, data);
                assemble_ode(
                    &[a, one],
                    vec![(
                        boundary_functionals(FunctionalKind::EvalRight, Basis::T).unwrap(),
                        c(rng.gen_range(-1.0..1.0), 0.0),
                    )],
                    &f,
                )
                .unwrap()
            } else {
                // invertible multiplication operator, no constraint rows
                AlmostBandedSystem {
                    constraints: vec![],
                    op: multiplication_op(&a, 0).unwrap(),
                    tails: vec![],
                    rhs: data,
                    domain: single_domain(),
                }
            };
            let tol = 1e-12;
            let x = adaptive_qr_solve_raw(&sys, tol).unwrap();
            prop_assert!(sys.residual_norm(&x) <= 10.0 * tol * stacked_norm(&sys));
            let mut cache = QrCache::build(&sys, tol).unwrap();
            let y = cache.solve_raw(&sys, tol).unwrap();
            prop_assert_eq!(x, y);
        }
    }
}
