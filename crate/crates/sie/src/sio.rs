//! Singular integral operators on weighted Chebyshev bases.
//!
//! On the reference interval, densities with inverse-square-root endpoint
//! behavior are expanded as sums of `T_n(x)/sqrt(1-x^2)` ([`Basis::WT`]) and
//! densities with square-root endpoint behavior as sums of
//! `U_n(x) sqrt(1-x^2)` ([`Basis::WU`]). In these bases the principal-value,
//! logarithmic, and finite-part transforms all act as banded (mostly
//! diagonal) operators on coefficients, so a singular integral equation
//!
//! ```text
//! (1/pi) =int ( K1(x,y)/(y-x)^2 + K2(x,y)/(y-x)
//!               + log|y-x| K3(x,y) + K4(x,y) ) u(y) dy = f(x)
//! ```
//!
//! with low-rank kernels reduces to an almost-banded infinite system: each
//! kernel term `A_i(x) B_i(y)` wraps the corresponding singular operator
//! between two multiplication operators, and the smooth `K4` part collapses
//! to rank-one corrections through the integral functional. [`assemble_sie`]
//! stacks the constraint rows on top and lifts everything into a common
//! ultraspherical range, mirroring the banded spectral method for ODEs.

use crate::cheb::{Basis, CoeffExpansion, Segment, C64};
use crate::error::{Error, Result};
use crate::lowrank::LowRankKernel;
use crate::opalg::{
    conversion_op, multiplication_op, AlmostBandedSystem, BandedOperator, DomainTag, LowRankTerm,
    OpRow, RowFunctional,
};
use std::f64::consts::LN_2;

fn cz() -> C64 {
    C64::new(0.0, 0.0)
}

fn rc(x: f64) -> C64 {
    C64::new(x, 0.0)
}

/// Which singular factor of the kernel an operator or kernel term wraps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WrapKind {
    /// Finite-part factor `1/(y-x)^2` (kernel `K1`).
    Hadamard,
    /// Principal-value factor `1/(y-x)` (kernel `K2`).
    Hilbert,
    /// Logarithmic factor `log|y-x|` (kernel `K3`).
    Log,
    /// Smooth part (kernel `K4`).
    Sigma,
}

impl WrapKind {
    pub const ALL: [WrapKind; 4] = [
        WrapKind::Hadamard,
        WrapKind::Hilbert,
        WrapKind::Log,
        WrapKind::Sigma,
    ];

    fn index(self) -> usize {
        match self {
            WrapKind::Hadamard => 0,
            WrapKind::Hilbert => 1,
            WrapKind::Log => 2,
            WrapKind::Sigma => 3,
        }
    }
}

/// Integration measure along a segment in the plane.
///
/// On the reference interval the two coincide; on a rotated segment they
/// differ by the constant phase `(b-a)/|b-a|`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Measure {
    /// Arclength `|dzeta|` (layer potentials over plane curves).
    #[default]
    Arclength,
    /// Complex line element `dzeta` (contour integrals).
    Complex,
}

fn weighted_only(basis: Basis, what: &str) -> Error {
    Error::Unsupported(format!("{what} on basis {basis:?}; expected WT or WU"))
}

/// Half-length and unit phase of a segment.
pub(crate) fn geometry(seg: Segment) -> Result<(f64, C64)> {
    let e = (seg.b - seg.a) * 0.5;
    let h = e.norm();
    if h == 0.0 || !h.is_finite() {
        return Err(Error::InvalidArgument("degenerate segment".into()));
    }
    Ok((h, e / h))
}

/// Principal-value transform `(1/pi) pv-int u(y)/(y-x) dy` on the reference
/// interval.
///
/// The weighted bases turn it into a shift: `T_{n+1}/sqrt -> C^(1)_n` and
/// `U_n sqrt -> -T_{n+1}`, with the constant (respectively nothing) in the
/// kernel of the map.
pub fn hilbert_op(basis: Basis) -> Result<BandedOperator> {
    match basis {
        Basis::WT => Ok(BandedOperator::from_rows(
            0,
            1,
            Basis::WT,
            Basis::U,
            |i| OpRow {
                start: i + 1,
                vals: vec![rc(1.0)],
            },
        )),
        Basis::WU => Ok(BandedOperator::from_rows(
            1,
            0,
            Basis::WU,
            Basis::T,
            |i| {
                if i == 0 {
                    OpRow::default()
                } else {
                    OpRow {
                        start: i - 1,
                        vals: vec![rc(-1.0)],
                    }
                }
            },
        )),
        other => Err(weighted_only(other, "hilbert transform")),
    }
}

/// Log transform `(1/pi) int log|y-x| u(y) dy` on the reference interval.
///
/// Diagonal `(-log2, -1, -1/2, ...)` on WT; on WU each column couples two
/// Chebyshev modes. Segment corrections (the `log h` constant term) belong
/// to [`log_op_on`] and [`assemble_sie`].
pub fn log_op(basis: Basis) -> Result<BandedOperator> {
    match basis {
        Basis::WT => Ok(BandedOperator::diagonal(Basis::WT, Basis::T, |n| {
            if n == 0 {
                rc(-LN_2)
            } else {
                rc(-1.0 / n as f64)
            }
        })),
        Basis::WU => Ok(BandedOperator::from_rows(
            2,
            0,
            Basis::WU,
            Basis::T,
            |i| match i {
                0 => OpRow {
                    start: 0,
                    vals: vec![rc(-0.5 * LN_2)],
                },
                1 => OpRow {
                    start: 1,
                    vals: vec![rc(-0.5)],
                },
                _ => OpRow {
                    start: i - 2,
                    // column n feeds rows n and n+2: -1/(2n) and 1/(2(n+2))
                    vals: vec![rc(1.0 / (2.0 * i as f64)), cz(), rc(-1.0 / (2.0 * i as f64))],
                },
            },
        )),
        other => Err(weighted_only(other, "log transform")),
    }
}

/// Finite-part transform `(1/pi) fp-int u(y)/(y-x)^2 dy` on the reference
/// interval; the derivative of [`hilbert_op`].
///
/// `T_n/sqrt -> 2 C^(2)_{n-2}` (differentiating `C^(1)_{n-1}`) and
/// `U_n sqrt -> -(n+1) C^(1)_n`.
pub fn hadamard_op(basis: Basis) -> Result<BandedOperator> {
    match basis {
        Basis::WT => Ok(BandedOperator::from_rows(
            0,
            2,
            Basis::WT,
            Basis::Ultra(2),
            |i| OpRow {
                start: i + 2,
                vals: vec![rc(2.0)],
            },
        )),
        Basis::WU => Ok(BandedOperator::diagonal(Basis::WU, Basis::U, |n| {
            rc(-(n as f64 + 1.0))
        })),
        other => Err(weighted_only(other, "finite-part transform")),
    }
}

/// Integral functional `(1/pi) int u(y) dy` on the reference interval:
/// `(1, 0, ...)` on WT and `(1/2, 0, ...)` on WU.
pub fn sigma_functional(basis: Basis) -> Result<RowFunctional> {
    match basis {
        Basis::WT => Ok(RowFunctional::from_vec(vec![rc(1.0)])),
        Basis::WU => Ok(RowFunctional::from_vec(vec![rc(0.5)])),
        other => Err(weighted_only(other, "integral functional")),
    }
}

/// [`hilbert_op`] of a density living on `seg`, mapped through the affine
/// chart: the kernel `1/(y-x)` contributes the inverse phase of the segment.
pub fn hilbert_op_on(basis: Basis, seg: Segment, measure: Measure) -> Result<BandedOperator> {
    let (h, phase) = geometry(seg)?;
    let s = match measure {
        Measure::Arclength => phase.conj(),
        Measure::Complex => rc(1.0),
    };
    let _ = h;
    Ok(hilbert_op(basis)?.scale(s))
}

/// [`hadamard_op`] on `seg`: the kernel `1/(y-x)^2` scales by the squared
/// inverse chart factor.
pub fn hadamard_op_on(basis: Basis, seg: Segment, measure: Measure) -> Result<BandedOperator> {
    let (h, phase) = geometry(seg)?;
    let s = match measure {
        Measure::Arclength => phase.conj() * phase.conj() / h,
        Measure::Complex => phase.conj() / h,
    };
    Ok(hadamard_op(basis)?.scale(s))
}

/// [`log_op`] on `seg`, including the constant-term correction: with
/// half-length `h`, `log|zeta(s)-zeta(t)| = log h + log|s-t|`, so the
/// operator picks up `h log h` times the integral functional feeding the
/// constant mode.
pub fn log_op_on(basis: Basis, seg: Segment, measure: Measure) -> Result<BandedOperator> {
    let (h, phase) = geometry(seg)?;
    let s = match measure {
        Measure::Arclength => rc(h),
        Measure::Complex => rc(h) * phase,
    };
    let base = log_op(basis)?.scale(s);
    let sigma0 = sigma_functional(basis)?.entry(0);
    let corr = BandedOperator::from_rows(0, 0, basis, Basis::T, move |i| {
        if i == 0 {
            OpRow {
                start: 0,
                vals: vec![s * rc(h.ln()) * sigma0],
            }
        } else {
            OpRow::default()
        }
    });
    base.add(&corr)
}

/// [`sigma_functional`] on `seg`: scales by the half-length (and the phase
/// under the complex line element).
pub fn sigma_functional_on(
    basis: Basis,
    seg: Segment,
    measure: Measure,
) -> Result<RowFunctional> {
    let (h, phase) = geometry(seg)?;
    let s = match measure {
        Measure::Arclength => rc(h),
        Measure::Complex => rc(h) * phase,
    };
    Ok(sigma_functional(basis)?.scale(s))
}

/// Rebuild with new basis tags; the weighted bases share coefficient space
/// with their unweighted counterparts, so multiplication operators built on
/// T or C(1) coefficients act on WT or WU expansions unchanged.
fn retag(op: &BandedOperator, domain: Basis, range: Basis) -> BandedOperator {
    let inner = op.clone();
    BandedOperator::from_rows(op.lower_bw(), op.upper_bw(), domain, range, move |i| {
        (*inner.row(i)).clone()
    })
}

/// Multiplication by the y-slice acting on the solution coefficients, tagged
/// with the weighted domain.
fn inner_mul(b: &CoeffExpansion, basis: Basis) -> Result<BandedOperator> {
    match basis {
        Basis::WT => Ok(retag(&multiplication_op(b, 0)?, Basis::WT, Basis::WT)),
        Basis::WU => Ok(retag(&multiplication_op(b, 1)?, Basis::WU, Basis::WU)),
        other => Err(weighted_only(other, "kernel wrapping")),
    }
}

/// Row functional of `u -> (1/pi) int B(y) u(y) dy`: the integral functional
/// composed with multiplication by `B`, which is `sigma_0` times row zero of
/// the multiplication operator.
fn sigma_row(b: &CoeffExpansion, basis: Basis) -> Result<RowFunctional> {
    let (mul, s0) = match basis {
        Basis::WT => (multiplication_op(b, 0)?, rc(1.0)),
        Basis::WU => (multiplication_op(b, 1)?, rc(0.5)),
        other => return Err(weighted_only(other, "kernel wrapping")),
    };
    let r0 = mul.row(0);
    debug_assert_eq!(r0.start, 0);
    Ok(RowFunctional::from_vec(
        r0.vals.iter().map(|v| s0 * v).collect(),
    ))
}

fn require_rank(k: &LowRankKernel) -> Result<()> {
    if k.terms.is_empty() {
        return Err(Error::InvalidArgument(
            "kernel wrapping needs at least one low-rank term".into(),
        ));
    }
    Ok(())
}

/// Wrap a low-rank kernel around one singular operator on the reference
/// interval: `sum_i M[A_i] . Op . M[B_i]`, with multiplication orders set by
/// the operator's range and the solution basis.
///
/// The result is banded with bandwidth at most `deg_x + deg_y` plus the
/// operator's own shift. The sigma kind yields the finite-rank operator
/// `sum_i A_i (sigma . M[B_i])`.
pub fn kernel_wrapped_op(
    kind: WrapKind,
    k: &LowRankKernel,
    basis: Basis,
) -> Result<BandedOperator> {
    require_rank(k)?;
    if !matches!(basis, Basis::WT | Basis::WU) {
        return Err(weighted_only(basis, "kernel wrapping"));
    }
    if kind == WrapKind::Sigma {
        return sigma_wrapped_op(k, basis);
    }
    let bare = match kind {
        WrapKind::Hadamard => hadamard_op(basis)?,
        WrapKind::Hilbert => hilbert_op(basis)?,
        WrapKind::Log => log_op(basis)?,
        WrapKind::Sigma => unreachable!(),
    };
    let outer_lambda = match bare.range() {
        Basis::T => 0,
        Basis::Ultra(l) => l,
        other => return Err(weighted_only(other, "kernel wrapping")),
    };
    let mut terms = Vec::with_capacity(k.terms.len());
    for (a, b) in &k.terms {
        let outer = multiplication_op(a, outer_lambda)?;
        let outer = if outer_lambda == 0 {
            retag(&outer, Basis::T, Basis::T)
        } else {
            outer
        };
        terms.push(outer.compose(&bare)?.compose(&inner_mul(b, basis)?)?);
    }
    BandedOperator::sum(&terms)
}

/// The smooth-kernel operator `sum_i A_i(x) (1/pi) int B_i(y) u(y) dy` as an
/// explicitly banded (finite) operator.
fn sigma_wrapped_op(k: &LowRankKernel, basis: Basis) -> Result<BandedOperator> {
    let mut cols: Vec<Vec<C64>> = Vec::with_capacity(k.terms.len());
    let mut rows: Vec<Vec<C64>> = Vec::with_capacity(k.terms.len());
    for (a, b) in &k.terms {
        if a.basis != Basis::T {
            return Err(Error::BasisMismatch(
                "kernel x-slices must carry T coefficients".into(),
            ));
        }
        cols.push(a.coeffs.clone());
        let r = sigma_row(b, basis)?;
        let n = match r.decay() {
            crate::opalg::Decay::FiniteSupport(n) => n,
            crate::opalg::Decay::Bounded => unreachable!("sigma rows have finite support"),
        };
        rows.push(r.entries(n));
    }
    let lower = cols.iter().map(|c| c.len()).max().unwrap_or(1).max(1) - 1;
    let upper = rows.iter().map(|r| r.len()).max().unwrap_or(1).max(1) - 1;
    Ok(BandedOperator::from_rows(
        lower,
        upper,
        basis,
        Basis::T,
        move |i| {
            let mut vals = vec![cz(); upper + 1];
            let mut any = false;
            for (c, r) in cols.iter().zip(&rows) {
                if let Some(ci) = c.get(i) {
                    if ci.norm() != 0.0 {
                        any = true;
                        for (j, rj) in r.iter().enumerate() {
                            vals[j] += ci * rj;
                        }
                    }
                }
            }
            if any {
                OpRow { start: 0, vals }
            } else {
                OpRow::default()
            }
        },
    ))
}

/// A singular integral equation on one segment.
///
/// The four optional kernels multiply the finite-part, principal-value,
/// logarithmic, and smooth factors; slices must live on the segment of the
/// right-hand side. `constraints` are stacked on top of the operator rows.
#[derive(Clone)]
pub struct SIEProblem {
    pub kernels: [Option<LowRankKernel>; 4],
    /// T coefficients of the right-hand side in the segment's local variable.
    pub rhs: CoeffExpansion,
    pub constraints: Vec<(RowFunctional, C64)>,
    /// [`Basis::WT`] or [`Basis::WU`].
    pub solution_basis: Basis,
    pub measure: Measure,
}

impl SIEProblem {
    pub fn new(solution_basis: Basis, rhs: CoeffExpansion) -> Result<SIEProblem> {
        if !matches!(solution_basis, Basis::WT | Basis::WU) {
            return Err(weighted_only(solution_basis, "singular equation"));
        }
        if rhs.basis != Basis::T {
            return Err(Error::BasisMismatch(
                "right-hand side must carry T coefficients".into(),
            ));
        }
        Ok(SIEProblem {
            kernels: [None, None, None, None],
            rhs,
            constraints: Vec::new(),
            solution_basis,
            measure: Measure::default(),
        })
    }

    pub fn with_kernel(mut self, kind: WrapKind, k: LowRankKernel) -> SIEProblem {
        self.kernels[kind.index()] = Some(k);
        self
    }

    pub fn with_constraint(mut self, f: RowFunctional, c: C64) -> SIEProblem {
        self.constraints.push((f, c));
        self
    }

    pub fn with_measure(mut self, measure: Measure) -> SIEProblem {
        self.measure = measure;
        self
    }

    fn kernel(&self, kind: WrapKind) -> Option<&LowRankKernel> {
        self.kernels[kind.index()].as_ref()
    }
}

/// Conversion chain from an operator's range up to the common range of the
/// assembled system (`C(2)` for WT, `C(1)` for WU).
fn lift(from: Basis, basis: Basis) -> Result<Option<BandedOperator>> {
    let target = match basis {
        Basis::WT => 2,
        Basis::WU => 1,
        other => return Err(weighted_only(other, "assembly")),
    };
    let start = match from {
        Basis::T => 0,
        Basis::Ultra(l) => l,
        other => return Err(weighted_only(other, "assembly")),
    };
    let mut op: Option<BandedOperator> = None;
    for l in start..target {
        let s = conversion_op(l);
        op = Some(match op {
            None => s,
            Some(prev) => s.compose(&prev)?,
        });
    }
    Ok(op)
}

fn lift_op(op: BandedOperator, basis: Basis) -> Result<BandedOperator> {
    match lift(op.range(), basis)? {
        Some(chain) => chain.compose(&op),
        None => Ok(op),
    }
}

fn lift_vec(coeffs: &[C64], from: Basis, basis: Basis) -> Result<Vec<C64>> {
    Ok(match lift(from, basis)? {
        Some(chain) => chain.apply(coeffs),
        None => coeffs.to_vec(),
    })
}

/// Reduce a singular integral equation to an almost-banded system over the
/// solution coefficients.
///
/// Every kernel-wrapped operator is lifted into the common ultraspherical
/// range and scaled by the segment chart: on a segment of half-length `h`
/// and unit phase `p`, the finite-part, principal-value, logarithmic, and
/// smooth factors pick up `p^-2/h`, `p^-1`, `h`, and `h` under the arclength
/// measure (one extra `p` each under the complex line element), and the
/// logarithmic kernel contributes rank-one `h log h` corrections through the
/// integral functional. The smooth kernel and those corrections enter as
/// low-rank tails rather than widening the band.
pub fn assemble_sie(p: &SIEProblem) -> Result<AlmostBandedSystem> {
    let basis = p.solution_basis;
    let seg = p.rhs.segment;
    if WrapKind::ALL.iter().all(|k| p.kernel(*k).is_none()) {
        return Err(Error::InvalidArgument(
            "singular equation needs at least one kernel".into(),
        ));
    }
    for kind in WrapKind::ALL {
        if let Some(k) = p.kernel(kind) {
            require_rank(k)?;
            for (a, b) in &k.terms {
                if a.segment != seg || b.segment != seg {
                    return Err(Error::InvalidArgument(
                        "kernel slices must live on the segment of the right-hand side".into(),
                    ));
                }
            }
        }
    }
    let (h, phase) = geometry(seg)?;
    let mphase = match p.measure {
        Measure::Arclength => rc(1.0),
        Measure::Complex => phase,
    };
    let ip = phase.conj();

    let mut banded: Vec<BandedOperator> = Vec::new();
    let mut tails: Vec<LowRankTerm> = Vec::new();

    if let Some(k) = p.kernel(WrapKind::Hadamard) {
        let op = kernel_wrapped_op(WrapKind::Hadamard, k, basis)?;
        banded.push(lift_op(op, basis)?.scale(mphase * ip * ip / h));
    }
    if let Some(k) = p.kernel(WrapKind::Hilbert) {
        let op = kernel_wrapped_op(WrapKind::Hilbert, k, basis)?;
        banded.push(lift_op(op, basis)?.scale(mphase * ip));
    }
    if let Some(k) = p.kernel(WrapKind::Log) {
        let op = kernel_wrapped_op(WrapKind::Log, k, basis)?;
        banded.push(lift_op(op, basis)?.scale(mphase * rc(h)));
        if h.ln() != 0.0 {
            let s = mphase * rc(h * h.ln());
            for (a, b) in &k.terms {
                let col = lift_vec(&a.coeffs, Basis::T, basis)?;
                tails.push(LowRankTerm::new(
                    col.iter().map(|v| s * v).collect(),
                    sigma_row(b, basis)?,
                ));
            }
        }
    }
    if let Some(k) = p.kernel(WrapKind::Sigma) {
        require_rank(k)?;
        let s = mphase * rc(h);
        for (a, b) in &k.terms {
            if a.basis != Basis::T {
                return Err(Error::BasisMismatch(
                    "kernel x-slices must carry T coefficients".into(),
                ));
            }
            let col = lift_vec(&a.coeffs, Basis::T, basis)?;
            tails.push(LowRankTerm::new(
                col.iter().map(|v| s * v).collect(),
                sigma_row(b, basis)?,
            ));
        }
    }

    let range = match basis {
        Basis::WT => Basis::Ultra(2),
        _ => Basis::U,
    };
    let op = if banded.is_empty() {
        // smooth-kernel-only equations: the band is empty and the whole
        // operator lives in the tails
        BandedOperator::from_rows(0, 0, basis, range, |_| OpRow::default())
    } else {
        BandedOperator::sum(&banded)?
    };
    let rhs = lift_vec(&p.rhs.coeffs, Basis::T, basis)?;
    Ok(AlmostBandedSystem {
        constraints: p.constraints.clone(),
        op,
        tails,
        rhs,
        domain: DomainTag::Single(basis, seg),
    })
}

/// Right preconditioner for log-dominant (Dirichlet-type) equations in WT:
/// `2 diag(1/log2, 1, 2, 3, ...)`. Composing the logarithmic operator of a
/// fundamental-solution kernel with it gives identity plus compact, which
/// keeps truncation condition numbers bounded.
pub fn dirichlet_preconditioner() -> BandedOperator {
    BandedOperator::diagonal(Basis::WT, Basis::WT, |n| {
        if n == 0 {
            rc(2.0 / LN_2)
        } else {
            rc(2.0 * n as f64)
        }
    })
}

/// Right preconditioner for hypersingular (Neumann-type) equations in WU:
/// `-2 diag(1, 1/2, 1/3, ...)`; the finite-part operator of a
/// fundamental-solution kernel times it is identity plus compact.
pub fn neumann_preconditioner() -> BandedOperator {
    BandedOperator::diagonal(Basis::WU, Basis::WU, |n| rc(-2.0 / (n as f64 + 1.0)))
}
