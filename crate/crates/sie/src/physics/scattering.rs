//! Boundary-integral drivers: multi-segment Dirichlet and Neumann solves,
//! scattered-field evaluation, the Faraday-cage effective-potential solve,
//! and a near-singular source scenario exercising cached refinement.
//!
//! A Dirichlet problem imposes `u = u0` on every segment and represents the
//! scattered field as minus the single-layer potential of the solved density.
//! A Neumann problem imposes `du/dn = 0` and uses the double-layer potential
//! of the hypersingular solve's density. Each block of the interlaced system
//! is preconditioned on the right so its diagonal entries are 1, which keeps
//! truncation conditioning flat as resolution grows.

use super::kernels::{laplace_kernel, Family, Incident, PDEKernel};
use crate::cheb::{adaptive_fit, Basis, CoeffExpansion, Segment};
use crate::error::{Error, Result};
use crate::fieldeval::{
    cauchy_transform, far_field_eval, layer_potential_eval, log_transform, near_zone,
    SEPARATION_RHO,
};
use crate::infqr::QrCache;
use crate::lowrank::{KernelSplitting, LowRankKernel};
use crate::opalg::{conversion_op, interlace, multiplication_op, BandedOperator, OpRow, RowFunctional};
use crate::sio::{dirichlet_preconditioner, kernel_wrapped_op, neumann_preconditioner, Measure, WrapKind};
use num_complex::Complex64 as C64;
use std::f64::consts::PI;
use std::sync::{Arc, Mutex};
use std::time::Instant;

fn rc(x: f64) -> C64 {
    C64::new(x, 0.0)
}

fn cz() -> C64 {
    C64::new(0.0, 0.0)
}

/// Boundary condition imposed on every segment of a scattering problem.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Bc {
    /// Sound-soft: the total field vanishes (or equals a constant) on the
    /// segments; solved with a single-layer density in the WT basis.
    Dirichlet,
    /// Sound-hard: the normal derivative of the total field vanishes;
    /// solved with a double-layer density in the WU basis.
    Neumann,
}

/// A scattering problem: one kernel, one boundary condition, any number of
/// disjoint straight segments, and an incident field.
///
/// `constraints` are extra functional rows stacked onto the interlaced
/// system, one functional per segment per row; plain scattering needs none.
#[derive(Clone)]
pub struct ScatteringProblem {
    pub kernel: PDEKernel,
    pub segments: Vec<Segment>,
    pub bc: Bc,
    pub incident: Incident,
    pub constraints: Vec<(Vec<RowFunctional>, C64)>,
}

impl ScatteringProblem {
    pub fn new(kernel: PDEKernel, segments: Vec<Segment>, bc: Bc, incident: Incident) -> Self {
        ScatteringProblem { kernel, segments, bc, incident, constraints: Vec::new() }
    }
}

/// Solved densities plus enough context to evaluate fields and residuals.
pub struct ScatteringSolution {
    /// One density per segment, trimmed at the solve tolerance; WT
    /// coefficients for Dirichlet, WU for Neumann.
    pub densities: Vec<CoeffExpansion>,
    /// Constant boundary value on the segments (Faraday solves); None means
    /// zero.
    pub u0: Option<C64>,
    pub total_dof: usize,
    pub tol: f64,
    pub assembly_seconds: f64,
    pub solve_seconds: f64,
    problem: ScatteringProblem,
    system: crate::opalg::AlmostBandedSystem,
    raw: Vec<C64>,
}

fn solution_basis(bc: Bc) -> Basis {
    match bc {
        Bc::Dirichlet => Basis::WT,
        Bc::Neumann => Basis::WU,
    }
}

fn common_range(bc: Bc) -> Basis {
    match bc {
        Bc::Dirichlet => Basis::T,
        Bc::Neumann => Basis::U,
    }
}

/// Right preconditioner making the block diagonal identically 1. Dirichlet
/// blocks see the log operator scaled by pi h, so the inverse diagonal scale
/// is 1/h; Neumann blocks see the finite-part operator scaled by -pi/h.
fn preconditioner_for(bc: Bc, seg: Segment) -> BandedOperator {
    match bc {
        Bc::Dirichlet => dirichlet_preconditioner().scale(rc(1.0 / seg.half_length())),
        Bc::Neumann => neumann_preconditioner().scale(rc(seg.half_length())),
    }
}

/// One additive piece of a system block, kept symbolic so rows can be
/// rebuilt chunk by chunk without holding every term's row cache at once.
enum BlockTerm {
    Wrapped { kind: WrapKind, a: CoeffExpansion, b: CoeffExpansion, scale: C64 },
    Smooth { kernel: LowRankKernel, scale: C64 },
}

fn expansion_is_zero(e: &CoeffExpansion) -> bool {
    e.coeffs.iter().all(|c| c.norm() == 0.0)
}

fn kernel_is_zero(k: &LowRankKernel) -> bool {
    k.terms.iter().all(|(a, b)| expansion_is_zero(a) || expansion_is_zero(b))
}

fn push_log_terms(terms: &mut Vec<BlockTerm>, a: &LowRankKernel, smooth: &LowRankKernel, h: f64) {
    for (ca, cb) in &a.terms {
        if !expansion_is_zero(ca) && !expansion_is_zero(cb) {
            terms.push(BlockTerm::Wrapped {
                kind: WrapKind::Log,
                a: ca.clone(),
                b: cb.clone(),
                scale: rc(PI * h),
            });
        }
    }
    // log|x - y| = log|s - t| + log h on a straight segment; the constant
    // rides on the plain integral
    if !kernel_is_zero(a) && h.ln() != 0.0 {
        terms.push(BlockTerm::Smooth { kernel: a.clone(), scale: rc(PI * h * h.ln()) });
    }
    if !kernel_is_zero(smooth) {
        terms.push(BlockTerm::Smooth { kernel: smooth.clone(), scale: rc(PI * h) });
    }
}

/// Additive terms of the block coupling densities on a source segment of
/// half-length `h` to collocation on the target segment. Cross blocks arrive
/// here with a vanishing log strength, so only their smooth term survives.
fn block_terms(split: &KernelSplitting, h: f64, bc: Bc) -> Result<Vec<BlockTerm>> {
    let mut terms = Vec::new();
    match bc {
        Bc::Dirichlet => push_log_terms(&mut terms, &split.a, &split.b, h),
        Bc::Neumann => {
            let (a_dd, b_dd) = match (&split.a_dd, &split.b_dd) {
                (Some(a), Some(b)) => (a, b),
                _ => {
                    return Err(Error::Unsupported(
                        "this kernel family has no hypersingular splitting".into(),
                    ))
                }
            };
            // -Phi'(r)/r = -A/r^2 + A_dd log r + B_dd
            for (ca, cb) in &split.a.terms {
                if !expansion_is_zero(ca) && !expansion_is_zero(cb) {
                    terms.push(BlockTerm::Wrapped {
                        kind: WrapKind::Hadamard,
                        a: ca.clone(),
                        b: cb.clone(),
                        scale: rc(-PI / h),
                    });
                }
            }
            push_log_terms(&mut terms, a_dd, b_dd, h);
        }
    }
    Ok(terms)
}

fn build_term(
    term: &BlockTerm,
    basis: Basis,
    range: Basis,
    precond: &BandedOperator,
) -> Result<BandedOperator> {
    let raw = match term {
        BlockTerm::Wrapped { kind, a, b, scale } => {
            let k = LowRankKernel {
                terms: vec![(a.clone(), b.clone())],
                pivots: vec![(0.0, 0.0)],
            };
            kernel_wrapped_op(*kind, &k, basis)?.scale(*scale)
        }
        BlockTerm::Smooth { kernel, scale } => {
            kernel_wrapped_op(WrapKind::Sigma, kernel, basis)?.scale(*scale)
        }
    };
    let lifted = if raw.range() == range {
        raw
    } else {
        match (raw.range(), range) {
            (Basis::T, Basis::Ultra(1)) => conversion_op(0).compose(&raw)?,
            (from, to) => {
                return Err(Error::BasisMismatch(format!(
                    "no lift from range {from:?} to {to:?}"
                )))
            }
        }
    };
    lifted.compose(precond)
}

/// Materialize a block as one banded operator whose rows are computed in
/// power-of-two chunks, one term alive at a time. Rebuilding a term per
/// chunk costs about one extra traversal of its composition chain but keeps
/// the transient row caches of high-rank blocks bounded.
fn materialize_block(
    terms: Vec<BlockTerm>,
    basis: Basis,
    range: Basis,
    precond: BandedOperator,
) -> Result<BandedOperator> {
    let (mut lower, mut upper) = (0usize, 0usize);
    for t in &terms {
        let op = build_term(t, basis, range, &precond)?;
        lower = lower.max(op.lower_bw());
        upper = upper.max(op.upper_bw());
    }
    let store: Mutex<Vec<OpRow>> = Mutex::new(Vec::new());
    let ctx = Arc::new((terms, precond, store));
    Ok(BandedOperator::from_rows(lower, upper, basis, range, move |i| {
        let (terms, precond, store) = (&ctx.0, &ctx.1, &ctx.2);
        let mut rows = store.lock().unwrap();
        if i >= rows.len() {
            let from = rows.len();
            let target = (i + 1).next_power_of_two().max(64);
            let mut acc: Vec<OpRow> = vec![OpRow::default(); target - from];
            for t in terms.iter() {
                let op = build_term(t, basis, range, precond)
                    .expect("term construction was validated during assembly");
                for r in from..target {
                    add_row(&mut acc[r - from], &op.row(r));
                }
            }
            rows.extend(acc);
        }
        rows[i].clone()
    }))
}

fn add_row(dst: &mut OpRow, src: &OpRow) {
    if src.vals.is_empty() {
        return;
    }
    if dst.vals.is_empty() {
        dst.start = src.start;
        dst.vals = src.vals.clone();
        return;
    }
    let start = dst.start.min(src.start);
    let end = dst.end().max(src.end());
    let mut vals = vec![cz(); end - start];
    for (k, v) in dst.vals.iter().enumerate() {
        vals[dst.start - start + k] += v;
    }
    for (k, v) in src.vals.iter().enumerate() {
        vals[src.start - start + k] += v;
    }
    dst.start = start;
    dst.vals = vals;
}

struct Assembly {
    sys: crate::opalg::AlmostBandedSystem,
    blocks: Vec<Vec<BandedOperator>>,
    rhs_blocks: Vec<Vec<C64>>,
    preconds: Vec<BandedOperator>,
    seconds: f64,
}

fn validate(problem: &ScatteringProblem) -> Result<()> {
    if problem.segments.is_empty() {
        return Err(Error::InvalidArgument(
            "a scattering problem needs at least one segment".into(),
        ));
    }
    if problem.bc == Bc::Neumann
        && matches!(problem.kernel.family, Family::GravityHelmholtz { .. })
    {
        return Err(Error::Unsupported(
            "the gravity kernel supports Dirichlet problems only".into(),
        ));
    }
    problem.incident.validate(problem.kernel.family)
}

/// Boundary data of the integral equation: Dirichlet rows collocate the
/// incident value, Neumann rows minus its normal derivative.
fn boundary_data_fn(problem: &ScatteringProblem) -> impl Fn(usize, C64) -> C64 + '_ {
    move |i, z| {
        let fam = problem.kernel.family;
        match problem.bc {
            Bc::Dirichlet => problem.incident.value(fam, z),
            Bc::Neumann => {
                let n = C64::new(0.0, 1.0) * problem.segments[i].rotation();
                -problem.incident.normal_derivative(fam, z, n)
            }
        }
    }
}

fn fit_boundary_data(
    problem: &ScatteringProblem,
    data: &dyn Fn(usize, C64) -> C64,
    i: usize,
    tol: f64,
) -> Result<Vec<C64>> {
    let seg = problem.segments[i];
    let fit = adaptive_fit(seg, |z| data(i, z), tol)?;
    match problem.bc {
        Bc::Dirichlet => Ok(fit.coeffs),
        Bc::Neumann => Ok(conversion_op(0).apply(&fit.coeffs)),
    }
}

fn assemble_with(
    problem: &ScatteringProblem,
    data: &dyn Fn(usize, C64) -> C64,
    tol: f64,
) -> Result<Assembly> {
    validate(problem)?;
    let t0 = Instant::now();
    let segs = &problem.segments;
    let d = segs.len();
    let basis = solution_basis(problem.bc);
    let range = common_range(problem.bc);
    let preconds: Vec<BandedOperator> =
        segs.iter().map(|&s| preconditioner_for(problem.bc, s)).collect();
    let mut blocks = Vec::with_capacity(d);
    for i in 0..d {
        let mut row = Vec::with_capacity(d);
        for j in 0..d {
            let split = problem.kernel.splitting(segs[i], segs[j], tol)?;
            let terms = block_terms(&split, segs[j].half_length(), problem.bc)?;
            row.push(materialize_block(terms, basis, range, preconds[j].clone())?);
        }
        blocks.push(row);
    }
    let mut rhs_blocks = Vec::with_capacity(d);
    for i in 0..d {
        rhs_blocks.push(fit_boundary_data(problem, data, i, tol)?);
    }
    let tags: Vec<(Basis, Segment)> = segs.iter().map(|&s| (basis, s)).collect();
    let sys = interlace(
        blocks.clone(),
        Vec::new(),
        problem.constraints.clone(),
        rhs_blocks.clone(),
        tags,
    )?;
    Ok(Assembly { sys, blocks, rhs_blocks, preconds, seconds: t0.elapsed().as_secs_f64() })
}

/// Undo the interlacing and the right preconditioner, trim, and wrap up.
fn package(
    problem: &ScatteringProblem,
    preconds: &[BandedOperator],
    system: crate::opalg::AlmostBandedSystem,
    raw: Vec<C64>,
    tol: f64,
    assembly_seconds: f64,
    solve_seconds: f64,
) -> ScatteringSolution {
    let d = problem.segments.len();
    let basis = solution_basis(problem.bc);
    let mut densities = Vec::with_capacity(d);
    for j in 0..d {
        let vj: Vec<C64> = raw[j..].iter().step_by(d).copied().collect();
        let mut e = CoeffExpansion::new(basis, problem.segments[j], preconds[j].apply(&vj));
        e.trim(tol);
        densities.push(e);
    }
    let total_dof = densities.iter().map(|e| e.len()).sum();
    ScatteringSolution {
        densities,
        u0: None,
        total_dof,
        tol,
        assembly_seconds,
        solve_seconds,
        problem: problem.clone(),
        system,
        raw,
    }
}

/// Solve a scattering problem to the given tolerance.
pub fn solve_scattering(problem: &ScatteringProblem, tol: f64) -> Result<ScatteringSolution> {
    solve_with_data(problem, &boundary_data_fn(problem), tol)
}

/// Solve with explicit right-hand-side data in place of the incident field;
/// `data(i, z)` is the equation's right-hand side at `z` on segment `i`.
pub(crate) fn solve_with_data(
    problem: &ScatteringProblem,
    data: &dyn Fn(usize, C64) -> C64,
    tol: f64,
) -> Result<ScatteringSolution> {
    let assembly = assemble_with(problem, data, tol)?;
    let t0 = Instant::now();
    let mut cache = QrCache::build(&assembly.sys, tol)?;
    let raw = cache.solve_raw(&assembly.sys, tol)?;
    let solve_seconds = t0.elapsed().as_secs_f64();
    Ok(package(problem, &assembly.preconds, assembly.sys, raw, tol, assembly.seconds, solve_seconds))
}

fn check_points() -> impl Iterator<Item = f64> {
    // offset keeps the samples away from collocation-adjacent extrema
    (0..20).map(|m| ((m as f64 + 0.37) * PI / 20.0).cos())
}

impl ScatteringSolution {
    pub fn problem(&self) -> &ScatteringProblem {
        &self.problem
    }

    pub fn per_segment_dof(&self) -> Vec<usize> {
        self.densities.iter().map(|e| e.len()).collect()
    }

    /// Scattered field at the targets. Dirichlet solutions evaluate minus
    /// the single-layer potential and are continuous up to the segments;
    /// Neumann solutions evaluate the double-layer potential, which jumps
    /// across a segment, so on-segment targets are rejected.
    pub fn scattered_field(&self, targets: &[C64]) -> Result<Vec<C64>> {
        let mut out = vec![cz(); targets.len()];
        match self.problem.bc {
            Bc::Dirichlet => {
                for (j, dens) in self.densities.iter().enumerate() {
                    let seg = self.problem.segments[j];
                    let split = self.problem.kernel.splitting(seg, seg, self.tol)?;
                    let phi = |x: C64, y: C64| self.problem.kernel.phi(x, y);
                    let vals = layer_potential_eval(phi, &split, dens, targets)?;
                    for (o, v) in out.iter_mut().zip(vals) {
                        *o -= v;
                    }
                }
            }
            Bc::Neumann => {
                for (j, dens) in self.densities.iter().enumerate() {
                    let seg = self.problem.segments[j];
                    let n = C64::new(0.0, 1.0) * seg.rotation();
                    let dp = self
                        .problem
                        .kernel
                        .dphi_dny
                        .clone()
                        .ok_or_else(|| Error::Unsupported(
                            "this kernel family has no double-layer potential".into(),
                        ))?;
                    let mut far_at = Vec::new();
                    let mut far_pts = Vec::new();
                    for (m, &z) in targets.iter().enumerate() {
                        if near_zone(seg, z, SEPARATION_RHO) {
                            out[m] += self.near_dipole(j, z)?;
                        } else {
                            far_at.push(m);
                            far_pts.push(z);
                        }
                    }
                    let vals = far_field_eval(|x, y| dp(x, y, n), dens, &far_pts)?;
                    for (m, v) in far_at.into_iter().zip(vals) {
                        out[m] += v;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Incident plus scattered field.
    pub fn total_field(&self, targets: &[C64]) -> Result<Vec<C64>> {
        let fam = self.problem.kernel.family;
        let s = self.scattered_field(targets)?;
        Ok(targets
            .iter()
            .zip(s)
            .map(|(&z, v)| self.problem.incident.value(fam, z) + v)
            .collect())
    }

    /// Double-layer potential of one segment's density at a point close to
    /// (but not on) that segment. The dipole kernel splits as
    /// `dPhi/dn_y = -A Re[n/(z - y)] + A_n log r + B_n` with entire slices,
    /// so each piece reduces to a Cauchy or log transform of a coefficient
    /// product.
    fn near_dipole(&self, j: usize, z: C64) -> Result<C64> {
        let dens = &self.densities[j];
        let seg = dens.segment;
        let n = C64::new(0.0, 1.0) * seg.rotation();
        let kern = &self.problem.kernel;
        let (an, bn) = match (kern.a_normal.clone(), kern.b_normal.clone()) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::Unsupported(
                    "this kernel family has no double-layer potential".into(),
                ))
            }
        };
        let riemann = |y: C64| -kern.riemann(z, y) / (2.0 * PI);
        let a_slice = adaptive_fit(seg, riemann, self.tol)?;
        let an_slice = adaptive_fit(seg, |y| an(z, y, n), self.tol)?;
        let bn_slice = adaptive_fit(seg, |y| bn(z, y, n), self.tol)?;
        let product = |slice: &CoeffExpansion| -> Result<CoeffExpansion> {
            Ok(CoeffExpansion::new(
                dens.basis,
                seg,
                multiplication_op(slice, 1)?.apply(&dens.coeffs),
            ))
        };
        let p = product(&a_slice)?;
        let i1 = cauchy_transform(&p, z, Measure::Arclength)? * C64::new(0.0, -2.0 * PI);
        let pc = CoeffExpansion::new(p.basis, seg, p.coeffs.iter().map(|c| c.conj()).collect());
        let i1c = cauchy_transform(&pc, z, Measure::Arclength)? * C64::new(0.0, -2.0 * PI);
        let dipole = -(n * i1 + (n * i1c).conj()) * rc(0.5);
        let pn = product(&an_slice)?;
        let logpart = log_transform(&pn, z)? * rc(PI);
        let qn = product(&bn_slice)?;
        let mass = qn.coeffs.first().copied().unwrap_or_default() * rc(0.5);
        Ok(dipole + logpart + mass * rc(PI * seg.half_length()))
    }

    /// Worst boundary mismatch over 20 off-node points per segment, relative
    /// to the boundary data scale. Dirichlet solutions compare fields;
    /// Neumann solutions compare the equation's two sides coefficientwise
    /// (the double-layer potential has no on-segment values to compare).
    pub fn bc_residual(&self) -> Result<f64> {
        match self.problem.bc {
            Bc::Dirichlet => {
                let (worst, scale) = self.dirichlet_mismatch()?;
                Ok(worst / scale.max(f64::MIN_POSITIVE))
            }
            Bc::Neumann => self.neumann_residual(),
        }
    }

    /// Absolute worst of `|u_inc + u_scat - u0|` on the segments, and the
    /// data scale it would be normalized by.
    fn dirichlet_mismatch(&self) -> Result<(f64, f64)> {
        let fam = self.problem.kernel.family;
        let u0 = self.u0.unwrap_or_default();
        let mut pts = Vec::new();
        for &seg in &self.problem.segments {
            for t in check_points() {
                pts.push(seg.map(rc(t)));
            }
        }
        let us = self.scattered_field(&pts)?;
        let mut worst = 0.0f64;
        let mut scale = u0.norm();
        for (&z, v) in pts.iter().zip(us) {
            let ui = self.problem.incident.value(fam, z);
            worst = worst.max((ui + v - u0).norm());
            scale = scale.max(ui.norm());
        }
        Ok((worst, scale))
    }

    fn neumann_residual(&self) -> Result<f64> {
        let d = self.problem.segments.len();
        let w = self.system.op.apply(&self.raw);
        let n = w.len().max(self.system.rhs.len());
        let mut worst = 0.0f64;
        let mut scale = 0.0f64;
        for (i, &seg) in self.problem.segments.iter().enumerate() {
            let len = (n + d - 1 - i) / d;
            let strand = |src: &[C64]| -> Vec<C64> {
                (0..len)
                    .map(|m| src.get(i + d * m).copied().unwrap_or_default())
                    .collect()
            };
            let rhs = strand(&self.system.rhs);
            let got = strand(&w);
            let diff: Vec<C64> = rhs.iter().zip(&got).map(|(a, b)| a - b).collect();
            let res = CoeffExpansion::new(Basis::U, seg, diff);
            let dat = CoeffExpansion::new(Basis::U, seg, rhs);
            for t in check_points() {
                worst = worst.max(res.eval_local(rc(t))?.norm());
                scale = scale.max(dat.eval_local(rc(t))?.norm());
            }
        }
        Ok(worst / scale.max(f64::MIN_POSITIVE))
    }
}

/// Result of a Faraday-cage solve: the plates float to the potential `u0`
/// that lets a total charge of zero shield the cage interior.
pub struct FaradayReport {
    pub solution: ScatteringSolution,
    /// Effective potential of the floating plates.
    pub u0: C64,
    /// Worst absolute boundary mismatch `|u_inc + u_scat - u0|` off-node.
    pub forward_error: f64,
    /// Total charge of the corrected density; zero in exact arithmetic.
    pub charge_residual: f64,
}

/// Total charge carried by WT densities: the weighted mass of each segment
/// is pi h times its leading coefficient.
fn total_charge(densities: &[CoeffExpansion]) -> C64 {
    densities
        .iter()
        .map(|e| rc(PI * e.segment.half_length()) * e.coeffs.first().copied().unwrap_or_default())
        .sum()
}

/// Solve the Laplace Dirichlet problem on floating plates driven by a unit
/// point source: the plates share an unknown constant potential fixed by
/// requiring zero total induced charge. Superposes the solve for the source
/// data and the solve for unit data on one factorization.
pub fn solve_faraday(plates: &[Segment], source: C64, tol: f64) -> Result<FaradayReport> {
    let problem = ScatteringProblem::new(
        laplace_kernel(),
        plates.to_vec(),
        Bc::Dirichlet,
        Incident::PointSource { at: source, strength: rc(1.0) },
    );
    let d = plates.len();
    let assembly = assemble_with(&problem, &boundary_data_fn(&problem), tol)?;
    let tags: Vec<(Basis, Segment)> = plates.iter().map(|&s| (Basis::WT, s)).collect();
    let ones: Vec<Vec<C64>> = (0..d).map(|_| vec![rc(1.0)]).collect();
    let sys_unit = interlace(
        assembly.blocks.clone(),
        Vec::new(),
        problem.constraints.clone(),
        ones.clone(),
        tags.clone(),
    )?;
    let t0 = Instant::now();
    let mut cache = QrCache::build(&assembly.sys, tol)?;
    let x_src = cache.solve_raw(&assembly.sys, tol)?;
    let x_unit = cache.solve_raw(&sys_unit, tol)?;
    let solve_seconds = t0.elapsed().as_secs_f64();

    let to_densities = |raw: &[C64]| -> Vec<CoeffExpansion> {
        (0..d)
            .map(|j| {
                let vj: Vec<C64> = raw[j..].iter().step_by(d).copied().collect();
                let mut e =
                    CoeffExpansion::new(Basis::WT, plates[j], assembly.preconds[j].apply(&vj));
                e.trim(tol);
                e
            })
            .collect()
    };
    let q_src = total_charge(&to_densities(&x_src));
    let q_unit = total_charge(&to_densities(&x_unit));
    if q_unit.norm() == 0.0 {
        return Err(Error::SingularSystem { column: 0 });
    }
    let u0 = q_src / q_unit;

    // corrected density: the source solve minus u0 times the unit solve
    let len = x_src.len().max(x_unit.len());
    let at = |v: &[C64], g: usize| v.get(g).copied().unwrap_or_default();
    let x_rho: Vec<C64> = (0..len).map(|g| at(&x_src, g) - u0 * at(&x_unit, g)).collect();
    let rho_rhs: Vec<Vec<C64>> = (0..d)
        .map(|i| {
            let src = &assembly.rhs_blocks[i];
            let m = src.len().max(1);
            (0..m).map(|g| at(src, g) - u0 * at(&ones[i], g)).collect()
        })
        .collect();
    let sys_rho = interlace(
        assembly.blocks.clone(),
        Vec::new(),
        problem.constraints.clone(),
        rho_rhs,
        tags,
    )?;
    let mut solution =
        package(&problem, &assembly.preconds, sys_rho, x_rho, tol, assembly.seconds, solve_seconds);
    solution.u0 = Some(u0);
    let charge_residual = total_charge(&solution.densities).norm();
    let (forward_error, _) = solution.dirichlet_mismatch()?;
    Ok(FaradayReport { solution, u0, forward_error, charge_residual })
}

/// Orientation of Faraday-cage plates on the unit circle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlateOrientation {
    /// Radial plates, perpendicular to the circle.
    Normal,
    /// Chordal plates, along the circle.
    Tangential,
}

/// `n` plates of half-length `2r` centered at the `n`-th roots of unity.
pub fn faraday_plates(n: usize, r: f64, orientation: PlateOrientation) -> Result<Vec<Segment>> {
    if n == 0 || !(r > 0.0) || r >= 0.5 {
        return Err(Error::InvalidArgument(format!(
            "plate layout needs n >= 1 and 0 < r < 1/2, got n={n}, r={r}"
        )));
    }
    (0..n)
        .map(|k| {
            let c = C64::from_polar(1.0, 2.0 * PI * k as f64 / n as f64);
            let dir = match orientation {
                PlateOrientation::Normal => c,
                PlateOrientation::Tangential => C64::new(0.0, 1.0) * c,
            };
            Segment::new(c - dir * rc(2.0 * r), c + dir * rc(2.0 * r))
        })
        .collect()
}

/// One run of the near-singular source scenario.
pub struct NearSingularRun {
    pub solution: ScatteringSolution,
    /// Median wall time of a fresh factor-and-solve.
    pub fresh_seconds: f64,
    /// Median wall time of a replay on the kept factorization.
    pub cached_seconds: f64,
    /// Largest per-segment degree the solve settled at.
    pub degree: usize,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).expect("wall times are finite"));
    xs[xs.len() / 2]
}

/// Helmholtz Dirichlet solve on the unit segment driven by point sources on
/// the Bernstein ellipse of parameter `rho`: source `m` of `n` sits at the
/// Joukowsky image of `rho exp(i pi (m+1)/(n+1))`. The closer `rho` is to 1,
/// the steeper the boundary data and the higher the resolved degree. Runs
/// five fresh factorizations and five cached replays and reports medians.
pub fn near_singular_scenario(
    k: f64,
    rho: f64,
    n_sources: usize,
    charges: &[f64],
) -> Result<NearSingularRun> {
    if n_sources == 0 || charges.len() != n_sources {
        return Err(Error::InvalidArgument(format!(
            "need one charge per source, got {} sources and {} charges",
            n_sources,
            charges.len()
        )));
    }
    if !(rho > 1.0) {
        return Err(Error::InvalidArgument(format!(
            "sources must sit strictly outside the segment: rho > 1, got {rho}"
        )));
    }
    let tol = 1e-12;
    let seg = Segment::new(rc(-1.0), rc(1.0))?;
    let sources: Vec<(C64, C64)> = (0..n_sources)
        .map(|m| {
            let w = C64::from_polar(rho, PI * (m as f64 + 1.0) / (n_sources as f64 + 1.0));
            ((w + rc(1.0) / w) * rc(0.5), rc(charges[m]))
        })
        .collect();
    let problem = ScatteringProblem::new(
        super::kernels::helmholtz_kernel(k)?,
        vec![seg],
        Bc::Dirichlet,
        Incident::PointSources(sources),
    );
    let assembly = assemble_with(&problem, &boundary_data_fn(&problem), tol)?;
    let mut fresh = Vec::new();
    let mut kept = None;
    for _ in 0..5 {
        let t0 = Instant::now();
        let mut cache = QrCache::build(&assembly.sys, tol)?;
        let raw = cache.solve_raw(&assembly.sys, tol)?;
        fresh.push(t0.elapsed().as_secs_f64());
        kept = Some((cache, raw));
    }
    let (cache, raw) = kept.expect("five timing runs completed");
    let mut cached = Vec::new();
    for _ in 0..5 {
        let t0 = Instant::now();
        cache.solve_shared(&assembly.sys, tol)?;
        cached.push(t0.elapsed().as_secs_f64());
    }
    let fresh_seconds = median(fresh);
    let cached_seconds = median(cached);
    let solution =
        package(&problem, &assembly.preconds, assembly.sys, raw, tol, assembly.seconds, fresh_seconds);
    let degree = solution.densities.iter().map(|e| e.len()).max().unwrap_or(0);
    Ok(NearSingularRun { solution, fresh_seconds, cached_seconds, degree })
}

#[cfg(test)]
mod tests {
    use super::super::kernels::{gravity_kernel, helmholtz_kernel};
    use super::*;
    use crate::opalg::DomainTag;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn seg(a: C64, b: C64) -> Segment {
        Segment::new(a, b).unwrap()
    }

    #[test]
    fn unit_interval_log_equation_has_polynomial_solution() {
        // int (-1/2pi) log|x-y| T2(y)/sqrt(1-y^2) dy = (1/4) T2(x) on
        // [-1, 1], so the equation with data T2 is solved by 4 wT T2
        let problem = ScatteringProblem::new(
            laplace_kernel(),
            vec![seg(c(-1.0, 0.0), c(1.0, 0.0))],
            Bc::Dirichlet,
            Incident::PointSource { at: c(5.0, 5.0), strength: rc(1.0) },
        );
        let data = |_: usize, z: C64| {
            let t = z.re;
            rc(2.0 * t * t - 1.0)
        };
        let sol = solve_with_data(&problem, &data, 1e-12).unwrap();
        let dens = &sol.densities[0];
        assert_eq!(dens.basis, Basis::WT);
        assert!(
            (dens.coeffs[2] - rc(4.0)).norm() < 1e-9,
            "coeffs: {:?}",
            dens.coeffs
        );
        assert!(dens.coeffs[0].norm() < 1e-10);
        assert!(dens.coeffs[1].norm() < 1e-10);
        for tail in dens.coeffs.iter().skip(3) {
            assert!(tail.norm() < 1e-9);
        }
    }

    #[test]
    fn materialized_block_matches_direct_term_sum() {
        let k = 3.0;
        let kern = helmholtz_kernel(k).unwrap();
        let s = seg(c(-0.4, 0.2), c(0.8, 0.9));
        for bc in [Bc::Dirichlet, Bc::Neumann] {
            let split = kern.splitting(s, s, 1e-10).unwrap();
            let basis = solution_basis(bc);
            let range = common_range(bc);
            let pre = preconditioner_for(bc, s);
            let terms = block_terms(&split, s.half_length(), bc).unwrap();
            let ops: Vec<BandedOperator> = terms
                .iter()
                .map(|t| build_term(t, basis, range, &pre).unwrap())
                .collect();
            let direct = BandedOperator::sum(&ops).unwrap();
            let block =
                materialize_block(terms, basis, range, pre).unwrap();
            let a = direct.dense_section(70, 70);
            let b = block.dense_section(70, 70);
            let mut worst = 0.0f64;
            let mut scale = 0.0f64;
            for (va, vb) in a.iter().zip(b.iter()) {
                worst = worst.max((va - vb).norm());
                scale = scale.max(va.norm());
            }
            assert!(worst < 1e-13 * scale, "{bc:?}: {worst} vs scale {scale}");
        }
    }

    #[test]
    fn preconditioned_diagonal_is_one() {
        for (bc, fam_seg) in [
            (Bc::Dirichlet, seg(c(-0.3, 0.1), c(0.9, 0.7))),
            (Bc::Neumann, seg(c(-0.3, 0.1), c(0.9, 0.7))),
        ] {
            let kern = laplace_kernel();
            let split = kern.splitting(fam_seg, fam_seg, 1e-12).unwrap();
            let terms = block_terms(&split, fam_seg.half_length(), bc).unwrap();
            let block = materialize_block(
                terms,
                solution_basis(bc),
                common_range(bc),
                preconditioner_for(bc, fam_seg),
            )
            .unwrap();
            let start = if bc == Bc::Dirichlet { 1 } else { 0 };
            // Dirichlet row 0 also carries the log h capacity shift
            for i in start..40 {
                assert!(
                    (block.entry(i, i) - rc(1.0)).norm() < 1e-13,
                    "{bc:?} row {i}: {}",
                    block.entry(i, i)
                );
            }
        }
    }

    #[test]
    fn two_segment_dirichlet_scattering_satisfies_the_boundary_condition() {
        let k = 5.0;
        let problem = ScatteringProblem::new(
            helmholtz_kernel(k).unwrap(),
            vec![
                seg(c(-1.2, -0.3), c(-0.2, 0.4)),
                seg(c(0.3, -0.5), c(1.1, 0.2)),
            ],
            Bc::Dirichlet,
            Incident::PlaneWave { dir: c(0.8, 0.6) },
        );
        let sol = solve_scattering(&problem, 1e-10).unwrap();
        assert!(sol.total_dof > 10);
        let r = sol.bc_residual().unwrap();
        assert!(r < 1e-8, "bc residual {r}");
        // scattered field smoke: finite away from the segments, satisfies
        // the pde to stencil accuracy
        let z0 = c(1.8, 1.4);
        let h = 1e-3;
        let pts = [z0, z0 + rc(h), z0 - rc(h), z0 + c(0.0, h), z0 - c(0.0, h)];
        let u = sol.scattered_field(&pts).unwrap();
        let lap = (u[1] + u[2] + u[3] + u[4] - rc(4.0) * u[0]) / rc(h * h);
        let res = (lap + rc(k * k) * u[0]).norm() / (k * k * u[0].norm());
        assert!(res < 1e-2, "pde residual {res}");
    }

    #[test]
    fn neumann_solve_satisfies_the_operator_equation() {
        let k = 4.0;
        let problem = ScatteringProblem::new(
            helmholtz_kernel(k).unwrap(),
            vec![seg(c(-0.9, 0.1), c(0.8, 0.3))],
            Bc::Neumann,
            Incident::PlaneWave { dir: c(0.0, -1.0) },
        );
        let sol = solve_scattering(&problem, 1e-10).unwrap();
        let r = sol.bc_residual().unwrap();
        assert!(r < 1e-8, "operator residual {r}");
        assert_eq!(sol.densities[0].basis, Basis::WU);
    }

    #[test]
    fn near_and_far_dipole_evaluations_agree() {
        let k = 4.0;
        let problem = ScatteringProblem::new(
            helmholtz_kernel(k).unwrap(),
            vec![seg(c(-1.0, 0.0), c(1.0, 0.0))],
            Bc::Neumann,
            Incident::PlaneWave { dir: c(0.6, 0.8) },
        );
        let sol = solve_scattering(&problem, 1e-10).unwrap();
        let seg0 = sol.problem().segments[0];
        // ring just outside the near-zone boundary: both schemes are valid
        for arg in [0.3, 1.2, 2.0, 4.4] {
            let w = C64::from_polar(1.28, arg);
            let z = (w + rc(1.0) / w) * rc(0.5);
            assert!(!near_zone(seg0, z, SEPARATION_RHO));
            let near = sol.near_dipole(0, z).unwrap();
            let far = far_field_eval(
                |x, y| {
                    let n = C64::new(0.0, 1.0) * seg0.rotation();
                    (sol.problem().kernel.dphi_dny.clone().unwrap())(x, y, n)
                },
                &sol.densities[0],
                &[z],
            )
            .unwrap()[0];
            assert!(
                (near - far).norm() <= 1e-9 * far.norm().max(1e-3),
                "arg {arg}: near {near} far {far}"
            );
        }
    }

    #[test]
    fn faraday_cage_floats_to_a_shielding_potential() {
        let plates = faraday_plates(10, 0.1, PlateOrientation::Normal).unwrap();
        let report = solve_faraday(&plates, c(2.0, 1.0), 1e-12).unwrap();
        assert!(report.forward_error < 1e-12, "forward error {}", report.forward_error);
        assert!(report.charge_residual < 1e-12, "charge residual {}", report.charge_residual);
        assert_eq!(report.solution.u0, Some(report.u0));
        // a distant source sees the cage as a point: u0 tends to the
        // incident value at the origin
        let far = solve_faraday(&plates, c(1e6, 0.0), 1e-10).unwrap();
        assert!(
            (far.u0 - rc((1e6f64).ln())).norm() < 1e-3,
            "far-source u0 {}",
            far.u0
        );
    }

    #[test]
    fn plate_layouts_sit_on_the_unit_circle() {
        let n = faraday_plates(8, 0.05, PlateOrientation::Normal).unwrap();
        let t = faraday_plates(8, 0.05, PlateOrientation::Tangential).unwrap();
        for (sn, st) in n.iter().zip(&t) {
            let cn = (sn.a + sn.b) * rc(0.5);
            let ct = (st.a + st.b) * rc(0.5);
            assert!((cn.norm() - 1.0).abs() < 1e-12);
            assert!((ct.norm() - 1.0).abs() < 1e-12);
            assert!((sn.half_length() - 0.1).abs() < 1e-12);
            // normal plates point along their center ray, tangential across
            assert!((sn.rotation() - cn).norm() < 1e-12);
            assert!((st.rotation().im * ct.re - st.rotation().re * ct.im).abs() > 0.9);
        }
        assert!(faraday_plates(0, 0.1, PlateOrientation::Normal).is_err());
        assert!(faraday_plates(4, 0.0, PlateOrientation::Normal).is_err());
    }

    #[test]
    fn near_singular_sources_resolve_and_replay_from_cache() {
        let run = near_singular_scenario(10.0, 2.0, 2, &[1.0, -0.7]).unwrap();
        assert!(run.degree <= 200, "degree {}", run.degree);
        assert!(run.fresh_seconds > 0.0 && run.cached_seconds > 0.0);
        let r = run.solution.bc_residual().unwrap();
        assert!(r < 1e-9, "bc residual {r}");
        assert!(near_singular_scenario(10.0, 2.0, 2, &[1.0]).is_err());
        assert!(near_singular_scenario(10.0, 0.9, 1, &[1.0]).is_err());
    }

    #[test]
    fn gravity_screen_reflects_a_point_source() {
        let e = 20.0;
        let problem = ScatteringProblem::new(
            gravity_kernel(e).unwrap(),
            vec![seg(c(-2.0, 5.0), c(2.0, 5.0))],
            Bc::Dirichlet,
            Incident::PointSource { at: c(0.0, -5.0), strength: rc(1.0) },
        );
        let sol = solve_scattering(&problem, 1e-9).unwrap();
        assert!(sol.total_dof < 80, "dof {}", sol.total_dof);
        let r = sol.bc_residual().unwrap();
        assert!(r < 1e-6, "bc residual {r}");
    }

    #[test]
    fn unsupported_combinations_are_rejected() {
        let gravity_neumann = ScatteringProblem::new(
            gravity_kernel(5.0).unwrap(),
            vec![seg(c(-1.0, 1.0), c(1.0, 1.0))],
            Bc::Neumann,
            Incident::PointSource { at: c(0.0, -1.0), strength: rc(1.0) },
        );
        assert!(matches!(
            solve_scattering(&gravity_neumann, 1e-8),
            Err(Error::Unsupported(_))
        ));
        let laplace_plane = ScatteringProblem::new(
            laplace_kernel(),
            vec![seg(c(-1.0, 0.0), c(1.0, 0.0))],
            Bc::Dirichlet,
            Incident::PlaneWave { dir: c(1.0, 0.0) },
        );
        assert!(solve_scattering(&laplace_plane, 1e-8).is_err());
        let empty = ScatteringProblem::new(
            laplace_kernel(),
            Vec::new(),
            Bc::Dirichlet,
            Incident::PointSource { at: c(0.0, 1.0), strength: rc(1.0) },
        );
        assert!(matches!(solve_scattering(&empty, 1e-8), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn interlaced_system_carries_the_solution_domain() {
        let problem = ScatteringProblem::new(
            laplace_kernel(),
            vec![
                seg(c(-2.0, 0.0), c(-0.5, 0.0)),
                seg(c(0.5, 0.0), c(2.0, 0.0)),
            ],
            Bc::Dirichlet,
            Incident::PointSource { at: c(0.0, 2.0), strength: rc(1.0) },
        );
        let assembly = assemble_with(&problem, &boundary_data_fn(&problem), 1e-10).unwrap();
        match &assembly.sys.domain {
            DomainTag::Interlaced(tags) => {
                assert_eq!(tags.len(), 2);
                assert!(tags.iter().all(|(b, _)| *b == Basis::WT));
            }
            other => panic!("expected interlaced domain, got {other:?}"),
        }
        let sol = solve_scattering(&problem, 1e-10).unwrap();
        assert!(sol.bc_residual().unwrap() < 1e-8);
    }
}
