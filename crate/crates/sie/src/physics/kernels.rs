//! Fundamental-solution kernels for the supported PDE families, with cached
//! log/smooth splittings per segment pair.
//!
//! Each kernel carries closures for the fundamental solution `Phi`, the
//! Riemann function fixing the log strength (`A = -R/(2 pi)`), and the
//! normal-derivative slices a hypersingular (Neumann) solve needs. Splittings
//! are fitted once per `(target segment, source segment, tolerance)` triple
//! and shared behind an `Arc`, so repeated assemblies and field evaluations
//! reuse the Gaussian-elimination fits.

use super::gravity::{gravity_fundamental, gravity_riemann_series};
use super::special::{bessel_j0, bessel_j1, hankel1_0, hankel1_1};
use crate::cheb::{Basis, CoeffExpansion, Segment};
use crate::error::{Error, Result};
use crate::lowrank::{extract_splitting, ge_lowrank_on, KernelSplitting, LowRankKernel};
use num_complex::Complex64 as C64;
use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, Mutex};

const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

/// Truncation order for the gravity Riemann-function series; generous for
/// every segment pair within the fundamental solution's contour scope.
const GRAVITY_SERIES_ORDER: usize = 200;

fn rc(x: f64) -> C64 {
    C64::new(x, 0.0)
}

fn cnan() -> C64 {
    C64::new(f64::NAN, f64::NAN)
}

fn dot(a: C64, b: C64) -> f64 {
    (a.conj() * b).re
}

/// PDE family of a kernel. The Helmholtz wavenumber and the gravity spectral
/// parameter are carried by value so kernels stay `Copy`-cheap to inspect.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Family {
    Laplace,
    Helmholtz { k: f64 },
    GravityHelmholtz { e: f64 },
}

type PointFn = Arc<dyn Fn(C64, C64) -> C64 + Send + Sync>;
type NormalFn = Arc<dyn Fn(C64, C64, C64) -> C64 + Send + Sync>;
type PairKey = [u64; 9];

/// A PDE kernel: fundamental solution plus everything the boundary-integral
/// assembly derives from it.
///
/// Evaluators are total: point pairs outside a kernel's validity scope (only
/// the gravity family has one) evaluate to NaN rather than erroring, so grid
/// sweeps degrade per point instead of aborting.
#[derive(Clone)]
pub struct PDEKernel {
    pub family: Family,
    pub(crate) phi: PointFn,
    pub(crate) riemann: PointFn,
    /// `d Phi / d n_y (z, y, n_y)`; None when the family has no hypersingular
    /// calculus.
    pub(crate) dphi_dny: Option<NormalFn>,
    /// `d A / d n_y`, entire across the diagonal.
    pub(crate) a_normal: Option<NormalFn>,
    /// `d B / d n_y`, entire across the diagonal.
    pub(crate) b_normal: Option<NormalFn>,
    splittings: Arc<Mutex<HashMap<PairKey, Arc<KernelSplitting>>>>,
}

impl std::fmt::Debug for PDEKernel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PDEKernel").field("family", &self.family).finish()
    }
}

fn pair_key(segx: Segment, segy: Segment, tol: f64) -> PairKey {
    [
        segx.a.re.to_bits(),
        segx.a.im.to_bits(),
        segx.b.re.to_bits(),
        segx.b.im.to_bits(),
        segy.a.re.to_bits(),
        segy.a.im.to_bits(),
        segy.b.re.to_bits(),
        segy.b.im.to_bits(),
        tol.to_bits(),
    ]
}

fn constant_kernel(segx: Segment, segy: Segment, value: C64) -> LowRankKernel {
    LowRankKernel {
        terms: vec![(
            CoeffExpansion::new(Basis::T, segx, vec![value]),
            CoeffExpansion::new(Basis::T, segy, vec![rc(1.0)]),
        )],
        pivots: vec![(0.0, 0.0)],
    }
}

impl PDEKernel {
    pub fn phi(&self, x: C64, y: C64) -> C64 {
        (self.phi)(x, y)
    }

    pub fn riemann(&self, x: C64, y: C64) -> C64 {
        (self.riemann)(x, y)
    }

    /// Splitting `Phi = A log|x - y| + B` for a pair of segments, with the
    /// hypersingular slices attached when the family supports them. Self
    /// pairs split around the diagonal singularity; separated pairs put the
    /// whole (smooth) kernel into B.
    pub fn splitting(&self, segx: Segment, segy: Segment, tol: f64) -> Result<Arc<KernelSplitting>> {
        let key = pair_key(segx, segy, tol);
        if let Some(s) = self.splittings.lock().unwrap().get(&key) {
            return Ok(s.clone());
        }
        let built = Arc::new(self.build_splitting(segx, segy, tol)?);
        self.splittings
            .lock()
            .unwrap()
            .insert(key, built.clone());
        Ok(built)
    }

    fn build_splitting(&self, segx: Segment, segy: Segment, tol: f64) -> Result<KernelSplitting> {
        if segx == segy {
            return self.self_splitting(segx, tol);
        }
        let phi = self.phi.clone();
        let b = ge_lowrank_on(move |x, y| phi(x, y), segx, segy, tol)?;
        let (a_dd, b_dd) = match self.family {
            Family::GravityHelmholtz { .. } => (None, None),
            _ => {
                let nx = C64::new(0.0, 1.0) * segx.rotation();
                let ny = C64::new(0.0, 1.0) * segy.rotation();
                let dd = self.cross_dd();
                let fit = ge_lowrank_on(move |x, y| dd(x, y, nx, ny), segx, segy, tol)?;
                (
                    Some(LowRankKernel::zero(segx, segy)),
                    Some(fit),
                )
            }
        };
        Ok(KernelSplitting {
            a: LowRankKernel::zero(segx, segy),
            b,
            a_dd,
            b_dd,
            diagonal_value: C64::new(0.0, 0.0),
        })
    }

    fn self_splitting(&self, seg: Segment, tol: f64) -> Result<KernelSplitting> {
        match self.family {
            Family::Laplace => Ok(KernelSplitting {
                a: constant_kernel(seg, seg, rc(-0.5 / PI)),
                b: LowRankKernel::zero(seg, seg),
                a_dd: Some(LowRankKernel::zero(seg, seg)),
                b_dd: Some(LowRankKernel::zero(seg, seg)),
                diagonal_value: rc(-0.5 / PI),
            }),
            Family::Helmholtz { k } => {
                let phi = self.phi.clone();
                let riemann = self.riemann.clone();
                let mut s = extract_splitting(
                    move |x, y| phi(x, y),
                    move |x, y| riemann(x, y),
                    seg,
                    seg,
                    tol,
                )?;
                s.a_dd = Some(ge_lowrank_on(
                    move |x, y| rc(-(k * k) / (2.0 * PI) * j1_over_z(k * (x - y).norm())),
                    seg,
                    seg,
                    tol,
                )?);
                s.b_dd = Some(ge_lowrank_on(
                    move |x, y| helmholtz_b_dd(k, (x - y).norm()),
                    seg,
                    seg,
                    tol,
                )?);
                Ok(s)
            }
            Family::GravityHelmholtz { .. } => {
                let phi = self.phi.clone();
                let riemann = self.riemann.clone();
                extract_splitting(
                    move |x, y| phi(x, y),
                    move |x, y| riemann(x, y),
                    seg,
                    seg,
                    tol,
                )
            }
        }
    }

    /// `d^2 Phi / d n_x d n_y` for separated points, from the radial
    /// derivatives of the fundamental solution.
    fn cross_dd(&self) -> Arc<dyn Fn(C64, C64, C64, C64) -> C64 + Send + Sync> {
        let (p1, p2): (
            Arc<dyn Fn(f64) -> C64 + Send + Sync>,
            Arc<dyn Fn(f64) -> C64 + Send + Sync>,
        ) = match self.family {
            Family::Laplace => (
                Arc::new(|r| rc(-0.5 / (PI * r))),
                Arc::new(|r| rc(0.5 / (PI * r * r))),
            ),
            Family::Helmholtz { k } => (
                Arc::new(move |r| -C64::new(0.0, 0.25 * k) * hankel1_1(k * r)),
                Arc::new(move |r| {
                    let z = k * r;
                    -C64::new(0.0, 0.25 * k * k) * (hankel1_0(z) - hankel1_1(z) / z)
                }),
            ),
            Family::GravityHelmholtz { .. } => {
                unreachable!("gravity kernels carry no hypersingular calculus")
            }
        };
        Arc::new(move |x: C64, y: C64, nx: C64, ny: C64| {
            let w = x - y;
            let r = w.norm();
            let e = w / r;
            let exnx = dot(e, nx);
            let exny = dot(e, ny);
            let nxny = dot(nx, ny);
            -p2(r) * exnx * exny - p1(r) * ((nxny - exnx * exny) / r)
        })
    }
}

/// Laplace kernel, `Phi = -(1/2 pi) log|x - y|`. The splitting is exact:
/// A is the constant `-1/(2 pi)`, B vanishes, and both hypersingular slices
/// vanish on a straight segment.
pub fn laplace_kernel() -> PDEKernel {
    let zero_normal: NormalFn = Arc::new(|_, _, _| C64::new(0.0, 0.0));
    PDEKernel {
        family: Family::Laplace,
        phi: Arc::new(|x, y| rc(-(x - y).norm().ln() / (2.0 * PI))),
        riemann: Arc::new(|_, _| rc(1.0)),
        dphi_dny: Some(Arc::new(|z, y, n| {
            let w = y - z;
            rc(-dot(n, w) / (2.0 * PI * w.norm_sqr()))
        })),
        a_normal: Some(zero_normal.clone()),
        b_normal: Some(zero_normal),
        splittings: Arc::new(Mutex::new(HashMap::new())),
    }
}

/// Helmholtz kernel with wavenumber `k`, `Phi = (i/4) H0^(1)(k|x - y|)`.
pub fn helmholtz_kernel(k: f64) -> Result<PDEKernel> {
    if !(k > 0.0) || !k.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "Helmholtz wavenumber must be positive and finite, got {k}"
        )));
    }
    Ok(PDEKernel {
        family: Family::Helmholtz { k },
        phi: Arc::new(move |x, y| C64::new(0.0, 0.25) * hankel1_0(k * (x - y).norm())),
        riemann: Arc::new(move |x, y| rc(bessel_j0(k * (x - y).norm()))),
        dphi_dny: Some(Arc::new(move |z, y, n| {
            let w = y - z;
            let r = w.norm();
            // phi'(r) (n . (y - z)) / r with phi' = -(ik/4) H1(kr)
            -C64::new(0.0, 0.25 * k) * hankel1_1(k * r) * (dot(n, w) / r)
        })),
        a_normal: Some(Arc::new(move |z, y, n| {
            let w = y - z;
            // (k/2pi) J1(kr) dot(n, y-z)/r, entire through r = 0
            rc(k * k / (2.0 * PI) * j1_over_z(k * w.norm()) * dot(n, w))
        })),
        b_normal: Some(Arc::new(move |z, y, n| {
            let w = y - z;
            helmholtz_b_prime_over_r(k, w.norm()) * dot(n, w)
        })),
        splittings: Arc::new(Mutex::new(HashMap::new())),
    })
}

/// Gravity-Helmholtz kernel at spectral parameter `e`.
///
/// `phi` evaluates the saddle-contour integral and so inherits its scope:
/// pairs with `|x - y| > 1.9 a` or `a <= 0` (with `a = e + (Im x + Im y)/2`)
/// evaluate to NaN. The Riemann function uses the double series, which covers
/// every pair the contour does.
pub fn gravity_kernel(e: f64) -> Result<PDEKernel> {
    if !e.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "gravity spectral parameter must be finite, got {e}"
        )));
    }
    Ok(PDEKernel {
        family: Family::GravityHelmholtz { e },
        phi: Arc::new(move |x, y| gravity_fundamental(x, y, e).unwrap_or_else(|_| cnan())),
        riemann: Arc::new(move |x, y| {
            gravity_riemann_series(x, x.conj(), y, y.conj(), e, GRAVITY_SERIES_ORDER)
                .unwrap_or_else(|_| cnan())
        }),
        dphi_dny: None,
        a_normal: None,
        b_normal: None,
        splittings: Arc::new(Mutex::new(HashMap::new())),
    })
}

/// `J1(z)/z`, entire; series below the cancellation threshold.
fn j1_over_z(z: f64) -> f64 {
    if z.abs() >= 0.5 {
        return bessel_j1(z) / z;
    }
    let q = 0.25 * z * z;
    let mut term = 0.5_f64;
    let mut acc = 0.5;
    let mut m = 1.0;
    while term.abs() > 1e-18 {
        term *= -q / (m * (m + 1.0));
        acc += term;
        m += 1.0;
    }
    acc
}

/// Log-free remainder of the hypersingular self kernel:
/// `B_dd(r) = (ik/4) H1(kr)/r - J0(kr)/(2 pi r^2) + (k/2pi)(J1(kr)/r) log r`,
/// continued through r = 0 by its ascending series.
fn helmholtz_b_dd(k: f64, r: f64) -> C64 {
    let z = k * r;
    let k2 = k * k;
    if z >= 0.5 {
        let h1 = hankel1_1(z);
        return C64::new(0.0, 0.25 * k) * h1 / r - rc(bessel_j0(z) / (2.0 * PI * r * r))
            + rc(k / (2.0 * PI) * (bessel_j1(z) / r) * r.ln());
    }
    // c_m = (-q)^m / (m! (m+1)!), d_m = (H_m + H_{m+1}) c_m,
    // e_j = (-q)^j / ((j+1)!)^2, q = (kr/2)^2
    let q = 0.25 * z * z;
    let (mut c, mut e) = (1.0_f64, 1.0_f64);
    let (mut sc, mut sd, mut se) = (1.0, 1.0, 1.0);
    let (mut hm, mut hm1) = (0.0, 1.0);
    let mut m = 1.0;
    while c.abs().max(e.abs()) > 1e-18 {
        c *= -q / (m * (m + 1.0));
        e *= -q / ((m + 1.0) * (m + 1.0));
        hm += 1.0 / m;
        hm1 += 1.0 / (m + 1.0);
        sc += c;
        sd += (hm + hm1) * c;
        se += e;
        m += 1.0;
    }
    let lg = (0.5 * k).ln() + EULER_GAMMA;
    C64::new(
        k2 / (8.0 * PI) * (sd + se) - k2 / (4.0 * PI) * lg * sc,
        k2 / 8.0 * sc,
    )
}

/// `B'(r)/r` for the Helmholtz log-free remainder, entire through r = 0.
fn helmholtz_b_prime_over_r(k: f64, r: f64) -> C64 {
    let z = k * r;
    if z >= 0.5 {
        let bp = -C64::new(0.0, 0.25 * k) * hankel1_1(z) - rc(k / (2.0 * PI) * bessel_j1(z) * r.ln())
            + rc(bessel_j0(z) / (2.0 * PI * r));
        return bp / r;
    }
    // B'(r)/r = k^2 [ -(i/4 - c) J1(z)/z
    //                 - (1/4pi) sum_{m>=1} (-1)^{m+1} H_m m q^{m-1} / (m!)^2 ]
    let q = 0.25 * z * z;
    let mut term = 1.0_f64;
    let mut sum = 1.0;
    let mut hm = 1.0;
    let mut m = 1.0;
    while term.abs() > 1e-18 {
        let hm_next = hm + 1.0 / (m + 1.0);
        term *= -q * hm_next * (m + 1.0) / (hm * m * (m + 1.0) * (m + 1.0));
        sum += term;
        hm = hm_next;
        m += 1.0;
    }
    let c = ((0.5 * k).ln() + EULER_GAMMA) / (2.0 * PI);
    let k2 = k * k;
    (-(C64::new(0.0, 0.25) - rc(c)) * j1_over_z(z) - rc(sum / (4.0 * PI))) * k2
}

/// Incident field driving a scattering problem. Evaluators are total and
/// return NaN outside the gravity kernel's contour scope; combination rules
/// (which sources exist for which family) are checked by [`Incident::validate`].
#[derive(Clone, Debug)]
pub enum Incident {
    /// `exp(i k d.x)` with unit direction `d`; Helmholtz only.
    PlaneWave { dir: C64 },
    /// Laplace: `s log|z - a|`. Helmholtz: `s (i/4) H0^(1)(k|z - a|)`.
    /// Gravity: `s Phi_E(z, a)`.
    PointSource { at: C64, strength: C64 },
    /// Superposition of point sources as `(location, strength)` pairs.
    PointSources(Vec<(C64, C64)>),
}

impl Incident {
    /// Reject source/family combinations with no defined field.
    pub fn validate(&self, family: Family) -> Result<()> {
        match (self, family) {
            (Incident::PlaneWave { .. }, Family::Helmholtz { .. }) => Ok(()),
            (Incident::PlaneWave { .. }, _) => Err(Error::Unsupported(
                "plane-wave incident fields are defined for the Helmholtz family only".into(),
            )),
            _ => Ok(()),
        }
    }

    pub fn value(&self, family: Family, z: C64) -> C64 {
        match self {
            Incident::PlaneWave { dir } => match family {
                Family::Helmholtz { k } => {
                    let d = dir / dir.norm();
                    (C64::new(0.0, k * dot(d, z))).exp()
                }
                _ => cnan(),
            },
            Incident::PointSource { at, strength } => {
                strength * source_value(family, z, *at)
            }
            Incident::PointSources(list) => list
                .iter()
                .map(|(at, s)| s * source_value(family, z, *at))
                .sum(),
        }
    }

    /// Derivative along the unit normal `n` at a boundary point `z`.
    pub fn normal_derivative(&self, family: Family, z: C64, n: C64) -> C64 {
        match self {
            Incident::PlaneWave { dir } => match family {
                Family::Helmholtz { k } => {
                    let d = dir / dir.norm();
                    C64::new(0.0, k * dot(d, n)) * self.value(family, z)
                }
                _ => cnan(),
            },
            Incident::PointSource { at, strength } => {
                strength * source_normal(family, z, *at, n)
            }
            Incident::PointSources(list) => list
                .iter()
                .map(|(at, s)| s * source_normal(family, z, *at, n))
                .sum(),
        }
    }
}

fn source_value(family: Family, z: C64, at: C64) -> C64 {
    match family {
        Family::Laplace => rc((z - at).norm().ln()),
        Family::Helmholtz { k } => C64::new(0.0, 0.25) * hankel1_0(k * (z - at).norm()),
        Family::GravityHelmholtz { e } => {
            gravity_fundamental(z, at, e).unwrap_or_else(|_| cnan())
        }
    }
}

fn source_normal(family: Family, z: C64, at: C64, n: C64) -> C64 {
    let w = z - at;
    let r = w.norm();
    match family {
        Family::Laplace => rc(dot(n, w) / (r * r)),
        Family::Helmholtz { k } => {
            -C64::new(0.0, 0.25 * k) * hankel1_1(k * r) * (dot(n, w) / r)
        }
        // no closed derivative of the contour integral; gravity problems are
        // Dirichlet-only and never reach here through the drivers
        Family::GravityHelmholtz { .. } => cnan(),
    }
}
