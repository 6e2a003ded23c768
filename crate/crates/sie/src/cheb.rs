//! Chebyshev and ultraspherical approximation toolkit.
//!
//! Everything downstream works with coefficient expansions on straight
//! segments in the complex plane. A segment is the affine image of the
//! reference interval [-1, 1]; expansions store coefficients in one of six
//! bases:
//!
//! * `T`: Chebyshev polynomials of the first kind,
//! * `U` = `Ultra(1)`: second kind,
//! * `Ultra(lambda)`: ultraspherical C^(lambda) with integer lambda >= 1,
//! * `WT`: T_n(x) / sqrt(1 - x^2), the square-root-singular density basis,
//! * `WU`: U_n(x) sqrt(1 - x^2), the square-root-vanishing density basis,
//! * `MT`: modified first kind, That_0 = T_0, That_1 = T_1,
//!   That_n = T_n - T_{n-2} for n >= 2.
//!
//! Transforms between point values and coefficients run through complex FFTs
//! of even extensions, so both directions cost O(n log n).
//!
//! ```
//! use sie::cheb::{adaptive_fit_local, chop};
//! let c = adaptive_fit_local(|x| x.exp().into(), 1e-14).unwrap();
//! // exp(x) needs about 14 Chebyshev coefficients at this tolerance
//! assert!(c.len() >= 12 && c.len() <= 16);
//! assert!((c[0].re - 1.2660658777520084).abs() < 1e-14);
//! ```

use crate::error::{Error, Result};
use num_complex::Complex64;
use rustfft::{num_complex::Complex as FftComplex, Fft, FftPlanner};
use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

pub type C64 = Complex64;

/// Grid families on [-1, 1].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    /// Roots of T_n: cos((2k+1) pi / (2n)), k = 0..n-1. Never includes +-1.
    First,
    /// Extrema of T_{n-1}: cos(k pi / (n-1)), k = 0..n-1. Includes +-1.
    Second,
}

/// Coefficient bases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Basis {
    /// Chebyshev first kind T_n.
    T,
    /// Ultraspherical C^(lambda), integer lambda >= 1. `Ultra(1)` is the
    /// second-kind basis U_n.
    Ultra(u32),
    /// Weighted first kind T_n(x) / sqrt(1 - x^2).
    WT,
    /// Weighted second kind U_n(x) sqrt(1 - x^2).
    WU,
    /// Modified first kind That_n = T_n - T_{n-2}.
    MT,
}

impl Basis {
    /// Second-kind Chebyshev basis.
    pub const U: Basis = Basis::Ultra(1);

    /// Short label used in serialized dumps: T, U, C2, C3, .., WT, WU, MT.
    pub fn label(&self) -> String {
        match self {
            Basis::T => "T".into(),
            Basis::Ultra(1) => "U".into(),
            Basis::Ultra(l) => format!("C{l}"),
            Basis::WT => "WT".into(),
            Basis::WU => "WU".into(),
            Basis::MT => "MT".into(),
        }
    }

    pub fn parse(s: &str) -> Result<Basis> {
        match s {
            "T" => Ok(Basis::T),
            "U" => Ok(Basis::U),
            "WT" => Ok(Basis::WT),
            "WU" => Ok(Basis::WU),
            "MT" => Ok(Basis::MT),
            _ => {
                if let Some(rest) = s.strip_prefix('C') {
                    let l: u32 = rest
                        .parse()
                        .map_err(|_| Error::InvalidArgument(format!("unknown basis {s:?}")))?;
                    if l == 0 {
                        return Err(Error::InvalidArgument("C0 is not a basis label".into()));
                    }
                    Ok(Basis::Ultra(l))
                } else {
                    Err(Error::InvalidArgument(format!("unknown basis {s:?}")))
                }
            }
        }
    }
}

/// Oriented straight segment in the complex plane, the affine image of
/// [-1, 1] under t -> (a + b)/2 + t (b - a)/2.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub a: C64,
    pub b: C64,
}

impl Segment {
    pub fn new(a: C64, b: C64) -> Result<Segment> {
        if a == b {
            return Err(Error::InvalidArgument(
                "segment endpoints must be distinct".into(),
            ));
        }
        if !(a.re.is_finite() && a.im.is_finite() && b.re.is_finite() && b.im.is_finite()) {
            return Err(Error::InvalidArgument(
                "segment endpoints must be finite".into(),
            ));
        }
        Ok(Segment { a, b })
    }

    /// The reference interval [-1, 1].
    pub fn unit() -> Segment {
        Segment {
            a: C64::new(-1.0, 0.0),
            b: C64::new(1.0, 0.0),
        }
    }

    pub fn is_unit(&self) -> bool {
        self.a == C64::new(-1.0, 0.0) && self.b == C64::new(1.0, 0.0)
    }

    /// Local coordinate t (complex) to a point in the plane.
    pub fn map(&self, t: C64) -> C64 {
        (self.a + self.b) * 0.5 + t * (self.b - self.a) * 0.5
    }

    /// Inverse affine map; defined for every z in the plane.
    pub fn inv_map(&self, z: C64) -> C64 {
        (z * 2.0 - self.a - self.b) / (self.b - self.a)
    }

    /// Half the segment length, |b - a| / 2.
    pub fn half_length(&self) -> f64 {
        0.5 * (self.b - self.a).norm()
    }

    /// Unit direction e^{i theta} = (b - a)/|b - a|.
    pub fn rotation(&self) -> C64 {
        let d = self.b - self.a;
        d / d.norm()
    }

    /// Midpoint of the segment.
    pub fn center(&self) -> C64 {
        (self.a + self.b) * 0.5
    }
}

/// Point values on one of the canonical grids, in the local variable.
#[derive(Debug, Clone)]
pub struct GridSample {
    pub kind: NodeKind,
    pub nodes: Vec<f64>,
    pub values: Vec<C64>,
}

impl GridSample {
    pub fn new(kind: NodeKind, nodes: Vec<f64>, values: Vec<C64>) -> Result<GridSample> {
        if nodes.len() != values.len() {
            return Err(Error::InvalidArgument(format!(
                "node/value length mismatch: {} vs {}",
                nodes.len(),
                values.len()
            )));
        }
        if nodes.is_empty() {
            return Err(Error::InvalidArgument("empty grid sample".into()));
        }
        Ok(GridSample {
            kind,
            nodes,
            values,
        })
    }

    /// Sample a scalar function of the local variable on an n-point grid.
    pub fn from_fn(kind: NodeKind, n: usize, f: impl FnMut(f64) -> C64) -> Result<GridSample> {
        let nodes = cheb_points(kind, n)?;
        let values = nodes.iter().copied().map(f).collect();
        GridSample::new(kind, nodes, values)
    }
}

/// Coefficient expansion over a segment. Coefficients are in the local
/// variable of the segment; `eval` maps global points back through the
/// segment's affine chart.
#[derive(Debug, Clone)]
pub struct CoeffExpansion {
    pub basis: Basis,
    pub segment: Segment,
    pub coeffs: Vec<C64>,
}

impl CoeffExpansion {
    pub fn new(basis: Basis, segment: Segment, coeffs: Vec<C64>) -> CoeffExpansion {
        CoeffExpansion {
            basis,
            segment,
            coeffs,
        }
    }

    pub fn zero(basis: Basis, segment: Segment) -> CoeffExpansion {
        CoeffExpansion::new(basis, segment, vec![C64::new(0.0, 0.0)])
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    /// Retag the expansion onto another segment without touching coefficients.
    pub fn on_segment(mut self, segment: Segment) -> CoeffExpansion {
        self.segment = segment;
        self
    }

    /// Evaluate at a global point z (complex plane). The point is pulled back
    /// through the segment chart; weighted bases use the branch
    /// sqrt(t - 1) sqrt(t + 1) of the endpoint singularity so values off the
    /// segment are consistent with the Cauchy and log transform formulas.
    pub fn eval(&self, z: C64) -> Result<C64> {
        self.eval_local(self.segment.inv_map(z))
    }

    /// Evaluate in the local variable t.
    pub fn eval_local(&self, t: C64) -> Result<C64> {
        let c = &self.coeffs;
        if c.is_empty() {
            return Ok(C64::new(0.0, 0.0));
        }
        match self.basis {
            Basis::T => Ok(clenshaw_t(c, t)),
            Basis::Ultra(l) => Ok(clenshaw_ultra(c, l, t)),
            Basis::MT => {
                let plain = mt_to_t(c);
                Ok(clenshaw_t(&plain, t))
            }
            Basis::WT => {
                let w = weight_wt(t)?;
                Ok(w * clenshaw_t(c, t))
            }
            Basis::WU => {
                if t.im == 0.0 && (t.re == 1.0 || t.re == -1.0) {
                    return Ok(C64::new(0.0, 0.0));
                }
                Ok(weight_wu(t) * clenshaw_ultra(c, 1, t))
            }
        }
    }

    /// Drop trailing coefficients below `tol` relative to the largest one.
    pub fn trim(&mut self, tol: f64) {
        let n = chop(&self.coeffs, tol);
        self.coeffs.truncate(n);
    }

    /// Serialized form used by every dump interface: basis label, segment
    /// endpoints as [re_a, im_a, re_b, im_b], coefficients as [re, im] pairs.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "basis": self.basis.label(),
            "segment": [
                self.segment.a.re,
                self.segment.a.im,
                self.segment.b.re,
                self.segment.b.im,
            ],
            "coeffs": self
                .coeffs
                .iter()
                .map(|c| [c.re, c.im])
                .collect::<Vec<_>>(),
        })
    }
}

/// 1 / sqrt(1 - t^2) through the product branch sqrt(t-1) sqrt(t+1).
/// Positive on the open interval; errors exactly at the endpoints.
pub fn weight_wt(t: C64) -> Result<C64> {
    if t.im == 0.0 && (t.re == 1.0 || t.re == -1.0) {
        return Err(Error::EndpointSingular { point: t.re });
    }
    if t.im == 0.0 && t.re.abs() < 1.0 {
        return Ok(C64::new(1.0 / (1.0 - t.re * t.re).sqrt(), 0.0));
    }
    let s = (t - 1.0).sqrt() * (t + 1.0).sqrt();
    Ok(C64::new(0.0, 1.0) / s)
}

/// sqrt(1 - t^2) through the product branch; zero at the endpoints and
/// positive on the open interval.
pub fn weight_wu(t: C64) -> C64 {
    if t.im == 0.0 && t.re.abs() <= 1.0 {
        return C64::new((1.0 - t.re * t.re).max(0.0).sqrt(), 0.0);
    }
    let s = (t - 1.0).sqrt() * (t + 1.0).sqrt();
    -C64::new(0.0, 1.0) * s
}

/// Clenshaw recurrence for first-kind Chebyshev series.
pub fn clenshaw_t(c: &[C64], x: C64) -> C64 {
    let mut u1 = C64::new(0.0, 0.0);
    let mut u2 = C64::new(0.0, 0.0);
    for k in (1..c.len()).rev() {
        let u = c[k] + 2.0 * x * u1 - u2;
        u2 = u1;
        u1 = u;
    }
    match c.first() {
        Some(&c0) => c0 + x * u1 - u2,
        None => C64::new(0.0, 0.0),
    }
}

/// Clenshaw recurrence for ultraspherical C^(lambda) series, lambda >= 1.
///
/// Uses p_{n+1} = A_n x p_n + B_n p_{n-1} with A_n = 2(n+lambda)/(n+1) and
/// B_n = -(n + 2 lambda - 1)/(n+1); the downward pass is
/// u_k = c_k + A_k x u_{k+1} + B_{k+1} u_{k+2}, and p_1 = A_0 x p_0 makes the
/// value u_0.
pub fn clenshaw_ultra(c: &[C64], lambda: u32, x: C64) -> C64 {
    let lam = lambda as f64;
    let mut u1 = C64::new(0.0, 0.0);
    let mut u2 = C64::new(0.0, 0.0);
    for k in (0..c.len()).rev() {
        let kf = k as f64;
        let a_k = 2.0 * (kf + lam) / (kf + 1.0);
        let b_k1 = -(kf + 1.0 + 2.0 * lam - 1.0) / (kf + 2.0);
        let u = c[k] + a_k * x * u1 + b_k1 * u2;
        u2 = u1;
        u1 = u;
    }
    u1
}

/// Convert modified first-kind coefficients to plain T coefficients:
/// c_n = chat_n - chat_{n+2}.
pub fn mt_to_t(chat: &[C64]) -> Vec<C64> {
    let n = chat.len();
    let mut c = vec![C64::new(0.0, 0.0); n];
    for i in 0..n {
        c[i] = chat[i] - chat.get(i + 2).copied().unwrap_or_default();
    }
    c
}

/// Convert plain T coefficients to the modified basis by back substitution:
/// chat_n = c_n + chat_{n+2}.
pub fn t_to_mt(c: &[C64]) -> Vec<C64> {
    let n = c.len();
    let mut chat = vec![C64::new(0.0, 0.0); n];
    for i in (0..n).rev() {
        chat[i] = c[i] + chat.get(i + 2).copied().unwrap_or_default();
    }
    chat
}

/// Chebyshev points on [-1, 1], strictly decreasing.
pub fn cheb_points(kind: NodeKind, n: usize) -> Result<Vec<f64>> {
    match kind {
        NodeKind::First => {
            if n == 0 {
                return Err(Error::InvalidArgument(
                    "first-kind grid needs at least one node".into(),
                ));
            }
            Ok((0..n)
                .map(|k| ((2 * k + 1) as f64 * std::f64::consts::PI / (2 * n) as f64).cos())
                .collect())
        }
        NodeKind::Second => {
            if n < 2 {
                return Err(Error::InvalidArgument(
                    "second-kind grid needs at least two nodes".into(),
                ));
            }
            Ok((0..n)
                .map(|k| (k as f64 * std::f64::consts::PI / (n - 1) as f64).cos())
                .collect())
        }
    }
}

static FFT_PLANS: OnceLock<Mutex<HashMap<usize, Arc<dyn Fft<f64>>>>> = OnceLock::new();

fn fft_forward(buf: &mut [FftComplex<f64>]) {
    let plans = FFT_PLANS.get_or_init(|| Mutex::new(HashMap::new()));
    let plan = {
        let mut guard = plans.lock().unwrap();
        guard
            .entry(buf.len())
            .or_insert_with(|| FftPlanner::new().plan_fft_forward(buf.len()))
            .clone()
    };
    plan.process(buf);
}

/// Interpolate grid values by a first-kind Chebyshev series. The returned
/// expansion is tagged with the reference segment; retag with `on_segment`
/// when the sample lives elsewhere.
pub fn values_to_coeffs(sample: &GridSample) -> Result<CoeffExpansion> {
    let v = &sample.values;
    let n = v.len();
    if n == 0 {
        return Err(Error::InvalidArgument("empty grid sample".into()));
    }
    let coeffs = match sample.kind {
        NodeKind::First => {
            // S[m] = sum_j v_j cos(pi m (2j+1) / (2n)) via a length-4n FFT of
            // the odd-index embedding; c_0 = S[0]/n, c_m = 2 S[m]/n.
            let mut buf = vec![FftComplex::new(0.0, 0.0); 4 * n];
            for (j, &vj) in v.iter().enumerate() {
                buf[2 * j + 1] = vj;
                buf[4 * n - 2 * j - 1] = vj;
            }
            fft_forward(&mut buf);
            (0..n)
                .map(|m| {
                    let s = 0.5 * buf[m];
                    if m == 0 {
                        s / n as f64
                    } else {
                         2.0 * s / n as f64
                    }
                })
                .collect()
        }
        NodeKind::Second => {
            if n < 2 {
                return Err(Error::InvalidArgument(
                    "second-kind sample needs at least two nodes".into(),
                ));
            }
            let m = n - 1;
            let mut buf = vec![FftComplex::new(0.0, 0.0); 2 * m];
            for (j, &vj) in v.iter().enumerate() {
                buf[j] = vj;
                if j >= 1 && j <= m - 1 {
                    buf[2 * m - j] = vj;
                }
            }
            fft_forward(&mut buf);
            (0..n)
                .map(|p| {
                    if p == 0 || p == m {
                        buf[p] / (2 * m) as f64
                    } else {
                        buf[p] / m as f64
                    }
                })
                .collect()
        }
    };
    Ok(CoeffExpansion::new(Basis::T, Segment::unit(), coeffs))
}

/// Evaluate a first-kind Chebyshev series on an n-point grid.
pub fn coeffs_to_values(exp: &CoeffExpansion, kind: NodeKind, n: usize) -> Result<GridSample> {
    if exp.basis != Basis::T {
        return Err(Error::BasisMismatch(format!(
            "grid synthesis expects T coefficients, got {}",
            exp.basis.label()
        )));
    }
    let nodes = cheb_points(kind, n)?;
    let mut c = exp.coeffs.clone();
    if c.len() > n {
        // Aliasing would silently corrupt values; refuse.
        return Err(Error::InvalidArgument(format!(
            "cannot synthesize {} coefficients on {} nodes",
            c.len(),
            n
        )));
    }
    c.resize(n, C64::new(0.0, 0.0));
    let values = match kind {
        NodeKind::First => {
            let mut buf = vec![FftComplex::new(0.0, 0.0); 4 * n];
            for (m, &cm) in c.iter().enumerate() {
                buf[m] = cm;
            }
            fft_forward(&mut buf);
            (0..n)
                .map(|j| 0.5 * (buf[2 * j + 1] + buf[4 * n - 2 * j - 1]))
                .collect()
        }
        NodeKind::Second => {
            let m = n - 1;
            let mut buf = vec![FftComplex::new(0.0, 0.0); 2 * m];
            for (p, &cp) in c.iter().enumerate() {
                buf[p] = cp;
                if p >= 1 && p <= m - 1 {
                    buf[2 * m - p] += cp;
                }
            }
            fft_forward(&mut buf);
            (0..n)
                .map(|j| {
                    let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
                    0.5 * (buf[j] + c[0] + sign * c[m])
                })
                .collect()
        }
    };
    GridSample::new(kind, nodes, values)
}

/// Index of the last coefficient above `tol` times the largest magnitude,
/// plus one. Returns at least 1 so a nonzero function never chops to nothing.
pub fn chop(coeffs: &[C64], tol: f64) -> usize {
    let max = coeffs.iter().map(|c| c.norm()).fold(0.0_f64, f64::max);
    if max == 0.0 {
        return 1;
    }
    let thr = tol * max;
    for i in (0..coeffs.len()).rev() {
        if coeffs[i].norm() > thr {
            return i + 1;
        }
    }
    1
}

/// Hard cap on adaptive refinement sizes.
pub const MAX_FIT: usize = 1 << 20;

/// Adaptively fit a function of the local variable by a first-kind Chebyshev
/// series. Grid sizes double from 16; the fit is accepted once two
/// consecutive levels agree after chopping at `tol`.
pub fn adaptive_fit_local(f: impl Fn(f64) -> C64, tol: f64) -> Result<Vec<C64>> {
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument("tolerance must be positive".into()));
    }
    let mut n = 16usize;
    let mut prev: Option<Vec<C64>> = None;
    loop {
        let sample = GridSample::from_fn(NodeKind::First, n, &f)?;
        let fit = values_to_coeffs(&sample)?.coeffs;
        let nc = chop(&fit, tol);
        if let Some(p) = &prev {
            let pc = chop(p, tol);
            if pc == nc {
                let scale = fit.iter().map(|c| c.norm()).fold(0.0_f64, f64::max);
                let agree = (0..nc).all(|i| {
                    let a = p.get(i).copied().unwrap_or_default();
                    (a - fit[i]).norm() <= 16.0 * tol * scale.max(1e-300)
                });
                if agree {
                    let mut out = fit;
                    out.truncate(nc);
                    return Ok(out);
                }
            }
        }
        if n >= MAX_FIT {
            let tail: f64 = fit[nc.min(fit.len())..]
                .iter()
                .map(|c| c.norm())
                .fold(0.0, f64::max);
            return Err(Error::ResolutionFailure {
                context: "adaptive_fit",
                reached: n,
                tail,
            });
        }
        prev = Some(fit);
        n *= 2;
    }
}

/// Adaptively fit a function of the global point on a segment.
pub fn adaptive_fit(
    segment: Segment,
    f: impl Fn(C64) -> C64,
    tol: f64,
) -> Result<CoeffExpansion> {
    let coeffs = adaptive_fit_local(|t| f(segment.map(C64::new(t, 0.0))), tol)?;
    Ok(CoeffExpansion::new(Basis::T, segment, coeffs))
}

/// Multiply two first-kind coefficient vectors (same segment) by synthesis on
/// a common grid; exact for the product degree.
pub fn multiply_t_coeffs(a: &[C64], b: &[C64]) -> Vec<C64> {
    if a.is_empty() || b.is_empty() {
        return vec![C64::new(0.0, 0.0)];
    }
    let deg = a.len() + b.len() - 1;
    let n = deg.next_power_of_two().max(4);
    let ea = CoeffExpansion::new(Basis::T, Segment::unit(), a.to_vec());
    let eb = CoeffExpansion::new(Basis::T, Segment::unit(), b.to_vec());
    let va = coeffs_to_values(&ea, NodeKind::First, n).expect("synthesis");
    let vb = coeffs_to_values(&eb, NodeKind::First, n).expect("synthesis");
    let prod: Vec<C64> = va
        .values
        .iter()
        .zip(&vb.values)
        .map(|(x, y)| x * y)
        .collect();
    let gs = GridSample::new(NodeKind::First, va.nodes, prod).expect("grid");
    let mut c = values_to_coeffs(&gs).expect("analysis").coeffs;
    c.truncate(deg);
    c
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    #[test]
    fn first_kind_points_match_closed_form() {
        let p = cheb_points(NodeKind::First, 1).unwrap();
        assert!(p[0].abs() < 1e-15);
        let p3 = cheb_points(NodeKind::First, 3).unwrap();
        let s3 = 3f64.sqrt() / 2.0;
        assert!((p3[0] - s3).abs() < 1e-15);
        assert!(p3[1].abs() < 1e-15);
        assert!((p3[2] + s3).abs() < 1e-15);
    }

    #[test]
    fn second_kind_points_include_endpoints() {
        let p = cheb_points(NodeKind::Second, 2).unwrap();
        assert_eq!(p, vec![1.0, -1.0]);
        assert!(cheb_points(NodeKind::Second, 1).is_err());
        assert!(cheb_points(NodeKind::First, 0).is_err());
    }

    #[test]
    fn analysis_recovers_unit_coefficient() {
        // values of T_3 on both grids give the exact unit coefficient vector
        for (kind, n) in [(NodeKind::First, 6), (NodeKind::Second, 6)] {
            let sample = GridSample::from_fn(kind, n, |x| {
                c(4.0 * x * x * x - 3.0 * x, 0.0)
            })
            .unwrap();
            let fit = values_to_coeffs(&sample).unwrap();
            for (i, ci) in fit.coeffs.iter().enumerate() {
                let want = if i == 3 { 1.0 } else { 0.0 };
                assert!(
                    (ci.re - want).abs() < 1e-13 && ci.im.abs() < 1e-13,
                    "coeff {i} = {ci} on {kind:?}"
                );
            }
        }
    }

    #[test]
    fn exp_fit_matches_trapezoid_oracle() {
        // c_n of exp(x) equals (2/pi) int_0^pi exp(cos t) cos(n t) dt for
        // n >= 1 (half for n = 0); the periodic trapezoid rule is spectrally
        // exact, so it is an independent oracle.
        let coeffs = adaptive_fit_local(|x| c(x.exp(), 0.0), 1e-14).unwrap();
        assert!(
            coeffs.len() >= 12 && coeffs.len() <= 16,
            "len = {}",
            coeffs.len()
        );
        let m = 256;
        for n in 0..coeffs.len() {
            let mut s = 0.0;
            for j in 0..m {
                let t = std::f64::consts::PI * (j as f64 + 0.5) / m as f64;
                s += t.cos().exp() * (n as f64 * t).cos();
            }
            let mut oracle = 2.0 * s / m as f64;
            if n == 0 {
                oracle *= 0.5;
            }
            assert!(
                (coeffs[n].re - oracle).abs() < 1e-13,
                "n = {n}: {} vs {oracle}",
                coeffs[n].re
            );
        }
    }

    #[test]
    fn polynomial_fit_terminates_exactly() {
        let coeffs = adaptive_fit_local(|x| c(8.0 * x * x * x * x - 8.0 * x * x + 1.0, 0.0), 1e-14)
            .unwrap();
        // T_4 written in the monomial basis; exactly five coefficients
        assert_eq!(coeffs.len(), 5);
        assert!((coeffs[4].re - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fit_degree_tracks_bernstein_radius() {
        // pole at the ellipse parameter rho: degree ~ log(1/tol)/log(rho)
        let mut products = Vec::new();
        for rho in [1.1_f64, 1.2, 1.4] {
            let x0 = 0.5 * (rho + 1.0 / rho);
            let coeffs = adaptive_fit_local(|x| c(1.0 / (x - x0), 0.0), 1e-12).unwrap();
            products.push(coeffs.len() as f64 * rho.ln());
        }
        for p in &products {
            assert!(
                (p - products[0]).abs() < 0.35 * products[0],
                "products {products:?}"
            );
        }
    }

    #[test]
    fn chop_geometric_tail() {
        let coeffs: Vec<C64> = (0..100).map(|n| c(2f64.powi(-n), 0.0)).collect();
        let n = chop(&coeffs, 1e-14);
        assert!((46..=50).contains(&n), "chop returned {n}");
    }

    #[test]
    fn chop_degenerate_cases() {
        assert_eq!(chop(&[c(0.0, 0.0); 5], 1e-14), 1);
        assert_eq!(chop(&[c(3.0, 0.0)], 1e-14), 1);
        let mut v = vec![c(1.0, 0.0)];
        v.extend(std::iter::repeat(c(0.0, 0.0)).take(7));
        assert_eq!(chop(&v, 1e-14), 1);
    }

    #[test]
    fn eval_matches_direct_recurrence() {
        let e = CoeffExpansion::new(Basis::T, Segment::unit(), vec![c(1.0, 0.0), c(2.0, 0.0), c(3.0, 0.0)]);
        let v = e.eval(c(0.5, 0.0)).unwrap();
        assert!((v.re - 0.5).abs() < 1e-15);
    }

    #[test]
    fn ultra_eval_known_values() {
        // C_2^{(2)}(x) = 12 x^2 - 2
        let e = CoeffExpansion::new(
            Basis::Ultra(2),
            Segment::unit(),
            vec![c(0.0, 0.0), c(0.0, 0.0), c(1.0, 0.0)],
        );
        let v = e.eval(c(0.3, 0.0)).unwrap();
        assert!((v.re - (12.0 * 0.09 - 2.0)).abs() < 1e-14);
        // U_3(x) = 8x^3 - 4x
        let u = CoeffExpansion::new(
            Basis::U,
            Segment::unit(),
            vec![c(0.0, 0.0); 3]
                .into_iter()
                .chain([c(1.0, 0.0)])
                .collect(),
        );
        let v = u.eval(c(0.7, 0.0)).unwrap();
        assert!((v.re - (8.0 * 0.343 - 2.8)).abs() < 1e-14);
    }

    #[test]
    fn weighted_endpoint_behavior() {
        let wt = CoeffExpansion::new(Basis::WT, Segment::unit(), vec![c(1.0, 0.0)]);
        match wt.eval(c(1.0, 0.0)) {
            Err(Error::EndpointSingular { point }) => assert_eq!(point, 1.0),
            other => panic!("expected endpoint singularity, got {other:?}"),
        }
        let wu = CoeffExpansion::new(Basis::WU, Segment::unit(), vec![c(1.0, 0.0)]);
        assert_eq!(wu.eval(c(-1.0, 0.0)).unwrap(), c(0.0, 0.0));
        // interior value carries the weight
        let v = wu.eval(c(0.6, 0.0)).unwrap();
        assert!((v.re - 0.8).abs() < 1e-15);
    }

    #[test]
    fn weight_branches_match_on_axis() {
        let t = c(0.25, 0.0);
        assert!((weight_wt(t).unwrap().re - 1.0 / (1.0 - 0.0625f64).sqrt()).abs() < 1e-15);
        let off = c(0.25, 1e-12);
        assert!((weight_wt(off).unwrap() - weight_wt(t).unwrap()).norm() < 1e-9);
        assert!((weight_wu(off) - weight_wu(t)).norm() < 1e-9);
    }

    #[test]
    fn segment_roundtrip_and_length() {
        let s = Segment::new(c(0.0, 0.0), c(2.0, 2.0)).unwrap();
        assert!((s.half_length() - 2f64.sqrt()).abs() < 1e-15);
        let z = c(0.3, 1.7);
        let t = s.inv_map(z);
        assert!((s.map(t) - z).norm() < 1e-14);
        assert!(Segment::new(c(1.0, 1.0), c(1.0, 1.0)).is_err());
    }

    #[test]
    fn synthesis_rejects_aliasing() {
        let e = CoeffExpansion::new(Basis::T, Segment::unit(), vec![c(1.0, 0.0); 9]);
        assert!(coeffs_to_values(&e, NodeKind::First, 4).is_err());
    }

    #[test]
    fn mt_conversion_roundtrip() {
        let chat = vec![c(1.0, 0.5), c(-2.0, 0.0), c(0.25, 1.0), c(0.0, -1.0)];
        let back = t_to_mt(&mt_to_t(&chat));
        for (a, b) in chat.iter().zip(&back) {
            assert!((a - b).norm() < 1e-15);
        }
    }

    #[test]
    fn modified_basis_evaluates_differences() {
        // That_2 = T_2 - T_0 vanishes at both endpoints
        let e = CoeffExpansion::new(
            Basis::MT,
            Segment::unit(),
            vec![c(0.0, 0.0), c(0.0, 0.0), c(1.0, 0.0)],
        );
        assert!(e.eval(c(1.0, 0.0)).unwrap().norm() < 1e-15);
        assert!(e.eval(c(-1.0, 0.0)).unwrap().norm() < 1e-15);
        let v = e.eval(c(0.5, 0.0)).unwrap();
        assert!((v.re - (2.0 * 0.25 - 1.0 - 1.0)).abs() < 1e-15);
    }

    #[test]
    fn product_of_series_is_exact() {
        // T_1 * T_2 = (T_3 + T_1)/2
        let p = multiply_t_coeffs(&[c(0.0, 0.0), c(1.0, 0.0)], &[c(0.0, 0.0), c(0.0, 0.0), c(1.0, 0.0)]);
        assert!((p[1].re - 0.5).abs() < 1e-14);
        assert!((p[3].re - 0.5).abs() < 1e-14);
        assert!(p[0].norm() < 1e-14 && p[2].norm() < 1e-14);
    }

    proptest! {
        #[test]
        fn points_strictly_decreasing(n in 1usize..200) {
            let p = cheb_points(NodeKind::First, n).unwrap();
            for w in p.windows(2) {
                prop_assert!(w[0] > w[1]);
            }
            if n >= 2 {
                let p = cheb_points(NodeKind::Second, n).unwrap();
                for w in p.windows(2) {
                    prop_assert!(w[0] > w[1]);
                }
            }
        }

        #[test]
        fn transform_roundtrip_first_kind(
            vals in proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 1..64)
        ) {
            let values: Vec<C64> = vals.iter().map(|&(r, i)| c(r, i)).collect();
            let n = values.len();
            let nodes = cheb_points(NodeKind::First, n).unwrap();
            let gs = GridSample::new(NodeKind::First, nodes, values.clone()).unwrap();
            let fit = values_to_coeffs(&gs).unwrap();
            let back = coeffs_to_values(&fit, NodeKind::First, n).unwrap();
            for (a, b) in values.iter().zip(&back.values) {
                prop_assert!((a - b).norm() < 1e-12);
            }
        }

        #[test]
        fn transform_roundtrip_second_kind(
            vals in proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 2..64)
        ) {
            let values: Vec<C64> = vals.iter().map(|&(r, i)| c(r, i)).collect();
            let n = values.len();
            let nodes = cheb_points(NodeKind::Second, n).unwrap();
            let gs = GridSample::new(NodeKind::Second, nodes, values.clone()).unwrap();
            let fit = values_to_coeffs(&gs).unwrap();
            let back = coeffs_to_values(&fit, NodeKind::Second, n).unwrap();
            for (a, b) in values.iter().zip(&back.values) {
                prop_assert!((a - b).norm() < 1e-12);
            }
        }

        #[test]
        fn clenshaw_matches_summation(
            cs in proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 1..24),
            x in -0.99f64..0.99,
        ) {
            let coeffs: Vec<C64> = cs.iter().map(|&(r, i)| c(r, i)).collect();
            // direct three-term recurrences as the oracle
            let xv = c(x, 0.0);
            for (basis, lambda) in [(Basis::T, 0u32), (Basis::U, 1), (Basis::Ultra(2), 2), (Basis::Ultra(3), 3)] {
                let mut expect = C64::new(0.0, 0.0);
                // summand magnitude sets the roundoff scale: C^(lam)_n grows
                // like n^(2 lam - 1) so an absolute bound cannot work
                let mut scale = 1.0f64;
                let mut p0 = c(1.0, 0.0);
                let mut p1 = if lambda == 0 { xv } else { 2.0 * lambda as f64 * xv };
                for (n, cn) in coeffs.iter().enumerate() {
                    let pn = if n == 0 { p0 } else if n == 1 { p1 } else {
                        let nf = (n - 1) as f64;
                        let lam = lambda as f64;
                        let p2 = if lambda == 0 {
                            2.0 * xv * p1 - p0
                        } else {
                            (2.0 * (nf + lam) * xv * p1 - (nf + 2.0 * lam - 1.0) * p0) / (nf + 1.0)
                        };
                        p0 = p1;
                        p1 = p2;
                        p2
                    };
                    expect += cn * pn;
                    scale = scale.max((cn * pn).norm());
                }
                let e = CoeffExpansion::new(basis, Segment::unit(), coeffs.clone());
                let got = e.eval_local(xv).unwrap();
                prop_assert!((got - expect).norm() < 1e-12 * scale, "{basis:?}: {got} vs {expect}");
            }
        }
    }
}
