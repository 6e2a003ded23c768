//! Machinery for the linearized-gravity Helmholtz kernel: the Riemann
//! function of the characteristic PDE in both its power-series and
//! Bromwich-contour forms, and the oscillatory-integral fundamental
//! solution.

use super::special::Dd;
use crate::error::{Error, Result};
use num_complex::Complex64 as C64;
use std::f64::consts::PI;

/// Complex number with double-double components. The Riemann power series
/// cancels terms as large as e^{30} down to an O(1) result on production
/// segment pairs, which is unrecoverable in plain f64.
#[derive(Clone, Copy, Default)]
struct DdC {
    re: Dd,
    im: Dd,
}

impl DdC {
    fn from_c64(z: C64) -> DdC {
        DdC {
            re: Dd::from_f64(z.re),
            im: Dd::from_f64(z.im),
        }
    }

    fn one() -> DdC {
        DdC::from_c64(C64::new(1.0, 0.0))
    }

    fn value(self) -> C64 {
        C64::new(self.re.value(), self.im.value())
    }

    fn add(self, o: DdC) -> DdC {
        DdC {
            re: self.re.add(o.re),
            im: self.im.add(o.im),
        }
    }

    fn neg(self) -> DdC {
        DdC {
            re: self.re.neg(),
            im: self.im.neg(),
        }
    }

    fn mul(self, o: DdC) -> DdC {
        DdC {
            re: self.re.mul(o.re).sub(self.im.mul(o.im)),
            im: self.re.mul(o.im).add(self.im.mul(o.re)),
        }
    }

    /// Multiply by i·t for real t.
    fn mul_if64(self, t: f64) -> DdC {
        DdC {
            re: self.im.mul_f64(-t),
            im: self.re.mul_f64(t),
        }
    }

    fn div_f64(self, t: f64) -> DdC {
        DdC {
            re: self.re.div_f64(t),
            im: self.im.div_f64(t),
        }
    }

    fn abs_est(self) -> f64 {
        self.re.hi.hypot(self.im.hi)
    }
}

/// Taylor coefficients A_{ij} of the Riemann function about (z0, zeta0),
/// filled shell by shell (shell s holds all entries with i + j = s).
///
/// The recurrence, for i, j >= 1 with zero extension at negative indices:
///   ij A_{ij} + Etilde A_{i-1,j-1} - A_{i-1,j-2}/(8i) + A_{i-2,j-1}/(8i) = 0,
/// together with A_{00} = 1 and A_{i,0} = A_{0,j} = 0, since the function
/// is identically one on both characteristics.
struct SeriesTable {
    n: usize,
    e_tilde: DdC,
    a: Vec<DdC>,
}

impl SeriesTable {
    fn new(e_tilde: C64, n: usize) -> SeriesTable {
        let mut a = vec![DdC::default(); (n + 1) * (n + 1)];
        a[0] = DdC::one();
        SeriesTable {
            n,
            e_tilde: DdC::from_c64(e_tilde),
            a,
        }
    }

    fn at(&self, i: isize, j: isize) -> DdC {
        if i < 0 || j < 0 {
            return DdC::default();
        }
        self.a[i as usize * (self.n + 1) + j as usize]
    }

    fn fill_shell(&mut self, s: usize) {
        let lo = s.saturating_sub(self.n).max(1);
        let hi = (s - 1).min(self.n);
        for i in lo..=hi {
            let j = s - i;
            let (ii, jj) = (i as isize, j as isize);
            // A/(8i) = A·(-i/8); the last term enters negated.
            let rhs = self
                .e_tilde
                .mul(self.at(ii - 1, jj - 1))
                .neg()
                .add(self.at(ii - 1, jj - 2).mul_if64(-0.125))
                .add(self.at(ii - 2, jj - 1).mul_if64(0.125));
            self.a[i * (self.n + 1) + j] = rhs.div_f64((i * j) as f64);
        }
    }
}

/// Riemann function of the gravity-Helmholtz equation in characteristic
/// coordinates, evaluated by its Taylor series about (z0, zeta0).
///
/// The expansion is entire with coefficients decaying super-exponentially,
/// but its terms first grow to exp(2·sqrt(Etilde·|z-z0||zeta-zeta0|))
/// before cancelling; summation runs in double-double precision and the
/// accumulated cancellation is measured, so a finite-precision result is
/// either accurate or refused.
pub fn gravity_riemann_series(
    z: C64,
    zeta: C64,
    z0: C64,
    zeta0: C64,
    e: f64,
    nmax: usize,
) -> Result<C64> {
    if nmax < 2 {
        return Err(Error::InvalidArgument(format!(
            "riemann series needs nmax >= 2, got {nmax}"
        )));
    }
    let e_tilde = C64::new(0.25 * e, 0.0) + (z0 - zeta0) * C64::new(0.0, -0.125);
    let u = DdC::from_c64(z - z0);
    let v = DdC::from_c64(zeta - zeta0);
    let mut table = SeriesTable::new(e_tilde, nmax);

    let mut up = vec![DdC::one()];
    let mut vp = vec![DdC::one()];
    let mut total = DdC::one();
    let mut max_term = 1.0f64;
    let mut quiet = 0usize;
    let mut shell_max = 0.0f64;
    for s in 2..=2 * nmax {
        table.fill_shell(s);
        while up.len() < s.min(nmax + 1) {
            up.push(up[up.len() - 1].mul(u));
            vp.push(vp[vp.len() - 1].mul(v));
        }
        shell_max = 0.0;
        for i in s.saturating_sub(nmax).max(1)..=(s - 1).min(nmax) {
            let j = s - i;
            let term = table.at(i as isize, j as isize).mul(up[i]).mul(vp[j]);
            total = total.add(term);
            shell_max = shell_max.max(term.abs_est());
        }
        max_term = max_term.max(shell_max);
        let scale = total.abs_est().max(1e-300);
        if shell_max < 1e-16 * scale {
            quiet += 1;
            if quiet >= 2 {
                let cancellation = max_term / scale;
                if cancellation > 1e22 {
                    return Err(Error::ResolutionFailure {
                        context: "gravity Riemann series cancellation",
                        reached: s,
                        tail: cancellation,
                    });
                }
                return Ok(total.value());
            }
        } else {
            quiet = 0;
        }
    }
    Err(Error::ResolutionFailure {
        context: "gravity Riemann series truncation",
        reached: nmax,
        tail: shell_max / total.abs_est().max(1e-300),
    })
}

const BROMWICH_TERMS: usize = 10;

/// Coefficients m_1..m_K of the large-s expansion of the transform-side
/// integrand: exp(g(s))/R(s) = exp(vs)·Σ_k m_k s^{-k} + O(s^{-K-1}), where
/// R = sqrt(s² - c) and c = u/(4i). Computed by exact series arithmetic in
/// w = 1/s: the exponent minus vs is an odd series φ(w) (its s¹ part cancels
/// against -us), exponentiated and multiplied by (1 - c w²)^{-1/2}.
fn subtraction_coeffs(c: C64, e_tilde: f64) -> [C64; BROMWICH_TERMS] {
    let mut phi = [C64::new(0.0, 0.0); BROMWICH_TERMS];
    let mut rser = [C64::new(0.0, 0.0); BROMWICH_TERMS];
    rser[0] = C64::new(1.0, 0.0);
    let mut bin_half = 1.0f64;
    let mut bin_3half = 1.0f64;
    let mut bin_neghalf = 1.0f64;
    let mut cpow = C64::new(1.0, 0.0);
    for k in 1..=(BROMWICH_TERMS / 2 + 2) {
        let kf = k as f64;
        bin_half *= (0.5 - kf + 1.0) / kf;
        bin_3half *= (1.5 - kf + 1.0) / kf;
        bin_neghalf *= (-0.5 - kf + 1.0) / kf;
        cpow *= -c;
        let j = 2 * k - 1;
        if j < BROMWICH_TERMS {
            phi[j] += C64::new(0.0, 8.0 * e_tilde * bin_half) * cpow;
        }
        if k >= 2 {
            let j = 2 * k - 3;
            if j < BROMWICH_TERMS {
                phi[j] -= C64::new(0.0, 8.0 / 3.0 * bin_3half) * cpow;
            }
        }
        if 2 * k < BROMWICH_TERMS {
            rser[2 * k] = bin_neghalf * cpow;
        }
    }
    let mut ex = [C64::new(0.0, 0.0); BROMWICH_TERMS];
    ex[0] = C64::new(1.0, 0.0);
    for n in 1..BROMWICH_TERMS {
        let mut acc = C64::new(0.0, 0.0);
        for j in 1..=n {
            acc += phi[j] * ex[n - j] * (j as f64);
        }
        ex[n] = acc / (n as f64);
    }
    let mut m = [C64::new(0.0, 0.0); BROMWICH_TERMS];
    for k in 1..=BROMWICH_TERMS {
        let mut acc = C64::new(0.0, 0.0);
        for a in 0..k {
            acc += ex[a] * rser[k - 1 - a];
        }
        m[k - 1] = acc;
    }
    m
}

/// Riemann function via its Bromwich-integral representation, with the
/// default contour scale.
pub fn gravity_riemann_bromwich(u: C64, v: C64, e_tilde: f64) -> Result<C64> {
    gravity_riemann_bromwich_with(u, v, e_tilde, 2.0)
}

/// Riemann function V(u, v) by numerical inversion of its Laplace-transform
/// representation on a parabolic contour s = a·e^{iα}(1 + iθ)², rotated by
/// α = -arg(v) so the factor e^{vs} decays on both tails for every complex v.
///
/// The first `BROMWICH_TERMS` terms of the large-s expansion are subtracted
/// from the integrand and added back in closed form through the Hankel-loop
/// identity (1/2πi)∮ s^{-k} e^{vs} ds = v^{k-1}/(k-1)!, which the rotation
/// makes exact; the remaining integrand decays absolutely like s^{-K-1} even
/// at v = 0. Trapezoidal quadrature is refined by step halving and tail
/// extension until two levels agree.
pub fn gravity_riemann_bromwich_with(
    u: C64,
    v: C64,
    e_tilde: f64,
    abscissa: f64,
) -> Result<C64> {
    let c = u * C64::new(0.0, -0.25);
    if !(abscissa > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "contour abscissa must be positive, got {abscissa}"
        )));
    }
    if abscissa * abscissa <= 2.0 * c.norm() {
        return Err(Error::InvalidArgument(format!(
            "contour abscissa {abscissa} does not clear the branch points (need abscissa² > |u|/2 = {})",
            0.5 * u.norm()
        )));
    }
    let m = subtraction_coeffs(c, e_tilde);

    let mut addback = m[0];
    let mut pw = C64::new(1.0, 0.0);
    let mut fact = 1.0f64;
    for k in 2..=BROMWICH_TERMS {
        pw *= v;
        fact *= (k - 1) as f64;
        addback += m[k - 1] * pw / fact;
    }

    let rot = if v.norm() > 0.0 {
        v.conj() / v.norm()
    } else {
        C64::new(1.0, 0.0)
    };
    let one = C64::new(1.0, 0.0);
    let integrand = |theta: f64| -> C64 {
        let one_it = C64::new(1.0, theta);
        let s = rot * one_it * one_it * abscissa;
        let ds = rot * one_it * C64::new(0.0, 2.0 * abscissa);
        let s2 = s * s;
        // s - R computed cancellation-free; s³ - R³ via the factored form.
        let sq = (one - c / s2).sqrt();
        let smr = c / (s * (one + sq));
        let r = s - smr;
        let g = smr * C64::new(0.0, -8.0 * e_tilde)
            + C64::new(0.0, 8.0 / 3.0) * smr * (s2 + s * r + r * r)
            + (v - u) * s;
        let is = s.inv();
        let mut poly = m[BROMWICH_TERMS - 1];
        for k in (0..BROMWICH_TERMS - 1).rev() {
            poly = poly * is + m[k];
        }
        poly *= is;
        (g.exp() / r - (v * s).exp() * poly) * ds
    };

    let contour_sum = |h: f64, theta_max: f64| -> C64 {
        let n = (theta_max / h).ceil() as i64;
        let mut acc = C64::new(0.0, 0.0);
        for j in -n..=n {
            acc += integrand(h * j as f64);
        }
        acc * C64::new(0.0, -h / (2.0 * PI))
    };

    let mut theta_max = 8.0f64;
    let mut h = 1.0 / 16.0;
    let mut prev = contour_sum(h, theta_max);
    for _ in 0..9 {
        let mut tail = (integrand(theta_max).norm() + integrand(-theta_max).norm()) * theta_max;
        while tail > 1e-13 * (1.0 + prev.norm()) && theta_max < 400.0 {
            theta_max *= 1.4;
            prev = contour_sum(h, theta_max);
            tail = (integrand(theta_max).norm() + integrand(-theta_max).norm()) * theta_max;
        }
        let next = contour_sum(0.5 * h, theta_max);
        if (next - prev).norm() <= 1e-12 + 1e-11 * next.norm() {
            return Ok(addback + next);
        }
        h *= 0.5;
        prev = next;
    }
    Err(Error::ResolutionFailure {
        context: "Bromwich contour quadrature",
        reached: (2.0 * theta_max / h) as usize,
        tail: prev.norm(),
    })
}

/// Fundamental solution of the gravity-Helmholtz equation
/// Δu + (E + x₂)u = 0 at points x = (x₁, x₂), y (encoded re = first
/// coordinate, im = second):
///
///   Φ(x, y) = (1/4π) ∫₀^∞ exp{i[r²/(4t) + a t - t³/12]} dt/t,
///
/// with r = |x - y| and a = E + (x₂ + y₂)/2. The integrand has stationary
/// points at t₁ < t₂ (real when r < 2a); the contour t = exp(σ + iθ(σ))
/// bends below the real axis before t₁, above it between the saddles, and
/// below again past t₂, following the sign of Ψ'(t) so the phase has
/// nonnegative imaginary part along the whole path. Trapezoidal quadrature
/// in σ then converges spectrally.
pub fn gravity_fundamental(x: C64, y: C64, e: f64) -> Result<C64> {
    let r = (x - y).norm();
    if r == 0.0 {
        return Err(Error::InvalidArgument(
            "gravity fundamental solution at coincident points".into(),
        ));
    }
    let a = e + 0.5 * (x.im + y.im);
    if !(a > 0.0) || r > 1.9 * a {
        return Err(Error::Unsupported(format!(
            "point pair outside the saddle-contour scope: need 0 < |x-y| <= 1.9·(E+(x₂+y₂)/2), got |x-y| = {r:.3e}, E+(x₂+y₂)/2 = {a:.3e}"
        )));
    }
    let r2 = r * r;
    let t2 = (2.0 * a + (4.0 * a * a - r2).sqrt()).sqrt();
    let t1 = r / t2;
    let (s1, s2) = (t1.ln(), t2.ln());
    let sm = 0.5 * (s1 + s2);
    let psi_im = |t: C64| -> f64 {
        (r2 * 0.25 * t.inv() + a * t - t * t * t / 12.0).im
    };

    let beta1 = PI / 4.0;
    let mut beta2 = 0.95 * PI / 6.0;
    let mut worst_dip = 0.0f64;
    for _ in 0..4 {
        let theta = |sig: f64| -> f64 {
            let b = beta1 + (beta2 - beta1) * 0.5 * (1.0 + (sig - sm).tanh());
            -b * (sig - s1).tanh() * (sig - s2).tanh()
        };
        let theta_prime = |sig: f64| -> f64 {
            let (ta, tb, tm) = ((sig - s1).tanh(), (sig - s2).tanh(), (sig - sm).tanh());
            let b = beta1 + (beta2 - beta1) * 0.5 * (1.0 + tm);
            let bp = (beta2 - beta1) * 0.5 * (1.0 - tm * tm);
            -(bp * ta * tb + b * (1.0 - ta * ta) * tb + b * ta * (1.0 - tb * tb))
        };
        let node = |sig: f64| C64::from_polar(sig.exp(), theta(sig));

        let mut lo = s1 - 1.0;
        while psi_im(node(lo)) < 45.0 && lo > s1 - 80.0 {
            lo -= 0.5;
        }
        let mut hi = s2 + 1.0;
        while psi_im(node(hi)) < 45.0 && hi < s2 + 40.0 {
            hi += 0.5;
        }

        // Decay guard: the phase must not develop a growth pocket anywhere
        // on the contour; if it does, flatten the tail angle and retry.
        let scan = ((hi - lo) / 0.05).ceil() as usize;
        let mut min_im = f64::INFINITY;
        for j in 0..=scan {
            let sig = lo + (hi - lo) * j as f64 / scan as f64;
            min_im = min_im.min(psi_im(node(sig)));
        }
        if min_im < -0.5 {
            worst_dip = worst_dip.min(min_im);
            beta2 *= 0.7;
            continue;
        }

        let quadrature = |h: f64| -> C64 {
            let n = ((hi - lo) / h).ceil() as usize;
            let step = (hi - lo) / n as f64;
            let mut acc = C64::new(0.0, 0.0);
            for j in 0..=n {
                let sig = lo + step * j as f64;
                let t = node(sig);
                let psi = r2 * 0.25 * t.inv() + a * t - t * t * t / 12.0;
                let w = if j == 0 || j == n { 0.5 } else { 1.0 };
                acc += (psi * C64::new(0.0, 1.0)).exp() * C64::new(1.0, theta_prime(sig)) * (w * step);
            }
            acc / (4.0 * PI)
        };

        let mut h = 0.125;
        let mut prev = quadrature(h);
        for _ in 0..6 {
            let next = quadrature(0.5 * h);
            if (next - prev).norm() <= 1e-12 + 1e-11 * next.norm() {
                return Ok(next);
            }
            h *= 0.5;
            prev = next;
        }
        return Err(Error::ResolutionFailure {
            context: "gravity fundamental-solution quadrature",
            reached: ((hi - lo) / h) as usize,
            tail: prev.norm(),
        });
    }
    Err(Error::ResolutionFailure {
        context: "gravity fundamental-solution contour deformation",
        reached: 0,
        tail: worst_dip,
    })
}
