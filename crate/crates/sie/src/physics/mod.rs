//! Physical kernels and drivers.

mod gravity;
mod kernels;
mod scattering;
mod special;

pub use gravity::{
    gravity_fundamental, gravity_riemann_bromwich, gravity_riemann_bromwich_with,
    gravity_riemann_series,
};
pub use kernels::{
    gravity_kernel, helmholtz_kernel, laplace_kernel, Family, Incident, PDEKernel,
};
pub use scattering::{
    faraday_plates, near_singular_scenario, solve_faraday, solve_scattering, Bc,
    FaradayReport, NearSingularRun, PlateOrientation, ScatteringProblem, ScatteringSolution,
};
pub use special::{bessel_j0, bessel_j1, bessel_y0, bessel_y1};
