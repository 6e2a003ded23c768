//! Spectral solver for univariate singular integral equations on unions of
//! straight segments in the plane.
//!
//! The crate is organized bottom-up:
//!
//! * [`cheb`]: Chebyshev/ultraspherical expansions, fast transforms, adaptive
//!   fitting on segments.
//! * [`opalg`]: lazy banded operators on coefficient space (differentiation,
//!   basis conversion, multiplication), almost-banded systems with dense
//!   constraint rows, and segment interlacing.
//! * [`lowrank`]: bivariate kernel compression by pivoted Gaussian
//!   elimination and pivoted Cholesky, plus kernel splitting into
//!   logarithmic and smooth parts.
//! * [`sio`]: the singular integral operators (Cauchy, logarithmic,
//!   finite-part) on weighted Chebyshev bases, kernel-wrapped operator sums,
//!   and equation assembly.
//! * [`infqr`]: the adaptive QR factorization of almost-banded
//!   infinite-dimensional systems, with replayable factorization caches.
//! * [`fieldeval`]: spectrally accurate evaluation of Cauchy and logarithmic
//!   transforms of the solved densities anywhere in the plane.
//! * [`physics`]: Laplace, Helmholtz, and gravity-Helmholtz kernels, layer
//!   potential splittings, and complete scattering/capacitor drivers.

pub mod cheb;
pub mod error;
pub mod fieldeval;
pub mod infqr;
pub mod lowrank;
pub mod opalg;
pub mod physics;
pub mod sio;

pub use error::{Error, Result};
