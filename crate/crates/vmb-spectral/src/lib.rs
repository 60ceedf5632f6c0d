//! Spectral analysis of the linearized one-species Vlasov–Maxwell–Boltzmann
//! system in the diffusion scaling.
//!
//! The library discretizes the hard-sphere linearized Boltzmann operator on a
//! tensor Gauss–Hermite velocity grid, assembles the per-Fourier-mode
//! generator coupling the kinetic equation to the Maxwell fields, and exposes
//! the machinery needed to measure its spectral structure and long-time
//! behavior:
//!
//! - [`collision`]: collision-operator assembly, kernel/frequency evaluation,
//!   macro–micro projections, and the transport (viscosity) coefficients.
//! - [`mode`]: the per-mode generator, its weighted metric, eigensolves, and
//!   the closed-form low-frequency eigenvalue/eigenvector tables.
//! - [`dispersion`]: dispersion determinants, contraction-map root solvers,
//!   high-frequency eigenpairs, and branch labeling.
//! - [`semigroup`]: exact per-mode propagation, the three-part semigroup
//!   decomposition, the fluid limiting semigroup, fluid-approximation error
//!   curves, and decay-exponent measurement.
//! - [`synthesis`]: radial Fourier grids, initial-data construction, global
//!   norms, and an independent ODE integration of the limiting fluid system.
//! - [`kernels`]: decay-rate probes for heat-type, mixed-order, and
//!   Klein–Gordon-type dispersive kernels.
//! - [`suite`]: the experiment driver producing CSV/JSON/report artifacts.
//!
//! Velocity-space vectors are stored in *weighted* (symmetrized) grid
//! coordinates throughout: a function `f(v)` is represented by the vector of
//! `f(v_i)·√w_i`, which turns quadrature inner products into plain dot
//! products and makes the collision matrix symmetric.

pub mod cache;
pub mod collision;
pub mod dispersion;
pub mod kernels;
pub mod mode;
pub mod quadrature;
pub mod semigroup;
pub mod suite;
pub mod synthesis;

use std::sync::Once;

static BLAS_INIT: Once = Once::new();

/// Pin the linked BLAS to a single thread.
///
/// Parallelism in this crate lives at the task level (rayon over rows, shells,
/// and parameter points); a threaded BLAS underneath would make reduction
/// order — and therefore output bytes — depend on the machine. Must run
/// before the first BLAS call of the process to take effect.
pub fn init_single_thread_blas() {
    BLAS_INIT.call_once(|| {
        std::env::set_var("OPENBLAS_NUM_THREADS", "1");
        std::env::set_var("OMP_NUM_THREADS", "1");
    });
}

/// Complex scalar used across the crate.
pub type C64 = num_complex::Complex<f64>;

#[cfg(test)]
pub(crate) mod test_support {
    use crate::collision::{
        assemble_collision, build_quadrature, transport_coefficients, CollisionMatrices,
        MacroMoments, Scheme,
    };
    use std::sync::OnceLock;

    /// One shared coarse assembly for every test module in the crate.
    pub(crate) fn shared_n8() -> &'static (CollisionMatrices, MacroMoments) {
        static CELL: OnceLock<(CollisionMatrices, MacroMoments)> = OnceLock::new();
        CELL.get_or_init(|| {
            let q = build_quadrature(8, Scheme::TensorHermite).expect("N = 8 quadrature");
            let c = assemble_collision(q).expect("N = 8 assembly");
            let m = transport_coefficients(&c).expect("N = 8 transport moments");
            (c, m)
        })
    }
}

/// Errors surfaced by operator assembly, solvers, and the experiment driver.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("linear algebra backend failure: {0}")]
    Linalg(#[from] ndarray_linalg::error::LinalgError),
    #[error("root solver did not converge: {0}")]
    RootSolve(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("constraint violation: {0}")]
    ConstraintViolation(String),
    #[error("fit window too short: {0}")]
    FitWindow(String),
    #[error("insufficient sample span: {0}")]
    InsufficientSpan(String),
    #[error("quadrature did not converge: {0}")]
    QuadratureNonconvergence(String),
    #[error("oscillation budget exceeded: t = {t} beyond t_max = {t_max}")]
    OscillationBudget { t: f64, t_max: f64 },
    #[error("cache: {0}")]
    Cache(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;
