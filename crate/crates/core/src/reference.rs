//! The three-level, two-outcome instance on which the trace distance between
//! filter and true state grows in expectation.
//!
//! ```text
//! ρ = diag(1/2, 1/2, 0)      σ = diag(0, 1/2, 1/2)
//! M1 = diag(1, 1/√2, 0)      M2 = diag(0, 1/√2, 1)
//! ```
//!
//! Expected printed values: trace distance 4/3 after the jump against 1
//! before; fidelity 1/4 + 1/12 after against 1/4 before.

use std::f64::consts::FRAC_1_SQRT_2;

use crate::channels::KrausChannel;
use crate::linalg::from_real_diagonal;
use crate::states::DensityMatrix;

pub const TRACE_DISTANCE_AFTER: f64 = 4.0 / 3.0;
pub const TRACE_DISTANCE_BEFORE: f64 = 1.0;
pub const FIDELITY_AFTER: f64 = 1.0 / 4.0 + 1.0 / 12.0;
pub const FIDELITY_BEFORE: f64 = 1.0 / 4.0;

pub fn channel() -> KrausChannel {
    KrausChannel::new(vec![
        from_real_diagonal(&[1.0, FRAC_1_SQRT_2, 0.0]),
        from_real_diagonal(&[0.0, FRAC_1_SQRT_2, 1.0]),
    ])
    .expect("reference operators are complete")
}

/// The true state `ρ`.
pub fn rho() -> DensityMatrix {
    DensityMatrix::new(from_real_diagonal(&[0.5, 0.5, 0.0])).expect("valid state")
}

/// The estimate `σ`.
pub fn sigma() -> DensityMatrix {
    DensityMatrix::new(from_real_diagonal(&[0.0, 0.5, 0.5])).expect("valid state")
}

/// `(channel, σ, ρ)`.
pub fn instance() -> (KrausChannel, DensityMatrix, DensityMatrix) {
    (channel(), sigma(), rho())
}
