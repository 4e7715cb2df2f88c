//! Scalar abstraction for the numeric kernels.
//!
//! Everything below the experiment harness is generic over [`Real`] so the
//! same code runs in f32 or f64. The harness itself pins f64 (see the
//! aliases at the crate root): the displacement bounds and the
//! finite-difference gradient checks need the headroom.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};

/// Floating-point scalar usable throughout the numeric core.
pub trait Real: Float + FromPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static {
    /// Shorthand for lossy conversion from an f64 literal.
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 conversion")
    }
}

impl<T> Real for T where
    T: Float + FromPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
}
