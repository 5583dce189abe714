//! Non-Cartesian 3D cones MRI reconstruction: trajectory generation, NUFFT,
//! SENSE encoding, ISTA and unrolled-network reconstruction, respiratory
//! motion estimation, autofocus correction and an acquisition simulator.

pub mod autofocus;
pub mod encoding;
pub mod error;
pub mod fft;
pub mod io;
pub mod motion;
pub mod nufft;
pub mod recon;
pub mod sim;
pub mod trajectory;
pub mod unrolled;
pub mod volume;

pub use error::{Error, Result};
