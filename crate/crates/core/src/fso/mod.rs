//! Fourier subnetwork operator: a spectral linear layer whose real and
//! imaginary weights are masked independently.

mod fft;
mod layer;

pub use fft::{Fft2Plan, FftPlan};
pub use layer::{fso_forward, FsoCache, FsoGrads, FsoLayer};

use crate::config::FsoPlacement;

/// Closed-form parameter count of a placement between `in_ch` and `out_ch` channels.
pub fn fso_param_count(placement: &FsoPlacement, in_ch: usize, out_ch: usize) -> usize {
    let parts = if placement.use_imaginary { 2 } else { 1 };
    placement.modes_h * placement.modes_w * in_ch * out_ch * parts
}
