//! Frequency-domain operators: sampled continuous wavelets and the real 2D
//! Fourier transform with learnable spectral weights.

mod fft;
mod wavelet;

pub use fft::{half_width, irfft2, rfft2, FourierWeights, Spectrum};
pub use wavelet::{
    effective_scale, mexican_hat_amplitude, raw_for_scale, sample_positions, WaveletKind,
    WaveletParams, DEFAULT_SUPPORT, SCALE_FLOOR,
};
