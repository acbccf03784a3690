use rustfft::num_complex::Complex;
use rustfft::Fft;

use super::DspError;

/// Symmetric Hamming window `0.54 − 0.46·cos(2πk/(n−1))`.
pub fn hamming_window(n: usize) -> Result<Vec<f64>, DspError> {
    if n < 2 {
        return Err(DspError::InvalidLength(n));
    }
    let denom = (n - 1) as f64;
    Ok((0..n)
        .map(|k| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * k as f64 / denom).cos())
        .collect())
}

/// One-sided power spectrum `|DFT_k|²`, `k = 0..=n_fft/2`, of `frame`
/// zero-padded to `n_fft`.
pub fn power_spectrum(frame: &[f64], n_fft: usize) -> Result<Vec<f64>, DspError> {
    let fft = rustfft::FftPlanner::new().plan_fft_forward(n_fft);
    power_spectrum_with(frame, n_fft, &*fft)
}

pub(super) fn power_spectrum_with(frame: &[f64], n_fft: usize, fft: &dyn Fft<f64>) -> Result<Vec<f64>, DspError> {
    let bins = full_spectrum(frame, n_fft, fft)?;
    Ok(bins[..=n_fft / 2].iter().map(|c| c.norm_sqr()).collect())
}

fn full_spectrum(frame: &[f64], n_fft: usize, fft: &dyn Fft<f64>) -> Result<Vec<Complex<f64>>, DspError> {
    if frame.len() > n_fft {
        return Err(DspError::FrameTooLong {
            frame_len: frame.len(),
            n_fft,
        });
    }
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    for (b, &s) in buf.iter_mut().zip(frame) {
        b.re = s;
    }
    fft.process(&mut buf);
    Ok(buf)
}

/// Sum of `|DFT_k|²` over all `n_fft` bins, rebuilt from the one-sided
/// spectrum of a real frame.
pub fn two_sided_power(one_sided: &[f64]) -> f64 {
    let last = one_sided.len() - 1;
    one_sided
        .iter()
        .enumerate()
        .map(|(k, p)| if k == 0 || k == last { *p } else { 2.0 * p })
        .sum()
}
