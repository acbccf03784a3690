use super::{DspConfig, DspError};

/// HTK mel scale.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters on the HTK mel scale, without area normalisation.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank {
    n_mels: usize,
    n_bins: usize,
    /// Row-major `n_mels × n_bins`.
    weights: Vec<f64>,
    centers_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn row(&self, m: usize) -> &[f64] {
        &self.weights[m * self.n_bins..(m + 1) * self.n_bins]
    }

    pub fn centers_hz(&self) -> &[f64] {
        &self.centers_hz
    }

    /// Mel energies for a one-sided power spectrum.
    pub fn apply(&self, power: &[f64]) -> Vec<f64> {
        debug_assert_eq!(power.len(), self.n_bins);
        (0..self.n_mels)
            .map(|m| self.row(m).iter().zip(power).map(|(w, p)| w * p).sum())
            .collect()
    }

    /// Index of the filter whose center is closest to `hz`.
    pub fn nearest_filter(&self, hz: f64) -> usize {
        let mut best = 0;
        for (m, c) in self.centers_hz.iter().enumerate() {
            if (c - hz).abs() < (self.centers_hz[best] - hz).abs() {
                best = m;
            }
        }
        best
    }
}

/// Build the `n_mels × (n_fft/2 + 1)` filterbank for `cfg` at `sample_rate`.
///
/// A triangle narrow enough to fall between two FFT bins would otherwise be
/// an all-zero row; it takes unit weight at the bin nearest its center.
pub fn mel_filterbank(cfg: &DspConfig, sample_rate: u32) -> Result<MelFilterbank, DspError> {
    let geom = cfg.geometry(sample_rate)?;
    let n_bins = geom.n_fft / 2 + 1;
    let bin_hz = sample_rate as f64 / geom.n_fft as f64;
    let (lo_mel, hi_mel) = (hz_to_mel(geom.fmin_hz), hz_to_mel(geom.fmax_hz));
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo_mel + (hi_mel - lo_mel) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let mut weights = vec![0.0; cfg.n_mels * n_bins];
    for m in 0..cfg.n_mels {
        let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        let row = &mut weights[m * n_bins..(m + 1) * n_bins];
        for (k, w) in row.iter_mut().enumerate() {
            let f = k as f64 * bin_hz;
            let rising = (f - lo) / (center - lo);
            let falling = (hi - f) / (hi - center);
            *w = rising.min(falling).max(0.0);
        }
        if row.iter().all(|&w| w == 0.0) {
            let k = ((center / bin_hz).round() as usize).min(n_bins - 1);
            row[k] = 1.0;
        }
    }
    Ok(MelFilterbank {
        n_mels: cfg.n_mels,
        n_bins,
        weights,
        centers_hz: edges[1..=cfg.n_mels].to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn htk_reference_point() {
        assert!((hz_to_mel(700.0) - 781.17).abs() < 0.01);
        assert!((hz_to_mel(700.0) - 2595.0 * 2f64.log10()).abs() < 1e-12);
        assert!((mel_to_hz(hz_to_mel(1234.5)) - 1234.5).abs() < 1e-9);
    }

    #[test]
    fn two_filters_full_band() {
        let cfg = DspConfig {
            n_mels: 2,
            ..DspConfig::default()
        };
        let fb = mel_filterbank(&cfg, 16_000).unwrap();
        assert_eq!(fb.n_mels(), 2);
        assert_eq!(fb.n_bins(), 257);
        assert!(fb.centers_hz()[0] < fb.centers_hz()[1]);
    }

    #[test]
    fn default_bank_shape_and_rows() {
        let fb = mel_filterbank(&DspConfig::default(), 16_000).unwrap();
        assert_eq!((fb.n_mels(), fb.n_bins()), (128, 257));
        assert!(fb.centers_hz().windows(2).all(|w| w[0] < w[1]));
        for m in 0..128 {
            assert!(fb.row(m).iter().all(|&w| w >= 0.0));
            assert!(fb.row(m).iter().sum::<f64>() > 0.0);
        }
    }

    #[test]
    fn adjacent_filters_overlap() {
        let cfg = DspConfig {
            n_mels: 40,
            ..DspConfig::default()
        };
        let fb = mel_filterbank(&cfg, 16_000).unwrap();
        for m in 0..39 {
            let shared = fb
                .row(m)
                .iter()
                .zip(fb.row(m + 1))
                .any(|(a, b)| *a > 0.0 && *b > 0.0);
            assert!(shared, "filters {m} and {} do not overlap", m + 1);
        }
    }

    #[test]
    fn passband_is_covered() {
        let fb = mel_filterbank(&DspConfig::default(), 16_000).unwrap();
        let bin_hz = 16_000.0 / 512.0;
        let (first, last) = (fb.centers_hz()[0], fb.centers_hz()[127]);
        for k in 0..257 {
            let f = k as f64 * bin_hz;
            if f >= first && f <= last {
                let total: f64 = (0..128).map(|m| fb.row(m)[k]).sum();
                assert!(total > 0.0, "bin {k} uncovered");
            }
        }
    }

    #[test]
    fn band_above_nyquist_is_rejected() {
        let cfg = DspConfig {
            fmax_hz: Some(8001.0),
            ..DspConfig::default()
        };
        assert!(matches!(mel_filterbank(&cfg, 16_000), Err(DspError::InvalidBand { .. })));
    }
}
