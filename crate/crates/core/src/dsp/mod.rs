//! Log-mel spectrogram frontend: framing, Hamming window, FFT power
//! spectrum, HTK mel filterbank and a floored natural log.

mod cache;
mod mel;
mod spectral;

use serde::{Deserialize, Serialize};

pub use cache::{read_feature_cache, write_feature_cache, CACHE_MAGIC, CACHE_VERSION};
pub use mel::{hz_to_mel, mel_filterbank, mel_to_hz, MelFilterbank};
pub use spectral::{hamming_window, power_spectrum, two_sided_power};

#[derive(Debug, thiserror::Error)]
pub enum DspError {
    #[error("clip has {n_samples} samples, fewer than one frame of {frame_len}")]
    ClipTooShort { n_samples: usize, frame_len: usize },
    #[error("window length {0} is below 2")]
    InvalidLength(usize),
    #[error("frame of {frame_len} samples exceeds n_fft = {n_fft}")]
    FrameTooLong { frame_len: usize, n_fft: usize },
    #[error("invalid band [{fmin_hz}, {fmax_hz}] Hz at sample rate {sample_rate}")]
    InvalidBand {
        fmin_hz: f64,
        fmax_hz: f64,
        sample_rate: u32,
    },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid clip {clip_id}: {reason}")]
    InvalidClip { clip_id: String, reason: String },
    #[error("clip {clip_id} is at {got} Hz, extractor expects {expected} Hz")]
    SampleRateMismatch {
        clip_id: String,
        got: u32,
        expected: u32,
    },
    #[error("feature cache: {0}")]
    Cache(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Mono waveform with its sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
    pub label: Option<usize>,
    pub clip_id: String,
}

impl AudioClip {
    pub fn new(
        clip_id: impl Into<String>,
        samples: Vec<f64>,
        sample_rate: u32,
        label: Option<usize>,
    ) -> Result<Self, DspError> {
        let clip = Self {
            samples,
            sample_rate,
            label,
            clip_id: clip_id.into(),
        };
        clip.validate()?;
        Ok(clip)
    }

    pub fn validate(&self) -> Result<(), DspError> {
        let fail = |reason: &str| DspError::InvalidClip {
            clip_id: self.clip_id.clone(),
            reason: reason.to_string(),
        };
        if self.sample_rate == 0 {
            return Err(fail("sample rate is zero"));
        }
        if self.samples.is_empty() {
            return Err(fail("no samples"));
        }
        if !self.samples.iter().all(|s| s.is_finite()) {
            return Err(fail("non-finite sample"));
        }
        Ok(())
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DspConfig {
    pub frame_len_ms: f64,
    pub hop_ms: f64,
    /// FFT size; `None` picks the next power of two at or above the frame length.
    pub n_fft: Option<usize>,
    pub n_mels: usize,
    pub fmin_hz: f64,
    /// Upper band edge; `None` means Nyquist.
    pub fmax_hz: Option<f64>,
    pub log_floor: f64,
}

impl Default for DspConfig {
    fn default() -> Self {
        Self {
            frame_len_ms: 25.0,
            hop_ms: 10.0,
            n_fft: None,
            n_mels: 128,
            fmin_hz: 0.0,
            fmax_hz: None,
            log_floor: 1e-10,
        }
    }
}

/// Sample-domain geometry of a [`DspConfig`] at one sample rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameGeometry {
    pub sample_rate: u32,
    pub frame_len: usize,
    pub hop: usize,
    pub n_fft: usize,
    pub fmin_hz: f64,
    pub fmax_hz: f64,
}

impl FrameGeometry {
    pub fn n_frames(&self, n_samples: usize) -> Option<usize> {
        (n_samples >= self.frame_len).then(|| (n_samples - self.frame_len) / self.hop + 1)
    }
}

impl DspConfig {
    pub fn geometry(&self, sample_rate: u32) -> Result<FrameGeometry, DspError> {
        if sample_rate == 0 {
            return Err(DspError::InvalidConfig("sample rate must be positive".into()));
        }
        if !(self.hop_ms > 0.0 && self.hop_ms <= self.frame_len_ms) {
            return Err(DspError::InvalidConfig(format!(
                "need 0 < hop_ms <= frame_len_ms, got hop {} frame {}",
                self.hop_ms, self.frame_len_ms
            )));
        }
        if !(self.log_floor > 0.0) {
            return Err(DspError::InvalidConfig("log_floor must be positive".into()));
        }
        if self.n_mels == 0 {
            return Err(DspError::InvalidConfig("n_mels must be positive".into()));
        }
        let sr = sample_rate as f64;
        let frame_len = (self.frame_len_ms * sr / 1000.0).round() as usize;
        let hop = (self.hop_ms * sr / 1000.0).round() as usize;
        if frame_len < 2 || hop == 0 {
            return Err(DspError::InvalidConfig(format!(
                "frame of {frame_len} samples / hop of {hop} samples is too small"
            )));
        }
        let n_fft = match self.n_fft {
            Some(n) if !n.is_power_of_two() => {
                return Err(DspError::InvalidConfig(format!("n_fft {n} is not a power of two")))
            }
            Some(n) if n < frame_len => {
                return Err(DspError::FrameTooLong { frame_len, n_fft: n })
            }
            Some(n) => n,
            None => frame_len.next_power_of_two(),
        };
        let nyquist = sr / 2.0;
        let fmax_hz = self.fmax_hz.unwrap_or(nyquist);
        if !(self.fmin_hz >= 0.0 && self.fmin_hz < fmax_hz && fmax_hz <= nyquist) {
            return Err(DspError::InvalidBand {
                fmin_hz: self.fmin_hz,
                fmax_hz,
                sample_rate,
            });
        }
        Ok(FrameGeometry {
            sample_rate,
            frame_len,
            hop,
            n_fft,
            fmin_hz: self.fmin_hz,
            fmax_hz,
        })
    }
}

/// Time × mel grid of floored natural-log mel energies.
#[derive(Debug, Clone, PartialEq)]
pub struct LogMelSpectrogram {
    pub clip_id: String,
    pub n_frames: usize,
    pub n_mels: usize,
    /// Row-major `n_frames × n_mels`.
    pub values: Vec<f64>,
}

impl LogMelSpectrogram {
    pub fn frame(&self, t: usize) -> &[f64] {
        &self.values[t * self.n_mels..(t + 1) * self.n_mels]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_frames, self.n_mels)
    }
}

/// Split `clip` into overlapping frames; a trailing partial frame is dropped.
pub fn frame_signal(clip: &AudioClip, cfg: &DspConfig) -> Result<Vec<Vec<f64>>, DspError> {
    let geom = cfg.geometry(clip.sample_rate)?;
    frames_with(&clip.samples, &geom)
}

fn frames_with(samples: &[f64], geom: &FrameGeometry) -> Result<Vec<Vec<f64>>, DspError> {
    let n = geom.n_frames(samples.len()).ok_or(DspError::ClipTooShort {
        n_samples: samples.len(),
        frame_len: geom.frame_len,
    })?;
    Ok((0..n)
        .map(|i| samples[i * geom.hop..i * geom.hop + geom.frame_len].to_vec())
        .collect())
}

/// Reusable extractor holding the window, filterbank and FFT plan for one
/// sample rate.
pub struct LogMelExtractor {
    cfg: DspConfig,
    geom: FrameGeometry,
    window: Vec<f64>,
    filterbank: MelFilterbank,
    fft: std::sync::Arc<dyn rustfft::Fft<f64>>,
}

impl LogMelExtractor {
    pub fn new(cfg: &DspConfig, sample_rate: u32) -> Result<Self, DspError> {
        let geom = cfg.geometry(sample_rate)?;
        let window = hamming_window(geom.frame_len)?;
        let filterbank = mel_filterbank(cfg, sample_rate)?;
        let fft = rustfft::FftPlanner::new().plan_fft_forward(geom.n_fft);
        Ok(Self {
            cfg: cfg.clone(),
            geom,
            window,
            filterbank,
            fft,
        })
    }

    pub fn geometry(&self) -> &FrameGeometry {
        &self.geom
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.filterbank
    }

    pub fn extract(&self, clip: &AudioClip) -> Result<LogMelSpectrogram, DspError> {
        clip.validate()?;
        if clip.sample_rate != self.geom.sample_rate {
            return Err(DspError::SampleRateMismatch {
                clip_id: clip.clip_id.clone(),
                got: clip.sample_rate,
                expected: self.geom.sample_rate,
            });
        }
        let frames = frames_with(&clip.samples, &self.geom)?;
        let floor = self.cfg.log_floor;
        let n_mels = self.filterbank.n_mels();
        let mut values = Vec::with_capacity(frames.len() * n_mels);
        let mut windowed = vec![0.0; self.geom.frame_len];
        for frame in &frames {
            for ((w, s), h) in windowed.iter_mut().zip(frame).zip(&self.window) {
                *w = s * h;
            }
            let power = spectral::power_spectrum_with(&windowed, self.geom.n_fft, &*self.fft)?;
            values.extend(
                self.filterbank
                    .apply(&power)
                    .into_iter()
                    .map(|e| e.max(floor).ln()),
            );
        }
        Ok(LogMelSpectrogram {
            clip_id: clip.clip_id.clone(),
            n_frames: frames.len(),
            n_mels,
            values,
        })
    }
}

pub fn log_mel_spectrogram(clip: &AudioClip, cfg: &DspConfig) -> Result<LogMelSpectrogram, DspError> {
    LogMelExtractor::new(cfg, clip.sample_rate)?.extract(clip)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn clip(n: usize) -> AudioClip {
        let samples = (0..n).map(|i| ((i * 7919) % 1000) as f64 / 1000.0 - 0.5).collect();
        AudioClip::new("c", samples, 16_000, None).unwrap()
    }

    #[test]
    fn four_seconds_gives_398_frames() {
        let frames = frame_signal(&clip(64_000), &DspConfig::default()).unwrap();
        // start-index loop oracle
        let mut starts = 0;
        let mut s = 0;
        while s + 400 <= 64_000 {
            starts += 1;
            s += 160;
        }
        assert_eq!(frames.len(), starts);
        assert_eq!(frames.len(), 398);
        assert!(frames.iter().all(|f| f.len() == 400));
    }

    #[test]
    fn single_frame_equals_input() {
        let c = clip(400);
        let frames = frame_signal(&c, &DspConfig::default()).unwrap();
        assert_eq!(frames, vec![c.samples.clone()]);
    }

    #[test]
    fn short_clip_is_rejected() {
        assert!(matches!(
            frame_signal(&clip(399), &DspConfig::default()),
            Err(DspError::ClipTooShort { n_samples: 399, frame_len: 400 })
        ));
    }

    #[test]
    fn default_fft_size_is_512_at_16k() {
        assert_eq!(DspConfig::default().geometry(16_000).unwrap().n_fft, 512);
    }

    #[test]
    fn config_validation() {
        let bad_hop = DspConfig {
            hop_ms: 30.0,
            ..DspConfig::default()
        };
        assert!(bad_hop.geometry(16_000).is_err());
        let bad_band = DspConfig {
            fmax_hz: Some(9000.0),
            ..DspConfig::default()
        };
        assert!(matches!(bad_band.geometry(16_000), Err(DspError::InvalidBand { .. })));
        let small_fft = DspConfig {
            n_fft: Some(256),
            ..DspConfig::default()
        };
        assert!(matches!(small_fft.geometry(16_000), Err(DspError::FrameTooLong { .. })));
    }

    #[test]
    fn silence_hits_the_floor() {
        let c = AudioClip::new("s", vec![0.0; 4000], 16_000, None).unwrap();
        let spec = log_mel_spectrogram(&c, &DspConfig::default()).unwrap();
        let floor = 1e-10f64.ln();
        assert!(spec.values.iter().all(|&v| v == floor));
    }

    #[test]
    fn default_shape_for_four_seconds() {
        let spec = log_mel_spectrogram(&clip(64_000), &DspConfig::default()).unwrap();
        assert_eq!(spec.shape(), (398, 128));
        assert!(spec.values.iter().all(|v| v.is_finite() && *v >= 1e-10f64.ln()));
    }

    #[test]
    fn rate_mismatch_is_an_error() {
        let ex = LogMelExtractor::new(&DspConfig::default(), 16_000).unwrap();
        let other = AudioClip::new("x", vec![0.1; 8000], 8000, None).unwrap();
        assert!(matches!(ex.extract(&other), Err(DspError::SampleRateMismatch { .. })));
    }

    #[test]
    fn clip_validation() {
        assert!(AudioClip::new("e", vec![], 16_000, None).is_err());
        assert!(AudioClip::new("z", vec![0.0], 0, None).is_err());
        assert!(AudioClip::new("n", vec![f64::NAN], 16_000, None).is_err());
    }

    #[test]
    fn extraction_is_bit_deterministic() {
        let c = clip(8000);
        let a = log_mel_spectrogram(&c, &DspConfig::default()).unwrap();
        let b = log_mel_spectrogram(&c, &DspConfig::default()).unwrap();
        assert!(a.values.iter().zip(&b.values).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn amplitude_scaling_shifts_log_energy() {
        let c = clip(4000);
        let mut scaled = c.clone();
        let gain = 0.37;
        scaled.samples.iter_mut().for_each(|s| *s *= gain);
        let cfg = DspConfig::default();
        let a = log_mel_spectrogram(&c, &cfg).unwrap();
        let b = log_mel_spectrogram(&scaled, &cfg).unwrap();
        let floor = cfg.log_floor.ln();
        for (x, y) in a.values.iter().zip(&b.values) {
            if *y > floor + 1e-6 {
                assert!((y - x - 2.0 * gain.ln()).abs() < 1e-9, "{x} {y}");
            }
        }
    }

    proptest! {
        #[test]
        fn frame_count_matches_loop(n in 1usize..5000, frame in 2usize..600, hop_frac in 0.01f64..=1.0) {
            let hop = ((frame as f64 * hop_frac) as usize).max(1);
            let geom = FrameGeometry {
                sample_rate: 16_000,
                frame_len: frame,
                hop,
                n_fft: frame.next_power_of_two(),
                fmin_hz: 0.0,
                fmax_hz: 8000.0,
            };
            let mut count = 0;
            let mut start = 0;
            while start + frame <= n {
                count += 1;
                start += hop;
            }
            match geom.n_frames(n) {
                Some(k) => prop_assert_eq!(k, count),
                None => prop_assert!(n < frame && count == 0),
            }
        }
    }
}
