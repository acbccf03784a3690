use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::DatagenError;
use crate::dsp::AudioClip;

/// Lowest fundamental handed out.
pub const MIN_FUNDAMENTAL_HZ: f64 = 110.0;
/// Ratio between consecutive class slots.
pub const SLOT_RATIO: f64 = 1.12;
/// Fraction of a slot over which a fundamental may drift. Keeps neighbours
/// at least `SLOT_RATIO^(1 - SLOT_SPREAD)` ≈ 1.058 apart.
pub const SLOT_SPREAD: f64 = 0.5;
pub const MAX_HARMONICS: usize = 8;

/// Attack/decay envelope `a(t) = min(t / attack_s, 1) · exp(−decay_per_s · t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub attack_s: f64,
    pub decay_per_s: f64,
}

/// Per-clip variability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Jitter {
    /// Std of the relative pitch offset.
    pub pitch: f64,
    /// Std of the relative per-harmonic amplitude offset.
    pub amplitude: f64,
}

/// A synthetic instrument: a harmonic stack with an envelope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSignature {
    pub class_id: usize,
    pub fundamental_hz: f64,
    pub harmonic_amplitudes: Vec<f64>,
    pub envelope: Envelope,
    pub jitter: Jitter,
}

impl ClassSignature {
    pub fn without_jitter(mut self) -> Self {
        self.jitter = Jitter { pitch: 0.0, amplitude: 0.0 };
        self
    }
}

/// Mix several integers into one seed (splitmix64 finaliser).
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        h ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 31;
    }
    h
}

/// How many classes fit below Nyquist at `sample_rate`.
pub fn signature_capacity(sample_rate: u32) -> usize {
    let nyquist = sample_rate as f64 / 2.0;
    let mut k = 0;
    while MIN_FUNDAMENTAL_HZ * SLOT_RATIO.powf(k as f64 + SLOT_SPREAD) < nyquist {
        k += 1;
    }
    k
}

/// Deterministic signature for `class_id`. Class `k` takes slot `k`, so
/// fundamentals grow with the class id and distinct classes stay at least
/// 5% apart.
pub fn synth_signature(class_id: usize, seed: u64, sample_rate: u32) -> Result<ClassSignature, DatagenError> {
    let capacity = signature_capacity(sample_rate);
    if class_id >= capacity {
        return Err(DatagenError::TooManyClasses {
            requested: class_id + 1,
            capacity,
            sample_rate,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, class_id as u64, 0x5167]));
    let f0 = MIN_FUNDAMENTAL_HZ * SLOT_RATIO.powf(class_id as f64 + SLOT_SPREAD * rng.random::<f64>());
    let nyquist = sample_rate as f64 / 2.0;
    let n_harmonics = ((nyquist / f0).ceil() as usize - 1).clamp(1, MAX_HARMONICS);
    let harmonic_amplitudes = (0..n_harmonics)
        .map(|h| if h == 0 { 1.0 } else { rng.random_range(0.05..0.8) })
        .collect();
    Ok(ClassSignature {
        class_id,
        fundamental_hz: f0,
        harmonic_amplitudes,
        envelope: Envelope {
            attack_s: rng.random_range(0.005..0.05),
            decay_per_s: rng.random_range(0.2..3.0),
        },
        jitter: Jitter {
            pitch: 0.005,
            amplitude: 0.1,
        },
    })
}

/// Render one clip: jittered harmonics under the envelope, peak-normalised
/// to 1, plus white noise of std `noise_level`, then rescaled so the peak
/// never exceeds 1.
pub fn synth_clip(sig: &ClassSignature, duration_s: f64, sample_rate: u32, noise_level: f64, seed: u64) -> AudioClip {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = (duration_s * sample_rate as f64).round().max(1.0) as usize;
    let z = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
    let f0 = sig.fundamental_hz * (1.0 + sig.jitter.pitch * z(&mut rng));
    let amps: Vec<f64> = sig
        .harmonic_amplitudes
        .iter()
        .map(|a| a * (1.0 + sig.jitter.amplitude * z(&mut rng)).max(0.0))
        .collect();
    let sr = sample_rate as f64;
    let nyquist = sr / 2.0;
    let mut samples: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            let env = (t / sig.envelope.attack_s).min(1.0) * (-sig.envelope.decay_per_s * t).exp();
            let tone: f64 = amps
                .iter()
                .enumerate()
                .map(|(h, a)| {
                    let f = f0 * (h + 1) as f64;
                    if f < nyquist {
                        a * (std::f64::consts::TAU * f * t).sin()
                    } else {
                        0.0
                    }
                })
                .sum();
            env * tone
        })
        .collect();
    let peak = samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        samples.iter_mut().for_each(|v| *v /= peak);
    }
    if noise_level > 0.0 {
        for v in samples.iter_mut() {
            *v += noise_level * z(&mut rng);
        }
        let peak = samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if peak > 1.0 {
            samples.iter_mut().for_each(|v| *v /= peak);
        }
    }
    AudioClip {
        samples,
        sample_rate,
        label: Some(sig.class_id),
        clip_id: format!("synth-{}-{seed:016x}", sig.class_id),
    }
}

/// Description of a synthetic corpus. Serialised as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthDatasetSpec {
    pub seed: u64,
    pub n_classes: usize,
    pub clips_per_class: usize,
    pub duration_s: f64,
    pub sample_rate: u32,
    pub noise_level: f64,
}

impl Default for SynthDatasetSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_classes: 10,
            clips_per_class: 30,
            duration_s: 0.5,
            sample_rate: 16_000,
            noise_level: 0.05,
        }
    }
}

impl SynthDatasetSpec {
    pub fn validate(&self) -> Result<(), DatagenError> {
        if self.n_classes == 0 || self.clips_per_class == 0 {
            return Err(DatagenError::InvalidSpec("n_classes and clips_per_class must be positive".into()));
        }
        if !(self.duration_s > 0.0) || self.sample_rate == 0 || !(self.noise_level >= 0.0) {
            return Err(DatagenError::InvalidSpec(
                "duration_s and sample_rate must be positive, noise_level nonnegative".into(),
            ));
        }
        let capacity = signature_capacity(self.sample_rate);
        if self.n_classes > capacity {
            return Err(DatagenError::TooManyClasses {
                requested: self.n_classes,
                capacity,
                sample_rate: self.sample_rate,
            });
        }
        Ok(())
    }

    pub fn signatures(&self) -> Result<Vec<ClassSignature>, DatagenError> {
        (0..self.n_classes)
            .map(|c| synth_signature(c, self.seed, self.sample_rate))
            .collect()
    }

    pub fn clip_seed(&self, class_id: usize, index: usize) -> u64 {
        mix_seed(&[self.seed, class_id as u64, index as u64, 0xC11F])
    }

    /// Render clip `index` of `class_id`.
    pub fn clip(&self, sig: &ClassSignature, index: usize) -> AudioClip {
        let seed = self.clip_seed(sig.class_id, index);
        let mut clip = synth_clip(sig, self.duration_s, self.sample_rate, self.noise_level, seed);
        clip.clip_id = format!("synth-{}-{index}", sig.class_id);
        clip
    }

    /// Every clip, class-major, rendered in parallel.
    pub fn generate(&self) -> Result<Vec<AudioClip>, DatagenError> {
        self.validate()?;
        let sigs = self.signatures()?;
        let jobs: Vec<(usize, usize)> = (0..self.n_classes)
            .flat_map(|c| (0..self.clips_per_class).map(move |i| (c, i)))
            .collect();
        Ok(jobs.par_iter().map(|&(c, i)| self.clip(&sigs[c], i)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::power_spectrum;

    #[test]
    fn signatures_are_deterministic_and_spaced() {
        let a = synth_signature(3, 9, 16_000).unwrap();
        assert_eq!(a, synth_signature(3, 9, 16_000).unwrap());
        for seed in 0..50 {
            let sigs: Vec<_> = (0..signature_capacity(16_000))
                .map(|c| synth_signature(c, seed, 16_000).unwrap())
                .collect();
            for w in sigs.windows(2) {
                assert!(w[1].fundamental_hz / w[0].fundamental_hz >= 1.05);
            }
            for s in &sigs {
                assert!(s.fundamental_hz > 20.0);
                assert!(s.fundamental_hz < 8000.0 / s.harmonic_amplitudes.len() as f64);
                assert!(s.harmonic_amplitudes.iter().all(|&a| a >= 0.0));
            }
        }
    }

    #[test]
    fn capacity_is_bounded_by_nyquist() {
        // 110 · 1.12^(k + 0.5) < 8000  ⇔  k < ln(8000/110)/ln(1.12) − 0.5 ≈ 37.3
        assert_eq!(signature_capacity(16_000), 38);
        assert!(matches!(
            synth_signature(9_999, 0, 16_000),
            Err(DatagenError::TooManyClasses { capacity: 38, .. })
        ));
        let spec = SynthDatasetSpec {
            n_classes: 10_000,
            ..Default::default()
        };
        assert!(matches!(spec.validate(), Err(DatagenError::TooManyClasses { .. })));
    }

    #[test]
    fn noiseless_unjittered_clips_are_identical() {
        let sig = synth_signature(2, 1, 16_000).unwrap().without_jitter();
        let a = synth_clip(&sig, 0.25, 16_000, 0.0, 1);
        let b = synth_clip(&sig, 0.25, 16_000, 0.0, 2);
        assert!(a.samples.iter().zip(&b.samples).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn peak_never_exceeds_one() {
        for (i, noise) in [0.0, 0.05, 0.5, 3.0].into_iter().enumerate() {
            let sig = synth_signature(i, 4, 16_000).unwrap();
            let clip = synth_clip(&sig, 0.1, 16_000, noise, i as u64);
            assert!(clip.samples.iter().all(|v| v.abs() <= 1.0));
        }
    }

    #[test]
    fn dominant_bin_is_the_fundamental() {
        let n = 16_384;
        for c in [0, 4, 9, 20] {
            let sig = synth_signature(c, 7, 16_000).unwrap().without_jitter();
            let clip = synth_clip(&sig, n as f64 / 16_000.0, 16_000, 0.0, 0);
            let power = power_spectrum(&clip.samples, n).unwrap();
            let argmax = (0..power.len()).max_by(|&a, &b| power[a].total_cmp(&power[b])).unwrap();
            let expected = (sig.fundamental_hz * n as f64 / 16_000.0).round() as usize;
            assert_eq!(argmax, expected, "class {c}");
        }
    }

    #[test]
    fn dataset_is_reproducible() {
        let spec = SynthDatasetSpec {
            n_classes: 3,
            clips_per_class: 2,
            duration_s: 0.05,
            ..Default::default()
        };
        let a = spec.generate().unwrap();
        let b = spec.generate().unwrap();
        assert_eq!(a.len(), 6);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.clip_id, y.clip_id);
            assert!(x.samples.iter().zip(&y.samples).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }
}
