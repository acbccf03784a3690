//! Minimal RIFF/WAVE reader for 16-bit PCM.

use std::io::Read;
use std::path::Path;

use super::DatagenError;
use crate::dsp::AudioClip;

const FORMAT_PCM: u16 = 1;
const FORMAT_EXTENSIBLE: u16 = 0xFFFE;

fn u16_at(b: &[u8], i: usize) -> u16 {
    u16::from_le_bytes([b[i], b[i + 1]])
}

fn u32_at(b: &[u8], i: usize) -> u32 {
    u32::from_le_bytes([b[i], b[i + 1], b[i + 2], b[i + 3]])
}

/// Decode a WAV byte buffer. Stereo is averaged to mono; samples are
/// scaled by 1/32768.
pub fn decode_wav(bytes: &[u8], clip_id: &str) -> Result<AudioClip, DatagenError> {
    let malformed = |m: &str| DatagenError::MalformedHeader(format!("{clip_id}: {m}"));
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(malformed("missing RIFF/WAVE header"));
    }
    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let len = u32_at(bytes, pos + 4) as usize;
        let body_start = pos + 8;
        let body_end = body_start.checked_add(len).ok_or_else(|| malformed("chunk length overflow"))?;
        if body_end > bytes.len() {
            return Err(malformed("chunk runs past end of file"));
        }
        let body = &bytes[body_start..body_end];
        match id {
            b"fmt " => {
                if body.len() < 16 {
                    return Err(malformed("fmt chunk shorter than 16 bytes"));
                }
                let mut tag = u16_at(body, 0);
                if tag == FORMAT_EXTENSIBLE {
                    if body.len() < 26 {
                        return Err(malformed("extensible fmt chunk too short"));
                    }
                    tag = u16_at(body, 24);
                }
                fmt = Some((tag, u16_at(body, 2), u32_at(body, 4), u16_at(body, 14)));
            }
            b"data" => data = Some(body),
            _ => {}
        }
        pos = body_end + (len & 1);
    }
    let (tag, channels, sample_rate, bits) = fmt.ok_or_else(|| malformed("no fmt chunk"))?;
    let data = data.ok_or_else(|| malformed("no data chunk"))?;
    if tag != FORMAT_PCM {
        return Err(DatagenError::UnsupportedFormat(format!("{clip_id}: format tag {tag} is not PCM")));
    }
    if bits != 16 {
        return Err(DatagenError::UnsupportedFormat(format!("{clip_id}: {bits}-bit samples")));
    }
    if !(1..=2).contains(&channels) {
        return Err(DatagenError::UnsupportedFormat(format!("{clip_id}: {channels} channels")));
    }
    if sample_rate == 0 {
        return Err(malformed("sample rate is zero"));
    }
    let frame_bytes = 2 * channels as usize;
    let samples: Vec<f64> = data
        .chunks_exact(frame_bytes)
        .map(|f| {
            let sum: f64 = f
                .chunks_exact(2)
                .map(|s| i16::from_le_bytes([s[0], s[1]]) as f64 / 32768.0)
                .sum();
            sum / channels as f64
        })
        .collect();
    if samples.is_empty() {
        return Err(malformed("data chunk holds no complete frame"));
    }
    Ok(AudioClip {
        samples,
        sample_rate,
        label: None,
        clip_id: clip_id.to_string(),
    })
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioClip, DatagenError> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_wav(&bytes, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(spec: hound::WavSpec, samples: &[i32]) -> tempfile::NamedTempFile {
        let file = tempfile::NamedTempFile::new().unwrap();
        let mut w = hound::WavWriter::create(file.path(), spec).unwrap();
        for &s in samples {
            w.write_sample(s).unwrap();
        }
        w.finalize().unwrap();
        file
    }

    fn spec(channels: u16, bits: u16) -> hound::WavSpec {
        hound::WavSpec {
            channels,
            sample_rate: 16_000,
            bits_per_sample: bits,
            sample_format: hound::SampleFormat::Int,
        }
    }

    #[test]
    fn scales_by_two_to_the_fifteen() {
        let f = write(spec(1, 16), &[0, 16384, -16384]);
        let clip = read_wav(f.path()).unwrap();
        assert_eq!(clip.samples, vec![0.0, 0.5, -0.5]);
        assert_eq!(clip.sample_rate, 16_000);
    }

    #[test]
    fn stereo_is_averaged() {
        let f = write(spec(2, 16), &[16384, 0, -32768, 32767]);
        let clip = read_wav(f.path()).unwrap();
        assert_eq!(clip.samples, vec![0.25, -0.5 / 32768.0]);
    }

    #[test]
    fn rejects_other_depths() {
        let f = write(spec(1, 8), &[0, 10, -10]);
        assert!(matches!(read_wav(f.path()), Err(DatagenError::UnsupportedFormat(_))));
        let f = write(spec(1, 24), &[0, 10]);
        assert!(matches!(read_wav(f.path()), Err(DatagenError::UnsupportedFormat(_))));
    }

    #[test]
    fn rejects_broken_headers() {
        assert!(matches!(decode_wav(b"RIFX\0\0\0\0WAVE", "x"), Err(DatagenError::MalformedHeader(_))));
        let f = write(spec(1, 16), &[1, 2, 3]);
        let bytes = std::fs::read(f.path()).unwrap();
        assert!(matches!(decode_wav(&bytes[..30], "x"), Err(DatagenError::MalformedHeader(_))));
        assert!(matches!(read_wav("/nonexistent/file.wav"), Err(DatagenError::Io(_))));
    }
}
