//! Feature cache: a 16-byte header (`FSCILMEL`, version u32, record count
//! u32) followed by records of `id_len u32 | id utf-8 | rows u64 | cols u64 |
//! rows·cols f64`. Everything little-endian.

use std::io::{Read, Write};

use super::{DspError, LogMelSpectrogram};

pub const CACHE_MAGIC: &[u8; 8] = b"FSCILMEL";
pub const CACHE_VERSION: u32 = 1;

pub fn write_feature_cache(mut out: impl Write, specs: &[LogMelSpectrogram]) -> Result<(), DspError> {
    out.write_all(CACHE_MAGIC)?;
    out.write_all(&CACHE_VERSION.to_le_bytes())?;
    out.write_all(&(specs.len() as u32).to_le_bytes())?;
    for s in specs {
        out.write_all(&(s.clip_id.len() as u32).to_le_bytes())?;
        out.write_all(s.clip_id.as_bytes())?;
        out.write_all(&(s.n_frames as u64).to_le_bytes())?;
        out.write_all(&(s.n_mels as u64).to_le_bytes())?;
        for v in &s.values {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N], DspError> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| DspError::Cache(format!("truncated: {e}")))?;
    Ok(buf)
}

pub fn read_feature_cache(mut input: impl Read) -> Result<Vec<LogMelSpectrogram>, DspError> {
    if &read_array::<8>(&mut input)? != CACHE_MAGIC {
        return Err(DspError::Cache("bad magic".into()));
    }
    let version = u32::from_le_bytes(read_array(&mut input)?);
    if version != CACHE_VERSION {
        return Err(DspError::Cache(format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(read_array(&mut input)?) as usize;
    let mut specs = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let id_len = u32::from_le_bytes(read_array(&mut input)?) as usize;
        let mut id = vec![0u8; id_len];
        input
            .read_exact(&mut id)
            .map_err(|e| DspError::Cache(format!("truncated: {e}")))?;
        let clip_id = String::from_utf8(id).map_err(|_| DspError::Cache("clip id is not utf-8".into()))?;
        let n_frames = u64::from_le_bytes(read_array(&mut input)?) as usize;
        let n_mels = u64::from_le_bytes(read_array(&mut input)?) as usize;
        let values = (0..n_frames * n_mels)
            .map(|_| read_array(&mut input).map(f64::from_le_bytes))
            .collect::<Result<Vec<_>, _>>()?;
        specs.push(LogMelSpectrogram {
            clip_id,
            n_frames,
            n_mels,
            values,
        });
    }
    Ok(specs)
}
