//! Line-oriented dataset manifest.
//!
//! ```text
//! # sample_rate=16000
//! # synth_seed=0
//! # synth_duration_s=0.5
//! # synth_noise_level=0.05
//! source,class_id,split
//! clips/dog_01.wav,0,train
//! synth:3:17,1,
//! ```
//!
//! `#` lines before the header carry `key=value` metadata. `source` is a
//! path relative to the manifest, or `synth:<signature>:<clip index>` naming
//! a clip rendered from the synthetic generator with the `synth_*` settings.
//! The `split` column is optional (`train`, `eval` or empty).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::synth::{synth_signature, SynthDatasetSpec};
use super::wav::read_wav;
use super::DatagenError;
use crate::dsp::AudioClip;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitHint {
    Train,
    Eval,
    Any,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClipSource {
    Path(PathBuf),
    Synth { signature: usize, index: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub line: usize,
    pub source: ClipSource,
    /// Contiguous class id.
    pub class_id: usize,
    pub split: SplitHint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub sample_rate: u32,
    pub entries: Vec<ManifestEntry>,
    /// `original_ids[k]` is the id written in the file for class `k`.
    pub original_ids: Vec<usize>,
    pub synth: Option<SynthDatasetSpec>,
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.original_ids.len()
    }

    /// True when the file's class ids were not already `0..n`.
    pub fn was_remapped(&self) -> bool {
        self.original_ids.iter().enumerate().any(|(k, &o)| k != o)
    }

    pub fn class_mapping(&self) -> BTreeMap<usize, usize> {
        self.original_ids.iter().enumerate().map(|(k, &o)| (o, k)).collect()
    }

    /// Render one entry's clip, labelled with its contiguous class id.
    pub fn load_clip(&self, entry: &ManifestEntry) -> Result<AudioClip, DatagenError> {
        let mut clip = match &entry.source {
            ClipSource::Path(p) => {
                if !p.exists() {
                    return Err(DatagenError::MissingFile(vec![(entry.line, p.clone())]));
                }
                read_wav(p)?
            }
            ClipSource::Synth { signature, index } => {
                let spec = self
                    .synth
                    .as_ref()
                    .ok_or_else(|| DatagenError::InvalidSpec("synthetic source without synth_* metadata".into()))?;
                let sig = synth_signature(*signature, spec.seed, spec.sample_rate)?;
                spec.clip(&sig, *index)
            }
        };
        clip.label = Some(entry.class_id);
        Ok(clip)
    }

    /// Paths that do not exist, with their line numbers.
    pub fn missing_files(&self) -> Vec<(usize, PathBuf)> {
        self.entries
            .iter()
            .filter_map(|e| match &e.source {
                ClipSource::Path(p) if !p.exists() => Some((e.line, p.clone())),
                _ => None,
            })
            .collect()
    }
}

/// Manifest text listing every clip of a synthetic corpus, `clips_per_class`
/// entries per class, no split hints.
pub fn synth_manifest_text(spec: &SynthDatasetSpec) -> String {
    let mut s = String::new();
    writeln!(s, "# sample_rate={}", spec.sample_rate).unwrap();
    writeln!(s, "# synth_seed={}", spec.seed).unwrap();
    writeln!(s, "# synth_duration_s={}", spec.duration_s).unwrap();
    writeln!(s, "# synth_noise_level={}", spec.noise_level).unwrap();
    writeln!(s, "source,class_id,split").unwrap();
    for c in 0..spec.n_classes {
        for i in 0..spec.clips_per_class {
            writeln!(s, "synth:{c}:{i},{c},").unwrap();
        }
    }
    s
}

fn parse_err(line: usize, message: impl Into<String>) -> DatagenError {
    DatagenError::ParseError {
        line,
        message: message.into(),
    }
}

/// Parse manifest text. Relative paths resolve against `base_dir`. Missing
/// files are not checked here.
pub fn parse_manifest(text: &str, base_dir: &Path) -> Result<DatasetManifest, DatagenError> {
    let mut meta = BTreeMap::new();
    let mut header_seen = false;
    let mut has_split_column = false;
    let mut raw = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            if !header_seen {
                if let Some((k, v)) = rest.trim().split_once('=') {
                    meta.insert(k.trim().to_string(), (n, v.trim().to_string()));
                }
            }
            continue;
        }
        if !header_seen {
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            match cols.as_slice() {
                ["source", "class_id"] => {}
                ["source", "class_id", "split"] => has_split_column = true,
                _ => return Err(parse_err(n, format!("expected header `source,class_id[,split]`, got `{line}`"))),
            }
            header_seen = true;
            continue;
        }
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        let expected = if has_split_column { 3 } else { 2 };
        if cols.len() != expected {
            return Err(parse_err(n, format!("expected {expected} columns, got {}", cols.len())));
        }
        if cols[0].is_empty() {
            return Err(parse_err(n, "empty source"));
        }
        let source = match cols[0].strip_prefix("synth:") {
            Some(rest) => {
                let (sig, idx) = rest
                    .split_once(':')
                    .ok_or_else(|| parse_err(n, "synthetic source must be synth:<signature>:<index>"))?;
                ClipSource::Synth {
                    signature: sig.parse().map_err(|_| parse_err(n, format!("bad signature `{sig}`")))?,
                    index: idx.parse().map_err(|_| parse_err(n, format!("bad clip index `{idx}`")))?,
                }
            }
            None => ClipSource::Path(base_dir.join(cols[0])),
        };
        let class_id: usize = cols[1]
            .parse()
            .map_err(|_| parse_err(n, format!("bad class id `{}`", cols[1])))?;
        let split = match cols.get(2).copied().unwrap_or("") {
            "" => SplitHint::Any,
            "train" => SplitHint::Train,
            "eval" => SplitHint::Eval,
            other => return Err(parse_err(n, format!("unknown split `{other}`"))),
        };
        raw.push(ManifestEntry {
            line: n,
            source,
            class_id,
            split,
        });
    }
    if !header_seen {
        return Err(parse_err(text.lines().count().max(1), "missing header line"));
    }
    if raw.is_empty() {
        return Err(parse_err(text.lines().count().max(1), "manifest has no entries"));
    }

    let meta_num = |key: &str| -> Result<Option<f64>, DatagenError> {
        match meta.get(key) {
            None => Ok(None),
            Some((n, v)) => v
                .parse::<f64>()
                .map(Some)
                .map_err(|_| parse_err(*n, format!("bad value for {key}: `{v}`"))),
        }
    };
    let sample_rate = meta_num("sample_rate")?.unwrap_or(16_000.0) as u32;
    let uses_synth = raw.iter().any(|e| matches!(e.source, ClipSource::Synth { .. }));
    let synth = if uses_synth {
        let d = SynthDatasetSpec::default();
        let spec = SynthDatasetSpec {
            seed: meta_num("synth_seed")?.map_or(d.seed, |v| v as u64),
            duration_s: meta_num("synth_duration_s")?.unwrap_or(d.duration_s),
            noise_level: meta_num("synth_noise_level")?.unwrap_or(d.noise_level),
            sample_rate,
            n_classes: 1,
            clips_per_class: 1,
        };
        spec.validate()?;
        Some(spec)
    } else {
        None
    };

    let original_ids: Vec<usize> = raw.iter().map(|e| e.class_id).collect::<BTreeSet<_>>().into_iter().collect();
    let mapping: BTreeMap<usize, usize> = original_ids.iter().enumerate().map(|(k, &o)| (o, k)).collect();
    for e in raw.iter_mut() {
        e.class_id = mapping[&e.class_id];
    }
    Ok(DatasetManifest {
        version: MANIFEST_VERSION,
        sample_rate,
        entries: raw,
        original_ids,
        synth,
    })
}

/// Read and validate a manifest; every referenced file must exist.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest, DatagenError> {
    let manifest = load_manifest_unchecked(path)?;
    let missing = manifest.missing_files();
    if !missing.is_empty() {
        return Err(DatagenError::MissingFile(missing));
    }
    Ok(manifest)
}

/// Read a manifest without checking that referenced files exist.
pub fn load_manifest_unchecked(path: impl AsRef<Path>) -> Result<DatasetManifest, DatagenError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    parse_manifest(&text, path.parent().unwrap_or(Path::new(".")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone_file(dir: &Path, name: &str) {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 16_000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(dir.join(name), spec).unwrap();
        for i in 0..800 {
            w.write_sample(((i % 40) * 100) as i16).unwrap();
        }
        w.finalize().unwrap();
    }

    #[test]
    fn three_entries_two_classes() {
        let dir = tempfile::tempdir().unwrap();
        for f in ["a.wav", "b.wav", "c.wav"] {
            tone_file(dir.path(), f);
        }
        let path = dir.path().join("m.csv");
        std::fs::write(&path, "source,class_id\na.wav,0\nb.wav,1\nc.wav,0\n").unwrap();
        let m = load_manifest(&path).unwrap();
        assert_eq!(m.entries.len(), 3);
        assert_eq!(m.num_classes(), 2);
        assert!(!m.was_remapped());
        let clip = m.load_clip(&m.entries[1]).unwrap();
        assert_eq!(clip.label, Some(1));
        assert_eq!(clip.samples.len(), 800);
    }

    #[test]
    fn sparse_ids_are_remapped() {
        let m = parse_manifest("source,class_id\nsynth:0:0,0\nsynth:2:0,2\nsynth:2:1,2\n", Path::new(".")).unwrap();
        assert_eq!(m.entries.iter().map(|e| e.class_id).collect::<Vec<_>>(), vec![0, 1, 1]);
        assert!(m.was_remapped());
        assert_eq!(m.class_mapping(), BTreeMap::from([(0, 0), (2, 1)]));
        assert_eq!(m.original_ids, vec![0, 2]);
    }

    #[test]
    fn missing_file_is_listed() {
        let dir = tempfile::tempdir().unwrap();
        tone_file(dir.path(), "here.wav");
        let path = dir.path().join("m.csv");
        std::fs::write(&path, "source,class_id\nhere.wav,0\ngone.wav,1\n").unwrap();
        match load_manifest(&path) {
            Err(DatagenError::MissingFile(list)) => {
                assert_eq!(list.len(), 1);
                assert_eq!(list[0].0, 3);
                assert!(list[0].1.ends_with("gone.wav"));
            }
            other => panic!("expected MissingFile, got {other:?}"),
        }
        assert_eq!(load_manifest_unchecked(&path).unwrap().entries.len(), 2);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let cases = [
            ("class_id,source\n", 1),
            ("# sample_rate=16000\nsource,class_id\na.wav,zero\n", 3),
            ("source,class_id\na.wav,0\n\nb.wav\n", 4),
            ("source,class_id,split\na.wav,0,test\n", 2),
            ("# sample_rate=fast\nsource,class_id\na.wav,0\n", 1),
        ];
        for (text, line) in cases {
            match parse_manifest(text, Path::new(".")) {
                Err(DatagenError::ParseError { line: l, .. }) => assert_eq!(l, line, "{text:?}"),
                other => panic!("{text:?}: {other:?}"),
            }
        }
    }

    #[test]
    fn synthetic_manifest_round_trips() {
        let spec = SynthDatasetSpec {
            n_classes: 3,
            clips_per_class: 2,
            duration_s: 0.05,
            seed: 11,
            ..Default::default()
        };
        let m = parse_manifest(&synth_manifest_text(&spec), Path::new(".")).unwrap();
        assert_eq!(m.entries.len(), 6);
        let direct = spec.generate().unwrap();
        for (e, d) in m.entries.iter().zip(&direct) {
            let c = m.load_clip(e).unwrap();
            assert_eq!(c.samples, d.samples);
            assert_eq!(c.label, d.label);
        }
    }
}
