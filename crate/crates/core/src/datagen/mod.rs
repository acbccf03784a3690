//! Synthetic harmonic "instrument" corpora, WAV ingestion and manifests.

mod manifest;
mod synth;
mod wav;

use std::path::PathBuf;

pub use manifest::{
    load_manifest, load_manifest_unchecked, parse_manifest, synth_manifest_text, ClipSource, DatasetManifest,
    ManifestEntry, SplitHint, MANIFEST_VERSION,
};
pub use synth::{
    mix_seed, signature_capacity, synth_clip, synth_signature, ClassSignature, Envelope, Jitter, SynthDatasetSpec,
    MAX_HARMONICS, MIN_FUNDAMENTAL_HZ, SLOT_RATIO, SLOT_SPREAD,
};
pub use wav::{decode_wav, read_wav};

#[derive(Debug, thiserror::Error)]
pub enum DatagenError {
    #[error("{requested} classes requested but only {capacity} fit below Nyquist at {sample_rate} Hz")]
    TooManyClasses {
        requested: usize,
        capacity: usize,
        sample_rate: u32,
    },
    #[error("unsupported WAV format: {0}")]
    UnsupportedFormat(String),
    #[error("malformed WAV header: {0}")]
    MalformedHeader(String),
    #[error("manifest line {line}: {message}")]
    ParseError { line: usize, message: String },
    #[error("missing files: {}", format_missing(.0))]
    MissingFile(Vec<(usize, PathBuf)>),
    #[error("invalid synthetic dataset spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn format_missing(list: &[(usize, PathBuf)]) -> String {
    list.iter()
        .map(|(line, p)| format!("{} (line {line})", p.display()))
        .collect::<Vec<_>>()
        .join(", ")
}
