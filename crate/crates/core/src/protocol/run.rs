use rayon::prelude::*;
use sha2::{Digest, Sha256};

use super::source::{InMemorySource, SessionSource};
use super::{
    clustering_ratio, evaluate, sample_episode, split_dataset, train_base, train_incremental, Example, ProtocolConfig,
    ProtocolError, RunReport,
};
use crate::classifier::StochasticClassifier;
use crate::datagen::{mix_seed, DatasetManifest};
use crate::dsp::{DspConfig, LogMelExtractor, LogMelSpectrogram};
use crate::embedder::{embed_all, EmbedderConfig, EmbedderParams};

const STREAM_EPISODE: u64 = 0xE915;

/// Seed of the support-set draw for incremental session `session`.
pub fn episode_seed(seed: u64, session: usize) -> u64 {
    mix_seed(&[seed, STREAM_EPISODE, session as u64])
}

/// Report plus the final model.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: RunReport,
    pub params: EmbedderParams,
    pub classifier: StochasticClassifier,
}

/// Hex SHA-256 of the embedder and protocol configs as JSON.
pub fn run_digest(embedder: &EmbedderConfig, cfg: &ProtocolConfig) -> String {
    let json = serde_json::to_vec(&(embedder, cfg)).expect("configs serialise");
    Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
}

/// Render and featurise every manifest entry. Shorter clips are zero-padded
/// to the longest so all spectrograms share one shape.
pub fn prepare_examples(manifest: &DatasetManifest, dsp: &DspConfig) -> Result<Vec<Example>, ProtocolError> {
    let clips = manifest
        .entries
        .par_iter()
        .map(|e| manifest.load_clip(e))
        .collect::<Result<Vec<_>, _>>()?;
    let longest = clips.iter().map(|c| c.samples.len()).max().unwrap_or(0);
    let extractor = LogMelExtractor::new(dsp, manifest.sample_rate)?;
    let specs = clips
        .into_par_iter()
        .map(|mut c| {
            c.samples.resize(longest, 0.0);
            extractor.extract(&c)
        })
        .collect::<Result<Vec<LogMelSpectrogram>, _>>()?;
    Ok(specs
        .into_iter()
        .zip(&manifest.entries)
        .map(|(features, e)| Example {
            features,
            label: e.class_id,
            split: e.split,
        })
        .collect())
}

/// The full lifecycle: base training, then for each incremental session an
/// episode, classifier expansion and training, and evaluation on every
/// session seen so far. Training data of a session is taken from the source
/// once and dropped before the next session starts; only classifier means
/// carry over as prototypes.
pub fn run_protocol<S: SessionSource>(
    source: &mut S,
    embedder: &EmbedderConfig,
    cfg: &ProtocolConfig,
) -> Result<RunOutcome, ProtocolError> {
    cfg.validate()?;
    embedder.validate()?;
    if source.num_sessions() < cfg.sessions + 1 {
        return Err(ProtocolError::UnknownSession(source.num_sessions()));
    }
    let base_data = source.take_train(0)?;
    let base = train_base(&base_data, embedder, cfg)?;
    drop(base_data);
    let params = base.params;
    let mut state = base.classifier;

    let base_eval = source.eval(0)?;
    let specs: Vec<&LogMelSpectrogram> = base_eval.iter().map(|e| &e.features).collect();
    let labels: Vec<usize> = base_eval.iter().map(|e| e.label).collect();
    let clustering = clustering_ratio(&embed_all(&params, &specs, cfg.embed_chunk)?, &labels).ok();

    let mut sessions = vec![evaluate(0, &params, &state, &[base_eval], cfg.embed_chunk)?];
    let mut prototypes = state.mean_prototypes();
    for m in 1..=cfg.sessions {
        let data = source.take_train(m)?;
        let support = sample_episode(&data, cfg.ways, cfg.shots, episode_seed(cfg.seed, m))?;
        drop(data);
        state = train_incremental(m, &support, &params, state, &prototypes, cfg)?;
        prototypes = state.mean_prototypes();
        let evals = (0..=m).map(|k| source.eval(k)).collect::<Result<Vec<_>, _>>()?;
        sessions.push(evaluate(m, &params, &state, &evals, cfg.embed_chunk)?);
    }
    let report = RunReport::from_sessions(cfg.seed, run_digest(embedder, cfg), sessions, clustering);
    Ok(RunOutcome {
        report,
        params,
        classifier: state,
    })
}

/// Split `examples` into sessions and run the protocol on them.
pub fn run_on_examples(
    examples: Vec<Example>,
    embedder: &EmbedderConfig,
    cfg: &ProtocolConfig,
) -> Result<RunOutcome, ProtocolError> {
    let sessions = split_dataset(examples, cfg)?;
    run_protocol(&mut InMemorySource::new(sessions), embedder, cfg)
}
