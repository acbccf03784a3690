use std::fs;
use std::path::{Path, PathBuf};

use log::{error, info};
use rayon::prelude::*;
use serde::Serialize;

use fscil::classifier::StochasticClassifier;
use fscil::datagen::{load_manifest, load_manifest_unchecked, parse_manifest, synth_manifest_text, ClipSource, DatasetManifest};
use fscil::dsp::{write_feature_cache, LogMelExtractor, LogMelSpectrogram};
use fscil::embedder::{load_checkpoint, save_checkpoint, EmbedderParams};
use fscil::protocol::{
    episode_seed, evaluate, prepare_examples, run_on_examples, sample_episode, split_dataset, train_base,
    train_incremental, Example, SessionDataset, SessionMetrics,
};
use fscil::verify::{run_suite, LossImpls, VerifyConfig};

use crate::config::RunConfig;
use crate::error::CliError;

fn manifest(cfg: &RunConfig, strict: bool) -> Result<DatasetManifest, CliError> {
    Ok(match &cfg.manifest {
        Some(p) if strict => load_manifest(p)?,
        Some(p) => load_manifest_unchecked(p)?,
        None => parse_manifest(&synth_manifest_text(&cfg.synthetic), Path::new("."))?,
    })
}

fn sessions(cfg: &RunConfig) -> Result<Vec<SessionDataset>, CliError> {
    let examples = prepare_examples(&manifest(cfg, true)?, &cfg.dsp)?;
    Ok(split_dataset(examples, &cfg.protocol)?)
}

fn out_path(cfg: &RunConfig, name: &str) -> Result<PathBuf, CliError> {
    fs::create_dir_all(&cfg.out_dir)?;
    Ok(cfg.out_dir.join(name))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("serialisable");
    text.push('\n');
    fs::write(path, text)?;
    info!("wrote {}", path.display());
    Ok(())
}

fn source_name(src: &ClipSource) -> String {
    match src {
        ClipSource::Path(p) => p.display().to_string(),
        ClipSource::Synth { signature, index } => format!("synth:{signature}:{index}"),
    }
}

/// Featurise every clip of the manifest into a cache file. Clips that fail
/// are listed and skipped; the command fails if any did.
pub fn extract(cfg: &RunConfig, out: Option<PathBuf>) -> Result<(), CliError> {
    let manifest = manifest(cfg, false)?;
    let extractor = LogMelExtractor::new(&cfg.dsp, manifest.sample_rate)?;
    let results: Vec<Result<LogMelSpectrogram, String>> = manifest
        .entries
        .par_iter()
        .map(|e| {
            manifest
                .load_clip(e)
                .map_err(|err| err.to_string())
                .and_then(|clip| extractor.extract(&clip).map_err(|err| err.to_string()))
        })
        .collect();
    let mut specs = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    for (entry, r) in manifest.entries.iter().zip(results) {
        match r {
            Ok(s) => specs.push(s),
            Err(msg) => {
                error!("clip {} (line {}): {msg}", source_name(&entry.source), entry.line);
                failures.push(source_name(&entry.source));
            }
        }
    }
    let path = match out {
        Some(p) => p,
        None => out_path(cfg, "features.bin")?,
    };
    let mut buf = Vec::new();
    write_feature_cache(&mut buf, &specs)?;
    fs::write(&path, buf)?;
    info!("{} of {} clips extracted to {}", specs.len(), manifest.entries.len(), path.display());
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Runtime(format!("{} clip(s) failed: {}", failures.len(), failures.join(", "))))
    }
}

#[derive(Serialize)]
struct SessionReport<'a> {
    metrics: &'a SessionMetrics,
    config: serde_json::Value,
}

fn eval_sets(sessions: &[SessionDataset], upto: usize) -> Vec<&[Example]> {
    sessions[..=upto].iter().map(|s| s.eval.as_slice()).collect()
}

fn print_metrics(m: &SessionMetrics) {
    let incr = m.acc_incr.map_or_else(|| "-".to_string(), |a| format!("{:.2}", 100.0 * a));
    println!(
        "session {}: {} classes, base {:.2}, incr {incr}, all {:.2}",
        m.session,
        m.num_classes,
        100.0 * m.acc_base,
        100.0 * m.acc_all
    );
}

fn report_session(
    cfg: &RunConfig,
    sessions: &[SessionDataset],
    params: &EmbedderParams,
    state: &StochasticClassifier,
    name: &str,
) -> Result<(), CliError> {
    let m = state.session_boundaries().len() - 1;
    let metrics = evaluate(m, params, state, &eval_sets(sessions, m), cfg.protocol.embed_chunk)?;
    print_metrics(&metrics);
    write_json(
        &out_path(cfg, name)?,
        &SessionReport {
            metrics: &metrics,
            config: cfg.to_json(),
        },
    )
}

/// Base session only; writes `session-0.ckpt`.
pub fn train_base_cmd(cfg: &RunConfig) -> Result<(), CliError> {
    let sessions = sessions(cfg)?;
    let base = train_base(&sessions[0], &cfg.embedder, &cfg.protocol)?;
    if let Some(last) = base.backbone_losses.last() {
        info!("final backbone loss {last:.4}");
    }
    let path = out_path(cfg, "session-0.ckpt")?;
    save_checkpoint(&base.params, &base.classifier, &path)?;
    info!("wrote {}", path.display());
    report_session(cfg, &sessions, &base.params, &base.classifier, "session-0.json")
}

fn load_matching(cfg: &RunConfig, checkpoint: &Path) -> Result<(EmbedderParams, StochasticClassifier), CliError> {
    let (params, state) = load_checkpoint(checkpoint)?;
    if params.config() != &cfg.embedder {
        return Err(CliError::Validation(format!(
            "checkpoint {} was trained with a different embedder config",
            checkpoint.display()
        )));
    }
    Ok((params, state))
}

/// The next incremental session after `checkpoint`; writes `session-<m>.ckpt`.
pub fn train_incr_cmd(cfg: &RunConfig, checkpoint: &Path) -> Result<(), CliError> {
    let (params, state) = load_matching(cfg, checkpoint)?;
    let m = state.session_boundaries().len();
    if m > cfg.protocol.sessions {
        return Err(CliError::Validation(format!(
            "checkpoint already covers all {} incremental sessions",
            cfg.protocol.sessions
        )));
    }
    let mut sessions = sessions(cfg)?;
    let data = std::mem::replace(
        &mut sessions[m],
        SessionDataset {
            index: m,
            classes: Vec::new(),
            train: Vec::new(),
            eval: Vec::new(),
        },
    );
    let support = sample_episode(&data, cfg.protocol.ways, cfg.protocol.shots, episode_seed(cfg.seed, m))?;
    sessions[m].eval = data.eval;
    let prototypes = state.mean_prototypes();
    let state = train_incremental(m, &support, &params, state, &prototypes, &cfg.protocol)?;
    let path = out_path(cfg, &format!("session-{m}.ckpt"))?;
    save_checkpoint(&params, &state, &path)?;
    info!("wrote {}", path.display());
    report_session(cfg, &sessions, &params, &state, &format!("session-{m}.json"))
}

/// Evaluate a checkpoint on every session it covers.
pub fn eval_cmd(cfg: &RunConfig, checkpoint: &Path) -> Result<(), CliError> {
    let (params, state) = load_matching(cfg, checkpoint)?;
    let m = state.session_boundaries().len() - 1;
    let sessions = sessions(cfg)?;
    report_session(cfg, &sessions, &params, &state, &format!("eval-session-{m}.json"))
}

/// The whole protocol; writes `report.{csv,json,txt}` and `final.ckpt`.
pub fn run_cmd(cfg: &RunConfig) -> Result<(), CliError> {
    let examples = prepare_examples(&manifest(cfg, true)?, &cfg.dsp)?;
    let mut outcome = run_on_examples(examples, &cfg.embedder, &cfg.protocol)?;
    outcome.report.config = cfg.to_json();
    let report = &outcome.report;
    let table = report.to_table();
    print!("{table}");
    if let Some(r) = report.clustering_ratio {
        println!("clustering ratio {r:.4}");
    }
    fs::write(out_path(cfg, "report.csv")?, report.to_csv())?;
    fs::write(out_path(cfg, "report.txt")?, table)?;
    let mut json = report.to_json();
    json.push('\n');
    fs::write(out_path(cfg, "report.json")?, json)?;
    save_checkpoint(&outcome.params, &outcome.classifier, out_path(cfg, "final.ckpt")?)?;
    info!("reports and final.ckpt written to {}", cfg.out_dir.display());
    Ok(())
}

/// The oracle suite; fails with the names of failing checks.
pub fn verify_cmd(cfg: &RunConfig) -> Result<(), CliError> {
    let vcfg = VerifyConfig {
        seed: cfg.seed,
        ..VerifyConfig::default()
    };
    let report = run_suite(&vcfg, &LossImpls::default());
    print!("{}", report.to_text());
    write_json(&out_path(cfg, "verify.json")?, &report)?;
    if report.all_passed() {
        Ok(())
    } else {
        Err(CliError::Verification(report.failing().join(", ")))
    }
}
