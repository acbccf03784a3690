use std::path::Path;

use fscil::datagen::{parse_manifest, synth_manifest_text, SynthDatasetSpec};
use fscil::diffmath::Tensor;
use fscil::embedder::{EmbedderConfig, EmbedderParams};
use fscil::losses::LossConfig;
use fscil::presets::Setup;
use fscil::protocol::{
    base_batch_gradients, prepare_examples, run_on_examples, run_protocol, split_dataset, train_base, AccessKind,
    Example, InMemorySource, InstrumentedSource, OptimConfig, ProtocolConfig, ProtocolError, SessionSource,
};

fn tiny(seed: u64) -> (Setup, Vec<Example>) {
    let sgd = OptimConfig {
        learning_rate: 0.001,
        momentum: 0.9,
    };
    let mut setup = Setup::default();
    setup.dsp.n_mels = 16;
    setup.embedder = EmbedderConfig {
        n_mels: 16,
        embedding_dim: 8,
        projection_dim: 8,
        channels: vec![4],
        blocks: vec![1],
        stem_stride: 2,
    };
    setup.protocol = ProtocolConfig {
        n_base_classes: 2,
        sessions: 2,
        ways: 2,
        shots: 3,
        base_epochs: 2,
        base_classifier_epochs: 5,
        incremental_epochs: 5,
        batch_size: 8,
        seed,
        optimizer: sgd.clone(),
        classifier_optimizer: sgd,
        ..ProtocolConfig::default()
    };
    let spec = SynthDatasetSpec {
        seed,
        n_classes: 6,
        clips_per_class: 12,
        duration_s: 0.25,
        ..SynthDatasetSpec::default()
    };
    let manifest = parse_manifest(&synth_manifest_text(&spec), Path::new(".")).unwrap();
    let examples = prepare_examples(&manifest, &setup.dsp).unwrap();
    (setup, examples)
}

#[test]
fn same_seed_gives_identical_reports() {
    let (setup, examples) = tiny(4);
    let a = run_on_examples(examples.clone(), &setup.embedder, &setup.protocol).unwrap();
    let b = run_on_examples(examples, &setup.embedder, &setup.protocol).unwrap();
    assert_eq!(a.report.to_json(), b.report.to_json());
    assert!(a.classifier.bitwise_eq(&b.classifier));
    assert!(a.params.bitwise_eq(&b.params));
}

#[test]
fn report_has_one_row_per_session() {
    let (setup, examples) = tiny(1);
    let out = run_on_examples(examples, &setup.embedder, &setup.protocol).unwrap();
    let r = &out.report;
    assert_eq!(r.sessions.len(), 1 + setup.protocol.sessions);
    assert!(r.sessions[0].acc_incr.is_none());
    assert!(r.sessions[1..].iter().all(|s| s.acc_incr.is_some()));
    assert!(r.all.is_some() && r.base.is_some() && r.incr.is_some());
    assert!(r.clustering_ratio.is_some());
}

#[test]
fn classifier_grows_by_ways_per_session() {
    let (setup, examples) = tiny(2);
    let cfg = &setup.protocol;
    let out = run_on_examples(examples, &setup.embedder, cfg).unwrap();
    for (m, s) in out.report.sessions.iter().enumerate() {
        assert_eq!(s.num_classes, cfg.n_base_classes + m * cfg.ways);
    }
    assert_eq!(out.classifier.num_classes(), cfg.total_classes());
    assert_eq!(out.classifier.session_boundaries(), &[0, 2, 4]);
}

#[test]
fn backbone_is_bitwise_frozen_after_base() {
    let (setup, examples) = tiny(3);
    let cfg = &setup.protocol;
    let sessions = split_dataset(examples.clone(), cfg).unwrap();
    let base = train_base(&sessions[0], &setup.embedder, cfg).unwrap();
    assert!(base.params.is_frozen());
    let out = run_on_examples(examples, &setup.embedder, cfg).unwrap();
    assert!(out.params.bitwise_eq(&base.params));
    for col in 0..cfg.n_base_classes {
        assert_ne!(out.classifier.mu_column(col), base.classifier.mu_column(col));
    }
}

#[test]
fn old_training_data_is_never_read_again() {
    let (setup, examples) = tiny(5);
    let sessions = split_dataset(examples, &setup.protocol).unwrap();
    let mut source = InstrumentedSource::new(InMemorySource::new(sessions));
    run_protocol(&mut source, &setup.embedder, &setup.protocol).unwrap();
    assert!(source.stale_train_reads().is_empty());
    let trains: Vec<usize> = source
        .log()
        .iter()
        .filter(|a| a.kind == AccessKind::Train)
        .map(|a| a.session)
        .collect();
    assert_eq!(trains, vec![0, 1, 2]);
    assert!(matches!(source.take_train(0), Err(ProtocolError::DataUnavailable(0))));
}

#[test]
fn base_only_run_has_no_summaries() {
    let (mut setup, examples) = tiny(6);
    setup.protocol.sessions = 0;
    let out = run_on_examples(examples, &setup.embedder, &setup.protocol).unwrap();
    let r = &out.report;
    assert_eq!(r.sessions.len(), 1);
    assert!(r.all.is_none() && r.base.is_none() && r.incr.is_none());
    assert!(r.to_csv().lines().nth(1).unwrap().ends_with(",-,-"));
}

#[test]
fn lambda_zero_leaves_base_weights_untouched() {
    let (setup, examples) = tiny(7);
    let params = EmbedderParams::init(&setup.embedder, 1).unwrap();
    let batch: Vec<&Example> = examples.iter().filter(|e| e.label < 2).take(6).collect();
    let specs: Vec<_> = batch.iter().map(|e| &e.features).collect();
    let labels: Vec<usize> = batch.iter().map(|e| e.label).collect();
    let w = Tensor::new(&[8, 2], (0..16).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
    let supcon = LossConfig {
        lambda: 0.0,
        ..LossConfig::default()
    };
    let (_, theta, gw) = base_batch_gradients(&params, &w, &specs, &labels, &supcon).unwrap();
    assert!(gw.data().iter().all(|&v| v == 0.0));
    assert!(theta.iter().any(|t| t.data().iter().any(|&v| v != 0.0)));
    let ce_only = LossConfig {
        beta: 0.0,
        ..LossConfig::default()
    };
    let (_, theta_ce, _) = base_batch_gradients(&params, &w, &specs, &labels, &ce_only).unwrap();
    let proj = params.names().iter().position(|n| n.starts_with("proj")).unwrap();
    assert!(theta_ce[proj].data().iter().all(|&v| v == 0.0));
}

#[test]
fn deterministic_and_zero_sigma_runs_match() {
    let (setup, examples) = tiny(8);
    let zero = ProtocolConfig {
        sigma_init: 0.0,
        learn_sigma: false,
        ..setup.protocol.clone()
    };
    let plain = ProtocolConfig {
        stochastic: false,
        ..setup.protocol.clone()
    };
    let a = run_on_examples(examples.clone(), &setup.embedder, &zero).unwrap();
    let b = run_on_examples(examples, &setup.embedder, &plain).unwrap();
    assert!(a.classifier.mu_matrix().unwrap().bitwise_eq(&b.classifier.mu_matrix().unwrap()));
    assert_eq!(a.report.sessions, b.report.sessions);
}
