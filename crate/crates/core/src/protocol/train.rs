use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::sampler::balanced_batches;
use super::{BaseMode, Example, ProtocolConfig, ProtocolError, SessionDataset};
use crate::classifier::{class_prototypes, Prototype, StochasticClassifier};
use crate::datagen::mix_seed;
use crate::diffmath::{Graph, Sgd, Tensor, TensorError, Var};
use crate::dsp::LogMelSpectrogram;
use crate::embedder::{batch_input, embed_all, embed_graph, project_graph, EmbedderConfig, EmbedderParams};
use crate::losses::{cosine_ce_loss, incremental_loss, joint_base_loss, LossConfig, PrototypeTable};

const STREAM_INIT: u64 = 0x1A17;
const STREAM_BATCHES: u64 = 0xBA7C;
const STREAM_BASE_W: u64 = 0xBA5E;
const STREAM_NOISE: u64 = 0xC1A5;

/// Result of the base session.
#[derive(Debug, Clone)]
pub struct BaseOutcome {
    /// Frozen backbone.
    pub params: EmbedderParams,
    /// Classifier over the base classes.
    pub classifier: StochasticClassifier,
    /// Mean batch loss per backbone epoch.
    pub backbone_losses: Vec<f64>,
    /// Loss per classifier step.
    pub classifier_losses: Vec<f64>,
}

fn diverged(stage: &'static str, epoch: usize) -> impl Fn(ProtocolError) -> ProtocolError {
    move |e| match e {
        ProtocolError::Tensor(TensorError::NonFinite { op, node }) => ProtocolError::Diverged {
            stage,
            epoch,
            detail: format!("non-finite value from {op} at node {node}"),
        },
        other => other,
    }
}

fn finite_loss(value: f64, stage: &'static str, epoch: usize) -> Result<f64, ProtocolError> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(ProtocolError::Diverged {
            stage,
            epoch,
            detail: format!("loss is {value}"),
        })
    }
}

/// Loss and gradients of one base batch: `(loss, ∂/∂Θ in parameter order, ∂/∂W)`.
/// `w` is the `d × |C_0|` base weight matrix; labels are its column indices.
pub fn base_batch_gradients(
    params: &EmbedderParams,
    w: &Tensor,
    specs: &[&LogMelSpectrogram],
    labels: &[usize],
    loss: &LossConfig,
) -> Result<(f64, Vec<Tensor>, Tensor), ProtocolError> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let input = g.input(batch_input(params.config(), specs)?);
    let emb = embed_graph(&mut g, params.config(), &bound, input)?;
    let proj = if loss.beta != 0.0 {
        project_graph(&mut g, &bound, emb)?
    } else {
        emb
    };
    let w_var = g.param(w.clone());
    let l = joint_base_loss(&mut g, emb, proj, labels, w_var, loss)?;
    let grads = g.backward(l)?;
    let theta = bound.vars().iter().map(|&v| grads.wrt(v)).collect();
    Ok((g.value(l).data()[0], theta, grads.wrt(w_var)))
}

fn column_labels(labels: &[usize], classes: &[usize]) -> Vec<usize> {
    labels
        .iter()
        .map(|y| classes.binary_search(y).expect("label belongs to the session"))
        .collect()
}

/// Train `(μ, σ)` for `epochs` full-batch steps, drawing fresh noise every
/// step. `objective` builds the loss from the sampled weight variable.
fn train_classifier<F>(
    state: &mut StochasticClassifier,
    epochs: usize,
    cfg: &ProtocolConfig,
    stage: &'static str,
    noise_stream: u64,
    mut objective: F,
) -> Result<Vec<f64>, ProtocolError>
where
    F: FnMut(&mut Graph, Var, &StochasticClassifier) -> Result<Var, ProtocolError>,
{
    let mut opt = Sgd::new(cfg.classifier_optimizer.learning_rate, cfg.classifier_optimizer.momentum);
    let mut losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut step = || -> Result<f64, ProtocolError> {
            let mut mu = state.mu_matrix()?;
            let mut sigma = state.sigma_matrix()?;
            let mut g = Graph::new();
            let mu_v = g.param(mu.clone());
            let mut sigma_v = None;
            let w = if cfg.stochastic {
                let s = if cfg.learn_sigma {
                    let s = g.param(sigma.clone());
                    sigma_v = Some(s);
                    s
                } else {
                    g.input(sigma.clone())
                };
                let eps = g.input(state.noise(mix_seed(&[noise_stream, epoch as u64]))?);
                let spread = g.mul(eps, s)?;
                g.add(mu_v, spread)?
            } else {
                mu_v
            };
            let loss = objective(&mut g, w, state)?;
            let value = finite_loss(g.value(loss).data()[0], stage, epoch)?;
            let grads = g.backward(loss)?;
            match sigma_v {
                Some(s) => opt.step(&mut [&mut mu, &mut sigma], &[grads.wrt(mu_v), grads.wrt(s)])?,
                None => opt.step(&mut [&mut mu], &[grads.wrt(mu_v)])?,
            }
            state.set_matrices(&mu, &sigma)?;
            Ok(value)
        };
        losses.push(step().map_err(diverged(stage, epoch))?);
    }
    Ok(losses)
}

/// Base session: train the backbone, freeze it, initialise `μ` from class
/// prototypes and train the classifier with cosine cross-entropy.
pub fn train_base(base: &SessionDataset, embedder: &EmbedderConfig, cfg: &ProtocolConfig) -> Result<BaseOutcome, ProtocolError> {
    cfg.validate()?;
    let classes = &base.classes;
    if base.train.is_empty() || classes.is_empty() {
        return Err(ProtocolError::InsufficientClasses {
            needed: cfg.n_base_classes,
            available: 0,
        });
    }
    let mut params = EmbedderParams::init(embedder, mix_seed(&[cfg.seed, STREAM_INIT]))?;
    let labels = column_labels(&base.train.iter().map(|e| e.label).collect::<Vec<_>>(), classes);
    let d = embedder.embedding_dim;
    let mut w = {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, STREAM_BASE_W]));
        let dist = Normal::new(0.0, (1.0 / d as f64).sqrt()).expect("positive std");
        Tensor::new(&[d, classes.len()], (0..d * classes.len()).map(|_| dist.sample(&mut rng)).collect())?
    };
    let loss_cfg = match cfg.base_mode {
        BaseMode::Joint => cfg.loss.clone(),
        BaseMode::TwoStage => LossConfig {
            lambda: 0.0,
            ..cfg.loss.clone()
        },
    };
    let mut opt_theta = Sgd::new(cfg.optimizer.learning_rate, cfg.optimizer.momentum);
    let mut opt_w = Sgd::new(cfg.optimizer.learning_rate, cfg.optimizer.momentum);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, STREAM_BATCHES]));
    let mut backbone_losses = Vec::with_capacity(cfg.base_epochs);
    for epoch in 0..cfg.base_epochs {
        let batches = balanced_batches(&labels, cfg.batch_size, &mut rng);
        let mut total = 0.0;
        for batch in &batches {
            let specs: Vec<&LogMelSpectrogram> = batch.iter().map(|&i| &base.train[i].features).collect();
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let mut step = || -> Result<f64, ProtocolError> {
                let (loss, theta, gw) = base_batch_gradients(&params, &w, &specs, &y, &loss_cfg)?;
                let loss = finite_loss(loss, "base", epoch)?;
                params.step(&theta, &mut opt_theta)?;
                if loss_cfg.lambda != 0.0 {
                    opt_w.step(&mut [&mut w], &[gw])?;
                }
                Ok(loss)
            };
            total += step().map_err(diverged("base", epoch))?;
        }
        backbone_losses.push(total / batches.len() as f64);
    }
    params.freeze();

    let specs: Vec<&LogMelSpectrogram> = base.train.iter().map(|e| &e.features).collect();
    let emb = embed_all(&params, &specs, cfg.embed_chunk)?;
    let protos = class_prototypes(&emb, &base.train.iter().map(|e| e.label).collect::<Vec<_>>())?;
    let mut classifier = StochasticClassifier::new(d);
    classifier.expand(&protos.into_values().collect::<Vec<Prototype>>(), cfg.sigma_init)?;
    let classifier_losses = train_classifier(
        &mut classifier,
        cfg.base_classifier_epochs,
        cfg,
        "base classifier",
        mix_seed(&[cfg.seed, STREAM_NOISE, 0]),
        |g, w, _| {
            let e = g.input(emb.clone());
            Ok(cosine_ce_loss(g, e, &labels, w, cfg.loss.scale)?)
        },
    )?;
    Ok(BaseOutcome {
        params,
        classifier,
        backbone_losses,
        classifier_losses,
    })
}

/// One incremental session: embed the support set with the frozen backbone,
/// add its classes to the classifier and train every column against the
/// incremental objective. `old_prototypes` must cover every class already
/// in `state`.
pub fn train_incremental(
    session: usize,
    support: &[Example],
    params: &EmbedderParams,
    mut state: StochasticClassifier,
    old_prototypes: &BTreeMap<usize, Vec<f64>>,
    cfg: &ProtocolConfig,
) -> Result<StochasticClassifier, ProtocolError> {
    if !params.is_frozen() {
        return Err(ProtocolError::InvalidConfig("incremental sessions need a frozen backbone".into()));
    }
    if support.is_empty() {
        return Err(ProtocolError::InsufficientShots {
            class: 0,
            needed: cfg.shots,
            available: 0,
        });
    }
    let specs: Vec<&LogMelSpectrogram> = support.iter().map(|e| &e.features).collect();
    let emb = embed_all(params, &specs, cfg.embed_chunk)?;
    let support_labels: Vec<usize> = support.iter().map(|e| e.label).collect();
    let protos = class_prototypes(&emb, &support_labels)?;
    let old_classes = state.class_ids().to_vec();
    let new_classes: Vec<usize> = protos.keys().copied().collect();
    state.expand(&protos.into_values().collect::<Vec<_>>(), cfg.sigma_init)?;
    let columns: Vec<usize> = support_labels
        .iter()
        .map(|y| state.column_of(*y).expect("just added"))
        .collect();
    train_classifier(
        &mut state,
        cfg.incremental_epochs,
        cfg,
        "incremental",
        mix_seed(&[cfg.seed, STREAM_NOISE, session as u64]),
        |g, w, st| {
            let mut table_protos = BTreeMap::new();
            for c in &old_classes {
                let p = old_prototypes.get(c).ok_or(crate::losses::LossError::MissingPrototype(*c))?;
                table_protos.insert(*c, p.clone());
            }
            for c in &new_classes {
                let col = st.column_of(*c).expect("new class present");
                table_protos.insert(*c, st.mu_column(col).to_vec());
            }
            let table = PrototypeTable::build(&table_protos, st.class_ids(), &old_classes)?;
            let e = g.input(emb.clone());
            Ok(incremental_loss(g, e, &columns, &table, w, &cfg.loss)?)
        },
    )?;
    Ok(state)
}
