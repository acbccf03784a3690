//! The few-shot class-incremental lifecycle: session splits, base training,
//! frozen-backbone incremental sessions, evaluation and AA/PD metrics.

mod evaluate;
mod metrics;
mod run;
mod sampler;
mod source;
mod split;
mod train;

use serde::{Deserialize, Serialize};

use crate::classifier::ClassifierError;
use crate::datagen::{DatagenError, SplitHint};
use crate::diffmath::TensorError;
use crate::dsp::{DspError, LogMelSpectrogram};
use crate::embedder::EmbedderError;
use crate::losses::{LossConfig, LossError};

pub use evaluate::{clustering_ratio, evaluate, SessionMetrics};
pub use metrics::{aa_pd, AaPdSummary, RunReport, Variant};
pub use run::{episode_seed, prepare_examples, run_digest, run_on_examples, run_protocol, RunOutcome};
pub use sampler::{balanced_batches, sample_episode};
pub use source::{Access, AccessKind, InMemorySource, InstrumentedSource, SessionSource};
pub use split::split_dataset;
pub use train::{base_batch_gradients, train_base, train_incremental, BaseOutcome};

#[derive(Debug, thiserror::Error)]
pub enum ProtocolError {
    #[error("invalid protocol config: {0}")]
    InvalidConfig(String),
    #[error("need {needed} classes, dataset has {available}")]
    InsufficientClasses { needed: usize, available: usize },
    #[error("class {class} has {available} training samples, needs {needed}")]
    InsufficientShots { class: usize, needed: usize, available: usize },
    #[error("class {class} has no evaluation samples")]
    NoEvalData { class: usize },
    #[error("evaluation set of session {0} is empty")]
    EmptyEvalSet(usize),
    #[error("{variant} metrics need {needed} sessions, got {got}")]
    TooFewSessions {
        variant: &'static str,
        needed: usize,
        got: usize,
    },
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("training diverged in {stage} at epoch {epoch}: {detail}")]
    Diverged {
        stage: &'static str,
        epoch: usize,
        detail: String,
    },
    #[error("training data of session {0} is no longer available")]
    DataUnavailable(usize),
    #[error("session {0} does not exist")]
    UnknownSession(usize),
    #[error(transparent)]
    Embedder(#[from] EmbedderError),
    #[error(transparent)]
    Loss(LossError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Tensor(TensorError),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Data(#[from] DatagenError),
}

impl From<LossError> for ProtocolError {
    fn from(e: LossError) -> Self {
        match e {
            LossError::Tensor(t) => t.into(),
            other => ProtocolError::Loss(other),
        }
    }
}

impl From<TensorError> for ProtocolError {
    fn from(e: TensorError) -> Self {
        ProtocolError::Tensor(e)
    }
}

/// How the base session trains the backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaseMode {
    /// `λ·CE + β·SupCon` on every batch.
    Joint,
    /// SupCon alone, then the classifier on the frozen backbone.
    TwoStage,
}

impl std::str::FromStr for BaseMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "joint" => Ok(BaseMode::Joint),
            "two-stage" | "two_stage" => Ok(BaseMode::TwoStage),
            other => Err(format!("unknown base mode `{other}` (expected joint or two-stage)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub momentum: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            momentum: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtocolConfig {
    pub n_base_classes: usize,
    /// Number of incremental sessions `M`.
    pub sessions: usize,
    /// `N`, classes per incremental session.
    pub ways: usize,
    /// `K`, labelled clips per new class.
    pub shots: usize,
    pub base_epochs: usize,
    /// Full-batch classifier steps on frozen base embeddings.
    pub base_classifier_epochs: usize,
    pub incremental_epochs: usize,
    pub batch_size: usize,
    pub base_mode: BaseMode,
    pub seed: u64,
    pub loss: LossConfig,
    /// Optimiser for the backbone (and the temporary base weights).
    pub optimizer: OptimConfig,
    /// Optimiser for the classifier's `μ` and `σ`.
    pub classifier_optimizer: OptimConfig,
    /// Initial `σ` entry for new classifier columns.
    pub sigma_init: f64,
    /// Whether `σ` receives gradient updates.
    pub learn_sigma: bool,
    /// `false` trains the classifier with `W = μ` and no noise.
    pub stochastic: bool,
    /// Share of clips without a split hint held out for evaluation.
    pub eval_fraction: f64,
    /// Clips per embedding batch at evaluation.
    pub embed_chunk: usize,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            n_base_classes: 60,
            sessions: 8,
            ways: 5,
            shots: 5,
            base_epochs: 200,
            base_classifier_epochs: 200,
            incremental_epochs: 200,
            batch_size: 64,
            base_mode: BaseMode::Joint,
            seed: 0,
            loss: LossConfig::default(),
            optimizer: OptimConfig::default(),
            classifier_optimizer: OptimConfig::default(),
            sigma_init: 0.1,
            learn_sigma: true,
            stochastic: true,
            eval_fraction: 0.3,
            embed_chunk: 32,
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<(), ProtocolError> {
        let bad = |m: String| Err(ProtocolError::InvalidConfig(m));
        if self.n_base_classes < 2 {
            return bad("n_base_classes must be at least 2".into());
        }
        if self.sessions > 0 && (self.ways == 0 || self.shots == 0) {
            return bad("ways and shots must be positive when sessions > 0".into());
        }
        if self.batch_size < 4 || self.batch_size < 2 * self.ways {
            return bad(format!(
                "batch_size {} must be at least max(4, 2·ways = {})",
                self.batch_size,
                2 * self.ways
            ));
        }
        if self.base_mode == BaseMode::TwoStage && self.loss.beta == 0.0 {
            return bad("two-stage base training needs beta > 0".into());
        }
        if !(self.sigma_init >= 0.0 && self.sigma_init.is_finite()) {
            return bad("sigma_init must be finite and nonnegative".into());
        }
        if !(self.eval_fraction > 0.0 && self.eval_fraction < 1.0) {
            return bad("eval_fraction must lie in (0, 1)".into());
        }
        for o in [&self.optimizer, &self.classifier_optimizer] {
            if !(o.learning_rate > 0.0) || !(0.0..1.0).contains(&o.momentum) {
                return bad("learning_rate must be positive and momentum in [0, 1)".into());
            }
        }
        if self.embed_chunk == 0 {
            return bad("embed_chunk must be positive".into());
        }
        self.loss.validate().map_err(ProtocolError::InvalidConfig)
    }

    /// Total classes after the last session.
    pub fn total_classes(&self) -> usize {
        self.n_base_classes + self.sessions * self.ways
    }
}

/// One labelled spectrogram.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub features: LogMelSpectrogram,
    pub label: usize,
    pub split: SplitHint,
}

/// A session's data. `classes` is sorted.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionDataset {
    pub index: usize,
    pub classes: Vec<usize>,
    pub train: Vec<Example>,
    pub eval: Vec<Example>,
}
