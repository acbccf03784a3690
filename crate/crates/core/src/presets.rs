//! Ready-made configurations.

use serde::{Deserialize, Serialize};

use crate::datagen::SynthDatasetSpec;
use crate::dsp::DspConfig;
use crate::embedder::EmbedderConfig;
use crate::protocol::{OptimConfig, ProtocolConfig};

/// Everything a protocol run needs besides the data.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Setup {
    pub dsp: DspConfig,
    pub embedder: EmbedderConfig,
    pub protocol: ProtocolConfig,
}

/// The 10-class synthetic corpus: 30 half-second clips per class.
pub fn synthetic_data(seed: u64) -> SynthDatasetSpec {
    SynthDatasetSpec {
        seed,
        ..SynthDatasetSpec::default()
    }
}

/// A CPU-sized run on [`synthetic_data`]: 6 base classes and two 2-way
/// 5-shot sessions, 32 mel bands, a 32-dimensional embedding and SGD at
/// learning rate 0.001.
pub fn synthetic_desk(seed: u64) -> Setup {
    let sgd = OptimConfig {
        learning_rate: 0.001,
        momentum: 0.9,
    };
    Setup {
        dsp: DspConfig {
            n_mels: 32,
            ..DspConfig::default()
        },
        embedder: EmbedderConfig {
            n_mels: 32,
            embedding_dim: 32,
            projection_dim: 16,
            ..EmbedderConfig::default()
        },
        protocol: ProtocolConfig {
            n_base_classes: 6,
            sessions: 2,
            ways: 2,
            shots: 5,
            base_epochs: 30,
            base_classifier_epochs: 50,
            incremental_epochs: 50,
            batch_size: 32,
            seed,
            optimizer: sgd.clone(),
            classifier_optimizer: sgd,
            ..ProtocolConfig::default()
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_preset_is_valid() {
        let s = synthetic_desk(3);
        s.protocol.validate().unwrap();
        s.embedder.validate().unwrap();
        assert_eq!(s.protocol.total_classes(), synthetic_data(3).n_classes);
        assert_eq!(s.dsp.n_mels, s.embedder.n_mels);
    }
}
