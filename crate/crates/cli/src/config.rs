use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};

use fscil::datagen::SynthDatasetSpec;
use fscil::dsp::DspConfig;
use fscil::embedder::EmbedderConfig;
use fscil::presets::{synthetic_data, synthetic_desk};
use fscil::protocol::{BaseMode, ProtocolConfig};

use crate::error::CliError;

/// Everything a command needs. Loaded from TOML, then overridden by
/// `FSCIL_*` environment variables, then by flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Drives the protocol and, for the synthetic corpus, the data.
    pub seed: u64,
    /// Worker threads; all cores when absent.
    pub workers: Option<usize>,
    pub out_dir: PathBuf,
    /// Dataset manifest. The synthetic corpus is used when absent.
    pub manifest: Option<PathBuf>,
    pub synthetic: SynthDatasetSpec,
    pub dsp: DspConfig,
    pub embedder: EmbedderConfig,
    pub protocol: ProtocolConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let setup = synthetic_desk(0);
        Self {
            seed: 0,
            workers: None,
            out_dir: PathBuf::from("fscil-out"),
            manifest: None,
            synthetic: synthetic_data(0),
            dsp: setup.dsp,
            embedder: setup.embedder,
            protocol: setup.protocol,
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// TOML configuration file.
    #[arg(long, global = true, env = "FSCIL_CONFIG")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, env = "FSCIL_SEED")]
    pub seed: Option<u64>,
    #[arg(long, global = true, env = "FSCIL_WORKERS")]
    pub workers: Option<usize>,
    #[arg(long, global = true, env = "FSCIL_OUT_DIR")]
    pub out_dir: Option<PathBuf>,
    #[arg(long, global = true, env = "FSCIL_MANIFEST")]
    pub manifest: Option<PathBuf>,
    /// joint or two-stage
    #[arg(long, global = true, env = "FSCIL_BASE_MODE")]
    pub base_mode: Option<BaseMode>,
    #[arg(long, global = true, env = "FSCIL_LAMBDA")]
    pub lambda: Option<f64>,
    #[arg(long, global = true, env = "FSCIL_BETA")]
    pub beta: Option<f64>,
    #[arg(long, global = true, env = "FSCIL_ALPHA")]
    pub alpha: Option<f64>,
    #[arg(long, global = true, env = "FSCIL_TAU")]
    pub tau: Option<f64>,
    #[arg(long, global = true, env = "FSCIL_SCALE")]
    pub scale: Option<f64>,
    #[arg(long, global = true, env = "FSCIL_SIGMA_INIT")]
    pub sigma_init: Option<f64>,
}

impl RunConfig {
    /// Parse a TOML file. A relative `manifest` is resolved against the
    /// file's directory.
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| CliError::Validation(format!("config {}: {e}", path.display())))?;
        if let (Some(m), Some(dir)) = (&cfg.manifest, path.parent()) {
            if m.is_relative() {
                cfg.manifest = Some(dir.join(m));
            }
        }
        Ok(cfg)
    }

    /// File (or defaults), then overrides, then validation.
    pub fn resolve(o: &Overrides) -> Result<Self, CliError> {
        let mut cfg = match &o.config {
            Some(p) => Self::from_file(p)?,
            None => Self::default(),
        };
        cfg.apply(o);
        cfg.finalize()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        macro_rules! set {
            ($src:expr => $dst:expr) => {
                if let Some(v) = $src.clone() {
                    $dst = v;
                }
            };
        }
        set!(o.seed => self.seed);
        set!(o.out_dir => self.out_dir);
        set!(o.base_mode => self.protocol.base_mode);
        set!(o.lambda => self.protocol.loss.lambda);
        set!(o.beta => self.protocol.loss.beta);
        set!(o.alpha => self.protocol.loss.alpha);
        set!(o.tau => self.protocol.loss.tau);
        set!(o.scale => self.protocol.loss.scale);
        set!(o.sigma_init => self.protocol.sigma_init);
        if o.workers.is_some() {
            self.workers = o.workers;
        }
        if o.manifest.is_some() {
            self.manifest = o.manifest.clone();
        }
    }

    /// Propagate the seed and check every section.
    pub fn finalize(&mut self) -> Result<(), CliError> {
        self.protocol.seed = self.seed;
        self.synthetic.seed = self.seed;
        let bad = |m: String| Err(CliError::Validation(m));
        if self.workers == Some(0) {
            return bad("workers must be positive".into());
        }
        if self.dsp.n_mels != self.embedder.n_mels {
            return bad(format!(
                "dsp.n_mels = {} but embedder.n_mels = {}",
                self.dsp.n_mels, self.embedder.n_mels
            ));
        }
        self.protocol.validate()?;
        self.embedder.validate().map_err(|e| CliError::Validation(e.to_string()))?;
        if self.manifest.is_none() {
            self.synthetic.validate()?;
            self.dsp.geometry(self.synthetic.sample_rate)?;
        }
        Ok(())
    }

    /// The configuration as echoed into reports. `out_dir` is left out so
    /// that the same experiment written to two places reports identically.
    pub fn to_json(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("config serialises");
        v.as_object_mut().expect("struct").remove("out_dir");
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let mut c = RunConfig::default();
        c.finalize().unwrap();
    }

    #[test]
    fn toml_round_trip() {
        let c = RunConfig::default();
        let text = toml::to_string(&c).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn flags_override_file_values() {
        let mut c: RunConfig = toml::from_str("seed = 3\n[protocol.loss]\nbeta = 0.5\n").unwrap();
        assert_eq!(c.protocol.loss.beta, 0.5);
        c.apply(&Overrides {
            beta: Some(0.0),
            seed: Some(9),
            ..Overrides::default()
        });
        c.finalize().unwrap();
        assert_eq!((c.seed, c.protocol.seed, c.synthetic.seed), (9, 9, 9));
        assert_eq!(c.protocol.loss.beta, 0.0);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("sead = 3\n").is_err());
    }

    #[test]
    fn mismatched_mel_counts_fail_validation() {
        let mut c = RunConfig::default();
        c.dsp.n_mels = 40;
        assert!(matches!(c.finalize(), Err(CliError::Validation(_))));
    }
}
