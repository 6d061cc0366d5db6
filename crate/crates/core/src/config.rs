//! TOML run configuration.
//!
//! Sections `[model]`, `[memory]` and `[federation]` mirror the config
//! structs field for field; `[data]` shapes the synthetic client
//! population. Any missing field falls back to the standard benchmark
//! value, and unknown keys are rejected. Positional-table sizes are
//! always derived from `[memory]`, never read from `[model]`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::compare::{standard_benchmark, BenchmarkSpec};
use crate::error::{Error, Result};
use crate::federation::{FedSetup, FederationConfig};
use crate::memory::MemoryConfig;
use crate::model::ModelConfig;
use crate::synth::{ClientStyle, SynthConfig};

/// Synthetic client population settings. Per-client values (`fp_rates`,
/// `amplitudes`) cycle when there are more clients than list entries;
/// clients listed in `swap_ids` use the swapped gesture-to-label mapping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub clients: usize,
    pub sequences: usize,
    pub feature_dim: usize,
    /// 0 means "fill both memories": work_slots + long_slots.
    pub seq_len: usize,
    pub train_ratio: f64,
    pub fp_rates: Vec<f64>,
    pub amplitudes: Vec<f64>,
    pub swap_ids: Vec<usize>,
    pub noise: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            clients: 3,
            sequences: 84,
            feature_dim: 8,
            seq_len: 0,
            train_ratio: 0.75,
            fp_rates: vec![0.1, 0.3, 0.5],
            amplitudes: vec![1.0, 0.8, 1.2],
            swap_ids: vec![2],
            noise: 0.25,
        }
    }
}

impl DataConfig {
    pub fn styles(&self) -> Vec<ClientStyle> {
        (0..self.clients)
            .map(|id| ClientStyle {
                id,
                style_seed: 100 + id as u64,
                gesture_amplitude: self.amplitudes[id % self.amplitudes.len()],
                false_positive_rate: self.fp_rates[id % self.fp_rates.len()],
                gesture_perm: if self.swap_ids.contains(&id) {
                    [1, 0]
                } else {
                    [0, 1]
                },
                noise_sigma: self.noise,
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 {
            return Err(Error::InvalidConfig("data.clients must be >= 1".into()));
        }
        if self.sequences < 3 {
            return Err(Error::InvalidConfig("data.sequences must be >= 3".into()));
        }
        if self.fp_rates.is_empty() || self.amplitudes.is_empty() {
            return Err(Error::InvalidConfig(
                "data.fp_rates and data.amplitudes need at least one entry".into(),
            ));
        }
        if !(self.train_ratio > 0.0 && self.train_ratio < 1.0) {
            return Err(Error::InvalidConfig(
                "data.train_ratio outside (0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// The full run configuration; see the crate README for the file format.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfigFile,
    pub memory: MemoryConfig,
    pub federation: FederationConfig,
    pub data: DataConfig,
}

/// `[model]` section. Slot counts are derived from `[memory]` and the
/// per-camera feature width from `[data]`, so neither is part of this
/// schema; defaults mirror [`ModelConfig::default`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfigFile {
    pub embed_dim: usize,
    pub heads: usize,
    pub latent_tokens: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub ff_dim: usize,
}

impl Default for ModelConfigFile {
    fn default() -> Self {
        let reference = ModelConfig::default();
        ModelConfigFile {
            embed_dim: reference.embed_dim,
            heads: reference.heads,
            latent_tokens: reference.latent_tokens,
            encoder_layers: reference.encoder_layers,
            decoder_layers: reference.decoder_layers,
            ff_dim: reference.ff_dim,
        }
    }
}

impl RunConfig {
    /// The built-in standard benchmark configuration; what the CLI runs
    /// when no config file is given.
    pub fn standard() -> Self {
        let bench = standard_benchmark();
        RunConfig {
            model: ModelConfigFile {
                embed_dim: bench.setup.model.embed_dim,
                heads: bench.setup.model.heads,
                latent_tokens: bench.setup.model.latent_tokens,
                encoder_layers: bench.setup.model.encoder_layers,
                decoder_layers: bench.setup.model.decoder_layers,
                ff_dim: bench.setup.model.ff_dim,
            },
            memory: bench.setup.memory,
            federation: bench.setup.federation,
            data: DataConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::InvalidConfig(format!("config file: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.memory.validate()?;
        self.data.validate()?;
        self.to_benchmark_spec().setup.model.validate()?;
        Ok(())
    }

    /// Resolves the file schema into a runnable benchmark description.
    pub fn to_benchmark_spec(&self) -> BenchmarkSpec {
        let memory = self.memory.clone();
        let seq_len = if self.data.seq_len == 0 {
            memory.work_slots() + memory.long_slots()
        } else {
            self.data.seq_len
        };
        let model = ModelConfig {
            feature_dim: self.data.feature_dim,
            embed_dim: self.model.embed_dim,
            heads: self.model.heads,
            latent_tokens: self.model.latent_tokens,
            encoder_layers: self.model.encoder_layers,
            decoder_layers: self.model.decoder_layers,
            ff_dim: self.model.ff_dim,
            work_slots: memory.work_slots(),
            long_slots: memory.long_slots(),
        };
        BenchmarkSpec {
            styles: self.data.styles(),
            sequences_per_client: self.data.sequences,
            train_ratio: self.data.train_ratio,
            synth: SynthConfig {
                feature_dim: self.data.feature_dim,
                seq_len,
                fps: memory.fps,
            },
            setup: FedSetup {
                model,
                memory,
                federation: self.federation.clone(),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_uses_reference_defaults() {
        let cfg = RunConfig::from_toml("").unwrap();
        assert_eq!(cfg.federation, FederationConfig::default());
        assert_eq!(cfg.model.embed_dim, ModelConfig::default().embed_dim);
        assert_eq!(cfg.memory, MemoryConfig::default());
    }

    #[test]
    fn standard_config_resolves_to_the_standard_benchmark() {
        let spec = RunConfig::standard().to_benchmark_spec();
        assert_eq!(spec, standard_benchmark());
    }

    #[test]
    fn sections_override_fields() {
        let text = r#"
            [memory]
            fps = 2
            work_seconds = 2.0
            long_seconds = 6.0

            [federation]
            rounds = 3
            decoder_lr = 0.5

            [data]
            clients = 2
            sequences = 9
            fp_rates = [0.2]
            noise = 0.0
        "#;
        let cfg = RunConfig::from_toml(text).unwrap();
        assert_eq!(cfg.memory.fps, 2);
        assert_eq!(cfg.federation.rounds, 3);
        assert_eq!(cfg.federation.decoder_lr, 0.5);
        let spec = cfg.to_benchmark_spec();
        assert_eq!(spec.setup.model.work_slots, 4);
        assert_eq!(spec.setup.model.long_slots, 12);
        assert_eq!(spec.synth.seq_len, 16);
        assert_eq!(spec.styles.len(), 2);
        assert_eq!(spec.styles[1].false_positive_rate, 0.2);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        assert!(RunConfig::from_toml("[federation]\nbogus_key = 1\n").is_err());
        assert!(RunConfig::from_toml("[data]\nclients = 0\n").is_err());
        assert!(RunConfig::from_toml("not toml at all [").is_err());
    }

    #[test]
    fn swap_ids_control_gesture_permutation() {
        let cfg = RunConfig::from_toml("[data]\nswap_ids = [0]\n").unwrap();
        let styles = cfg.data.styles();
        assert_eq!(styles[0].gesture_perm, [1, 0]);
        assert_eq!(styles[1].gesture_perm, [0, 1]);
    }
}
