//! Personalized federated learning with a long short-term transformer.
//!
//! A desk-scale, fully deterministic simulation of split-representation
//! federated training for streaming maneuver-intention inference. The
//! shared encoder compresses a long FIFO frame memory into fixed-length
//! latents and is aggregated across clients; the per-client decoder
//! attends over the recent work memory plus those latents and stays
//! local. Synthetic heterogeneous driving-scenario data, the FedAvg and
//! local-only baselines, a rear-view ablation, and a comparison harness
//! round out the framework.
//!
//! In-process use, end to end:
//!
//! ```
//! use pfl_lstr::federation::{run_training, FedSetup, FederationConfig};
//! use pfl_lstr::memory::MemoryConfig;
//! use pfl_lstr::metrics::evaluate;
//! use pfl_lstr::model::ModelConfig;
//! use pfl_lstr::synth::{
//!     generate_client_dataset_with, split_train_test, ClientStyle, SynthConfig,
//! };
//!
//! let memory = MemoryConfig { fps: 1, work_seconds: 2.0, long_seconds: 4.0 };
//! let setup = FedSetup {
//!     model: ModelConfig {
//!         feature_dim: 2,
//!         embed_dim: 8,
//!         heads: 2,
//!         latent_tokens: 2,
//!         encoder_layers: 1,
//!         decoder_layers: 1,
//!         ff_dim: 8,
//!         work_slots: memory.work_slots(),
//!         long_slots: memory.long_slots(),
//!     },
//!     memory,
//!     federation: FederationConfig {
//!         rounds: 1,
//!         local_epochs: 1,
//!         encoder_lr: 1e-2,
//!         fedavg_lr: 1e-2,
//!         decoder_lr: 3e-2,
//!         select_fraction: 1.0,
//!         ..FederationConfig::reference_rates()
//!     },
//! };
//!
//! // two clients with opposite gesture-to-label mappings
//! let synth = SynthConfig { feature_dim: 2, seq_len: 6, fps: 1 };
//! let datasets: Vec<_> = (0..2)
//!     .map(|id| {
//!         let mut style = ClientStyle::seeded(id, id as u64);
//!         style.gesture_perm = if id == 1 { [1, 0] } else { [0, 1] };
//!         let ds = generate_client_dataset_with(&style, 12, 7, &synth).unwrap();
//!         split_train_test(&ds, 0.75, 7).unwrap()
//!     })
//!     .collect();
//!
//! let result = run_training(datasets, &setup).unwrap();
//! let omega = result.personalized(0).unwrap();
//! let report = evaluate(&omega.params, &setup.model, &setup.memory, &result.clients[0].dataset)
//!     .unwrap();
//! assert_eq!(report.samples, result.clients[0].dataset.test_idx.len());
//! assert!(report.macro_precision().is_some());
//! ```

pub mod checkpoint;
pub mod compare;
pub mod config;
pub mod error;
pub mod federation;
pub mod gradcheck;
pub mod graph;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod params;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Graph, NodeId};
pub use memory::{FeatureFrame, MemoryConfig, MemoryState, MemoryView};
pub use model::{IntentionLabel, ModelConfig, TrainSample};
pub use params::{ParamSet, Partition, Scope};
pub use tensor::Tensor;
