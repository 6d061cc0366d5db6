//! The split-representation federated training protocol and baselines.
//!
//! A warm-start round of plain federated averaging seeds both the shared
//! encoder and every client's personal decoder. Each following round:
//!
//! 1. the server distributes the current encoder to every client;
//! 2. every client fine-tunes its own decoder against the frozen encoder;
//! 3. a sampled subset of clients additionally trains encoder candidates
//!    against their freshly tuned (frozen) decoders;
//! 4. the server aggregates the candidates into the next encoder by a
//!    sample-count-weighted average, summed in ascending client id so
//!    round results are reproducible.
//!
//! No dataset content ever reaches the server: the server-side surface
//! ([`aggregate`], [`select_clients`], [`ServerState`]) accepts only
//! parameter tensors and sample counts. Client updates within a round
//! are independent of one another, so they could run in parallel;
//! executing them in id order keeps results identical either way.
//!
//! Baselines: classic federated averaging of the full parameter set
//! (no personal state) and isolated per-client local training. A new
//! client can be onboarded against a trained encoder by fitting only a
//! fresh decoder for a few epochs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::MemoryConfig;
use crate::metrics::evaluate;
use crate::model::{init_model, loss_and_grads, ModelConfig, TrainSample, CLASSES};
use crate::params::{sgd_step, ParamSet, Partition, Scope};
use crate::synth::ClientDataset;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

/// Protocol hyper-parameters. The defaults keep the reference schedule
/// (100 rounds, 5 decoder epochs, 1 encoder epoch, encoder rate 1e-6,
/// full-model averaging rate 1e-7); those rates barely move a desk-scale
/// model, so benchmark presets override them — see
/// [`crate::compare::standard_benchmark`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederationConfig {
    /// Communication rounds T.
    pub rounds: usize,
    /// Decoder epochs per client per round (e_l).
    pub decoder_epochs: usize,
    /// Encoder epochs per selected client per round (e).
    pub encoder_epochs: usize,
    pub encoder_lr: f64,
    /// Rate for full-model training in the warm start and FedAvg baseline.
    pub fedavg_lr: f64,
    pub decoder_lr: f64,
    /// Fraction of clients selected per round, in (0, 1].
    pub select_fraction: f64,
    /// Epoch budget of the local-only baseline.
    pub local_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for FederationConfig {
    fn default() -> Self {
        FederationConfig {
            rounds: 100,
            decoder_epochs: 5,
            encoder_epochs: 1,
            encoder_lr: 1e-6,
            fedavg_lr: 1e-7,
            decoder_lr: 1e-3,
            select_fraction: 0.5,
            local_epochs: 1000,
            batch_size: 8,
            seed: 0,
        }
    }
}

impl FederationConfig {
    /// The reference schedule and rates; same as [`Default`], named so
    /// configs can say what they mean.
    pub fn reference_rates() -> Self {
        FederationConfig::default()
    }

    pub fn validate(&self, clients: usize) -> Result<()> {
        if clients == 0 {
            return Err(Error::Empty("client set"));
        }
        if self.decoder_epochs == 0 || self.encoder_epochs == 0 {
            return Err(Error::InvalidConfig("epoch counts must be >= 1".into()));
        }
        if !(self.select_fraction > 0.0 && self.select_fraction <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "select_fraction {} outside (0, 1]",
                self.select_fraction
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.encoder_lr <= 0.0 || self.fedavg_lr <= 0.0 || self.decoder_lr <= 0.0 {
            return Err(Error::InvalidConfig(
                "learning rates must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Model + memory + protocol configuration bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct FedSetup {
    pub model: ModelConfig,
    pub memory: MemoryConfig,
    pub federation: FederationConfig,
}

/// One client: its dataset, its personal decoder, and the cached
/// final-memory training views.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub dataset: ClientDataset,
    /// Personal decoder parameters (decoder-tagged subset).
    pub decoder: ParamSet,
    train_cache: Vec<TrainSample>,
}

impl ClientState {
    pub fn new(id: usize, dataset: ClientDataset, mem_cfg: &MemoryConfig) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::Empty("client dataset"));
        }
        let width = dataset.frame_width();
        let train_cache = dataset
            .train()
            .map(|seq| {
                let mem = seq.final_memory(mem_cfg, width)?;
                Ok(TrainSample::from_state(&mem, seq.label))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ClientState {
            id,
            dataset,
            decoder: ParamSet::new(),
            train_cache,
        })
    }

    /// Sample count `N_i`.
    pub fn samples(&self) -> usize {
        self.dataset.len()
    }

    pub fn train_samples(&self) -> &[TrainSample] {
        &self.train_cache
    }
}

/// Server-side state: the shared encoder, the round counter, and the
/// registry of client ids and sample counts.
#[derive(Debug, Clone)]
pub struct ServerState {
    pub encoder: ParamSet,
    pub round: usize,
    pub registry: Vec<(usize, usize)>,
    pub seed: u64,
}

impl ServerState {
    pub fn total_samples(&self) -> usize {
        self.registry.iter().map(|(_, n)| n).sum()
    }
}

/// The clients selected for one round's encoder update, id-sorted.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundPlan {
    pub selected: Vec<usize>,
    /// Total selected samples `N_{S_k}`.
    pub selected_samples: usize,
}

/// Deterministic seed derivation for sub-streams (rounds, clients).
pub fn derive_seed(base: u64, salt: u64) -> u64 {
    let mut x = base ^ salt.wrapping_mul(0x9e3779b97f4a7c15);
    x ^= x >> 30;
    x = x.wrapping_mul(0xbf58476d1ce4e5b9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Sample-count-weighted per-tensor average of shape-identical
/// candidates, summed in the order given. Every output coordinate is
/// clamped to the candidates' coordinate range, which also makes the
/// average of identical candidates bit-identical to them.
pub fn aggregate(candidates: &[(ParamSet, usize)]) -> Result<ParamSet> {
    if candidates.is_empty() {
        return Err(Error::Empty("aggregation candidates"));
    }
    let total: usize = candidates.iter().map(|(_, n)| n).sum();
    if total == 0 {
        return Err(Error::InvalidArgument(
            "aggregation weights sum to zero".into(),
        ));
    }
    let (first, _) = &candidates[0];
    for (other, _) in &candidates[1..] {
        if other.len() != first.len() {
            return Err(Error::InvalidArgument(
                "aggregation candidates have different parameter sets".into(),
            ));
        }
    }

    let mut out = ParamSet::new();
    for (name, partition, head) in first.iter() {
        let mut acc = vec![0.0; head.numel()];
        let mut lo = vec![f64::INFINITY; head.numel()];
        let mut hi = vec![f64::NEG_INFINITY; head.numel()];
        for (candidate, n) in candidates {
            let t = candidate.get(name).ok_or_else(|| {
                Error::InvalidArgument(format!("candidate missing parameter {name:?}"))
            })?;
            if t.shape() != head.shape() {
                return Err(Error::shapes("aggregate", head.shape(), t.shape()));
            }
            let w = *n as f64 / total as f64;
            for ((a, &v), (l, h)) in acc
                .iter_mut()
                .zip(t.data())
                .zip(lo.iter_mut().zip(hi.iter_mut()))
            {
                *a += w * v;
                *l = l.min(v);
                *h = h.max(v);
            }
        }
        for ((a, l), h) in acc.iter_mut().zip(&lo).zip(&hi) {
            *a = a.clamp(*l, *h);
        }
        out.insert(
            name,
            partition,
            crate::tensor::Tensor::new(head.shape().to_vec(), acc)?,
        )?;
    }
    Ok(out)
}

/// Uniform sampling without replacement of `ceil(fraction * k)` client
/// ids; the draw is derived from the server seed and round, so a fixed
/// seed reproduces the same selection sequence.
pub fn select_clients(server: &ServerState, fraction: f64) -> RoundPlan {
    let k = server.registry.len();
    let m = ((fraction * k as f64).ceil() as usize).clamp(1, k);
    let mut ids: Vec<usize> = server.registry.iter().map(|(id, _)| *id).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(server.seed, server.round as u64));
    ids.shuffle(&mut rng);
    let mut selected: Vec<usize> = ids.into_iter().take(m).collect();
    selected.sort_unstable();
    let selected_samples = server
        .registry
        .iter()
        .filter(|(id, _)| selected.contains(id))
        .map(|(_, n)| n)
        .sum();
    RoundPlan {
        selected,
        selected_samples,
    }
}

/// Fixed-order mini-batch SGD over the cached samples. Returns the new
/// parameters and the mean per-sample loss across everything processed.
fn train_epochs(
    mut params: ParamSet,
    samples: &[TrainSample],
    setup: &FedSetup,
    epochs: usize,
    lr: f64,
    scope: Scope,
) -> Result<(ParamSet, f64)> {
    if samples.is_empty() {
        return Err(Error::Empty("training samples"));
    }
    let mut loss_sum = 0.0;
    let mut seen = 0usize;
    for _ in 0..epochs {
        for batch in samples.chunks(setup.federation.batch_size) {
            let (loss, grads) = loss_and_grads(&params, &setup.model, batch, scope)?;
            params = sgd_step(&params, &grads, lr, scope)?;
            loss_sum += loss * batch.len() as f64;
            seen += batch.len();
        }
    }
    Ok((params, loss_sum / seen as f64))
}

/// Personal decoder update against a frozen encoder (`e_l` epochs).
/// Returns the new decoder subset; the encoder is untouched by scope.
pub fn client_decoder_update(
    client: &ClientState,
    encoder: &ParamSet,
    setup: &FedSetup,
    epochs: usize,
    lr: f64,
) -> Result<(ParamSet, f64)> {
    let full = encoder.merged_with(&client.decoder)?;
    if epochs == 0 {
        return Ok((client.decoder.clone(), f64::NAN));
    }
    let (trained, loss) =
        train_epochs(full, &client.train_cache, setup, epochs, lr, Scope::Decoder)?;
    debug_assert!(trained.subset(Partition::Encoder).bits_eq(encoder));
    Ok((trained.subset(Partition::Decoder), loss))
}

/// Encoder candidate from one selected client, trained for `e` epochs
/// against that client's frozen, freshly updated decoder.
pub fn selected_encoder_update(
    client: &ClientState,
    encoder: &ParamSet,
    setup: &FedSetup,
    epochs: usize,
    lr: f64,
) -> Result<(ParamSet, f64)> {
    let full = encoder.merged_with(&client.decoder)?;
    if epochs == 0 {
        return Ok((encoder.clone(), f64::NAN));
    }
    let (trained, loss) =
        train_epochs(full, &client.train_cache, setup, epochs, lr, Scope::Encoder)?;
    debug_assert!(trained.subset(Partition::Decoder).bits_eq(&client.decoder));
    Ok((trained.subset(Partition::Encoder), loss))
}

/// The composed personalized model `omega_i = (decoder_i, shared encoder)`.
#[derive(Debug, Clone)]
pub struct PersonalizedModel {
    pub params: ParamSet,
}

pub fn compose_personalized(decoder: &ParamSet, encoder: &ParamSet) -> Result<PersonalizedModel> {
    Ok(PersonalizedModel {
        params: encoder.merged_with(decoder)?,
    })
}

/// One line-delimited log record; `client` is a client id rendered in
/// decimal or the string `"server"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub round: usize,
    pub client: String,
    pub loss: Option<f64>,
    pub precision: [Option<f64>; CLASSES],
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub records: Vec<LogRecord>,
}

impl TrainingLog {
    pub fn push(&mut self, record: LogRecord) {
        self.records.push(record);
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("log record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(line).map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?);
        }
        Ok(TrainingLog { records })
    }
}

fn eval_precisions(
    params: &ParamSet,
    setup: &FedSetup,
    dataset: &ClientDataset,
) -> [Option<f64>; CLASSES] {
    if dataset.test_idx.is_empty() {
        return [None; CLASSES];
    }
    match evaluate(params, &setup.model, &setup.memory, dataset) {
        Ok(report) => report.precisions(),
        Err(_) => [None; CLASSES],
    }
}

/// Warm start: every client trains a full copy of the seed model for
/// `e` epochs; the sample-weighted average of everything becomes the
/// first shared encoder and seeds every personal decoder.
pub fn fedavg_init(
    datasets: Vec<ClientDataset>,
    setup: &FedSetup,
) -> Result<(ServerState, Vec<ClientState>, TrainingLog)> {
    setup.federation.validate(datasets.len())?;
    setup.model.validate()?;
    let mut clients = datasets
        .into_iter()
        .enumerate()
        .map(|(id, ds)| ClientState::new(id, ds, &setup.memory))
        .collect::<Result<Vec<_>>>()?;

    let seed_model = init_model(&setup.model, setup.federation.seed)?;
    let mut log = TrainingLog::default();
    let mut candidates = Vec::with_capacity(clients.len());
    for client in &clients {
        let (trained, loss) = train_epochs(
            seed_model.clone(),
            &client.train_cache,
            setup,
            setup.federation.encoder_epochs,
            setup.federation.fedavg_lr,
            Scope::All,
        )?;
        log.push(LogRecord {
            round: 0,
            client: client.id.to_string(),
            loss: Some(loss),
            precision: [None; CLASSES],
        });
        candidates.push((trained, client.samples()));
    }
    let averaged = aggregate(&candidates)?;

    let decoder_seed = averaged.subset(Partition::Decoder);
    for client in &mut clients {
        client.decoder = decoder_seed.clone();
    }
    let registry = clients.iter().map(|c| (c.id, c.samples())).collect();
    let server = ServerState {
        encoder: averaged.subset(Partition::Encoder),
        round: 1,
        registry,
        seed: setup.federation.seed,
    };
    Ok((server, clients, log))
}

/// One communication round; appends its records to `log`.
pub fn run_round(
    server: &mut ServerState,
    clients: &mut [ClientState],
    setup: &FedSetup,
    log: &mut TrainingLog,
) -> Result<RoundPlan> {
    let round = server.round;
    let encoder = server.encoder.clone();

    let mut loss_sum = 0.0;
    for client in clients.iter_mut() {
        let (decoder, loss) = client_decoder_update(
            client,
            &encoder,
            setup,
            setup.federation.decoder_epochs,
            setup.federation.decoder_lr,
        )?;
        client.decoder = decoder;
        loss_sum += loss;
        log.push(LogRecord {
            round,
            client: client.id.to_string(),
            loss: Some(loss),
            precision: [None; CLASSES],
        });
    }

    let plan = select_clients(server, setup.federation.select_fraction);
    let mut candidates = Vec::with_capacity(plan.selected.len());
    for &id in &plan.selected {
        let client = clients
            .iter()
            .find(|c| c.id == id)
            .ok_or_else(|| Error::InvalidArgument(format!("selected unknown client {id}")))?;
        let (candidate, _) = selected_encoder_update(
            client,
            &encoder,
            setup,
            setup.federation.encoder_epochs,
            setup.federation.encoder_lr,
        )?;
        candidates.push((candidate, client.samples()));
    }
    server.encoder = aggregate(&candidates)?;
    server.round += 1;

    // per-round held-out metrics of each composed personalized model
    for client in clients.iter() {
        let omega = compose_personalized(&client.decoder, &server.encoder)?;
        let precision = eval_precisions(&omega.params, setup, &client.dataset);
        log.push(LogRecord {
            round,
            client: client.id.to_string(),
            loss: None,
            precision,
        });
    }
    log.push(LogRecord {
        round,
        client: "server".to_string(),
        loss: Some(loss_sum / clients.len() as f64),
        precision: [None; CLASSES],
    });
    Ok(plan)
}

/// Outcome of a full training run.
#[derive(Debug, Clone)]
pub struct TrainingResult {
    pub server: ServerState,
    pub clients: Vec<ClientState>,
    pub log: TrainingLog,
}

impl TrainingResult {
    pub fn personalized(&self, client: usize) -> Result<PersonalizedModel> {
        compose_personalized(&self.clients[client].decoder, &self.server.encoder)
    }
}

/// Warm start plus `rounds` communication rounds.
pub fn run_training(datasets: Vec<ClientDataset>, setup: &FedSetup) -> Result<TrainingResult> {
    let (mut server, mut clients, mut log) = fedavg_init(datasets, setup)?;
    for _ in 0..setup.federation.rounds {
        run_round(&mut server, &mut clients, setup, &mut log)?;
    }
    Ok(TrainingResult {
        server,
        clients,
        log,
    })
}

/// Classic federated averaging: every round all clients train the full
/// parameter set and the server averages everything; no personal state
/// survives a round.
pub fn run_fedavg_baseline(
    datasets: Vec<ClientDataset>,
    setup: &FedSetup,
) -> Result<(ParamSet, TrainingLog)> {
    setup.federation.validate(datasets.len())?;
    setup.model.validate()?;
    let clients = datasets
        .into_iter()
        .enumerate()
        .map(|(id, ds)| ClientState::new(id, ds, &setup.memory))
        .collect::<Result<Vec<_>>>()?;

    let mut global = init_model(&setup.model, setup.federation.seed)?;
    let mut log = TrainingLog::default();
    for round in 1..=setup.federation.rounds {
        let mut candidates = Vec::with_capacity(clients.len());
        for client in &clients {
            let (trained, loss) = train_epochs(
                global.clone(),
                &client.train_cache,
                setup,
                setup.federation.encoder_epochs,
                setup.federation.fedavg_lr,
                Scope::All,
            )?;
            log.push(LogRecord {
                round,
                client: client.id.to_string(),
                loss: Some(loss),
                precision: [None; CLASSES],
            });
            candidates.push((trained, client.samples()));
        }
        global = aggregate(&candidates)?;
        for client in &clients {
            let precision = eval_precisions(&global, setup, &client.dataset);
            log.push(LogRecord {
                round,
                client: client.id.to_string(),
                loss: None,
                precision,
            });
        }
    }
    Ok((global, log))
}

/// Isolated per-client training; no parameters are ever exchanged.
pub fn run_local_baseline(
    datasets: Vec<ClientDataset>,
    setup: &FedSetup,
) -> Result<(Vec<ParamSet>, TrainingLog)> {
    setup.federation.validate(datasets.len())?;
    setup.model.validate()?;
    let clients = datasets
        .into_iter()
        .enumerate()
        .map(|(id, ds)| ClientState::new(id, ds, &setup.memory))
        .collect::<Result<Vec<_>>>()?;

    let mut log = TrainingLog::default();
    let mut models = Vec::with_capacity(clients.len());
    for client in &clients {
        let mut params = init_model(&setup.model, setup.federation.seed)?;
        for epoch in 1..=setup.federation.local_epochs {
            let (next, loss) = train_epochs(
                params,
                &client.train_cache,
                setup,
                1,
                setup.federation.fedavg_lr,
                Scope::All,
            )?;
            params = next;
            log.push(LogRecord {
                round: epoch,
                client: client.id.to_string(),
                loss: Some(loss),
                precision: [None; CLASSES],
            });
        }
        let precision = eval_precisions(&params, setup, &client.dataset);
        log.push(LogRecord {
            round: setup.federation.local_epochs,
            client: client.id.to_string(),
            loss: None,
            precision,
        });
        models.push(params);
    }
    Ok((models, log))
}

/// Fits a fresh decoder for a new client against a trained, frozen
/// encoder. With `epochs == 0` the returned decoder is the fresh
/// initialization itself.
pub fn onboard_new_client(
    encoder: &ParamSet,
    dataset: ClientDataset,
    epochs: usize,
    setup: &FedSetup,
    init_seed: u64,
) -> Result<ParamSet> {
    if dataset.is_empty() || dataset.train_idx.is_empty() {
        return Err(Error::Empty("new client dataset"));
    }
    let mut client = ClientState::new(usize::MAX, dataset, &setup.memory)?;
    client.decoder = init_model(&setup.model, init_seed)?.subset(Partition::Decoder);
    if epochs == 0 {
        return Ok(client.decoder);
    }
    let (decoder, _) =
        client_decoder_update(&client, encoder, setup, epochs, setup.federation.decoder_lr)?;
    Ok(decoder)
}
