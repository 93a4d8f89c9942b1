//! Federated trainer protocols built on a shared round driver.
//!
//! Every protocol reduces to participants that train locally and exchange one
//! flat parameter vector per round: adapters for the homogeneous,
//! heterogeneous and co-tuning protocols, boundary blocks for offsite-tuning.

mod co;
mod hetero;
mod local;
mod ost;

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fed::{
    add_dp_noise, fedavg, secure_aggregate, secure_mask, weighted_field_vector, CommLedger, Payload, RoundMessage,
    SecAggConfig, SecAggSession, SimNetwork, SERVER_ID,
};
use crate::optim::OptimizerConfig;
use crate::peft::{AdapterSet, Layout};

pub use co::{run_fedcollm, CoRun};
pub use hetero::{distill, run_fedheterollm, HeteroClient, HeteroRun};
pub use local::{local_finetune, pretrain, train_model, BatchLoss, ClientState, LocalUpdate, Participant};
pub use ost::{build_emulator, run_fedost, Emulator, OstClient, OstRun};

/// A tokenized training sequence.
pub type Sequence = Vec<u32>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Homo,
    Hetero,
    Co,
    Ost,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Plain,
    Secure,
}

/// Distillation settings: `λ·CE + (1−λ)·T²·KL`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KdConfig {
    pub lambda: f64,
    pub temperature: f64,
    /// Passes over the distillation data; 0 disables distillation.
    pub epochs: usize,
    /// Learning rate for distillation steps; the plan's rate when absent.
    pub lr: Option<f64>,
}

impl Default for KdConfig {
    fn default() -> Self {
        Self { lambda: 0.5, temperature: 2.0, epochs: 1, lr: None }
    }
}

/// Layer split for offsite-tuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct OstConfig {
    pub keep_bottom: usize,
    pub keep_top: usize,
    /// Keep every n-th middle block in the emulator; 1 keeps them all.
    pub keep_every: usize,
}

impl Default for OstConfig {
    fn default() -> Self {
        Self { keep_bottom: 1, keep_top: 1, keep_every: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerPlan {
    pub protocol: Protocol,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub aggregation: Aggregation,
    pub secagg: SecAggConfig,
    pub dp_sigma: f64,
    pub seed: u64,
    pub kd: KdConfig,
    pub ost: OstConfig,
}

impl Default for TrainerPlan {
    fn default() -> Self {
        Self {
            protocol: Protocol::Homo,
            rounds: 5,
            local_epochs: 1,
            batch_size: 16,
            optimizer: OptimizerConfig::default(),
            aggregation: Aggregation::Plain,
            secagg: SecAggConfig::default(),
            dp_sigma: 0.0,
            seed: 0,
            kd: KdConfig::default(),
            ost: OstConfig::default(),
        }
    }
}

impl TrainerPlan {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 || self.local_epochs == 0 {
            return Err(Error::Config("rounds and local_epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.optimizer.lr >= 0.0) {
            return Err(Error::Config(format!("learning rate must be non-negative, got {}", self.optimizer.lr)));
        }
        if !(0.0..=1.0).contains(&self.kd.lambda) || !(self.kd.temperature > 0.0) {
            return Err(Error::Config("KD needs lambda in [0, 1] and a positive temperature".into()));
        }
        Ok(())
    }

    pub(crate) fn kd_lr(&self) -> f64 {
        self.kd.lr.unwrap_or(self.optimizer.lr)
    }
}

/// One history line: `{round, client?, metric, value}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub round: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub client: Option<u32>,
    pub metric: String,
    pub value: f64,
}

impl HistoryEntry {
    pub fn new(round: u32, client: Option<u32>, metric: &str, value: f64) -> Self {
        Self { round, client, metric: metric.into(), value }
    }
}

pub fn history_jsonl(history: &[HistoryEntry]) -> String {
    history.iter().map(|h| serde_json::to_string(h).expect("plain struct") + "\n").collect()
}

/// Outcome of a federated run over flat parameter vectors.
#[derive(Debug, Clone)]
pub struct FedRun {
    pub global: Vec<f32>,
    pub layout: Layout,
    pub history: Vec<HistoryEntry>,
    pub ledger: CommLedger,
    /// Every tensor name serialized toward any client.
    pub names_to_clients: BTreeSet<String>,
}

/// Result of the homogeneous protocol.
#[derive(Debug, Clone)]
pub struct HomoRun {
    pub global: AdapterSet,
    pub run: FedRun,
}

/// Stable seed derivation: first 8 bytes of SHA-256 over the little-endian parts.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    for p in parts {
        h.update(p.to_le_bytes());
    }
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

/// Hooks a protocol can attach to the shared round loop.
pub(crate) trait RoundHooks {
    /// Runs on the server between aggregation and broadcast.
    fn after_aggregate(&mut self, _round: u32, _global: &mut Vec<f32>, _history: &mut Vec<HistoryEntry>) -> Result<()> {
        Ok(())
    }

    /// Runs after clients hold the new global values.
    fn evaluate(&mut self, _round: u32, _global: &[f32], _history: &mut Vec<HistoryEntry>) -> Result<()> {
        Ok(())
    }
}

fn check_ids<P: Participant>(parts: &[P]) -> Result<()> {
    if parts.is_empty() {
        return Err(Error::Protocol("federation needs at least one client".into()));
    }
    if parts.windows(2).any(|w| w[0].id() >= w[1].id()) {
        return Err(Error::Protocol("client ids must be unique and in ascending order".into()));
    }
    if parts.iter().any(|p| p.id() == SERVER_ID) {
        return Err(Error::Protocol(format!("client id {SERVER_ID} is reserved for the server")));
    }
    Ok(())
}

/// Server → every client; returns the values each client decoded.
fn broadcast<P: Participant>(
    net: &mut SimNetwork,
    parts: &mut [P],
    round: u32,
    values: &[f32],
    layout: &Layout,
    weight: u64,
) -> Result<()> {
    let msg = RoundMessage::plain(round, SERVER_ID, values.to_vec(), layout.clone(), weight.max(1));
    for p in parts.iter_mut() {
        let got = net.downlink(p.id(), &msg)?;
        let Payload::Plain(v) = got.payload else {
            return Err(Error::Protocol("broadcast must be a plain payload".into()));
        };
        p.load(&v)?;
    }
    Ok(())
}

/// Uploads every update (ascending id) and aggregates what arrived.
fn aggregate(
    net: &mut SimNetwork,
    plan: &TrainerPlan,
    round: u32,
    ids: &[u32],
    updates: &[LocalUpdate],
) -> Result<(Vec<f32>, u64)> {
    let total: u64 = updates.iter().map(|u| u.sample_count).sum();
    match plan.aggregation {
        Aggregation::Plain => {
            let mut received = Vec::with_capacity(updates.len());
            for (&id, u) in ids.iter().zip(updates) {
                let values = add_dp_noise(&u.values, plan.dp_sigma, derive_seed(plan.seed, &[1, round as u64, id as u64]))?;
                let msg = RoundMessage::plain(round, id, values, u.layout.clone(), u.sample_count);
                let got = net.uplink(&msg)?;
                let Payload::Plain(v) = got.payload else {
                    return Err(Error::Protocol(format!("client {id} sent a masked payload in plain mode")));
                };
                received.push((v, got.sample_count));
            }
            Ok((fedavg(&received)?, total))
        }
        Aggregation::Secure => {
            let session = SecAggSession::new(ids, derive_seed(plan.seed, &[2, round as u64]), plan.secagg)?;
            let mut received = Vec::with_capacity(updates.len());
            for (&id, u) in ids.iter().zip(updates) {
                let values = add_dp_noise(&u.values, plan.dp_sigma, derive_seed(plan.seed, &[1, round as u64, id as u64]))?;
                let q = weighted_field_vector(&session, &values, u.sample_count)?;
                let masked = secure_mask(&session, id, &q)?;
                let got = net.uplink(&RoundMessage::masked(round, id, masked, u.layout.clone()))?;
                let Payload::Masked(v) = got.payload else {
                    return Err(Error::Protocol(format!("client {id} sent a plain payload in secure mode")));
                };
                received.push((got.sender, v));
            }
            Ok((secure_aggregate(&session, &received)?, total))
        }
    }
}

/// The shared round loop: broadcast the initial values, then per round train
/// every client (in parallel), aggregate in ascending id order and broadcast.
pub(crate) fn federate<P: Participant>(
    parts: &mut [P],
    plan: &TrainerPlan,
    initial: (Vec<f32>, Layout),
    net: &mut SimNetwork,
    hooks: &mut dyn RoundHooks,
) -> Result<(Vec<f32>, Vec<HistoryEntry>)> {
    plan.validate()?;
    check_ids(parts)?;
    let (mut global, layout) = initial;
    let ids: Vec<u32> = parts.iter().map(Participant::id).collect();
    let mut history = Vec::new();
    broadcast(net, parts, 0, &global, &layout, 1)?;
    for round in 1..=plan.rounds as u32 {
        let updates: Vec<LocalUpdate> =
            parts.par_iter_mut().map(|p| p.train(plan.local_epochs)).collect::<Result<_>>()?;
        for (&id, u) in ids.iter().zip(&updates) {
            if u.layout != layout {
                return Err(Error::Protocol(format!("client {id} sent a different parameter layout")));
            }
            if let Some(&loss) = u.epoch_losses.last() {
                history.push(HistoryEntry::new(round, Some(id), "train_loss", loss));
            }
        }
        let (agg, total) = aggregate(net, plan, round, &ids, &updates)?;
        global = agg;
        hooks.after_aggregate(round, &mut global, &mut history)?;
        broadcast(net, parts, round, &global, &layout, total)?;
        hooks.evaluate(round, &global, &mut history)?;
    }
    Ok((global, history))
}

fn check_homogeneous(clients: &[ClientState]) -> Result<()> {
    let Some(first) = clients.first() else {
        return Err(Error::Protocol("federation needs at least one client".into()));
    };
    for c in clients {
        if c.base.config() != first.base.config() {
            return Err(Error::Protocol(format!("client {} has a different model config", c.id)));
        }
        if c.adapters.spec() != first.adapters.spec() || c.adapters.model_config() != first.adapters.model_config() {
            return Err(Error::Protocol(format!("client {} has a different adapter spec", c.id)));
        }
    }
    Ok(())
}

struct EvalHook<'a> {
    base: std::sync::Arc<crate::model::MiniLM>,
    template: AdapterSet,
    eval: Option<&'a [Sequence]>,
}

impl RoundHooks for EvalHook<'_> {
    fn evaluate(&mut self, round: u32, global: &[f32], history: &mut Vec<HistoryEntry>) -> Result<()> {
        if let Some(data) = self.eval {
            self.template.unflatten(global)?;
            let (nll, n) = crate::metrics::token_nll(&self.base, Some(&self.template), data)?;
            history.push(HistoryEntry::new(round, None, "eval_loss", nll / n.max(1) as f64));
        }
        Ok(())
    }
}

/// FedHomoLLM: clients with one shared architecture average their adapters.
/// The server's initial adapters are those of the first client.
pub fn run_fedhomollm(clients: &mut [ClientState], plan: &TrainerPlan, eval: Option<&[Sequence]>) -> Result<HomoRun> {
    check_homogeneous(clients)?;
    let template = clients[0].adapters.clone();
    let mut hooks = EvalHook { base: clients[0].base.clone(), template: template.clone(), eval };
    run_homo_with(clients, plan, &mut hooks)
}

pub(crate) fn run_homo_with(clients: &mut [ClientState], plan: &TrainerPlan, hooks: &mut dyn RoundHooks) -> Result<HomoRun> {
    check_homogeneous(clients)?;
    let mut global = clients[0].adapters.clone();
    let initial = global.flatten();
    let mut net = SimNetwork::new();
    let (values, history) = federate(clients, plan, initial, &mut net, hooks)?;
    global.unflatten(&values)?;
    let layout = global.layout();
    let names_to_clients = net.names_sent_to_clients().clone();
    Ok(HomoRun {
        global,
        run: FedRun { global: values, layout, history, ledger: net.into_ledger(), names_to_clients },
    })
}
