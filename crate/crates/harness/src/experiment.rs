//! Runs one configured experiment: the federated arm plus baselines,
//! evaluation, and every artifact on disk.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use fedllm_core::checkpoint::{save_adapters, save_model};
use fedllm_core::fed::{CommLedger, CommRow};
use fedllm_core::fedipr::{check_capacity, verify, VerificationReport, WatermarkKey};
use fedllm_core::metrics::{evaluate, EvalReport};
use fedllm_core::peft::{attach, count_trainable_bytes, TuneMode};
use fedllm_core::trainers::{
    derive_seed, history_jsonl, local_finetune, pretrain, run_fedcollm, run_fedheterollm, run_fedhomollm, run_fedost,
    ClientState, HeteroClient, HistoryEntry, OstClient, Protocol, Sequence, TrainerPlan,
};
use fedllm_core::{AdapterSet, AdapterSpec, MiniLM, ModelConfig};

use crate::config::{ExperimentConfig, PretrainSpec};
use crate::corpus::{generate_corpus, tokenize, Corpus};
use crate::error::{Context, HarnessError, Result};
use crate::manifest::{RunManifest, MANIFEST_FILE};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const HISTORY_FILE: &str = "history.jsonl";
pub const LEDGER_FILE: &str = "ledger.jsonl";
pub const COMM_FILE: &str = "comm.json";
pub const WATERMARK_FILE: &str = "watermark.json";
pub const CONFIG_FILE: &str = "config.json";

/// Evaluation of one column of the results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub arm: String,
    #[serde(flatten)]
    pub report: EvalReport,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub dir: PathBuf,
    pub manifest: RunManifest,
    pub arms: Vec<ArmReport>,
    pub comm: Vec<CommRow>,
    pub history: Vec<HistoryEntry>,
    pub ledger: CommLedger,
    pub watermarks: Vec<VerificationReport>,
    /// Every tensor name the federated arm serialized toward a client.
    pub names_to_clients: Vec<String>,
}

impl ExperimentOutcome {
    pub fn arm(&self, name: &str) -> Option<&EvalReport> {
        self.arms.iter().find(|a| a.arm == name).map(|a| &a.report)
    }
}

/// What an arm evaluates: adapters on a shared base, or a standalone model.
enum Evaluated<'a> {
    Adapters(&'a MiniLM, &'a AdapterSet),
    Model(&'a MiniLM),
    /// One base per client sharing the same adapters; scores are averaged.
    Mentees(&'a [Arc<MiniLM>], &'a AdapterSet),
}

struct Eval {
    pairs: Vec<(Vec<u8>, Vec<u8>)>,
    held_out: Vec<Sequence>,
    max_new: usize,
}

impl Eval {
    fn run(&self, what: Evaluated<'_>) -> Result<EvalReport> {
        let one = |m: &MiniLM, a: Option<&AdapterSet>| evaluate(m, a, &self.pairs, &self.held_out, self.max_new);
        Ok(match what {
            Evaluated::Adapters(m, a) => one(m, Some(a))?,
            Evaluated::Model(m) => one(m, None)?,
            Evaluated::Mentees(ms, a) => {
                let reports = ms.iter().map(|m| one(m, Some(a))).collect::<fedllm_core::Result<Vec<_>>>()?;
                mean_report(&reports)
            }
        })
    }
}

fn mean_report(rs: &[EvalReport]) -> EvalReport {
    let n = rs.len().max(1) as f64;
    let avg = |f: fn(&EvalReport) -> f64| rs.iter().map(f).sum::<f64>() / n;
    EvalReport {
        rouge1: avg(|r| r.rouge1),
        rouge2: avg(|r| r.rouge2),
        rouge_l: avg(|r| r.rouge_l),
        bleu4: avg(|r| r.bleu4),
        perplexity: avg(|r| r.perplexity),
        samples: rs.first().map_or(0, |r| r.samples),
    }
}

/// Fresh model from `cfg`, trained on the public corpus.
pub fn pretrained(cfg: ModelConfig, public: &[Sequence], spec: &PretrainSpec, seed: u64) -> Result<MiniLM> {
    let mut m = MiniLM::new(cfg)?;
    if spec.epochs > 0 && !public.is_empty() {
        pretrain(&mut m, public, spec.epochs, spec.batch_size, &spec.optimizer, seed)?;
    }
    Ok(m)
}

fn adapter_label(spec: &AdapterSpec) -> &'static str {
    match spec {
        AdapterSpec::Lora(_) => "LoRA",
        AdapterSpec::Prefix(_) => "Prefix",
    }
}

struct Writer {
    dir: PathBuf,
    manifest: RunManifest,
}

impl Writer {
    fn write(&mut self, name: &str, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| HarnessError::io(parent, e))?;
        }
        std::fs::write(&path, bytes).map_err(|e| HarnessError::io(&path, e))?;
        self.manifest.artifacts.insert(name.into(), rel.into());
        Ok(())
    }

    fn path_for(&mut self, name: &str, rel: &str) -> Result<PathBuf> {
        let path = self.dir.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| HarnessError::io(parent, e))?;
        }
        self.manifest.artifacts.insert(name.into(), rel.into());
        Ok(path)
    }
}

fn baseline_epochs(plan: &TrainerPlan) -> usize {
    plan.rounds * plan.local_epochs
}

/// Adapter tuning of `base` on one shard, as a non-federated baseline.
fn adapter_baseline(base: &Arc<MiniLM>, adapters: &AdapterSet, shard: Vec<Sequence>, plan: &TrainerPlan) -> Result<AdapterSet> {
    let mut c = ClientState::new(0, base.clone(), adapters.clone(), shard, plan);
    local_finetune(&mut c, baseline_epochs(plan))?;
    Ok(c.adapters)
}

fn client_states(
    base: &Arc<MiniLM>,
    adapters: &AdapterSet,
    shards: &[Vec<Sequence>],
    plan: &TrainerPlan,
    keys: &[WatermarkKey],
) -> Result<Vec<ClientState>> {
    shards
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let c = ClientState::new(i as u32, base.clone(), adapters.clone(), s.clone(), plan);
            match keys.get(i) {
                Some(k) => Ok(c.with_watermark(k.clone())?),
                None => Ok(c),
            }
        })
        .collect()
}

/// Executes the configured protocol and baselines and writes every artifact
/// into the output directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let dir = cfg.output_dir();
    std::fs::create_dir_all(&dir).map_err(|e| HarnessError::io(&dir, e))?;
    let mut out = Writer { dir: dir.clone(), manifest: RunManifest::new(cfg) };
    out.write("config", CONFIG_FILE, &cfg.canonical_bytes())?;

    let corpus: Corpus = generate_corpus(&cfg.dataset)?;
    let shards: Vec<Vec<Sequence>> = corpus.clients.iter().map(|c| tokenize(c)).collect();
    let union: Vec<Sequence> = shards.concat();
    let public = tokenize(&corpus.public);
    let eval = Eval {
        pairs: corpus
            .test
            .iter()
            .take(cfg.eval.generation_samples)
            .map(|s| (s.prompt.clone().into_bytes(), s.completion.clone().into_bytes()))
            .collect(),
        held_out: tokenize(&corpus.test),
        max_new: cfg.eval.max_new_tokens,
    };
    let plan = &cfg.plan;
    let pre_seed = derive_seed(plan.seed, &[6]);
    let base = Arc::new(pretrained(cfg.model, &public, &cfg.pretrain, pre_seed).context(|| "pretraining the base model".into())?);
    save_model(&base, out.path_for("base_model", "checkpoints/base.fllm")?)?;
    let adapters0 = attach(&base, &cfg.adapter, plan.seed)?;

    let keys: Vec<WatermarkKey> = match (&cfg.watermark, cfg.federated) {
        (Some(w), true) => {
            let keys = (0..cfg.dataset.num_clients as u32)
                .map(|id| WatermarkKey::generate(id, derive_seed(plan.seed, &[7, id as u64]), w.n_bits, w.gamma))
                .collect::<fedllm_core::Result<Vec<_>>>()?;
            check_capacity(&keys, adapters0.num_params())?;
            keys
        }
        _ => Vec::new(),
    };
    if !keys.is_empty() && matches!(plan.protocol, Protocol::Hetero | Protocol::Ost) {
        return Err(HarnessError::Config("watermarks need an adapter protocol run by the harness: homo or co".into()));
    }

    let mut arms = Vec::new();
    let mut history = Vec::new();
    let mut ledger = CommLedger::new();
    let mut names_to_clients = Vec::new();
    let full_client = count_trainable_bytes(&base, None, TuneMode::Full);
    let adapter_bytes = count_trainable_bytes(&base, Some(&adapters0), TuneMode::AdapterOnly);
    let mut comm = vec![CommRow::new("Full fine-tune", full_client as f64, full_client as f64)];
    let mut global_adapters: Option<AdapterSet> = None;

    let server = match plan.protocol {
        Protocol::Co | Protocol::Ost => Some(
            pretrained(cfg.server_model, &public, &cfg.pretrain, derive_seed(pre_seed, &[1]))
                .context(|| "pretraining the server model".into())?,
        ),
        _ => None,
    };

    if cfg.federated {
        let ctx = || format!("federated {:?} run", plan.protocol);
        match plan.protocol {
            Protocol::Homo => {
                let mut clients = client_states(&base, &adapters0, &shards, plan, &keys)?;
                let run = run_fedhomollm(&mut clients, plan, Some(&eval.held_out)).context(ctx)?;
                arms.push(("federated".into(), eval.run(Evaluated::Adapters(&base, &run.global))?));
                comm.push(CommRow::from_ledger(adapter_label(&cfg.adapter), adapter_bytes, full_client, &run.run.ledger));
                history = run.run.history;
                ledger = run.run.ledger;
                names_to_clients = run.run.names_to_clients.into_iter().collect();
                global_adapters = Some(run.global);
            }
            Protocol::Co => {
                let server = server.clone().expect("built above");
                let mut clients = client_states(&base, &adapters0, &shards, plan, &keys)?;
                let proxy = tokenize(&corpus.proxy);
                let run = run_fedcollm(server, &mut clients, &proxy, plan, Some(&eval.held_out)).context(ctx)?;
                arms.push(("federated".into(), eval.run(Evaluated::Adapters(&base, &run.homo.global))?));
                arms.push(("server".into(), eval.run(Evaluated::Model(&run.server))?));
                save_model(&run.server, out.path_for("server_model", "checkpoints/server.fllm")?)?;
                comm.push(CommRow::from_ledger(adapter_label(&cfg.adapter), adapter_bytes, full_client, &run.homo.run.ledger));
                history = run.homo.run.history;
                ledger = run.homo.run.ledger;
                names_to_clients = run.homo.run.names_to_clients.into_iter().collect();
                global_adapters = Some(run.homo.global);
            }
            Protocol::Hetero => {
                let mut teachers = Vec::new();
                for (i, (tcfg, shard)) in cfg.hetero.teachers.iter().zip(&shards).enumerate() {
                    let mut t = pretrained(*tcfg, &public, &cfg.pretrain, derive_seed(pre_seed, &[2, i as u64]))?;
                    if cfg.hetero.teacher_epochs > 0 {
                        pretrain(&mut t, shard, cfg.hetero.teacher_epochs, plan.batch_size, &plan.optimizer, plan.seed)?;
                    }
                    teachers.push(HeteroClient { id: i as u32, teacher: Arc::new(t), mentee: cfg.model, shard: shard.clone() });
                }
                let run = run_fedheterollm(&teachers, &cfg.adapter, plan, Some(&eval.held_out)).context(ctx)?;
                arms.push(("federated".into(), eval.run(Evaluated::Mentees(&run.mentees, &run.homo.global))?));
                comm.push(CommRow::from_ledger(adapter_label(&cfg.adapter), adapter_bytes, full_client, &run.homo.run.ledger));
                history = run.distill_history;
                history.extend(run.homo.run.history);
                ledger = run.homo.run.ledger;
                names_to_clients = run.homo.run.names_to_clients.into_iter().collect();
                global_adapters = Some(run.homo.global);
            }
            Protocol::Ost => {
                let server = server.as_ref().expect("built above");
                let clients: Vec<OstClient> =
                    shards.iter().enumerate().map(|(i, s)| OstClient { id: i as u32, shard: s.clone() }).collect();
                let run = run_fedost(server, &clients, plan, Some(&eval.held_out)).context(ctx)?;
                arms.push(("federated".into(), eval.run(Evaluated::Model(&run.plugged))?));
                arms.push(("server-original".into(), eval.run(Evaluated::Model(server))?));
                save_model(&run.plugged, out.path_for("server_model", "checkpoints/server.fllm")?)?;
                let full_server = count_trainable_bytes(server, None, TuneMode::Full);
                let adaptor_bytes = 4 * run.run.layout.total_len() as u64;
                comm[0] = CommRow::new("Full fine-tune", full_server as f64, full_server as f64);
                comm.push(CommRow::from_ledger("Offsite adaptors", adaptor_bytes, full_server, &run.run.ledger));
                history = run.run.history;
                ledger = run.run.ledger;
                names_to_clients = run.run.names_to_clients.into_iter().collect();
            }
        }
    }

    match (plan.protocol, &server) {
        (Protocol::Ost, Some(server)) => {
            let single = |shard: Vec<Sequence>| -> Result<MiniLM> {
                Ok(run_fedost(server, &[OstClient { id: 0, shard }], plan, None)?.plugged)
            };
            if cfg.baselines.centralized {
                let m = single(union.clone()).context(|| "centralized baseline".into())?;
                arms.push(("centralized".into(), eval.run(Evaluated::Model(&m))?));
            }
            if cfg.baselines.local_only {
                for (i, s) in shards.iter().enumerate() {
                    let m = single(s.clone()).context(|| format!("local-only baseline for client {}", i + 1))?;
                    arms.push((format!("client-{}", i + 1), eval.run(Evaluated::Model(&m))?));
                }
            }
        }
        _ => {
            if cfg.baselines.centralized {
                let a = adapter_baseline(&base, &adapters0, union.clone(), plan).context(|| "centralized baseline".into())?;
                arms.push(("centralized".into(), eval.run(Evaluated::Adapters(&base, &a))?));
            }
            if cfg.baselines.local_only {
                for (i, s) in shards.iter().enumerate() {
                    let a = adapter_baseline(&base, &adapters0, s.clone(), plan)
                        .context(|| format!("local-only baseline for client {}", i + 1))?;
                    arms.push((format!("client-{}", i + 1), eval.run(Evaluated::Adapters(&base, &a))?));
                }
            }
        }
    }

    let mut watermarks = Vec::new();
    if let (Some(w), Some(global)) = (&cfg.watermark, &global_adapters) {
        for k in &keys {
            out.write(&format!("key_client_{}", k.client_id), &format!("keys/client-{}.json", k.client_id), k.to_json()?.as_bytes())?;
            watermarks.push(verify(global, k, w.threshold)?);
        }
        let json = serde_json::to_string_pretty(&watermarks).expect("plain data") + "\n";
        out.write("watermark", WATERMARK_FILE, json.as_bytes())?;
    }
    if let Some(global) = &global_adapters {
        save_adapters(global, out.path_for("global_adapters", "checkpoints/global.flad")?)?;
    }

    let arms: Vec<ArmReport> = arms.into_iter().map(|(arm, report)| ArmReport { arm, report }).collect();
    let metrics: String = arms.iter().map(|a| serde_json::to_string(a).expect("plain data") + "\n").collect();
    out.write("metrics", METRICS_FILE, metrics.as_bytes())?;
    out.write("history", HISTORY_FILE, history_jsonl(&history).as_bytes())?;
    out.write("ledger", LEDGER_FILE, ledger.to_jsonl().as_bytes())?;
    out.write("comm", COMM_FILE, (serde_json::to_string_pretty(&comm).expect("plain data") + "\n").as_bytes())?;
    let manifest = out.manifest.clone();
    let manifest_path = dir.join(MANIFEST_FILE);
    std::fs::write(&manifest_path, manifest.to_json()).map_err(|e| HarnessError::io(&manifest_path, e))?;

    Ok(ExperimentOutcome { dir, manifest, arms, comm, history, ledger, watermarks, names_to_clients })
}

/// Reads `metrics.jsonl` from a run directory.
pub fn read_metrics(dir: &Path) -> Result<Vec<ArmReport>> {
    let path = dir.join(METRICS_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| HarnessError::io(&path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| HarnessError::json(path.display().to_string(), e)))
        .collect()
}
