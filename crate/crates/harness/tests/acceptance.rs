//! Acceptance suite: one test per criterion, each printing a single
//! `[PASS]`/`[FAIL]` line to the real stderr before asserting.
//!
//! Tests hold a shared lock so their wall-clock times are measured one at a
//! time and can be compared against each criterion's budget.

mod common;

use std::io::Write;
use std::path::Path;
use std::sync::{Mutex, MutexGuard};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fedllm_core::checkpoint::{load_adapters, load_model};
use fedllm_core::fed::{fedavg, secure_aggregate, secure_mask, weighted_field_vector, CommRow, SecAggConfig, SecAggSession, MODULUS};
use fedllm_core::fedipr::{verify, WatermarkKey};
use fedllm_core::gradcheck::{adapter_errors, jittered_model, minilm_step_error, op_suite};
use fedllm_core::metrics::{bleu_4, rouge_l, rouge_n, words};
use fedllm_core::peft::{attach_lora, attach_prefix, count_trainable_bytes, TuneMode};
use fedllm_core::trainers::{local_finetune, pretrain, run_fedhomollm, ClientState, Protocol, Sequence, TrainerPlan};
use fedllm_core::{LoraSpec, MiniLM, ModelConfig, PrefixSpec, Target};
use fedllm_harness::config::{Baselines, EvalSpec, WatermarkSpec};
use fedllm_harness::corpus::{generate_corpus, tokenize, DatasetSpec, Split};
use fedllm_harness::experiment::{ExperimentOutcome, HISTORY_FILE, LEDGER_FILE, METRICS_FILE};
use fedllm_harness::report::paper_rows;
use fedllm_harness::{run_experiment, ExperimentConfig};

static SERIAL: Mutex<()> = Mutex::new(());

struct Criterion {
    n: u32,
    name: &'static str,
    budget: Duration,
    start: Instant,
    _guard: MutexGuard<'static, ()>,
}

impl Criterion {
    fn start(n: u32, name: &'static str, budget_secs: u64) -> Self {
        let guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
        Self { n, name, budget: Duration::from_secs(budget_secs), start: Instant::now(), _guard: guard }
    }

    /// Prints the verdict line, then fails the test unless `ok` held within budget.
    fn finish(self, ok: bool, detail: String) {
        let took = self.start.elapsed();
        let in_budget = took <= self.budget;
        let pass = ok && in_budget;
        let line = format!(
            "[{}] {}. {} ({:.1} s of {} s budget) {}\n",
            if pass { "PASS" } else { "FAIL" },
            self.n,
            self.name,
            took.as_secs_f64(),
            self.budget.as_secs(),
            detail
        );
        let _ = std::io::stderr().write_all(line.as_bytes());
        assert!(ok, "criterion {} failed: {detail}", self.n);
        assert!(in_budget, "criterion {} took {took:?}, budget {:?}", self.n, self.budget);
    }
}

fn run(cfg: &ExperimentConfig) -> ExperimentOutcome {
    run_experiment(cfg).unwrap_or_else(|e| panic!("{} failed: {e}", cfg.name))
}

fn ppl(o: &ExperimentOutcome, arm: &str) -> f64 {
    o.arm(arm).unwrap_or_else(|| panic!("no {arm} arm")).perplexity
}

#[test]
fn c01_communication_cost_arithmetic() {
    let c = Criterion::start(1, "communication-cost arithmetic", 1);
    let rows = paper_rows();
    let got: Vec<String> = rows.iter().map(CommRow::percent_str).collect();
    let ok = got == ["100.000", "0.058", "0.475"] && rows[1].percent == 0.058 && rows[2].percent == 0.475;
    c.finish(ok, format!("LoRA {} %, P-Tuning-v2 {} %", got[1], got[2]));
}

#[test]
fn c02_desk_communication_ordering() {
    let c = Criterion::start(2, "desk communication ordering", 5);
    let cfg = ModelConfig::default();
    let model: MiniLM = MiniLM::new(cfg).unwrap();
    let lora_spec = LoraSpec { rank: 8, ..LoraSpec::default() };
    let lora = attach_lora(&model, &lora_spec, 0).unwrap();
    let prefix = attach_prefix(&model, &PrefixSpec { len: 16, reparam_hidden: None }, 0).unwrap();
    let full = count_trainable_bytes(&model, None, TuneMode::Full);
    let lora_b = count_trainable_bytes(&model, Some(&lora), TuneMode::AdapterOnly);
    let prefix_b = count_trainable_bytes(&model, Some(&prefix), TuneMode::AdapterOnly);

    // shape sums: every target of a layer is d×d, so A is r×d and B is d×r
    let (d, l, v, s, ff) = (cfg.d_model, cfg.n_layers, cfg.vocab_size, cfg.max_seq_len, cfg.d_ff);
    let full_oracle = 4 * (v * d + s * d + l * (4 * d + 4 * d * d + 2 * d * ff) + 2 * d) as u64;
    let lora_oracle = 4 * (l * lora_spec.targets.len() * 2 * 8 * d) as u64;
    let prefix_oracle = 4 * (l * 2 * 16 * d) as u64;
    let row = |b: u64| CommRow::new("", b as f64, full as f64);
    let pct_ok = row(lora_b).fraction == lora_oracle as f64 / full_oracle as f64
        && row(prefix_b).fraction == prefix_oracle as f64 / full_oracle as f64;
    let sizes_ok = (full, lora_b, prefix_b) == (full_oracle, lora_oracle, prefix_oracle);
    let ordered = lora_b < prefix_b && prefix_b < full;
    c.finish(
        ordered && pct_ok && sizes_ok,
        format!(
            "LoRA {lora_b} B ({} %), prefix {prefix_b} B ({} %), full {full} B; strict order {}",
            row(lora_b).percent_str(),
            row(prefix_b).percent_str(),
            if ordered { "holds" } else { "violated" }
        ),
    );
}

fn ordering_config(seed: u64, dir: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        name: format!("ordering-{seed}"),
        dataset: DatasetSpec { samples: 600, split: Split::DisjointTopic, test_per_client: 50, ..DatasetSpec::default() },
        eval: EvalSpec { generation_samples: 4, max_new_tokens: 40 },
        baselines: Baselines { centralized: true, local_only: true },
        ..ExperimentConfig::default()
    }
    .with_seed(seed);
    cfg.plan.rounds = 5;
    cfg.output_dir = Some(dir.join(&cfg.name));
    cfg
}

#[test]
fn c03_federated_beats_local_and_trails_centralized() {
    let c = Criterion::start(3, "federated vs local-only vs centralized ordering", 300);
    let dir = tempfile::tempdir().unwrap();
    let (mut fed, mut cen, mut locals) = (0.0, 0.0, [0.0f64; 2]);
    let seeds = [1u64, 2, 3];
    for &seed in &seeds {
        let o = run(&ordering_config(seed, dir.path()));
        fed += ppl(&o, "federated");
        cen += ppl(&o, "centralized");
        locals[0] += ppl(&o, "client-1");
        locals[1] += ppl(&o, "client-2");
    }
    let k = seeds.len() as f64;
    let (fed, cen) = (fed / k, cen / k);
    let locals = locals.map(|x| x / k);
    let ok = locals.iter().all(|&l| fed <= l) && cen <= fed * 1.10;
    c.finish(
        ok,
        format!(
            "mean perplexity: federated {fed:.3}, centralized {cen:.3}, client-1 {:.3}, client-2 {:.3}",
            locals[0], locals[1]
        ),
    );
}

#[test]
fn c04_secure_aggregation_exactness() {
    let c = Criterion::start(4, "secure aggregation exactness", 30);
    let cfg = SecAggConfig::default();
    let (mut trials, mut failures, mut worst_excess) = (0u32, 0u32, f64::NEG_INFINITY);
    for n in 2..=8usize {
        for t in 0..1000u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(n as u64 * 1_000_003 + t);
            let len = rng.random_range(1..33);
            let mut ids: Vec<u32> = Vec::new();
            while ids.len() < n {
                let id = rng.random_range(0..1000);
                if !ids.contains(&id) {
                    ids.push(id);
                }
            }
            ids.sort_unstable();
            let updates: Vec<(Vec<f32>, u64)> = (0..n)
                .map(|_| ((0..len).map(|_| rng.random_range(-2.0f32..2.0)).collect(), rng.random_range(1..500)))
                .collect();
            let session = SecAggSession::new(&ids, rng.random(), cfg).unwrap();
            let mut plain_sum: Vec<u64> = Vec::new();
            let mut masked_sum: Vec<u64> = Vec::new();
            let mut masked = Vec::new();
            for (&id, (v, w)) in ids.iter().zip(&updates) {
                let q = weighted_field_vector(&session, v, *w).unwrap();
                let m = secure_mask(&session, id, &q).unwrap();
                plain_sum.resize(q.len(), 0);
                masked_sum.resize(q.len(), 0);
                for i in 0..q.len() {
                    plain_sum[i] = (plain_sum[i] + q[i]) % MODULUS;
                    masked_sum[i] = (masked_sum[i] + m[i]) % MODULUS;
                }
                masked.push((id, m));
            }
            let secure = secure_aggregate(&session, &masked).unwrap();
            let avg = fedavg(&updates).unwrap();
            let total: u64 = updates.iter().map(|u| u.1).sum();
            let bound = n as f64 * 0.5 / (cfg.scale * total as f64) + 4.0 * f32::EPSILON as f64;
            let excess = secure.iter().zip(&avg).map(|(a, b)| (a - b).abs() as f64 - bound).fold(f64::NEG_INFINITY, f64::max);
            worst_excess = worst_excess.max(excess);
            if plain_sum != masked_sum || excess > 0.0 {
                failures += 1;
            }
            trials += 1;
        }
    }
    c.finish(failures == 0, format!("{trials} trials over 2..=8 clients, {failures} failures, worst margin {:.2e}", -worst_excess));
}

#[test]
fn c05_gradient_correctness() {
    let c = Criterion::start(5, "gradient correctness", 60);
    let mut checks = op_suite(20).unwrap();
    let model = jittered_model(1).unwrap();
    checks.push(fedllm_core::gradcheck::GradCheck { name: "minilm step".into(), max_rel_err: minilm_step_error::<f64>(&model).unwrap() });
    checks.extend(adapter_errors(&jittered_model(2).unwrap()).unwrap());
    let worst = checks.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err)).unwrap();
    let failed: Vec<&str> = checks.iter().filter(|r| r.max_rel_err.is_nan() || r.max_rel_err >= 1e-3).map(|r| r.name.as_str()).collect();
    c.finish(
        failed.is_empty(),
        format!("{} checks, worst {} at {:.2e}, failing {failed:?}", checks.len(), worst.name, worst.max_rel_err),
    );
}

#[test]
fn c06_fedavg_identity() {
    let c = Criterion::start(6, "FedAvg identity", 60);
    let dir = tempfile::tempdir().unwrap();

    // one client federated vs the same client trained standalone
    let mut cfg = common::tiny(dir.path());
    let corpus = generate_corpus(&cfg.dataset).unwrap();
    let shard: Vec<Sequence> = tokenize(&corpus.clients[0]);
    let mut base = MiniLM::new(cfg.model).unwrap();
    pretrain(&mut base, &tokenize(&corpus.public), 1, 16, &common::sgd(0.05), 1).unwrap();
    let base = std::sync::Arc::new(base);
    let adapters = attach_lora(&base, &LoraSpec { targets: Target::ALL.to_vec(), ..LoraSpec::default() }, 3).unwrap();
    let plan = TrainerPlan { rounds: 3, local_epochs: 2, batch_size: 8, optimizer: common::sgd(0.1), seed: 5, ..TrainerPlan::default() };
    let mut fed = vec![ClientState::new(0, base.clone(), adapters.clone(), shard.clone(), &plan)];
    let global = run_fedhomollm(&mut fed, &plan, None).unwrap().global;
    let mut solo = ClientState::new(0, base, adapters, shard, &plan);
    local_finetune(&mut solo, plan.rounds * plan.local_epochs).unwrap();
    let standalone_same = bits(&global.flat_values()) == bits(&solo.adapters.flat_values());

    // one client holding the union vs the harness's centralized baseline
    cfg.dataset.num_clients = 1;
    cfg.baselines = Baselines { centralized: true, local_only: false };
    let o = run(&cfg);
    let (f, cen) = (o.arm("federated").unwrap(), o.arm("centralized").unwrap());
    let union_same = f == cen && f.perplexity.to_bits() == cen.perplexity.to_bits();
    c.finish(
        standalone_same && union_same,
        format!("1-client vs standalone bit-identical: {standalone_same}; 1-client union vs centralized: {union_same}"),
    );
}

fn bits(v: &[f32]) -> Vec<u32> {
    v.iter().map(|x| x.to_bits()).collect()
}

fn fedipr_config(dir: &Path, watermark: bool) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        name: if watermark { "fedipr".into() } else { "fedipr-plain".into() },
        dataset: DatasetSpec { samples: 400, test_per_client: 50, ..DatasetSpec::default() },
        eval: EvalSpec { generation_samples: 4, max_new_tokens: 40 },
        baselines: common::no_baselines(),
        watermark: watermark.then(|| WatermarkSpec { n_bits: 64, ..WatermarkSpec::default() }),
        output_dir: Some(dir.join(if watermark { "wm" } else { "plain" })),
        ..ExperimentConfig::default()
    };
    cfg.plan.rounds = 10;
    cfg.plan.optimizer = common::sgd(0.03);
    cfg
}

#[test]
fn c07_fedipr() {
    let c = Criterion::start(7, "FedIPR detection and fidelity", 180);
    let dir = tempfile::tempdir().unwrap();
    let wm = run(&fedipr_config(dir.path(), true));
    let plain = run(&fedipr_config(dir.path(), false));
    let global = load_adapters(wm.dir.join("checkpoints/global.flad")).unwrap();
    let key = |id: u32| {
        let text = std::fs::read_to_string(wm.dir.join(format!("keys/client-{id}.json"))).unwrap();
        WatermarkKey::from_json(&text).unwrap()
    };
    let (k0, k1) = (key(0), key(1));
    let rate = |k: &WatermarkKey| verify(&global, k, 0.9).unwrap().detection_rate;
    let own = [rate(&k0), rate(&k1)];
    // each client's projection checked against the other client's bits
    let cross = [
        rate(&WatermarkKey::with_bits(0, k0.seed, k1.bits().to_vec(), k0.gamma).unwrap()),
        rate(&WatermarkKey::with_bits(1, k1.seed, k0.bits().to_vec(), k1.gamma).unwrap()),
    ];
    // Monte Carlo estimate of the random-key rate for each client's slot
    let random: Vec<f64> = [k0.client_id, k1.client_id]
        .iter()
        .map(|&id| {
            let keys = 0..200u64;
            let n = keys.end as f64;
            keys.map(|i| rate(&WatermarkKey::generate(id, 0x5eed_0000 + 1000 * id as u64 + i, 64, k0.gamma).unwrap())).sum::<f64>() / n
        })
        .collect();
    let null_ok = |r: &f64| (0.35..=0.65).contains(r);
    let gap = (ppl(&wm, "federated") - ppl(&plain, "federated")).abs() / ppl(&plain, "federated");
    let ok = own.iter().all(|&r| r >= 0.9) && cross.iter().all(null_ok) && random.iter().all(null_ok) && gap < 0.05;
    c.finish(
        ok,
        format!("own {own:?}, cross-key {cross:?}, random-key mean {random:?}, perplexity gap {:.2} %", 100.0 * gap),
    );
}

#[test]
fn c08_offsite_tuning() {
    let c = Criterion::start(8, "offsite-tuning structure and gain", 240);
    let dir = tempfile::tempdir().unwrap();
    let mut details = Vec::new();
    let mut ok = true;
    for seed in [1u64, 2, 3] {
        let mut cfg = ExperimentConfig {
            name: format!("ost-{seed}"),
            dataset: DatasetSpec { samples: 400, test_per_client: 50, ..DatasetSpec::default() },
            eval: EvalSpec { generation_samples: 4, max_new_tokens: 40 },
            baselines: common::no_baselines(),
            ..ExperimentConfig::default()
        }
        .with_seed(seed);
        cfg.plan.protocol = Protocol::Ost;
        cfg.output_dir = Some(dir.path().join(&cfg.name));
        let o = run(&cfg);
        let n = cfg.server_model.n_layers;
        let s = cfg.plan.ost;
        let dropped: Vec<usize> = (s.keep_bottom..n - s.keep_top).filter(|j| !(j - s.keep_bottom).is_multiple_of(s.keep_every)).collect();
        let kept_middle: Vec<usize> = (s.keep_bottom..n - s.keep_top).filter(|j| !dropped.contains(j)).collect();
        let in_block = |j: usize| {
            let p = format!("blocks.{j}.");
            o.names_to_clients.iter().any(|name| name.starts_with(&p))
        };
        let excludes_dropped = !dropped.is_empty() && !dropped.iter().any(|&j| in_block(j));
        let sends_kept = kept_middle.iter().all(|&j| in_block(j));
        let plugged = load_model(o.dir.join("checkpoints/server.fllm")).unwrap();
        let depth_ok = plugged.config().n_layers == n;
        let (after, before) = (ppl(&o, "federated"), ppl(&o, "server-original"));
        ok &= excludes_dropped && sends_kept && depth_ok && after < before;
        details.push(format!(
            "seed {seed}: dropped {dropped:?} withheld {excludes_dropped}, depth {} / {n}, perplexity {after:.3} vs {before:.3}",
            plugged.config().n_layers
        ));
    }
    c.finish(ok, details.join("; "));
}

#[test]
fn c09_metric_oracles() {
    let c = Criterion::start(9, "metric oracles", 1);
    // (candidate, reference, ROUGE-1, ROUGE-2, ROUGE-L, BLEU-4), word tokens, F1 in percent.
    // BLEU smooths a zero n ≥ 2 count to 1/(total + 1); an empty n-gram total gives 1.
    let cases: [(&str, &str, f64, f64, f64, f64); 11] = [
        ("the cat sat on the mat", "the cat sat on the mat", 100.0, 100.0, 100.0, 100.0),
        // P1 = 1, R1 = 2/6; bigram 1/1 vs 1/5; BLEU = e^(1−3) · 1
        ("the cat", "the cat sat on the mat", 50.0, 100.0 / 3.0, 50.0, 13.533528),
        ("a b c", "d e f", 0.0, 0.0, 0.0, 0.0),
        // clipped unigram 1/4 vs 1/2; BLEU = (1/4 · 1/4 · 1/3 · 1/2)^(1/4)
        ("the the the the", "the cat", 100.0 / 3.0, 0.0, 100.0 / 3.0, 31.947155),
        // LCS 1; BLEU = (1 · 1/2 · 1 · 1)^(1/4)
        ("cat the", "the cat", 100.0, 0.0, 50.0, 84.089642),
        // LCS "a c d"; BLEU = (3/4 · 1/3 · 1/3 · 1/2)^(1/4)
        ("a b c d", "a x c d", 75.0, 100.0 / 3.0, 75.0, 45.180100),
        ("", "the cat", 0.0, 0.0, 0.0, 0.0),
        // unigram 2/4 vs 2/2; bigram 1/3 vs 1/1; BLEU = (1/2 · 1/3 · 1/3 · 1/2)^(1/4)
        ("a b a b", "a b", 200.0 / 3.0, 50.0, 200.0 / 3.0, 40.824829),
        // BLEU = e^(1 − 7/5)
        ("x y z w v", "x y z w v u t", 250.0 / 3.0, 80.0, 250.0 / 3.0, 67.032005),
        // LCS 1 of 5; BLEU = (1 · 1/5 · 1/4 · 1/3)^(1/4)
        ("one two three four five", "five four three two one", 100.0, 0.0, 20.0, 35.930411),
        // BLEU = e^(1 − 6/5)
        ("red wool coat , warm", "a red wool coat , warm", 1000.0 / 11.0, 800.0 / 9.0, 1000.0 / 11.0, 81.873075),
    ];
    let mut worst = 0.0f64;
    for (cand, reference, r1, r2, rl, b4) in cases {
        let (c_, r_) = (words(cand), words(reference));
        let got = [rouge_n(&c_, &r_, 1).unwrap(), rouge_n(&c_, &r_, 2).unwrap(), rouge_l(&c_, &r_), bleu_4(&c_, &r_)];
        for (g, want) in got.iter().zip([r1, r2, rl, b4]) {
            worst = worst.max((g - want).abs());
        }
    }
    c.finish(worst < 1e-3, format!("{} pairs, worst deviation {worst:.2e}", cases.len()));
}

#[test]
fn c10_determinism() {
    let c = Criterion::start(10, "determinism", 120);
    let dir = tempfile::tempdir().unwrap();
    let config = |sub: &str| {
        let mut cfg = common::tiny(&dir.path().join(sub));
        cfg.plan.aggregation = fedllm_core::trainers::Aggregation::Secure;
        cfg.plan.dp_sigma = 0.01;
        cfg.watermark = Some(WatermarkSpec { n_bits: 32, ..WatermarkSpec::default() });
        cfg
    };
    let (a, b) = (run(&config("a")), run(&config("b")));
    let same: Vec<bool> = [METRICS_FILE, HISTORY_FILE, LEDGER_FILE]
        .iter()
        .map(|f| std::fs::read(a.dir.join(f)).unwrap() == std::fs::read(b.dir.join(f)).unwrap())
        .collect();
    c.finish(same.iter().all(|&s| s), format!("metrics/history/ledger identical: {same:?}"));
}
