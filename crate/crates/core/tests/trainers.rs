mod common;

use std::sync::Arc;

use common::{corpus, pretrained, sgd, tiny};
use fedllm_core::checkpoint::model_digest;
use fedllm_core::fed::{Direction, RoundMessage};
use fedllm_core::fedipr::{verify, Verdict, WatermarkKey};
use fedllm_core::metrics::token_nll;
use fedllm_core::peft::{attach, attach_lora};
use fedllm_core::trainers::{
    pretrain, run_fedcollm, run_fedheterollm, run_fedhomollm, run_fedost, Aggregation, ClientState, HeteroClient, KdConfig,
    OstClient, OstConfig, TrainerPlan,
};
use fedllm_core::{AdapterSpec, Error, LoraSpec, MiniLM};

fn plan(rounds: usize) -> TrainerPlan {
    TrainerPlan {
        rounds,
        local_epochs: 2,
        batch_size: 8,
        optimizer: sgd(0.1),
        seed: 11,
        ..TrainerPlan::default()
    }
}

fn clients(base: &Arc<MiniLM>, plan: &TrainerPlan, n: usize) -> Vec<ClientState> {
    let spec = LoraSpec { rank: 4, ..LoraSpec::default() };
    let adapters = attach_lora(base, &spec, plan.seed).unwrap();
    (0..n)
        .map(|i| ClientState::new(i as u32, base.clone(), adapters.clone(), corpus(24 + 8 * i, 0, i as u64), plan))
        .collect()
}

fn mean(metric: &str, round: u32, h: &[fedllm_core::trainers::HistoryEntry]) -> f64 {
    let v: Vec<f64> = h.iter().filter(|e| e.metric == metric && e.round == round).map(|e| e.value).collect();
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn homo_training_reduces_held_out_loss() {
    let base = Arc::new(pretrained(tiny(32, 2, 1)));
    let p = plan(4);
    let mut cs = clients(&base, &p, 2);
    let eval = corpus(16, 0, 99);
    let (nll0, n0) = token_nll(&base, Some(&cs[0].adapters), &eval).unwrap();
    let digest = model_digest(&base);
    let run = run_fedhomollm(&mut cs, &p, Some(&eval)).unwrap();
    assert_eq!(model_digest(&cs[1].base), digest);
    let last = run.run.history.iter().rfind(|e| e.metric == "eval_loss").unwrap();
    assert_eq!(last.round, 4);
    assert!(last.value < nll0 / n0 as f64 - 0.5, "{} vs {}", last.value, nll0 / n0 as f64);
    assert!(mean("train_loss", 4, &run.run.history) < mean("train_loss", 1, &run.run.history));
    // every client holds the broadcast global after the last round
    for c in &cs {
        assert_eq!(c.adapters.flat_values(), run.run.global);
    }
    // ledger: a round-0 broadcast, then one uplink and one downlink per client per round
    let l = &run.run.ledger;
    assert_eq!(l.entries().len(), 2 + 4 * 4);
    assert_eq!(l.entries().iter().filter(|e| e.direction == Direction::Uplink).count(), 8);
}

#[test]
fn runs_are_deterministic() {
    let base = Arc::new(MiniLM::new(tiny(16, 1, 3)).unwrap());
    let p = plan(2);
    let a = run_fedhomollm(&mut clients(&base, &p, 2), &p, None).unwrap();
    let b = run_fedhomollm(&mut clients(&base, &p, 2), &p, None).unwrap();
    assert_eq!(a.run.global, b.run.global);
    assert_eq!(a.run.history, b.run.history);
}

#[test]
fn secure_aggregation_tracks_plain_within_quantization() {
    let base = Arc::new(MiniLM::new(tiny(16, 1, 3)).unwrap());
    let p = plan(1);
    let plain = run_fedhomollm(&mut clients(&base, &p, 3), &p, None).unwrap();
    let sp = TrainerPlan { aggregation: Aggregation::Secure, ..p.clone() };
    let secure = run_fedhomollm(&mut clients(&base, &sp, 3), &sp, None).unwrap();
    // each client's weighted quantization is off by at most 0.5/s per element
    let bound = 3.0 * 0.5 / sp.secagg.scale + 1e-6;
    let worst = plain.run.global.iter().zip(&secure.run.global).map(|(a, b)| (a - b).abs() as f64).fold(0.0, f64::max);
    assert!(worst <= bound, "{worst} > {bound}");
    // masked uplinks carry 8-byte field elements plus the weight slot
    let up = secure.run.ledger.entries().iter().find(|e| e.direction == Direction::Uplink).unwrap();
    let len = plain.run.layout.total_len();
    assert!(up.bytes >= 8 * (len as u64 + 1));
}

#[test]
fn client_ids_must_be_unique() {
    let base = Arc::new(MiniLM::new(tiny(16, 1, 3)).unwrap());
    let p = plan(1);
    let mut cs = clients(&base, &p, 2);
    cs[1].id = 0;
    assert!(matches!(run_fedhomollm(&mut cs, &p, None), Err(Error::Protocol(_))));
}

#[test]
fn watermarks_survive_aggregation() {
    let base = Arc::new(pretrained(tiny(32, 2, 1)));
    let p = plan(4);
    let keys: Vec<WatermarkKey> = (0..2).map(|i| WatermarkKey::generate(i, 500 + i as u64, 32, 0.5).unwrap()).collect();
    let mut cs: Vec<ClientState> =
        clients(&base, &p, 2).into_iter().zip(&keys).map(|(c, k)| c.with_watermark(k.clone()).unwrap()).collect();
    let run = run_fedhomollm(&mut cs, &p, None).unwrap();
    for k in &keys {
        let r = verify(&run.global, k, 0.9).unwrap();
        assert_eq!(r.verdict, Verdict::Owned, "client {} rate {}", k.client_id, r.detection_rate);
    }
    let stranger = WatermarkKey::generate(9, 4242, 32, 0.5).unwrap();
    assert!(verify(&run.global, &stranger, 0.9).unwrap().detection_rate < 0.9);
}

#[test]
fn co_tuning_without_distillation_is_homo() {
    let base = Arc::new(MiniLM::new(tiny(16, 1, 3)).unwrap());
    let p = TrainerPlan { kd: KdConfig { epochs: 0, ..KdConfig::default() }, ..plan(2) };
    let eval = corpus(8, 0, 99);
    let homo = run_fedhomollm(&mut clients(&base, &p, 2), &p, Some(&eval)).unwrap();
    let server = MiniLM::new(tiny(32, 2, 5)).unwrap();
    let co = run_fedcollm(server.clone(), &mut clients(&base, &p, 2), &corpus(8, 0, 7), &p, Some(&eval)).unwrap();
    assert_eq!(co.homo.run.history, homo.run.history);
    assert_eq!(co.homo.run.global, homo.run.global);
    assert_eq!(co.server, server);
}

#[test]
fn co_tuning_improves_the_server_on_client_data() {
    let base = Arc::new(pretrained(tiny(16, 1, 3)));
    let p = TrainerPlan { kd: KdConfig { epochs: 2, ..KdConfig::default() }, ..plan(3) };
    let eval = corpus(16, 0, 99);
    let server = pretrained(tiny(32, 2, 5));
    let co = run_fedcollm(server, &mut clients(&base, &p, 2), &corpus(32, 0, 7), &p, Some(&eval)).unwrap();
    let h = &co.homo.run.history;
    let deltas: Vec<f64> =
        (1..=3).map(|r| mean("server_eval_loss", r, h) - mean("server_eval_loss_before", r, h)).collect();
    assert!(deltas.iter().sum::<f64>() / 3.0 <= 0.0, "{deltas:?}");
}

#[test]
fn co_tuning_contracts() {
    let base = Arc::new(MiniLM::new(tiny(16, 1, 3)).unwrap());
    let p = plan(1);
    let server = MiniLM::new(tiny(32, 2, 5)).unwrap();
    let err = run_fedcollm(server, &mut clients(&base, &p, 2), &[], &p, None);
    assert!(matches!(err, Err(Error::Config(_))));
    let small = MiniLM::new(tiny(16, 1, 5)).unwrap();
    let err = run_fedcollm(small, &mut clients(&base, &p, 2), &corpus(4, 0, 1), &p, None);
    assert!(matches!(err, Err(Error::Config(_))));
}

#[test]
fn hetero_distills_then_federates() {
    let mut teachers = [MiniLM::new(tiny(32, 2, 21)).unwrap(), MiniLM::new(tiny(16, 3, 22)).unwrap()];
    for (i, t) in teachers.iter_mut().enumerate() {
        pretrain(t, &corpus(24, 0, i as u64), 4, 8, &sgd(0.05), 1).unwrap();
    }
    let mentee = tiny(16, 1, 0);
    let p = TrainerPlan { kd: KdConfig { epochs: 3, ..KdConfig::default() }, ..plan(2) };
    let hc: Vec<HeteroClient> = teachers
        .into_iter()
        .enumerate()
        .map(|(i, t)| HeteroClient { id: i as u32, teacher: Arc::new(t), mentee, shard: corpus(24, 0, i as u64) })
        .collect();
    let spec = AdapterSpec::Lora(LoraSpec { rank: 2, ..LoraSpec::default() });
    let run = run_fedheterollm(&hc, &spec, &p, None).unwrap();
    assert_eq!(run.mentees.len(), 2);
    for id in 0..2 {
        let kd: Vec<f64> = run
            .distill_history
            .iter()
            .filter(|e| e.client == Some(id) && (e.metric == "kd_initial" || e.metric == "distill_kd"))
            .map(|e| e.value)
            .collect();
        assert!(kd.last().unwrap() < &kd[0], "client {id}: {kd:?}");
    }
    // only adapters cross the network
    let adapters = attach(&run.mentees[0], &spec, p.seed).unwrap();
    let names: Vec<String> = adapters.layout().names().map(String::from).collect();
    assert!(run.homo.run.names_to_clients.iter().all(|n| names.contains(n)));
}

#[test]
fn hetero_rejects_mixed_mentees() {
    let t = Arc::new(MiniLM::new(tiny(16, 1, 1)).unwrap());
    let hc = vec![
        HeteroClient { id: 0, teacher: t.clone(), mentee: tiny(16, 1, 0), shard: corpus(4, 0, 0) },
        HeteroClient { id: 1, teacher: t, mentee: tiny(16, 2, 0), shard: corpus(4, 0, 1) },
    ];
    let err = run_fedheterollm(&hc, &AdapterSpec::Lora(LoraSpec::default()), &plan(1), None);
    assert!(matches!(err, Err(Error::Protocol(_))));
}

#[test]
fn offsite_tuning_structure_and_gain() {
    let server = pretrained(tiny(32, 6, 8));
    let p = TrainerPlan { ost: OstConfig { keep_bottom: 1, keep_top: 1, keep_every: 2 }, ..plan(3) };
    let cs: Vec<OstClient> = (0..2).map(|i| OstClient { id: i, shard: corpus(24, 0, i as u64) }).collect();
    let eval = corpus(16, 0, 99);
    let run = run_fedost(&server, &cs, &p, Some(&eval)).unwrap();

    assert_eq!(run.plugged.config().n_layers, 6);
    assert_eq!(run.emulator.source_layers, vec![0, 1, 3, 5]);
    for l in run.emulator.dropped_layers(6) {
        let prefix = format!("blocks.{l}.");
        assert!(run.run.names_to_clients.iter().all(|n| !n.starts_with(&prefix)), "layer {l} leaked");
    }
    // the true middle stack is untouched
    for l in 1..5 {
        assert_eq!(run.plugged.blocks[l], server.blocks[l]);
    }

    let len = run.run.layout.total_len();
    let adaptor_msg = RoundMessage::plain(1, 0, vec![0.0; len], run.run.layout.clone(), 1).byte_size();
    let ledger = run.run.ledger.entries();
    let one_time: Vec<_> = ledger.iter().filter(|e| e.bytes == run.emulator_bytes).collect();
    assert_eq!(one_time.len(), 2);
    assert!(one_time.iter().all(|e| e.round == 0 && e.direction == Direction::Downlink));
    assert_eq!(ledger.len(), 2 + 2 + 3 * 4);
    assert!(ledger.iter().filter(|e| e.bytes != run.emulator_bytes).all(|e| e.bytes == adaptor_msg));

    let (before, n) = token_nll(&server, None, &eval).unwrap();
    let (after, _) = token_nll(&run.plugged, None, &eval).unwrap();
    assert!(after < before, "{} vs {}", after / n as f64, before / n as f64);
}
