//! Perplexity and n-gram overlap metrics. Scores are on a 0–100 scale and
//! operate on whatever tokens they are given (bytes by default).

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::model::{Batch, Decoding, MiniLM};
use crate::peft::AdapterSet;

const EVAL_BATCH: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rouge1: f64,
    pub rouge2: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub bleu4: f64,
    pub perplexity: f64,
    pub samples: usize,
}

/// Summed next-token cross-entropy (nats) and the number of predicted tokens.
pub fn token_nll(model: &MiniLM, adapters: Option<&AdapterSet>, dataset: &[Vec<u32>]) -> Result<(f64, usize)> {
    let mut total = 0.0f64;
    let mut count = 0usize;
    for chunk in dataset.chunks(EVAL_BATCH) {
        if chunk.iter().all(|s| s.len() < 2) {
            continue;
        }
        let (batch, targets) = Batch::next_token(chunk)?;
        let mut g = Graph::new();
        let vars = model.bind(&mut g, |_| false);
        let av = adapters.map(|a| a.bind(&mut g, false)).transpose()?;
        let logits = model.forward_graph(&mut g, &vars, &batch, av.as_ref(), None)?;
        let loss = g.cross_entropy(logits, &targets)?;
        total += g.item(loss) as f64 * targets.len() as f64;
        count += targets.len();
    }
    Ok((total, count))
}

/// `exp(mean token cross-entropy)` over every next-token prediction.
pub fn perplexity(model: &MiniLM, adapters: Option<&AdapterSet>, dataset: &[Vec<u32>]) -> Result<f64> {
    let (nll, n) = token_nll(model, adapters, dataset)?;
    if n == 0 {
        return Err(Error::Data("perplexity needs at least one sequence of two or more tokens".into()));
    }
    Ok((nll / n as f64).exp())
}

fn ngram_counts<T: Eq + Hash + Clone>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

/// Clipped n-gram matches and the candidate's n-gram total.
fn clipped_matches<T: Eq + Hash + Clone>(cand: &[T], reference: &[T], n: usize) -> (usize, usize) {
    let c = ngram_counts(cand, n);
    let r = ngram_counts(reference, n);
    let matches = c.iter().map(|(g, &k)| k.min(r.get(g).copied().unwrap_or(0))).sum();
    (matches, cand.len().saturating_sub(n - 1))
}

fn f1(overlap: usize, cand_total: usize, ref_total: usize) -> f64 {
    if overlap == 0 || cand_total == 0 || ref_total == 0 {
        return 0.0;
    }
    let p = overlap as f64 / cand_total as f64;
    let r = overlap as f64 / ref_total as f64;
    100.0 * 2.0 * p * r / (p + r)
}

/// ROUGE-N F1 from clipped n-gram overlap.
pub fn rouge_n<T: Eq + Hash + Clone>(cand: &[T], reference: &[T], n: usize) -> Result<f64> {
    if !(1..=2).contains(&n) {
        return Err(Error::Config(format!("ROUGE-N supports n in {{1, 2}}, got {n}")));
    }
    let (overlap, ct) = clipped_matches(cand, reference, n);
    Ok(f1(overlap, ct, reference.len().saturating_sub(n - 1)))
}

pub fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F1 with `P = LCS/|cand|`, `R = LCS/|ref|`.
pub fn rouge_l<T: Eq>(cand: &[T], reference: &[T]) -> f64 {
    f1(lcs_len(cand, reference), cand.len(), reference.len())
}

/// BLEU-4: geometric mean of clipped 1..4-gram precisions times the brevity
/// penalty `exp(min(0, 1 − |ref|/|cand|))`. For n ≥ 2 a zero match count is
/// smoothed to `1 / (total + 1)`; a zero unigram match gives 0.
pub fn bleu_4<T: Eq + Hash + Clone>(cand: &[T], reference: &[T]) -> f64 {
    if cand.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let (m, t) = clipped_matches(cand, reference, n);
        let p = match (n, m) {
            (1, 0) => return 0.0,
            (_, 0) => 1.0 / (t as f64 + 1.0),
            _ => m as f64 / t as f64,
        };
        log_sum += p.ln();
    }
    let bp = (1.0 - reference.len() as f64 / cand.len() as f64).min(0.0).exp();
    100.0 * bp * (log_sum / 4.0).exp()
}

/// Whitespace tokenization, for word-level scoring.
pub fn words(text: &str) -> Vec<&str> {
    text.split_whitespace().collect()
}

/// Greedy-generates a continuation for every `(prompt, reference)` pair and
/// scores it against the reference on byte tokens; perplexity comes from
/// `held_out`.
pub fn evaluate(
    model: &MiniLM,
    adapters: Option<&AdapterSet>,
    pairs: &[(Vec<u8>, Vec<u8>)],
    held_out: &[Vec<u32>],
    max_new: usize,
) -> Result<EvalReport> {
    let perplexity = perplexity(model, adapters, held_out)?;
    let (mut r1, mut r2, mut rl, mut b4) = (0.0, 0.0, 0.0, 0.0);
    for (prompt, reference) in pairs {
        let out = model.generate(prompt, max_new, Decoding::Greedy, 0, adapters)?;
        let cand = &out[prompt.len()..];
        r1 += rouge_n(cand, reference, 1)?;
        r2 += rouge_n(cand, reference, 2)?;
        rl += rouge_l(cand, reference);
        b4 += bleu_4(cand, reference);
    }
    let n = pairs.len().max(1) as f64;
    Ok(EvalReport {
        rouge1: r1 / n,
        rouge2: r2 / n,
        rouge_l: rl / n,
        bleu4: b4 / n,
        perplexity,
        samples: pairs.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rouge_examples() {
        let c = words("the cat sat");
        let r = words("the cat ate");
        assert!((rouge_n(&c, &r, 1).unwrap() - 200.0 / 3.0).abs() < 1e-9);
        assert_eq!(rouge_n(&c, &c, 2).unwrap(), 100.0);
        assert_eq!(rouge_n(&words("a b"), &words("c d"), 1).unwrap(), 0.0);
        assert!(rouge_n(&c, &r, 3).is_err());
        assert_eq!(rouge_l(&words("a b c d"), &words("a c b d")), 75.0);
        assert_eq!(rouge_l::<&str>(&[], &words("a")), 0.0);
    }

    #[test]
    fn bleu_edges() {
        let s = words("one two three four five");
        assert!((bleu_4(&s, &s) - 100.0).abs() < 1e-9);
        assert_eq!(bleu_4(&words("x y z"), &words("a b c d e")), 0.0);
        assert_eq!(bleu_4::<&str>(&[], &s), 0.0);
    }

    #[test]
    fn perplexity_of_empty_dataset_is_an_error() {
        let m = MiniLM::new(crate::model::ModelConfig::default()).unwrap();
        assert!(matches!(perplexity(&m, None, &[]), Err(Error::Data(_))));
        assert!(matches!(perplexity(&m, None, &[vec![3]]), Err(Error::Data(_))));
    }
}
