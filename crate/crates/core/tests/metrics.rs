use fedllm_core::metrics::{bleu_4, lcs_len, rouge_l, rouge_n};
use proptest::prelude::*;

/// Clipped overlap by repeated removal from a multiset, no hashing.
fn overlap(c: &[u8], r: &[u8], n: usize) -> (usize, usize, usize) {
    let grams = |s: &[u8]| -> Vec<Vec<u8>> { if s.len() < n { vec![] } else { s.windows(n).map(<[u8]>::to_vec).collect() } };
    let (cg, mut rg) = (grams(c), grams(r));
    let (ct, rt) = (cg.len(), rg.len());
    let mut hit = 0;
    for g in cg {
        if let Some(i) = rg.iter().position(|x| *x == g) {
            rg.swap_remove(i);
            hit += 1;
        }
    }
    (hit, ct, rt)
}

fn f1(hit: usize, ct: usize, rt: usize) -> f64 {
    if hit == 0 {
        return 0.0;
    }
    let (p, r) = (hit as f64 / ct as f64, hit as f64 / rt as f64);
    100.0 * 2.0 * p * r / (p + r)
}

/// Exponential-time LCS for short inputs.
fn lcs_brute(a: &[u8], b: &[u8]) -> usize {
    match (a.split_first(), b.split_first()) {
        (Some((x, ar)), Some((y, br))) if x == y => 1 + lcs_brute(ar, br),
        (Some((_, ar)), Some((_, br))) => lcs_brute(ar, b).max(lcs_brute(a, br)),
        _ => 0,
    }
}

fn bleu_oracle(c: &[u8], r: &[u8]) -> f64 {
    if c.is_empty() || r.is_empty() {
        return 0.0;
    }
    let mut logp = 0.0;
    for n in 1..=4 {
        let (hit, ct, _) = overlap(c, r, n);
        let p = if hit > 0 {
            hit as f64 / ct as f64
        } else if n == 1 {
            return 0.0;
        } else {
            1.0 / (ct as f64 + 1.0)
        };
        logp += p.ln() / 4.0;
    }
    let bp = if c.len() >= r.len() { 1.0 } else { (1.0 - r.len() as f64 / c.len() as f64).exp() };
    100.0 * bp * logp.exp()
}

proptest! {
    #[test]
    fn scores_match_brute_force(c in prop::collection::vec(0u8..4, 0..9), r in prop::collection::vec(0u8..4, 0..9)) {
        for n in 1..=2 {
            let (hit, ct, rt) = overlap(&c, &r, n);
            prop_assert!((rouge_n(&c, &r, n).unwrap() - f1(hit, ct, rt)).abs() < 1e-9);
        }
        let l = lcs_brute(&c, &r);
        prop_assert_eq!(lcs_len(&c, &r), l);
        prop_assert!((rouge_l(&c, &r) - f1(l, c.len(), r.len())).abs() < 1e-9);
        prop_assert!((bleu_4(&c, &r) - bleu_oracle(&c, &r)).abs() < 1e-9);
    }
}
