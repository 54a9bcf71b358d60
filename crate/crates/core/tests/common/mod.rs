//! Reference implementations shared by the integration tests.

#![allow(dead_code)]

/// Corpus BLEU computed by brute force: n-grams are compared as slices by
/// linear scan, without hashing.
pub fn brute_force_bleu(hyps: &[String], refs: &[String], max_n: usize, chars: bool) -> f64 {
    let split = |s: &str| -> Vec<String> {
        if chars {
            s.chars().filter(|c| !c.is_whitespace()).map(|c| c.to_string()).collect()
        } else {
            s.split_whitespace().map(|w| w.to_string()).collect()
        }
    };
    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    let mut h_len = 0;
    let mut r_len = 0;
    for (h, r) in hyps.iter().zip(refs) {
        let h = split(h);
        let r = split(r);
        h_len += h.len();
        r_len += r.len();
        for n in 1..=max_n {
            if h.len() < n {
                continue;
            }
            let h_grams: Vec<&[String]> = (0..=h.len() - n).map(|i| &h[i..i + n]).collect();
            let r_grams: Vec<&[String]> = if r.len() >= n { (0..=r.len() - n).map(|i| &r[i..i + n]).collect() } else { vec![] };
            total[n - 1] += h_grams.len();
            let mut used = vec![false; r_grams.len()];
            for g in &h_grams {
                for (j, rg) in r_grams.iter().enumerate() {
                    if !used[j] && rg == g {
                        used[j] = true;
                        matched[n - 1] += 1;
                        break;
                    }
                }
            }
        }
    }
    let mut log_sum = 0.0;
    let mut orders = 0;
    for n in 0..max_n {
        if total[n] == 0 {
            continue;
        }
        if matched[n] == 0 {
            return 0.0;
        }
        log_sum += (matched[n] as f64 / total[n] as f64).ln();
        orders += 1;
    }
    if orders == 0 || h_len == 0 {
        return 0.0;
    }
    let bp = if h_len < r_len { (1.0 - r_len as f64 / h_len as f64).exp() } else { 1.0 };
    100.0 * bp * (log_sum / orders as f64).exp()
}
