//! Brute-force reference implementations for the caption metrics and a
//! table-driven toy next-token model.

use mmcap_core::decode::{Hypothesis, StepScorer};
use mmcap_core::tokenizer::EOS;
use mmcap_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn grams(words: &[String], n: usize) -> Vec<Vec<String>> {
    let mut out = Vec::new();
    let mut i = 0;
    while i + n <= words.len() {
        out.push(words[i..i + n].to_vec());
        i += 1;
    }
    out
}

fn count(list: &[Vec<String>], g: &[String]) -> usize {
    list.iter().filter(|x| x.as_slice() == g).count()
}

fn distinct(list: &[Vec<String>]) -> Vec<Vec<String>> {
    let mut out: Vec<Vec<String>> = Vec::new();
    for g in list {
        if !out.contains(g) {
            out.push(g.clone());
        }
    }
    out
}

pub fn bleu(cands: &[Vec<String>], refs: &[Vec<String>], n: usize) -> f64 {
    let mut precisions = Vec::new();
    for k in 1..=n {
        let mut hit = 0.0;
        let mut all = 0.0;
        for (c, r) in cands.iter().zip(refs) {
            let cg = grams(c, k);
            let rg = grams(r, k);
            for g in distinct(&cg) {
                let in_c = count(&cg, &g) as f64;
                let in_r = count(&rg, &g) as f64;
                hit += if in_c < in_r { in_c } else { in_r };
                all += in_c;
            }
        }
        precisions.push(if all == 0.0 { 0.0 } else { hit / all });
    }
    let c: f64 = cands.iter().map(|x| x.len() as f64).sum();
    let r: f64 = refs.iter().map(|x| x.len() as f64).sum();
    if c == 0.0 || precisions.iter().any(|&p| p == 0.0) {
        return 0.0;
    }
    let geo = precisions.iter().product::<f64>().powf(1.0 / n as f64);
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    100.0 * bp * geo
}

/// Longest common subsequence by enumerating every subsequence of `a`.
fn lcs(a: &[String], b: &[String]) -> usize {
    let mut best = 0;
    for mask in 0u32..(1u32 << a.len()) {
        let sub: Vec<&String> = (0..a.len()).filter(|i| mask >> i & 1 == 1).map(|i| &a[i]).collect();
        let mut j = 0;
        for w in b {
            if j < sub.len() && sub[j] == w {
                j += 1;
            }
        }
        if j == sub.len() && sub.len() > best {
            best = sub.len();
        }
    }
    best
}

pub fn rouge_l(cands: &[Vec<String>], refs: &[Vec<String>]) -> f64 {
    let mut total = 0.0;
    for (c, r) in cands.iter().zip(refs) {
        let l = lcs(c, r) as f64;
        if l > 0.0 {
            let p = l / c.len() as f64;
            let rec = l / r.len() as f64;
            total += (1.0 + 1.44) * p * rec / (rec + 1.44 * p);
        }
    }
    100.0 * total / cands.len() as f64
}

pub fn cider_d(cands: &[Vec<String>], refs: &[Vec<String>]) -> f64 {
    let docs = refs.len() as f64;
    let mut total = 0.0;
    for (c, r) in cands.iter().zip(refs) {
        let penalty = (-((c.len() as f64 - r.len() as f64).powi(2)) / 72.0).exp();
        let mut per_n = 0.0;
        for n in 1..=4 {
            let cg = grams(c, n);
            let rg = grams(r, n);
            let mut axes = distinct(&cg);
            axes.extend(distinct(&rg));
            let axes = distinct(&axes);
            let weight = |g: &Vec<String>| {
                let df = refs.iter().filter(|x| grams(x, n).contains(g)).count().max(1) as f64;
                docs.ln() - df.ln()
            };
            let vc: Vec<f64> = axes.iter().map(|g| count(&cg, g) as f64 * weight(g)).collect();
            let vr: Vec<f64> = axes.iter().map(|g| count(&rg, g) as f64 * weight(g)).collect();
            let dot: f64 = vc.iter().zip(&vr).map(|(x, y)| x.min(*y) * y).sum();
            let nc = vc.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nr = vr.iter().map(|x| x * x).sum::<f64>().sqrt();
            let cos = if nc > 0.0 && nr > 0.0 { dot / (nc * nr) } else { dot };
            per_n += cos * penalty;
        }
        total += 10.0 * per_n / 4.0;
    }
    total / cands.len() as f64
}

/// Random corpus: up to `max_segments` pairs of up to `max_words` words from
/// a vocabulary of `vocab` words.
pub fn random_corpus(rng: &mut ChaCha8Rng, max_segments: usize, max_words: usize, vocab: usize) -> (Vec<Vec<String>>, Vec<Vec<String>>) {
    let n = rng.gen_range(1..=max_segments);
    let text = |rng: &mut ChaCha8Rng| -> Vec<String> {
        let len = rng.gen_range(0..=max_words);
        (0..len).map(|_| format!("w{}", rng.gen_range(0..vocab))).collect()
    };
    let cands = (0..n).map(|_| text(rng)).collect();
    let refs = (0..n).map(|_| text(rng)).collect();
    (cands, refs)
}

/// Next-token distributions drawn from a seeded table keyed by the prefix.
pub struct ToyModel {
    pub seed: u64,
    pub vocab: usize,
    /// Sharpness of the random logits.
    pub temperature: f64,
}

impl ToyModel {
    pub fn log_probs(&self, prefix: &[u32]) -> Vec<f64> {
        let mut key = self.seed;
        for &t in prefix {
            key = key.wrapping_mul(1_000_003).wrapping_add(t as u64 + 1);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        let logits: Vec<f64> = (0..self.vocab).map(|_| rng.gen_range(-1.0..1.0) * self.temperature).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z = logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln() + m;
        logits.iter().map(|l| l - z).collect()
    }
}

impl StepScorer for ToyModel {
    fn next_log_probs(&mut self, prefixes: &[Vec<u32>]) -> Result<Vec<Vec<f64>>> {
        Ok(prefixes.iter().map(|p| self.log_probs(p)).collect())
    }
}

/// Best length-normalized score over every sequence the decoder could emit.
pub fn exhaustive_best(model: &ToyModel, max_len: usize) -> f64 {
    fn walk(model: &ToyModel, h: Hypothesis, max_len: usize, best: &mut f64) {
        if h.finished || h.steps() == max_len {
            *best = best.max(h.score());
            return;
        }
        let lp = model.log_probs(&h.tokens);
        for (t, l) in lp.iter().enumerate() {
            let mut next = h.clone();
            next.log_prob += l;
            if t as u32 == EOS {
                next.finished = true;
            } else {
                next.tokens.push(t as u32);
            }
            walk(model, next, max_len, best);
        }
    }
    let mut best = f64::NEG_INFINITY;
    walk(model, Hypothesis::default(), max_len, &mut best);
    best
}
