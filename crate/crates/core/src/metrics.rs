//! Corpus caption metrics (BLEU, ROUGE-L, CIDEr-D), the constant-caption
//! baseline and annotator-agreement pooling. One reference per candidate.

use std::collections::HashMap;
use std::fmt;

use crate::error::{Error, Result};

pub const ROUGE_BETA: f64 = 1.2;
pub const CIDER_SIGMA: f64 = 6.0;
pub const CIDER_MAX_N: usize = 4;

/// Lowercased words; punctuation other than apostrophes separates words.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !(c.is_alphanumeric() || c == '\''))
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

fn ngrams(words: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if n > 0 && words.len() >= n {
        for g in words.windows(n) {
            *counts.entry(g).or_insert(0) += 1;
        }
    }
    counts
}

fn check_corpus(candidates: &[Vec<String>], references: &[Vec<String>]) -> Result<()> {
    if candidates.len() != references.len() {
        return Err(Error::Data(format!(
            "{} candidates for {} references",
            candidates.len(),
            references.len()
        )));
    }
    if candidates.is_empty() {
        return Err(Error::Data("empty corpus".into()));
    }
    Ok(())
}

/// Corpus BLEU-`n` in [0, 100]: clipped n-gram precisions, geometric mean,
/// brevity penalty. Any zero precision gives 0.
pub fn bleu(candidates: &[Vec<String>], references: &[Vec<String>], n: usize) -> Result<f64> {
    check_corpus(candidates, references)?;
    let c: usize = candidates.iter().map(Vec::len).sum();
    let r: usize = references.iter().map(Vec::len).sum();
    if c == 0 || n == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for k in 1..=n {
        let (mut matched, mut total) = (0usize, 0usize);
        for (cand, refr) in candidates.iter().zip(references) {
            let rc = ngrams(refr, k);
            for (g, cnt) in ngrams(cand, k) {
                matched += cnt.min(rc.get(g).copied().unwrap_or(0));
                total += cnt;
            }
        }
        if matched == 0 {
            return Ok(0.0);
        }
        log_sum += (matched as f64 / total as f64).ln();
    }
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    Ok(100.0 * bp * (log_sum / n as f64).exp())
}

pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS F-measure of one pair in [0, 1].
pub fn rouge_l_pair(candidate: &[String], reference: &[String]) -> f64 {
    let l = lcs_len(candidate, reference);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / candidate.len() as f64;
    let r = l as f64 / reference.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * r / (r + b2 * p)
}

/// Mean per-pair ROUGE-L in [0, 100].
pub fn rouge_l(candidates: &[Vec<String>], references: &[Vec<String>]) -> Result<f64> {
    check_corpus(candidates, references)?;
    let sum: f64 = candidates.iter().zip(references).map(|(c, r)| rouge_l_pair(c, r)).sum();
    Ok(100.0 * sum / candidates.len() as f64)
}

struct TfIdf<'a> {
    vecs: Vec<HashMap<&'a [String], f64>>,
    norms: Vec<f64>,
    len: usize,
}

fn tfidf<'a>(words: &'a [String], idf: &dyn Fn(&[String]) -> f64) -> TfIdf<'a> {
    let mut vecs = Vec::with_capacity(CIDER_MAX_N);
    let mut norms = Vec::with_capacity(CIDER_MAX_N);
    for n in 1..=CIDER_MAX_N {
        let v: HashMap<&[String], f64> = ngrams(words, n).into_iter().map(|(g, c)| (g, c as f64 * idf(g))).collect();
        norms.push(v.values().map(|x| x * x).sum::<f64>().sqrt());
        vecs.push(v);
    }
    TfIdf {
        vecs,
        norms,
        len: words.len(),
    }
}

/// Per-segment CIDEr-D: clipped tf-idf cosine for n = 1..4 times a Gaussian
/// length penalty, averaged over n, times 10. Document frequencies come from
/// the references.
pub fn cider_d_segments(candidates: &[Vec<String>], references: &[Vec<String>]) -> Result<Vec<f64>> {
    check_corpus(candidates, references)?;
    let mut df: HashMap<&[String], usize> = HashMap::new();
    for r in references {
        for n in 1..=CIDER_MAX_N {
            for g in ngrams(r, n).into_keys() {
                *df.entry(g).or_insert(0) += 1;
            }
        }
    }
    let log_docs = (references.len() as f64).ln();
    let idf = |g: &[String]| log_docs - (df.get(g).copied().unwrap_or(0).max(1) as f64).ln();
    Ok(candidates
        .iter()
        .zip(references)
        .map(|(c, r)| {
            let (hc, hr) = (tfidf(c, &idf), tfidf(r, &idf));
            let delta = hc.len as f64 - hr.len as f64;
            let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
            let mut total = 0.0;
            for n in 0..CIDER_MAX_N {
                let mut dot = 0.0;
                for (g, &x) in &hc.vecs[n] {
                    if let Some(&y) = hr.vecs[n].get(g) {
                        dot += x.min(y) * y;
                    }
                }
                if hc.norms[n] != 0.0 && hr.norms[n] != 0.0 {
                    dot /= hc.norms[n] * hr.norms[n];
                }
                total += dot * penalty;
            }
            10.0 * total / CIDER_MAX_N as f64
        })
        .collect())
}

/// Corpus CIDEr-D, the mean of [`cider_d_segments`].
pub fn cider_d(candidates: &[Vec<String>], references: &[Vec<String>]) -> Result<f64> {
    let s = cider_d_segments(candidates, references)?;
    Ok(s.iter().sum::<f64>() / s.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentScore {
    pub candidate: String,
    pub reference: String,
    pub rouge_l: f64,
    pub cider_d: f64,
}

/// BLEU and ROUGE-L on a 0-100 scale; CIDEr-D on its native scale with the
/// ×100 table convention alongside.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub count: usize,
    pub bleu1: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider_d: f64,
    pub segments: Vec<SegmentScore>,
}

impl EvalReport {
    pub fn empty() -> Self {
        Self {
            count: 0,
            bleu1: 0.0,
            bleu4: 0.0,
            rouge_l: 0.0,
            cider_d: 0.0,
            segments: Vec::new(),
        }
    }

    /// Scores raw caption strings. An empty corpus yields [`EvalReport::empty`].
    pub fn compute<S: AsRef<str>>(candidates: &[S], references: &[S]) -> Result<Self> {
        if candidates.is_empty() && references.is_empty() {
            return Ok(Self::empty());
        }
        let c: Vec<Vec<String>> = candidates.iter().map(|s| tokenize(s.as_ref())).collect();
        let r: Vec<Vec<String>> = references.iter().map(|s| tokenize(s.as_ref())).collect();
        let cider = cider_d_segments(&c, &r)?;
        let segments = candidates
            .iter()
            .zip(references)
            .zip(c.iter().zip(&r))
            .zip(&cider)
            .map(|(((cs, rs), (cw, rw)), &cd)| SegmentScore {
                candidate: cs.as_ref().to_string(),
                reference: rs.as_ref().to_string(),
                rouge_l: 100.0 * rouge_l_pair(cw, rw),
                cider_d: cd,
            })
            .collect();
        Ok(Self {
            count: c.len(),
            bleu1: bleu(&c, &r, 1)?,
            bleu4: bleu(&c, &r, 4)?,
            rouge_l: rouge_l(&c, &r)?,
            cider_d: cider.iter().sum::<f64>() / cider.len() as f64,
            segments,
        })
    }

    pub fn cider_d_x100(&self) -> f64 {
        100.0 * self.cider_d
    }

    pub const CSV_HEADER: &'static str = "count,bleu1,bleu4,rouge_l,cider_d,cider_d_x100";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.count,
            self.bleu1,
            self.bleu4,
            self.rouge_l,
            self.cider_d,
            self.cider_d_x100()
        )
    }

    /// Per-segment CSV with a header row.
    pub fn segments_csv(&self) -> String {
        let quote = |s: &str| format!("\"{}\"", s.replace('"', "\"\""));
        let mut out = String::from("index,candidate,reference,rouge_l,cider_d\n");
        for (i, s) in self.segments.iter().enumerate() {
            out.push_str(&format!(
                "{i},{},{},{:.6},{:.6}\n",
                quote(&s.candidate),
                quote(&s.reference),
                s.rouge_l,
                s.cider_d
            ));
        }
        out
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "segments  {}", self.count)?;
        writeln!(f, "BLEU-1    {:>8.2}", self.bleu1)?;
        writeln!(f, "BLEU-4    {:>8.2}", self.bleu4)?;
        writeln!(f, "ROUGE-L   {:>8.2}", self.rouge_l)?;
        write!(f, "CIDEr-D   {:>8.4}  (x100: {:.2})", self.cider_d, self.cider_d_x100())
    }
}

/// Every candidate replaced by `constant`.
pub fn constant_baseline<S: AsRef<str>>(references: &[S], constant: &str) -> Result<EvalReport> {
    let candidates = vec![constant; references.len()];
    let refs: Vec<&str> = references.iter().map(AsRef::as_ref).collect();
    EvalReport::compute(&candidates, &refs)
}

/// One annotator's timeline: `(start sentence, tag)` per segment.
pub type Timeline = Vec<(usize, String)>;

/// For every video and every annotator pair, segments whose start sentences
/// coincide contribute `(tag of first, tag of second)` to one pool.
pub fn agreement_pairs(videos: &[Vec<Timeline>]) -> Vec<(String, String)> {
    let mut pool = Vec::new();
    for annotators in videos {
        for a in 0..annotators.len() {
            for b in a + 1..annotators.len() {
                for (start, tag) in &annotators[a] {
                    if let Some((_, other)) = annotators[b].iter().find(|(s, _)| s == start) {
                        pool.push((tag.clone(), other.clone()));
                    }
                }
            }
        }
    }
    pool
}

/// Scores the agreement pool, the first annotator of each pair as prediction.
pub fn agreement_pool(videos: &[Vec<Timeline>]) -> Result<EvalReport> {
    let (cands, refs): (Vec<String>, Vec<String>) = agreement_pairs(videos).into_iter().unzip();
    EvalReport::compute(&cands, &refs)
}
