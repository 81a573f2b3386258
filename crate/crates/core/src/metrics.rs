//! Deterministic text-overlap metrics, implemented from their
//! definitions: BLEU-1..4 (no smoothing), ROUGE-1/2 F1, ROUGE-L, and a
//! simplified exact-match METEOR ("meteor-lite"). All scores are on a
//! 0..100 scale against a single reference.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::assembly::tokenize;
use crate::corpus::DatasetSplit;
use crate::error::{Error, Result};

fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<&[String], usize> {
    let mut counts: BTreeMap<&[String], usize> = BTreeMap::new();
    if tokens.len() >= n && n > 0 {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// Geometric mean of clipped n-gram precisions (1..=`max_n`) times the
/// brevity penalty, times 100. Any zero precision zeroes the score;
/// there is no smoothing, so short hypotheses score 0 for n-gram
/// orders they cannot fill.
pub fn bleu(hypothesis: &[String], reference: &[String], max_n: usize) -> f64 {
    assert!((1..=4).contains(&max_n), "bleu order must be 1..=4");
    assert!(!reference.is_empty(), "bleu needs a non-empty reference");
    if hypothesis.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let hyp_grams = ngram_counts(hypothesis, n);
        let total: usize = hyp_grams.values().sum();
        if total == 0 {
            return 0.0;
        }
        let ref_grams = ngram_counts(reference, n);
        let clipped: usize = hyp_grams
            .iter()
            .map(|(gram, &c)| c.min(ref_grams.get(gram).copied().unwrap_or(0)))
            .sum();
        if clipped == 0 {
            return 0.0;
        }
        log_sum += (clipped as f64 / total as f64).ln();
    }
    let precision = (log_sum / max_n as f64).exp();
    let h = hypothesis.len() as f64;
    let r = reference.len() as f64;
    let brevity = if h >= r { 1.0 } else { (1.0 - r / h).exp() };
    100.0 * precision * brevity
}

/// F1 of n-gram multiset overlap, times 100. A reference shorter than
/// `n` scores 0.
pub fn rouge_n(hypothesis: &[String], reference: &[String], n: usize) -> f64 {
    assert!((1..=2).contains(&n), "rouge_n order must be 1 or 2");
    if reference.len() < n {
        return 0.0;
    }
    let hyp_grams = ngram_counts(hypothesis, n);
    let ref_grams = ngram_counts(reference, n);
    let hyp_total: usize = hyp_grams.values().sum();
    let ref_total: usize = ref_grams.values().sum();
    if hyp_total == 0 {
        return 0.0;
    }
    let overlap: usize = hyp_grams
        .iter()
        .map(|(gram, &c)| c.min(ref_grams.get(gram).copied().unwrap_or(0)))
        .sum();
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / hyp_total as f64;
    let r = overlap as f64 / ref_total as f64;
    100.0 * 2.0 * p * r / (p + r)
}

/// Longest common subsequence length by dynamic programming.
pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut dp = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in 0..a.len() {
        for j in 0..b.len() {
            dp[i + 1][j + 1] = if a[i] == b[j] {
                dp[i][j] + 1
            } else {
                dp[i + 1][j].max(dp[i][j + 1])
            };
        }
    }
    dp[a.len()][b.len()]
}

/// LCS-based F-measure (`F = 2PR/(P+R)`), times 100.
pub fn rouge_l(hypothesis: &[String], reference: &[String]) -> f64 {
    if hypothesis.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(hypothesis, reference) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let p = lcs / hypothesis.len() as f64;
    let r = lcs / reference.len() as f64;
    100.0 * 2.0 * p * r / (p + r)
}

/// Simplified METEOR: exact unigram matches under a greedy leftmost
/// alignment, recall-weighted harmonic mean (9:1), and the standard
/// chunk fragmentation penalty `0.5·(chunks/m)³`. No stemming or
/// synonymy, so values are not comparable with full METEOR
/// implementations.
pub fn meteor_lite(hypothesis: &[String], reference: &[String]) -> f64 {
    if hypothesis.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let mut used = vec![false; reference.len()];
    // alignment[i] = matched reference position for hypothesis token i
    let mut alignment: Vec<Option<usize>> = vec![None; hypothesis.len()];
    for (i, token) in hypothesis.iter().enumerate() {
        for (j, ref_token) in reference.iter().enumerate() {
            if !used[j] && token == ref_token {
                used[j] = true;
                alignment[i] = Some(j);
                break;
            }
        }
    }
    let m = alignment.iter().flatten().count();
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / hypothesis.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let f_mean = 10.0 * p * r / (r + 9.0 * p);

    let mut chunks = 0usize;
    let mut prev: Option<usize> = None;
    for entry in &alignment {
        match entry {
            Some(j) => {
                if prev != Some(j.wrapping_sub(1)) {
                    chunks += 1;
                }
                prev = Some(*j);
            }
            None => prev = None,
        }
    }
    let penalty = 0.5 * (chunks as f64 / m as f64).powi(3);
    100.0 * f_mean * (1.0 - penalty)
}

/// Corpus-level report: per-sample scores averaged arithmetically.
/// The METEOR column is the exact-match simplification above.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct MetricReport {
    pub b1: f64,
    pub b2: f64,
    pub b3: f64,
    pub b4: f64,
    pub r1: f64,
    pub r2: f64,
    pub rl: f64,
    pub meteor_lite: f64,
}

impl MetricReport {
    pub fn for_pair(hypothesis: &[String], reference: &[String]) -> MetricReport {
        MetricReport {
            b1: bleu(hypothesis, reference, 1),
            b2: bleu(hypothesis, reference, 2),
            b3: bleu(hypothesis, reference, 3),
            b4: bleu(hypothesis, reference, 4),
            r1: rouge_n(hypothesis, reference, 1),
            r2: rouge_n(hypothesis, reference, 2),
            rl: rouge_l(hypothesis, reference),
            meteor_lite: meteor_lite(hypothesis, reference),
        }
    }

    /// Aligned text table; the METEOR row is marked as the lite
    /// variant so its numbers are not mistaken for full METEOR.
    pub fn render_table(&self) -> String {
        let rows = [
            ("BLEU-1", self.b1),
            ("BLEU-2", self.b2),
            ("BLEU-3", self.b3),
            ("BLEU-4", self.b4),
            ("ROUGE-1", self.r1),
            ("ROUGE-2", self.r2),
            ("ROUGE-L", self.rl),
            ("METEOR-lite*", self.meteor_lite),
        ];
        let mut out = String::from("metric        score\n");
        for (name, value) in rows {
            out.push_str(&format!("{name:<13} {value:>7.2}\n"));
        }
        out.push_str("* exact-match simplification; not comparable with full METEOR\n");
        out
    }
}

/// Scores every generated explanation against its reference and
/// averages. Every reference id must have a generation; missing ids
/// are reported together in one error.
pub fn evaluate_split(
    generated: &BTreeMap<String, String>,
    references: &DatasetSplit,
) -> Result<MetricReport> {
    if references.samples.is_empty() {
        return Err(Error::Evaluation("reference split is empty".into()));
    }
    let missing: Vec<&str> = references
        .samples
        .iter()
        .filter(|s| !generated.contains_key(&s.id))
        .map(|s| s.id.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Evaluation(format!(
            "missing generations for ids: {}",
            missing.join(", ")
        )));
    }
    let mut sum = MetricReport::default();
    for sample in &references.samples {
        let reference = sample.explanation.as_ref().ok_or_else(|| {
            Error::Evaluation(format!("sample '{}' has no reference explanation", sample.id))
        })?;
        let hyp_tokens = tokenize(&generated[&sample.id]);
        let ref_tokens = tokenize(reference);
        let scores = MetricReport::for_pair(&hyp_tokens, &ref_tokens);
        sum.b1 += scores.b1;
        sum.b2 += scores.b2;
        sum.b3 += scores.b3;
        sum.b4 += scores.b4;
        sum.r1 += scores.r1;
        sum.r2 += scores.r2;
        sum.rl += scores.rl;
        sum.meteor_lite += scores.meteor_lite;
    }
    let n = references.samples.len() as f64;
    Ok(MetricReport {
        b1: sum.b1 / n,
        b2: sum.b2 / n,
        b3: sum.b3 / n,
        b4: sum.b4 / n,
        r1: sum.r1 / n,
        r2: sum.r2 / n,
        rl: sum.rl / n,
        meteor_lite: sum.meteor_lite / n,
    })
}
