//! Post-hoc analysis: the performance-deficit (DUB) report derived from a
//! run log, token accuracy, and corpus BLEU.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::train::RunLog;

#[derive(Debug, Clone, PartialEq)]
pub struct LangDub {
    pub language: String,
    /// Dev loss of this language at the overall best checkpoint.
    pub overall_best_dev_loss: f64,
    /// This language's own minimum dev loss across epochs.
    pub language_best_dev_loss: f64,
    pub gap: f64,
    /// Epoch whose validation first turned the distillation switch on
    /// (end of the initial training stage); absent if it never turned on.
    pub k_prime: Option<u32>,
    /// Epoch of this language's own best dev loss (ties to the earliest).
    pub best_epoch: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DubReport {
    pub langs: Vec<LangDub>,
    pub total_dub: f64,
    pub overall_best_epoch: u32,
}

/// DUB(theta, {theta_hat_l}) = sum_l ( L(theta*, D_l^dev) - L(theta_hat_l, D_l^dev) ).
pub fn compute_dub(log: &RunLog) -> Result<DubReport> {
    if log.epochs.is_empty() || log.languages.is_empty() {
        return Err(Error::InvalidArgument("run log has no epoch records".into()));
    }
    // Overall best epoch: argmin of the average dev loss, earliest on ties.
    let overall = log
        .epochs
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| a.avg_dev_loss.partial_cmp(&b.avg_dev_loss).unwrap())
        .map(|(i, _)| i)
        .unwrap();
    let overall_best_epoch = log.epochs[overall].epoch;

    let mut langs = Vec::with_capacity(log.languages.len());
    let mut total = 0.0;
    for (l, name) in log.languages.iter().enumerate() {
        let at_overall = log.epochs[overall].langs[l].dev_loss;
        let (best_idx, _) = log
            .epochs
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| {
                a.langs[l].dev_loss.partial_cmp(&b.langs[l].dev_loss).unwrap()
            })
            .unwrap();
        let best = log.epochs[best_idx].langs[l].dev_loss;
        let gap = at_overall - best;
        // Non-negativity is structural: the overall-best epoch is one of the
        // epochs the minimum ranges over.
        assert!(gap >= 0.0, "negative DUB gap for {name}: {gap}");
        total += gap;
        langs.push(LangDub {
            language: name.clone(),
            overall_best_dev_loss: at_overall,
            language_best_dev_loss: best,
            gap,
            k_prime: log.first_switch_on_epoch(l),
            best_epoch: log.epochs[best_idx].epoch,
        });
    }
    Ok(DubReport { langs, total_dub: total, overall_best_epoch })
}

impl DubReport {
    /// One `language gap k' best_epoch` line per language, then a total line.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for l in &self.langs {
            let kp = l.k_prime.map(|k| k.to_string()).unwrap_or_else(|| "-".into());
            writeln!(out, "{} {} {} {}", l.language, l.gap, kp, l.best_epoch).unwrap();
        }
        writeln!(out, "total {}", self.total_dub).unwrap();
        out
    }
}

/// Pooled positional accuracy; positions beyond the shorter sequence count
/// as mismatches, so the denominator is the max length of each pair.
pub fn token_accuracy(hypotheses: &[Vec<u32>], references: &[Vec<u32>]) -> Result<f64> {
    if hypotheses.is_empty() {
        return Err(Error::InvalidArgument("empty corpus".into()));
    }
    if hypotheses.len() != references.len() {
        return Err(Error::InvalidArgument(format!(
            "hypothesis/reference count mismatch: {} vs {}",
            hypotheses.len(),
            references.len()
        )));
    }
    let mut matched = 0usize;
    let mut positions = 0usize;
    for (h, r) in hypotheses.iter().zip(references) {
        matched += h.iter().zip(r).filter(|(a, b)| a == b).count();
        positions += h.len().max(r.len());
    }
    if positions == 0 {
        return Ok(1.0); // all pairs empty: vacuously perfect
    }
    Ok(matched as f64 / positions as f64)
}

fn ngram_counts(seq: &[u32], n: usize) -> HashMap<&[u32], usize> {
    let mut counts = HashMap::new();
    if seq.len() >= n {
        for window in seq.windows(n) {
            *counts.entry(window).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU in [0, 100]: geometric mean of modified n-gram
/// precisions for n <= max_n times the brevity penalty. With `floor_smoothing`
/// off, any zero precision makes the score exactly 0; with it on, zero
/// match counts are floored at 0.5 (tiny-corpus aid).
pub fn corpus_bleu(
    hypotheses: &[Vec<u32>],
    references: &[Vec<u32>],
    max_n: usize,
    floor_smoothing: bool,
) -> Result<f64> {
    if hypotheses.is_empty() {
        return Err(Error::InvalidArgument("empty corpus".into()));
    }
    if hypotheses.len() != references.len() {
        return Err(Error::InvalidArgument(format!(
            "hypothesis/reference count mismatch: {} vs {}",
            hypotheses.len(),
            references.len()
        )));
    }
    if max_n == 0 {
        return Err(Error::InvalidArgument("max_n must be >= 1".into()));
    }
    let hyp_len: usize = hypotheses.iter().map(Vec::len).sum();
    let ref_len: usize = references.iter().map(Vec::len).sum();
    if hyp_len == 0 {
        return Ok(0.0);
    }

    let mut log_sum = 0.0;
    let mut orders = 0usize;
    for n in 1..=max_n {
        let mut clipped = 0usize;
        let mut total = 0usize;
        for (h, r) in hypotheses.iter().zip(references) {
            let rc = ngram_counts(r, n);
            for (gram, &hc) in &ngram_counts(h, n) {
                clipped += hc.min(rc.get(gram).copied().unwrap_or(0));
            }
            total += h.len().saturating_sub(n - 1);
        }
        if total == 0 {
            // Every hypothesis is shorter than n tokens; this order carries
            // no evidence and is left out of the geometric mean.
            continue;
        }
        let numerator = if clipped == 0 {
            if !floor_smoothing {
                return Ok(0.0);
            }
            0.5
        } else {
            clipped as f64
        };
        log_sum += (numerator / total as f64).ln();
        orders += 1;
    }
    if orders == 0 {
        return Ok(0.0);
    }
    let precision = (log_sum / orders as f64).exp();
    let bp = if hyp_len < ref_len { (1.0 - ref_len as f64 / hyp_len as f64).exp() } else { 1.0 };
    Ok(100.0 * precision * bp)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LangEval {
    pub language: String,
    pub token_accuracy: f64,
    pub bleu: f64,
    pub sentences: usize,
}

/// Per-language evaluation of one checkpoint on one split.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub checkpoint: String,
    pub split: String,
    pub langs: Vec<LangEval>,
}

impl EvalReport {
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        writeln!(out, "checkpoint = {}", self.checkpoint).unwrap();
        writeln!(out, "split = {}", self.split).unwrap();
        for l in &self.langs {
            writeln!(out, "lang.{}.token_accuracy = {}", l.language, l.token_accuracy).unwrap();
            writeln!(out, "lang.{}.bleu = {}", l.language, l.bleu).unwrap();
            writeln!(out, "lang.{}.sentences = {}", l.language, l.sentences).unwrap();
        }
        out
    }

    pub fn from_kv(text: &str, origin: &str) -> Result<Self> {
        let malformed =
            |reason: String| Error::Malformed { path: origin.to_string(), reason };
        let mut checkpoint = None;
        let mut split = None;
        let mut langs: Vec<LangEval> = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| malformed(format!("line without '=': {line:?}")))?;
            match key {
                "checkpoint" => checkpoint = Some(value.to_string()),
                "split" => split = Some(value.to_string()),
                _ => {
                    let rest = key
                        .strip_prefix("lang.")
                        .ok_or_else(|| malformed(format!("unknown key {key:?}")))?;
                    let (name, field) = rest
                        .rsplit_once('.')
                        .ok_or_else(|| malformed(format!("unknown key {key:?}")))?;
                    if langs.last().map(|l| l.language.as_str()) != Some(name) {
                        langs.push(LangEval {
                            language: name.to_string(),
                            token_accuracy: 0.0,
                            bleu: 0.0,
                            sentences: 0,
                        });
                    }
                    let entry = langs.last_mut().unwrap();
                    let bad = |f: &str| malformed(format!("bad value for {f}: {value:?}"));
                    match field {
                        "token_accuracy" => {
                            entry.token_accuracy =
                                value.parse().map_err(|_| bad("token_accuracy"))?
                        }
                        "bleu" => entry.bleu = value.parse().map_err(|_| bad("bleu"))?,
                        "sentences" => {
                            entry.sentences = value.parse().map_err(|_| bad("sentences"))?
                        }
                        other => return Err(malformed(format!("unknown field {other:?}"))),
                    }
                }
            }
        }
        Ok(EvalReport {
            checkpoint: checkpoint.ok_or_else(|| malformed("missing checkpoint key".into()))?,
            split: split.ok_or_else(|| malformed("missing split key".into()))?,
            langs,
        })
    }

    pub fn render_table(&self) -> String {
        let mut out = String::new();
        writeln!(out, "checkpoint: {}  split: {}", self.checkpoint, self.split).unwrap();
        writeln!(out, "{:<12} {:>10} {:>10} {:>10}", "language", "tok_acc", "bleu", "sents")
            .unwrap();
        for l in &self.langs {
            writeln!(
                out,
                "{:<12} {:>10.4} {:>10.3} {:>10}",
                l.language, l.token_accuracy, l.bleu, l.sentences
            )
            .unwrap();
        }
        out
    }
}
