//! Text-quality and calibration metrics.
//!
//! Scores passed to the ranking metrics are uncertainties: higher means the
//! model is less sure, and "positive" marks the event the score should
//! detect (an incorrect answer or an out-of-domain prompt).

use std::cmp::Ordering;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::uncertainty::UncertaintyReport;

/// Lowercases, replaces punctuation with spaces and collapses whitespace.
pub fn normalize_text(s: &str) -> String {
    let cleaned: String =
        s.chars().map(|c| if c.is_ascii_punctuation() { ' ' } else { c }).flat_map(char::to_lowercase).collect();
    cleaned.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn tokens(s: &str) -> Vec<String> {
    normalize_text(s).split(' ').filter(|t| !t.is_empty()).map(str::to_string).collect()
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
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

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// ROUGE-L between one candidate and one reference. Two empty texts score 1.
pub fn rouge_l_single(candidate: &str, reference: &str) -> RougeScore {
    let (c, r) = (tokens(candidate), tokens(reference));
    if c.is_empty() && r.is_empty() {
        return RougeScore { precision: 1.0, recall: 1.0, f1: 1.0 };
    }
    if c.is_empty() || r.is_empty() {
        return RougeScore { precision: 0.0, recall: 0.0, f1: 0.0 };
    }
    let lcs = lcs_len(&c, &r) as f64;
    let precision = lcs / c.len() as f64;
    let recall = lcs / r.len() as f64;
    let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
    RougeScore { precision, recall, f1 }
}

/// Best ROUGE-L (by F1) over `references`, first one on ties.
pub fn rouge_l<S: AsRef<str>>(candidate: &str, references: &[S]) -> Result<RougeScore> {
    let mut best: Option<RougeScore> = None;
    for r in references {
        let s = rouge_l_single(candidate, r.as_ref());
        if best.is_none_or(|b| s.f1 > b.f1) {
            best = Some(s);
        }
    }
    best.ok_or_else(|| Error::invalid("no reference answers"))
}

/// Accurate when the best ROUGE-L F1 is strictly above 0.3.
pub fn is_accurate<S: AsRef<str>>(candidate: &str, references: &[S]) -> Result<bool> {
    Ok(rouge_l(candidate, references)?.f1 > ACCURACY_THRESHOLD)
}

pub const ACCURACY_THRESHOLD: f64 = 0.3;

pub fn exact_match<S: AsRef<str>>(candidate: &str, references: &[S]) -> bool {
    let c = normalize_text(candidate);
    references.iter().any(|r| normalize_text(r.as_ref()) == c)
}

fn check_scores(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Shape { expected: format!("{} labels", scores.len()), actual: labels.len().to_string() });
    }
    if let Some((index, &value)) = scores.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite { index, value });
    }
    Ok(())
}

/// Indices sorted by descending score, then by position.
fn descending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    idx
}

/// Runs of equal score in `order`.
fn tie_groups<'a>(scores: &'a [f64], order: &'a [usize]) -> impl Iterator<Item = &'a [usize]> + 'a {
    order.chunk_by(move |&a, &b| scores[a] == scores[b])
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half.
pub fn auroc(scores: &[f64], positives: &[bool]) -> Result<f64> {
    check_scores(scores, positives)?;
    let n_pos = positives.iter().filter(|&&p| p).count() as u64;
    let n_neg = positives.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::invalid("AUROC needs at least one positive and one negative"));
    }
    // sweep from the lowest score up, counting twice the number of wins
    let mut order = descending(scores);
    order.reverse();
    let (mut neg_below, mut twice_wins) = (0u64, 0u64);
    for group in tie_groups(scores, &order) {
        let pos = group.iter().filter(|&&i| positives[i]).count() as u64;
        let neg = group.len() as u64 - pos;
        twice_wins += 2 * pos * neg_below + pos * neg;
        neg_below += neg;
    }
    Ok(twice_wins as f64 / (2 * n_pos * n_neg) as f64)
}

/// Step-wise average precision, tied scores entering together.
pub fn aupr(scores: &[f64], positives: &[bool]) -> Result<f64> {
    check_scores(scores, positives)?;
    let n_pos = positives.iter().filter(|&&p| p).count();
    if n_pos == 0 {
        return Err(Error::invalid("AUPR needs at least one positive"));
    }
    let order = descending(scores);
    let (mut tp, mut seen, mut area) = (0usize, 0usize, 0.0);
    for group in tie_groups(scores, &order) {
        let pos = group.iter().filter(|&&i| positives[i]).count();
        tp += pos;
        seen += group.len();
        area += (pos as f64 / n_pos as f64) * (tp as f64 / seen as f64);
    }
    Ok(area)
}

/// Mean accuracy over the `N` rejection levels `k = 0..N`, rejecting the `k`
/// most uncertain records first. When the cut falls inside a group of tied
/// uncertainties, the retained part of that group contributes its average
/// correctness, as if ties were broken uniformly at random.
pub fn auarc(uncertainties: &[f64], correct: &[bool]) -> Result<f64> {
    check_scores(uncertainties, correct)?;
    let n = correct.len();
    if n == 0 {
        return Err(Error::invalid("AUARC of an empty set"));
    }
    let order = descending(uncertainties);
    let groups: Vec<&[usize]> = tie_groups(uncertainties, &order).collect();
    let total_correct = correct.iter().filter(|&&c| c).count() as f64;
    let mut sum = 0.0;
    let mut rejected_correct = 0.0;
    let mut k = 0;
    for group in groups {
        let g = group.len();
        let g_correct = group.iter().filter(|&&i| correct[i]).count() as f64;
        for j in 0..g {
            let retained = (n - k - j) as f64;
            let partial = g_correct * j as f64 / g as f64;
            sum += (total_correct - rejected_correct - partial) / retained;
        }
        rejected_correct += g_correct;
        k += g;
    }
    Ok(sum / n as f64)
}

/// ROC curve as `(false positive rate, true positive rate)` points, from
/// `(0, 0)` to `(1, 1)`, lowering the threshold one tie group at a time.
pub fn roc_curve(scores: &[f64], positives: &[bool]) -> Result<Vec<(f64, f64)>> {
    check_scores(scores, positives)?;
    let n_pos = positives.iter().filter(|&&p| p).count() as f64;
    let n_neg = positives.len() as f64 - n_pos;
    if n_pos == 0.0 || n_neg == 0.0 {
        return Err(Error::invalid("ROC curve needs at least one positive and one negative"));
    }
    let order = descending(scores);
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut points = vec![(0.0, 0.0)];
    for group in tie_groups(scores, &order) {
        let pos = group.iter().filter(|&&i| positives[i]).count() as f64;
        tp += pos;
        fp += group.len() as f64 - pos;
        points.push((fp / n_neg, tp / n_pos));
    }
    Ok(points)
}

/// Accuracy-rejection curve: `(fraction rejected, accuracy of the rest)` for
/// `k = 0..N` records rejected, most uncertain first, ties broken by position.
/// Its mean height is close to, but not exactly, [`auarc`] when scores tie.
pub fn rejection_curve(uncertainties: &[f64], correct: &[bool]) -> Result<Vec<(f64, f64)>> {
    check_scores(uncertainties, correct)?;
    let n = correct.len();
    if n == 0 {
        return Err(Error::invalid("rejection curve of an empty set"));
    }
    let order = descending(uncertainties);
    let mut remaining = correct.iter().filter(|&&c| c).count();
    let mut points = Vec::with_capacity(n);
    for (k, &i) in order.iter().enumerate() {
        points.push((k as f64 / n as f64, remaining as f64 / (n - k) as f64));
        remaining -= correct[i] as usize;
    }
    Ok(points)
}

/// Expected calibration error over `n_bins` equal-width bins on `(0, 1]`.
pub fn ece(confidences: &[f64], correct: &[bool], n_bins: usize) -> Result<f64> {
    check_scores(confidences, correct)?;
    if confidences.is_empty() || n_bins == 0 {
        return Err(Error::invalid("ECE needs records and at least one bin"));
    }
    let mut count = vec![0usize; n_bins];
    let mut conf_sum = vec![0.0; n_bins];
    let mut hits = vec![0usize; n_bins];
    for (&c, &ok) in confidences.iter().zip(correct) {
        if !(c > 0.0 && c <= 1.0) {
            return Err(Error::invalid(format!("confidence {c} outside (0, 1]")));
        }
        let b = (0..n_bins).find(|&b| c <= (b + 1) as f64 / n_bins as f64).unwrap_or(n_bins - 1);
        count[b] += 1;
        conf_sum[b] += c;
        hits[b] += ok as usize;
    }
    let n = confidences.len() as f64;
    Ok((0..n_bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let m = count[b] as f64;
            (m / n) * (hits[b] as f64 / m - conf_sum[b] / m).abs()
        })
        .sum())
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_scores(x, &vec![false; y.len()])?;
    check_scores(y, &vec![false; x.len()])?;
    if x.len() < 2 {
        return Err(Error::invalid("correlation needs at least two points"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::invalid("correlation with zero variance"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks, ties sharing their mean rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order = descending(x);
    order.reverse();
    let mut ranks = vec![0.0; x.len()];
    let mut start = 0;
    for group in tie_groups(x, &order) {
        let mean = start as f64 + (group.len() as f64 + 1.0) / 2.0;
        group.iter().for_each(|&i| ranks[i] = mean);
        start += group.len();
    }
    ranks
}

pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    check_scores(x, &vec![false; y.len()])?;
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Everything the evaluation needs to know about one answered prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub response: String,
    pub references: Vec<String>,
    pub correct: bool,
    pub exact_match: bool,
    pub rouge_l: f64,
    pub ood: bool,
    pub uncertainty: UncertaintyReport,
}

impl EvalRecord {
    pub fn new(
        id: impl Into<String>,
        response: impl Into<String>,
        references: Vec<String>,
        ood: bool,
        uncertainty: UncertaintyReport,
    ) -> Result<Self> {
        let response = response.into();
        let rouge = rouge_l(&response, &references)?.f1;
        Ok(EvalRecord {
            id: id.into(),
            exact_match: exact_match(&response, &references),
            correct: rouge > ACCURACY_THRESHOLD,
            rouge_l: rouge,
            response,
            references,
            ood,
            uncertainty,
        })
    }
}

/// Names of the uncertainty scores, in report order.
pub const UNCERTAINTY_METRICS: [&str; 4] =
    ["perplexity", "mean_token_entropy", "predictive_entropy", "semantic_entropy"];

fn score(report: &UncertaintyReport, metric: &str) -> f64 {
    match metric {
        "perplexity" => report.perplexity,
        "mean_token_entropy" => report.mean_token_entropy,
        "predictive_entropy" => report.predictive_entropy,
        "semantic_entropy" => report.semantic_entropy,
        _ => unreachable!("unknown uncertainty metric {metric}"),
    }
}

/// Ranking and correlation quality of one uncertainty score. A field is
/// `None` when the data cannot define it (for example AUROC when every answer
/// is correct).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub auroc: Option<f64>,
    pub auarc: Option<f64>,
    pub spearman: Option<f64>,
    pub pearson: Option<f64>,
    pub ood_auroc: Option<f64>,
    pub ood_aupr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub n_items: usize,
    pub n_ood: usize,
    pub accuracy: f64,
    pub exact_match_rate: f64,
    pub mean_rouge_l: f64,
    /// ECE of `1 / perplexity` against correctness.
    pub ece: f64,
    pub metrics: Vec<MetricReport>,
}

/// Builds the report. In-domain records feed the correctness metrics; OOD
/// records, when present, are scored against the in-domain ones.
pub fn calibration_report(records: &[EvalRecord]) -> Result<CalibrationReport> {
    let (ood, ind): (Vec<&EvalRecord>, Vec<&EvalRecord>) = records.iter().partition(|r| r.ood);
    if ind.is_empty() {
        return Err(Error::invalid("no in-domain records to evaluate"));
    }
    let n = ind.len() as f64;
    let correct: Vec<bool> = ind.iter().map(|r| r.correct).collect();
    let incorrect: Vec<bool> = correct.iter().map(|c| !c).collect();
    let rouge: Vec<f64> = ind.iter().map(|r| r.rouge_l).collect();
    let confidences: Vec<f64> = ind.iter().map(|r| r.uncertainty.confidence).collect();

    let mut metrics = Vec::new();
    for name in UNCERTAINTY_METRICS {
        let s: Vec<f64> = ind.iter().map(|r| score(&r.uncertainty, name)).collect();
        let (ood_auroc, ood_aupr) = if ood.is_empty() {
            (None, None)
        } else {
            let all: Vec<f64> = ind.iter().chain(&ood).map(|r| score(&r.uncertainty, name)).collect();
            let labels: Vec<bool> = ind.iter().chain(&ood).map(|r| r.ood).collect();
            (auroc(&all, &labels).ok(), aupr(&all, &labels).ok())
        };
        metrics.push(MetricReport {
            metric: name.to_string(),
            auroc: auroc(&s, &incorrect).ok(),
            auarc: auarc(&s, &correct).ok(),
            spearman: spearman(&s, &rouge).ok(),
            pearson: pearson(&s, &rouge).ok(),
            ood_auroc,
            ood_aupr,
        });
    }
    Ok(CalibrationReport {
        n_items: ind.len(),
        n_ood: ood.len(),
        accuracy: correct.iter().filter(|&&c| c).count() as f64 / n,
        exact_match_rate: ind.iter().filter(|r| r.exact_match).count() as f64 / n,
        mean_rouge_l: rouge.iter().sum::<f64>() / n,
        ece: ece(&confidences, &correct, 10)?,
        metrics,
    })
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{v:.6}"))
}

impl CalibrationReport {
    /// One row per uncertainty score.
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("metric,auroc,auarc,spearman,pearson,ood_auroc,ood_aupr\n");
        for m in &self.metrics {
            let cells = [m.auroc, m.auarc, m.spearman, m.pearson, m.ood_auroc, m.ood_aupr].map(cell);
            writeln!(out, "{},{}", m.metric, cells.join(",")).expect("write to string");
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        format!(
            "n_items,n_ood,accuracy,exact_match_rate,mean_rouge_l,ece\n{},{},{:.6},{:.6},{:.6},{:.6}\n",
            self.n_items, self.n_ood, self.accuracy, self.exact_match_rate, self.mean_rouge_l, self.ece
        )
    }

    pub fn markdown(&self, title: &str) -> String {
        let mut out = format!("## {title}\n\n");
        writeln!(
            out,
            "Accuracy {:.4} | exact match {:.4} | mean ROUGE-L {:.4} | ECE {:.4} | {} items, {} ood\n",
            self.accuracy, self.exact_match_rate, self.mean_rouge_l, self.ece, self.n_items, self.n_ood
        )
        .expect("write to string");
        out.push_str("| Metric | AUROC | AUARC | Spearman | Pearson | OOD AUROC | OOD AUPR |\n");
        out.push_str("|---|---|---|---|---|---|---|\n");
        for m in &self.metrics {
            let cells = [m.auroc, m.auarc, m.spearman, m.pearson, m.ood_auroc, m.ood_aupr]
                .map(|v| v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}")));
            writeln!(out, "| {} | {} |", m.metric, cells.join(" | ")).expect("write to string");
        }
        out
    }

    pub fn metric(&self, name: &str) -> Option<&MetricReport> {
        self.metrics.iter().find(|m| m.metric == name)
    }
}
