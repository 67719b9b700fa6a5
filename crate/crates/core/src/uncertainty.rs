//! Response-level uncertainty scores computed from decoded generations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generate::GenerationRecord;
use crate::metrics::{normalize_text, rouge_l_single};
use crate::numeric::log_sum_exp;

/// Decides whether two sampled answers mean the same thing.
pub trait Equivalence {
    fn equivalent(&self, a: &str, b: &str) -> bool;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EquivalencePredicate {
    /// Equal after lowercasing, punctuation stripping and whitespace collapse.
    ExactNormalized,
    /// ROUGE-L F1 at least `threshold` in both directions.
    RougeThreshold { threshold: f64 },
}

impl Default for EquivalencePredicate {
    fn default() -> Self {
        EquivalencePredicate::RougeThreshold { threshold: 0.7 }
    }
}

impl Equivalence for EquivalencePredicate {
    fn equivalent(&self, a: &str, b: &str) -> bool {
        match *self {
            EquivalencePredicate::ExactNormalized => normalize_text(a) == normalize_text(b),
            EquivalencePredicate::RougeThreshold { threshold } => {
                rouge_l_single(a, b).f1 >= threshold && rouge_l_single(b, a).f1 >= threshold
            }
        }
    }
}

/// How much each semantic cluster weighs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterWeighting {
    /// Normalized sequence likelihoods.
    #[default]
    Likelihood,
    /// Sample counts.
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UncertaintyOptions {
    pub predicate: EquivalencePredicate,
    pub weighting: ClusterWeighting,
    /// Divide each sample's log-probability by its length.
    pub length_normalized: bool,
    /// Use untempered sample likelihoods instead of the sampled distribution's.
    pub untempered: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyReport {
    pub mean_token_entropy: f64,
    pub perplexity: f64,
    pub predictive_entropy: f64,
    pub semantic_entropy: f64,
    /// `1 / perplexity`.
    pub confidence: f64,
}

fn finite(values: &[f64]) -> Result<()> {
    match values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        Some((index, &value)) => Err(Error::NonFinite { index, value }),
        None => Ok(()),
    }
}

pub fn mean_token_entropy(entropies: &[f64]) -> Result<f64> {
    if entropies.is_empty() {
        return Err(Error::invalid("mean token entropy of an empty response"));
    }
    finite(entropies)?;
    Ok(entropies.iter().sum::<f64>() / entropies.len() as f64)
}

/// `exp(-mean log p)` over the response tokens.
pub fn perplexity(token_logprobs: &[f64]) -> Result<f64> {
    if token_logprobs.is_empty() {
        return Err(Error::invalid("perplexity of an empty response"));
    }
    finite(token_logprobs)?;
    let mean = token_logprobs.iter().sum::<f64>() / token_logprobs.len() as f64;
    Ok((-mean).exp().max(1.0))
}

/// Monte-Carlo estimate `-(1/M) sum_m log p(s_m)`.
pub fn predictive_entropy(logprobs: &[f64]) -> Result<f64> {
    if logprobs.is_empty() {
        return Err(Error::invalid("predictive entropy needs at least one sample"));
    }
    finite(logprobs)?;
    Ok(-logprobs.iter().sum::<f64>() / logprobs.len() as f64)
}

/// Predictive entropy with each log-probability divided by its sample length.
pub fn predictive_entropy_normalized(logprobs: &[f64], lengths: &[usize]) -> Result<f64> {
    if lengths.len() != logprobs.len() || lengths.contains(&0) {
        return Err(Error::invalid("every sample needs a positive length"));
    }
    let per_token: Vec<f64> = logprobs.iter().zip(lengths).map(|(l, &n)| l / n as f64).collect();
    predictive_entropy(&per_token)
}

/// First-fit clustering: each text joins the first cluster whose
/// representative it matches, else founds a new one. Returns the cluster index
/// of every text.
pub fn cluster<E: Equivalence + ?Sized>(texts: &[&str], pred: &E) -> Result<Vec<usize>> {
    if let Some(t) = texts.iter().find(|t| !pred.equivalent(t, t)) {
        return Err(Error::invalid(format!("equivalence predicate is not reflexive on {t:?}")));
    }
    let mut reps: Vec<&str> = Vec::new();
    let mut assignment = Vec::with_capacity(texts.len());
    for &t in texts {
        match reps.iter().position(|r| pred.equivalent(r, t)) {
            Some(c) => assignment.push(c),
            None => {
                assignment.push(reps.len());
                reps.push(t);
            }
        }
    }
    Ok(assignment)
}

/// Entropy of the cluster masses given per-sample log-weights.
pub fn cluster_entropy(assignment: &[usize], log_weights: &[f64]) -> Result<f64> {
    if assignment.is_empty() || assignment.len() != log_weights.len() {
        return Err(Error::invalid("cluster entropy needs one weight per sample"));
    }
    finite(log_weights)?;
    let n_clusters = assignment.iter().max().map_or(0, |m| m + 1);
    let total = log_sum_exp(log_weights);
    let mut h = 0.0;
    for c in 0..n_clusters {
        let members: Vec<f64> = assignment.iter().zip(log_weights).filter(|(&a, _)| a == c).map(|(_, &w)| w).collect();
        if members.is_empty() {
            continue;
        }
        let log_p = log_sum_exp(&members) - total;
        h -= log_p.exp() * log_p;
    }
    Ok(h.max(0.0))
}

/// Entropy over clusters of equivalent samples.
pub fn semantic_entropy<E: Equivalence + ?Sized>(
    texts: &[&str],
    logprobs: &[f64],
    pred: &E,
    weighting: ClusterWeighting,
) -> Result<f64> {
    if texts.is_empty() || texts.len() != logprobs.len() {
        return Err(Error::invalid("semantic entropy needs one log-probability per sample"));
    }
    let assignment = cluster(texts, pred)?;
    match weighting {
        ClusterWeighting::Likelihood => cluster_entropy(&assignment, logprobs),
        ClusterWeighting::Uniform => cluster_entropy(&assignment, &vec![0.0; texts.len()]),
    }
}

/// All four scores for one generation record.
pub fn report(rec: &GenerationRecord, opts: &UncertaintyOptions) -> Result<UncertaintyReport> {
    let perplexity = perplexity(&rec.token_logprobs)?;
    let logprobs: Vec<f64> =
        rec.samples.iter().map(|s| if opts.untempered { s.logprob_untempered } else { s.logprob }).collect();
    let predictive_entropy = if opts.length_normalized {
        let lengths: Vec<usize> = rec.samples.iter().map(|s| s.n_steps).collect();
        predictive_entropy_normalized(&logprobs, &lengths)?
    } else {
        predictive_entropy(&logprobs)?
    };
    let texts: Vec<&str> = rec.samples.iter().map(|s| s.text.as_str()).collect();
    Ok(UncertaintyReport {
        mean_token_entropy: mean_token_entropy(&rec.token_entropies)?,
        perplexity,
        predictive_entropy,
        semantic_entropy: semantic_entropy(&texts, &logprobs, &opts.predicate, opts.weighting)?,
        confidence: 1.0 / perplexity,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const EXACT: EquivalencePredicate = EquivalencePredicate::ExactNormalized;

    #[test]
    fn token_level_examples() {
        assert_eq!(mean_token_entropy(&[0.0, 0.0]).unwrap(), 0.0);
        assert!((mean_token_entropy(&[4f64.ln(), 0.0]).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert!(mean_token_entropy(&[]).is_err());
        assert!((perplexity(&[0.5f64.ln(); 3]).unwrap() - 2.0).abs() < 1e-12);
        assert!((perplexity(&[(1.0f64 / 16.0).ln(); 2]).unwrap() - 16.0).abs() < 1e-12);
        assert!((perplexity(&[0.5f64.ln(), 0.25f64.ln()]).unwrap() - 8f64.sqrt()).abs() < 1e-12);
        assert!(perplexity(&[]).is_err());
    }

    #[test]
    fn predictive_examples() {
        assert_eq!(predictive_entropy(&[-1.0; 5]).unwrap(), 1.0);
        assert_eq!(predictive_entropy(&[-2.3]).unwrap(), 2.3);
        assert!((predictive_entropy(&[-1.0, -2.0, -4.5]).unwrap() - 2.5).abs() < 1e-15);
        assert!(predictive_entropy(&[f64::NEG_INFINITY]).is_err());
        assert!(predictive_entropy(&[]).is_err());
        assert_eq!(predictive_entropy_normalized(&[-2.0, -6.0], &[2, 3]).unwrap(), 1.5);
    }

    #[test]
    fn semantic_examples() {
        let lp = [-1.0; 5];
        let same = ["paris"; 5];
        assert_eq!(semantic_entropy(&same, &lp, &EXACT, ClusterWeighting::Likelihood).unwrap(), 0.0);
        let distinct = ["a", "b", "c", "d", "e"];
        let h = semantic_entropy(&distinct, &lp, &EXACT, ClusterWeighting::Likelihood).unwrap();
        assert!((h - 5f64.ln()).abs() < 1e-12);
        let split = ["red", "Red.", "red", "blue", "blue "];
        let h = semantic_entropy(&split, &lp, &EXACT, ClusterWeighting::Likelihood).unwrap();
        assert!((h - 0.67301).abs() < 1e-5);
        let u = semantic_entropy(&split, &[-1.0, -9.0, -3.0, -0.5, -2.0], &EXACT, ClusterWeighting::Uniform).unwrap();
        assert!((u - h).abs() < 1e-12);
    }

    #[test]
    fn likelihood_weighting_uses_sample_mass() {
        // cluster masses e^-1 + e^-1 versus e^-3
        let h = semantic_entropy(&["a", "a", "b"], &[-1.0, -1.0, -3.0], &EXACT, ClusterWeighting::Likelihood).unwrap();
        let w = [2.0 * (-1f64).exp(), (-3f64).exp()];
        let p: Vec<f64> = w.iter().map(|x| x / (w[0] + w[1])).collect();
        assert!((h - -(p[0] * p[0].ln() + p[1] * p[1].ln())).abs() < 1e-12);
    }

    #[test]
    fn rouge_predicate_clusters_near_paraphrases() {
        let pred = EquivalencePredicate::default();
        assert!(pred.equivalent("new haven", "new haven"));
        assert!(!pred.equivalent("new haven", "haven"));
        assert!(pred.equivalent("", ""));
        let assignment = cluster(&["port royal", "a b c d e f g h i j", "a b c d e f g h i x"], &pred).unwrap();
        assert_eq!(assignment, vec![0, 1, 1]);
    }

    struct Broken;
    impl Equivalence for Broken {
        fn equivalent(&self, a: &str, b: &str) -> bool {
            a != b
        }
    }

    #[test]
    fn irreflexive_predicate_is_rejected() {
        assert!(semantic_entropy(&["x", "y"], &[-1.0, -1.0], &Broken, ClusterWeighting::Uniform).is_err());
    }

    fn words() -> impl Strategy<Value = Vec<String>> {
        prop::collection::vec(prop::sample::select(vec!["a", "A", "a.", "b", "b c", "c", " c ", ""]), 1..7)
            .prop_map(|v| v.into_iter().map(str::to_string).collect())
    }

    proptest! {
        #[test]
        fn exact_predicate_is_an_equivalence(ws in words()) {
            for a in &ws {
                prop_assert!(EXACT.equivalent(a, a));
                for b in &ws {
                    prop_assert_eq!(EXACT.equivalent(a, b), EXACT.equivalent(b, a));
                    for c in &ws {
                        if EXACT.equivalent(a, b) && EXACT.equivalent(b, c) {
                            prop_assert!(EXACT.equivalent(a, c));
                        }
                    }
                }
            }
        }

        #[test]
        fn rouge_predicate_is_reflexive_and_symmetric(ws in words()) {
            let pred = EquivalencePredicate::default();
            for a in &ws {
                prop_assert!(pred.equivalent(a, a));
                for b in &ws {
                    prop_assert_eq!(pred.equivalent(a, b), pred.equivalent(b, a));
                }
            }
        }

        #[test]
        fn clustering_never_exceeds_distinct_entropy(
            ws in words(),
            lp in prop::collection::vec(-6.0f64..0.0, 7),
        ) {
            let texts: Vec<&str> = ws.iter().map(String::as_str).collect();
            let lp = &lp[..texts.len()];
            let h = semantic_entropy(&texts, lp, &EXACT, ClusterWeighting::Likelihood).unwrap();
            let distinct: Vec<usize> = (0..texts.len()).collect();
            prop_assert!(h <= cluster_entropy(&distinct, lp).unwrap() + 1e-12);
            prop_assert!(h <= (texts.len() as f64).ln() + 1e-12);
        }

        #[test]
        fn merging_clusters_never_increases_entropy(
            assignment in prop::collection::vec(0usize..4, 1..7),
            lp in prop::collection::vec(-6.0f64..0.0, 7),
            a in 0usize..4,
            b in 0usize..4,
        ) {
            let lp = &lp[..assignment.len()];
            let merged: Vec<usize> = assignment.iter().map(|&c| if c == b { a } else { c }).collect();
            prop_assert!(cluster_entropy(&merged, lp).unwrap() <= cluster_entropy(&assignment, lp).unwrap() + 1e-12);
        }
    }
}
