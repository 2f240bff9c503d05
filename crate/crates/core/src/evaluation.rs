//! Metrics over prediction streams: AUROC, ECE, NLL, accuracy and
//! shared-edge score histograms.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{PscError, Result};
use crate::scalar::{argmax, Scalar};

pub const DEFAULT_ECE_BINS: usize = 15;
pub const DEFAULT_HISTOGRAM_BINS: usize = 50;
pub const PROBABILITY_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    IdClean,
    IdAmbiguous,
    Ood,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::IdClean, Group::IdAmbiguous, Group::Ood];

    pub fn as_str(self) -> &'static str {
        match self {
            Group::IdClean => "id_clean",
            Group::IdAmbiguous => "id_ambiguous",
            Group::Ood => "ood",
        }
    }

    pub fn is_in_distribution(self) -> bool {
        self != Group::Ood
    }
}

/// One scored prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSample<T: Scalar> {
    pub sample_id: u64,
    pub group: Group,
    pub label: Option<usize>,
    pub probabilities: Option<Vec<T>>,
    /// Feature log-density; higher means more in-distribution.
    pub log_density: Option<T>,
    pub entropy: T,
}

fn check_finite<T: Scalar>(values: &[T], what: &str) -> Result<()> {
    if values.iter().any(|v| !v.is_finite_value()) {
        return Err(PscError::InvalidInput(format!("non-finite {what}")));
    }
    Ok(())
}

/// Probability that a positive score exceeds a negative one, ties counting
/// one half. Computed from average ranks in `O(n log n)`.
pub fn auroc<T: Scalar>(positive: &[T], negative: &[T]) -> Result<T> {
    if positive.is_empty() || negative.is_empty() {
        return Err(PscError::InvalidInput("AUROC needs non-empty positive and negative groups".into()));
    }
    check_finite(positive, "score")?;
    check_finite(negative, "score")?;
    let mut all: Vec<(T, bool)> = positive
        .iter()
        .map(|&s| (s, true))
        .chain(negative.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite scores"));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their average
        let avg = (i + j + 2) as f64 / 2.0;
        let hits = all[i..=j].iter().filter(|e| e.1).count();
        rank_sum += avg * hits as f64;
        i = j + 1;
    }
    let (np, nn) = (positive.len() as f64, negative.len() as f64);
    let u = rank_sum - np * (np + 1.0) / 2.0;
    Ok(T::of(u / (np * nn)))
}

/// Index of the right-closed bin `((b)/B, (b+1)/B]` holding `confidence`;
/// zero goes to the first bin.
pub fn confidence_bin<T: Scalar>(confidence: T, bins: usize) -> usize {
    let b = T::from_usize_lossy(bins);
    let edge = |k: usize| T::from_usize_lossy(k) / b;
    let guess = (confidence * b).ceil().to_f64_lossy();
    let mut idx = if guess.is_finite() && guess >= 1.0 { guess as usize - 1 } else { 0 };
    idx = idx.min(bins - 1);
    // the product can round across an edge; settle against the literal edges
    while idx > 0 && confidence <= edge(idx) {
        idx -= 1;
    }
    while idx + 1 < bins && confidence > edge(idx + 1) {
        idx += 1;
    }
    idx
}

fn check_predictions<T: Scalar>(probabilities: &[Vec<T>], labels: &[usize]) -> Result<usize> {
    if probabilities.is_empty() {
        return Err(PscError::InvalidInput("no predictions".into()));
    }
    if probabilities.len() != labels.len() {
        return Err(PscError::Shape(format!(
            "{} predictions for {} labels",
            probabilities.len(),
            labels.len()
        )));
    }
    let classes = probabilities[0].len();
    for (i, (p, &y)) in probabilities.iter().zip(labels).enumerate() {
        if p.len() != classes {
            return Err(PscError::Shape(format!("prediction {i} has {} classes, expected {classes}", p.len())));
        }
        if y >= classes {
            return Err(PscError::InvalidInput(format!("label {y} out of range for {classes} classes")));
        }
        check_finite(p, "probability")?;
    }
    Ok(classes)
}

/// Expected calibration error over `bins` equal-width confidence bins.
pub fn ece<T: Scalar>(probabilities: &[Vec<T>], labels: &[usize], bins: usize) -> Result<T> {
    check_predictions(probabilities, labels)?;
    if bins == 0 {
        return Err(PscError::InvalidInput("bin count must be at least 1".into()));
    }
    let mut count = vec![0usize; bins];
    let mut correct = vec![T::zero(); bins];
    let mut confidence = vec![T::zero(); bins];
    for (p, &y) in probabilities.iter().zip(labels) {
        let pred = argmax(p);
        let conf = p[pred];
        let b = confidence_bin(conf, bins);
        count[b] += 1;
        confidence[b] += conf;
        if pred == y {
            correct[b] += T::one();
        }
    }
    let n = T::from_usize_lossy(probabilities.len());
    let mut total = T::zero();
    for b in 0..bins {
        if count[b] > 0 {
            let nb = T::from_usize_lossy(count[b]);
            total += (nb / n) * (correct[b] / nb - confidence[b] / nb).abs();
        }
    }
    Ok(total)
}

/// Mean negative log-likelihood (probabilities floored at 1e-12) and argmax accuracy.
pub fn nll_accuracy<T: Scalar>(probabilities: &[Vec<T>], labels: &[usize]) -> Result<(T, T)> {
    check_predictions(probabilities, labels)?;
    let floor = T::of(PROBABILITY_FLOOR);
    let mut nll = T::zero();
    let mut hits = 0usize;
    for (p, &y) in probabilities.iter().zip(labels) {
        nll -= p[y].max(floor).ln();
        if argmax(p) == y {
            hits += 1;
        }
    }
    let n = T::from_usize_lossy(labels.len());
    Ok((nll / n, T::from_usize_lossy(hits) / n))
}

/// Per-group counts over shared equal-width bins; the last bin is closed.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram<T: Scalar> {
    pub edges: Vec<T>,
    pub counts: Vec<(String, Vec<usize>)>,
}

impl<T: Scalar> Histogram<T> {
    pub fn bin_count(&self) -> usize {
        self.edges.len() - 1
    }

    /// `group,bin_left,bin_right,count`, groups in input order.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("group,bin_left,bin_right,count\n");
        for (name, counts) in &self.counts {
            for (b, c) in counts.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{name},{},{},{c}",
                    self.edges[b].to_f64_lossy(),
                    self.edges[b + 1].to_f64_lossy()
                );
            }
        }
        out
    }
}

pub fn entropy_histogram<T: Scalar>(groups: &[(&str, &[T])], bins: usize) -> Result<Histogram<T>> {
    if bins == 0 {
        return Err(PscError::InvalidInput("bin count must be at least 1".into()));
    }
    for (name, scores) in groups {
        check_finite(scores, "histogram score")?;
        if scores.is_empty() {
            warn!("histogram group {name} is empty");
        }
    }
    let all = groups.iter().flat_map(|(_, s)| s.iter().copied());
    let (lo, hi) = all.fold(None, |acc: Option<(T, T)>, v| match acc {
        None => Some((v, v)),
        Some((a, b)) => Some((a.min(v), b.max(v))),
    })
    .unwrap_or((T::zero(), T::zero()));
    let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - T::of(0.5), lo + T::of(0.5)) };
    let b = T::from_usize_lossy(bins);
    let edges: Vec<T> = (0..=bins)
        .map(|k| if k == bins { hi } else { lo + (hi - lo) * T::from_usize_lossy(k) / b })
        .collect();
    let counts = groups
        .iter()
        .map(|(name, scores)| {
            let mut counts = vec![0usize; bins];
            for &s in scores.iter() {
                let guess = ((s - lo) / (hi - lo) * b).floor().to_f64_lossy();
                let mut idx = (guess.max(0.0) as usize).min(bins - 1);
                while idx > 0 && s < edges[idx] {
                    idx -= 1;
                }
                while idx + 1 < bins && s >= edges[idx + 1] {
                    idx += 1;
                }
                counts[idx] += 1;
            }
            (name.to_string(), counts)
        })
        .collect();
    Ok(Histogram { edges, counts })
}

/// Flat metric map plus the entropy histogram.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport<T: Scalar> {
    pub metrics: BTreeMap<String, f64>,
    pub histogram: Histogram<T>,
}

impl<T: Scalar> MetricReport<T> {
    /// Pretty JSON with sorted keys and a trailing newline.
    pub fn metrics_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.metrics).expect("finite metrics serialize");
        s.push('\n');
        s
    }
}

/// Computes every metric the inputs support.
///
/// Classification metrics use labelled in-distribution samples with
/// probabilities. `auroc_id_ood` ranks log-density with in-distribution as the
/// positive class; `auroc_id_ambiguous` ranks entropy with the ambiguous group
/// as positive. Keys are omitted when a group is missing.
pub fn evaluate<T: Scalar>(samples: &[ScoredSample<T>], ece_bins: usize, histogram_bins: usize) -> Result<MetricReport<T>> {
    let mut probs = Vec::new();
    let mut labels = Vec::new();
    for s in samples.iter().filter(|s| s.group.is_in_distribution()) {
        if let (Some(p), Some(y)) = (&s.probabilities, s.label) {
            probs.push(p.clone());
            labels.push(y);
        }
    }
    let mut metrics = BTreeMap::new();
    if !probs.is_empty() {
        let (nll, acc) = nll_accuracy(&probs, &labels)?;
        metrics.insert("accuracy".to_string(), acc.to_f64_lossy());
        metrics.insert("nll".to_string(), nll.to_f64_lossy());
        metrics.insert("ece".to_string(), ece(&probs, &labels, ece_bins)?.to_f64_lossy());
    }

    let density = |pred: fn(Group) -> bool| -> Vec<T> {
        samples.iter().filter(|s| pred(s.group)).filter_map(|s| s.log_density).collect()
    };
    let id_density = density(Group::is_in_distribution);
    let ood_density = density(|g| g == Group::Ood);
    if !id_density.is_empty() && !ood_density.is_empty() {
        metrics.insert("auroc_id_ood".to_string(), auroc(&id_density, &ood_density)?.to_f64_lossy());
    }

    let entropies = |g: Group| -> Vec<T> { samples.iter().filter(|s| s.group == g).map(|s| s.entropy).collect() };
    let grouped: Vec<(Group, Vec<T>)> = Group::ALL.iter().map(|&g| (g, entropies(g))).collect();
    let clean = &grouped[0].1;
    let ambiguous = &grouped[1].1;
    if !clean.is_empty() && !ambiguous.is_empty() {
        metrics.insert("auroc_id_ambiguous".to_string(), auroc(ambiguous, clean)?.to_f64_lossy());
    }

    let present: Vec<(&str, &[T])> = grouped
        .iter()
        .filter(|(_, v)| !v.is_empty())
        .map(|(g, v)| (g.as_str(), v.as_slice()))
        .collect();
    let histogram = entropy_histogram(&present, histogram_bins)?;
    Ok(MetricReport { metrics, histogram })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auroc_fixtures() {
        assert_eq!(auroc(&[0.9_f64, 0.8], &[0.7, 0.85]).unwrap(), 0.75);
        assert_eq!(auroc(&[0.5_f64, 0.5], &[0.5, 0.0]).unwrap(), 0.75);
        assert_eq!(auroc(&[1.0_f64; 3], &[1.0; 4]).unwrap(), 0.5);
        assert_eq!(auroc(&[2.0_f64, 3.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert!(auroc::<f64>(&[], &[1.0]).is_err());
    }

    #[test]
    fn ece_hand_fixture() {
        let probs = vec![vec![0.1_f64, 0.9], vec![0.6, 0.4]];
        let e = ece(&probs, &[1, 1], 15).unwrap();
        assert!((e - 0.35).abs() < 1e-15, "{e}");
        let perfect = vec![vec![1.0_f64, 0.0]; 3];
        assert_eq!(ece(&perfect, &[0, 0, 0], 15).unwrap(), 0.0);
    }

    #[test]
    fn bins_are_right_closed() {
        assert_eq!(confidence_bin(0.0_f64, 15), 0);
        assert_eq!(confidence_bin(1.0_f64 / 15.0, 15), 0);
        assert_eq!(confidence_bin(1.0_f64, 15), 14);
        assert_eq!(confidence_bin(0.5_f64, 2), 0);
        assert_eq!(confidence_bin(0.5000001_f64, 2), 1);
    }

    #[test]
    fn uniform_nll_is_log_classes() {
        let probs = vec![vec![0.25_f64; 4]; 5];
        let (nll, acc) = nll_accuracy(&probs, &[0, 1, 2, 3, 0]).unwrap();
        assert!((nll - 4f64.ln()).abs() < 1e-12);
        assert!((acc - 0.4).abs() < 1e-15);
        assert!(nll_accuracy(&probs, &[0, 1, 2, 3, 4]).is_err());
    }

    #[test]
    fn histogram_constant_scores() {
        let h = entropy_histogram(&[("a", &[0.3_f64, 0.3, 0.3][..])], 50).unwrap();
        let nonzero: Vec<_> = h.counts[0].1.iter().filter(|&&c| c > 0).collect();
        assert_eq!(nonzero, vec![&3]);
        let csv = h.to_csv();
        assert!(csv.starts_with("group,bin_left,bin_right,count\n"));
        assert_eq!(csv.lines().count(), 51);
    }

    #[test]
    fn histogram_max_lands_in_last_bin() {
        let h = entropy_histogram(&[("a", &[0.0_f64, 1.0][..]), ("b", &[][..])], 4).unwrap();
        assert_eq!(h.counts[0].1, vec![1, 0, 0, 1]);
        assert_eq!(h.counts[1].1, vec![0, 0, 0, 0]);
    }

    #[test]
    fn evaluate_omits_ood_keys_without_ood() {
        let s = |g, d: f64| ScoredSample {
            sample_id: 0,
            group: g,
            label: Some(0),
            probabilities: Some(vec![0.8_f64, 0.2]),
            log_density: Some(d),
            entropy: 0.5,
        };
        let only_id = evaluate(&[s(Group::IdClean, 1.0)], 15, 50).unwrap();
        assert!(only_id.metrics.contains_key("accuracy"));
        assert!(!only_id.metrics.contains_key("auroc_id_ood"));
        let with_ood = evaluate(&[s(Group::IdClean, 1.0), s(Group::Ood, -3.0)], 15, 50).unwrap();
        assert_eq!(with_ood.metrics["auroc_id_ood"], 1.0);
    }
}
