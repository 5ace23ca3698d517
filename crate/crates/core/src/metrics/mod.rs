//! Figures of merit for lens finders.
//!
//! Conventions shared by every function here:
//!
//! * a sample is predicted positive when `score >= threshold`;
//! * samples with equal scores cross any threshold together, so the ROC
//!   curve takes one (possibly diagonal) step per distinct score;
//! * TPR at a false-positive budget is pessimistic about ties: a tie group
//!   holding a negative cannot be split to admit only its positives.

mod io;

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

pub use io::{read_scores_csv, render_roc_svg, write_roc_csv, write_scores_csv};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub id: String,
    pub score: f64,
    pub label: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub einstein_radius: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flux_ratio: Option<f64>,
}

impl ScoredSample {
    pub fn new(id: impl Into<String>, score: f64, label: u8) -> Self {
        Self { id: id.into(), score, label, einstein_radius: None, flux_ratio: None }
    }
}

/// Builds anonymous samples from parallel score/label slices.
pub fn samples_from(scores: &[f64], labels: &[u8]) -> Vec<ScoredSample> {
    scores
        .iter()
        .zip(labels)
        .enumerate()
        .map(|(i, (&s, &l))| ScoredSample::new(i.to_string(), s, l))
        .collect()
}

fn check_samples(samples: &[ScoredSample]) -> Result<(usize, usize)> {
    if samples.is_empty() {
        return Err(Error::Contract("no samples".into()));
    }
    let mut pos = 0;
    for s in samples {
        if !s.score.is_finite() || !(0.0..=1.0).contains(&s.score) {
            return Err(Error::Contract(format!("sample {} has score {} outside [0,1]", s.id, s.score)));
        }
        match s.label {
            0 => {}
            1 => pos += 1,
            l => return Err(Error::Contract(format!("sample {} has label {l}, expected 0 or 1", s.id))),
        }
    }
    Ok((pos, samples.len() - pos))
}

fn check_both_classes(samples: &[ScoredSample]) -> Result<(usize, usize)> {
    let (pos, neg) = check_samples(samples)?;
    if pos == 0 || neg == 0 {
        return Err(Error::Contract(format!("need both classes, got {pos} positives and {neg} negatives")));
    }
    Ok((pos, neg))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub threshold: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn positives(&self) -> usize {
        self.tp + self.fn_
    }

    pub fn negatives(&self) -> usize {
        self.tn + self.fp
    }

    pub fn tpr(&self) -> Option<f64> {
        ratio(self.tp, self.positives())
    }

    pub fn fnr(&self) -> Option<f64> {
        ratio(self.fn_, self.positives())
    }

    pub fn fpr(&self) -> Option<f64> {
        ratio(self.fp, self.negatives())
    }
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn confusion(samples: &[ScoredSample], threshold: f64) -> Result<ConfusionMatrix> {
    check_samples(samples)?;
    let mut cm = ConfusionMatrix { threshold, tp: 0, fp: 0, tn: 0, fn_: 0 };
    for s in samples {
        match (s.score >= threshold, s.label == 1) {
            (true, true) => cm.tp += 1,
            (true, false) => cm.fp += 1,
            (false, false) => cm.tn += 1,
            (false, true) => cm.fn_ += 1,
        }
    }
    Ok(cm)
}

/// `(TP + TN) / (TP + FP + TN + FN)`.
pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    ratio(cm.tp + cm.tn, cm.total()).ok_or_else(|| Error::Contract("accuracy of an empty matrix".into()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// Score threshold giving this point; `None` for the (0,0) origin.
    pub threshold: Option<f64>,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub auroc: f64,
}

/// Groups of equal score in descending order as (score, positives, negatives).
fn tie_groups(samples: &[ScoredSample]) -> Vec<(f64, usize, usize)> {
    let mut sorted: Vec<(f64, u8)> = samples.iter().map(|s| (s.score, s.label)).collect();
    sorted.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal));
    let mut groups: Vec<(f64, usize, usize)> = Vec::new();
    for (score, label) in sorted {
        match groups.last_mut() {
            Some(g) if g.0 == score => {
                if label == 1 {
                    g.1 += 1
                } else {
                    g.2 += 1
                }
            }
            _ => groups.push((score, usize::from(label == 1), usize::from(label == 0))),
        }
    }
    groups
}

/// ROC curve from (0,0) to (1,1), one step per distinct score, with the
/// trapezoidal area under it.
pub fn roc_and_auroc(samples: &[ScoredSample]) -> Result<RocCurve> {
    let (pos, neg) = check_both_classes(samples)?;
    let mut points = vec![RocPoint { threshold: None, fpr: 0.0, tpr: 0.0 }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut area = 0.0;
    for (score, p, n) in tie_groups(samples) {
        let (prev_tp, prev_fp) = (tp, fp);
        tp += p;
        fp += n;
        // Trapezoid in count space, normalised once at the end.
        area += (fp - prev_fp) as f64 * (tp + prev_tp) as f64 / 2.0;
        points.push(RocPoint { threshold: Some(score), fpr: fp as f64 / neg as f64, tpr: tp as f64 / pos as f64 });
    }
    let auroc = area / (pos as f64 * neg as f64);
    Ok(RocCurve { points, auroc })
}

/// Which false-positive budget "fewer than ten false positives" means.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tpr10Reading {
    /// At most nine false positives.
    #[default]
    Strict,
    /// At most ten false positives.
    Inclusive,
}

impl Tpr10Reading {
    pub fn max_fp(self) -> usize {
        match self {
            Tpr10Reading::Strict => 9,
            Tpr10Reading::Inclusive => 10,
        }
    }
}

/// Highest TPR over all thresholds that admit at most `max_fp` false positives.
pub fn tpr_at_fp(samples: &[ScoredSample], max_fp: usize) -> Result<f64> {
    let (pos, _) = check_both_classes(samples)?;
    let (mut tp, mut fp, mut best) = (0usize, 0usize, 0usize);
    for (_, p, n) in tie_groups(samples) {
        tp += p;
        fp += n;
        if fp > max_fp {
            break;
        }
        best = tp;
    }
    Ok(best as f64 / pos as f64)
}

pub fn tpr0(samples: &[ScoredSample]) -> Result<f64> {
    tpr_at_fp(samples, 0)
}

pub fn tpr10(samples: &[ScoredSample], reading: Tpr10Reading) -> Result<f64> {
    tpr_at_fp(samples, reading.max_fp())
}

/// Support-weighted mean of per-class f1 over the classes present in `truth`.
pub fn weighted_f1(truth: &[usize], predicted: &[usize]) -> Result<f64> {
    if truth.len() != predicted.len() {
        return Err(Error::Contract(format!(
            "weighted_f1 needs equal lengths, got {} and {}",
            truth.len(),
            predicted.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::Contract("weighted_f1 of no samples".into()));
    }
    let classes = truth.iter().chain(predicted).max().unwrap() + 1;
    let (mut tp, mut pred_n, mut true_n) = (vec![0usize; classes], vec![0usize; classes], vec![0usize; classes]);
    for (&t, &p) in truth.iter().zip(predicted) {
        true_n[t] += 1;
        pred_n[p] += 1;
        if t == p {
            tp[t] += 1;
        }
    }
    let n = truth.len() as f64;
    Ok((0..classes)
        .filter(|&c| true_n[c] > 0)
        .map(|c| {
            let precision = ratio(tp[c], pred_n[c]).unwrap_or(0.0);
            let recall = tp[c] as f64 / true_n[c] as f64;
            let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
            true_n[c] as f64 / n * f1
        })
        .sum())
}

/// Metadata field used to stratify a report.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StratifyKey {
    #[serde(alias = "theta_e")]
    EinsteinRadius,
    FluxRatio,
}

impl StratifyKey {
    pub fn value(self, s: &ScoredSample) -> Option<f64> {
        match self {
            StratifyKey::EinsteinRadius => s.einstein_radius,
            StratifyKey::FluxRatio => s.flux_ratio,
        }
    }
}

impl std::str::FromStr for StratifyKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "theta_e" | "einstein_radius" => Ok(StratifyKey::EinsteinRadius),
            "flux_ratio" => Ok(StratifyKey::FluxRatio),
            other => Err(Error::Config(format!("unknown stratification key {other:?}"))),
        }
    }
}

/// Linear-interpolation quantiles (the common "type 7" definition).
pub fn quantiles(values: &[f64], probs: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    probs
        .iter()
        .map(|&p| {
            if v.is_empty() {
                return f64::NAN;
            }
            let h = p.clamp(0.0, 1.0) * (v.len() - 1) as f64;
            let (lo, hi) = (h.floor() as usize, h.ceil() as usize);
            v[lo] + (h - lo as f64) * (v[hi] - v[lo])
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinReport {
    /// Inclusive lower edge; `None` is unbounded.
    pub lower: Option<f64>,
    /// Exclusive upper edge; `None` is unbounded.
    pub upper: Option<f64>,
    pub count: usize,
    pub confusion: Vec<ConfusionMatrix>,
}

impl BinReport {
    /// False-negative rate at the `i`-th configured threshold.
    pub fn fnr(&self, i: usize) -> Option<f64> {
        self.confusion.get(i).and_then(ConfusionMatrix::fnr)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StratifiedReport {
    pub key: StratifyKey,
    pub edges: Vec<f64>,
    pub bins: Vec<BinReport>,
}

/// Splits samples into bins of `key` and reports confusion matrices per bin.
///
/// With `edges == None` the key's terciles over the positive samples are
/// used (over all samples when there are no positives), giving three bins. Bin `i` holds values in `[edges[i-1], edges[i])`.
pub fn stratified_report(
    samples: &[ScoredSample],
    key: StratifyKey,
    edges: Option<&[f64]>,
    thresholds: &[f64],
) -> Result<StratifiedReport> {
    check_samples(samples)?;
    let missing: Vec<&str> = samples.iter().filter(|s| key.value(s).is_none()).map(|s| s.id.as_str()).collect();
    if !missing.is_empty() {
        return Err(Error::Contract(format!("samples without {key:?}: {}", missing.join(", "))));
    }
    let values: Vec<f64> = samples.iter().map(|s| key.value(s).unwrap()).collect();
    let edges = match edges {
        Some(e) => e.to_vec(),
        None => {
            let pos: Vec<f64> = samples.iter().zip(&values).filter(|(s, _)| s.label == 1).map(|(_, &v)| v).collect();
            quantiles(if pos.is_empty() { &values } else { &pos }, &[1.0 / 3.0, 2.0 / 3.0])
        }
    };
    if edges.windows(2).any(|w| w[0] > w[1]) || edges.iter().any(|e| !e.is_finite()) {
        return Err(Error::Config(format!("bin edges {edges:?} must be finite and ascending")));
    }
    let mut members: Vec<Vec<ScoredSample>> = vec![Vec::new(); edges.len() + 1];
    for (s, v) in samples.iter().zip(&values) {
        let bin = edges.partition_point(|&e| e <= *v);
        members[bin].push(s.clone());
    }
    let bins = members
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let confusion = if m.is_empty() {
                thresholds.iter().map(|&t| ConfusionMatrix { threshold: t, tp: 0, fp: 0, tn: 0, fn_: 0 }).collect()
            } else {
                thresholds.iter().map(|&t| confusion(m, t)).collect::<Result<_>>()?
            };
            Ok(BinReport {
                lower: i.checked_sub(1).map(|j| edges[j]),
                upper: edges.get(i).copied(),
                count: m.len(),
                confusion,
            })
        })
        .collect::<Result<_>>()?;
    Ok(StratifiedReport { key, edges, bins })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Threshold used for the headline accuracy.
    pub accuracy_threshold: f64,
    /// Thresholds at which confusion matrices are reported.
    pub thresholds: Vec<f64>,
    pub tpr10_reading: Tpr10Reading,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { accuracy_threshold: 0.5, thresholds: vec![0.5, 0.8, 0.95, 0.999], tpr10_reading: Tpr10Reading::Strict }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub positives: usize,
    pub negatives: usize,
    pub accuracy: f64,
    pub auroc: f64,
    pub tpr0: f64,
    pub tpr10: f64,
    pub confusion: Vec<ConfusionMatrix>,
    pub roc: RocCurve,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub stratified: Vec<StratifiedReport>,
}

pub fn evaluate(samples: &[ScoredSample], opts: &EvalOptions) -> Result<EvalReport> {
    let (positives, negatives) = check_both_classes(samples)?;
    let roc = roc_and_auroc(samples)?;
    Ok(EvalReport {
        samples: samples.len(),
        positives,
        negatives,
        accuracy: accuracy(&confusion(samples, opts.accuracy_threshold)?)?,
        auroc: roc.auroc,
        tpr0: tpr0(samples)?,
        tpr10: tpr10(samples, opts.tpr10_reading)?,
        confusion: opts.thresholds.iter().map(|&t| confusion(samples, t)).collect::<Result<_>>()?,
        roc,
        stratified: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_correct_positives() {
        let s = samples_from(&[1.0; 5], &[1; 5]);
        let cm = confusion(&s, 0.5).unwrap();
        assert_eq!((cm.tp, cm.fp, cm.tn, cm.fn_), (5, 0, 0, 0));
    }

    #[test]
    fn zero_threshold_has_no_false_negatives() {
        let s = samples_from(&[0.0, 0.3, 0.9, 0.1], &[1, 0, 1, 1]);
        assert_eq!(confusion(&s, 0.0).unwrap().fn_, 0);
    }

    #[test]
    fn empty_input_is_a_contract_error() {
        assert!(matches!(confusion(&[], 0.5), Err(Error::Contract(_))));
    }

    #[test]
    fn accuracy_formula() {
        let cm = ConfusionMatrix { threshold: 0.5, tp: 5, fp: 0, tn: 5, fn_: 0 };
        assert_eq!(accuracy(&cm).unwrap(), 1.0);
        let cm = ConfusionMatrix { threshold: 0.5, tp: 3, fp: 1, tn: 5, fn_: 1 };
        assert!((accuracy(&cm).unwrap() - 0.8).abs() < 1e-15);
        let cm = ConfusionMatrix { threshold: 0.5, tp: 0, fp: 0, tn: 0, fn_: 0 };
        assert!(accuracy(&cm).is_err());
    }

    #[test]
    fn perfect_separation_gives_unit_auroc() {
        let s = samples_from(&[0.9, 0.8, 0.3, 0.1], &[1, 1, 0, 0]);
        let roc = roc_and_auroc(&s).unwrap();
        assert_eq!(roc.auroc, 1.0);
        let first = roc.points.first().unwrap();
        let last = roc.points.last().unwrap();
        assert_eq!((first.fpr, first.tpr, last.fpr, last.tpr), (0.0, 0.0, 1.0, 1.0));
    }

    #[test]
    fn full_tie_is_the_diagonal() {
        let s = samples_from(&[0.5; 6], &[1, 0, 1, 0, 1, 0]);
        assert_eq!(roc_and_auroc(&s).unwrap().auroc, 0.5);
        assert_eq!(tpr0(&s).unwrap(), 0.0);
    }

    #[test]
    fn single_class_is_rejected() {
        let s = samples_from(&[0.2, 0.4], &[1, 1]);
        assert!(roc_and_auroc(&s).is_err());
        assert!(tpr_at_fp(&s, 0).is_err());
    }

    #[test]
    fn tpr0_example() {
        let s = samples_from(&[0.9, 0.8, 0.7, 0.1], &[1, 1, 0, 0]);
        assert_eq!(tpr0(&s).unwrap(), 1.0);
        let s = samples_from(&[0.95, 0.9, 0.8, 0.1], &[0, 1, 1, 0]);
        assert_eq!(tpr0(&s).unwrap(), 0.0);
    }

    #[test]
    fn tpr10_readings_differ_at_the_tenth_fp() {
        // 10 negatives on top, then one positive, then one more positive.
        let mut scores = vec![0.99; 10];
        scores.extend([0.5, 0.4]);
        let mut labels = vec![0u8; 10];
        labels.extend([1, 0]);
        let s = samples_from(&scores, &labels);
        assert_eq!(tpr10(&s, Tpr10Reading::Strict).unwrap(), 0.0);
        let mut distinct = s.clone();
        for (i, x) in distinct.iter_mut().take(10).enumerate() {
            x.score = 0.9 + i as f64 * 0.001;
        }
        assert_eq!(tpr10(&distinct, Tpr10Reading::Strict).unwrap(), 0.0);
        assert_eq!(tpr10(&distinct, Tpr10Reading::Inclusive).unwrap(), 1.0);
    }

    #[test]
    fn weighted_f1_cases() {
        assert_eq!(weighted_f1(&[0, 1, 2, 1], &[0, 1, 2, 1]).unwrap(), 1.0);
        let truth = [0, 1, 2, 0, 1, 2];
        let f = weighted_f1(&truth, &[0; 6]).unwrap();
        assert!((f - 1.0 / 6.0).abs() < 1e-15);
        assert!(weighted_f1(&[0, 1], &[0]).is_err());
    }

    #[test]
    fn single_bin_equals_global() {
        let mut s = samples_from(&[0.9, 0.2, 0.6, 0.4], &[1, 0, 1, 1]);
        for (i, x) in s.iter_mut().enumerate() {
            x.flux_ratio = Some(i as f64);
        }
        let r = stratified_report(&s, StratifyKey::FluxRatio, Some(&[]), &[0.5]).unwrap();
        assert_eq!(r.bins.len(), 1);
        assert_eq!(r.bins[0].confusion[0], confusion(&s, 0.5).unwrap());
    }

    #[test]
    fn missing_metadata_lists_ids() {
        let mut s = samples_from(&[0.9, 0.2], &[1, 0]);
        s[0].einstein_radius = Some(1.0);
        let err = stratified_report(&s, StratifyKey::EinsteinRadius, None, &[0.5]).unwrap_err();
        assert!(err.to_string().contains('1'));
    }

    #[test]
    fn quartiles_interpolate() {
        let q = quantiles(&[1.0, 2.0, 3.0, 4.0, 5.0], &[0.25, 0.75]);
        assert_eq!(q, vec![2.0, 4.0]);
    }
}
