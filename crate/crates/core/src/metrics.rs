//! Evaluation: frame eligibility, confusion rates under two weightings,
//! end-diastolic frame matching, transition error attribution and
//! heart-rate subgroups. Diastole (label 1) is the positive class.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A frame is eligible when its label is exactly 0 or 1 and every
/// existing neighbour carries the same label.
pub fn eligibility(gt: &[f64]) -> Vec<bool> {
    let n = gt.len();
    (0..n)
        .map(|i| {
            let l = gt[i];
            (l == 0.0 || l == 1.0)
                && (i == 0 || gt[i - 1] == l)
                && (i + 1 == n || gt[i + 1] == l)
        })
        .collect()
}

/// Ground truth and binary prediction for one sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPair {
    pub id: String,
    pub gt: Vec<f64>,
    pub pred: Vec<u8>,
    pub eligible: Vec<bool>,
}

impl EvalPair {
    pub fn new(id: impl Into<String>, gt: Vec<f64>, pred: Vec<u8>) -> Result<Self> {
        if gt.len() != pred.len() {
            return Err(Error::Shape(format!(
                "{} ground-truth labels vs {} predictions",
                gt.len(),
                pred.len()
            )));
        }
        let eligible = eligibility(&gt);
        Ok(Self {
            id: id.into(),
            gt,
            pred,
            eligible,
        })
    }

    pub fn confusion(&self) -> Confusion {
        let mut c = Confusion::default();
        for i in 0..self.gt.len() {
            if self.eligible[i] {
                c.record(self.gt[i] == 1.0, self.pred[i] == 1);
            }
        }
        c
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

impl Confusion {
    pub fn record(&mut self, positive: bool, predicted_positive: bool) {
        match (positive, predicted_positive) {
            (true, true) => self.tp += 1,
            (true, false) => self.fn_ += 1,
            (false, true) => self.fp += 1,
            (false, false) => self.tn += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn merge(&mut self, other: &Confusion) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.tn += other.tn;
        self.fn_ += other.fn_;
    }

    pub fn rates(&self) -> Rates {
        Rates {
            accuracy: ratio(self.tp + self.tn, self.total()),
            sensitivity: ratio(self.tp, self.tp + self.fn_),
            specificity: ratio(self.tn, self.tn + self.fp),
            ppv: ratio(self.tp, self.tp + self.fp),
            npv: ratio(self.tn, self.tn + self.fn_),
        }
    }
}

/// Rates are absent when their denominator is empty.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Rates {
    pub accuracy: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub ppv: Option<f64>,
    pub npv: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// Every sequence counts once: per-sequence rates are averaged.
    PerAngiography,
    /// Every frame counts once: confusion tables are pooled.
    PerFrame,
}

/// Running mean of the defined values; exact when all values are equal.
fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (mean, n) = values
        .flatten()
        .fold((0.0, 0usize), |(m, n), v| (m + (v - m) / (n + 1) as f64, n + 1));
    (n > 0).then_some(mean)
}

pub fn confusion_metrics(pairs: &[EvalPair], weighting: Weighting) -> Result<Rates> {
    let tables: Vec<Confusion> = pairs.iter().map(EvalPair::confusion).collect();
    if tables.iter().all(|c| c.total() == 0) {
        return Err(Error::EmptyEvaluation);
    }
    Ok(match weighting {
        Weighting::PerFrame => {
            let mut pooled = Confusion::default();
            for t in &tables {
                pooled.merge(t);
            }
            pooled.rates()
        }
        Weighting::PerAngiography => {
            let rates: Vec<Rates> = tables
                .iter()
                .filter(|c| c.total() > 0)
                .map(Confusion::rates)
                .collect();
            Rates {
                accuracy: mean_defined(rates.iter().map(|r| r.accuracy)),
                sensitivity: mean_defined(rates.iter().map(|r| r.sensitivity)),
                specificity: mean_defined(rates.iter().map(|r| r.specificity)),
                ppv: mean_defined(rates.iter().map(|r| r.ppv)),
                npv: mean_defined(rates.iter().map(|r| r.npv)),
            }
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdfSource {
    /// Diastolic frame followed by a systolic frame.
    Prediction,
    /// Diastolic frame followed by a systolic or intermediate frame.
    GroundTruth,
}

pub fn edf_frames(labels: &[f64], source: EdfSource) -> Vec<usize> {
    labels
        .windows(2)
        .enumerate()
        .filter(|(_, w)| {
            w[0] == 1.0
                && match source {
                    EdfSource::Prediction => w[1] == 0.0,
                    EdfSource::GroundTruth => (0.0..1.0).contains(&w[1]),
                }
        })
        .map(|(i, _)| i)
        .collect()
}

pub fn edf_frames_binary(labels: &[u8]) -> Vec<usize> {
    let as_f: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
    edf_frames(&as_f, EdfSource::Prediction)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdfScore {
    pub matched: usize,
    pub predicted: usize,
    pub truth: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl EdfScore {
    /// Empty denominators give 1 when both sides are empty and 0 otherwise.
    pub fn from_counts(matched: usize, predicted: usize, truth: usize) -> Self {
        let both_empty = predicted == 0 && truth == 0;
        let frac = |den: usize| {
            if den > 0 {
                matched as f64 / den as f64
            } else if both_empty {
                1.0
            } else {
                0.0
            }
        };
        let precision = frac(predicted);
        let recall = frac(truth);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            matched,
            predicted,
            truth,
            precision,
            recall,
            f1,
        }
    }

    pub fn pooled(scores: &[EdfScore]) -> Self {
        let (m, p, t) = scores.iter().fold((0, 0, 0), |(m, p, t), s| {
            (m + s.matched, p + s.predicted, t + s.truth)
        });
        Self::from_counts(m, p, t)
    }
}

/// Number of one-to-one matches within `tol` frames. Predictions are taken
/// in increasing order, each claiming the earliest unmatched ground truth
/// in range; on sorted inputs this yields a maximum matching.
pub fn edf_match_count(pred: &[usize], gt: &[usize], tol: usize) -> usize {
    let mut used = vec![false; gt.len()];
    let mut matched = 0;
    let mut start = 0;
    for &p in pred {
        while start < gt.len() && gt[start] + tol < p {
            start += 1;
        }
        if let Some(j) = (start..gt.len())
            .take_while(|&j| gt[j] <= p + tol)
            .find(|&j| !used[j])
        {
            used[j] = true;
            matched += 1;
        }
    }
    matched
}

pub fn edf_match(pred: &[usize], gt: &[usize], tol: usize) -> EdfScore {
    EdfScore::from_counts(edf_match_count(pred, gt, tol), pred.len(), gt.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransitionKind {
    SystoleToDiastole,
    DiastoleToSystole,
}

/// Ground-truth transitions as `(j, kind)`, lying between frames `j` and `j + 1`
/// of the labels thresholded at 0.5.
pub fn transitions(gt: &[f64]) -> Vec<(usize, TransitionKind)> {
    gt.windows(2)
        .enumerate()
        .filter_map(|(j, w)| {
            let (a, b) = (w[0] >= 0.5, w[1] >= 0.5);
            match (a, b) {
                (false, true) => Some((j, TransitionKind::SystoleToDiastole)),
                (true, false) => Some((j, TransitionKind::DiastoleToSystole)),
                _ => None,
            }
        })
        .collect()
}

/// Transition nearest to frame `i`; ties go to the preceding one.
pub fn nearest_transition(trans: &[(usize, TransitionKind)], i: usize) -> Option<TransitionKind> {
    let dist = |j: usize| (2 * i as i64 - (2 * j as i64 + 1)).abs();
    let mut best: Option<(i64, TransitionKind)> = None;
    for &(j, kind) in trans {
        let d = dist(j);
        if best.is_none_or(|(bd, _)| d < bd) {
            best = Some((d, kind));
        }
    }
    best.map(|(_, k)| k)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TransitionSplit {
    pub errors: usize,
    /// Errors in sequences without any transition are not attributed.
    pub unattributed: usize,
    pub systole_to_diastole: Option<f64>,
    pub diastole_to_systole: Option<f64>,
}

pub fn transition_error_split(pairs: &[EvalPair]) -> TransitionSplit {
    let (mut sd, mut ds, mut errors) = (0usize, 0usize, 0usize);
    for p in pairs {
        let trans = transitions(&p.gt);
        for i in 0..p.gt.len() {
            if !p.eligible[i] || (p.gt[i] == 1.0) == (p.pred[i] == 1) {
                continue;
            }
            errors += 1;
            match nearest_transition(&trans, i) {
                Some(TransitionKind::SystoleToDiastole) => sd += 1,
                Some(TransitionKind::DiastoleToSystole) => ds += 1,
                None => {}
            }
        }
    }
    let attributed = sd + ds;
    let frac = |k: usize| (attributed > 0).then(|| k as f64 / attributed as f64);
    TransitionSplit {
        errors,
        unattributed: errors - attributed,
        systole_to_diastole: frac(sd),
        diastole_to_systole: frac(ds),
    }
}

/// Lower edges of the heart-rate bins; the last bin is open-ended.
pub const HR_BIN_EDGES: [f64; 6] = [30.0, 55.0, 65.0, 75.0, 85.0, 95.0];

/// Bin of a heart rate, `None` below 30 bpm. Bins are half-open `[lo, hi)`.
pub fn hr_bin_index(bpm: f64) -> Option<usize> {
    if !(bpm >= HR_BIN_EDGES[0]) {
        return None;
    }
    Some(HR_BIN_EDGES.iter().rposition(|&lo| bpm >= lo).expect("above first edge"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeartRateBin {
    pub label: String,
    pub count: usize,
    pub share: f64,
    pub mean_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeartRateTable {
    pub bins: Vec<HeartRateBin>,
    pub out_of_range: HeartRateBin,
}

fn bin_label(i: usize) -> String {
    match HR_BIN_EDGES.get(i + 1) {
        Some(hi) => format!("{}-{}", HR_BIN_EDGES[i], hi),
        None => format!(">={}", HR_BIN_EDGES[i]),
    }
}

/// Groups per-sequence accuracies by heart rate.
pub fn heart_rate_bins(results: &[(f64, Option<f64>)]) -> HeartRateTable {
    let total = results.len();
    let make = |label: String, members: Vec<Option<f64>>| HeartRateBin {
        label,
        count: members.len(),
        share: if total > 0 {
            members.len() as f64 / total as f64
        } else {
            0.0
        },
        mean_accuracy: mean_defined(members.into_iter()),
    };
    let mut groups: Vec<Vec<Option<f64>>> = vec![Vec::new(); HR_BIN_EDGES.len()];
    let mut outside = Vec::new();
    for &(bpm, acc) in results {
        match hr_bin_index(bpm) {
            Some(i) => groups[i].push(acc),
            None => {
                log::warn!("heart rate {bpm:.1} bpm is below the lowest bin");
                outside.push(acc);
            }
        }
    }
    HeartRateTable {
        bins: groups
            .into_iter()
            .enumerate()
            .map(|(i, g)| make(bin_label(i), g))
            .collect(),
        out_of_range: make("<30".into(), outside),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eligibility_examples() {
        assert_eq!(
            eligibility(&[1.0, 1.0, 1.0, 0.5, 0.0, 0.0]),
            vec![true, true, false, false, false, true]
        );
        assert!(eligibility(&[0.0; 5]).iter().all(|e| *e));
        assert_eq!(eligibility(&[1.0, 0.0]), vec![false, false]);
    }

    fn pair(acc_frames: usize, wrong: usize) -> EvalPair {
        let gt = vec![1.0; acc_frames];
        let pred = (0..acc_frames).map(|i| u8::from(i >= wrong)).collect();
        EvalPair::new("s", gt, pred).unwrap()
    }

    #[test]
    fn weightings_differ_as_expected() {
        let pairs = vec![pair(10, 0), pair(30, 15)];
        let a = confusion_metrics(&pairs, Weighting::PerAngiography).unwrap();
        let f = confusion_metrics(&pairs, Weighting::PerFrame).unwrap();
        assert_eq!(a.accuracy, Some(0.75));
        assert_eq!(f.accuracy, Some(0.625));
    }

    #[test]
    fn perfect_predictions_score_one() {
        let gt = vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0];
        let pred = gt.iter().map(|&g| g as u8).collect();
        let pairs = vec![EvalPair::new("a", gt, pred).unwrap()];
        for w in [Weighting::PerAngiography, Weighting::PerFrame] {
            let r = confusion_metrics(&pairs, w).unwrap();
            for v in [r.accuracy, r.sensitivity, r.specificity, r.ppv, r.npv] {
                assert_eq!(v, Some(1.0));
            }
        }
    }

    #[test]
    fn no_eligible_frames_is_an_error() {
        let pairs = vec![EvalPair::new("a", vec![1.0, 0.0], vec![1, 0]).unwrap()];
        assert!(matches!(
            confusion_metrics(&pairs, Weighting::PerFrame),
            Err(Error::EmptyEvaluation)
        ));
    }

    #[test]
    fn edf_extraction_examples() {
        let pred = [1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0];
        assert_eq!(edf_frames(&pred, EdfSource::Prediction), vec![1, 6]);
        assert_eq!(edf_frames(&[1.0, 0.3, 0.0, 1.0], EdfSource::GroundTruth), vec![0]);
        assert!(edf_frames(&[1.0; 6], EdfSource::GroundTruth).is_empty());
    }

    #[test]
    fn edf_matching_examples() {
        let s = edf_match(&[5, 20], &[6, 20], 1);
        assert_eq!((s.precision, s.recall, s.f1), (1.0, 1.0, 1.0));
        let s = edf_match(&[5], &[8], 1);
        assert_eq!((s.precision, s.recall, s.f1), (0.0, 0.0, 0.0));
        let s = edf_match(&[], &[], 1);
        assert_eq!((s.precision, s.recall, s.f1), (1.0, 1.0, 1.0));
        // A greedy choice of the nearest ground truth would lose a match here.
        assert_eq!(edf_match_count(&[5, 6], &[5, 7], 1), 2);
    }

    #[test]
    fn transition_split_examples() {
        let gt = vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0];
        let mut pred: Vec<u8> = gt.iter().map(|&g| g as u8).collect();
        pred[2] = 1;
        let s = transition_error_split(&[EvalPair::new("a", gt.clone(), pred.clone()).unwrap()]);
        assert_eq!(s.systole_to_diastole, Some(1.0));
        assert_eq!(s.diastole_to_systole, Some(0.0));
        pred[9] = 1;
        let s = transition_error_split(&[EvalPair::new("a", gt.clone(), pred).unwrap()]);
        assert_eq!(s.systole_to_diastole, Some(0.5));
        let ok: Vec<u8> = gt.iter().map(|&g| g as u8).collect();
        let s = transition_error_split(&[EvalPair::new("a", gt, ok).unwrap()]);
        assert_eq!((s.errors, s.systole_to_diastole), (0, None));
    }

    #[test]
    fn nearest_transition_ties_go_backwards() {
        let t = vec![(1, TransitionKind::SystoleToDiastole), (4, TransitionKind::DiastoleToSystole)];
        // Frame 3 is 1.5 from the first and 1.5 from the second.
        assert_eq!(nearest_transition(&t, 3), Some(TransitionKind::SystoleToDiastole));
        assert_eq!(nearest_transition(&t, 4), Some(TransitionKind::DiastoleToSystole));
    }

    #[test]
    fn heart_rate_bin_edges() {
        assert_eq!(hr_bin_index(60.0), Some(1));
        assert_eq!(hr_bin_index(95.0), Some(5));
        assert_eq!(hr_bin_index(54.999), Some(0));
        assert_eq!(hr_bin_index(29.0), None);
        let t = heart_rate_bins(&[(60.0, Some(0.9)), (62.0, Some(0.7)), (20.0, None)]);
        assert_eq!(t.bins[1].count, 2);
        assert!((t.bins[1].mean_accuracy.unwrap() - 0.8).abs() < 1e-12);
        assert_eq!(t.bins[0].count, 0);
        assert_eq!(t.bins[0].mean_accuracy, None);
        assert_eq!(t.out_of_range.count, 1);
        assert_eq!(t.bins[5].label, ">=95");
    }
}
