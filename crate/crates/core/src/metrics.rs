//! Binary classification metrics over per-segment event scores. All scores
//! are the predicted probability (or any monotone score) of the event class;
//! labels are 0/1 with 1 the event class.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub fp: u64,
    pub tn: u64,
}

/// Threshold at `thr`: predicted positive when `score >= thr`.
pub fn confusion_at(scores: &[f64], labels: &[u8], thr: f64) -> Confusion {
    assert_eq!(
        scores.len(),
        labels.len(),
        "metrics: scores vs labels length"
    );
    let mut c = Confusion::default();
    for (&s, &y) in scores.iter().zip(labels) {
        match (s >= thr, y != 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    c
}

/// `tp / (tp + fn)`; undefined (None) without positive cases.
pub fn sensitivity(c: &Confusion) -> Option<f64> {
    let denom = c.tp + c.fn_;
    (denom > 0).then(|| c.tp as f64 / denom as f64)
}

/// `tn / (tn + fp)`; undefined (None) without negative cases.
pub fn specificity(c: &Confusion) -> Option<f64> {
    let denom = c.tn + c.fp;
    (denom > 0).then(|| c.tn as f64 / denom as f64)
}

/// Per-class F1 weighted by class support. A class with zero support drops
/// out of the average; a class whose F1 denominator is zero counts as 0.
pub fn weighted_f1(c: &Confusion) -> f64 {
    let f1 = |two_tp: u64, denom: u64| {
        if denom == 0 {
            0.0
        } else {
            two_tp as f64 / denom as f64
        }
    };
    let f1_pos = f1(2 * c.tp, 2 * c.tp + c.fp + c.fn_);
    let f1_neg = f1(2 * c.tn, 2 * c.tn + c.fn_ + c.fp);
    let s_pos = (c.tp + c.fn_) as f64;
    let s_neg = (c.tn + c.fp) as f64;
    if s_pos + s_neg == 0.0 {
        return 0.0;
    }
    (s_pos * f1_pos + s_neg * f1_neg) / (s_pos + s_neg)
}

/// Area under the ROC curve, tie-aware: equals the Mann-Whitney statistic,
/// where a tied positive/negative pair contributes one half. None when
/// either class is absent.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    assert_eq!(
        scores.len(),
        labels.len(),
        "metrics: scores vs labels length"
    );
    let n_pos = labels.iter().filter(|&&y| y != 0).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[a]
            .partial_cmp(&scores[b])
            .expect("scores must be comparable")
    });
    // average ranks over tie groups, then the rank-sum statistic
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j) as f64 / 2.0; // mean of ranks i+1 ..= j
        for &idx in &order[i..j] {
            if labels[idx] != 0 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

/// Area under the precision-recall curve by step interpolation. Tied scores
/// form one group and contribute at the group's end, so reordering within a
/// tie cannot change the value. All scores tied gives the prevalence. None
/// when the positive class is absent.
pub fn auprc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    assert_eq!(
        scores.len(),
        labels.len(),
        "metrics: scores vs labels length"
    );
    let n_pos = labels.iter().filter(|&&y| y != 0).count() as f64;
    if n_pos == 0.0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("scores must be comparable")
    });
    let mut tp = 0.0f64;
    let mut fp = 0.0f64;
    let mut prev_recall = 0.0f64;
    let mut area = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        for &idx in &order[i..j] {
            if labels[idx] != 0 {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
        }
        let precision = tp / (tp + fp);
        let recall = tp / n_pos;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j;
    }
    Some(area)
}

/// Flat per-evaluation report; `sens`/`spec`/`auroc`/`auprc` are null when
/// undefined for the evaluated set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub sens: Option<f64>,
    pub spec: Option<f64>,
    pub f1_weighted: f64,
    pub auroc: Option<f64>,
    pub auprc: Option<f64>,
    pub tp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub fp: u64,
    pub tn: u64,
    pub threshold: f64,
    pub n: usize,
}

pub fn report(scores: &[f64], labels: &[u8], threshold: f64) -> MetricsReport {
    let c = confusion_at(scores, labels, threshold);
    MetricsReport {
        sens: sensitivity(&c),
        spec: specificity(&c),
        f1_weighted: weighted_f1(&c),
        auroc: auroc(scores, labels),
        auprc: auprc(scores, labels),
        tp: c.tp,
        fn_: c.fn_,
        fp: c.fp,
        tn: c.tn,
        threshold,
        n: scores.len(),
    }
}

/// Mean and sample standard deviation (n-1); sd is 0 for a single value.
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    assert!(!values.is_empty(), "mean_sd of empty slice");
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Collapses segment scores to one score per subject: the fraction of that
/// subject's segments predicted positive at `thr`. Returns (subject ids,
/// vote fractions, labels) sorted by subject id. Panics if a subject's
/// segments disagree on the label.
pub fn subject_votes(
    subjects: &[String],
    scores: &[f64],
    labels: &[u8],
    thr: f64,
) -> (Vec<String>, Vec<f64>, Vec<u8>) {
    assert!(
        subjects.len() == scores.len() && scores.len() == labels.len(),
        "subject_votes lengths"
    );
    let mut acc: BTreeMap<&String, (u64, u64, u8)> = BTreeMap::new();
    for ((sid, &s), &y) in subjects.iter().zip(scores).zip(labels) {
        let e = acc.entry(sid).or_insert((0, 0, y));
        assert_eq!(e.2, y, "subject {sid} has segments with conflicting labels");
        e.0 += (s >= thr) as u64;
        e.1 += 1;
    }
    let mut ids = Vec::with_capacity(acc.len());
    let mut votes = Vec::with_capacity(acc.len());
    let mut labs = Vec::with_capacity(acc.len());
    for (sid, (pos, total, y)) in acc {
        ids.push(sid.clone());
        votes.push(pos as f64 / total as f64);
        labs.push(y);
    }
    (ids, votes, labs)
}
