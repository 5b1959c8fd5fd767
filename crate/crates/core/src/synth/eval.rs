use std::collections::HashSet;

use pathfinding::kuhn_munkres::kuhn_munkres;
use pathfinding::matrix::Matrix;
use serde::{Deserialize, Serialize};

use super::GroundTruth;
use crate::anomaly::AnomalyEvent;
use crate::error::{Error, Result};
use crate::hdp::ActivityModel;

/// Mapping from predicted labels to truth labels maximizing agreement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelAlignment {
    /// `map[pred] = Some(truth)`; predicted labels left over map to `None`.
    pub map: Vec<Option<usize>>,
    pub agreement: usize,
}

/// Align arbitrary predicted labels to truth labels with the Hungarian
/// method on the overlap counts.
pub fn align_labels(pred: &[usize], truth: &[usize], n_truth: usize) -> Result<LabelAlignment> {
    if pred.len() != truth.len() {
        return Err(Error::invalid(format!("{} predictions for {} truth labels", pred.len(), truth.len())));
    }
    if let Some(t) = truth.iter().find(|&&t| t >= n_truth) {
        return Err(Error::invalid(format!("truth label {t} out of range")));
    }
    let n_pred = pred.iter().max().map_or(0, |m| m + 1);
    let n = n_pred.max(n_truth).max(1);
    let mut overlap = vec![vec![0i64; n]; n];
    for (&p, &t) in pred.iter().zip(truth) {
        overlap[p][t] += 1;
    }
    let m = Matrix::from_rows(overlap.clone()).expect("square rows");
    let (agreement, assign) = kuhn_munkres(&m);
    let map = (0..n_pred)
        .map(|p| {
            let t = assign[p];
            (t < n_truth && (overlap[p][t] > 0 || n_pred <= n_truth)).then_some(t)
        })
        .collect();
    Ok(LabelAlignment { map, agreement: agreement as usize })
}

/// Fraction of each truth class predicted correctly. Rows are truth classes.
pub fn per_class_accuracy(confusion: &[Vec<u64>]) -> Vec<f64> {
    confusion
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let n: u64 = row.iter().sum();
            if n == 0 {
                0.0
            } else {
                row.get(i).copied().unwrap_or(0) as f64 / n as f64
            }
        })
        .collect()
}

/// Falsely detected clips over test clips.
pub fn false_positive_rate(false_clips: usize, test_clips: usize) -> f64 {
    if test_clips == 0 {
        0.0
    } else {
        false_clips as f64 / test_clips as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema: String,
    pub n_clips: usize,
    pub alignment: Vec<Option<usize>>,
    /// `confusion[truth][pred]`; the last column counts predictions mapped
    /// to no truth state.
    pub confusion: Vec<Vec<u64>>,
    pub per_class_accuracy: Vec<f64>,
    pub average_accuracy: f64,
    pub accuracy: f64,
    pub n_injected: usize,
    pub n_detected: usize,
    pub tpr: Option<f64>,
    pub false_clips: usize,
    pub fpr: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub topic_matching: Vec<TopicMatch>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

pub const REPORT_SCHEMA: &str = "report/1";

/// Score predicted labels and anomaly events against ground truth.
/// `clip_ids[i]` is the clip behind `pred[i]` and `truth.state_seq[i]`.
pub fn evaluate(pred: &[usize], clip_ids: &[u64], truth: &GroundTruth, events: &[AnomalyEvent]) -> Result<EvalReport> {
    if pred.len() != truth.state_seq.len() || clip_ids.len() != pred.len() {
        return Err(Error::invalid(format!(
            "{} predictions, {} clip ids, {} truth labels",
            pred.len(),
            clip_ids.len(),
            truth.state_seq.len()
        )));
    }
    let n_truth = truth.n_states;
    let align = align_labels(pred, &truth.state_seq, n_truth)?;
    let mut confusion = vec![vec![0u64; n_truth + 1]; n_truth];
    let mut correct = 0;
    for (&p, &t) in pred.iter().zip(&truth.state_seq) {
        let col = align.map[p].unwrap_or(n_truth);
        confusion[t][col] += 1;
        correct += (col == t) as usize;
    }
    let per_class = per_class_accuracy(&confusion);
    let present: Vec<f64> =
        per_class.iter().zip(&confusion).filter(|(_, r)| r.iter().sum::<u64>() > 0).map(|(a, _)| *a).collect();
    let average_accuracy = if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 };

    let n_detected = truth
        .anomalies
        .iter()
        .filter(|a| events.iter().any(|e| e.kind == a.kind && a.covers(e.clip_id)))
        .count();
    let n_injected = truth.anomalies.len();
    let mut flagged: Vec<u64> = events.iter().map(|e| e.clip_id).collect();
    flagged.sort_unstable();
    flagged.dedup();
    let test_clips: HashSet<u64> = clip_ids.iter().copied().collect();
    let false_clips = flagged
        .iter()
        .filter(|c| test_clips.contains(c))
        .filter(|&&c| !truth.anomalies.iter().any(|a| a.covers(c)))
        .count();
    Ok(EvalReport {
        schema: REPORT_SCHEMA.into(),
        n_clips: pred.len(),
        alignment: align.map,
        confusion,
        per_class_accuracy: per_class,
        average_accuracy,
        accuracy: if pred.is_empty() { 1.0 } else { correct as f64 / pred.len() as f64 },
        n_injected,
        n_detected,
        tpr: (n_injected > 0).then(|| n_detected as f64 / n_injected as f64),
        false_clips,
        fpr: false_positive_rate(false_clips, pred.len()),
        topic_matching: Vec::new(),
        config_hash: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicMatch {
    pub planted: usize,
    /// Matched learned topic; `None` when learned topics ran out.
    pub learned: Option<usize>,
    pub cosine: f64,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Greedy max-cosine matching without replacement, one entry per planted
/// distribution in planted order.
pub fn match_distributions(learned: &[Vec<f64>], planted: &[Vec<f64>]) -> Vec<TopicMatch> {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (p, pv) in planted.iter().enumerate() {
        for (l, lv) in learned.iter().enumerate() {
            pairs.push((cosine(lv, pv), p, l));
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut out: Vec<TopicMatch> =
        (0..planted.len()).map(|p| TopicMatch { planted: p, learned: None, cosine: 0.0 }).collect();
    let mut used = vec![false; learned.len()];
    for (c, p, l) in pairs {
        if out[p].learned.is_none() && !used[l] {
            out[p] = TopicMatch { planted: p, learned: Some(l), cosine: c };
            used[l] = true;
        }
    }
    out
}

/// Match the model's typical activities to planted distributions.
pub fn match_topics(model: &ActivityModel, planted: &[Vec<f64>]) -> Vec<TopicMatch> {
    let learned: Vec<Vec<f64>> = model.typical.iter().map(|&k| model.phi[k].clone()).collect();
    match_distributions(&learned, planted)
        .into_iter()
        .map(|m| TopicMatch { learned: m.learned.map(|i| model.typical[i]), ..m })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anomaly::AnomalyKind;
    use crate::synth::{InjectedAnomaly, TRUTH_SCHEMA};
    use proptest::prelude::*;

    fn truth(seq: Vec<usize>, n: usize) -> GroundTruth {
        let len = seq.len();
        GroundTruth {
            schema: TRUTH_SCHEMA.into(),
            n_states: n,
            state_seq: seq,
            mixtures: vec![vec![]; len],
            anomalies: vec![],
            config_hash: None,
        }
    }

    #[test]
    fn perfect_prediction() {
        let gt = truth(vec![0, 1, 1, 2, 0], 3);
        let ids: Vec<u64> = (0..5).collect();
        let r = evaluate(&gt.state_seq, &ids, &gt, &[]).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.fpr, 0.0);
        assert_eq!(r.confusion, vec![vec![2, 0, 0, 0], vec![0, 2, 0, 0], vec![0, 0, 1, 0]]);
        assert!(r.tpr.is_none());
    }

    #[test]
    fn table_row_accuracy_and_fpr_examples() {
        let acc = per_class_accuracy(&[vec![610, 4, 5, 0, 3]]);
        assert!((acc[0] - 610.0 / 622.0).abs() < 1e-12);
        assert!((acc[0] - 0.981).abs() < 5e-4);
        let fpr = false_positive_rate(18, 699);
        assert!((fpr - 0.0257).abs() < 1e-4);
        assert_eq!((fpr * 1000.0).round(), 26.0);
    }

    #[test]
    fn length_mismatch_rejected() {
        let gt = truth(vec![0, 1], 2);
        assert!(evaluate(&[0], &[0], &gt, &[]).is_err());
    }

    #[test]
    fn tpr_counts_events_once_and_fpr_excludes_spans() {
        let mut gt = truth(vec![0; 10], 1);
        gt.anomalies = vec![
            InjectedAnomaly {
                clip_id: 2,
                kind: AnomalyKind::IllegalTransition,
                first_clip: 2,
                last_clip: 3,
                cells: vec![],
                detail: None,
            },
            InjectedAnomaly {
                clip_id: 6,
                kind: AnomalyKind::RareMotion,
                first_clip: 6,
                last_clip: 6,
                cells: vec![],
                detail: None,
            },
        ];
        let ev = |clip_id, kind| AnomalyEvent { clip_id, kind, score: 1.0, locations: vec![], detail: vec![] };
        let events = vec![
            ev(2, AnomalyKind::IllegalTransition),
            ev(3, AnomalyKind::IllegalTransition),
            ev(6, AnomalyKind::ConflictingActivity),
            ev(8, AnomalyKind::RareMotion),
        ];
        let ids: Vec<u64> = (0..10).collect();
        let r = evaluate(&[0; 10], &ids, &gt, &events).unwrap();
        assert_eq!(r.n_detected, 1);
        assert_eq!(r.tpr, Some(0.5));
        assert_eq!(r.false_clips, 1);
        assert!((r.fpr - 0.1).abs() < 1e-12);
    }

    #[test]
    fn topic_matching_extremes() {
        let a = vec![vec![0.5, 0.5, 0.0, 0.0], vec![0.0, 0.0, 1.0, 0.0]];
        let m = match_distributions(&a, &a);
        assert!(m.iter().all(|x| (x.cosine - 1.0).abs() < 1e-12));
        assert_eq!(m[1].learned, Some(1));
        let b = vec![vec![0.0, 0.0, 0.0, 1.0]];
        let m = match_distributions(&b, &a);
        assert!(m.iter().all(|x| x.cosine == 0.0));
    }

    proptest! {
        #[test]
        fn alignment_invariant_to_label_renaming(
            seq in proptest::collection::vec(0usize..4, 1..60),
            noise in proptest::collection::vec(0usize..4, 1..60),
            perm_seed in 0u64..24,
        ) {
            let n = seq.len().min(noise.len());
            let truth_seq = &seq[..n];
            let pred: Vec<usize> = truth_seq.iter().zip(&noise).map(|(&t, &z)| if z == 0 { (t + 1) % 4 } else { t }).collect();
            let mut perm: Vec<usize> = (0..4).collect();
            let mut s = perm_seed;
            for i in (1..4).rev() {
                perm.swap(i, (s % (i as u64 + 1)) as usize);
                s /= i as u64 + 1;
            }
            let renamed: Vec<usize> = pred.iter().map(|&p| perm[p]).collect();
            let a = align_labels(&pred, truth_seq, 4).unwrap();
            let b = align_labels(&renamed, truth_seq, 4).unwrap();
            prop_assert_eq!(a.agreement, b.agreement);
            let ids: Vec<u64> = (0..n as u64).collect();
            let gt = truth(truth_seq.to_vec(), 4);
            let ra = evaluate(&pred, &ids, &gt, &[]).unwrap();
            let rb = evaluate(&renamed, &ids, &gt, &[]).unwrap();
            prop_assert_eq!(ra.accuracy, rb.accuracy);
            for (i, row) in ra.confusion.iter().enumerate() {
                prop_assert_eq!(row.iter().sum::<u64>(), truth_seq.iter().filter(|&&t| t == i).count() as u64);
            }
        }
    }
}
