//! Pose evaluation: object keypoint similarity (OKS), AP/AR over an OKS
//! threshold sweep with greedy confidence-order matching, and
//! head-normalized percentage of correct keypoints (PCKh).
//!
//! Matching semantics are pinned: predictions are processed in descending
//! confidence, each picks the unmatched ground truth with the highest OKS,
//! a match counts iff OKS >= threshold, and each ground truth matches at
//! most once. AP interpolates precision at 101 recall points per threshold
//! and averages over thresholds; AR averages the final recall.

use crate::data::skeleton::Skeleton;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Default medium/large area split for the desk-scale scenes.
pub const DEFAULT_AREA_BOUNDARY: f64 = 4096.0;

/// Per-joint falloff constants k_i of the similarity kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct OksParams {
    pub k: Vec<f64>,
}

impl OksParams {
    /// k_i = 2 * sigma_i, the benchmark convention for published sigmas.
    pub fn from_skeleton(skel: &Skeleton) -> Self {
        OksParams { k: skel.sigmas.iter().map(|&s| 2.0 * s).collect() }
    }

    pub fn uniform(count: usize, value: f64) -> Self {
        OksParams { k: vec![value; count] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k.is_empty() {
            return Err(Error::config("similarity constants are empty"));
        }
        if self.k.iter().any(|&k| !(k > 0.0) || !k.is_finite()) {
            return Err(Error::config(format!("non-positive similarity constant in {:?}", self.k)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct GtInstance {
    pub keypoints: Vec<(f64, f64, u8)>,
    pub area: f64,
}

#[derive(Clone, Debug)]
pub struct Prediction {
    pub keypoints: Vec<(f64, f64)>,
    pub score: f64,
}

/// One image's ground truth and predictions.
#[derive(Clone, Debug, Default)]
pub struct EvalRecord {
    pub gts: Vec<GtInstance>,
    pub preds: Vec<Prediction>,
}

/// Mean over visible keypoints of exp(-d_i^2 / (2 s^2 k_i^2)), s^2 = area.
/// Errors when no keypoint is visible: the similarity is undefined.
pub fn oks(gt: &GtInstance, pred: &[(f64, f64)], params: &OksParams) -> Result<f64> {
    let k = params.k.len();
    if gt.keypoints.len() != k || pred.len() != k {
        return Err(Error::shape(format!(
            "similarity over {} constants, gt has {} keypoints, pred {}",
            k,
            gt.keypoints.len(),
            pred.len()
        )));
    }
    if !(gt.area > 0.0) || !gt.area.is_finite() {
        return Err(Error::config(format!("instance area {} must be positive", gt.area)));
    }
    let mut sum = 0.0;
    let mut visible = 0usize;
    for i in 0..k {
        let (x, y, v) = gt.keypoints[i];
        if v == 0 {
            continue;
        }
        let dx = pred[i].0 - x;
        let dy = pred[i].1 - y;
        let e = (dx * dx + dy * dy) / (2.0 * gt.area * params.k[i] * params.k[i]);
        sum += (-e).exp();
        visible += 1;
    }
    if visible == 0 {
        return Err(Error::config("all keypoints invisible, similarity undefined"));
    }
    Ok(sum / visible as f64)
}

/// PCKh head length: 0.6 times the distance between the skeleton's head
/// pair, 0.0 when either endpoint is unlabeled (the record is then skipped).
pub fn head_length(keypoints: &[(f64, f64, u8)], skel: &Skeleton) -> f64 {
    let [a, b] = skel.head_pair;
    let (xa, ya, va) = keypoints[a];
    let (xb, yb, vb) = keypoints[b];
    if va == 0 || vb == 0 {
        return 0.0;
    }
    0.6 * ((xa - xb).powi(2) + (ya - yb).powi(2)).sqrt()
}

/// The standard sweep 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// Per-threshold APs and recalls plus the counts behind them.
#[derive(Clone, Debug)]
pub struct ThresholdSweep {
    pub thresholds: Vec<f64>,
    pub aps: Vec<f64>,
    pub recalls: Vec<f64>,
    /// Ground-truth instances actually scored (visible, inside the bucket).
    pub npig: usize,
    pub total_preds: usize,
    /// Ground truths dropped because no keypoint was labeled.
    pub dropped_unlabeled_gt: usize,
    /// True when there was nothing to score: no ground truth and no
    /// predictions. AP and AR are then pinned to 1.
    pub degenerate: bool,
}

struct RecordEval {
    /// oks[g][p] over kept ground truths and all predictions.
    oks: Vec<Vec<f64>>,
    /// Bucketed-out ground truths: matchable, but matches score nothing.
    ignore: Vec<bool>,
    conf: Vec<f64>,
    /// Prediction indices in descending confidence (ties: lower index).
    order: Vec<usize>,
}

fn prepare_records(
    records: &[EvalRecord],
    params: &OksParams,
    bucket: Option<(f64, f64)>,
) -> Result<(Vec<RecordEval>, usize, usize, usize)> {
    let mut evals = Vec::with_capacity(records.len());
    let (mut npig, mut total_preds, mut dropped) = (0usize, 0usize, 0usize);
    for rec in records {
        let mut kept: Vec<&GtInstance> = Vec::new();
        for gt in &rec.gts {
            if gt.keypoints.iter().any(|kp| kp.2 > 0) {
                kept.push(gt);
            } else {
                dropped += 1;
            }
        }
        let ignore: Vec<bool> = kept
            .iter()
            .map(|gt| bucket.map_or(false, |(lo, hi)| !(gt.area >= lo && gt.area < hi)))
            .collect();
        npig += ignore.iter().filter(|&&ig| !ig).count();
        total_preds += rec.preds.len();

        let mut oks_matrix = Vec::with_capacity(kept.len());
        for gt in &kept {
            let mut row = Vec::with_capacity(rec.preds.len());
            for pred in &rec.preds {
                row.push(oks(gt, &pred.keypoints, params)?);
            }
            oks_matrix.push(row);
        }
        let conf: Vec<f64> = rec.preds.iter().map(|p| p.score).collect();
        if let Some(bad) = conf.iter().find(|c| !c.is_finite()) {
            return Err(Error::config(format!("non-finite prediction confidence {bad}")));
        }
        let mut order: Vec<usize> = (0..conf.len()).collect();
        order.sort_by(|&a, &b| conf[b].partial_cmp(&conf[a]).unwrap().then(a.cmp(&b)));
        evals.push(RecordEval { oks: oks_matrix, ignore, conf, order });
    }
    Ok((evals, npig, total_preds, dropped))
}

/// Greedy matching of one record at one threshold. Returns (tp, ignored)
/// per prediction, indexed as stored (not in confidence order).
fn match_record(eval: &RecordEval, thr: f64) -> Vec<(bool, bool)> {
    let n_gt = eval.oks.len();
    let mut gt_used = vec![false; n_gt];
    let mut out = vec![(false, false); eval.conf.len()];
    for &p in &eval.order {
        let best = |want_ignored: bool, used: &[bool]| -> Option<usize> {
            let mut best: Option<(usize, f64)> = None;
            for g in 0..n_gt {
                if used[g] || eval.ignore[g] != want_ignored {
                    continue;
                }
                let s = eval.oks[g][p];
                if s >= thr && best.map_or(true, |(_, bs)| s > bs) {
                    best = Some((g, s));
                }
            }
            best.map(|(g, _)| g)
        };
        if let Some(g) = best(false, &gt_used) {
            gt_used[g] = true;
            out[p] = (true, false);
        } else if let Some(g) = best(true, &gt_used) {
            gt_used[g] = true;
            out[p] = (false, true);
        }
    }
    out
}

/// AP by 101-point interpolated precision over the (recall, precision)
/// points of a scored, confidence-ordered prediction list.
fn interpolated_ap(points: &[(f64, f64)]) -> f64 {
    let mut total = 0.0;
    for i in 0..=100 {
        let r = i as f64 / 100.0;
        let mut best = 0.0f64;
        for &(recall, precision) in points {
            if recall >= r && precision > best {
                best = precision;
            }
        }
        total += best;
    }
    total / 101.0
}

fn sweep_with_bucket(
    records: &[EvalRecord],
    params: &OksParams,
    thresholds: &[f64],
    bucket: Option<(f64, f64)>,
) -> Result<ThresholdSweep> {
    params.validate()?;
    if thresholds.is_empty() {
        return Err(Error::config("threshold sweep is empty"));
    }
    if thresholds.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::config(format!("thresholds must ascend, got {thresholds:?}")));
    }
    let (evals, npig, total_preds, dropped) = prepare_records(records, params, bucket)?;

    // Global confidence order across records, ties by record then index.
    let mut global: Vec<(usize, usize)> = Vec::with_capacity(total_preds);
    for (r, eval) in evals.iter().enumerate() {
        for p in 0..eval.conf.len() {
            global.push((r, p));
        }
    }
    global.sort_by(|&(ra, pa), &(rb, pb)| {
        evals[rb].conf[pb]
            .partial_cmp(&evals[ra].conf[pa])
            .unwrap()
            .then(ra.cmp(&rb))
            .then(pa.cmp(&pb))
    });

    if npig == 0 && total_preds == 0 {
        return Ok(ThresholdSweep {
            thresholds: thresholds.to_vec(),
            aps: vec![1.0; thresholds.len()],
            recalls: vec![1.0; thresholds.len()],
            npig,
            total_preds,
            dropped_unlabeled_gt: dropped,
            degenerate: true,
        });
    }

    let mut aps = Vec::with_capacity(thresholds.len());
    let mut recalls = Vec::with_capacity(thresholds.len());
    for &thr in thresholds {
        let matched: Vec<Vec<(bool, bool)>> = evals.iter().map(|e| match_record(e, thr)).collect();
        let mut points = Vec::new();
        let (mut tp, mut fp) = (0usize, 0usize);
        for &(r, p) in &global {
            let (is_tp, is_ignored) = matched[r][p];
            if is_ignored {
                continue;
            }
            if is_tp {
                tp += 1;
            } else {
                fp += 1;
            }
            let recall = if npig == 0 { 0.0 } else { tp as f64 / npig as f64 };
            points.push((recall, tp as f64 / (tp + fp) as f64));
        }
        aps.push(interpolated_ap(&points));
        recalls.push(points.last().map_or(0.0, |&(r, _)| r));
    }
    Ok(ThresholdSweep {
        thresholds: thresholds.to_vec(),
        aps,
        recalls,
        npig,
        total_preds,
        dropped_unlabeled_gt: dropped,
        degenerate: false,
    })
}

/// The unbucketed sweep: every visible ground truth counts.
pub fn threshold_sweep(
    records: &[EvalRecord],
    params: &OksParams,
    thresholds: &[f64],
) -> Result<ThresholdSweep> {
    sweep_with_bucket(records, params, thresholds, None)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApArSummary {
    #[serde(rename = "AP")]
    pub ap: f64,
    #[serde(rename = "AP50")]
    pub ap50: f64,
    #[serde(rename = "AP75")]
    pub ap75: f64,
    /// Area-bucketed APs; -1 marks a bucket with no ground truth.
    #[serde(rename = "APM")]
    pub ap_medium: f64,
    #[serde(rename = "APL")]
    pub ap_large: f64,
    #[serde(rename = "AR")]
    pub ar: f64,
    #[serde(default)]
    pub degenerate_empty: bool,
    #[serde(default)]
    pub dropped_unlabeled_gt: usize,
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn threshold_index(thresholds: &[f64], want: f64) -> Option<usize> {
    thresholds.iter().position(|&t| (t - want).abs() < 1e-6)
}

/// Full AP/AR summary: mean AP over the sweep, the 0.50/0.75 cuts, the
/// medium/large area split at `area_boundary`, and mean recall.
pub fn ap_ar(
    records: &[EvalRecord],
    params: &OksParams,
    thresholds: &[f64],
    area_boundary: f64,
) -> Result<ApArSummary> {
    let primary = threshold_sweep(records, params, thresholds)?;
    let medium = sweep_with_bucket(records, params, thresholds, Some((0.0, area_boundary)))?;
    let large =
        sweep_with_bucket(records, params, thresholds, Some((area_boundary, f64::INFINITY)))?;
    let bucket_ap = |s: &ThresholdSweep| if s.npig == 0 { -1.0 } else { mean(&s.aps) };
    Ok(ApArSummary {
        ap: mean(&primary.aps),
        ap50: threshold_index(thresholds, 0.50).map_or(-1.0, |i| primary.aps[i]),
        ap75: threshold_index(thresholds, 0.75).map_or(-1.0, |i| primary.aps[i]),
        ap_medium: bucket_ap(&medium),
        ap_large: bucket_ap(&large),
        ar: mean(&primary.recalls),
        degenerate_empty: primary.degenerate,
        dropped_unlabeled_gt: primary.dropped_unlabeled_gt,
    })
}

/// One ground-truth/prediction pairing for PCKh. Predictions come from the
/// ground-truth person boxes, so the pairing is positional.
#[derive(Clone, Debug)]
pub struct PckhPair {
    pub gt: Vec<(f64, f64, u8)>,
    pub pred: Vec<(f64, f64)>,
    pub head_len: f64,
}

#[derive(Clone, Debug)]
pub struct PckhSummary {
    /// Percent correct per joint; None when a joint was never visible.
    pub per_joint: Vec<Option<f64>>,
    /// Pooled percent correct over all visible joints.
    pub mean: f64,
    pub correct: usize,
    pub visible: usize,
    /// Records ignored for a non-positive head length.
    pub skipped_records: usize,
}

/// A joint is correct iff its distance is strictly below
/// `threshold * head_len`, counted over visible joints only.
pub fn pckh(pairs: &[PckhPair], threshold: f64, k: usize) -> Result<PckhSummary> {
    if !(threshold > 0.0) {
        return Err(Error::config(format!("pckh threshold {threshold} must be positive")));
    }
    let mut correct = vec![0usize; k];
    let mut visible = vec![0usize; k];
    let mut skipped = 0usize;
    for pair in pairs {
        if pair.gt.len() != k || pair.pred.len() != k {
            return Err(Error::shape(format!(
                "pckh pair has {} gt / {} pred joints, expected {k}",
                pair.gt.len(),
                pair.pred.len()
            )));
        }
        if !(pair.head_len > 0.0) || !pair.head_len.is_finite() {
            skipped += 1;
            continue;
        }
        for j in 0..k {
            let (x, y, v) = pair.gt[j];
            if v == 0 {
                continue;
            }
            visible[j] += 1;
            let d = ((pair.pred[j].0 - x).powi(2) + (pair.pred[j].1 - y).powi(2)).sqrt();
            if d < threshold * pair.head_len {
                correct[j] += 1;
            }
        }
    }
    let total_visible: usize = visible.iter().sum();
    if total_visible == 0 {
        return Err(Error::config("no visible joints to score"));
    }
    let total_correct: usize = correct.iter().sum();
    let per_joint = (0..k)
        .map(|j| (visible[j] > 0).then(|| 100.0 * correct[j] as f64 / visible[j] as f64))
        .collect();
    Ok(PckhSummary {
        per_joint,
        mean: 100.0 * total_correct as f64 / total_visible as f64,
        correct: total_correct,
        visible: total_visible,
        skipped_records: skipped,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PckhReport {
    pub mean: f64,
    pub per_joint: BTreeMap<String, f64>,
    pub skipped_records: usize,
}

impl PckhReport {
    pub fn from_summary(summary: &PckhSummary, skel: &Skeleton) -> Self {
        let per_joint = skel
            .joints
            .iter()
            .zip(&summary.per_joint)
            .filter_map(|(name, pct)| pct.map(|p| (name.clone(), p)))
            .collect();
        PckhReport { mean: summary.mean, per_joint, skipped_records: summary.skipped_records }
    }
}

/// The JSON evaluation report: AP family at the top level, PCKh nested.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(flatten, skip_serializing_if = "Option::is_none")]
    pub coco: Option<ApArSummary>,
    #[serde(rename = "PCKh", skip_serializing_if = "Option::is_none")]
    pub pckh: Option<PckhReport>,
}

impl MetricsReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gt_at(points: &[(f64, f64)], area: f64) -> GtInstance {
        GtInstance { keypoints: points.iter().map(|&(x, y)| (x, y, 2u8)).collect(), area }
    }

    #[test]
    fn perfect_predictions_score_one() {
        let params = OksParams::uniform(3, 0.5);
        let gt = gt_at(&[(1.0, 2.0), (3.0, 4.0), (5.0, 6.0)], 25.0);
        let pred: Vec<(f64, f64)> = gt.keypoints.iter().map(|&(x, y, _)| (x, y)).collect();
        assert_eq!(oks(&gt, &pred, &params).unwrap(), 1.0);
    }

    #[test]
    fn closed_form_similarity_values() {
        // area 4, k 0.5: 2 s^2 k^2 = 2. d^2 = 2 gives exp(-1).
        let params = OksParams::uniform(1, 0.5);
        let gt = gt_at(&[(10.0, 10.0)], 4.0);
        let d = 2.0f64.sqrt();
        let one = oks(&gt, &[(10.0 + d, 10.0)], &params).unwrap();
        assert!((one - (-1.0f64).exp()).abs() < 1e-12, "{one}");

        // Two keypoints, one exact and one at exp(-1): mean (1 + e^-1)/2.
        let params2 = OksParams::uniform(2, 0.5);
        let gt2 = gt_at(&[(10.0, 10.0), (20.0, 20.0)], 4.0);
        let two = oks(&gt2, &[(10.0, 10.0), (20.0, 20.0 + d)], &params2).unwrap();
        assert!((two - (1.0 + (-1.0f64).exp()) / 2.0).abs() < 1e-12, "{two}");

        let invisible = GtInstance { keypoints: vec![(0.0, 0.0, 0)], area: 4.0 };
        assert!(oks(&invisible, &[(0.0, 0.0)], &OksParams::uniform(1, 0.5)).is_err());
    }

    fn single_pair_record(similarity_target: f64) -> EvalRecord {
        // Solve d^2 = 2 s^2 k^2 * (-ln(target) - 1e-9): lands a hair above
        // the target so "oks >= threshold" holds at the target threshold.
        let (area, k) = (4.0, 0.5);
        let d = (2.0 * area * k * k * (-(similarity_target.ln()) - 1e-9)).sqrt();
        EvalRecord {
            gts: vec![gt_at(&[(10.0, 10.0)], area)],
            preds: vec![Prediction { keypoints: vec![(10.0 + d, 10.0)], score: 0.9 }],
        }
    }

    #[test]
    fn single_match_above_all_thresholds_is_perfect() {
        let records = [EvalRecord {
            gts: vec![gt_at(&[(10.0, 10.0)], 4.0)],
            preds: vec![Prediction { keypoints: vec![(10.0, 10.0)], score: 1.0 }],
        }];
        let summary =
            ap_ar(&records, &OksParams::uniform(1, 0.5), &coco_thresholds(), DEFAULT_AREA_BOUNDARY)
                .unwrap();
        assert_eq!(summary.ap, 1.0);
        assert_eq!(summary.ar, 1.0);
        assert_eq!(summary.ap50, 1.0);
        assert_eq!(summary.ap75, 1.0);
        // area 4 < boundary: the large bucket has no ground truth.
        assert_eq!(summary.ap_medium, 1.0);
        assert_eq!(summary.ap_large, -1.0);
    }

    #[test]
    fn similarity_point_eight_passes_seven_of_ten_thresholds() {
        let records = [single_pair_record(0.8)];
        let summary =
            ap_ar(&records, &OksParams::uniform(1, 0.5), &coco_thresholds(), DEFAULT_AREA_BOUNDARY)
                .unwrap();
        assert_eq!(summary.ap, 0.7);
        assert_eq!(summary.ar, 0.7);
        assert_eq!(summary.ap50, 1.0);
        assert_eq!(summary.ap75, 1.0);
    }

    #[test]
    fn empty_input_rules() {
        let params = OksParams::uniform(1, 0.5);
        let both_empty = [EvalRecord::default()];
        let summary =
            ap_ar(&both_empty, &params, &coco_thresholds(), DEFAULT_AREA_BOUNDARY).unwrap();
        assert_eq!(summary.ap, 1.0);
        assert_eq!(summary.ar, 1.0);
        assert!(summary.degenerate_empty);

        let preds_only = [EvalRecord {
            gts: vec![],
            preds: vec![Prediction { keypoints: vec![(1.0, 1.0)], score: 0.5 }],
        }];
        let summary =
            ap_ar(&preds_only, &params, &coco_thresholds(), DEFAULT_AREA_BOUNDARY).unwrap();
        assert_eq!(summary.ap, 0.0);
        assert_eq!(summary.ar, 0.0);
        assert!(!summary.degenerate_empty);
    }

    // Independent implementation of the documented protocol: quadratic
    // scans, no shared code with the module above.
    mod oracle {
        use super::super::{EvalRecord, OksParams};

        fn oks_of(gt: &super::super::GtInstance, pred: &[(f64, f64)], params: &OksParams) -> f64 {
            let mut sum = 0.0;
            let mut n = 0usize;
            for i in 0..params.k.len() {
                let (x, y, v) = gt.keypoints[i];
                if v == 0 {
                    continue;
                }
                let dx = pred[i].0 - x;
                let dy = pred[i].1 - y;
                sum += (-(dx * dx + dy * dy) / (2.0 * gt.area * params.k[i] * params.k[i])).exp();
                n += 1;
            }
            sum / n as f64
        }

        pub fn sweep(
            records: &[EvalRecord],
            params: &OksParams,
            thresholds: &[f64],
        ) -> (Vec<f64>, Vec<f64>) {
            let npig: usize = records
                .iter()
                .flat_map(|r| &r.gts)
                .filter(|g| g.keypoints.iter().any(|kp| kp.2 > 0))
                .count();
            let total_preds: usize = records.iter().map(|r| r.preds.len()).sum();
            if npig == 0 && total_preds == 0 {
                return (vec![1.0; thresholds.len()], vec![1.0; thresholds.len()]);
            }
            let mut aps = Vec::new();
            let mut recalls = Vec::new();
            for &thr in thresholds {
                // Per record: greedy in confidence order, best similarity wins.
                let mut flags: Vec<(f64, usize, usize, bool)> = Vec::new();
                for (ri, rec) in records.iter().enumerate() {
                    let gts: Vec<_> =
                        rec.gts.iter().filter(|g| g.keypoints.iter().any(|kp| kp.2 > 0)).collect();
                    let mut order: Vec<usize> = (0..rec.preds.len()).collect();
                    order.sort_by(|&a, &b| {
                        rec.preds[b].score.partial_cmp(&rec.preds[a].score).unwrap().then(a.cmp(&b))
                    });
                    let mut used = vec![false; gts.len()];
                    for &p in &order {
                        let mut best: Option<(usize, f64)> = None;
                        for (g, gt) in gts.iter().enumerate() {
                            if used[g] {
                                continue;
                            }
                            let s = oks_of(gt, &rec.preds[p].keypoints, params);
                            if s >= thr && best.map_or(true, |(_, bs)| s > bs) {
                                best = Some((g, s));
                            }
                        }
                        let tp = if let Some((g, _)) = best {
                            used[g] = true;
                            true
                        } else {
                            false
                        };
                        flags.push((rec.preds[p].score, ri, p, tp));
                    }
                }
                flags.sort_by(|a, b| {
                    b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
                });
                let mut curve = Vec::new();
                let (mut tp, mut fp) = (0usize, 0usize);
                for &(_, _, _, is_tp) in &flags {
                    if is_tp {
                        tp += 1;
                    } else {
                        fp += 1;
                    }
                    let recall = if npig == 0 { 0.0 } else { tp as f64 / npig as f64 };
                    curve.push((recall, tp as f64 / (tp + fp) as f64));
                }
                let mut ap = 0.0;
                for i in 0..=100 {
                    let r = i as f64 / 100.0;
                    let mut best = 0.0f64;
                    for &(recall, precision) in &curve {
                        if recall >= r && precision > best {
                            best = precision;
                        }
                    }
                    ap += best;
                }
                aps.push(ap / 101.0);
                recalls.push(curve.last().map_or(0.0, |&(r, _)| r));
            }
            (aps, recalls)
        }
    }

    fn random_records(seed: u64, n_records: usize) -> Vec<EvalRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = 5usize;
        (0..n_records)
            .map(|_| {
                let n_gt = rng.gen_range(0..=3);
                let n_pred = rng.gen_range(0..=3);
                let gts: Vec<GtInstance> = (0..n_gt)
                    .map(|_| {
                        let keypoints = (0..k)
                            .map(|j| {
                                let v = if j == 0 { 2 } else { rng.gen_range(0..3) as u8 };
                                (rng.gen_range(0.0..50.0), rng.gen_range(0.0..50.0), v)
                            })
                            .collect();
                        GtInstance { keypoints, area: rng.gen_range(100.0..2500.0) }
                    })
                    .collect();
                let preds: Vec<Prediction> = (0..n_pred)
                    .map(|_| {
                        // Half the predictions shadow a ground truth so
                        // mid-sweep thresholds actually discriminate.
                        let keypoints = if !gts.is_empty() && rng.gen_bool(0.5) {
                            let g = rng.gen_range(0..gts.len());
                            gts[g]
                                .keypoints
                                .iter()
                                .map(|&(x, y, _)| {
                                    (x + rng.gen_range(-4.0..4.0), y + rng.gen_range(-4.0..4.0))
                                })
                                .collect()
                        } else {
                            (0..k)
                                .map(|_| (rng.gen_range(0.0..50.0), rng.gen_range(0.0..50.0)))
                                .collect()
                        };
                        Prediction { keypoints, score: rng.gen_range(0.0..1.0) }
                    })
                    .collect();
                EvalRecord { gts, preds }
            })
            .collect()
    }

    #[test]
    fn sweep_matches_the_oracle_on_random_scenes() {
        let params = OksParams::uniform(5, 0.4);
        let thresholds = coco_thresholds();
        for seed in 0..100 {
            let records = random_records(seed, 3);
            let sweep = threshold_sweep(&records, &params, &thresholds).unwrap();
            let (aps, recalls) = oracle::sweep(&records, &params, &thresholds);
            assert_eq!(sweep.aps, aps, "seed {seed}");
            assert_eq!(sweep.recalls, recalls, "seed {seed}");
        }
    }

    #[test]
    fn ap_never_increases_with_the_threshold() {
        let params = OksParams::uniform(5, 0.4);
        let thresholds = coco_thresholds();
        for seed in 100..150 {
            let records = random_records(seed, 4);
            let sweep = threshold_sweep(&records, &params, &thresholds).unwrap();
            for pair in sweep.aps.windows(2) {
                assert!(pair[1] <= pair[0] + 1e-15, "seed {seed}: {:?}", sweep.aps);
            }
        }
    }

    proptest! {
        #[test]
        fn translation_leaves_similarity_unchanged(
            qx in proptest::collection::vec(0u32..256, 3),
            qy in proptest::collection::vec(0u32..256, 3),
            px in proptest::collection::vec(0u32..256, 3),
            py in proptest::collection::vec(0u32..256, 3),
            tx in -512i32..512, ty in -512i32..512,
        ) {
            // Quarter-cell grids keep every sum exact in f64, so the
            // invariance holds bitwise.
            let params = OksParams::uniform(3, 0.5);
            let quarter = |q: u32| q as f64 * 0.25;
            let gt = GtInstance {
                keypoints: (0..3).map(|i| (quarter(qx[i]), quarter(qy[i]), 2u8)).collect(),
                area: 9.0,
            };
            let pred: Vec<(f64, f64)> = (0..3).map(|i| (quarter(px[i]), quarter(py[i]))).collect();
            let (dx, dy) = (tx as f64 * 0.25, ty as f64 * 0.25);
            let shifted_gt = GtInstance {
                keypoints: gt.keypoints.iter().map(|&(x, y, v)| (x + dx, y + dy, v)).collect(),
                area: gt.area,
            };
            let shifted_pred: Vec<(f64, f64)> =
                pred.iter().map(|&(x, y)| (x + dx, y + dy)).collect();
            prop_assert_eq!(
                oks(&gt, &pred, &params).unwrap(),
                oks(&shifted_gt, &shifted_pred, &params).unwrap()
            );
        }

        #[test]
        fn rescaling_coordinates_and_area_together_is_invariant(
            lambda in 0.1f64..10.0,
            seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let params = OksParams::uniform(4, 0.6);
            let gt = GtInstance {
                keypoints: (0..4)
                    .map(|_| (rng.gen_range(0.0..40.0), rng.gen_range(0.0..40.0), 2u8))
                    .collect(),
                area: rng.gen_range(50.0..500.0),
            };
            let pred: Vec<(f64, f64)> = gt
                .keypoints
                .iter()
                .map(|&(x, y, _)| (x + rng.gen_range(-3.0..3.0), y + rng.gen_range(-3.0..3.0)))
                .collect();
            let scaled_gt = GtInstance {
                keypoints: gt.keypoints.iter().map(|&(x, y, v)| (x * lambda, y * lambda, v)).collect(),
                area: gt.area * lambda * lambda,
            };
            let scaled_pred: Vec<(f64, f64)> =
                pred.iter().map(|&(x, y)| (x * lambda, y * lambda)).collect();
            let a = oks(&gt, &pred, &params).unwrap();
            let b = oks(&scaled_gt, &scaled_pred, &params).unwrap();
            prop_assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn pckh_boundary_is_strict() {
        let k = 3;
        let gt = vec![(10.0, 10.0, 2u8), (20.0, 10.0, 2), (30.0, 10.0, 2)];
        // head_len 2: the cut sits exactly at distance 1.
        let pairs = [PckhPair {
            gt: gt.clone(),
            pred: vec![(11.0, 10.0), (20.98, 10.0), (30.0, 10.0)],
            head_len: 2.0,
        }];
        let summary = pckh(&pairs, 0.5, k).unwrap();
        assert_eq!(summary.per_joint[0], Some(0.0)); // d == 0.5*head: incorrect
        assert_eq!(summary.per_joint[1], Some(100.0)); // d == 0.49*head: correct
        assert_eq!(summary.per_joint[2], Some(100.0));
        assert_eq!(summary.correct, 2);
        assert_eq!(summary.visible, 3);
    }

    #[test]
    fn exact_predictions_are_fully_correct() {
        let gt = vec![(5.0, 5.0, 2u8), (8.0, 5.0, 1), (11.0, 5.0, 0)];
        let pairs = [PckhPair {
            gt: gt.clone(),
            pred: gt.iter().map(|&(x, y, _)| (x, y)).collect(),
            head_len: 3.0,
        }];
        let summary = pckh(&pairs, 0.5, 3).unwrap();
        assert_eq!(summary.mean, 100.0);
        assert_eq!(summary.per_joint[2], None); // never visible
        assert_eq!(summary.visible, 2);
    }

    #[test]
    fn headless_records_are_skipped_with_a_count() {
        let gt = vec![(5.0, 5.0, 2u8)];
        let pairs = [
            PckhPair { gt: gt.clone(), pred: vec![(5.0, 5.0)], head_len: 0.0 },
            PckhPair { gt: gt.clone(), pred: vec![(50.0, 50.0)], head_len: 2.0 },
        ];
        let summary = pckh(&pairs, 0.5, 1).unwrap();
        assert_eq!(summary.skipped_records, 1);
        assert_eq!(summary.mean, 0.0);
        assert_eq!(summary.visible, 1);

        let all_skipped = [PckhPair { gt, pred: vec![(5.0, 5.0)], head_len: -1.0 }];
        assert!(pckh(&all_skipped, 0.5, 1).is_err());
    }

    #[test]
    fn head_length_uses_the_skeleton_pair() {
        let skel = Skeleton::coco17();
        let mut kps = vec![(0.0, 0.0, 2u8); 17];
        kps[3] = (10.0, 10.0, 2); // ears are the head pair
        kps[4] = (13.0, 14.0, 2);
        assert!((head_length(&kps, &skel) - 3.0).abs() < 1e-12);
        kps[4].2 = 0;
        assert_eq!(head_length(&kps, &skel), 0.0);
    }

    #[test]
    fn report_serializes_the_published_keys() {
        let records = [single_pair_record(0.8)];
        let summary =
            ap_ar(&records, &OksParams::uniform(1, 0.5), &coco_thresholds(), DEFAULT_AREA_BOUNDARY)
                .unwrap();
        let skel = Skeleton::coco17();
        let gt = vec![(5.0, 5.0, 2u8); 17];
        let pairs = [PckhPair {
            gt: gt.clone(),
            pred: gt.iter().map(|&(x, y, _)| (x, y)).collect(),
            head_len: 2.0,
        }];
        let pckh_summary = pckh(&pairs, 0.5, 17).unwrap();
        let report = MetricsReport {
            coco: Some(summary),
            pckh: Some(PckhReport::from_summary(&pckh_summary, &skel)),
        };
        let value: serde_json::Value = serde_json::to_value(&report).unwrap();
        for key in ["AP", "AP50", "AP75", "APM", "APL", "AR", "PCKh"] {
            assert!(value.get(key).is_some(), "missing {key}");
        }
        assert_eq!(value["AP"], 0.7);
        assert_eq!(value["PCKh"]["per_joint"]["nose"], 100.0);

        let back: MetricsReport = serde_json::from_value(value).unwrap();
        assert_eq!(back, report);
    }
}
