//! CLEAR MOTA, identity switches and IDF1.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::assignment::hungarian;
use crate::error::{Error, Result};
use crate::geometry::iou;
use crate::mot::{TrackRecord, TrackSet};

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

/// Counts and scores for one sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceEval {
    pub name: String,
    pub mota: f64,
    pub idf1: f64,
    pub id_switches: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub num_gt: usize,
    pub num_pred: usize,
    pub matches: usize,
    pub idtp: usize,
}

impl SequenceEval {
    fn finish(&mut self) {
        let errors = (self.fp + self.fn_ + self.id_switches) as f64;
        self.mota = 1.0 - errors / self.num_gt.max(1) as f64;
        let denom = self.num_gt + self.num_pred;
        self.idf1 = if denom == 0 { 1.0 } else { 2.0 * self.idtp as f64 / denom as f64 };
    }
}

/// Totals over all sequences plus the per-sequence rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mota: f64,
    pub idf1: f64,
    pub id_switches: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub num_gt: usize,
    pub per_sequence: Vec<SequenceEval>,
}

impl EvalReport {
    /// Pools the counts of several sequences.
    pub fn combine(per_sequence: Vec<SequenceEval>) -> Self {
        let mut total = SequenceEval {
            name: "OVERALL".into(),
            mota: 0.0,
            idf1: 0.0,
            id_switches: 0,
            fp: 0,
            fn_: 0,
            num_gt: 0,
            num_pred: 0,
            matches: 0,
            idtp: 0,
        };
        for s in &per_sequence {
            total.id_switches += s.id_switches;
            total.fp += s.fp;
            total.fn_ += s.fn_;
            total.num_gt += s.num_gt;
            total.num_pred += s.num_pred;
            total.matches += s.matches;
            total.idtp += s.idtp;
        }
        total.finish();
        EvalReport {
            mota: total.mota,
            idf1: total.idf1,
            id_switches: total.id_switches,
            fp: total.fp,
            fn_: total.fn_,
            num_gt: total.num_gt,
            per_sequence,
        }
    }

    fn rows(&self) -> Vec<(String, f64, f64, usize, usize, usize, usize)> {
        let mut rows: Vec<_> = self
            .per_sequence
            .iter()
            .map(|s| (s.name.clone(), s.mota, s.idf1, s.id_switches, s.fp, s.fn_, s.num_gt))
            .collect();
        rows.push((
            "OVERALL".into(),
            self.mota,
            self.idf1,
            self.id_switches,
            self.fp,
            self.fn_,
            self.num_gt,
        ));
        rows
    }

    pub fn to_table(&self) -> String {
        let rows = self.rows();
        let width = rows.iter().map(|r| r.0.len()).max().unwrap_or(0).max(8);
        let mut s = format!(
            "{:<width$} {:>7} {:>7} {:>6} {:>6} {:>6} {:>6}\n",
            "sequence", "MOTA", "IDF1", "IDSW", "FP", "FN", "GT"
        );
        for r in rows {
            let _ = writeln!(
                s,
                "{:<width$} {:>7.3} {:>7.3} {:>6} {:>6} {:>6} {:>6}",
                r.0, r.1, r.2, r.3, r.4, r.5, r.6
            );
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("sequence,mota,idf1,id_switches,fp,fn,num_gt\n");
        for r in self.rows() {
            let _ = writeln!(s, "{},{},{},{},{},{},{}", r.0, r.1, r.2, r.3, r.4, r.5, r.6);
        }
        s
    }
}

fn check_unique_ids(frames: &[Vec<TrackRecord>], what: &str) -> Result<()> {
    for (f, recs) in frames.iter().enumerate() {
        let mut seen = BTreeSet::new();
        for r in recs {
            if !seen.insert(r.id) {
                return Err(Error::InvalidArgument(format!(
                    "{what} id {} appears twice in frame {}",
                    r.id,
                    f + 1
                )));
            }
        }
    }
    Ok(())
}

/// Per-frame matches `(gt index, pred index)` with CLEAR persistence: a pair
/// matched earlier stays matched while its overlap clears the threshold.
fn clear_matches(
    gt: &[TrackRecord],
    pred: &[TrackRecord],
    previous: &BTreeMap<i64, i64>,
    threshold: f64,
) -> Result<Vec<(usize, usize)>> {
    let overlap: Vec<Vec<f64>> = gt
        .iter()
        .map(|g| pred.iter().map(|p| iou(&g.bbox, &p.bbox)).collect())
        .collect();
    let mut pairs = Vec::new();
    let mut gt_used = vec![false; gt.len()];
    let mut pred_used = vec![false; pred.len()];
    for (gi, g) in gt.iter().enumerate() {
        let Some(&pid) = previous.get(&g.id) else { continue };
        if let Some(pi) = pred.iter().position(|p| p.id == pid) {
            if !pred_used[pi] && overlap[gi][pi] >= threshold {
                pairs.push((gi, pi));
                gt_used[gi] = true;
                pred_used[pi] = true;
            }
        }
    }
    let free_gt: Vec<usize> = (0..gt.len()).filter(|&i| !gt_used[i]).collect();
    let free_pred: Vec<usize> = (0..pred.len()).filter(|&i| !pred_used[i]).collect();
    if !free_gt.is_empty() && !free_pred.is_empty() {
        let cost: Vec<Vec<f64>> = free_gt
            .iter()
            .map(|&gi| {
                free_pred
                    .iter()
                    .map(|&pi| if overlap[gi][pi] >= threshold { -overlap[gi][pi] } else { 0.0 })
                    .collect()
            })
            .collect();
        for (r, c) in hungarian(&cost)? {
            let (gi, pi) = (free_gt[r], free_pred[c]);
            if overlap[gi][pi] >= threshold {
                pairs.push((gi, pi));
            }
        }
    }
    pairs.sort_unstable();
    Ok(pairs)
}

/// Frames in which each (gt id, pred id) pair overlaps at the threshold.
fn identity_overlaps(
    gt_frames: &[Vec<TrackRecord>],
    pred_frames: &[Vec<TrackRecord>],
    threshold: f64,
) -> BTreeMap<(i64, i64), usize> {
    let mut counts = BTreeMap::new();
    for (g, p) in gt_frames.iter().zip(pred_frames) {
        for a in g {
            for b in p {
                if iou(&a.bbox, &b.bbox) >= threshold {
                    *counts.entry((a.id, b.id)).or_insert(0) += 1;
                }
            }
        }
    }
    counts
}

/// Identity true positives of the best one-to-one gt/pred identity matching.
fn global_idtp(gt_ids: &[i64], pred_ids: &[i64], overlaps: &BTreeMap<(i64, i64), usize>) -> Result<usize> {
    if gt_ids.is_empty() || pred_ids.is_empty() {
        return Ok(0);
    }
    let cost: Vec<Vec<f64>> = gt_ids
        .iter()
        .map(|g| {
            pred_ids
                .iter()
                .map(|p| -(overlaps.get(&(*g, *p)).copied().unwrap_or(0) as f64))
                .collect()
        })
        .collect();
    Ok(hungarian(&cost)?
        .into_iter()
        .map(|(r, c)| overlaps.get(&(gt_ids[r], pred_ids[c])).copied().unwrap_or(0))
        .sum())
}

/// Evaluates one sequence.
pub fn evaluate_sequence(name: &str, predictions: &TrackSet, gt: &TrackSet, iou_threshold: f64) -> Result<SequenceEval> {
    if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(Error::InvalidArgument(format!("iou threshold {iou_threshold} outside (0, 1]")));
    }
    let frames = predictions.num_frames().max(gt.num_frames());
    let mut gt_frames = gt.by_frame();
    let mut pred_frames = predictions.by_frame();
    gt_frames.resize(frames, Vec::new());
    pred_frames.resize(frames, Vec::new());
    check_unique_ids(&gt_frames, "ground-truth")?;
    check_unique_ids(&pred_frames, "predicted")?;

    let mut out = SequenceEval {
        name: name.to_string(),
        mota: 0.0,
        idf1: 0.0,
        id_switches: 0,
        fp: 0,
        fn_: 0,
        num_gt: gt.len(),
        num_pred: predictions.len(),
        matches: 0,
        idtp: 0,
    };
    let mut previous: BTreeMap<i64, i64> = BTreeMap::new();
    for (g, p) in gt_frames.iter().zip(&pred_frames) {
        let pairs = clear_matches(g, p, &previous, iou_threshold)?;
        for &(gi, pi) in &pairs {
            let (gid, pid) = (g[gi].id, p[pi].id);
            if previous.get(&gid).is_some_and(|&last| last != pid) {
                out.id_switches += 1;
            }
            previous.insert(gid, pid);
        }
        out.matches += pairs.len();
        out.fp += p.len() - pairs.len();
        out.fn_ += g.len() - pairs.len();
    }
    let overlaps = identity_overlaps(&gt_frames, &pred_frames, iou_threshold);
    out.idtp = global_idtp(&gt.ids(), &predictions.ids(), &overlaps)?;
    out.finish();
    Ok(out)
}

/// Evaluates a single sequence and wraps it in a report.
pub fn evaluate(predictions: &TrackSet, gt: &TrackSet, iou_threshold: f64) -> Result<EvalReport> {
    Ok(EvalReport::combine(vec![evaluate_sequence("sequence", predictions, gt, iou_threshold)?]))
}
