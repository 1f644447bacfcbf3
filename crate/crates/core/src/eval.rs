//! Open-world evaluation.
//!
//! Known categories get all-point interpolated AP at a fixed IoU threshold,
//! averaged separately over previously-known and current-known categories.
//! Unknown objects are measured by U-Recall, and their interference with
//! known predictions by A-OSE and Wilderness Impact.
//!
//! A ground truth is unknown when its label is [`Label::Unknown`] or its
//! category is tagged [`Role::Unknown`] in the task labeling. Unknown ground
//! truths never enter known-category AP.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedding::{CategoryStatus, Vocabulary};
use crate::error::{Error, Result};
use crate::types::{iou, BBox, Detection, GroundTruth, Label};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub iou_thresh: f64,
    pub wi_recall_level: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { iou_thresh: 0.5, wi_recall_level: 0.8 }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("iou_thresh", self.iou_thresh), ("wi_recall_level", self.wi_recall_level)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::InvalidConfig(format!("{name} must lie in (0, 1), got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    PreviouslyKnown,
    CurrentKnown,
    Unknown,
}

impl Role {
    fn is_known(self) -> bool {
        self != Role::Unknown
    }
}

/// Role of every category id in one task.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TaskLabeling {
    roles: BTreeMap<usize, Role>,
}

impl TaskLabeling {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, category: usize, role: Role) {
        self.roles.insert(category, role);
    }

    pub fn role(&self, category: usize) -> Option<Role> {
        self.roles.get(&category).copied()
    }

    /// Vocabulary entries by status; the remaining ids below `num_categories` are unknown.
    pub fn from_vocab(vocab: &Vocabulary, num_categories: usize) -> Self {
        let mut out = Self::new();
        for c in 0..num_categories.max(vocab.len()) {
            let role = match vocab.entry(c).map(|e| e.status) {
                Some(CategoryStatus::PreviouslyKnown) => Role::PreviouslyKnown,
                Some(CategoryStatus::CurrentKnown) => Role::CurrentKnown,
                None => Role::Unknown,
            };
            out.set(c, role);
        }
        out
    }

    /// Lines of `<category id> <pk|ck|unknown>`; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut out = Self::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |message: String| Error::Malformed { what: "task labeling", line: i + 1, message };
            let mut parts = line.split_whitespace();
            let (Some(id), Some(role), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(bad(format!("expected `<id> <role>`, got `{line}`")));
            };
            let id: usize = id.parse().map_err(|_| bad(format!("invalid category id `{id}`")))?;
            let role = match role {
                "pk" => Role::PreviouslyKnown,
                "ck" => Role::CurrentKnown,
                "unknown" => Role::Unknown,
                other => return Err(bad(format!("invalid role `{other}`"))),
            };
            out.set(id, role);
        }
        Ok(out)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (id, role) in &self.roles {
            let r = match role {
                Role::PreviouslyKnown => "pk",
                Role::CurrentKnown => "ck",
                Role::Unknown => "unknown",
            };
            let _ = writeln!(s, "{id} {r}");
        }
        s
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    fn known_with(&self, pred: impl Fn(Role) -> bool) -> Vec<usize> {
        self.roles.iter().filter(|(_, r)| r.is_known() && pred(**r)).map(|(c, _)| *c).collect()
    }
}

/// Detections and ground truth of one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneResult {
    pub detections: Vec<Detection>,
    pub ground_truth: Vec<GroundTruth>,
}

/// Outcome of greedy matching within one category.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Matches {
    pub det_tp: Vec<bool>,
    pub gt_matched: Vec<bool>,
}

/// Greedy matching of score-sorted detections: each takes the unmatched
/// ground truth of highest IoU (first on ties) when that IoU reaches the threshold.
pub fn match_detections(dets: &[BBox], gts: &[BBox], iou_thresh: f64) -> Matches {
    let mut gt_matched = vec![false; gts.len()];
    let det_tp = dets
        .iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if gt_matched[g] {
                    continue;
                }
                let u = iou(d, gt);
                if u >= iou_thresh && best.is_none_or(|(_, b)| u > b) {
                    best = Some((g, u));
                }
            }
            if let Some((g, _)) = best {
                gt_matched[g] = true;
            }
            best.is_some()
        })
        .collect();
    Matches { det_tp, gt_matched }
}

/// All-point interpolated AP of a ranked TP/FP sequence; `None` without ground truth.
pub fn average_precision(ranked_tp: &[bool], num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return None;
    }
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(ranked_tp.len());
    for (i, &hit) in ranked_tp.iter().enumerate() {
        tp += hit as usize;
        points.push((tp as f64 / num_gt as f64, tp as f64 / (i + 1) as f64));
    }
    // precision envelope, right to left
    for i in (0..points.len().saturating_sub(1)).rev() {
        points[i].1 = points[i].1.max(points[i + 1].1);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in points {
        ap += (r - prev_recall) * p;
        prev_recall = r;
    }
    Some(ap)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// AP of every known category; `None` when the category has no ground truth.
    pub per_category_ap: BTreeMap<usize, Option<f64>>,
    pub map_prev_known: Option<f64>,
    pub map_curr_known: Option<f64>,
    pub map_both: Option<f64>,
    /// `None` when there is no unknown ground truth.
    pub u_recall: Option<f64>,
    pub wi: f64,
    pub a_ose: usize,
    pub num_unknown_gt: usize,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "absent".to_string(), |x| format!("{x:.6}"))
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "map_prev_known: {}", fmt_opt(self.map_prev_known))?;
        writeln!(f, "map_curr_known: {}", fmt_opt(self.map_curr_known))?;
        writeln!(f, "map_both: {}", fmt_opt(self.map_both))?;
        writeln!(f, "u_recall: {}", fmt_opt(self.u_recall))?;
        writeln!(f, "wi: {:.6}", self.wi)?;
        writeln!(f, "a_ose: {}", self.a_ose)?;
        writeln!(f, "num_unknown_gt: {}", self.num_unknown_gt)?;
        for (c, ap) in &self.per_category_ap {
            writeln!(f, "ap.{c}: {}", fmt_opt(*ap))?;
        }
        Ok(())
    }
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let present: Vec<f64> = values.flatten().collect();
    (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
}

/// Per-detection record for one known category, pooled over scenes.
struct Ranked {
    score: f64,
    tp: bool,
    /// False positive lying on an unknown ground truth.
    open_set: bool,
}

pub fn owod_report(results: &[SceneResult], labeling: &TaskLabeling, cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let known = labeling.known_with(|_| true);
    let mut ranked: BTreeMap<usize, Vec<Ranked>> = known.iter().map(|&c| (c, Vec::new())).collect();
    let mut num_gt: BTreeMap<usize, usize> = known.iter().map(|&c| (c, 0)).collect();
    let (mut num_unknown_gt, mut unknown_hits, mut a_ose) = (0usize, 0usize, 0usize);

    for scene in results {
        let mut known_gt: BTreeMap<usize, Vec<BBox>> = BTreeMap::new();
        let mut unknown_gt = Vec::new();
        for g in &scene.ground_truth {
            match g.label {
                Label::Unknown => unknown_gt.push(g.bbox),
                Label::Category(c) => match labeling.role(c) {
                    None => return Err(Error::UntaggedCategory(c)),
                    Some(Role::Unknown) => unknown_gt.push(g.bbox),
                    Some(_) => known_gt.entry(c).or_default().push(g.bbox),
                },
            }
        }
        num_unknown_gt += unknown_gt.len();

        let mut dets: Vec<&Detection> = scene.detections.iter().collect();
        dets.sort_by(|a, b| b.score.total_cmp(&a.score));

        let unk_boxes: Vec<BBox> = dets.iter().filter(|d| d.label == Label::Unknown).map(|d| d.bbox).collect();
        unknown_hits +=
            match_detections(&unk_boxes, &unknown_gt, cfg.iou_thresh).gt_matched.iter().filter(|&&m| m).count();

        let on_unknown = |b: &BBox| unknown_gt.iter().any(|u| iou(b, u) >= cfg.iou_thresh);
        let mut labels: Vec<usize> = dets.iter().filter_map(|d| d.label.category()).collect();
        labels.sort_unstable();
        labels.dedup();
        for c in labels {
            let boxes: Vec<&Detection> = dets.iter().copied().filter(|d| d.label == Label::Category(c)).collect();
            let gts = known_gt.get(&c).map_or(&[][..], Vec::as_slice);
            let m = match_detections(&boxes.iter().map(|d| d.bbox).collect::<Vec<_>>(), gts, cfg.iou_thresh);
            for (d, &tp) in boxes.iter().zip(&m.det_tp) {
                let open_set = !tp && on_unknown(&d.bbox);
                a_ose += open_set as usize;
                if let Some(list) = ranked.get_mut(&c) {
                    list.push(Ranked { score: d.score, tp, open_set });
                }
            }
        }
        for (c, gts) in known_gt {
            *num_gt.get_mut(&c).expect("known category") += gts.len();
        }
    }

    let mut per_category_ap = BTreeMap::new();
    let (mut fp_os, mut tp_fp_cs) = (0usize, 0usize);
    for (&c, list) in ranked.iter_mut() {
        list.sort_by(|a, b| b.score.total_cmp(&a.score));
        let n_gt = num_gt[&c];
        let flags: Vec<bool> = list.iter().map(|r| r.tp).collect();
        per_category_ap.insert(c, average_precision(&flags, n_gt));
        if n_gt == 0 {
            continue;
        }
        let mut tp = 0usize;
        let mut cut = list.len();
        for (i, r) in list.iter().enumerate() {
            tp += r.tp as usize;
            if tp as f64 / n_gt as f64 >= cfg.wi_recall_level {
                cut = i + 1;
                break;
            }
        }
        let os = list[..cut].iter().filter(|r| r.open_set).count();
        fp_os += os;
        tp_fp_cs += cut - os;
    }

    let ap_of = |cs: Vec<usize>| mean(cs.into_iter().map(|c| per_category_ap[&c]));
    Ok(EvalReport {
        map_prev_known: ap_of(labeling.known_with(|r| r == Role::PreviouslyKnown)),
        map_curr_known: ap_of(labeling.known_with(|r| r == Role::CurrentKnown)),
        map_both: ap_of(known),
        u_recall: (num_unknown_gt > 0).then(|| unknown_hits as f64 / num_unknown_gt as f64),
        wi: if tp_fp_cs == 0 { 0.0 } else { fp_os as f64 / tp_fp_cs as f64 },
        a_ose,
        num_unknown_gt,
        per_category_ap,
    })
}
