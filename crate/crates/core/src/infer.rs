//! NMS-free prediction and the unknown filter.

use serde::{Deserialize, Serialize};

use crate::embedding::{dot, unit_f64, Embedding, ScoreParams, Vocabulary};
use crate::error::{Error, Result};
use crate::types::{iou, Detection, Label, Scene};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferConfig {
    /// Minimum score of any kept detection, known or unknown.
    pub known_score_floor: f64,
    /// Known detections scoring above this suppress overlapping unknowns.
    pub confident_score: f64,
    pub tau: f64,
    pub max_detections: usize,
    /// Class-wise NMS IoU threshold; `None` disables NMS.
    pub nms_iou: Option<f64>,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig { known_score_floor: 0.05, confident_score: 0.2, tau: 0.99, max_detections: 300, nms_iou: None }
    }
}

impl InferConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.known_score_floor && self.known_score_floor <= self.confident_score && self.confident_score <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "need 0 <= known_score_floor <= confident_score <= 1, got {} and {}",
                self.known_score_floor, self.confident_score
            )));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::InvalidConfig(format!("tau must lie in (0, 1], got {}", self.tau)));
        }
        if let Some(t) = self.nms_iou {
            if !(t > 0.0 && t <= 1.0) {
                return Err(Error::InvalidConfig(format!("nms_iou must lie in (0, 1], got {t}")));
            }
        }
        Ok(())
    }
}

/// One detection per anchor: the best of the known categories and the
/// unknown wildcard (the object wildcard never labels). Ties favour the lower
/// category index, and a known category over unknown.
pub fn predict(scene: &Scene, vocab: &Vocabulary, p: &ScoreParams, cfg: &InferConfig) -> Result<Vec<Detection>> {
    if vocab.is_empty() {
        return Err(Error::EmptyVocabulary);
    }
    let heads: Vec<(Label, Vec<f64>)> = vocab
        .entries()
        .iter()
        .map(|e| (Label::Category(e.id), e.embedding.to_f64()))
        .chain(vocab.wildcard_unk.as_ref().map(|u: &Embedding| (Label::Unknown, u.to_f64())))
        .collect();
    let dim = heads[0].1.len();
    let mut dets = Vec::new();
    for anchor in &scene.anchors {
        if anchor.feature.dim() != dim {
            return Err(Error::DimensionMismatch { expected: dim, actual: anchor.feature.dim() });
        }
        let unit = unit_f64(anchor.feature.as_slice())?;
        let mut best: Option<(Label, f64)> = None;
        for (label, e) in &heads {
            let s = crate::embedding::score(dot(&unit, e), p);
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((*label, s));
            }
        }
        let (label, score) = best.expect("vocabulary is non-empty");
        if score >= cfg.known_score_floor {
            dets.push(Detection { bbox: anchor.bbox, label, score });
        }
    }
    sort_by_score(&mut dets);
    if let Some(t) = cfg.nms_iou {
        dets = classwise_nms(dets, t);
    }
    dets.truncate(cfg.max_detections);
    Ok(dets)
}

/// Stable sort, highest score first.
pub fn sort_by_score(dets: &mut [Detection]) {
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
}

/// Greedy per-label NMS over score-sorted detections.
pub fn classwise_nms(dets: Vec<Detection>, iou_thresh: f64) -> Vec<Detection> {
    let mut kept: Vec<Detection> = Vec::with_capacity(dets.len());
    for d in dets {
        if !kept.iter().any(|k| k.label == d.label && iou(&k.bbox, &d.bbox) > iou_thresh) {
            kept.push(d);
        }
    }
    kept
}

/// Drops every unknown detection whose IoU with a confident known detection
/// reaches `tau`. Known detections and the order of survivors are untouched.
pub fn filter_unknown(dets: &[Detection], cfg: &InferConfig) -> Vec<Detection> {
    let confident: Vec<&Detection> =
        dets.iter().filter(|d| d.label != Label::Unknown && d.score > cfg.confident_score).collect();
    dets.iter()
        .filter(|d| d.label != Label::Unknown || confident.iter().all(|k| iou(&d.bbox, &k.bbox) < cfg.tau))
        .cloned()
        .collect()
}

/// `predict` followed by `filter_unknown`.
pub fn detect(scene: &Scene, vocab: &Vocabulary, p: &ScoreParams, cfg: &InferConfig) -> Result<Vec<Detection>> {
    Ok(filter_unknown(&predict(scene, vocab, p, cfg)?, cfg))
}

/// Detections of one scene, as stored in a dump.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneDetections {
    pub scene_id: String,
    pub detections: Vec<Detection>,
}

/// One tab-separated line per detection: scene id, label, score, x1, y1, x2, y2.
/// Numbers use the shortest representation that reads back to the same value.
pub fn detections_text(scenes: &[SceneDetections]) -> String {
    let mut out = String::new();
    for s in scenes {
        for d in &s.detections {
            let [x1, y1, x2, y2] = d.bbox.corners();
            out.push_str(&format!("{}\t{}\t{}\t{x1}\t{y1}\t{x2}\t{y2}\n", s.scene_id, d.label, d.score));
        }
    }
    out
}

/// Groups consecutive lines by scene id; scenes with no detection are absent.
pub fn parse_detections(text: &str) -> Result<Vec<SceneDetections>> {
    let mut out: Vec<SceneDetections> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| Error::Malformed { what: "detection dump", line: i + 1, message };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 7 {
            return Err(bad(format!("expected 7 tab-separated fields, got {}", fields.len())));
        }
        let label: Label = fields[1].parse().map_err(bad)?;
        let mut nums = [0.0f64; 5];
        for (n, f) in nums.iter_mut().zip(&fields[2..]) {
            *n = f.parse().map_err(|_| bad(format!("invalid number `{f}`")))?;
        }
        let bbox = crate::types::BBox::new(nums[1], nums[2], nums[3], nums[4]).map_err(|e| bad(e.to_string()))?;
        let det = Detection { bbox, label, score: nums[0] };
        match out.last_mut() {
            Some(last) if last.scene_id == fields[0] => last.detections.push(det),
            _ => out.push(SceneDetections { scene_id: fields[0].to_string(), detections: vec![det] }),
        }
    }
    Ok(out)
}
