//! Dual-head label assignment.
//!
//! Both heads rank anchor/ground-truth pairs by the alignment metric
//! `m = s^alpha * u^beta`, where `s` is the classification score of the anchor
//! for the ground truth's category and `u` their IoU. The one-to-many head
//! keeps the top-k anchors per ground truth, the one-to-one head exactly one.
//! A single [`AssignConfig`] feeds both heads, so their alpha and beta are
//! always identical.
//!
//! Ties are broken deterministically: larger metric first, then lower
//! ground-truth index, then lower anchor index. Anchors with `m = 0` are never
//! candidates.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{pairwise_iou, Scene};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    /// `o = u`, the IoU of the assigned pair.
    Iou,
    /// `o = m / max(m) * max(u)` over the anchors assigned to the same ground truth.
    NormalizedMetric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AssignConfig {
    pub alpha: f64,
    pub beta: f64,
    pub topk: usize,
    pub center_prior: bool,
    pub target: TargetKind,
}

impl Default for AssignConfig {
    fn default() -> Self {
        AssignConfig { alpha: 0.5, beta: 6.0, topk: 10, center_prior: true, target: TargetKind::Iou }
    }
}

impl AssignConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha.is_nan() || self.alpha <= 0.0 || self.beta.is_nan() || self.beta <= 0.0 || self.topk == 0 {
            return Err(Error::InvalidConfig(format!(
                "assignment needs alpha > 0, beta > 0, topk >= 1 (got {}, {}, {})",
                self.alpha, self.beta, self.topk
            )));
        }
        Ok(())
    }
}

pub fn align_metric(s: f64, u: f64, cfg: &AssignConfig) -> f64 {
    if u <= 0.0 || s <= 0.0 {
        return 0.0;
    }
    s.powf(cfg.alpha) * u.powf(cfg.beta)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AssignedPair {
    pub anchor: usize,
    pub gt: usize,
    pub metric: f64,
    pub iou: f64,
    pub target: f64,
}

/// Positive pairs, sorted by anchor index. Anchors not listed are negatives.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Assignment {
    pub pairs: Vec<AssignedPair>,
}

impl Assignment {
    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Dense `anchors x categories` target matrix; `gt_categories[g]` is the
    /// category of ground truth `g`.
    pub fn targets(&self, gt_categories: &[usize], num_anchors: usize, num_categories: usize) -> Array2<f64> {
        let mut out = Array2::zeros((num_anchors, num_categories));
        for p in &self.pairs {
            out[(p.anchor, gt_categories[p.gt])] = p.target;
        }
        out
    }
}

/// Anchor/ground-truth geometry that does not depend on scores.
#[derive(Debug, Clone)]
pub struct Geometry {
    pub iou: Array2<f64>,
    pub center_inside: Array2<bool>,
}

impl Geometry {
    pub fn of(scene: &Scene) -> Geometry {
        let anchors = scene.anchor_boxes();
        let gts = scene.gt_boxes();
        let iou = pairwise_iou(&anchors, &gts);
        let center_inside = Array2::from_shape_fn((anchors.len(), gts.len()), |(a, g)| {
            let (cx, cy) = anchors[a].center();
            gts[g].contains_point(cx, cy)
        });
        Geometry { iou, center_inside }
    }

    pub fn num_anchors(&self) -> usize {
        self.iou.nrows()
    }

    pub fn num_gts(&self) -> usize {
        self.iou.ncols()
    }
}

/// Candidates of one ground truth, best first.
fn ranked_candidates(geom: &Geometry, scores: &Array2<f64>, g: usize, cfg: &AssignConfig) -> Vec<(usize, f64)> {
    let mut cands: Vec<(usize, f64)> = (0..geom.num_anchors())
        .filter(|&a| !cfg.center_prior || geom.center_inside[(a, g)])
        .map(|a| (a, align_metric(scores[(a, g)], geom.iou[(a, g)], cfg)))
        .filter(|&(_, m)| m > 0.0)
        .collect();
    cands.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
    cands
}

fn check_shape(geom: &Geometry, scores: &Array2<f64>) -> Result<()> {
    if scores.dim() != geom.iou.dim() {
        return Err(Error::DimensionMismatch { expected: geom.iou.len(), actual: scores.len() });
    }
    Ok(())
}

fn finish(mut pairs: Vec<AssignedPair>, cfg: &AssignConfig) -> Assignment {
    if cfg.target == TargetKind::NormalizedMetric {
        let num_gt = pairs.iter().map(|p| p.gt + 1).max().unwrap_or(0);
        let mut max_m = vec![0.0f64; num_gt];
        let mut max_u = vec![0.0f64; num_gt];
        for p in &pairs {
            max_m[p.gt] = max_m[p.gt].max(p.metric);
            max_u[p.gt] = max_u[p.gt].max(p.iou);
        }
        for p in &mut pairs {
            p.target = p.metric / max_m[p.gt] * max_u[p.gt];
        }
    }
    pairs.sort_by_key(|p| p.anchor);
    Assignment { pairs }
}

pub fn assign_o2m_geom(geom: &Geometry, scores: &Array2<f64>, cfg: &AssignConfig) -> Result<Assignment> {
    check_shape(geom, scores)?;
    // best claim per anchor: (gt, metric)
    let mut claim: Vec<Option<(usize, f64)>> = vec![None; geom.num_anchors()];
    for g in 0..geom.num_gts() {
        for (a, m) in ranked_candidates(geom, scores, g, cfg).into_iter().take(cfg.topk) {
            // gts are visited in increasing order, so on equal metric the earlier claim stays
            match claim[a] {
                Some((_, held)) if held >= m => {}
                _ => claim[a] = Some((g, m)),
            }
        }
    }
    let pairs = claim
        .iter()
        .enumerate()
        .filter_map(|(a, c)| {
            c.map(|(g, m)| {
                let u = geom.iou[(a, g)];
                AssignedPair { anchor: a, gt: g, metric: m, iou: u, target: u }
            })
        })
        .collect();
    Ok(finish(pairs, cfg))
}

pub fn assign_o2o_geom(geom: &Geometry, scores: &Array2<f64>, cfg: &AssignConfig) -> Result<Assignment> {
    check_shape(geom, scores)?;
    let ranked: Vec<Vec<(usize, f64)>> =
        (0..geom.num_gts()).map(|g| ranked_candidates(geom, scores, g, cfg)).collect();
    let mut order: Vec<usize> = (0..geom.num_gts()).filter(|&g| !ranked[g].is_empty()).collect();
    order.sort_by(|&x, &y| ranked[y][0].1.total_cmp(&ranked[x][0].1).then(x.cmp(&y)));

    let mut taken = vec![false; geom.num_anchors()];
    let mut pairs = Vec::new();
    for g in order {
        if let Some(&(a, m)) = ranked[g].iter().find(|(a, _)| !taken[*a]) {
            taken[a] = true;
            let u = geom.iou[(a, g)];
            pairs.push(AssignedPair { anchor: a, gt: g, metric: m, iou: u, target: u });
        }
    }
    Ok(finish(pairs, cfg))
}

/// One-to-many assignment; `scores[(a, g)]` is anchor `a`'s score for the category of ground truth `g`.
pub fn assign_o2m(scene: &Scene, scores: &Array2<f64>, cfg: &AssignConfig) -> Result<Assignment> {
    assign_o2m_geom(&Geometry::of(scene), scores, cfg)
}

/// One-to-one assignment: ground truths are served greedily in order of their
/// best metric, each taking its best anchor not already taken.
pub fn assign_o2o(scene: &Scene, scores: &Array2<f64>, cfg: &AssignConfig) -> Result<Assignment> {
    assign_o2o_geom(&Geometry::of(scene), scores, cfg)
}
