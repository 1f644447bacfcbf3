//! Losses, analytic gradients and the training stages.
//!
//! Every stage classifies fixed region features against embeddings, assigns
//! targets with both heads (see [`crate::assign`]) and minimises the summed
//! BCE of the two heads. Each head's loss over a mini-batch is divided by the
//! sum of its targets (at least 1). Assignment targets are constants with
//! respect to the parameters.
//!
//! * [`calibrate`] trains only the LoRA factors of the text encoder.
//! * [`tune_wildcard_obj`] trains the "object" wildcard with every annotated box as positive.
//! * [`tune_known`] trains current-known category embeddings.
//! * [`tune_unknown`] trains current-known embeddings and the "unknown" wildcard, the
//!   latter on pseudo-labels chosen by [`select_pseudo`] with soft targets from the
//!   object wildcard.
//!
//! Embeddings are updated by projected SGD on the unit sphere and renormalised
//! after every step. Frozen parameters are never written.

use std::fmt;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::assign::{assign_o2m_geom, assign_o2o_geom, AssignConfig, Geometry};
use crate::data::Dataset;
use crate::embedding::{logistic, CategoryStatus, Embedding, ScoreParams, Vocabulary};
use crate::error::{Error, Result};
use crate::rng::Lcg64;
use crate::textenc::{encode, encode_grad, EncoderGrad, ToyTextEncoder};
use crate::types::{BBox, Label};

pub const SCORE_CLAMP: f64 = 1e-7;
/// Text used to initialise both wildcards.
pub const WILDCARD_TEXT: &str = "object";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr_calibrate: f64,
    pub lr_wildcard_obj: f64,
    pub lr_embed: f64,
    pub weight_decay_embed: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs_calibrate: usize,
    pub epochs_wildcard_obj: usize,
    pub epochs_known: usize,
    pub epochs_unknown: usize,
    pub sigma1: f64,
    pub sigma2: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_calibrate: 5e-4,
            lr_wildcard_obj: 1e-4,
            lr_embed: 1e-3,
            weight_decay_embed: 0.0,
            momentum: 0.0,
            batch_size: 16,
            epochs_calibrate: 10,
            epochs_wildcard_obj: 3,
            epochs_known: 10,
            epochs_unknown: 10,
            sigma1: 0.5,
            sigma2: 0.01,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let lrs = [self.lr_calibrate, self.lr_wildcard_obj, self.lr_embed];
        if lrs.iter().any(|&lr| !lr.is_finite() || lr <= 0.0) {
            return Err(Error::InvalidConfig(format!("learning rates must be positive, got {lrs:?}")));
        }
        if !(0.0..=1.0).contains(&self.sigma1) || !(0.0..=1.0).contains(&self.sigma2) {
            return Err(Error::InvalidConfig(format!(
                "sigma1 and sigma2 must lie in [0, 1], got {} and {}",
                self.sigma1, self.sigma2
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay_embed.is_nan() || self.weight_decay_embed < 0.0 {
            return Err(Error::InvalidConfig("momentum must be in [0, 1) and weight decay >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Hyper-parameters shared by every stage.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Settings {
    pub train: TrainConfig,
    pub assign: AssignConfig,
    pub score: ScoreParams,
}

impl Settings {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.assign.validate()?;
        self.score.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Calibrate,
    WildcardObj,
    Known,
    Unknown,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Calibrate => "calibrate",
            Stage::WildcardObj => "wildcard_obj",
            Stage::Known => "known",
            Stage::Unknown => "unknown",
        })
    }
}

/// One optimisation step; displays as a tab-separated log line.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub stage: Stage,
    pub loss_known: f64,
    pub loss_unknown: f64,
    pub pseudo_labels: usize,
}

impl fmt::Display for StepLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{}\t{:.6}\t{:.6}\t{}",
            self.step, self.stage, self.loss_known, self.loss_unknown, self.pseudo_labels
        )
    }
}

pub fn bce(s: f64, o: f64) -> f64 {
    let s = s.clamp(SCORE_CLAMP, 1.0 - SCORE_CLAMP);
    -(o * s.ln() + (1.0 - o) * (1.0 - s).ln())
}

/// Gradient of `bce(score(cos(f, e)), o)` with respect to the unit embedding
/// `e`, projected onto the tangent space of the sphere at `e`.
pub fn grad_embedding(f: &[f32], e: &Embedding, o: f64, p: &ScoreParams) -> Result<Vec<f64>> {
    if f.len() != e.dim() {
        return Err(Error::DimensionMismatch { expected: e.dim(), actual: f.len() });
    }
    let unit = crate::embedding::unit_f64(f)?;
    let e = e.to_f64();
    let sim = crate::embedding::dot(&unit, &e);
    let s = logistic(p.logit(sim));
    let raw: Vec<f64> = unit.iter().map(|fi| (s - o) * p.scale * fi).collect();
    Ok(project_tangent(&raw, &e))
}

fn project_tangent(g: &[f64], e: &[f64]) -> Vec<f64> {
    let along = crate::embedding::dot(g, e);
    g.iter().zip(e).map(|(gi, ei)| gi - along * ei).collect()
}

/// Pseudo-label mask: `u < sigma1` and `s > sigma2`.
pub fn phi(s: f64, u: f64, cfg: &TrainConfig) -> bool {
    u < cfg.sigma1 && s > cfg.sigma2
}

/// Per-anchor prediction used for pseudo-label selection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WildcardPrediction {
    /// Score against the object wildcard.
    pub s_obj: f64,
    /// Whether `s_obj` exceeds the anchor's score for every known category.
    pub beats_known: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PseudoLabel {
    pub anchor_index: usize,
    pub target: f64,
}

/// Pseudo-labels for the unknown wildcard: candidates whose object score beats
/// every known category, kept when their largest IoU with a known ground truth
/// is below `sigma1` and their object score is above `sigma2`.
pub fn select_pseudo(
    preds: &[WildcardPrediction],
    gt_boxes: &[BBox],
    anchor_boxes: &[BBox],
    cfg: &TrainConfig,
) -> Vec<PseudoLabel> {
    preds
        .iter()
        .zip(anchor_boxes)
        .enumerate()
        .filter(|(_, (p, _))| p.beats_known)
        .filter_map(|(i, (p, b))| {
            let u = gt_boxes.iter().map(|g| crate::types::iou(b, g)).fold(0.0, f64::max);
            phi(p.s_obj, u, cfg).then_some(PseudoLabel { anchor_index: i, target: p.s_obj })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Prepared scenes and the shared dual-head loss.

pub(crate) struct Prepared {
    /// Unit features, `anchors x D`.
    feats: Array2<f64>,
    geom: Geometry,
    gt_categories: Vec<usize>,
    /// Largest IoU of each anchor with any annotated ground truth.
    max_gt_iou: Vec<f64>,
    anchor_boxes: Vec<BBox>,
    gt_boxes: Vec<BBox>,
}

/// With `every_box` unset, only ground truths with a category label are kept.
/// Otherwise unknown-labelled boxes stay too and count as category 0.
/// `d` is the model width; scenes without anchors still get a `0 x d` matrix.
fn prepare_with(dataset: &Dataset, d: usize, every_box: bool) -> Result<Vec<Prepared>> {
    dataset
        .scenes
        .iter()
        .map(|scene| {
            let mut s = scene.clone();
            if every_box {
                for g in &mut s.ground_truth {
                    g.label = Label::Category(g.label.category().unwrap_or(0));
                }
            } else {
                s.ground_truth.retain(|g| matches!(g.label, Label::Category(_)));
            }
            let mut feats = Array2::zeros((s.anchors.len(), d));
            for (i, a) in s.anchors.iter().enumerate() {
                if a.feature.dim() != d {
                    return Err(Error::DimensionMismatch { expected: d, actual: a.feature.dim() });
                }
                let unit = crate::embedding::unit_f64(a.feature.as_slice())?;
                feats.row_mut(i).assign(&Array1::from(unit));
            }
            let geom = Geometry::of(&s);
            let max_gt_iou = geom.iou.rows().into_iter().map(|r| r.fold(0.0f64, |m, &x| m.max(x))).collect();
            Ok(Prepared {
                feats,
                gt_categories: s.ground_truth.iter().filter_map(|g| g.label.category()).collect(),
                max_gt_iou,
                anchor_boxes: s.anchor_boxes(),
                gt_boxes: s.gt_boxes(),
                geom,
            })
        })
        .collect()
}

fn prepare(dataset: &Dataset, d: usize) -> Result<Vec<Prepared>> {
    prepare_with(dataset, d, false)
}

fn scores_of(feats: &Array2<f64>, emb: &Array2<f64>, p: &ScoreParams) -> Array2<f64> {
    feats.dot(&emb.t()).mapv(|c| logistic(p.logit(c)))
}

/// Targets of both heads for one scene, given the scores of the loss rows.
/// `row_of[c]` maps a ground-truth category to a row of `scores`.
fn head_targets(
    prep: &Prepared,
    scores: &Array2<f64>,
    row_of: &dyn Fn(usize) -> usize,
    cfg: &AssignConfig,
) -> Result<[Array2<f64>; 2]> {
    let n = scores.nrows();
    let rows: Vec<usize> = prep.gt_categories.iter().map(|&c| row_of(c)).collect();
    let gt_scores = Array2::from_shape_fn((n, rows.len()), |(a, g)| scores[(a, rows[g])]);
    let o2m = assign_o2m_geom(&prep.geom, &gt_scores, cfg)?;
    let o2o = assign_o2o_geom(&prep.geom, &gt_scores, cfg)?;
    Ok([o2m.targets(&rows, n, scores.ncols()), o2o.targets(&rows, n, scores.ncols())])
}

/// Summed two-head BCE over a batch and its gradient with respect to the
/// (unit) embedding rows, before tangent projection.
pub(crate) struct KnownLoss {
    pub loss: f64,
    pub grad: Array2<f64>,
}

fn known_loss(
    batch: &[&Prepared],
    emb: &Array2<f64>,
    row_of: &dyn Fn(usize) -> usize,
    settings: &Settings,
) -> Result<KnownLoss> {
    let mut per_scene = Vec::with_capacity(batch.len());
    let mut norm = [0.0f64; 2];
    for prep in batch {
        let s = scores_of(&prep.feats, emb, &settings.score);
        let t = head_targets(prep, &s, row_of, &settings.assign)?;
        norm[0] += t[0].sum();
        norm[1] += t[1].sum();
        per_scene.push((s, t));
    }
    let norm = norm.map(|x| x.max(1.0));
    let mut loss = 0.0;
    let mut grad = Array2::zeros(emb.raw_dim());
    for (prep, (s, t)) in batch.iter().zip(&per_scene) {
        for h in 0..2 {
            loss += s.iter().zip(t[h].iter()).map(|(&si, &oi)| bce(si, oi)).sum::<f64>() / norm[h];
        }
        // d/dlogit of each head's BCE is (s - o) / norm
        let dlogit = (s - &t[0]) / norm[0] + (s - &t[1]) / norm[1];
        grad += &(dlogit.t().dot(&prep.feats) * settings.score.scale);
    }
    Ok(KnownLoss { loss, grad })
}

/// Masked unknown-wildcard loss for one batch: returns (loss, raw gradient, pseudo-label count).
fn unknown_loss(
    batch: &[&Prepared],
    known_emb: &Array2<f64>,
    t_obj: &Array1<f64>,
    t_unk: &Array1<f64>,
    settings: &Settings,
) -> (f64, Array1<f64>, usize) {
    let p = &settings.score;
    let mut selected: Vec<(usize, Vec<PseudoLabel>)> = Vec::with_capacity(batch.len());
    let mut norm = 0.0;
    let mut count = 0;
    for (b, prep) in batch.iter().enumerate() {
        let known = scores_of(&prep.feats, known_emb, p);
        let s_obj = prep.feats.dot(t_obj).mapv(|c| logistic(p.logit(c)));
        let preds: Vec<WildcardPrediction> = s_obj
            .iter()
            .zip(known.rows())
            .map(|(&so, row)| WildcardPrediction { s_obj: so, beats_known: row.iter().all(|&k| so > k) })
            .collect();
        let labels = select_pseudo(&preds, &prep.gt_boxes, &prep.anchor_boxes, &settings.train);
        debug_assert!(labels.iter().all(|l| prep.max_gt_iou[l.anchor_index] < settings.train.sigma1));
        norm += labels.iter().map(|l| l.target).sum::<f64>();
        count += labels.len();
        selected.push((b, labels));
    }
    let norm = norm.max(1.0);
    let mut loss = 0.0;
    let mut grad = Array1::zeros(t_unk.len());
    for (b, labels) in selected {
        let feats = &batch[b].feats;
        for l in labels {
            let f = feats.row(l.anchor_index);
            let s_unk = logistic(p.logit(f.dot(t_unk)));
            loss += bce(s_unk, l.target) / norm;
            grad.scaled_add((s_unk - l.target) * p.scale / norm, &f);
        }
    }
    (loss, grad, count)
}

/// Full two-head known loss on a dataset for fixed embeddings, as used by the
/// stages. Exposed for gradient checks: returns `(loss, raw gradient)`.
pub fn known_loss_for(dataset: &Dataset, embeddings: &[Vec<f64>], settings: &Settings) -> Result<(f64, Vec<Vec<f64>>)> {
    let prepared = prepare(dataset, embeddings.first().map_or(0, Vec::len))?;
    let refs: Vec<&Prepared> = prepared.iter().collect();
    let d = embeddings.first().map_or(0, Vec::len);
    let emb = Array2::from_shape_fn((embeddings.len(), d), |(i, j)| embeddings[i][j]);
    let out = known_loss(&refs, &emb, &|c| c, settings)?;
    Ok((out.loss, out.grad.rows().into_iter().map(|r| r.to_vec()).collect()))
}

// ---------------------------------------------------------------------------
// Optimisation helpers.

struct SphereSgd {
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    velocity: Array2<f64>,
}

impl SphereSgd {
    fn new(rows: usize, dim: usize, lr: f64, momentum: f64, weight_decay: f64) -> Self {
        SphereSgd { lr, momentum, weight_decay, velocity: Array2::zeros((rows, dim)) }
    }

    /// Updates `emb[row]` with the raw gradient `g`; a zero gradient leaves the row untouched.
    fn step_row(&mut self, emb: &mut Array2<f64>, row: usize, g: &[f64]) {
        if g.iter().all(|&x| x == 0.0) && self.velocity.row(row).iter().all(|&x| x == 0.0) {
            return;
        }
        let e = emb.row(row).to_vec();
        let tangent = project_tangent(g, &e);
        let mut v = self.velocity.row_mut(row);
        for (vi, ti) in v.iter_mut().zip(&tangent) {
            *vi = self.momentum * *vi + ti;
        }
        let next: Vec<f64> =
            e.iter().zip(v.iter()).map(|(ei, vi)| ei - self.lr * (vi + self.weight_decay * ei)).collect();
        let unit = crate::embedding::normalize_f64(&next).unwrap_or(e);
        emb.row_mut(row).assign(&Array1::from(unit));
    }
}

fn batches(n: usize, batch_size: usize, rng: &mut Lcg64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

fn rows_of(embs: &[&Embedding]) -> Array2<f64> {
    let d = embs.first().map_or(0, |e| e.dim());
    Array2::from_shape_fn((embs.len(), d), |(i, j)| embs[i].as_slice()[j] as f64)
}

fn to_embedding(row: ndarray::ArrayView1<f64>) -> Result<Embedding> {
    Embedding::normalize(&row.to_vec())
}

/// Result of a training stage: the trained value and one log line per step.
#[derive(Debug, Clone)]
pub struct Trained<T> {
    pub value: T,
    pub log: Vec<StepLog>,
}

fn stage_rng(settings: &Settings, stage: Stage) -> Lcg64 {
    Lcg64::derived(settings.train.seed, 1000 + stage as u64)
}

// ---------------------------------------------------------------------------
// Stages.

/// Trains the encoder's LoRA factors so that the embeddings of `names`
/// classify the dataset's annotated boxes. Ground truths whose category index
/// is outside `names` are ignored.
pub fn calibrate(
    dataset: &Dataset,
    enc: &ToyTextEncoder,
    names: &[&str],
    settings: &Settings,
) -> Result<Trained<ToyTextEncoder>> {
    settings.validate()?;
    if dataset.scenes.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if names.is_empty() {
        return Err(Error::EmptyVocabulary);
    }
    let view = dataset.training_view(|c| c < names.len());
    let prepared = prepare(&view, enc.dim())?;
    let mut enc = enc.clone();
    let mut velocity = EncoderGrad::zeros_like(&enc);
    let mut rng = stage_rng(settings, Stage::Calibrate);
    let mut log = Vec::new();
    let cfg = &settings.train;
    for _ in 0..cfg.epochs_calibrate {
        for batch in batches(prepared.len(), cfg.batch_size, &mut rng) {
            let refs: Vec<&Prepared> = batch.iter().map(|&i| &prepared[i]).collect();
            let outputs = names.iter().map(|n| enc.encode_f64(n)).collect::<Result<Vec<_>>>()?;
            let emb = Array2::from_shape_fn((names.len(), enc.dim()), |(i, j)| outputs[i][j]);
            let out = known_loss(&refs, &emb, &|c| c, settings)?;
            let mut grad = EncoderGrad::zeros_like(&enc);
            for (name, g) in names.iter().zip(out.grad.rows()) {
                grad.add_assign(&encode_grad(name, &enc, g.as_slice().expect("contiguous row"))?);
            }
            let v_arrays = [
                &mut velocity.q.a, &mut velocity.q.b, &mut velocity.k.a, &mut velocity.k.b,
                &mut velocity.v.a, &mut velocity.v.b, &mut velocity.o.a, &mut velocity.o.b,
            ];
            for ((param, g), v) in enc.trainable_mut().into_iter().zip(grad.arrays()).zip(v_arrays) {
                *v = &*v * cfg.momentum + g;
                param.scaled_add(-cfg.lr_calibrate, v);
            }
            enc.snap_trainable();
            log.push(StepLog { step: log.len(), stage: Stage::Calibrate, loss_known: out.loss, loss_unknown: 0.0, pseudo_labels: 0 });
        }
    }
    Ok(Trained { value: enc, log })
}

/// Trains the object wildcard, initialised from `encode("object")`, with every
/// ground-truth box as a positive of the single "object" class, whatever its
/// label. Pass fully annotated (pretraining) data here, not a task's training view.
pub fn tune_wildcard_obj(dataset: &Dataset, enc: &ToyTextEncoder, settings: &Settings) -> Result<Trained<Embedding>> {
    settings.validate()?;
    if dataset.scenes.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let init = encode(WILDCARD_TEXT, enc)?;
    let prepared = prepare_with(dataset, enc.dim(), true)?;
    let mut emb = rows_of(&[&init]);
    let cfg = &settings.train;
    let mut opt = SphereSgd::new(1, emb.ncols(), cfg.lr_wildcard_obj, cfg.momentum, 0.0);
    let mut rng = stage_rng(settings, Stage::WildcardObj);
    let mut log = Vec::new();
    for _ in 0..cfg.epochs_wildcard_obj {
        for batch in batches(prepared.len(), cfg.batch_size, &mut rng) {
            let refs: Vec<&Prepared> = batch.iter().map(|&i| &prepared[i]).collect();
            let out = known_loss(&refs, &emb, &|_| 0, settings)?;
            opt.step_row(&mut emb, 0, out.grad.row(0).as_slice().expect("contiguous"));
            log.push(StepLog { step: log.len(), stage: Stage::WildcardObj, loss_known: out.loss, loss_unknown: 0.0, pseudo_labels: 0 });
        }
    }
    let value = if emb.row(0).iter().zip(init.as_slice()).all(|(&a, &b)| a == b as f64) {
        init
    } else {
        to_embedding(emb.row(0))?
    };
    Ok(Trained { value, log })
}

/// Every category label must name a current-known entry of `vocab`.
fn check_labels(dataset: &Dataset, vocab: &Vocabulary) -> Result<()> {
    for scene in &dataset.scenes {
        for g in &scene.ground_truth {
            if let Label::Category(id) = g.label {
                match vocab.entry(id) {
                    None => return Err(Error::FrozenOrAbsentCategory { id, reason: "absent from the vocabulary" }),
                    Some(e) if e.status == CategoryStatus::PreviouslyKnown => {
                        return Err(Error::FrozenOrAbsentCategory { id, reason: "previously known (frozen)" })
                    }
                    _ => {}
                }
            }
        }
    }
    Ok(())
}

/// Trainable state for the known-category part of the loss.
struct KnownParams {
    trainable: Vec<usize>,
    emb: Array2<f64>,
    slot: Vec<Option<usize>>,
}

impl KnownParams {
    fn new(vocab: &Vocabulary) -> Self {
        let trainable = vocab.ids_with_status(CategoryStatus::CurrentKnown);
        let embs: Vec<&Embedding> = trainable.iter().map(|&id| &vocab.entries()[id].embedding).collect();
        let mut slot = vec![None; vocab.len()];
        for (row, &id) in trainable.iter().enumerate() {
            slot[id] = Some(row);
        }
        KnownParams { emb: rows_of(&embs), trainable, slot }
    }

    fn write_back(&self, vocab: &mut Vocabulary) -> Result<()> {
        for (row, &id) in self.trainable.iter().enumerate() {
            let entry = vocab.entry_mut(id).expect("trainable id exists");
            let current = self.emb.row(row);
            let unchanged = current.iter().zip(entry.embedding.as_slice()).all(|(&a, &b)| a == b as f64);
            if !unchanged {
                entry.embedding = to_embedding(current)?;
            }
        }
        Ok(())
    }
}

/// Fine-tunes the current-known category embeddings; everything else is frozen.
pub fn tune_known(dataset: &Dataset, vocab: &Vocabulary, settings: &Settings) -> Result<Trained<Vocabulary>> {
    settings.validate()?;
    if dataset.scenes.is_empty() {
        return Err(Error::EmptyDataset);
    }
    check_labels(dataset, vocab)?;
    let prepared = prepare(dataset, vocab.dim().unwrap_or(0))?;
    let mut params = KnownParams::new(vocab);
    let cfg = &settings.train;
    let mut opt = SphereSgd::new(params.trainable.len(), params.emb.ncols(), cfg.lr_embed, cfg.momentum, cfg.weight_decay_embed);
    let mut rng = stage_rng(settings, Stage::Known);
    let mut log = Vec::new();
    if !params.trainable.is_empty() {
        for _ in 0..cfg.epochs_known {
            for batch in batches(prepared.len(), cfg.batch_size, &mut rng) {
                let refs: Vec<&Prepared> = batch.iter().map(|&i| &prepared[i]).collect();
                let slot = &params.slot;
                let out = known_loss(&refs, &params.emb, &|c| slot[c].expect("checked label"), settings)?;
                for row in 0..params.trainable.len() {
                    opt.step_row(&mut params.emb, row, out.grad.row(row).as_slice().expect("contiguous"));
                }
                log.push(StepLog { step: log.len(), stage: Stage::Known, loss_known: out.loss, loss_unknown: 0.0, pseudo_labels: 0 });
            }
        }
    }
    let mut out = vocab.clone();
    params.write_back(&mut out)?;
    Ok(Trained { value: out, log })
}

/// Jointly trains current-known embeddings on their labels and the unknown
/// wildcard on pseudo-labels taught by the (frozen) object wildcard. The
/// unknown wildcard starts from `encode("object")`.
pub fn tune_unknown(
    dataset: &Dataset,
    vocab: &Vocabulary,
    enc: &ToyTextEncoder,
    settings: &Settings,
) -> Result<Trained<Vocabulary>> {
    settings.validate()?;
    let t_obj = vocab.wildcard_obj.as_ref().ok_or(Error::WildcardTeacherAbsent)?;
    if dataset.scenes.is_empty() {
        return Err(Error::EmptyDataset);
    }
    check_labels(dataset, vocab)?;
    let prepared = prepare(dataset, vocab.dim().unwrap_or(0))?;
    let init_unk = encode(WILDCARD_TEXT, enc)?;
    let mut params = KnownParams::new(vocab);
    let all_known = rows_of(&vocab.entries().iter().map(|e| &e.embedding).collect::<Vec<_>>());
    let t_obj = Array1::from(t_obj.to_f64());
    let mut t_unk = rows_of(&[&init_unk]);

    let cfg = &settings.train;
    let mut opt_known =
        SphereSgd::new(params.trainable.len(), params.emb.ncols(), cfg.lr_embed, cfg.momentum, cfg.weight_decay_embed);
    let mut opt_unk = SphereSgd::new(1, t_unk.ncols(), cfg.lr_embed, cfg.momentum, cfg.weight_decay_embed);
    let mut rng = stage_rng(settings, Stage::Unknown);
    let mut log = Vec::new();
    let mut known_all = all_known;
    for _ in 0..cfg.epochs_unknown {
        for batch in batches(prepared.len(), cfg.batch_size, &mut rng) {
            let refs: Vec<&Prepared> = batch.iter().map(|&i| &prepared[i]).collect();
            // scores for pseudo-label candidates use every known category, trainable rows at their current values
            for (row, &id) in params.trainable.iter().enumerate() {
                known_all.row_mut(id).assign(&params.emb.row(row));
            }
            let (loss_known, grad_known) = if params.trainable.is_empty() {
                (0.0, None)
            } else {
                let slot = &params.slot;
                let out = known_loss(&refs, &params.emb, &|c| slot[c].expect("checked label"), settings)?;
                (out.loss, Some(out.grad))
            };
            let t_unk_row = t_unk.row(0).to_owned();
            let (loss_unknown, grad_unk, count) = unknown_loss(&refs, &known_all, &t_obj, &t_unk_row, settings);
            if let Some(g) = grad_known {
                for row in 0..params.trainable.len() {
                    opt_known.step_row(&mut params.emb, row, g.row(row).as_slice().expect("contiguous"));
                }
            }
            opt_unk.step_row(&mut t_unk, 0, grad_unk.as_slice().expect("contiguous"));
            log.push(StepLog { step: log.len(), stage: Stage::Unknown, loss_known, loss_unknown, pseudo_labels: count });
        }
    }
    let mut out = vocab.clone();
    params.write_back(&mut out)?;
    let unchanged = t_unk.row(0).iter().zip(init_unk.as_slice()).all(|(&a, &b)| a == b as f64);
    out.wildcard_unk = Some(if unchanged { init_unk } else { to_embedding(t_unk.row(0))? });
    Ok(Trained { value: out, log })
}

/// Total fine-tuning loss `L_k + Phi * L_unk` on one batch, with its two
/// terms, for fixed embeddings. Exposed for decomposition checks.
pub fn finetune_loss_terms(dataset: &Dataset, vocab: &Vocabulary, settings: &Settings) -> Result<(f64, f64, usize)> {
    let t_obj = vocab.wildcard_obj.as_ref().ok_or(Error::WildcardTeacherAbsent)?;
    let t_unk = vocab.wildcard_unk.as_ref().ok_or(Error::WildcardTeacherAbsent)?;
    check_labels(dataset, vocab)?;
    let prepared = prepare(dataset, vocab.dim().unwrap_or(0))?;
    let refs: Vec<&Prepared> = prepared.iter().collect();
    let params = KnownParams::new(vocab);
    let all_known = rows_of(&vocab.entries().iter().map(|e| &e.embedding).collect::<Vec<_>>());
    let loss_known = if params.trainable.is_empty() {
        0.0
    } else {
        let slot = &params.slot;
        known_loss(&refs, &params.emb, &|c| slot[c].expect("checked label"), settings)?.loss
    };
    let (loss_unknown, _, count) =
        unknown_loss(&refs, &all_known, &Array1::from(t_obj.to_f64()), &Array1::from(t_unk.to_f64()), settings);
    Ok((loss_known, loss_unknown, count))
}

/// Mean score of each category on the anchors its ground truths are assigned
/// (one-to-one head) under the given vocabulary.
pub fn mean_assigned_scores(dataset: &Dataset, vocab: &Vocabulary, settings: &Settings) -> Result<Vec<Option<f64>>> {
    let prepared = prepare(dataset, vocab.dim().unwrap_or(0))?;
    let emb = rows_of(&vocab.entries().iter().map(|e| &e.embedding).collect::<Vec<_>>());
    let mut sum = vec![0.0; vocab.len()];
    let mut count = vec![0usize; vocab.len()];
    for prep in &prepared {
        let s = scores_of(&prep.feats, &emb, &settings.score);
        let gt_scores = Array2::from_shape_fn((s.nrows(), prep.gt_categories.len()), |(a, g)| s[(a, prep.gt_categories[g])]);
        for p in assign_o2o_geom(&prep.geom, &gt_scores, &settings.assign)?.pairs {
            let c = prep.gt_categories[p.gt];
            sum[c] += s[(p.anchor, c)];
            count[c] += 1;
        }
    }
    Ok(sum.iter().zip(&count).map(|(s, &n)| (n > 0).then(|| s / n as f64)).collect())
}

/// Mean object-wildcard score on anchors assigned (one-to-one) to any ground-truth box.
pub fn mean_assigned_object_score(dataset: &Dataset, t_obj: &Embedding, settings: &Settings) -> Result<f64> {
    let prepared = prepare_with(dataset, t_obj.dim(), true)?;
    let emb = rows_of(&[t_obj]);
    let (mut sum, mut count) = (0.0, 0usize);
    for prep in &prepared {
        let s = scores_of(&prep.feats, &emb, &settings.score);
        let gt_scores = Array2::from_shape_fn((s.nrows(), prep.gt_categories.len()), |(a, _)| s[(a, 0)]);
        for p in assign_o2o_geom(&prep.geom, &gt_scores, &settings.assign)?.pairs {
            sum += s[(p.anchor, 0)];
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, WorldSpec};
    use crate::textenc::precompute_vocab;
    use crate::worldstate::{expand, TaskState};

    const H: f64 = 1e-4;

    fn close(a: f64, n: f64) -> bool {
        (a - n).abs() <= 1e-3 * a.abs().max(n.abs()) + 1e-7
    }

    fn small_world(seed: u64) -> Dataset {
        let spec = WorldSpec {
            num_known: 4,
            num_unknown: 2,
            feature_dim: 16,
            bg_anchors_per_scene: 8,
            scenes: 24,
            seed,
            ..Default::default()
        };
        generate(&spec).unwrap()
    }

    fn names(ds: &Dataset) -> Vec<&str> {
        ds.category_names.iter().map(String::as_str).collect()
    }

    fn encoder() -> ToyTextEncoder {
        ToyTextEncoder::new(16, 2, 3).unwrap()
    }

    fn with_epochs(f: impl FnOnce(&mut TrainConfig)) -> Settings {
        let mut s = Settings::default();
        f(&mut s.train);
        s
    }

    fn bits(e: &Embedding) -> Vec<u32> {
        e.as_slice().iter().map(|v| v.to_bits()).collect()
    }

    #[test]
    fn bce_examples() {
        assert!(bce(1.0 - 1e-7, 1.0) < 2e-7);
        assert!((bce(0.5, 0.5) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((bce(0.5, 0.0) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(bce(0.0, 1.0).is_finite());
    }

    #[test]
    fn embedding_gradient_is_zero_at_target() {
        let p = ScoreParams::default();
        let e = Embedding::normalize(&[0.6, 0.8, 0.0]).unwrap();
        let f = [1.0f32, 2.0, 2.0];
        let unit = crate::embedding::unit_f64(&f).unwrap();
        let s = crate::embedding::score(crate::embedding::dot(&unit, &e.to_f64()), &p);
        let g = grad_embedding(&f, &e, s, &p).unwrap();
        assert!(g.iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn embedding_gradient_matches_finite_differences() {
        let p = ScoreParams::default();
        let mut rng = Lcg64::new(21);
        for _ in 0..20 {
            let f: Vec<f32> = (0..8).map(|_| rng.gaussian() as f32).collect();
            let raw: Vec<f64> = (0..8).map(|_| rng.gaussian()).collect();
            let e = Embedding::normalize(&raw).unwrap();
            let o = rng.next_f64();
            let g = grad_embedding(&f, &e, o, &p).unwrap();
            let unit = crate::embedding::unit_f64(&f).unwrap();
            // loss of the normalised point: its coordinate gradient at a unit vector is the tangent projection
            let loss = |x: &[f64]| {
                let n = crate::embedding::normalize_f64(x).unwrap();
                bce(logistic(p.logit(crate::embedding::dot(&unit, &n))), o)
            };
            let e64 = e.to_f64();
            for i in 0..8 {
                let mut plus = e64.clone();
                plus[i] += H;
                let mut minus = e64.clone();
                minus[i] -= H;
                let numeric = (loss(&plus) - loss(&minus)) / (2.0 * H);
                assert!(close(g[i], numeric), "{i}: {} vs {numeric}", g[i]);
            }
            assert!(crate::embedding::dot(&g, &e64).abs() < 1e-6);
        }
    }

    #[test]
    fn known_loss_gradient_matches_finite_differences() {
        let ds = small_world(4);
        let batch = Dataset { scenes: ds.scenes[..4].to_vec(), ..ds.clone() };
        let view = batch.training_view(|_| true);
        let mut rng = Lcg64::new(8);
        let emb: Vec<Vec<f64>> = (0..4)
            .map(|_| Embedding::normalize(&(0..16).map(|_| rng.gaussian()).collect::<Vec<_>>()).unwrap().to_f64())
            .collect();
        let settings = Settings::default();
        let (_, grad) = known_loss_for(&view, &emb, &settings).unwrap();
        for c in 0..4 {
            for i in [0, 5, 15] {
                let mut plus = emb.clone();
                plus[c][i] += H;
                let mut minus = emb.clone();
                minus[c][i] -= H;
                let numeric = (known_loss_for(&view, &plus, &settings).unwrap().0
                    - known_loss_for(&view, &minus, &settings).unwrap().0)
                    / (2.0 * H);
                assert!(close(grad[c][i], numeric), "{c},{i}: {} vs {numeric}", grad[c][i]);
            }
        }
    }

    #[test]
    fn pseudo_label_examples() {
        let cfg = TrainConfig::default();
        assert!(phi(0.02, 0.3, &cfg));
        assert!(!phi(0.5, 0.6, &cfg));
        assert!(!phi(0.005, 0.1, &cfg));

        let gt = [BBox::new(0.0, 0.0, 10.0, 10.0).unwrap()];
        let anchors = [
            BBox::new(0.0, 0.0, 10.0, 10.0).unwrap(),  // u = 1
            BBox::new(50.0, 0.0, 60.0, 10.0).unwrap(), // u = 0
            BBox::new(50.0, 0.0, 60.0, 10.0).unwrap(),
            BBox::new(50.0, 0.0, 60.0, 10.0).unwrap(),
        ];
        let preds = [
            WildcardPrediction { s_obj: 0.9, beats_known: true },
            WildcardPrediction { s_obj: 0.4, beats_known: true },
            WildcardPrediction { s_obj: 0.4, beats_known: false },
            WildcardPrediction { s_obj: 0.005, beats_known: true },
        ];
        assert_eq!(select_pseudo(&preds, &gt, &anchors, &cfg), vec![PseudoLabel { anchor_index: 1, target: 0.4 }]);
    }

    proptest::proptest! {
        #[test]
        fn selected_anchors_satisfy_phi(
            preds in proptest::collection::vec((0.0f64..1.0, proptest::bool::ANY), 1..20),
            corners in proptest::collection::vec((0.0f64..50.0, 0.0f64..50.0), 21),
            sigma1 in 0.05f64..0.95,
            sigma2 in 0.0f64..0.5,
        ) {
            let cfg = TrainConfig { sigma1, sigma2, ..Default::default() };
            let bx = |(x, y): (f64, f64)| BBox::new(x, y, x + 15.0, y + 15.0).unwrap();
            let anchors: Vec<BBox> = corners[..preds.len()].iter().map(|&c| bx(c)).collect();
            let gts = [bx(corners[20])];
            let preds: Vec<WildcardPrediction> =
                preds.iter().map(|&(s_obj, beats_known)| WildcardPrediction { s_obj, beats_known }).collect();
            let chosen = select_pseudo(&preds, &gts, &anchors, &cfg);
            for (i, p) in preds.iter().enumerate() {
                let u = crate::types::iou(&anchors[i], &gts[0]);
                let expected = p.beats_known && phi(p.s_obj, u, &cfg);
                proptest::prop_assert_eq!(chosen.iter().any(|c| c.anchor_index == i), expected);
            }
            proptest::prop_assert!(chosen.iter().all(|c| c.target == preds[c.anchor_index].s_obj));
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { lr_embed: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { sigma1: 1.5, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { sigma2: -0.1, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn step_log_is_tab_separated() {
        let l = StepLog { step: 3, stage: Stage::Unknown, loss_known: 0.5, loss_unknown: 0.25, pseudo_labels: 7 };
        assert_eq!(l.to_string(), "3\tunknown\t0.500000\t0.250000\t7");
    }

    #[test]
    fn calibrate_without_epochs_is_identity() {
        let ds = small_world(1);
        let enc = encoder();
        let out = calibrate(&ds, &enc, &names(&ds), &with_epochs(|t| t.epochs_calibrate = 0)).unwrap();
        assert_eq!(out.value, enc);
        assert!(out.value.layers().iter().all(|l| l.b().iter().all(|&x| x == 0.0)));
        assert!(out.log.is_empty());
    }

    #[test]
    fn calibrate_rejects_empty_dataset() {
        let ds = Dataset { scenes: vec![], category_names: vec!["a".into()], unknown_names: vec![] };
        assert!(matches!(calibrate(&ds, &encoder(), &["a"], &Settings::default()), Err(Error::EmptyDataset)));
    }

    #[test]
    fn calibration_loss_decreases_on_a_fixed_batch() {
        let ds = small_world(2);
        let batch = Dataset { scenes: ds.scenes[..16].to_vec(), ..ds.clone() };
        let settings = with_epochs(|t| t.epochs_calibrate = 11);
        let enc = encoder();
        let out = calibrate(&batch, &enc, &names(&ds), &settings).unwrap();
        let losses: Vec<f64> = out.log.iter().map(|l| l.loss_known).collect();
        assert_eq!(losses.len(), 11);
        assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
        for (before, after) in enc.layers().iter().zip(out.value.layers()) {
            assert_eq!(before.w0(), after.w0());
        }
    }

    #[test]
    fn wildcard_obj_starts_from_object_text() {
        let ds = small_world(3);
        let enc = encoder();
        let init = encode(WILDCARD_TEXT, &enc).unwrap();
        let out = tune_wildcard_obj(&ds, &enc, &with_epochs(|t| t.epochs_wildcard_obj = 0)).unwrap();
        assert_eq!(bits(&out.value), bits(&init));

        let empty = Dataset {
            scenes: ds.scenes.iter().map(|s| crate::types::Scene { anchors: vec![], ground_truth: vec![], ..s.clone() }).collect(),
            ..ds.clone()
        };
        let out = tune_wildcard_obj(&empty, &enc, &Settings::default()).unwrap();
        assert_eq!(bits(&out.value), bits(&init));
    }

    #[test]
    fn wildcard_obj_tuning_raises_assigned_scores() {
        let ds = small_world(5);
        let enc = encoder();
        let settings = Settings::default();
        let init = encode(WILDCARD_TEXT, &enc).unwrap();
        let tuned = tune_wildcard_obj(&ds, &enc, &settings).unwrap().value;
        let before = mean_assigned_object_score(&ds, &init, &settings).unwrap();
        let after = mean_assigned_object_score(&ds, &tuned, &settings).unwrap();
        assert!(after > before, "{before} -> {after}");
        assert!((tuned.to_f64().iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() < 1e-6);
    }

    fn two_task_state(ds: &Dataset, enc: &ToyTextEncoder) -> TaskState {
        let n = names(ds);
        let s1 = TaskState::initial(&n[..2], enc).unwrap();
        let mut s2 = expand(&s1, &n[2..], enc).unwrap();
        s2.vocab.wildcard_obj = Some(encode(WILDCARD_TEXT, enc).unwrap());
        s2
    }

    #[test]
    fn tune_known_freezes_previous_categories() {
        let ds = small_world(6);
        let enc = encoder();
        let state = two_task_state(&ds, &enc);
        let view = ds.training_view(|c| c >= 2);
        let settings = with_epochs(|t| t.epochs_known = 2);
        let out = tune_known(&view, &state.vocab, &settings).unwrap().value;
        for id in 0..2 {
            assert_eq!(bits(&out.entries()[id].embedding), bits(&state.vocab.entries()[id].embedding));
        }
        for id in 2..4 {
            assert_ne!(bits(&out.entries()[id].embedding), bits(&state.vocab.entries()[id].embedding));
            let norm: f64 = out.entries()[id].embedding.to_f64().iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
        }
        assert_eq!(out.wildcard_obj, state.vocab.wildcard_obj);

        let none = tune_known(&view, &state.vocab, &with_epochs(|t| t.epochs_known = 0)).unwrap().value;
        assert_eq!(none, state.vocab);
    }

    #[test]
    fn tune_known_rejects_frozen_or_absent_labels() {
        let ds = small_world(6);
        let enc = encoder();
        let state = two_task_state(&ds, &enc);
        let frozen = ds.training_view(|c| c == 0);
        assert!(matches!(
            tune_known(&frozen, &state.vocab, &Settings::default()),
            Err(Error::FrozenOrAbsentCategory { id: 0, .. })
        ));
        let small = precompute_vocab(&names(&ds)[..1], &enc).unwrap();
        let absent = ds.training_view(|c| c == 3);
        assert!(matches!(tune_known(&absent, &small, &Settings::default()), Err(Error::FrozenOrAbsentCategory { id: 3, .. })));
    }

    #[test]
    fn tune_known_does_not_lower_assigned_scores() {
        let ds = small_world(7);
        let enc = encoder();
        let vocab = precompute_vocab(&names(&ds), &enc).unwrap();
        let view = ds.training_view(|_| true);
        let settings = Settings::default();
        let tuned = tune_known(&view, &vocab, &settings).unwrap().value;
        let before = mean_assigned_scores(&view, &vocab, &settings).unwrap();
        let after = mean_assigned_scores(&view, &tuned, &settings).unwrap();
        for (b, a) in before.iter().zip(&after) {
            if let (Some(b), Some(a)) = (b, a) {
                assert!(a >= b, "{b} -> {a}");
            }
        }
    }

    #[test]
    fn tune_unknown_needs_the_teacher() {
        let ds = small_world(8);
        let enc = encoder();
        let vocab = precompute_vocab(&names(&ds), &enc).unwrap();
        assert!(matches!(
            tune_unknown(&ds.training_view(|_| true), &vocab, &enc, &Settings::default()),
            Err(Error::WildcardTeacherAbsent)
        ));
    }

    #[test]
    fn empty_mask_leaves_unknown_wildcard_at_init() {
        let ds = small_world(9);
        let enc = encoder();
        let state = two_task_state(&ds, &enc);
        let view = ds.training_view(|c| c >= 2);
        // no score exceeds 1, so nothing is ever selected
        let settings = with_epochs(|t| {
            t.sigma2 = 1.0;
            t.epochs_unknown = 2;
        });
        let out = tune_unknown(&view, &state.vocab, &enc, &settings).unwrap();
        assert_eq!(bits(out.value.wildcard_unk.as_ref().unwrap()), bits(&encode(WILDCARD_TEXT, &enc).unwrap()));
        assert!(out.log.iter().all(|l| l.pseudo_labels == 0 && l.loss_unknown == 0.0));
    }

    #[test]
    fn tune_unknown_freeze_contract_and_determinism() {
        let ds = small_world(10);
        let enc = encoder();
        let state = two_task_state(&ds, &enc);
        let view = ds.training_view(|c| c >= 2);
        let settings = with_epochs(|t| t.epochs_unknown = 1);
        let a = tune_unknown(&view, &state.vocab, &enc, &settings).unwrap();
        for id in 0..2 {
            assert_eq!(bits(&a.value.entries()[id].embedding), bits(&state.vocab.entries()[id].embedding));
        }
        assert_eq!(a.value.wildcard_obj, state.vocab.wildcard_obj);
        assert!(a.log.iter().any(|l| l.pseudo_labels > 0));
        let unk = a.value.wildcard_unk.as_ref().unwrap().to_f64();
        assert!((unk.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() < 1e-6);

        let b = tune_unknown(&view, &state.vocab, &enc, &settings).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.value, b.value);
    }

    #[test]
    fn loss_terms_decompose() {
        let ds = small_world(11);
        let enc = encoder();
        let mut state = two_task_state(&ds, &enc);
        state.vocab.wildcard_unk = Some(encode("unknown", &enc).unwrap());
        let view = ds.training_view(|c| c >= 2);
        let settings = Settings::default();
        let (lk, lu, n) = finetune_loss_terms(&view, &state.vocab, &settings).unwrap();
        assert!(n > 0 && lu > 0.0);
        let known_only = known_loss_for(
            &view.training_view(|_| true),
            &state.vocab.entries().iter().map(|e| e.embedding.to_f64()).collect::<Vec<_>>(),
            &settings,
        );
        assert!(known_only.is_ok());
        let masked = with_epochs(|t| t.sigma2 = 1.0);
        let (lk2, lu2, n2) = finetune_loss_terms(&view, &state.vocab, &masked).unwrap();
        assert_eq!((lu2, n2), (0.0, 0));
        assert_eq!(lk2, lk);
    }
}
