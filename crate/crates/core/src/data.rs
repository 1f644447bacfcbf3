//! Synthetic worlds and scene/feature file I/O.
//!
//! A synthetic world places one unit prototype per category on the sphere.
//! Every prototype shares a common "objectness" direction (weight
//! `objectness`) plus a category-specific direction orthogonal to it, which is
//! what lets a class-agnostic wildcard generalise from annotated to
//! unannotated categories. Object anchors carry noisy copies of their
//! category's prototype and a jittered copy of the ground-truth box;
//! background anchors carry random features kept away from every prototype.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::binio::{write_atomic, Reader};
use crate::embedding::{dot, normalize_f64};
use crate::error::{Error, Result};
use crate::rng::Lcg64;
use crate::types::{iou, Anchor, BBox, GroundTruth, Label, RegionFeature, Scene};

/// Largest cosine a background feature may have with any prototype.
pub const BACKGROUND_MAX_COSINE: f64 = 0.3;
const IMAGE_SIZE: f64 = 640.0;
const MIN_ANCHOR_IOU: f64 = 0.6;
const MAX_ATTEMPTS: usize = 10_000;

const NAMES: &[&str] = &[
    "person", "bicycle", "car", "motorcycle", "airplane", "bus", "train", "truck", "boat",
    "traffic light", "fire hydrant", "stop sign", "parking meter", "bench", "bird", "cat", "dog",
    "horse", "sheep", "cow", "elephant", "bear", "zebra", "giraffe", "backpack", "umbrella",
    "handbag", "tie", "suitcase", "frisbee", "skis", "snowboard", "sports ball", "kite",
    "baseball bat", "baseball glove", "skateboard", "surfboard", "tennis racket", "bottle",
    "wine glass", "cup", "fork", "knife", "spoon", "bowl", "banana", "apple", "sandwich", "orange",
    "broccoli", "carrot", "hot dog", "pizza", "donut", "cake", "chair", "couch", "potted plant",
    "bed", "dining table", "toilet", "tv", "laptop", "mouse", "remote", "keyboard", "cell phone",
    "microwave", "oven", "toaster", "sink", "refrigerator", "book", "clock", "vase", "scissors",
    "teddy bear", "hair drier", "toothbrush",
];

/// Category name for the `i`-th prototype of a synthetic world.
pub fn category_name(i: usize) -> String {
    NAMES.get(i).map(|s| s.to_string()).unwrap_or_else(|| format!("category {i}"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldSpec {
    pub num_known: usize,
    pub num_unknown: usize,
    pub feature_dim: usize,
    pub feature_noise: f64,
    pub bg_anchors_per_scene: usize,
    /// Inclusive range of objects per scene.
    pub objects_per_scene: [usize; 2],
    pub scenes: usize,
    /// Minimum pairwise angle between prototypes, in degrees.
    pub min_prototype_angle: f64,
    /// Weight of the shared objectness direction in every prototype, in `[0, 1)`.
    pub objectness: f64,
    pub seed: u64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        WorldSpec {
            num_known: 8,
            num_unknown: 4,
            feature_dim: 32,
            feature_noise: 0.1,
            bg_anchors_per_scene: 24,
            objects_per_scene: [2, 6],
            scenes: 500,
            min_prototype_angle: 25.0,
            objectness: 0.15,
            seed: 0,
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.feature_dim < 2 {
            return bad(format!("feature_dim must be at least 2, got {}", self.feature_dim));
        }
        if !self.feature_noise.is_finite() || self.feature_noise < 0.0 {
            return bad(format!("feature_noise must be a finite non-negative std, got {}", self.feature_noise));
        }
        if self.objects_per_scene[0] > self.objects_per_scene[1] {
            return bad(format!("objects_per_scene range {:?} is empty", self.objects_per_scene));
        }
        if self.objects_per_scene[1] > 0 && self.num_known + self.num_unknown == 0 {
            return bad("objects requested but the world has no categories".into());
        }
        if !(0.0..180.0).contains(&self.min_prototype_angle) {
            return bad(format!("min_prototype_angle must be in [0, 180), got {}", self.min_prototype_angle));
        }
        if !(0.0..1.0).contains(&self.objectness) {
            return bad(format!("objectness must be in [0, 1), got {}", self.objectness));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub scenes: Vec<Scene>,
    /// Names of the annotatable categories; `Label::Category(i)` refers to entry `i`.
    pub category_names: Vec<String>,
    /// Names of the categories that only ever appear as `Label::Unknown`.
    pub unknown_names: Vec<String>,
}

impl Dataset {
    pub fn dim(&self) -> Option<usize> {
        self.scenes.iter().flat_map(|s| s.anchors.first()).map(|a| a.feature.dim()).next()
    }

    pub fn num_anchors(&self) -> usize {
        self.scenes.iter().map(|s| s.anchors.len()).sum()
    }

    /// Copy whose ground truth keeps only categories accepted by `annotated`;
    /// every other box (including unknown-tagged ones) is dropped, as it would
    /// be unannotated in that task's training data.
    pub fn training_view(&self, annotated: impl Fn(usize) -> bool) -> Dataset {
        let scenes = self
            .scenes
            .iter()
            .map(|s| Scene {
                ground_truth: s
                    .ground_truth
                    .iter()
                    .filter(|g| matches!(g.label, Label::Category(c) if annotated(c)))
                    .cloned()
                    .collect(),
                ..s.clone()
            })
            .collect();
        Dataset { scenes, ..self.clone() }
    }

    /// Splits off the last `tail` scenes.
    pub fn split_tail(&self, tail: usize) -> (Dataset, Dataset) {
        let cut = self.scenes.len().saturating_sub(tail);
        let head = Dataset { scenes: self.scenes[..cut].to_vec(), ..self.clone() };
        let rest = Dataset { scenes: self.scenes[cut..].to_vec(), ..self.clone() };
        (head, rest)
    }
}

/// A generated dataset together with the prototypes behind it.
#[derive(Debug, Clone)]
pub struct World {
    pub dataset: Dataset,
    /// Unit prototypes, known categories first, then unknown ones.
    pub prototypes: Vec<Vec<f64>>,
    pub objectness_direction: Vec<f64>,
    /// Per scene and anchor: the prototype index behind an object anchor, `None` for background.
    pub anchor_sources: Vec<Vec<Option<usize>>>,
}

fn random_unit(rng: &mut Lcg64, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.gaussian()).collect();
        if let Ok(u) = normalize_f64(&v) {
            return u;
        }
    }
}

fn make_prototypes(spec: &WorldSpec) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let mut rng = Lcg64::derived(spec.seed, 0);
    let dim = spec.feature_dim;
    let obj = random_unit(&mut rng, dim);
    let max_cos = spec.min_prototype_angle.to_radians().cos();
    let shared = spec.objectness.sqrt();
    let specific = (1.0 - spec.objectness).sqrt();
    let total = spec.num_known + spec.num_unknown;
    let mut protos: Vec<Vec<f64>> = Vec::with_capacity(total);
    let mut attempts = 0;
    while protos.len() < total {
        attempts += 1;
        if attempts > MAX_ATTEMPTS {
            return Err(Error::InfeasibleWorld(format!(
                "could not place {total} prototypes {}° apart in dimension {dim} with objectness {}",
                spec.min_prototype_angle, spec.objectness
            )));
        }
        let mut z = random_unit(&mut rng, dim);
        let along = dot(&z, &obj);
        z.iter_mut().zip(&obj).for_each(|(zi, oi)| *zi -= along * oi);
        let Ok(z) = normalize_f64(&z) else { continue };
        let raw: Vec<f64> = obj.iter().zip(&z).map(|(o, s)| shared * o + specific * s).collect();
        let p = normalize_f64(&raw)?;
        if protos.iter().all(|q| dot(q, &p) <= max_cos) {
            protos.push(p);
        }
    }
    Ok((obj, protos))
}

fn to_feature(v: &[f64]) -> RegionFeature {
    RegionFeature::new(v.iter().map(|&x| x as f32).collect()).expect("finite unit vector")
}

fn random_box(rng: &mut Lcg64, min_side: f64, max_side: f64) -> BBox {
    let w = rng.uniform(min_side, max_side);
    let h = rng.uniform(min_side, max_side);
    let x1 = rng.uniform(0.0, IMAGE_SIZE - w);
    let y1 = rng.uniform(0.0, IMAGE_SIZE - h);
    BBox::new(x1, y1, x1 + w, y1 + h).expect("positive size")
}

fn jitter_box(rng: &mut Lcg64, gt: &BBox) -> BBox {
    for _ in 0..100 {
        let sx = 0.05 * gt.width();
        let sy = 0.05 * gt.height();
        let c = gt.corners();
        let cand = BBox::new(
            c[0] + sx * rng.gaussian(),
            c[1] + sy * rng.gaussian(),
            c[2] + sx * rng.gaussian(),
            c[3] + sy * rng.gaussian(),
        );
        if let Ok(b) = cand {
            let (cx, cy) = b.center();
            if iou(&b, gt) >= MIN_ANCHOR_IOU && gt.contains_point(cx, cy) {
                return b;
            }
        }
    }
    *gt
}

fn generate_scene(spec: &WorldSpec, protos: &[Vec<f64>], index: usize) -> Result<(Scene, Vec<Option<usize>>)> {
    let mut rng = Lcg64::derived(spec.seed, index as u64 + 1);
    let dim = spec.feature_dim;
    let [lo, hi] = spec.objects_per_scene;
    let n_obj = lo + rng.below((hi - lo + 1) as u64) as usize;
    let mut anchors = Vec::new();
    let mut ground_truth = Vec::new();
    for _ in 0..n_obj {
        let cat = rng.below(protos.len() as u64) as usize;
        let gt_box = random_box(&mut rng, 48.0, 192.0);
        let anchor_box = jitter_box(&mut rng, &gt_box);
        let proto = &protos[cat];
        let feature = if spec.feature_noise == 0.0 {
            proto.clone()
        } else {
            let noisy: Vec<f64> = proto.iter().map(|p| p + spec.feature_noise * rng.gaussian()).collect();
            normalize_f64(&noisy)?
        };
        anchors.push((Anchor { feature: to_feature(&feature), bbox: anchor_box }, Some(cat)));
        let label = if cat < spec.num_known { Label::Category(cat) } else { Label::Unknown };
        ground_truth.push(GroundTruth { bbox: gt_box, label });
    }
    for _ in 0..spec.bg_anchors_per_scene {
        let mut tries = 0;
        let feature = loop {
            tries += 1;
            if tries > MAX_ATTEMPTS {
                return Err(Error::InfeasibleWorld(format!(
                    "no background direction with cosine <= {BACKGROUND_MAX_COSINE} to all prototypes in dimension {dim}"
                )));
            }
            let v = random_unit(&mut rng, dim);
            if protos.iter().all(|p| dot(p, &v) <= BACKGROUND_MAX_COSINE) {
                break v;
            }
        };
        let bbox = random_box(&mut rng, 32.0, 192.0);
        anchors.push((Anchor { feature: to_feature(&feature), bbox }, None));
    }
    rng.shuffle(&mut anchors);
    let (anchors, sources) = anchors.into_iter().unzip();
    Ok((Scene { id: format!("scene{index:05}"), anchors, ground_truth }, sources))
}

pub fn generate_world(spec: &WorldSpec) -> Result<World> {
    spec.validate()?;
    let (obj, prototypes) = make_prototypes(spec)?;
    let (scenes, anchor_sources) = (0..spec.scenes)
        .map(|i| generate_scene(spec, &prototypes, i))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .unzip();
    let dataset = Dataset {
        scenes,
        category_names: (0..spec.num_known).map(category_name).collect(),
        unknown_names: (spec.num_known..spec.num_known + spec.num_unknown).map(category_name).collect(),
    };
    Ok(World { dataset, prototypes, objectness_direction: obj, anchor_sources })
}

pub fn generate(spec: &WorldSpec) -> Result<Dataset> {
    Ok(generate_world(spec)?.dataset)
}

// ---------------------------------------------------------------------------
// Feature file: "UOWF", version u32, dim u32, count u64, then count*dim f32, all little-endian.

pub const FEATURE_MAGIC: &[u8; 4] = b"UOWF";
pub const FEATURE_VERSION: u32 = 1;
pub const SCENE_MAGIC: &str = "UOWSCENES";
pub const SCENE_VERSION: u32 = 1;

pub fn feature_bytes(dim: usize, rows: &[&RegionFeature]) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + rows.len() * dim * 4);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    out.extend_from_slice(&(rows.len() as u64).to_le_bytes());
    for r in rows {
        for &x in r.as_slice() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

/// Parses a feature file into `(dim, rows)`.
pub fn features_from_bytes(bytes: &[u8]) -> Result<(usize, Vec<Vec<f32>>)> {
    const WHAT: &str = "feature";
    let mut r = Reader::new(bytes, WHAT);
    if r.take(4)? != FEATURE_MAGIC {
        return Err(Error::BadMagic { what: WHAT, expected: "UOWF" });
    }
    let version = r.u32()?;
    if version != FEATURE_VERSION {
        return Err(Error::VersionMismatch { what: WHAT, found: version, expected: FEATURE_VERSION });
    }
    let dim = r.u32()? as usize;
    let count = r.u64()? as usize;
    let needed = count.checked_mul(dim).and_then(|n| n.checked_mul(4)).ok_or(Error::Truncated(WHAT))?;
    if bytes.len() - r.position() < needed {
        return Err(Error::Truncated(WHAT));
    }
    let mut rows = Vec::with_capacity(count);
    for _ in 0..count {
        rows.push((0..dim).map(|_| r.f32()).collect::<Result<Vec<_>>>()?);
    }
    if !r.is_empty() {
        return Err(Error::Malformed { what: WHAT, line: 0, message: "trailing bytes".into() });
    }
    Ok((dim, rows))
}

fn features_path_for(scene_path: &Path) -> PathBuf {
    scene_path.with_extension("uowf")
}

fn fmt_box(out: &mut String, b: &BBox) {
    let [x1, y1, x2, y2] = b.corners();
    let _ = write!(out, " {x1} {y1} {x2} {y2}");
}

/// Renders the scene text file; `features_name` is written into the header.
pub fn scene_text(dataset: &Dataset, features_name: &str) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{SCENE_MAGIC} {SCENE_VERSION}");
    let _ = writeln!(out, "features {features_name}");
    let _ = writeln!(out, "dim {}", dataset.dim().unwrap_or(0));
    for (i, name) in dataset.category_names.iter().enumerate() {
        let _ = writeln!(out, "category {i} {name}");
    }
    for name in &dataset.unknown_names {
        let _ = writeln!(out, "unknown {name}");
    }
    let mut row = 0usize;
    for scene in &dataset.scenes {
        let _ = writeln!(out, "scene {}", scene.id);
        for a in &scene.anchors {
            let _ = write!(out, "anchor {row}");
            fmt_box(&mut out, &a.bbox);
            out.push('\n');
            row += 1;
        }
        for g in &scene.ground_truth {
            let _ = write!(out, "gt {}", g.label);
            fmt_box(&mut out, &g.bbox);
            out.push('\n');
        }
    }
    out
}

/// Writes `path` (scene text) and a sibling `.uowf` feature file.
/// Scene text and feature file bytes; the text refers to the features as `features_name`.
pub fn scene_file_bytes(dataset: &Dataset, features_name: &str) -> Result<(String, Vec<u8>)> {
    let dim = dataset.dim().unwrap_or(0);
    if let Some(s) = dataset.scenes.iter().find(|s| s.id.is_empty() || s.id.contains(char::is_whitespace)) {
        return Err(Error::InvalidConfig(format!("scene id {:?} must be non-empty without whitespace", s.id)));
    }
    let rows: Vec<&RegionFeature> = dataset.scenes.iter().flat_map(|s| s.anchors.iter().map(|a| &a.feature)).collect();
    if let Some(bad) = rows.iter().find(|r| r.dim() != dim) {
        return Err(Error::DimensionMismatch { expected: dim, actual: bad.dim() });
    }
    Ok((scene_text(dataset, features_name), feature_bytes(dim, &rows)))
}

/// Writes `path` and its sibling `.uowf` feature file.
pub fn write_scenes(dataset: &Dataset, path: &Path) -> Result<()> {
    let feat_path = features_path_for(path);
    let feat_name = feat_path.file_name().and_then(|n| n.to_str()).unwrap_or("features.uowf").to_string();
    let (text, features) = scene_file_bytes(dataset, &feat_name)?;
    write_atomic(&feat_path, &features)?;
    write_atomic(path, text.as_bytes())
}

fn parse_box(fields: &[&str], line: usize) -> Result<BBox> {
    const WHAT: &str = "scene";
    if fields.len() != 4 {
        return Err(Error::Malformed { what: WHAT, line, message: format!("expected 4 box coordinates, got {}", fields.len()) });
    }
    let mut c = [0.0; 4];
    for (slot, f) in c.iter_mut().zip(fields) {
        *slot = f.parse().map_err(|_| Error::Malformed { what: WHAT, line, message: format!("bad coordinate {f:?}") })?;
    }
    BBox::new(c[0], c[1], c[2], c[3]).map_err(|e| Error::Malformed { what: WHAT, line, message: e.to_string() })
}

/// Parses scene text given the already-loaded feature rows.
pub fn parse_scene_text(text: &str, features: &(usize, Vec<Vec<f32>>)) -> Result<Dataset> {
    const WHAT: &str = "scene";
    let (feat_dim, rows) = features;
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, header) = lines.next().ok_or(Error::BadMagic { what: WHAT, expected: SCENE_MAGIC })?;
    let mut head = header.split_whitespace();
    if head.next() != Some(SCENE_MAGIC) {
        return Err(Error::BadMagic { what: WHAT, expected: SCENE_MAGIC });
    }
    let version: u32 = head
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or(Error::Malformed { what: WHAT, line: 1, message: "missing version".into() })?;
    if version != SCENE_VERSION {
        return Err(Error::VersionMismatch { what: WHAT, found: version, expected: SCENE_VERSION });
    }

    let malformed = |line: usize, message: String| Error::Malformed { what: WHAT, line, message };
    let mut dataset = Dataset { scenes: Vec::new(), category_names: Vec::new(), unknown_names: Vec::new() };
    let mut declared_dim = None;
    let mut ids = HashSet::new();
    for (ln, raw) in lines {
        let line = raw.trim_end();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
        let fields: Vec<&str> = rest.split_whitespace().collect();
        match key {
            "features" => {}
            "dim" => {
                let d: usize = rest.trim().parse().map_err(|_| malformed(ln, format!("bad dim {rest:?}")))?;
                if d != *feat_dim && !rows.is_empty() {
                    return Err(Error::FeatureDimMismatch { declared: d, found: *feat_dim });
                }
                declared_dim = Some(d);
            }
            "category" => {
                let (idx, name) = rest.split_once(' ').ok_or_else(|| malformed(ln, "category needs index and name".into()))?;
                let idx: usize = idx.parse().map_err(|_| malformed(ln, format!("bad category index {idx:?}")))?;
                if idx != dataset.category_names.len() {
                    return Err(malformed(ln, format!("category index {idx} out of order")));
                }
                dataset.category_names.push(name.to_string());
            }
            "unknown" => dataset.unknown_names.push(rest.to_string()),
            "scene" => {
                let id = rest.trim();
                if id.is_empty() || !ids.insert(id.to_string()) {
                    return Err(malformed(ln, format!("missing or duplicate scene id {id:?}")));
                }
                dataset.scenes.push(Scene { id: id.to_string(), anchors: Vec::new(), ground_truth: Vec::new() });
            }
            "anchor" | "gt" => {
                let scene = dataset.scenes.last_mut().ok_or_else(|| malformed(ln, format!("{key} before any scene")))?;
                let Some((&first, coords)) = fields.split_first() else {
                    return Err(malformed(ln, format!("empty {key} record")));
                };
                let bbox = parse_box(coords, ln)?;
                if key == "anchor" {
                    let row: usize = first.parse().map_err(|_| malformed(ln, format!("bad feature row {first:?}")))?;
                    let values = rows.get(row).ok_or_else(|| malformed(ln, format!("feature row {row} out of range")))?;
                    let feature = RegionFeature::new(values.clone()).map_err(|e| malformed(ln, e.to_string()))?;
                    scene.anchors.push(Anchor { feature, bbox });
                } else {
                    let label: Label = first.parse().map_err(|e: String| malformed(ln, e))?;
                    if let Label::Category(c) = label {
                        if c >= dataset.category_names.len() {
                            return Err(malformed(ln, format!("category {c} not declared")));
                        }
                    }
                    scene.ground_truth.push(GroundTruth { bbox, label });
                }
            }
            other => return Err(malformed(ln, format!("unknown record {other:?}"))),
        }
    }
    if declared_dim.is_none() {
        return Err(malformed(0, "missing dim record".into()));
    }
    Ok(dataset)
}

fn features_name(text: &str) -> Option<&str> {
    text.lines().find_map(|l| l.strip_prefix("features ")).map(str::trim)
}

pub fn read_scenes(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if !text.starts_with(SCENE_MAGIC) {
        return Err(Error::BadMagic { what: "scene", expected: SCENE_MAGIC });
    }
    let feat_path = match features_name(&text) {
        Some(name) => path.parent().unwrap_or(Path::new(".")).join(name),
        None => features_path_for(path),
    };
    let bytes = std::fs::read(&feat_path).map_err(|e| Error::io(&feat_path, e))?;
    let features = features_from_bytes(&bytes)?;
    parse_scene_text(&text, &features)
}
