//! Independent oracles shared by the integration tests. None of them call the
//! library routine they check; they only borrow its data types.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;

use uniow::assign::{AssignConfig, TargetKind};
use uniow::eval::{Role, SceneResult, TaskLabeling};
use uniow::rng::Lcg64;
use uniow::types::{Anchor, BBox, Detection, GroundTruth, Label, RegionFeature, Scene};

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

/// Central difference of `f` along coordinate `i` of `x`.
pub fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut plus = x.to_vec();
    plus[i] += h;
    let mut minus = x.to_vec();
    minus[i] -= h;
    (f(&plus) - f(&minus)) / (2.0 * h)
}

pub fn rel_close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()) + 1e-7
}

fn grid_box(rng: &mut Lcg64, origin: (f64, f64), spread: u64) -> BBox {
    let x1 = origin.0 + rng.below(spread) as f64;
    let y1 = origin.1 + rng.below(spread) as f64;
    let w = 4.0 + rng.below(12) as f64;
    let h = 4.0 + rng.below(12) as f64;
    BBox::new(x1, y1, x1 + w, y1 + h).unwrap()
}

// ---------------------------------------------------------------------------
// Assignment

/// One randomized assignment problem.
pub struct AssignCase {
    pub scene: Scene,
    pub scores: ndarray::Array2<f64>,
    pub cfg: AssignConfig,
}

/// Boxes on an integer grid and scores from a four-level ladder, so that equal
/// metrics (and therefore tie-breaking) occur often.
pub fn random_assign_case(rng: &mut Lcg64) -> AssignCase {
    let num_gt = 1 + rng.below(5) as usize;
    let num_anchors = 1 + rng.below(20) as usize;
    // GTs come in clusters of one or two so that some anchors are contested.
    let clusters: Vec<(f64, f64)> = (0..num_gt).map(|i| ((i / 2) as f64 * 100.0, 0.0)).collect();
    let mut gts: Vec<BBox> = Vec::new();
    for (i, &o) in clusters.iter().enumerate() {
        // a duplicated GT box gives equal metrics across GTs
        let b = if i % 2 == 1 && rng.below(3) == 0 { gts[i - 1] } else { grid_box(rng, o, 6) };
        gts.push(b);
    }
    let anchors: Vec<BBox> = (0..num_anchors)
        .map(|_| {
            let g = gts[rng.below(num_gt as u64) as usize];
            if rng.below(4) == 0 {
                g
            } else {
                let [x1, y1, x2, y2] = g.corners();
                let dx = rng.below(5) as f64 - 2.0;
                let dy = rng.below(5) as f64 - 2.0;
                BBox::new(x1 + dx, y1 + dy, x2 + dx + rng.below(3) as f64, y2 + dy).unwrap()
            }
        })
        .collect();
    let ladder = [0.0, 0.25, 0.5, 0.75, 1.0];
    let scores = ndarray::Array2::from_shape_fn((num_anchors, num_gt), |_| ladder[rng.below(5) as usize]);
    let cfg = AssignConfig {
        topk: [1, 2, 3, 10][rng.below(4) as usize],
        center_prior: rng.below(2) == 0,
        target: if rng.below(2) == 0 { TargetKind::Iou } else { TargetKind::NormalizedMetric },
        ..AssignConfig::default()
    };
    let feature = RegionFeature::new(vec![1.0]).unwrap();
    let scene = Scene {
        id: "case".into(),
        anchors: anchors.into_iter().map(|bbox| Anchor { feature: feature.clone(), bbox }).collect(),
        ground_truth: gts.into_iter().map(|bbox| GroundTruth { bbox, label: Label::Category(0) }).collect(),
    };
    AssignCase { scene, scores, cfg }
}

/// `(anchor, gt, target)` triples sorted by anchor.
pub type Pairs = Vec<(usize, usize, f64)>;

struct Table {
    metric: Vec<Vec<f64>>,
    iou: Vec<Vec<f64>>,
    cand: Vec<Vec<bool>>,
}

fn table(case: &AssignCase) -> Table {
    let anchors = case.scene.anchor_boxes();
    let gts = case.scene.gt_boxes();
    let cfg = &case.cfg;
    let mut t = Table { metric: vec![], iou: vec![], cand: vec![] };
    for (a, ab) in anchors.iter().enumerate() {
        let (mut ms, mut us, mut cs) = (vec![], vec![], vec![]);
        for (g, gb) in gts.iter().enumerate() {
            let u = box_iou(ab, gb);
            let s = case.scores[(a, g)];
            let m = if s > 0.0 && u > 0.0 { s.powf(cfg.alpha) * u.powf(cfg.beta) } else { 0.0 };
            let (cx, cy) = ((ab.x1() + ab.x2()) / 2.0, (ab.y1() + ab.y2()) / 2.0);
            let inside = cx > gb.x1() && cx < gb.x2() && cy > gb.y1() && cy < gb.y2();
            ms.push(m);
            us.push(u);
            cs.push(m > 0.0 && (!cfg.center_prior || inside));
        }
        t.metric.push(ms);
        t.iou.push(us);
        t.cand.push(cs);
    }
    t
}

fn with_targets(mut owned: Vec<(usize, usize)>, t: &Table, kind: TargetKind) -> Pairs {
    owned.sort();
    owned
        .iter()
        .map(|&(a, g)| {
            let target = match kind {
                TargetKind::Iou => t.iou[a][g],
                TargetKind::NormalizedMetric => {
                    let mates = owned.iter().filter(|p| p.1 == g);
                    let max_m = mates.clone().map(|&(b, _)| t.metric[b][g]).fold(0.0, f64::max);
                    let max_u = mates.map(|&(b, _)| t.iou[b][g]).fold(0.0, f64::max);
                    t.metric[a][g] / max_m * max_u
                }
            };
            (a, g, target)
        })
        .collect()
}

/// One-to-many by counting: an anchor is in a GT's top-k when fewer than k
/// candidates beat it (larger metric, or equal metric and lower index); a
/// contested anchor goes to the GT with the larger metric, then the lower index.
pub fn brute_o2m(case: &AssignCase) -> Pairs {
    let t = table(case);
    let (na, ng) = (t.metric.len(), case.scene.ground_truth.len());
    let selected = |a: usize, g: usize| {
        t.cand[a][g]
            && (0..na)
                .filter(|&b| t.cand[b][g] && (t.metric[b][g] > t.metric[a][g] || (t.metric[b][g] == t.metric[a][g] && b < a)))
                .count()
                < case.cfg.topk
    };
    let mut owned = Vec::new();
    for a in 0..na {
        let mut best: Option<usize> = None;
        for g in 0..ng {
            if selected(a, g) && best.is_none_or( |h| t.metric[a][g] > t.metric[a][h]) {
                best = Some(g);
            }
        }
        if let Some(g) = best {
            owned.push((a, g));
        }
    }
    with_targets(owned, &t, case.cfg.target)
}

/// One-to-one by exhaustive search: GTs are ordered by their best metric, and
/// among all injective GT-to-anchor maps the one whose per-GT sequence of
/// `(metric, -anchor)` is lexicographically largest wins.
pub fn brute_o2o(case: &AssignCase) -> Pairs {
    let t = table(case);
    let (na, ng) = (t.metric.len(), case.scene.ground_truth.len());
    let best_of = |g: usize| (0..na).filter(|&a| t.cand[a][g]).map(|a| t.metric[a][g]).fold(0.0, f64::max);
    let mut order: Vec<usize> = (0..ng).filter(|&g| best_of(g) > 0.0).collect();
    order.sort_by(|&x, &y| best_of(y).partial_cmp(&best_of(x)).unwrap().then(x.cmp(&y)));

    type Key = Vec<Option<(f64, i64)>>;
    fn search(pos: usize, order: &[usize], t: &Table, used: &mut Vec<bool>, cur: &mut Key, best: &mut Option<(Key, Vec<Option<usize>>)>, pick: &mut Vec<Option<usize>>) {
        if pos == order.len() {
            let better = match best {
                None => true,
                Some((k, _)) => cmp_key(cur, k) == std::cmp::Ordering::Greater,
            };
            if better {
                *best = Some((cur.clone(), pick.clone()));
            }
            return;
        }
        let g = order[pos];
        for a in 0..used.len() {
            if t.cand[a][g] && !used[a] {
                used[a] = true;
                cur.push(Some((t.metric[a][g], -(a as i64))));
                pick.push(Some(a));
                search(pos + 1, order, t, used, cur, best, pick);
                pick.pop();
                cur.pop();
                used[a] = false;
            }
        }
        cur.push(None);
        pick.push(None);
        search(pos + 1, order, t, used, cur, best, pick);
        pick.pop();
        cur.pop();
    }
    fn cmp_key(x: &[Option<(f64, i64)>], y: &[Option<(f64, i64)>]) -> std::cmp::Ordering {
        for (a, b) in x.iter().zip(y) {
            let o = match (a, b) {
                (None, None) => std::cmp::Ordering::Equal,
                (None, Some(_)) => std::cmp::Ordering::Less,
                (Some(_), None) => std::cmp::Ordering::Greater,
                (Some(p), Some(q)) => p.0.partial_cmp(&q.0).unwrap().then(p.1.cmp(&q.1)),
            };
            if o != std::cmp::Ordering::Equal {
                return o;
            }
        }
        std::cmp::Ordering::Equal
    }

    let mut best = None;
    search(0, &order, &t, &mut vec![false; na], &mut Vec::new(), &mut best, &mut Vec::new());
    let picks = best.map(|(_, p)| p).unwrap_or_default();
    let owned = order.iter().zip(picks).filter_map(|(&g, a)| a.map(|a| (a, g))).collect();
    with_targets(owned, &t, case.cfg.target)
}

// ---------------------------------------------------------------------------
// Evaluation

pub fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let w = (a.x2().min(b.x2()) - a.x1().max(b.x1())).max(0.0);
    let h = (a.y2().min(b.y2()) - a.y1().max(b.y1())).max(0.0);
    let inter = w * h;
    let union = (a.x2() - a.x1()) * (a.y2() - a.y1()) + (b.x2() - b.x1()) * (b.y2() - b.y1()) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    pub ap: BTreeMap<usize, Option<f64>>,
    pub map_prev_known: Option<f64>,
    pub map_curr_known: Option<f64>,
    pub map_both: Option<f64>,
    pub u_recall: Option<f64>,
    pub wi: f64,
    pub a_ose: usize,
}

/// Greedy matching, restated: walk detections best first; each claims the
/// free GT it overlaps most (lowest index on ties) if that overlap reaches `thr`.
fn greedy(dets: &[BBox], gts: &[BBox], thr: f64) -> (Vec<bool>, Vec<bool>) {
    let mut free = vec![true; gts.len()];
    let mut hit = Vec::new();
    for d in dets {
        let mut choice: Option<usize> = None;
        for g in 0..gts.len() {
            let u = box_iou(d, &gts[g]);
            if free[g] && u >= thr && choice.is_none_or( |c| u > box_iou(d, &gts[c])) {
                choice = Some(g);
            }
        }
        if let Some(g) = choice {
            free[g] = false;
        }
        hit.push(choice.is_some());
    }
    (hit, free.iter().map(|f| !f).collect())
}

/// Sum over each recall step of `1/n` times the best precision at or after it.
fn ap_envelope(flags: &[bool], n: usize) -> Option<f64> {
    if n == 0 {
        return None;
    }
    let mut prec = Vec::new();
    let mut tp = 0;
    for (k, &f) in flags.iter().enumerate() {
        tp += f as usize;
        prec.push(tp as f64 / (k + 1) as f64);
    }
    let mut ap = 0.0;
    for (k, &f) in flags.iter().enumerate() {
        if f {
            ap += prec[k..].iter().cloned().fold(0.0, f64::max) / n as f64;
        }
    }
    Some(ap)
}

pub fn metric_oracle(results: &[SceneResult], labeling: &TaskLabeling, thr: f64, wi_level: f64) -> OracleReport {
    let role = |l: Label| match l {
        Label::Unknown => Role::Unknown,
        Label::Category(c) => labeling.role(c).expect("tagged"),
    };
    let known: Vec<usize> = (0..64).filter(|&c| matches!(labeling.role(c), Some(Role::PreviouslyKnown | Role::CurrentKnown))).collect();
    // per category: (score, tp, lies on unknown GT)
    let mut pooled: BTreeMap<usize, Vec<(f64, bool, bool)>> = known.iter().map(|&c| (c, vec![])).collect();
    let mut n_gt: BTreeMap<usize, usize> = known.iter().map(|&c| (c, 0)).collect();
    let (mut unk_total, mut unk_hit, mut a_ose) = (0, 0, 0);
    for r in results {
        let mut dets: Vec<&Detection> = r.detections.iter().collect();
        dets.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
        let unknown_gt: Vec<BBox> = r.ground_truth.iter().filter(|g| role(g.label) == Role::Unknown).map(|g| g.bbox).collect();
        unk_total += unknown_gt.len();
        let unk_dets: Vec<BBox> = dets.iter().filter(|d| d.label == Label::Unknown).map(|d| d.bbox).collect();
        unk_hit += greedy(&unk_dets, &unknown_gt, thr).1.iter().filter(|&&m| m).count();
        for c in 0..64 {
            let these: Vec<&&Detection> = dets.iter().filter(|d| d.label == Label::Category(c)).collect();
            let gts: Vec<BBox> = if known.contains(&c) {
                r.ground_truth.iter().filter(|g| g.label == Label::Category(c)).map(|g| g.bbox).collect()
            } else {
                vec![]
            };
            if let Some(n) = n_gt.get_mut(&c) {
                *n += gts.len();
            }
            let (hit, _) = greedy(&these.iter().map(|d| d.bbox).collect::<Vec<_>>(), &gts, thr);
            for (d, tp) in these.iter().zip(hit) {
                let on_unknown = unknown_gt.iter().any(|u| box_iou(&d.bbox, u) >= thr);
                if !tp && on_unknown {
                    a_ose += 1;
                }
                if let Some(list) = pooled.get_mut(&c) {
                    list.push((d.score, tp, on_unknown));
                }
            }
        }
    }
    let mut ap = BTreeMap::new();
    let (mut t_sum, mut cs_sum, mut os_sum) = (0u64, 0u64, 0u64);
    for (&c, list) in pooled.iter_mut() {
        list.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        let n = n_gt[&c];
        ap.insert(c, ap_envelope(&list.iter().map(|x| x.1).collect::<Vec<_>>(), n));
        if n == 0 {
            continue;
        }
        let cut = (1..=list.len())
            .find(|&k| list[..k].iter().filter(|x| x.1).count() as f64 / n as f64 >= wi_level)
            .unwrap_or(list.len());
        for &(_, tp, on_unk) in &list[..cut] {
            match (tp, on_unk) {
                (true, _) => t_sum += 1,
                (false, true) => os_sum += 1,
                (false, false) => cs_sum += 1,
            }
        }
    }
    // P_known = T / (T + C), P_wild = T / (T + C + O); their ratio minus one,
    // reduced by hand to keep the arithmetic exact.
    let wi = if t_sum + cs_sum == 0 { 0.0 } else { ((t_sum + cs_sum + os_sum) - (t_sum + cs_sum)) as f64 / (t_sum + cs_sum) as f64 };
    let mean = |want: &dyn Fn(Role) -> bool| {
        let vals: Vec<f64> = ap.iter().filter(|(c, _)| want(labeling.role(**c).unwrap())).filter_map(|(_, v)| *v).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    OracleReport {
        map_prev_known: mean(&|r| r == Role::PreviouslyKnown),
        map_curr_known: mean(&|r| r == Role::CurrentKnown),
        map_both: mean(&|_| true),
        u_recall: (unk_total > 0).then(|| unk_hit as f64 / unk_total as f64),
        wi,
        a_ose,
        ap,
    }
}

/// Small random benchmark: up to four scenes, four categories with random roles.
pub fn random_benchmark(rng: &mut Lcg64) -> (Vec<SceneResult>, TaskLabeling) {
    let mut labeling = TaskLabeling::new();
    for c in 0..4 {
        labeling.set(c, [Role::PreviouslyKnown, Role::CurrentKnown, Role::Unknown][rng.below(3) as usize]);
    }
    let scenes = (0..1 + rng.below(4))
        .map(|_| {
            let ground_truth: Vec<GroundTruth> = (0..rng.below(6))
                .map(|i| GroundTruth {
                    bbox: grid_box(rng, ((i % 3) as f64 * 20.0, 0.0), 8),
                    label: if rng.below(5) == 0 { Label::Unknown } else { Label::Category(rng.below(4) as usize) },
                })
                .collect();
            let mut detections = Vec::new();
            for _ in 0..rng.below(10) {
                let bbox = match ground_truth.get(rng.below(ground_truth.len() as u64 + 1) as usize) {
                    Some(g) => {
                        let [x1, y1, x2, y2] = g.bbox.corners();
                        let d = rng.below(4) as f64;
                        BBox::new(x1 + d, y1, x2 + d, y2).unwrap()
                    }
                    None => grid_box(rng, (0.0, 0.0), 60),
                };
                let label = if rng.below(4) == 0 { Label::Unknown } else { Label::Category(rng.below(4) as usize) };
                detections.push(Detection { bbox, label, score: rng.next_f64() });
            }
            SceneResult { detections, ground_truth }
        })
        .collect();
    (scenes, labeling)
}

// ---------------------------------------------------------------------------
// CLI pipeline

pub fn run_cli(bin: &Path, args: &[&str]) -> std::process::Output {
    Command::new(bin).args(args).env_remove("UNIOW_LOG").output().expect("binary runs")
}

fn step(bin: &Path, config: &Path, out: &Path, args: &[&str]) {
    let mut all = vec!["--config", config.to_str().unwrap(), "--out-dir", out.to_str().unwrap()];
    all.extend_from_slice(args);
    let o = run_cli(bin, &all);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
}

/// Full seeded pipeline from `gen` to `eval`; returns the directory of each step.
pub fn pipeline(bin: &Path, config: &Path, root: &Path) -> BTreeMap<&'static str, PathBuf> {
    let dirs: BTreeMap<&str, PathBuf> =
        ["gen", "calibrate", "obj", "known", "unknown", "infer", "eval"].iter().map(|&n| (n, root.join(n))).collect();
    let p = |n: &str, f: &str| dirs[n].join(f).to_str().unwrap().to_string();
    step(bin, config, &dirs["gen"], &["gen"]);
    step(bin, config, &dirs["calibrate"], &["calibrate", "--data", &p("gen", "pretrain.scenes")]);
    let enc = p("calibrate", "encoder.uowe");
    step(bin, config, &dirs["obj"], &[
        "tune", "--stage", "obj", "--data", &p("gen", "pretrain.scenes"), "--state", &p("calibrate", "state.uows"), "--encoder", &enc,
    ]);
    step(bin, config, &dirs["known"], &["tune", "--stage", "known", "--data", &p("gen", "train.scenes"), "--state", &p("obj", "state.uows")]);
    step(bin, config, &dirs["unknown"], &[
        "tune", "--stage", "unknown", "--data", &p("gen", "train.scenes"), "--state", &p("known", "state.uows"), "--encoder", &enc,
    ]);
    step(bin, config, &dirs["infer"], &["infer", "--state", &p("unknown", "state.uows"), "--data", &p("gen", "test.scenes")]);
    step(bin, config, &dirs["eval"], &[
        "eval", "--detections", &p("infer", "detections.tsv"), "--data", &p("gen", "test.scenes"), "--state", &p("unknown", "state.uows"),
    ]);
    dirs
}

pub fn preset_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/synthetic.toml")
}
