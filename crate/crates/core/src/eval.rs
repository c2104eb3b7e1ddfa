//! Distance-threshold average precision, per-class evaluation ranges,
//! frequency-group aggregation and hierarchical LCA metrics.
//!
//! Matching is greedy in score order against the nearest unmatched ground
//! truth by BEV center distance. For the hierarchical tiers, candidate
//! detections are matched in tiers (exact class first, then siblings, then
//! everything else) and foreign detections that fail to match are ignored
//! rather than counted as false positives; this keeps LCA0 <= LCA1 <= LCA2
//! by construction. AP is the trapezoidal area under the raw
//! precision-recall curve, unclipped.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Box3D;

pub const DEFAULT_TAUS: [f64; 4] = [0.5, 1.0, 2.0, 4.0];

/// Parent grouping used by the LCA tiers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParentGroup {
    Vehicle,
    Pedestrian,
    MovableObject,
}

/// Commonality grouping used for aggregated reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreqGroup {
    Many,
    Medium,
    Few,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassInfo {
    pub name: String,
    pub parent: ParentGroup,
    pub freq: FreqGroup,
    /// Evaluation range in meters from the ego position.
    pub range: f64,
}

/// Total mapping from class index to parent group, frequency group and
/// evaluation range.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassHierarchy {
    classes: Vec<ClassInfo>,
}

impl ClassHierarchy {
    pub fn new(classes: Vec<ClassInfo>) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::ConfigError("empty class hierarchy".into()));
        }
        if classes.iter().any(|c| c.range <= 0.0) {
            return Err(Error::ConfigError("evaluation ranges must be > 0".into()));
        }
        Ok(ClassHierarchy { classes })
    }

    /// Urban preset covering the prompt-table classes: 50 m range for
    /// vehicles, 40 m for pedestrians, 30 m for movable objects.
    pub fn nuscenes() -> Self {
        use FreqGroup::*;
        use ParentGroup::*;
        let spec: &[(&str, ParentGroup, FreqGroup)] = &[
            ("car", Vehicle, Many),
            ("truck", Vehicle, Medium),
            ("trailer", Vehicle, Medium),
            ("construction_vehicle", Vehicle, Medium),
            ("bicycle", Vehicle, Medium),
            ("motorcycle", Vehicle, Medium),
            ("bus", Vehicle, Medium),
            ("emergency_vehicle", Vehicle, Few),
            ("adult", Pedestrian, Many),
            ("child", Pedestrian, Few),
            ("stroller", Pedestrian, Few),
            ("construction_worker", Pedestrian, Medium),
            ("police_officer", Pedestrian, Few),
            ("personal_mobility", Pedestrian, Few),
            ("traffic_cone", MovableObject, Many),
            ("pushable_pullable", MovableObject, Few),
        ];
        ClassHierarchy::new(
            spec.iter()
                .map(|&(name, parent, freq)| ClassInfo {
                    name: name.into(),
                    parent,
                    freq,
                    range: match parent {
                        Vehicle => 50.0,
                        Pedestrian => 40.0,
                        MovableObject => 30.0,
                    },
                })
                .collect(),
        )
        .expect("preset is valid")
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn classes(&self) -> &[ClassInfo] {
        &self.classes
    }

    pub fn name(&self, class: usize) -> &str {
        &self.classes[class].name
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c.name == name)
    }

    pub fn parent(&self, class: usize) -> ParentGroup {
        self.classes[class].parent
    }

    pub fn freq(&self, class: usize) -> FreqGroup {
        self.classes[class].freq
    }

    pub fn range(&self, class: usize) -> f64 {
        self.classes[class].range
    }

    pub fn group_members(&self, group: FreqGroup) -> Vec<usize> {
        (0..self.classes.len())
            .filter(|&c| self.classes[c].freq == group)
            .collect()
    }

    /// Override every evaluation range, e.g. for long-range configurations.
    pub fn with_ranges(mut self, range: f64) -> Self {
        for c in &mut self.classes {
            c.range = range;
        }
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalDetection {
    pub box3d: Box3D,
    pub class: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalGroundTruth {
    pub box3d: Box3D,
    pub class: usize,
}

/// One scene's detections and ground truths plus the ego position the
/// evaluation ranges are measured from.
#[derive(Debug, Clone, Default)]
pub struct EvalFrame {
    pub detections: Vec<EvalDetection>,
    pub ground_truths: Vec<EvalGroundTruth>,
    pub ego: (f64, f64),
}

fn bev_dist(b: &Box3D, ego: (f64, f64)) -> f64 {
    (b.center.x - ego.0).hypot(b.center.y - ego.1)
}

fn det_dist(a: &Box3D, b: &Box3D) -> f64 {
    (a.center.x - b.center.x).hypot(a.center.y - b.center.y)
}

struct Candidate {
    frame: usize,
    det: usize,
    score: f64,
    /// Matching tier: 0 = exact class, 1 = sibling, 2 = other.
    tier: usize,
}

/// Greedy matching at one LCA level; returns (TP/FP labels with scores,
/// number of ground truths). Foreign candidates (tier > 0) that fail to
/// match are dropped from the labels entirely.
fn match_level(
    frames: &[EvalFrame],
    class: usize,
    tau: f64,
    hierarchy: &ClassHierarchy,
    level: u8,
) -> (Vec<(f64, bool)>, usize) {
    let mut candidates: Vec<Candidate> = Vec::new();
    let mut n_gt = 0usize;
    let mut gt_in_range: Vec<Vec<usize>> = Vec::with_capacity(frames.len());
    for (fi, frame) in frames.iter().enumerate() {
        let keep: Vec<usize> = frame
            .ground_truths
            .iter()
            .enumerate()
            .filter(|(_, g)| g.class == class && bev_dist(&g.box3d, frame.ego) <= hierarchy.range(class))
            .map(|(i, _)| i)
            .collect();
        n_gt += keep.len();
        gt_in_range.push(keep);
        for (di, d) in frame.detections.iter().enumerate() {
            let tier = if d.class == class {
                0
            } else if hierarchy.parent(d.class) == hierarchy.parent(class) {
                1
            } else {
                2
            };
            if tier as u8 > level {
                continue;
            }
            if bev_dist(&d.box3d, frame.ego) > hierarchy.range(d.class) {
                continue;
            }
            candidates.push(Candidate {
                frame: fi,
                det: di,
                score: d.score,
                tier,
            });
        }
    }

    // Exact-class detections claim ground truths first, so widening the
    // candidate pool can only add true positives, never displace them.
    candidates.sort_by(|a, b| {
        a.tier
            .cmp(&b.tier)
            .then(b.score.partial_cmp(&a.score).unwrap_or(std::cmp::Ordering::Equal))
            .then(a.frame.cmp(&b.frame))
            .then(a.det.cmp(&b.det))
    });

    let mut gt_matched: Vec<Vec<bool>> = frames
        .iter()
        .map(|f| vec![false; f.ground_truths.len()])
        .collect();
    let mut labels: Vec<(f64, bool)> = Vec::new();
    for c in &candidates {
        let frame = &frames[c.frame];
        let det_box = &frame.detections[c.det].box3d;
        let nearest = gt_in_range[c.frame]
            .iter()
            .filter(|&&gi| !gt_matched[c.frame][gi])
            .map(|&gi| (gi, det_dist(det_box, &frame.ground_truths[gi].box3d)))
            .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal));
        match nearest {
            Some((gi, dist)) if dist < tau => {
                gt_matched[c.frame][gi] = true;
                labels.push((c.score, true));
            }
            _ => {
                if c.tier == 0 {
                    labels.push((c.score, false));
                }
                // Unmatched foreign detections are ignored.
            }
        }
    }
    (labels, n_gt)
}

/// Trapezoidal area under the raw precision-recall curve, starting from
/// (recall 0, precision 1).
fn ap_from_labels(labels: &mut [(f64, bool)], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    labels.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut prev_recall = 0.0;
    let mut prev_precision = 1.0;
    let mut area = 0.0;
    for &(_, is_tp) in labels.iter() {
        if is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        let recall = tp as f64 / n_gt as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        area += (recall - prev_recall) * (precision + prev_precision) / 2.0;
        prev_recall = recall;
        prev_precision = precision;
    }
    area
}

fn ap_at_level(
    frames: &[EvalFrame],
    class: usize,
    tau: f64,
    hierarchy: &ClassHierarchy,
    level: u8,
) -> f64 {
    let (mut labels, n_gt) = match_level(frames, class, tau, hierarchy, level);
    ap_from_labels(&mut labels, n_gt)
}

/// Per-class AP at one distance threshold (exact-class matching).
pub fn ap_at_threshold(frames: &[EvalFrame], class: usize, tau: f64, hierarchy: &ClassHierarchy) -> f64 {
    ap_at_level(frames, class, tau, hierarchy, 0)
}

/// Per-class mAP: the mean AP over the standard distance thresholds.
pub fn map_class(frames: &[EvalFrame], class: usize, hierarchy: &ClassHierarchy) -> f64 {
    DEFAULT_TAUS
        .iter()
        .map(|&tau| ap_at_threshold(frames, class, tau, hierarchy))
        .sum::<f64>()
        / DEFAULT_TAUS.len() as f64
}

/// Arithmetic mean of per-class mAPs over one frequency group.
pub fn group_map(
    per_class_map: &BTreeMap<usize, f64>,
    hierarchy: &ClassHierarchy,
    group: FreqGroup,
) -> Result<f64> {
    let members = hierarchy.group_members(group);
    if members.is_empty() {
        return Err(Error::EmptyGroup(format!("{group:?}")));
    }
    let sum: f64 = members
        .iter()
        .map(|c| per_class_map.get(c).copied().unwrap_or(0.0))
        .sum();
    Ok(sum / members.len() as f64)
}

/// Hierarchical mAP: level 0 is exact-class, level 1 tolerates sibling
/// classes within the same parent group, level 2 ignores classes entirely.
pub fn lca_map(frames: &[EvalFrame], class: usize, level: u8, hierarchy: &ClassHierarchy) -> f64 {
    assert!(level <= 2, "LCA level must be 0, 1 or 2");
    DEFAULT_TAUS
        .iter()
        .map(|&tau| ap_at_level(frames, class, tau, hierarchy, level))
        .sum::<f64>()
        / DEFAULT_TAUS.len() as f64
}

/// Class-agnostic AP at one threshold: all ground truths pooled, every
/// detection a candidate; range filtering still follows each box's own class.
pub fn class_agnostic_ap(frames: &[EvalFrame], tau: f64, hierarchy: &ClassHierarchy) -> f64 {
    let mut labels: Vec<(f64, bool)> = Vec::new();
    let mut n_gt = 0usize;
    for frame in frames {
        let gt_keep: Vec<usize> = frame
            .ground_truths
            .iter()
            .enumerate()
            .filter(|(_, g)| bev_dist(&g.box3d, frame.ego) <= hierarchy.range(g.class))
            .map(|(i, _)| i)
            .collect();
        n_gt += gt_keep.len();
        let mut order: Vec<usize> = (0..frame.detections.len())
            .filter(|&di| {
                let d = &frame.detections[di];
                bev_dist(&d.box3d, frame.ego) <= hierarchy.range(d.class)
            })
            .collect();
        order.sort_by(|&i, &j| {
            frame.detections[j]
                .score
                .partial_cmp(&frame.detections[i].score)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(i.cmp(&j))
        });
        let mut matched = vec![false; frame.ground_truths.len()];
        for di in order {
            let d = &frame.detections[di];
            let nearest = gt_keep
                .iter()
                .filter(|&&gi| !matched[gi])
                .map(|&gi| (gi, det_dist(&d.box3d, &frame.ground_truths[gi].box3d)))
                .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal));
            match nearest {
                Some((gi, dist)) if dist < tau => {
                    matched[gi] = true;
                    labels.push((d.score, true));
                }
                _ => labels.push((d.score, false)),
            }
        }
    }
    ap_from_labels(&mut labels, n_gt)
}

/// Full metric sweep with a stable text rendering for diff-based regression
/// testing. All values live in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// class name -> tau label -> AP.
    pub ap: BTreeMap<String, BTreeMap<String, f64>>,
    pub map: BTreeMap<String, f64>,
    pub group_map: BTreeMap<String, f64>,
    /// "lca0" | "lca1" | "lca2" -> class name -> value.
    pub lca: BTreeMap<String, BTreeMap<String, f64>>,
    pub class_agnostic_ap_2m: f64,
}

fn tau_label(tau: f64) -> String {
    format!("tau_{}", format!("{tau}").replace('.', "_"))
}

/// Evaluate every hierarchy class over the accumulated frames.
pub fn evaluate(frames: &[EvalFrame], hierarchy: &ClassHierarchy) -> Result<MetricsReport> {
    let mut ap = BTreeMap::new();
    let mut map = BTreeMap::new();
    let mut per_class_map = BTreeMap::new();
    let mut lca: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    for class in 0..hierarchy.n_classes() {
        let name = hierarchy.name(class).to_string();
        let mut taus = BTreeMap::new();
        for &tau in &DEFAULT_TAUS {
            taus.insert(tau_label(tau), ap_at_threshold(frames, class, tau, hierarchy));
        }
        ap.insert(name.clone(), taus);
        let m = map_class(frames, class, hierarchy);
        map.insert(name.clone(), m);
        per_class_map.insert(class, m);
        for level in 0..=2u8 {
            lca.entry(format!("lca{level}"))
                .or_default()
                .insert(name.clone(), lca_map(frames, class, level, hierarchy));
        }
    }
    let mut groups = BTreeMap::new();
    for (label, group) in [
        ("many", FreqGroup::Many),
        ("medium", FreqGroup::Medium),
        ("few", FreqGroup::Few),
    ] {
        if !hierarchy.group_members(group).is_empty() {
            groups.insert(label.to_string(), group_map(&per_class_map, hierarchy, group)?);
        }
    }
    groups.insert(
        "all".to_string(),
        per_class_map.values().sum::<f64>() / per_class_map.len() as f64,
    );
    Ok(MetricsReport {
        ap,
        map,
        group_map: groups,
        lca,
        class_agnostic_ap_2m: class_agnostic_ap(frames, 2.0, hierarchy),
    })
}

impl MetricsReport {
    /// Stable `key = value` rendering (sorted keys, fixed precision).
    pub fn to_text(&self) -> String {
        let mut lines = Vec::new();
        for (class, taus) in &self.ap {
            for (tau, v) in taus {
                lines.push(format!("ap.{class}.{tau} = {v:.6}"));
            }
        }
        for (class, v) in &self.map {
            lines.push(format!("map.{class} = {v:.6}"));
        }
        for (group, v) in &self.group_map {
            lines.push(format!("group_map.{group} = {v:.6}"));
        }
        for (level, classes) in &self.lca {
            for (class, v) in classes {
                lines.push(format!("{level}.{class} = {v:.6}"));
            }
        }
        lines.push(format!(
            "class_agnostic_ap_2m = {:.6}",
            self.class_agnostic_ap_2m
        ));
        lines.sort();
        let mut out = lines.join("\n");
        out.push('\n');
        out
    }
}
