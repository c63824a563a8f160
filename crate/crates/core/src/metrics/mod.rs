//! Segment-based joint localization and detection metrics.
//!
//! Location-aware ER and F1 at a spatial threshold, plus class-dependent
//! localization error (LE) and recall (LR), over non-overlapping segments.

mod csv_io;
mod hungarian;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::accdoa::{direction_to_vector, norm3};
use crate::error::{invalid, Error, Result};
use crate::scene::LabelTrack;

pub use csv_io::{read_metadata_csv, read_track_pairs, write_metadata_csv};
pub use hungarian::hungarian;

/// LE reported for classes with references but no matched predictions.
pub const UNMATCHED_LE_DEG: f64 = 180.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub spatial_threshold_deg: f64,
    pub segment_s: f64,
    pub label_hop_s: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            spatial_threshold_deg: 20.0,
            segment_s: 1.0,
            label_hop_s: 0.1,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.spatial_threshold_deg > 0.0 && self.spatial_threshold_deg <= 180.0) {
            return Err(invalid("spatial_threshold_deg", format!("{} outside (0, 180]", self.spatial_threshold_deg)));
        }
        self.frames_per_segment().map(|_| ())
    }

    pub fn frames_per_segment(&self) -> Result<usize> {
        if !(self.label_hop_s > 0.0 && self.segment_s > 0.0) {
            return Err(invalid("segment_s", "segment and hop must be positive"));
        }
        let ratio = self.segment_s / self.label_hop_s;
        let n = ratio.round();
        if n < 1.0 || (ratio - n).abs() > 1e-6 {
            return Err(invalid(
                "segment_s",
                format!("{} s is not a multiple of the {} s hop", self.segment_s, self.label_hop_s),
            ));
        }
        Ok(n as usize)
    }
}

/// Angle between two unit vectors in degrees.
pub fn angular_distance(u: [f64; 3], v: [f64; 3]) -> Result<f64> {
    for w in [u, v] {
        if (norm3(w) - 1.0).abs() > 1e-6 {
            return Err(invalid("direction", format!("{w:?} is not unit norm")));
        }
    }
    // atan2 form: accurate near 0° and 180°, where arccos loses digits
    let dot = u[0] * v[0] + u[1] * v[1] + u[2] * v[2];
    let cross = norm3([
        u[1] * v[2] - u[2] * v[1],
        u[2] * v[0] - u[0] * v[2],
        u[0] * v[1] - u[1] * v[0],
    ]);
    Ok(cross.atan2(dot).to_degrees())
}

/// DOA representatives per class for one segment.
pub type SegmentCell = BTreeMap<usize, Vec<[f64; 3]>>;

/// Folds a label-rate track into segments. Each contiguous activity run of a
/// class inside a segment becomes one representative: the renormalized mean
/// of its frame vectors.
pub fn segment_fold(track: &LabelTrack, num_segments: usize, cfg: &EvalConfig) -> Result<Vec<SegmentCell>> {
    let fps = cfg.frames_per_segment()?;
    let mut cells = vec![SegmentCell::new(); num_segments];
    for (s, cell) in cells.iter_mut().enumerate() {
        let lo = (s * fps).min(track.num_frames());
        let hi = ((s + 1) * fps).min(track.num_frames());
        // class → (running sum, last frame seen)
        let mut open: BTreeMap<usize, ([f64; 3], usize)> = BTreeMap::new();
        let close = |cell: &mut SegmentCell, class: usize, sum: [f64; 3], first: [f64; 3]| {
            let n = norm3(sum);
            let rep = if n > 1e-12 { [sum[0] / n, sum[1] / n, sum[2] / n] } else { first };
            cell.entry(class).or_default().push(rep);
        };
        let mut firsts: BTreeMap<usize, [f64; 3]> = BTreeMap::new();
        for t in lo..hi {
            for e in &track.frames[t] {
                let v = direction_to_vector(e.direction);
                match open.get_mut(&e.class_id) {
                    Some((sum, last)) if *last + 1 == t => {
                        for k in 0..3 {
                            sum[k] += v[k];
                        }
                        *last = t;
                    }
                    Some((sum, _)) => {
                        close(cell, e.class_id, *sum, firsts[&e.class_id]);
                        open.insert(e.class_id, (v, t));
                        firsts.insert(e.class_id, v);
                    }
                    None => {
                        open.insert(e.class_id, (v, t));
                        firsts.insert(e.class_id, v);
                    }
                }
            }
        }
        for (class, (sum, _)) in open {
            close(cell, class, sum, firsts[&class]);
        }
    }
    Ok(cells)
}

/// Outcome of matching one class within one segment.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassSegmentMatch {
    /// `(pred index, ref index, distance in degrees)`, sorted by ref index.
    pub pairs: Vec<(usize, usize, f64)>,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

pub fn match_class_segment(preds: &[[f64; 3]], refs: &[[f64; 3]], threshold_deg: f64) -> Result<ClassSegmentMatch> {
    let mut cost = Vec::with_capacity(preds.len() * refs.len());
    for p in preds {
        for r in refs {
            cost.push(angular_distance(*p, *r)?);
        }
    }
    let mut pairs: Vec<(usize, usize, f64)> = hungarian(&cost, preds.len(), refs.len())
        .into_iter()
        .map(|(p, r)| (p, r, cost[p * refs.len() + r]))
        .collect();
    pairs.sort_by_key(|&(_, r, _)| r);
    let tp = pairs.iter().filter(|p| p.2 <= threshold_deg).count();
    Ok(ClassSegmentMatch {
        pairs,
        tp,
        fp: preds.len() - tp,
        fn_: refs.len() - tp,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricAccumulator {
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub fn_: Vec<u64>,
    pub le_sum: Vec<f64>,
    pub matched: Vec<u64>,
    pub refs: Vec<u64>,
    pub n: u64,
    pub substitutions: u64,
    pub deletions: u64,
    pub insertions: u64,
    pub segments: u64,
}

impl MetricAccumulator {
    pub fn new(classes: usize) -> Self {
        Self {
            tp: vec![0; classes],
            fp: vec![0; classes],
            fn_: vec![0; classes],
            le_sum: vec![0.0; classes],
            matched: vec![0; classes],
            refs: vec![0; classes],
            n: 0,
            substitutions: 0,
            deletions: 0,
            insertions: 0,
            segments: 0,
        }
    }

    pub fn classes(&self) -> usize {
        self.tp.len()
    }

    /// Adds one segment.
    pub fn accumulate(&mut self, preds: &SegmentCell, refs: &SegmentCell, threshold_deg: f64) -> Result<()> {
        let classes = self.classes();
        if let Some(&c) = preds.keys().chain(refs.keys()).find(|&&c| c >= classes) {
            return Err(invalid("class_id", format!("{c} outside the {classes} evaluated classes")));
        }
        let empty = Vec::new();
        let (mut seg_fn, mut seg_fp, mut seg_n) = (0u64, 0u64, 0u64);
        for c in 0..classes {
            let p = preds.get(&c).unwrap_or(&empty);
            let r = refs.get(&c).unwrap_or(&empty);
            if p.is_empty() && r.is_empty() {
                continue;
            }
            let m = match_class_segment(p, r, threshold_deg)?;
            self.tp[c] += m.tp as u64;
            self.fp[c] += m.fp as u64;
            self.fn_[c] += m.fn_ as u64;
            for &(_, _, d) in &m.pairs {
                self.le_sum[c] += d;
            }
            self.matched[c] += m.pairs.len() as u64;
            self.refs[c] += r.len() as u64;
            seg_fn += m.fn_ as u64;
            seg_fp += m.fp as u64;
            seg_n += r.len() as u64;
        }
        self.n += seg_n;
        self.substitutions += seg_fn.min(seg_fp);
        self.deletions += seg_fn.saturating_sub(seg_fp);
        self.insertions += seg_fp.saturating_sub(seg_fn);
        self.segments += 1;
        Ok(())
    }

    /// Folds a predicted and a reference track; the longer one sets the
    /// segment count.
    pub fn accumulate_tracks(&mut self, pred: &LabelTrack, reference: &LabelTrack, cfg: &EvalConfig) -> Result<()> {
        let fps = cfg.frames_per_segment()?;
        let frames = pred.num_frames().max(reference.num_frames());
        let segments = frames.div_ceil(fps);
        let p = segment_fold(pred, segments, cfg)?;
        let r = segment_fold(reference, segments, cfg)?;
        for (ps, rs) in p.iter().zip(&r) {
            self.accumulate(ps, rs, cfg.spatial_threshold_deg)?;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if other.classes() != self.classes() {
            return Err(Error::ShapeMismatch(format!(
                "merging accumulators over {} and {} classes",
                self.classes(),
                other.classes()
            )));
        }
        for c in 0..self.classes() {
            self.tp[c] += other.tp[c];
            self.fp[c] += other.fp[c];
            self.fn_[c] += other.fn_[c];
            self.le_sum[c] += other.le_sum[c];
            self.matched[c] += other.matched[c];
            self.refs[c] += other.refs[c];
        }
        self.n += other.n;
        self.substitutions += other.substitutions;
        self.deletions += other.deletions;
        self.insertions += other.insertions;
        self.segments += other.segments;
        Ok(())
    }

    pub fn finalize(&self) -> Result<JointMetrics> {
        if self.segments == 0 {
            return Err(invalid("segments", "no segments were accumulated"));
        }
        let f1 = |tp: u64, fp: u64, fn_: u64| {
            let den = 2 * tp + fp + fn_;
            if den == 0 {
                0.0
            } else {
                100.0 * (2 * tp) as f64 / den as f64
            }
        };
        let per_class: Vec<ClassMetrics> = (0..self.classes())
            .map(|c| ClassMetrics {
                class: c,
                f1: f1(self.tp[c], self.fp[c], self.fn_[c]),
                le: if self.matched[c] > 0 {
                    self.le_sum[c] / self.matched[c] as f64
                } else {
                    UNMATCHED_LE_DEG
                },
                lr: if self.refs[c] > 0 {
                    100.0 * self.matched[c] as f64 / self.refs[c] as f64
                } else {
                    0.0
                },
                tp: self.tp[c],
                fp: self.fp[c],
                fn_: self.fn_[c],
                refs: self.refs[c],
            })
            .collect();
        let with_refs: Vec<&ClassMetrics> = per_class.iter().filter(|c| c.refs > 0).collect();
        let (le, lr) = if with_refs.is_empty() {
            (UNMATCHED_LE_DEG, 0.0)
        } else {
            let k = with_refs.len() as f64;
            (
                with_refs.iter().map(|c| c.le).sum::<f64>() / k,
                with_refs.iter().map(|c| c.lr).sum::<f64>() / k,
            )
        };
        let errors = self.substitutions + self.deletions + self.insertions;
        Ok(JointMetrics {
            er: errors as f64 / self.n.max(1) as f64,
            f1: f1(self.tp.iter().sum(), self.fp.iter().sum(), self.fn_.iter().sum()),
            le,
            lr,
            per_class,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub f1: f64,
    pub le: f64,
    pub lr: f64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub refs: u64,
}

/// ER is a ratio, F1 and LR are percentages, LE is in degrees.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointMetrics {
    #[serde(rename = "ER")]
    pub er: f64,
    #[serde(rename = "F1")]
    pub f1: f64,
    #[serde(rename = "LE")]
    pub le: f64,
    #[serde(rename = "LR")]
    pub lr: f64,
    pub per_class: Vec<ClassMetrics>,
}

/// Macro F1 per group, and over all classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupedF1 {
    pub groups: Vec<f64>,
    pub overall: f64,
}

pub fn grouped_f1(metrics: &JointMetrics, groups: &[Vec<usize>]) -> Result<GroupedF1> {
    let classes = metrics.per_class.len();
    let mean = |ids: &mut dyn Iterator<Item = usize>| -> Result<f64> {
        let mut sum = 0.0;
        let mut n = 0usize;
        for c in ids {
            if c >= classes {
                return Err(invalid("class_id", format!("{c} outside the {classes} evaluated classes")));
            }
            sum += metrics.per_class[c].f1;
            n += 1;
        }
        Ok(if n == 0 { 0.0 } else { sum / n as f64 })
    };
    let groups = groups
        .iter()
        .map(|g| mean(&mut g.iter().copied()))
        .collect::<Result<Vec<_>>>()?;
    Ok(GroupedF1 {
        groups,
        overall: mean(&mut (0..classes))?,
    })
}

/// Evaluates paired prediction and reference tracks.
pub fn evaluate(pairs: &[(LabelTrack, LabelTrack)], classes: usize, cfg: &EvalConfig) -> Result<JointMetrics> {
    cfg.validate()?;
    let mut acc = MetricAccumulator::new(classes);
    for (pred, reference) in pairs {
        acc.accumulate_tracks(pred, reference, cfg)?;
    }
    acc.finalize()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::accdoa::vector_to_direction;
    use crate::scene::{Direction, LabelEntry};

    fn unit(az: f64, el: f64) -> [f64; 3] {
        direction_to_vector(Direction::new(az, el).unwrap())
    }

    fn entry(class_id: usize, az: f64, el: f64) -> LabelEntry {
        LabelEntry {
            class_id,
            direction: Direction::new(az, el).unwrap(),
        }
    }

    #[test]
    fn angular_distance_cases() {
        let x = [1.0, 0.0, 0.0];
        assert_eq!(angular_distance(x, x).unwrap(), 0.0);
        assert!((angular_distance(x, [0.0, 1.0, 0.0]).unwrap() - 90.0).abs() < 1e-12);
        assert!((angular_distance(x, [-1.0, 0.0, 0.0]).unwrap() - 180.0).abs() < 1e-12);
        assert!(angular_distance(x, [2.0, 0.0, 0.0]).is_err());
        let (u, v) = (unit(10.0, 20.0), unit(-70.0, 5.0));
        assert_eq!(angular_distance(u, v).unwrap(), angular_distance(v, u).unwrap());
    }

    #[test]
    fn fold_splits_runs() {
        let cfg = EvalConfig::default();
        let mut t = LabelTrack::empty(20, 0.1);
        for f in 0..10 {
            t.insert(f, entry(2, 40.0, 0.0)).unwrap();
        }
        for f in [10, 11, 12, 16, 17] {
            t.insert(f, entry(1, if f < 15 { 0.0 } else { 90.0 }, 0.0)).unwrap();
        }
        let cells = segment_fold(&t, 2, &cfg).unwrap();
        assert_eq!(cells[0].len(), 1);
        assert_eq!(cells[0][&2].len(), 1);
        let d = vector_to_direction(cells[0][&2][0]).unwrap();
        assert!((d.azimuth_deg - 40.0).abs() < 1e-9);
        assert!(!cells[0].contains_key(&1));
        assert_eq!(cells[1][&1].len(), 2);
        assert!(angular_distance(cells[1][&1][0], unit(0.0, 0.0)).unwrap() < 1e-6);
        assert!(angular_distance(cells[1][&1][1], unit(90.0, 0.0)).unwrap() < 1e-6);
    }

    #[test]
    fn matching_thresholds() {
        let m = match_class_segment(&[unit(5.0, 0.0)], &[unit(0.0, 0.0)], 20.0).unwrap();
        assert_eq!((m.tp, m.fp, m.fn_), (1, 0, 0));
        assert!((m.pairs[0].2 - 5.0).abs() < 1e-9);
        let m = match_class_segment(&[unit(30.0, 0.0)], &[unit(0.0, 0.0)], 20.0).unwrap();
        assert_eq!((m.tp, m.fp, m.fn_), (0, 1, 1));
        assert!((m.pairs[0].2 - 30.0).abs() < 1e-9);
        let m = match_class_segment(&[unit(0.0, 0.0), unit(100.0, 0.0)], &[unit(97.0, 0.0)], 20.0).unwrap();
        assert_eq!((m.tp, m.fp, m.fn_), (1, 1, 0));
        assert_eq!(m.pairs[0].0, 1);
    }

    #[test]
    fn segment_error_counts() {
        let mut acc = MetricAccumulator::new(3);
        let mut preds = SegmentCell::new();
        let mut refs = SegmentCell::new();
        preds.insert(0, vec![unit(0.0, 0.0)]);
        refs.insert(1, vec![unit(0.0, 0.0)]);
        acc.accumulate(&preds, &refs, 20.0).unwrap();
        assert_eq!((acc.substitutions, acc.deletions, acc.insertions), (1, 0, 0));
        let mut acc = MetricAccumulator::new(3);
        refs.insert(2, vec![unit(50.0, 0.0)]);
        acc.accumulate(&SegmentCell::new(), &refs, 20.0).unwrap();
        assert_eq!((acc.substitutions, acc.deletions, acc.insertions, acc.n), (0, 2, 0, 2));
        let before = acc.clone();
        acc.accumulate(&SegmentCell::new(), &SegmentCell::new(), 20.0).unwrap();
        assert_eq!(acc.n, before.n);
        assert_eq!(acc.finalize().unwrap(), before.finalize().unwrap());
    }

    fn scene_track() -> LabelTrack {
        let mut t = LabelTrack::empty(30, 0.1);
        for f in 0..12 {
            t.insert(f, entry(0, 30.0, 10.0)).unwrap();
        }
        for f in 5..25 {
            t.insert(f, entry(1, -120.0, -20.0)).unwrap();
        }
        t
    }

    #[test]
    fn perfect_and_empty_fixed_points() {
        let cfg = EvalConfig::default();
        let r = scene_track();
        let m = evaluate(&[(r.clone(), r.clone())], 2, &cfg).unwrap();
        assert_eq!((m.er, m.f1, m.le, m.lr), (0.0, 100.0, 0.0, 100.0));
        let m = evaluate(&[(LabelTrack::empty(30, 0.1), r)], 2, &cfg).unwrap();
        assert_eq!((m.er, m.f1, m.le, m.lr), (1.0, 0.0, 180.0, 0.0));
    }

    #[test]
    fn threshold_is_monotone() {
        let r = scene_track();
        let mut p = LabelTrack::empty(30, 0.1);
        for f in 0..12 {
            p.insert(f, entry(0, 55.0, 10.0)).unwrap();
        }
        for f in 5..25 {
            p.insert(f, entry(1, -128.0, -20.0)).unwrap();
        }
        let mut last: Option<JointMetrics> = None;
        for th in [5.0, 10.0, 20.0, 30.0, 90.0] {
            let cfg = EvalConfig { spatial_threshold_deg: th, ..EvalConfig::default() };
            let m = evaluate(&[(p.clone(), r.clone())], 2, &cfg).unwrap();
            if let Some(prev) = &last {
                assert!(m.f1 >= prev.f1 && m.er <= prev.er);
                assert_eq!(m.le, prev.le);
            }
            last = Some(m);
        }
    }

    #[test]
    fn merge_equals_joint_accumulation() {
        let cfg = EvalConfig::default();
        let r = scene_track();
        let p = r.restricted_to(&[1]);
        let mut joint = MetricAccumulator::new(2);
        joint.accumulate_tracks(&p, &r, &cfg).unwrap();
        joint.accumulate_tracks(&r, &p, &cfg).unwrap();
        let mut a = MetricAccumulator::new(2);
        a.accumulate_tracks(&p, &r, &cfg).unwrap();
        let mut b = MetricAccumulator::new(2);
        b.accumulate_tracks(&r, &p, &cfg).unwrap();
        b.merge(&a).unwrap();
        assert_eq!(b.finalize().unwrap(), joint.finalize().unwrap());
        assert!(b.merge(&MetricAccumulator::new(3)).is_err());
    }

    #[test]
    fn zero_segments_is_an_error() {
        assert!(MetricAccumulator::new(2).finalize().is_err());
    }

    #[test]
    fn grouped_f1_groups() {
        let cfg = EvalConfig::default();
        let r = scene_track();
        let m = evaluate(&[(r.restricted_to(&[1]), r)], 2, &cfg).unwrap();
        let g = grouped_f1(&m, &[vec![0], vec![1]]).unwrap();
        assert_eq!(g.groups, vec![0.0, 100.0]);
        assert_eq!(g.overall, 50.0);
        assert_eq!(grouped_f1(&m, &[vec![0, 1]]).unwrap().groups[0], g.overall);
        assert!(grouped_f1(&m, &[vec![5]]).is_err());
    }

    #[test]
    fn segment_must_divide_hop() {
        let cfg = EvalConfig { segment_s: 0.25, ..EvalConfig::default() };
        assert!(cfg.validate().is_err());
        let cfg = EvalConfig { spatial_threshold_deg: 0.0, ..EvalConfig::default() };
        assert!(cfg.validate().is_err());
    }
}
