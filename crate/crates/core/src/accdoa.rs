//! Activity-coupled Cartesian DOA targets and threshold decoding.
//!
//! Each class owns a 3-vector per frame: the unit DOA when active, zero
//! otherwise. Decoding marks a class active when the vector norm exceeds a
//! threshold and reports the normalized vector as its DOA.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;
use crate::scene::{Direction, LabelEntry, LabelTrack};

/// Default activity threshold on the ACCDOA vector norm.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Feature frames per 100 ms label frame at the default 20 ms hop.
pub const DEFAULT_FRAMES_PER_LABEL: usize = 5;

/// `(cos el cos az, cos el sin az, sin el)`.
pub fn direction_to_vector(d: Direction) -> [f64; 3] {
    let az = d.azimuth_deg.to_radians();
    let el = d.elevation_deg.to_radians();
    [el.cos() * az.cos(), el.cos() * az.sin(), el.sin()]
}

pub fn norm3(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// Inverse of [`direction_to_vector`]; azimuth is 0 at the poles.
pub fn vector_to_direction(v: [f64; 3]) -> Result<Direction> {
    let n = norm3(v);
    if !(n > 0.0) || !n.is_finite() {
        return Err(invalid("vector", "zero or non-finite vector has no direction"));
    }
    let horizontal = v[0].hypot(v[1]);
    let az = if horizontal <= 1e-15 * n {
        0.0
    } else {
        v[1].atan2(v[0]).to_degrees()
    };
    let el = (v[2] / n).clamp(-1.0, 1.0).asin().to_degrees();
    Ok(Direction {
        azimuth_deg: az,
        elevation_deg: el,
    })
}

/// `frames × classes × 3` tensor of ACCDOA vectors, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct AccdoaTensor<S> {
    pub frames: usize,
    pub classes: usize,
    pub values: Vec<S>,
}

pub type AccdoaTarget<S> = AccdoaTensor<S>;

impl<S: Scalar> AccdoaTensor<S> {
    pub fn zeros(frames: usize, classes: usize) -> Self {
        Self {
            frames,
            classes,
            values: vec![S::zero(); frames * classes * 3],
        }
    }

    pub fn from_values(frames: usize, classes: usize, values: Vec<S>) -> Result<Self> {
        if values.len() != frames * classes * 3 {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {frames}×{classes}×3 tensor",
                values.len()
            )));
        }
        Ok(Self {
            frames,
            classes,
            values,
        })
    }

    pub fn vector(&self, t: usize, c: usize) -> [S; 3] {
        let o = (t * self.classes + c) * 3;
        [self.values[o], self.values[o + 1], self.values[o + 2]]
    }

    pub fn set_vector(&mut self, t: usize, c: usize, v: [S; 3]) {
        let o = (t * self.classes + c) * 3;
        self.values[o..o + 3].copy_from_slice(&v);
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.frames == other.frames && self.classes == other.classes
    }

    /// Copy of the first `count` classes of every frame.
    pub fn leading_classes(&self, count: usize) -> Result<Self> {
        if count > self.classes {
            return Err(Error::ShapeMismatch(format!(
                "requested {count} classes from a {}-class tensor",
                self.classes
            )));
        }
        let mut values = Vec::with_capacity(self.frames * count * 3);
        for t in 0..self.frames {
            let o = t * self.classes * 3;
            values.extend_from_slice(&self.values[o..o + count * 3]);
        }
        Ok(Self {
            frames: self.frames,
            classes: count,
            values,
        })
    }

    /// Adds `part` (with fewer classes) onto the leading classes of `self`.
    pub fn add_leading(&mut self, part: &Self) {
        assert_eq!(self.frames, part.frames);
        for t in 0..self.frames {
            let dst = t * self.classes * 3;
            let src = t * part.classes * 3;
            for i in 0..part.classes * 3 {
                self.values[dst + i] += part.values[src + i];
            }
        }
    }

    /// Stacks tensors along time.
    pub fn concat(parts: &[Self]) -> Result<Self> {
        let classes = parts.first().map_or(0, |p| p.classes);
        if parts.iter().any(|p| p.classes != classes) {
            return Err(Error::ShapeMismatch("concatenated tensors differ in class count".into()));
        }
        let frames = parts.iter().map(|p| p.frames).sum();
        let mut values = Vec::with_capacity(frames * classes * 3);
        for p in parts {
            values.extend_from_slice(&p.values);
        }
        Ok(Self {
            frames,
            classes,
            values,
        })
    }

    /// Splits along time into consecutive runs of the given lengths.
    pub fn split(&self, lengths: &[usize]) -> Vec<Self> {
        let mut out = Vec::with_capacity(lengths.len());
        let mut start = 0;
        for &len in lengths {
            let row = self.classes * 3;
            out.push(Self {
                frames: len,
                classes: self.classes,
                values: self.values[start * row..(start + len) * row].to_vec(),
            });
            start += len;
        }
        out
    }

    pub fn cast<T: Scalar>(&self) -> AccdoaTensor<T> {
        AccdoaTensor {
            frames: self.frames,
            classes: self.classes,
            values: self.values.iter().map(|v| T::lit(v.as_f64())).collect(),
        }
    }
}

/// Targets for `classes` outputs, each label frame repeated `frames_per_label` times.
pub fn encode_accdoa<S: Scalar>(
    labels: &LabelTrack,
    classes: usize,
    frames_per_label: usize,
) -> Result<AccdoaTarget<S>> {
    if frames_per_label == 0 {
        return Err(invalid("frames_per_label", "must be at least 1"));
    }
    let mut target = AccdoaTensor::zeros(labels.num_frames() * frames_per_label, classes);
    for (f, frame) in labels.frames.iter().enumerate() {
        for e in frame {
            if e.class_id >= classes {
                return Err(invalid(
                    "labels",
                    format!("class {} out of range for {classes} outputs", e.class_id),
                ));
            }
            let v = direction_to_vector(e.direction).map(S::lit);
            for t in f * frames_per_label..(f + 1) * frames_per_label {
                target.set_vector(t, e.class_id, v);
            }
        }
    }
    Ok(target)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class_id: usize,
    /// Unit DOA vector.
    pub vector: [f64; 3],
}

/// Active classes per frame, sorted by class.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct FrameDetections {
    pub frames: Vec<Vec<Detection>>,
}

impl FrameDetections {
    pub fn count(&self) -> usize {
        self.frames.iter().map(Vec::len).sum()
    }

    /// Collapses to the label rate: a class is active in a label frame when
    /// it is active in more than half of its feature frames, with the
    /// normalized mean of the active vectors as DOA.
    pub fn to_label_track(&self, frames_per_label: usize, hop_s: f64, classes: usize) -> Result<LabelTrack> {
        if frames_per_label == 0 {
            return Err(invalid("frames_per_label", "must be at least 1"));
        }
        let label_frames = self.frames.len() / frames_per_label;
        let mut track = LabelTrack::empty(label_frames, hop_s);
        let mut sums = vec![([0.0f64; 3], 0usize); classes];
        for (f, out) in track.frames.iter_mut().enumerate() {
            sums.iter_mut().for_each(|s| *s = ([0.0; 3], 0));
            for frame in &self.frames[f * frames_per_label..(f + 1) * frames_per_label] {
                for d in frame {
                    let s = &mut sums[d.class_id];
                    for k in 0..3 {
                        s.0[k] += d.vector[k];
                    }
                    s.1 += 1;
                }
            }
            for (c, (v, n)) in sums.iter().enumerate() {
                if 2 * n > frames_per_label {
                    if let Ok(direction) = vector_to_direction(*v) {
                        out.push(LabelEntry {
                            class_id: c,
                            direction,
                        });
                    }
                }
            }
        }
        Ok(track)
    }
}

pub fn decode_accdoa<S: Scalar>(outputs: &AccdoaTensor<S>, threshold: f64) -> Result<FrameDetections> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(invalid("threshold", format!("{threshold} outside (0, 1)")));
    }
    if outputs.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("ACCDOA outputs".into()));
    }
    let frames = (0..outputs.frames)
        .map(|t| {
            (0..outputs.classes)
                .filter_map(|c| {
                    let v = outputs.vector(t, c).map(|x| x.as_f64());
                    let n = norm3(v);
                    (n > threshold).then(|| Detection {
                        class_id: c,
                        vector: v.map(|x| x / n),
                    })
                })
                .collect()
        })
        .collect();
    Ok(FrameDetections { frames })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dir(az: f64, el: f64) -> Direction {
        Direction::new(az, el).unwrap()
    }

    #[test]
    fn closed_form_vectors() {
        assert_eq!(direction_to_vector(dir(0.0, 0.0)), [1.0, 0.0, 0.0]);
        let v = direction_to_vector(dir(90.0, 0.0));
        assert!(v[0].abs() < 1e-15 && (v[1] - 1.0).abs() < 1e-15 && v[2] == 0.0);
        let v = direction_to_vector(dir(0.0, 45.0));
        assert!((v[0] - 0.7071).abs() < 1e-4 && v[1] == 0.0 && (v[2] - 0.7071).abs() < 1e-4);
    }

    #[test]
    fn inverse_conventions() {
        assert_eq!(vector_to_direction([1.0, 0.0, 0.0]).unwrap(), dir(0.0, 0.0));
        let pole = vector_to_direction([0.0, 0.0, 1.0]).unwrap();
        assert_eq!(pole.azimuth_deg, 0.0);
        assert!((pole.elevation_deg - 90.0).abs() < 1e-12);
        assert!(vector_to_direction([0.0, 0.0, 0.0]).is_err());
    }

    proptest! {
        #[test]
        fn direction_round_trip(az in -179.999f64..180.0, el in -89.0f64..89.0) {
            let d = vector_to_direction(direction_to_vector(dir(az, el))).unwrap();
            prop_assert!((d.azimuth_deg - az).abs() < 1e-9);
            prop_assert!((d.elevation_deg - el).abs() < 1e-9);
        }

        #[test]
        fn raising_threshold_never_adds_detections(
            vals in proptest::collection::vec(-1.0f64..1.0, 4 * 3 * 3),
            lo in 0.05f64..0.9, gap in 0.0f64..0.09,
        ) {
            let out = AccdoaTensor::from_values(4, 3, vals).unwrap();
            let a = decode_accdoa(&out, lo).unwrap();
            let b = decode_accdoa(&out, lo + gap).unwrap();
            prop_assert!(b.count() <= a.count());
            for (fa, fb) in a.frames.iter().zip(&b.frames) {
                prop_assert!(fb.iter().all(|d| fa.contains(d)));
            }
        }

        #[test]
        fn decoded_direction_is_scale_equivariant(
            vals in proptest::collection::vec(-1.0f64..1.0, 5 * 2 * 3),
            k in 0.1f64..3.0,
        ) {
            let out = AccdoaTensor::from_values(5, 2, vals.clone()).unwrap();
            let scaled = AccdoaTensor::from_values(5, 2, vals.iter().map(|v| v * k).collect()).unwrap();
            let a = decode_accdoa(&out, 0.3).unwrap();
            let b = decode_accdoa(&scaled, 0.3).unwrap();
            for (fa, fb) in a.frames.iter().zip(&b.frames) {
                for da in fa {
                    if let Some(db) = fb.iter().find(|d| d.class_id == da.class_id) {
                        for i in 0..3 {
                            prop_assert!((da.vector[i] - db.vector[i]).abs() < 1e-12);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn encode_replicates_and_checks_classes() {
        let mut labels = LabelTrack::empty(6, 0.1);
        let empty: AccdoaTarget<f64> = encode_accdoa(&labels, 4, 5).unwrap();
        assert!(empty.values.iter().all(|&v| v == 0.0));
        labels
            .insert(3, LabelEntry { class_id: 2, direction: dir(0.0, 0.0) })
            .unwrap();
        let t: AccdoaTarget<f64> = encode_accdoa(&labels, 4, 5).unwrap();
        assert_eq!(t.frames, 30);
        for frame in 0..30 {
            let want = if (15..20).contains(&frame) { [1.0, 0.0, 0.0] } else { [0.0; 3] };
            assert_eq!(t.vector(frame, 2), want);
        }
        for frame in 0..30 {
            for c in 0..4 {
                let n = norm3(t.vector(frame, c));
                assert!(n == 0.0 || (n - 1.0).abs() < 1e-9);
            }
        }
        assert!(encode_accdoa::<f64>(&labels, 2, 5).is_err());
    }

    #[test]
    fn decode_thresholds_and_rejects_non_finite() {
        let out = AccdoaTensor::from_values(1, 2, vec![0.9, 0.0, 0.0, 0.3, 0.0, 0.0]).unwrap();
        let d = decode_accdoa(&out, 0.5).unwrap();
        assert_eq!(d.frames[0], vec![Detection { class_id: 0, vector: [1.0, 0.0, 0.0] }]);
        let bad = AccdoaTensor::from_values(1, 1, vec![f64::NAN, 0.0, 0.0]).unwrap();
        assert!(matches!(decode_accdoa(&bad, 0.5), Err(Error::NonFinite(_))));
        assert!(decode_accdoa(&out, 1.0).is_err());
    }

    #[test]
    fn label_rate_collapse_uses_majority_and_mean_direction() {
        let mut det = FrameDetections { frames: vec![Vec::new(); 10] };
        for t in 0..3 {
            det.frames[t].push(Detection { class_id: 1, vector: [1.0, 0.0, 0.0] });
        }
        for t in 5..7 {
            det.frames[t].push(Detection { class_id: 1, vector: [0.0, 1.0, 0.0] });
        }
        let track = det.to_label_track(5, 0.1, 2).unwrap();
        assert_eq!(track.frames[0].len(), 1);
        assert_eq!(track.frames[0][0].direction, dir(0.0, 0.0));
        assert!(track.frames[1].is_empty(), "2 of 5 is not a majority");
    }

    #[test]
    fn concat_and_split_are_inverse() {
        let a = AccdoaTensor::from_values(2, 1, (0..6).map(f64::from).collect()).unwrap();
        let b = AccdoaTensor::from_values(1, 1, vec![9.0, 8.0, 7.0]).unwrap();
        let c = AccdoaTensor::concat(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(c.split(&[2, 1]), vec![a, b]);
    }
}
