//! DCASE-style metadata rows: `frame,class,azimuth,elevation`, no header.

use std::path::Path;

use crate::error::{Error, Result};
use crate::scene::{Direction, LabelEntry, LabelTrack};

/// Reads a track; the frame count is one past the last listed frame.
pub fn read_metadata_csv(path: &Path, hop_s: f64) -> Result<LabelTrack> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_path(path)?;
    let mut track = LabelTrack::empty(0, hop_s);
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let fail = |detail: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            detail,
        };
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        if line == 1 && record.get(0) == Some("frame") {
            continue;
        }
        if record.len() < 4 {
            return Err(fail(format!("expected 4 fields, found {}", record.len())));
        }
        let frame: usize = record[0].parse().map_err(|_| fail(format!("bad frame index {:?}", &record[0])))?;
        let class_id: usize = record[1].parse().map_err(|_| fail(format!("bad class id {:?}", &record[1])))?;
        let az: f64 = record[2].parse().map_err(|_| fail(format!("bad azimuth {:?}", &record[2])))?;
        let el: f64 = record[3].parse().map_err(|_| fail(format!("bad elevation {:?}", &record[3])))?;
        let direction = Direction::new(az, el).map_err(|e| fail(e.to_string()))?;
        if !direction.in_scene_range() {
            log::warn!("{}:{line}: elevation {el} is outside the simulated range", path.display());
        }
        track
            .insert(frame, LabelEntry { class_id, direction })
            .map_err(|e| fail(e.to_string()))?;
    }
    Ok(track)
}

pub fn write_metadata_csv(track: &LabelTrack, path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    for (f, row) in track.frames.iter().enumerate() {
        for e in row {
            w.write_record([
                f.to_string(),
                e.class_id.to_string(),
                e.direction.azimuth_deg.to_string(),
                e.direction.elevation_deg.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Pairs every `*.csv` in `ref_dir` with the same file name in `pred_dir`.
/// A missing prediction counts as a silent track.
pub fn read_track_pairs(pred_dir: &Path, ref_dir: &Path, hop_s: f64) -> Result<Vec<(String, LabelTrack, LabelTrack)>> {
    let mut names: Vec<String> = std::fs::read_dir(ref_dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".csv"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::InvalidConfig(format!("no reference CSV files in {}", ref_dir.display())));
    }
    names
        .into_iter()
        .map(|name| {
            let reference = read_metadata_csv(&ref_dir.join(&name), hop_s)?;
            let pred_path = pred_dir.join(&name);
            let pred = if pred_path.exists() {
                read_metadata_csv(&pred_path, hop_s)?
            } else {
                log::warn!("no prediction for {name}; treating it as silent");
                LabelTrack::empty(0, hop_s)
            };
            Ok((name, pred, reference))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let mut t = LabelTrack::empty(0, 0.1);
        t.insert(0, LabelEntry { class_id: 4, direction: Direction::new(-12.345678901234, 7.1).unwrap() }).unwrap();
        t.insert(3, LabelEntry { class_id: 1, direction: Direction::new(180.0, -45.0).unwrap() }).unwrap();
        t.insert(3, LabelEntry { class_id: 0, direction: Direction::new(0.1 + 0.2, 0.0).unwrap() }).unwrap();
        write_metadata_csv(&t, &path).unwrap();
        assert_eq!(read_metadata_csv(&path, 0.1).unwrap(), t);
    }

    #[test]
    fn parses_a_row() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        std::fs::write(&path, "12,3,-90,30\n").unwrap();
        let t = read_metadata_csv(&path, 0.1).unwrap();
        assert_eq!(t.num_frames(), 13);
        let e = t.frames[12][0];
        assert_eq!((e.class_id, e.direction.azimuth_deg, e.direction.elevation_deg), (3, -90.0, 30.0));
    }

    #[test]
    fn accepts_high_elevation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        std::fs::write(&path, "0,0,10,80\n").unwrap();
        assert_eq!(read_metadata_csv(&path, 0.1).unwrap().frames[0][0].direction.elevation_deg, 80.0);
    }

    #[test]
    fn malformed_rows_report_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        std::fs::write(&path, "0,0,10,0\n1,2,abc,0\n").unwrap();
        match read_metadata_csv(&path, 0.1) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        std::fs::write(&path, "0,0,10\n").unwrap();
        assert!(matches!(read_metadata_csv(&path, 0.1), Err(Error::Parse { line: 1, .. })));
        std::fs::write(&path, "0,0,10,0\n0,0,20,0\n").unwrap();
        assert!(matches!(read_metadata_csv(&path, 0.1), Err(Error::Parse { line: 2, .. })));
    }
}
