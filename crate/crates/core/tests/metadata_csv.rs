use seldcil::metrics::{evaluate, read_metadata_csv, read_track_pairs, write_metadata_csv, EvalConfig};
use seldcil::scene::{Direction, LabelEntry, LabelTrack};

fn track(shift: f64) -> LabelTrack {
    let mut t = LabelTrack::empty(25, 0.1);
    for f in 3..14 {
        let direction = Direction::new(40.0 + shift, -10.0).unwrap();
        t.insert(f, LabelEntry { class_id: 2, direction }).unwrap();
    }
    for f in 10..20 {
        let direction = Direction::new(-120.0 + shift, 30.0).unwrap();
        t.insert(f, LabelEntry { class_id: 7, direction }).unwrap();
    }
    t
}

#[test]
fn metadata_round_trips_through_csv() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scene.csv");
    let t = track(0.0);
    write_metadata_csv(&t, &path).unwrap();
    let back = read_metadata_csv(&path, 0.1).unwrap();
    assert_eq!(back.frames.len(), 20);
    for (a, b) in t.frames.iter().zip(&back.frames) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert_eq!(x.class_id, y.class_id);
            assert!((x.direction.azimuth_deg - y.direction.azimuth_deg).abs() < 1e-6);
            assert!((x.direction.elevation_deg - y.direction.elevation_deg).abs() < 1e-6);
        }
    }
}

#[test]
fn directory_scoring_tracks_spatial_error() {
    let (pred, reference) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for (name, shift) in [("a.csv", 5.0), ("b.csv", 30.0)] {
        write_metadata_csv(&track(shift), &pred.path().join(name)).unwrap();
        write_metadata_csv(&track(0.0), &reference.path().join(name)).unwrap();
    }
    let triples = read_track_pairs(pred.path(), reference.path(), 0.1).unwrap();
    assert_eq!(triples.iter().map(|t| t.0.as_str()).collect::<Vec<_>>(), ["a.csv", "b.csv"]);
    let pairs: Vec<_> = triples.into_iter().map(|(_, p, r)| (p, r)).collect();
    let close = evaluate(&pairs[..1], 12, &EvalConfig::default()).unwrap();
    assert_eq!(close.f1, 100.0);
    let both = evaluate(&pairs, 12, &EvalConfig::default()).unwrap();
    assert!(both.f1 < 100.0 && both.lr == 100.0 && both.le > close.le);
}
