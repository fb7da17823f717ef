use std::path::{Path, PathBuf};

use vidgs::colmap::{parse_colmap_text, read_model, CameraModel, ColmapModel};
use vidgs::Error;
use vidgs_core::decompose::SfmStatus;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/colmap").join(name)
}

#[test]
fn pinhole_model_parses() {
    let model = read_model(&fixture("pinhole")).unwrap();
    assert_eq!(model.cameras.len(), 1);
    assert_eq!(model.cameras[&1].model, CameraModel::Pinhole { fx: 30.5, fy: 31.25, cx: 16.0, cy: 12.0 });
    assert_eq!((model.cameras[&1].width, model.cameras[&1].height), (32, 24));
    assert_eq!(model.images.len(), 3);
    assert_eq!(model.images[0].points2d, vec![(16.2, 12.1, 1), (20.5, 9.75, 2)]);
    assert_eq!(model.images[1].points2d[1], (-1.0, -1.0, -1));
    assert!(model.images[2].points2d.is_empty());
    assert_eq!(model.points[0].track, vec![(1, 0), (2, 0)]);
    assert_eq!(model.points[1].color, [10, 220, 90]);

    let sfm = parse_colmap_text(&fixture("pinhole")).unwrap();
    assert_eq!(sfm.status, SfmStatus::Success);
    assert_eq!(sfm.cameras.len(), 3);
    assert_eq!(sfm.points.len(), 3);
    let cam = &sfm.cameras[1];
    assert_eq!(cam.frame_index, 2);
    assert_eq!(cam.translation, [-0.2, 0.0, 4.0]);
    // Rotation by 0.1 rad about y.
    assert!((cam.rotation[0][2] - 0.1f64.sin()).abs() < 1e-12);
    assert!((cam.rotation[0][0] - 0.1f64.cos()).abs() < 1e-12);
}

#[test]
fn simple_pinhole_uses_one_focal_length() {
    let sfm = parse_colmap_text(&fixture("simple_pinhole")).unwrap();
    assert!(sfm.is_success());
    let k = sfm.cameras[0].intrinsics;
    assert_eq!((k.fx, k.fy, k.cx, k.cy), (20.0, 20.0, 8.0, 8.0));
    assert_eq!(sfm.cameras[1].frame_index, 2);
}

#[test]
fn unknown_camera_model_is_a_failure_not_an_error() {
    let sfm = parse_colmap_text(&fixture("unknown_model")).unwrap();
    match sfm.status {
        SfmStatus::Failure(reason) => assert!(reason.contains("OPENCV"), "{reason}"),
        other => panic!("expected failure, got {other:?}"),
    }
}

#[test]
fn empty_points_file_is_a_failure() {
    let sfm = parse_colmap_text(&fixture("no_points")).unwrap();
    assert_eq!(sfm.status, SfmStatus::Failure("no points registered".into()));
}

#[test]
fn malformed_line_is_reported_with_its_number() {
    let err = read_model(&fixture("malformed")).unwrap_err();
    assert!(matches!(err, Error::Format { .. }));
    let msg = err.to_string();
    assert!(msg.contains("images.txt"), "{msg}");
    assert!(msg.contains("line 7"), "{msg}");
    assert!(msg.contains("zero.five"), "{msg}");
}

#[test]
fn missing_files_are_io_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(read_model(dir.path()), Err(Error::Io { .. })));
}

#[test]
fn wrong_parameter_count_is_rejected() {
    let err = vidgs::colmap::parse_cameras("# header\n1 PINHOLE 8 8 1.0 2.0 3.0\n", Path::new("cameras.txt")).unwrap_err();
    assert!(err.to_string().contains("line 2"), "{err}");
}

#[test]
fn text_round_trip_is_exact() {
    for name in ["pinhole", "simple_pinhole", "unknown_model"] {
        let model = read_model(&fixture(name)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        model.write(dir.path()).unwrap();
        let again = read_model(dir.path()).unwrap();
        assert_eq!(again, model, "{name}");
        assert_eq!(again.images_text(), model.images_text());
    }
}

#[test]
fn sfm_round_trip_keeps_cameras_bit_exact() {
    let sfm = parse_colmap_text(&fixture("pinhole")).unwrap();
    let dir = tempfile::tempdir().unwrap();
    ColmapModel::from_sfm(&sfm, "png").write(dir.path()).unwrap();
    let again = parse_colmap_text(dir.path()).unwrap();
    assert_eq!(again.cameras, sfm.cameras);
    assert_eq!(again.points, sfm.points);
}

#[test]
fn subranges_filter_points_by_track() {
    let model = read_model(&fixture("pinhole")).unwrap();
    let sfm = model.to_sfm(2, 3, &fixture("pinhole")).unwrap();
    assert_eq!(sfm.cameras.len(), 2);
    // Point 2 is only seen from image 1.
    assert_eq!(sfm.points.len(), 2);
    let out_of_range = model.to_sfm(3, 4, &fixture("pinhole")).unwrap();
    assert!(!out_of_range.is_success());
}
