use hgm_core::degradation::{load_mask_for, MaskKind};
use hgm_core::io::{load_png, save_png};
use hgm_core::ImageTensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn png_round_trip_stays_within_half_a_level() {
    let dir = tempfile::tempdir().unwrap();
    let img = hgm_core::noise::uniform((9, 7, 3), &mut ChaCha8Rng::seed_from_u64(0));
    let path = dir.path().join("a.png");
    save_png(&path, &img).unwrap();
    let back = load_png(&path, 3).unwrap();
    assert!(back.max_abs_diff(&img).unwrap() <= 1.0 / 510.0 + 1e-12);
    let gray = load_png(&path, 1).unwrap();
    assert_eq!(gray.shape(), (9, 7, 1));
}

#[test]
fn export_clamps_out_of_range_values() {
    let dir = tempfile::tempdir().unwrap();
    let img = ImageTensor::new(1, 2, 1, vec![-0.5, 1.7]).unwrap();
    let path = dir.path().join("c.png");
    save_png(&path, &img).unwrap();
    assert_eq!(load_png(&path, 1).unwrap().as_slice(), &[0.0, 1.0]);
}

#[test]
fn mask_files_mark_nonzero_pixels_as_observed() {
    let dir = tempfile::tempdir().unwrap();
    let mask = ImageTensor::from_fn((4, 4, 1), |r, c, _| if (r + c) % 2 == 0 { 1.0 } else { 0.0 });
    let path = dir.path().join("m.png");
    save_png(&path, &mask).unwrap();
    let op = load_mask_for(&path, (4, 4, 3)).unwrap();
    assert_eq!(op.kind(), MaskKind::File);
    assert_eq!(op.observed_count(), 8 * 3);
    assert!(load_mask_for(&path, (5, 4, 3)).is_err());
    assert!(load_png(dir.path().join("missing.png"), 3).is_err());
}
