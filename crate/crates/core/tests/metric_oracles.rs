mod common;

use flowiid_core::image_plane::ImagePlane;
use flowiid_core::metrics::{lmse, ssim, MetricReport};

#[test]
fn lmse_matches_the_oracle_with_wider_windows() {
    for seed in 0..10 {
        let p = common::random_plane(10 + seed, 3, 32, 32);
        let g = common::random_plane(50 + seed, 3, 32, 32);
        let want = common::brute_lmse(&p, &g, 8, 4);
        assert!((lmse(&p, &g, 8, 4).unwrap() - want).abs() < 1e-10);
    }
}

#[test]
fn ssim_matches_the_oracle_on_larger_images() {
    for seed in 0..4 {
        let p = common::random_plane(100 + seed, 3, 32, 32);
        let g = p.map(|v| (0.8 * v + 0.1).clamp(0.0, 1.0));
        let want = common::brute_ssim(&p, &g);
        assert!((ssim(&p, &g).unwrap() - want).abs() < 1e-8);
    }
}

#[test]
fn identical_inputs_are_perfect() {
    let g = common::random_plane(3, 1, 24, 24);
    assert!(lmse(&g, &g, 6, 3).unwrap().abs() < 1e-15);
    assert!((ssim(&g, &g).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn shape_mismatch_is_an_error() {
    let a = ImagePlane::zeros(3, 16, 16);
    let b = ImagePlane::zeros(1, 16, 16);
    assert!(ssim(&a, &b).is_err());
    assert!(lmse(&a, &b, 4, 2).is_err());
}

#[test]
fn report_rows_follow_push_order() {
    let a = common::random_plane(1, 3, 16, 16);
    let s = common::random_plane(2, 1, 16, 16);
    let mut r = MetricReport::default();
    r.push("b", (&a, &a), (&s, &s)).unwrap();
    r.push("a", (&a, &a), (&s, &s)).unwrap();
    let csv = r.to_csv();
    let stems: Vec<&str> = csv.lines().skip(1).filter_map(|l| l.split(',').next()).collect();
    assert_eq!(&stems[..2], &["b", "a"]);
}
