use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use shapesig::affine::{
    apply_affine, apply_affine_labels, augment_case, make_affine_pair, sample_random_affine, AffineTransform,
    AugmentationSpec, Interp,
};
use shapesig::rvf::{self, RvfData, RvfHeader, Dtype, HEADER_LEN};
use shapesig::volume::{binarize_and_crop, normalize_intensity, Dims, Grid, LabelMap, Region, Volume};
use shapesig::Error;

fn ball(dims: Dims, r: f64) -> LabelMap {
    let c = dims.map(|n| (n as f64 - 1.0) / 2.0);
    LabelMap::from_fn(dims, |z, y, x| {
        let d = [z as f64 - c[0], y as f64 - c[1], x as f64 - c[2]];
        d.iter().map(|v| v * v).sum::<f64>() <= r * r
    })
}

fn noise_volume(dims: Dims, seed: u64) -> Volume {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = dims.iter().product();
    Volume::new(dims, (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
}

// ---- RVF ----

#[test]
fn rvf_sizes_follow_header_plus_payload() {
    let dir = tempfile::tempdir().unwrap();
    let v = Volume::new([2, 2, 2], (0..8).map(|i| i as f32).collect()).unwrap();
    let p = dir.path().join("v.rvf");
    rvf::write_volume(&p, &v).unwrap();
    assert_eq!(std::fs::metadata(&p).unwrap().len(), (HEADER_LEN + 32) as u64);
    assert_eq!(HEADER_LEN + 32, 61);

    let m = LabelMap::new([1, 1, 1], vec![1]).unwrap();
    let p = dir.path().join("m.rvf");
    rvf::write_labels(&p, &m).unwrap();
    assert_eq!(std::fs::metadata(&p).unwrap().len(), 30);
}

#[test]
fn rvf_header_layout_is_little_endian() {
    let h = RvfHeader {
        dtype: Dtype::Intensity,
        dims: [1, 2, 0x0102_0304],
        spacing: [1.0, 0.5, 2.0],
    };
    let b = h.to_bytes();
    assert_eq!(&b[..4], b"RVF1");
    assert_eq!(b[4], 1);
    assert_eq!(&b[5..9], &[1, 0, 0, 0]);
    assert_eq!(&b[13..17], &[4, 3, 2, 1]);
    assert_eq!(&b[21..25], &0.5f32.to_le_bytes());
}

#[test]
fn rvf_truncated_payload_rejected() {
    let m = LabelMap::new([2, 2, 2], vec![0, 1, 0, 1, 1, 0, 0, 0]).unwrap();
    let bytes = RvfData::Labels(m).to_bytes();
    let err = RvfData::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
    assert!(matches!(err, Error::Truncated { expected: 37, found: 34 }), "{err}");
    let err = RvfData::from_bytes(&bytes[..21]).unwrap_err();
    assert!(matches!(err, Error::Truncated { .. }), "{err}");
}

#[test]
fn rvf_label_value_two_is_domain_error() {
    let m = LabelMap::new([1, 1, 2], vec![0, 1]).unwrap();
    let mut bytes = RvfData::Labels(m).to_bytes();
    bytes[HEADER_LEN + 1] = 2;
    assert!(matches!(RvfData::from_bytes(&bytes), Err(Error::Domain(_))));
}

#[test]
fn rvf_bad_magic_and_dtype() {
    let m = LabelMap::new([1, 1, 1], vec![1]).unwrap();
    let good = RvfData::Labels(m).to_bytes();
    let mut bad = good.clone();
    bad[0] = b'X';
    assert!(matches!(RvfData::from_bytes(&bad), Err(Error::BadMagic { .. })));
    let mut bad = good.clone();
    bad[4] = 7;
    assert!(matches!(RvfData::from_bytes(&bad), Err(Error::UnknownDtype(7))));
    let mut bad = good;
    bad[5..9].copy_from_slice(&0u32.to_le_bytes());
    assert!(matches!(RvfData::from_bytes(&bad), Err(Error::Domain(_))));
}

#[test]
fn rvf_labels_read_as_volume() {
    let dir = tempfile::tempdir().unwrap();
    let m = ball([8, 8, 8], 3.0);
    let p = dir.path().join("m.rvf");
    rvf::write_labels(&p, &m).unwrap();
    assert_eq!(rvf::read_volume(&p).unwrap(), m.to_volume());
    assert!(rvf::read_labels(dir.path().join("missing.rvf")).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rvf_round_trip_is_bit_exact(
        dims in (1usize..6, 1usize..6, 1usize..6),
        bits in prop::collection::vec(any::<u32>(), 125),
        spacing in (0.1f32..5.0, 0.1f32..5.0, 0.1f32..5.0),
    ) {
        let dims = [dims.0, dims.1, dims.2];
        let spacing = [spacing.0, spacing.1, spacing.2];
        let n: usize = dims.iter().product();
        let dir = tempfile::tempdir().unwrap();

        let v = Volume::with_spacing(dims, spacing, bits[..n].iter().map(|&b| f32::from_bits(b)).collect()).unwrap();
        let p = dir.path().join("v.rvf");
        rvf::write_volume(&p, &v).unwrap();
        let back = rvf::read_volume(&p).unwrap();
        prop_assert_eq!(back.dims(), dims);
        prop_assert_eq!(back.spacing(), spacing);
        let a: Vec<u32> = v.data().iter().map(|x| x.to_bits()).collect();
        let b: Vec<u32> = back.data().iter().map(|x| x.to_bits()).collect();
        prop_assert_eq!(a, b);

        let m = LabelMap::with_spacing(dims, spacing, bits[..n].iter().map(|&b| (b & 1) as u8).collect()).unwrap();
        let p = dir.path().join("m.rvf");
        rvf::write_labels(&p, &m).unwrap();
        prop_assert_eq!(rvf::read_labels(&p).unwrap(), m);
    }

    #[test]
    fn normalization_is_idempotent_and_affine_invariant(
        seed in any::<u64>(),
        a in 0.1f32..10.0,
        b in -5.0f32..5.0,
    ) {
        let v = noise_volume([6, 5, 4], seed);
        let n1 = normalize_intensity(&v).unwrap();
        let n2 = normalize_intensity(&n1).unwrap();
        for (x, y) in n1.data().iter().zip(n2.data()) {
            prop_assert!((x - y).abs() <= 1e-5);
        }
        let shifted = Volume::new(v.dims(), v.data().iter().map(|x| a * x + b).collect()).unwrap();
        let n3 = normalize_intensity(&shifted).unwrap();
        for (x, y) in n1.data().iter().zip(n3.data()) {
            prop_assert!((x - y).abs() <= 1e-5, "{} vs {}", x, y);
        }
    }
}

#[test]
fn normalize_two_point_and_constant() {
    let v = Volume::new([1, 1, 2], vec![0.0, 2.0]).unwrap();
    assert_eq!(normalize_intensity(&v).unwrap().data(), &[-1.0, 1.0]);
    let c = Volume::new([2, 2, 2], vec![3.0; 8]).unwrap();
    assert!(normalize_intensity(&c).is_err());
}

#[test]
fn full_extent_crop_preserves_dims() {
    let src = Volume::new([3, 4, 5], (0..60).map(|i| (i % 3) as f32 * 5.0).collect()).unwrap();
    let m = binarize_and_crop(&src, 5, Region::full([3, 4, 5])).unwrap();
    assert_eq!(m.dims(), [3, 4, 5]);
    assert_eq!(m.foreground_count(), 20);
}

// ---- affine ----

#[test]
fn identity_resampling_is_exact() {
    let v = noise_volume([9, 8, 7], 3);
    for interp in [Interp::Nearest, Interp::Trilinear] {
        assert_eq!(apply_affine(&v, &AffineTransform::identity(), interp).unwrap(), v);
    }
    let m = ball([9, 8, 7], 3.0);
    assert_eq!(apply_affine_labels(&m, &AffineTransform::identity()).unwrap(), m);
}

#[test]
fn unit_translation_matches_index_shift() {
    let dims = [6, 7, 8];
    let v = noise_volume(dims, 11);
    let out = apply_affine(&v, &AffineTransform::translation([0.0, 0.0, 1.0]), Interp::Nearest).unwrap();
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let want = if x + 1 < dims[2] { v.get(z, y, x + 1) } else { 0.0 };
                assert_eq!(out.get(z, y, x), want, "at {z},{y},{x}");
            }
        }
    }
    let tri = apply_affine(&v, &AffineTransform::translation([0.0, 0.0, 1.0]), Interp::Trilinear).unwrap();
    assert_eq!(tri, out);
}

#[test]
fn scale_two_shrinks_ball_eightfold() {
    let dims = [48, 48, 48];
    let m = ball(dims, 12.0);
    let out = apply_affine_labels(&m, &AffineTransform::scaling(2.0)).unwrap();
    let oracle = ball(dims, 6.0).foreground_count() as f64;
    let got = out.foreground_count() as f64;
    assert!((got / oracle - 1.0).abs() < 0.15, "{got} vs rasterized {oracle}");
    let ratio = got / m.foreground_count() as f64;
    assert!((ratio * 8.0 - 1.0).abs() < 0.15, "ratio {ratio}");
}

#[test]
fn composed_integer_translations_are_exact() {
    let v = noise_volume([7, 7, 7], 5);
    let t2 = AffineTransform::translation([0.0, 0.0, 1.0]);
    let t1 = AffineTransform::translation([0.0, 1.0, 0.0]);
    let both = t1.compose(&t2);
    assert_eq!(both.max_abs_diff(&AffineTransform::translation([0.0, 1.0, 1.0])), 0.0);
    let stepwise = apply_affine(&apply_affine(&v, &t2, Interp::Nearest).unwrap(), &t1, Interp::Nearest).unwrap();
    assert_eq!(apply_affine(&v, &both, Interp::Nearest).unwrap(), stepwise);
}

#[test]
fn compose_identity_and_inverse() {
    let t = AffineTransform::similarity(0.9, [0.3, -1.0, 0.2], 6.0, [2.0, 0.5, -1.0]).unwrap();
    assert_eq!(t.compose(&AffineTransform::identity()), t);
    assert!(t.compose(&t.inverse().unwrap()).max_abs_diff(&AffineTransform::identity()) < 1e-9);
}

#[test]
fn singular_or_malformed_matrices_rejected() {
    let mut m = AffineTransform::identity().matrix();
    m[1][1] = 0.0;
    assert!(matches!(AffineTransform::from_matrix(m), Err(Error::Domain(_))));
    let mut m = AffineTransform::identity().matrix();
    m[3][0] = 0.5;
    assert!(AffineTransform::from_matrix(m).is_err());
}

#[test]
fn sampled_transforms_stay_within_bounds() {
    let spec = AugmentationSpec::default();
    let dims = [48, 48, 48];
    let mut rng = spec.rng(0);
    for _ in 0..1000 {
        let s = sample_random_affine(&spec, dims, &mut rng).decompose().unwrap();
        assert!(s.rotation_deg <= 8.0 + 1e-6, "{s:?}");
        assert!((0.85 - 1e-9..=1.15 + 1e-9).contains(&s.scale), "{s:?}");
        assert!(s.translation.iter().all(|t| t.abs() <= 4.8 + 1e-9), "{s:?}");
    }
}

#[test]
fn degenerate_spec_gives_identity() {
    let spec = AugmentationSpec::new(0.0, (1.0, 1.0), 0.0, 9).unwrap();
    let t = sample_random_affine(&spec, [16, 16, 16], &mut spec.rng(0));
    assert!(t.max_abs_diff(&AffineTransform::identity()) < 1e-12);
    let m = ball([16, 16, 16], 4.0);
    let (a, b) = make_affine_pair(&m, &AugmentationSpec::identity(), &mut spec.rng(1)).unwrap();
    assert_eq!(a, m);
    assert_eq!(b, m);
}

#[test]
fn invalid_specs_rejected() {
    assert!(AugmentationSpec::new(90.0, (0.9, 1.1), 0.1, 0).is_err());
    assert!(AugmentationSpec::new(8.0, (1.1, 0.9), 0.1, 0).is_err());
    assert!(AugmentationSpec::new(8.0, (0.0, 1.1), 0.1, 0).is_err());
    assert!(AugmentationSpec::new(8.0, (0.9, 1.1), 0.5, 0).is_err());
}

#[test]
fn augmentation_stream_depends_only_on_seed_and_index() {
    let spec = AugmentationSpec::default().with_seed(42);
    let dims = [32, 32, 32];
    let forward: Vec<_> = (0..5).map(|i| sample_random_affine(&spec, dims, &mut spec.rng(i))).collect();
    let backward: Vec<_> = (0..5).rev().map(|i| sample_random_affine(&spec, dims, &mut spec.rng(i))).collect();
    for (i, t) in forward.iter().enumerate() {
        assert_eq!(t, &backward[4 - i]);
    }
    assert_ne!(forward[0], forward[1]);
    let other = sample_random_affine(&spec.with_seed(43), dims, &mut spec.with_seed(43).rng(0));
    assert_ne!(other, forward[0]);
}

#[test]
fn affine_pair_counts_on_centered_ball() {
    let m = ball([48, 48, 48], 10.0);
    let n = m.foreground_count() as f64;
    let spec = AugmentationSpec::default().with_seed(1);
    for i in 0..10 {
        let (a, b) = make_affine_pair(&m, &spec, &mut spec.rng(i)).unwrap();
        for out in [&a, &b] {
            let c = out.foreground_count() as f64;
            assert!(c >= 0.85f64.powi(3) * n * 0.85 && c <= 1.15f64.powi(3) * n * 1.15, "{c} vs {n}");
            assert!(out.data().iter().all(|&v| v <= 1));
        }
        let again = make_affine_pair(&m, &spec, &mut spec.rng(i)).unwrap();
        assert_eq!(again, (a, b));
    }
}

#[test]
fn affine_pair_of_empty_map_rejected() {
    let m = LabelMap::empty([16, 16, 16]);
    let spec = AugmentationSpec::default();
    assert!(make_affine_pair(&m, &spec, &mut spec.rng(0)).is_err());
}

#[test]
fn pair_far_outside_view_loses_foreground() {
    // A single corner voxel moved by up to 10% almost surely leaves the grid at least once in 5 tries.
    let mut m = LabelMap::empty([16, 16, 16]);
    m.set(0, 0, 0, true);
    let spec = AugmentationSpec::new(0.0, (1.0, 1.0), 0.45, 0).unwrap();
    let lost = (0..20).any(|i| matches!(make_affine_pair(&m, &spec, &mut spec.rng(i)), Err(Error::ForegroundLost(5))));
    assert!(lost);
}

#[test]
fn augment_case_moves_image_and_label_together() {
    let m = ball([24, 24, 24], 6.0);
    let img = m.to_volume();
    let spec = AugmentationSpec::default().with_seed(5);
    let (v, l) = augment_case(&img, &m, &spec, &mut spec.rng(0)).unwrap();
    // voxels labelled foreground should mostly carry high interpolated intensity
    let inside: Vec<f32> = l.foreground().iter().map(|p| v.get(p[0], p[1], p[2])).collect();
    let mean = inside.iter().sum::<f32>() / inside.len() as f32;
    assert!(mean > 0.8, "{mean}");
    assert!(augment_case(&img, &ball([24, 24, 20], 6.0), &spec, &mut spec.rng(0)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn rotation_preserves_count(ax in -1.0f64..1.0, ay in -1.0f64..1.0, az in -1.0f64..1.0, angle in 0.0f64..8.0, r in 6.0f64..9.0) {
        let m = ball([32, 32, 32], r);
        let t = AffineTransform::similarity(1.0, [ax, ay, az + 1e-3], angle, [0.0; 3]).unwrap();
        let out = apply_affine_labels(&m, &t).unwrap();
        let ratio = out.foreground_count() as f64 / m.foreground_count() as f64;
        prop_assert!((ratio - 1.0).abs() <= 0.10, "ratio {}", ratio);
    }

    #[test]
    fn nearest_labels_stay_binary(seed in any::<u64>()) {
        let spec = AugmentationSpec::default().with_seed(seed);
        let m = ball([20, 20, 20], 5.0);
        let t = sample_random_affine(&spec, m.dims(), &mut spec.rng(0));
        let out = apply_affine_labels(&m, &t).unwrap();
        prop_assert!(out.data().iter().all(|&v| v <= 1));
    }
}
