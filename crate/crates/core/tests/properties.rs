use labelfield::autodiff::{Tape, Tensor};
use labelfield::checkpoint::Checkpoint;
use labelfield::dataset::{format_manifest, parse_manifest, ManifestRow};
use labelfield::encoding::{encode, encode_derivative};
use labelfield::field::{interpolate_color, ConditionalField, FieldConfig, LatentPair};
use labelfield::geometry::{cross, dot, extract_patch, norm, pixel_ray, pose_to_camera, Intrinsics, PatchPattern, Pose};
use labelfield::image::RgbImage;
use labelfield::metrics::{frechet_distance, psnr, FeatureStats};
use labelfield::nn::seeded;
use labelfield::renderer::composite;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use std::path::Path;
use std::sync::OnceLock;

fn pose() -> impl Strategy<Value = Pose> {
    (1.5f64..10.0, -180.0f64..=180.0, 0.0f64..=90.0, -2.0f64..2.0).prop_map(|(r, y, p, d)| Pose::new(r, y, p, d).unwrap())
}

fn field() -> &'static ConditionalField<f32> {
    static F: OnceLock<ConditionalField<f32>> = OnceLock::new();
    F.get_or_init(|| {
        let cfg = FieldConfig { classes: 3, styles: 2, shape_dim: 6, appearance_dim: 5, width: 24, depth: 2, color_width: 12, ..FieldConfig::default() };
        ConditionalField::new(cfg, &mut seeded(3)).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn fan_out_doubles_the_gradient(v in prop::collection::vec(-5.0f64..5.0, 1..20)) {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&Tensor::from_slice(&[v.len()], &v).unwrap().trainable()).unwrap();
        let y = tape.add(x, x).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        prop_assert!(tape.grad(x).unwrap().iter().all(|&g| g == 2.0));
    }

    #[test]
    fn camera_rotation_is_proper(p in pose()) {
        let cam = pose_to_camera(&p).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                prop_assert!((dot(cam.column(i), cam.column(j)) - want).abs() < 1e-9);
            }
        }
        let det = dot(cross(cam.column(0), cam.column(1)), cam.column(2));
        prop_assert!((det - 1.0).abs() < 1e-9);
    }

    #[test]
    fn ray_directions_are_unit(p in pose(), x in -4.0f64..36.0, y in -4.0f64..36.0) {
        let k = Intrinsics::for_image(32, 32).unwrap();
        let ray = pixel_ray(&k, &pose_to_camera(&p).unwrap(), x, y, 0.5, 8.0);
        prop_assert!((norm(ray.direction) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn patch_on_integer_grid_is_indexing(cx in 3usize..13, cy in 3usize..13, seed in 0u64..1000) {
        use rand::Rng;
        let mut rng = seeded(seed);
        let img = RgbImage::new(16, 16, (0..768).map(|_| rng.random::<f32>()).collect()).unwrap();
        let pat = PatchPattern::new([cx as f64, cy as f64], 1.0, 7).unwrap();
        let patch = extract_patch(&img, &pat).unwrap();
        for r in 0..7 {
            for c in 0..7 {
                let want = img.pixel(cx + c - 3, cy + r - 3);
                let got = patch.pixel(c, r);
                prop_assert!(want.iter().zip(&got).all(|(a, b)| a.to_bits() == b.to_bits()));
            }
        }
    }

    #[test]
    fn encoding_is_bounded_and_2_periodic(k in -4096i32..4096, freqs in 1usize..12) {
        // dyadic p keeps p + 2 exact
        let p = k as f64 / 1024.0;
        let a = encode(p, freqs).unwrap();
        prop_assert!(a.iter().all(|v| (-1.0..=1.0).contains(v)));
        prop_assert_eq!(&a, &encode(p + 2.0, freqs).unwrap());
    }

    #[test]
    fn encoding_derivative_matches_differences(p in -1.0f64..1.0, freqs in 1usize..6) {
        let h = 1e-6;
        let (hi, lo) = (encode(p + h, freqs).unwrap(), encode(p - h, freqs).unwrap());
        let d = encode_derivative(p, freqs);
        for i in 0..d.len() {
            let numeric = (hi[i] - lo[i]) / (2.0 * h);
            prop_assert!((numeric - d[i]).abs() <= 1e-6 * d[i].abs().max(1.0));
        }
    }

    #[test]
    fn compositing_partitions_unity(
        samples in prop::collection::vec((0.0f64..30.0, 1e-4f64..0.5, 0.0f64..1.0), 1..64),
    ) {
        let sigma: Vec<f64> = samples.iter().map(|s| s.0).collect();
        let delta: Vec<f64> = samples.iter().map(|s| s.1).collect();
        let rgb: Vec<[f64; 3]> = samples.iter().map(|s| [s.2; 3]).collect();
        let out = composite(&sigma, &rgb, &delta, [1.0; 3]).unwrap();
        let total: f64 = out.weights.iter().sum::<f64>() + out.t_final;
        prop_assert!((total - 1.0).abs() < 1e-5);
        prop_assert!(out.alpha.iter().all(|a| (0.0..1.0).contains(a)));
        prop_assert!(out.transmittance.windows(2).all(|w| w[1] <= w[0]));
        prop_assert!(out.rgb.iter().all(|c| (0.0..=1.0 + 1e-12).contains(c)));
    }

    #[test]
    fn field_outputs_stay_in_range(seed in 0u64..10_000, scale in 0.1f64..4.0) {
        use rand::Rng;
        let f = field();
        let mut rng = seeded(seed);
        let z = LatentPair::sample(6, 5, &mut rng);
        let (zs, za) = f.embed(&z, rng.random_range(0..3), rng.random_range(0..2)).unwrap();
        let pts: Vec<[f64; 3]> = (0..8).map(|_| [0; 3].map(|_: i32| rng.random_range(-scale..scale))).collect();
        let dirs = vec![[0.0, 0.0, 1.0]; 8];
        for (sig, col) in f.query(&pts, &dirs, &zs, &za).unwrap() {
            prop_assert!(sig.iter().all(|&s| s >= 0.0 && s.is_finite()));
            prop_assert!(col.iter().flatten().all(|&c| (0.0..=1.0).contains(&c)));
        }
    }

    #[test]
    fn colour_blend_endpoints(c in prop::collection::vec(prop::array::uniform3(0.0f32..1.0), 2..5), i in 0usize..5, j in 0usize..5) {
        let (i, j) = (i % c.len(), j % c.len());
        prop_assert_eq!(interpolate_color(&c, i, j, 0.0).unwrap(), c[i]);
        prop_assert_eq!(interpolate_color(&c, i, j, 1.0).unwrap(), c[j]);
    }

    #[test]
    fn frechet_is_symmetric_and_grows_with_mean_gap(
        a in prop::collection::vec(-1.0f64..1.0, 9),
        b in prop::collection::vec(-1.0f64..1.0, 9),
        gap in 0.0f64..3.0,
    ) {
        // A·Aᵀ + I keeps both covariances positive definite
        let spd = |v: &[f64]| {
            let m = DMatrix::from_row_slice(3, 3, v);
            &m * m.transpose() + DMatrix::identity(3, 3)
        };
        let (ca, cb) = (spd(&a), spd(&b));
        let stats = |m: f64, c: &DMatrix<f64>| FeatureStats::new(DVector::from_vec(vec![m, 0.0, 0.0]), c.clone(), 10).unwrap();
        let ab = frechet_distance(&stats(0.0, &ca), &stats(gap, &cb)).unwrap();
        let ba = frechet_distance(&stats(gap, &cb), &stats(0.0, &ca)).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-8 * ab.abs().max(1.0));
        let further = frechet_distance(&stats(0.0, &ca), &stats(gap + 0.5, &cb)).unwrap();
        prop_assert!(further > ab);
    }

    #[test]
    fn psnr_matches_straight_line_oracle(seed in 0u64..10_000) {
        use rand::Rng;
        let mut rng = seeded(seed);
        let a: Vec<f32> = (0..108).map(|_| rng.random()).collect();
        let b: Vec<f32> = (0..108).map(|_| rng.random()).collect();
        let mut se = 0.0;
        for k in 0..108 {
            se += (a[k] as f64 - b[k] as f64) * (a[k] as f64 - b[k] as f64);
        }
        let oracle = 10.0 * (1.0 / (se / 108.0)).log10();
        let got = psnr(&RgbImage::new(6, 6, a).unwrap(), &RgbImage::new(6, 6, b).unwrap(), 1.0).unwrap();
        prop_assert!((got - oracle).abs() < 1e-9);
    }

    #[test]
    fn manifest_rows_round_trip(rows in prop::collection::vec((0usize..4, 0usize..4, -180.0f64..180.0, 0.0f64..90.0, 0.5f64..9.0, -2.0f64..2.0), 0..20)) {
        let rows: Vec<ManifestRow> = rows
            .into_iter()
            .enumerate()
            .map(|(i, (c, s, y, p, r, d))| ManifestRow { path: format!("images/{i:05}.ppm"), class: c, style: s, pose: Pose::new(r, y, p, d).unwrap() })
            .collect();
        let parsed = parse_manifest(&format_manifest(&rows), Path::new("m.tsv")).unwrap();
        prop_assert_eq!(parsed, rows);
    }

    #[test]
    fn checkpoint_bytes_round_trip(
        keys in prop::collection::vec(("[a-z][a-z0-9_.]{0,8}", "[ -~]{0,12}"), 0..6),
        tensors in prop::collection::vec(prop::collection::vec(-1e6f32..1e6, 1..12), 0..4),
    ) {
        let mut ck = Checkpoint::new();
        for (k, v) in &keys {
            if k.starts_with("tensor.") || k == "schema" {
                continue;
            }
            ck.set(k, v.trim());
        }
        for (i, t) in tensors.iter().enumerate() {
            ck.push_tensor(&format!("t{i}"), vec![t.len()], t.clone()).unwrap();
        }
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        for (i, t) in tensors.iter().enumerate() {
            prop_assert_eq!(&back.tensor(&format!("t{i}")).unwrap().values, t);
        }
    }
}
