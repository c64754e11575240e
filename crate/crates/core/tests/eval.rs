use std::path::PathBuf;

use mvbigan::dataio::{
    build_mnist_dataset, build_synthetic_dataset, make_quarter_views, parse_idx_bytes, IdxArray, Mnist,
    SyntheticSpec, TaskSpec, MISSING, PIXELS, SIDE,
};
use mvbigan::eval::{
    encode_grid, input_canvas, parse_pgm, render_grid, sample_conditional, sample_conditional_from_noise,
    seeded_rng, synthetic_report, variance_metric, variance_profile, GridRow, VarianceProfile,
};
use mvbigan::netdef::{encode_views, generate, init_model, ArchConfig, ModelBundle, ViewBatch};
use mvbigan::trainer::synthetic_arch;
use mvbigan::view::SubsetMask;
use mvbigan::Error;
use ndarray::Array2;
use rand::Rng;

fn quarters_model() -> ModelBundle {
    let mut arch = ArchConfig::mnist_quarters().with_width(16);
    arch.latent_dim = 6;
    init_model(&arch, 5).unwrap()
}

fn fake_mnist(n: usize, seed: u64) -> Mnist {
    let mut rng = seeded_rng(seed);
    Mnist {
        images: IdxArray {
            dims: vec![n, SIDE, SIDE],
            data: (0..n * PIXELS).map(|_| rng.random::<f32>()).collect(),
        },
        labels: (0..n).map(|i| (i % 10) as u8).collect(),
    }
}

fn image(seed: u64) -> Vec<f32> {
    let mut rng = seeded_rng(seed);
    (0..PIXELS).map(|_| rng.random::<f32>()).collect()
}

#[test]
fn zero_noise_gives_generator_at_the_view_mean() {
    let model = quarters_model();
    let vs = make_quarter_views(&image(1))
        .unwrap()
        .restrict(&SubsetMask::from_bits(&[1, 0, 1, 0], 4).unwrap())
        .unwrap();
    let samples = sample_conditional_from_noise(&model, &vs, &Array2::zeros((3, 6))).unwrap();
    let batch = ViewBatch::from_viewsets(std::slice::from_ref(&vs)).unwrap();
    let lat = encode_views(&model, &batch, false).unwrap().remove(0);
    let z = Array2::from_shape_fn((1, 6), |(_, j)| lat.mu[j] as f32);
    let expected = generate(&model, z.view(), false).unwrap();
    for s in &samples {
        for (a, b) in s.iter().zip(expected.row(0)) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}

#[test]
fn sampling_is_reproducible_and_in_range() {
    let model = quarters_model();
    let vs = make_quarter_views(&image(2)).unwrap();
    let a = sample_conditional(&model, &vs, 5, &mut seeded_rng(9)).unwrap();
    let b = sample_conditional(&model, &vs, 5, &mut seeded_rng(9)).unwrap();
    let c = sample_conditional(&model, &vs, 5, &mut seeded_rng(10)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(a.len(), 5);
    assert!(a.iter().all(|s| s.len() == PIXELS && s.iter().all(|&x| x > 0.0 && x < 1.0)));
    assert!(matches!(
        sample_conditional(&model, &vs, 0, &mut seeded_rng(0)),
        Err(Error::TooFewSamples(0))
    ));
}

/// Welford's single-pass algorithm, independent of the two-pass metric.
fn welford(samples: &[Vec<f32>]) -> f64 {
    let dims = samples[0].len();
    let mut total = 0.0;
    for d in 0..dims {
        let (mut mean, mut m2) = (0.0f64, 0.0f64);
        for (n, s) in samples.iter().enumerate() {
            let x = s[d] as f64;
            let delta = x - mean;
            mean += delta / (n + 1) as f64;
            m2 += delta * (x - mean);
        }
        total += m2 / samples.len() as f64;
    }
    total / dims as f64
}

#[test]
fn variance_metric_matches_welford() {
    let mut rng = seeded_rng(3);
    for m in [2, 7, 64] {
        let samples: Vec<Vec<f32>> = (0..m).map(|_| (0..11).map(|_| rng.random::<f32>() * 4.0 - 2.0).collect()).collect();
        assert!((variance_metric(&samples).unwrap() - welford(&samples)).abs() < 1e-10);
    }
}

#[test]
fn variance_metric_is_shift_invariant_and_scales_quadratically() {
    let mut rng = seeded_rng(4);
    let samples: Vec<Vec<f32>> = (0..32).map(|_| (0..6).map(|_| rng.random::<f32>()).collect()).collect();
    let v = variance_metric(&samples).unwrap();
    let shifted: Vec<Vec<f32>> = samples.iter().map(|s| s.iter().map(|x| x + 3.0).collect()).collect();
    let scaled: Vec<Vec<f32>> = samples.iter().map(|s| s.iter().map(|x| x * 2.0).collect()).collect();
    assert!((variance_metric(&shifted).unwrap() - v).abs() < 1e-5);
    assert!((variance_metric(&scaled).unwrap() - 4.0 * v).abs() < 1e-9);
    assert!(variance_metric(&[vec![1.0, 2.0], vec![1.0]]).is_err());
}

#[test]
fn profile_summaries() {
    let p = VarianceProfile::from_items(vec![vec![4.0, 2.0, 1.0], vec![3.0, 3.5, 1.0]]).unwrap();
    assert_eq!(p.step_means, vec![3.5, 2.75, 1.0]);
    assert_eq!(p.monotone, vec![true, false]);
    assert_eq!(p.fraction_monotone, 0.5);
    assert!(p.population_decreasing());
    assert!((p.mean_ratio() - (0.25 + 1.0 / 3.0) / 2.0).abs() < 1e-12);
    let json: serde_json::Value = serde_json::from_str(&p.to_json()).unwrap();
    assert_eq!(json["step_means"][1], 2.75);
    assert!(VarianceProfile::from_items(vec![vec![1.0], vec![1.0, 2.0]]).is_err());
}

#[test]
fn variance_profile_runs_on_quarters() {
    let model = quarters_model();
    let data = build_mnist_dataset(&TaskSpec::quarters(), &fake_mnist(3, 1), 3, 0).unwrap();
    let p = variance_profile(&model, &data, 4, 6, 11).unwrap();
    assert_eq!(p.per_item.len(), 3);
    assert!(p.per_item.iter().all(|v| v.len() == 4 && v.iter().all(|x| x.is_finite() && *x >= 0.0)));
    assert_eq!(p, variance_profile(&model, &data, 4, 6, 11).unwrap());
    assert!(variance_profile(&model, &data, 5, 6, 11).is_err());
}

#[test]
fn canvas_places_available_quarters() {
    let task = TaskSpec::quarters();
    let img = image(6);
    let full = make_quarter_views(&img).unwrap();
    assert_eq!(input_canvas(&task, &full).unwrap(), img);
    let empty = full.restrict(&SubsetMask::empty(4)).unwrap();
    assert!(input_canvas(&task, &empty).unwrap().iter().all(|&x| x == MISSING));
    let br = full.restrict(&SubsetMask::from_bits(&[0, 0, 0, 1], 4).unwrap()).unwrap();
    let c = input_canvas(&task, &br).unwrap();
    assert_eq!(c[0], MISSING);
    assert_eq!(c[SIDE * SIDE - 1], img[SIDE * SIDE - 1]);
    assert_eq!(c[14 * SIDE + 14], img[14 * SIDE + 14]);
    assert_eq!(c[14 * SIDE + 13], MISSING);
}

#[test]
fn grid_roundtrips_through_pgm() {
    let cell = |v: f32| vec![v; 6];
    let rows = vec![
        GridRow {
            input: cell(0.0),
            samples: vec![cell(1.0), cell(0.5)],
        },
        GridRow {
            input: cell(-1.0),
            samples: vec![cell(2.0), cell(0.25)],
        },
    ];
    let bytes = encode_grid(&rows, 2, 3).unwrap();
    let (w, h, px) = parse_pgm(&bytes).unwrap();
    assert_eq!((w, h), (9, 4));
    assert_eq!(&px[0..9], &[0, 0, 0, 255, 255, 255, 128, 128, 128]);
    assert_eq!(&px[27..36], &[0, 0, 0, 255, 255, 255, 64, 64, 64]);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sub/grid.pgm");
    render_grid(&rows, 2, 3, &path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);

    let ragged = vec![rows[0].clone(), GridRow { input: cell(0.0), samples: vec![] }];
    assert!(encode_grid(&ragged, 2, 3).is_err());
    assert!(parse_pgm(&bytes[..bytes.len() - 1]).is_err());
}

#[test]
fn synthetic_report_is_well_formed_before_training() {
    let model: ModelBundle = init_model(&synthetic_arch(), 0).unwrap();
    let spec = SyntheticSpec::default();
    let report = synthetic_report(&model, &spec, 2, 16, &mut seeded_rng(0)).unwrap();
    assert_eq!(report.samples_per_condition, 32);
    assert_eq!(report.conditions.len(), 4);
    for c in &report.conditions {
        let signs = c.signs.map(f64::from);
        assert_eq!(c.both.analytic_mean, signs);
        assert_eq!(c.single[0].analytic_mean, [signs[0], 0.0]);
        assert_eq!(c.single[1].analytic_mean, [0.0, signs[1]]);
        assert!(c.mean_error().is_finite());
        assert!(c.orthogonal_ratios().iter().all(|r| r.is_finite()));
    }
    let text = report.to_text();
    assert!(text.contains("signs[+1,-1].both.mean = "));
    let json: serde_json::Value = serde_json::from_str(&report.to_json()).unwrap();
    assert_eq!(json["conditions"].as_array().unwrap().len(), 4);

    let data = build_synthetic_dataset(&spec, 4, 1).unwrap();
    let p = variance_profile(&model, &data, 2, 8, 0).unwrap();
    assert_eq!(p.per_item.len(), 4);
    assert!(synthetic_report(&quarters_model(), &spec, 2, 16, &mut seeded_rng(0)).is_err());
}

#[test]
fn real_mnist_headers() {
    let dir = std::env::var_os("MVBIGAN_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("/root/data/mnist"));
    let path = dir.join("train-images-idx3-ubyte");
    if !path.exists() {
        eprintln!("skipping: {} not found", path.display());
        return;
    }
    assert_eq!(parse_idx_bytes(&path).unwrap().dims, vec![60000, 28, 28]);
    assert_eq!(parse_idx_bytes(&dir.join("t10k-labels-idx1-ubyte")).unwrap().dims, vec![10000]);
}
