use approx::assert_relative_eq;
use mvbigan::netdef::{
    aggregate, discriminate_pair, discriminate_view_pair, encode_target, encode_views, generate,
    init_model, parameter_layout, sample_latent, standard_normal, ArchConfig, Forward, MaskBatch,
    ModelBundle, NetId, ViewBatch, ViewNet,
};
use mvbigan::view::{LatentGaussian, SubsetMask, ViewShape};
use mvbigan::Error;
use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_arch() -> ArchConfig {
    ArchConfig::dense(
        ViewShape::Flat(16),
        vec![ViewShape::Flat(4); 4],
        6,
        24,
    )
}

fn uniform(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f32> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random::<f32>())
}

fn view_batch(rows: usize, rng: &mut ChaCha8Rng) -> ViewBatch<f32> {
    let views = (0..4).map(|_| uniform(rows, 4, rng)).collect();
    let masks = (0..rows)
        .map(|i| SubsetMask::from_bools((0..4).map(|k| (i >> k) & 1 == 1 || k == 0).collect()))
        .collect();
    ViewBatch::new(views, masks)
}

#[test]
fn outputs_stay_in_their_ranges() {
    let model: ModelBundle = init_model(&small_arch(), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let y = uniform(32, 16, &mut rng);
    let z = standard_normal::<_, f32>(32, 6, &mut rng) * 3.0;
    let batch = view_batch(32, &mut rng);
    for train in [false, true] {
        for g in encode_target(&model, y.view(), train).unwrap() {
            assert!(g.mu.iter().all(|m| m.abs() < 1.0));
            assert!(g.log_var.iter().all(|lv| *lv < 1.0));
        }
        for g in encode_views(&model, &batch, train).unwrap() {
            assert!(g.mu.iter().all(|m| m.abs() < 1.0));
        }
        let x = generate(&model, z.view(), train).unwrap();
        assert_eq!(x.dim(), (32, 16));
        assert!(x.iter().all(|&v| v > 0.0 && v < 1.0));
        let p = discriminate_pair(&model, y.view(), z.view(), train).unwrap();
        assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
        let p = discriminate_view_pair(&model, &batch, z.view(), train).unwrap();
        assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
    }
}

#[test]
fn encoder_variance_is_bounded_at_init() {
    let model: ModelBundle = init_model(&small_arch(), 11).unwrap();
    let y = Array2::<f32>::zeros((1, 16));
    let g = &encode_target(&model, y.view(), false).unwrap()[0];
    assert_eq!(g.dim(), 6);
    assert!(g.variance().iter().all(|&v| v < std::f64::consts::E));
}

#[test]
fn eval_mode_is_batch_consistent_and_deterministic() {
    let model: ModelBundle = init_model(&small_arch(), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let z = standard_normal::<_, f32>(10, 6, &mut rng);
    let all = generate(&model, z.view(), false).unwrap();
    for i in 0..10 {
        let one = generate(&model, z.slice(s![i..i + 1, ..]), false).unwrap();
        for (a, b) in one.row(0).iter().zip(all.row(i)) {
            assert_relative_eq!(*a, *b, max_relative = 1e-5);
        }
    }
    assert_eq!(all, generate(&model, z.view(), false).unwrap());
    let a = all.row(0).to_owned();
    let b = all.row(1).to_owned();
    assert_ne!(a, b, "distinct latents must give distinct outputs");
}

#[test]
fn mnist_generator_emits_784_pixels() {
    let model: ModelBundle = init_model(&ArchConfig::mnist_quarters().with_width(32), 0).unwrap();
    let z = Array2::<f32>::zeros((2, 128));
    let x = generate(&model, z.view(), false).unwrap();
    assert_eq!(x.dim(), (2, 784));
    assert!(x.iter().all(|&v| (0.0..=1.0).contains(&v)));
}

#[test]
fn aggregate_of_empty_mask_is_zero() {
    let model: ModelBundle = init_model(&small_arch(), 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut batch = view_batch(5, &mut rng);
    batch.masks = vec![SubsetMask::empty(4); 5];
    for net in [ViewNet::H, ViewNet::D2] {
        let a = aggregate(&model, net, &batch).unwrap();
        assert_eq!(a.dim(), (5, 24));
        assert!(a.iter().all(|&v| v == 0.0));
    }
}

#[test]
fn aggregate_with_identity_embeddings_sums_views() {
    let mut arch = ArchConfig::dense(ViewShape::Flat(3), vec![ViewShape::Flat(2); 2], 2, 2);
    arch.aggregation_dim = 2;
    let mut model: ModelBundle<f64> = init_model(&arch, 0).unwrap();
    for k in 0..2 {
        *model.param_mut(&format!("H.phi{k}.w")).unwrap() = Array2::eye(2);
        model.param_mut(&format!("H.phi{k}.b")).unwrap().fill(0.0);
    }
    let v0 = ndarray::array![[0.25, 0.5], [1.0, 0.0]];
    let v1 = ndarray::array![[0.125, 0.75], [0.5, 0.5]];
    let batch = ViewBatch::new(vec![v0.clone(), v1.clone()], vec![SubsetMask::full(2); 2]);
    assert_eq!(aggregate(&model, ViewNet::H, &batch).unwrap(), &v0 + &v1);
    let only_second = ViewBatch::new(
        vec![v0, v1.clone()],
        vec![SubsetMask::from_bits(&[0, 1], 2).unwrap(); 2],
    );
    assert_eq!(aggregate(&model, ViewNet::H, &only_second).unwrap(), v1);
}

#[test]
fn masked_views_do_not_influence_outputs() {
    let model: ModelBundle = init_model(&small_arch(), 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let batch = view_batch(16, &mut rng);
    let mut scrambled = batch.clone();
    for (k, v) in scrambled.views.iter_mut().enumerate() {
        for (i, mut row) in v.rows_mut().into_iter().enumerate() {
            if !batch.masks[i].get(k) {
                row.mapv_inplace(|x| 100.0 * x - 7.0);
            }
        }
    }
    let z = standard_normal::<_, f32>(16, 6, &mut rng);
    assert_eq!(
        encode_views(&model, &batch, false).unwrap(),
        encode_views(&model, &scrambled, false).unwrap()
    );
    assert_eq!(
        discriminate_view_pair(&model, &batch, z.view(), false).unwrap(),
        discriminate_view_pair(&model, &scrambled, z.view(), false).unwrap()
    );
}

#[test]
fn shape_errors_are_reported() {
    let model: ModelBundle = init_model(&small_arch(), 8).unwrap();
    let bad = Array2::<f32>::zeros((2, 5));
    assert!(matches!(generate(&model, bad.view(), false), Err(Error::ShapeMismatch(_))));
    assert!(matches!(encode_target(&model, bad.view(), false), Err(Error::ShapeMismatch(_))));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut batch = view_batch(2, &mut rng);
    batch.views.pop();
    assert!(matches!(encode_views(&model, &batch, false), Err(Error::ShapeMismatch(_))));
}

#[test]
fn sample_latent_cases() {
    let g = LatentGaussian::new(vec![0.5, -0.25], vec![0.0, 2f64.ln()]).unwrap();
    assert_eq!(sample_latent(&g, &[0.0, 0.0]).unwrap(), g.mu);
    let x = sample_latent(&g, &[1.0, -1.0]).unwrap();
    assert_relative_eq!(x[0], 1.5, epsilon = 1e-12);
    assert_relative_eq!(x[1], -0.25 - 2f64.sqrt(), epsilon = 1e-12);
    assert!(matches!(sample_latent(&g, &[0.0]), Err(Error::ShapeMismatch(_))));

    let target = LatentGaussian::new(vec![0.1], vec![0.7f64.ln()]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let n = 100_000;
    let draws: Vec<f64> = (0..n)
        .map(|_| {
            let e: f64 = rng.sample(rand_distr::StandardNormal);
            sample_latent(&target, &[e]).unwrap()[0]
        })
        .collect();
    let mean = draws.iter().sum::<f64>() / n as f64;
    let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n as f64;
    assert!((var / 0.7 - 1.0).abs() < 0.05, "empirical variance {var}");
}

#[test]
fn conv_configuration_shapes() {
    let mut arch = ArchConfig::celeba(18);
    arch.conv_encoder_maps = vec![4, 8, 8, 8];
    arch.conv_decoder_maps = vec![8, 8, 8, 4];
    arch.aggregation_dim = 16;
    arch.latent_dim = 8;
    for layers in [&mut arch.encoder_layers, &mut arch.d1_layers, &mut arch.d2_layers] {
        for l in layers.iter_mut() {
            l.width = 16;
        }
    }
    arch.validate().unwrap();
    let model: ModelBundle = init_model(&arch, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let attrs = uniform(2, 18, &mut rng).mapv(|v| v.round());
    let image = uniform(2, 3 * 64 * 64, &mut rng);
    let batch = ViewBatch::new(vec![attrs, image.clone()], vec![SubsetMask::full(2); 2]);
    let lat = encode_views(&model, &batch, false).unwrap();
    assert_eq!(lat.len(), 2);
    assert_eq!(lat[0].dim(), 8);
    let z = standard_normal::<_, f32>(2, 8, &mut rng);
    let x = generate(&model, z.view(), true).unwrap();
    assert_eq!(x.dim(), (2, 3 * 64 * 64));
    assert!(x.iter().all(|v| v.abs() <= 1.0));
    assert_eq!(encode_target(&model, image.view(), false).unwrap()[0].dim(), 8);
    let p = discriminate_pair(&model, x.view(), z.view(), false).unwrap();
    assert_eq!(p.len(), 2);
}

#[test]
fn full_forward_binds_every_parameter() {
    for arch in [small_arch(), ArchConfig::celeba(4).with_width(8)] {
        let model: ModelBundle<f64> = init_model(&arch, 0).unwrap();
        let rows = 2;
        let mut fw = Forward::new(&model, true, &NetId::ALL);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = fw.input(Array2::from_shape_simple_fn((rows, arch.output.size()), || rng.random()));
        let views: Vec<_> = arch
            .view_sizes()
            .iter()
            .map(|&n| fw.input(Array2::from_shape_simple_fn((rows, n), || rng.random())))
            .collect();
        let mask = MaskBatch::uniform(&SubsetMask::full(arch.views.len()), rows);
        let lat = fw.encode_target(y);
        let z = fw.sample(lat, Array2::zeros((rows, arch.latent_dim)));
        let x = fw.generate(z);
        fw.d1_logits(x, z);
        let he = fw.embed_views(NetId::H, &views);
        fw.encode_views(&he, &mask);
        let de = fw.embed_views(NetId::D2, &views);
        fw.d2_logits(&de, &mask, z);
        let mut bound: Vec<&str> = fw.bound_params().map(|(k, _)| k).collect();
        bound.sort();
        let mut declared: Vec<String> = parameter_layout(&arch).into_iter().map(|p| p.name).collect();
        declared.sort();
        assert_eq!(bound, declared);
    }
}
