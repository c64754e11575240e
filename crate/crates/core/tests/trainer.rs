use std::collections::BTreeMap;

use mvbigan::dataio::{build_synthetic_dataset, sample_view_sequence, Dataset, TaskKind};
use mvbigan::netdef::{init_model, Forward, ModelBundle, NetId};
use mvbigan::trainer::{
    build_losses, decode, encode, evaluate_losses, load_checkpoint, metrics_path, save_checkpoint, strip_wall_clock,
    train, train_step, train_step_with, AdamState, StepConfig, StepNoise, TrainBatch, TrainConfig, Trainer, UpdateMode,
    FORMAT_VERSION, METRICS_HEADER,
};
use mvbigan::Error;
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

fn tiny_config() -> TrainConfig {
    let mut cfg = TrainConfig::for_task(TaskKind::Synthetic);
    cfg.arch = cfg.arch.clone().with_width(8);
    cfg.arch.latent_dim = 3;
    cfg.train_size = 48;
    cfg.batch_size = 16;
    cfg.epochs = 3;
    cfg.seed = 5;
    cfg
}

fn tiny_batch(cfg: &TrainConfig) -> (Dataset, TrainBatch<f32>, StepNoise<f32>) {
    let data = build_synthetic_dataset(&cfg.synthetic, cfg.train_size, cfg.seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let items: Vec<usize> = (0..16).collect();
    let seqs = items.iter().map(|_| sample_view_sequence(2, 2, &mut rng).unwrap()).collect();
    let batch = TrainBatch::collate(&data, &items, seqs).unwrap();
    let noise = StepNoise::draw(16, cfg.arch.latent_dim, 2, &mut rng);
    (data, batch, noise)
}

fn owned_by(model: &ModelBundle, nets: &[NetId]) -> BTreeMap<String, Array2<f32>> {
    model
        .params()
        .iter()
        .filter(|(k, _)| nets.contains(&NetId::of_param(k).unwrap()))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect()
}

fn diff_norm(a: &BTreeMap<String, Array2<f32>>, b: &BTreeMap<String, Array2<f32>>) -> f32 {
    a.iter()
        .map(|(k, x)| (x - &b[k]).mapv(|d| d * d).sum())
        .sum::<f32>()
        .sqrt()
}

/// Adam written out independently: one update from zero moments.
fn first_adam_update(
    model: &ModelBundle,
    batch: &TrainBatch<f32>,
    noise: &StepNoise<f32>,
    cfg: &StepConfig,
    nets: &[NetId],
    disc: bool,
) -> BTreeMap<String, Array2<f32>> {
    let mut fw = Forward::new(model, true, nets);
    let nodes = build_losses(&mut fw, batch, noise, cfg.lambda, true);
    let root = if disc { nodes.disc_total } else { nodes.gen_total };
    let grads = fw.graph.backward(root);
    let mut out = owned_by(model, nets);
    for (name, var) in fw.bound_params() {
        if let (Some(p), Some(g)) = (out.get_mut(name), grads.get(var)) {
            let g = g.mapv(f64::from);
            let m = g.mapv(|x| (1.0 - cfg.beta1) * x / (1.0 - cfg.beta1));
            let v = g.mapv(|x| (1.0 - cfg.beta2) * x * x / (1.0 - cfg.beta2));
            let step = ndarray::Zip::from(&m).and(&v).map_collect(|&m, &v| cfg.lr * m / (v.sqrt() + cfg.eps));
            p.zip_mut_with(&step, |p, &s| *p = (*p as f64 - s) as f32);
        }
    }
    out
}

#[test]
fn alternating_step_updates_each_side_from_the_right_state() {
    let cfg = tiny_config();
    let (_, batch, noise) = tiny_batch(&cfg);
    let step = cfg.step_config();
    let mut model: ModelBundle = init_model(&cfg.arch, 0).unwrap();
    let before = model.clone();
    let mut optim = AdamState::new(&model);
    let losses = train_step(&mut model, &mut optim, &batch, &noise, &step).unwrap();
    assert!(losses.d1_loss.is_finite() && losses.total_gen_side.is_finite());

    let disc = [NetId::D1, NetId::D2];
    let gens = [NetId::G, NetId::E, NetId::H];
    assert!(diff_norm(&owned_by(&model, &disc), &owned_by(&before, &disc)) > 0.0);
    assert!(diff_norm(&owned_by(&model, &gens), &owned_by(&before, &gens)) > 0.0);

    // Discriminators move from the initial state only; the generator-side
    // step leaves them alone.
    let expect_d = first_adam_update(&before, &batch, &noise, &step, &disc, true);
    assert!(diff_norm(&owned_by(&model, &disc), &expect_d) < 1e-6);
    // The generator side sees the updated discriminators.
    let mut mid = before.clone();
    for (k, v) in &expect_d {
        *mid.param_mut(k).unwrap() = v.clone();
    }
    let expect_g = first_adam_update(&mid, &batch, &noise, &step, &gens, false);
    assert!(diff_norm(&owned_by(&model, &gens), &expect_g) < 1e-5);
}

#[test]
fn onepass_step_updates_both_sides() {
    let mut cfg = tiny_config();
    cfg.update_mode = UpdateMode::OnePass;
    let (_, batch, noise) = tiny_batch(&cfg);
    let mut model: ModelBundle = init_model(&cfg.arch, 0).unwrap();
    let before = model.clone();
    let mut optim = AdamState::new(&model);
    train_step(&mut model, &mut optim, &batch, &noise, &cfg.step_config()).unwrap();
    let step = cfg.step_config();
    let disc = [NetId::D1, NetId::D2];
    let gens = [NetId::G, NetId::E, NetId::H];
    // Both sides use gradients of the initial model.
    let expect_d = first_adam_update(&before, &batch, &noise, &step, &disc, true);
    let expect_g = first_adam_update(&before, &batch, &noise, &step, &gens, false);
    assert!(diff_norm(&owned_by(&model, &disc), &expect_d) < 1e-6);
    assert!(diff_norm(&owned_by(&model, &gens), &expect_g) < 1e-5);
}

#[test]
fn small_steps_do_not_increase_discriminator_loss() {
    let mut cfg = tiny_config();
    let (_, batch, noise) = tiny_batch(&cfg);
    let init: ModelBundle<f64> = init_model(&cfg.arch, 2).unwrap();
    let batch64 = TrainBatch {
        targets: batch.targets.mapv(f64::from),
        views: batch.views.iter().map(|v| v.mapv(f64::from)).collect(),
        sequences: batch.sequences.clone(),
    };
    let noise64 = StepNoise {
        target: noise.target.mapv(f64::from),
        views: noise.views.iter().map(|v| v.mapv(f64::from)).collect(),
        prior: noise.prior.mapv(f64::from),
    };
    let lambda = cfg.lambda;
    let d_loss = |m: &ModelBundle<f64>| {
        let l = evaluate_losses(m, &batch64, &noise64, lambda).unwrap();
        l.d1_loss + l.d2_loss
    };
    let start = d_loss(&init);
    let ok = [1e-6, 1e-7].iter().any(|&lr| {
        cfg.lr = lr;
        let mut model = init.clone();
        let mut optim = AdamState::new(&model);
        train_step(&mut model, &mut optim, &batch64, &noise64, &cfg.step_config()).unwrap();
        d_loss(&model) <= start + 1e-6
    });
    assert!(ok);
}

#[test]
fn zero_lambda_kl_term_contributes_nothing() {
    let mut cfg = tiny_config();
    cfg.lambda = 0.0;
    let (_, batch, noise) = tiny_batch(&cfg);
    let init: ModelBundle = init_model(&cfg.arch, 4).unwrap();
    let run = |include_kl: bool, lambda: f64| {
        let mut model = init.clone();
        let mut optim = AdamState::new(&model);
        let step = StepConfig { lambda, ..cfg.step_config() };
        let l = train_step_with(&mut model, &mut optim, &batch, &noise, &step, include_kl).unwrap();
        (model, l)
    };
    let (with_kl, l) = run(true, 0.0);
    let (detached, _) = run(false, 0.0);
    assert!(l.kl_penalty > 0.0);
    assert_eq!(with_kl, detached);
    let (weighted, _) = run(true, 1.0);
    assert_ne!(owned_by(&weighted, &[NetId::H]), owned_by(&detached, &[NetId::H]));
    assert_eq!(owned_by(&weighted, &[NetId::G]), owned_by(&detached, &[NetId::G]));
}

#[test]
fn non_finite_parameters_abort_the_step() {
    let cfg = tiny_config();
    let (_, batch, noise) = tiny_batch(&cfg);
    let mut model: ModelBundle = init_model(&cfg.arch, 0).unwrap();
    model.param_mut("D1.out.b").unwrap().fill(f32::NAN);
    let mut optim = AdamState::new(&model);
    let err = train_step(&mut model, &mut optim, &batch, &noise, &cfg.step_config()).unwrap_err();
    assert!(matches!(err, Error::NonFiniteLoss { .. }), "{err}");
}

#[test]
fn mismatched_batches_are_rejected() {
    let cfg = tiny_config();
    let (_, mut batch, noise) = tiny_batch(&cfg);
    batch.views.pop();
    let mut model: ModelBundle = init_model(&cfg.arch, 0).unwrap();
    let mut optim = AdamState::new(&model);
    let err = train_step(&mut model, &mut optim, &batch, &noise, &cfg.step_config()).unwrap_err();
    assert!(matches!(err, Error::ShapeMismatch(_)));
}

#[test]
fn runs_are_deterministic_and_logged() {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let logs: Vec<String> = dirs
        .iter()
        .map(|d| {
            let mut cfg = tiny_config();
            cfg.out_dir = Some(d.path().to_path_buf());
            cfg.checkpoint_interval = 2;
            let data = build_synthetic_dataset(&cfg.synthetic, cfg.train_size, cfg.seed).unwrap();
            let out = train(&cfg, &data).unwrap();
            assert_eq!(out.metrics.len(), 3);
            assert!(d.path().join("epoch-0002.ckpt").exists());
            assert!(d.path().join("final.ckpt").exists());
            std::fs::read_to_string(metrics_path(d.path())).unwrap()
        })
        .collect();
    let lines: Vec<&str> = logs[0].lines().collect();
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[0], METRICS_HEADER);
    assert!(lines[1..].iter().all(|l| l.split('\t').count() == 7));
    assert_eq!(strip_wall_clock(&logs[0]), strip_wall_clock(&logs[1]));
}

#[test]
fn zero_epochs_return_the_initialization() {
    let mut cfg = tiny_config();
    cfg.epochs = 0;
    let data = build_synthetic_dataset(&cfg.synthetic, cfg.train_size, cfg.seed).unwrap();
    let out = train(&cfg, &data).unwrap();
    assert!(out.metrics.is_empty());
    assert_eq!(out.checkpoint.epoch, 0);
    assert_eq!(out.checkpoint.model, init_model(&cfg.arch, cfg.seed).unwrap());
}

#[test]
fn checkpoints_roundtrip_bit_exactly() {
    let cfg = tiny_config();
    let data = build_synthetic_dataset(&cfg.synthetic, cfg.train_size, cfg.seed).unwrap();
    let ck = train(&cfg, &data).unwrap().checkpoint;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nested/run.ckpt");
    save_checkpoint(&ck, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, ck);
    for (k, p) in ck.model.params() {
        let q = back.model.param(k).unwrap();
        assert!(p.iter().zip(q).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
    let leftovers: Vec<_> = std::fs::read_dir(path.parent().unwrap()).unwrap().collect();
    assert_eq!(leftovers.len(), 1, "temporary file left behind");
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let cfg = tiny_config();
    let bytes = encode(&Trainer::new(cfg).unwrap().checkpoint());
    assert!(matches!(decode(&bytes[..bytes.len() - 10]), Err(Error::CorruptCheckpoint(_))));
    assert!(matches!(decode(&bytes[..20]), Err(Error::CorruptCheckpoint(_))));
    let mut flipped = bytes.clone();
    flipped[100] ^= 1;
    assert!(matches!(decode(&flipped), Err(Error::CorruptCheckpoint(_))));

    let mut future = bytes[..bytes.len() - 32].to_vec();
    future[8..12].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
    let sum = Sha256::digest(&future);
    future.extend_from_slice(&sum);
    assert!(matches!(
        decode(&future),
        Err(Error::VersionMismatch { found, expected }) if found == FORMAT_VERSION + 1 && expected == FORMAT_VERSION
    ));
}

#[test]
fn resuming_matches_an_uninterrupted_run() {
    let mut cfg = tiny_config();
    cfg.epochs = 4;
    let data = build_synthetic_dataset(&cfg.synthetic, cfg.train_size, cfg.seed).unwrap();
    let straight = train(&cfg, &data).unwrap();

    let mut first = cfg.clone();
    first.epochs = 2;
    let half = train(&first, &data).unwrap();
    let restored = decode(&encode(&half.checkpoint)).unwrap();
    let mut resumed = Trainer::from_checkpoint(restored);
    resumed.set_epochs(4);
    let rest = resumed.run(&data).unwrap();
    assert_eq!(resumed.model(), &straight.checkpoint.model);
    let strip = |m: &[mvbigan::trainer::EpochMetrics]| m.iter().map(|e| (e.epoch, e.losses)).collect::<Vec<_>>();
    assert_eq!(strip(&rest), strip(&straight.metrics[2..]));
}
