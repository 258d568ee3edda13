use candle_core::{DType, Device, Tensor};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trajdiff_core::blursim::{synthesize_dataset, BlurPair, SharpSource, SynthConfig};
use trajdiff_net::losses::{scalar, soft_iou, weight_map, wiou, LossKind};
use trajdiff_net::nn::Ctx;
use trajdiff_net::train::{batch_loss, train, LOG_FILE, FINAL_CHECKPOINT};
use trajdiff_net::{ModelConfig, TrainConfig, TrainingSet, TrajDiff};

fn synthetic_set(n: usize, size: usize, seed: u64) -> TrainingSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = TrainingSet::default();
    for i in 0..n {
        set.ids.push(format!("synthetic {i}"));
        set.images.push(Array3::from_shape_fn((size, size, 3), |_| rng.gen()));
        let (r, c) = (rng.gen_range(4..size - 12), rng.gen_range(4..size - 12));
        let mut map = Array2::<u8>::zeros((size, size));
        for k in 0..8 {
            map[[r + k, c + k / 2]] = 1;
        }
        set.maps.push(map);
    }
    set
}

fn small() -> ModelConfig {
    ModelConfig { image_size: 32, ..ModelConfig::default() }
}

#[test]
fn initial_loss_is_log2_plus_half_map_iou() {
    let mut data = synthetic_set(1, 32, 1);
    data.images = vec![data.images[0].clone(); 4];
    data.maps = vec![data.maps[0].clone(); 4];
    data.ids = vec![data.ids[0].clone(); 4];
    let model = TrajDiff::new(&small()).unwrap();
    let cfg = TrainConfig { batch_size: 4, stpd_p: 0.0, ..TrainConfig::default() };
    let (_, row) = batch_loss(&model, &data, &cfg, 1).unwrap();

    let x0 = Tensor::from_vec(data.maps[0].iter().map(|&v| v as f64).collect::<Vec<_>>(), (1, 1, 32, 32), &Device::Cpu).unwrap();
    let half = Tensor::full(0.5, (1, 1, 32, 32), &Device::Cpu).unwrap().to_dtype(DType::F64).unwrap();
    let expected_iou = scalar(&wiou(&half, &x0, &weight_map(&x0, cfg.lambda).unwrap(), cfg.iou_eps).unwrap()).unwrap();
    assert!((row.wbce - std::f64::consts::LN_2).abs() < 0.01, "wbce {}", row.wbce);
    assert!((row.wiou - expected_iou).abs() < 0.01, "wiou {} vs {expected_iou}", row.wiou);
    assert!((row.loss - std::f64::consts::LN_2 - expected_iou).abs() < 0.02);
}

#[test]
fn training_is_deterministic() {
    let data = synthetic_set(6, 32, 2);
    let cfg = TrainConfig { iterations: 3, batch_size: 2, warmup: 0, ..TrainConfig::default() };
    let curve = || {
        let model = TrajDiff::new(&small()).unwrap();
        train(&model, &data, &cfg, None, |_| {}).unwrap().into_iter().map(|r| r.loss).collect::<Vec<_>>()
    };
    let a = curve();
    assert_eq!(a.len(), 3);
    assert_eq!(a, curve());
}

#[test]
fn every_parameter_receives_gradient() {
    let data = synthetic_set(4, 32, 3);
    let model = TrajDiff::new(&small()).unwrap();
    let cfg = TrainConfig { batch_size: 4, ..TrainConfig::default() };
    let (loss, _) = batch_loss(&model, &data, &cfg, 1).unwrap();
    let grads = loss.backward().unwrap();
    let mut groups = std::collections::BTreeMap::<String, f64>::new();
    for (name, var) in model.params().trainable_named() {
        let g = grads.get(var.as_tensor()).unwrap_or_else(|| panic!("{name} has no gradient"));
        let norm: f64 = g.to_dtype(DType::F64).unwrap().sqr().unwrap().sum_all().unwrap().to_scalar().unwrap();
        let group = name.split('.').take(2).collect::<Vec<_>>().join(".");
        *groups.entry(group).or_default() += norm;
    }
    assert!(groups.len() >= 4, "{groups:?}");
    for (group, norm) in &groups {
        assert!(*norm > 0.0 && norm.is_finite(), "{group}: {norm}");
    }
}

#[test]
fn mse_variant_trains_and_logs() {
    let dir = tempfile::tempdir().unwrap();
    let data = synthetic_set(4, 32, 4);
    let model = TrajDiff::new(&small()).unwrap();
    let cfg = TrainConfig { iterations: 2, batch_size: 2, warmup: 0, loss: LossKind::Mse, checkpoint_every: 1, ..TrainConfig::default() };
    let rows = train(&model, &data, &cfg, Some(dir.path()), |_| {}).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(dir.path().join(FINAL_CHECKPOINT).is_file());
    let log = std::fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
    assert_eq!(log.lines().count(), 3);
    let (back, meta) = TrajDiff::load(&dir.path().join(FINAL_CHECKPOINT)).unwrap();
    assert_eq!(back.config(), model.config());
    assert_eq!(meta["iteration"], "2");
}

#[test]
fn empty_training_set_is_rejected() {
    let model = TrajDiff::new(&small()).unwrap();
    assert!(train(&model, &TrainingSet::default(), &TrainConfig::default(), None, |_| {}).is_err());
}

/// Eight fixed pairs, 500 iterations: the loss must at least halve from its
/// iteration-10 value, the trained model must reproduce the maps and must
/// depend on its condition.
#[test]
fn overfits_eight_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig { n_trajectories: 4, ..SynthConfig::default() };
    let sources: Vec<_> = (0..2).map(|s| SharpSource::Procedural { seed: s, size: 128 }).collect();
    let manifest = synthesize_dataset(&sources, &cfg, dir.path()).unwrap();
    let pairs: Vec<_> = manifest.entries.iter().take(8).map(|r| BlurPair::load(dir.path(), r).unwrap()).collect();
    let data = TrainingSet::from_pairs(&pairs);

    let model = TrajDiff::new(&ModelConfig::default()).unwrap();
    let tc = TrainConfig { iterations: 500, lr: 5e-3, lr_min: 5e-5, warmup: 50, grad_clip: 1.0, ..TrainConfig::default() };
    let rows = train(&model, &data, &tc, None, |_| {}).unwrap();
    let at10 = rows[9].loss;
    let tail = rows[rows.len() - 20..].iter().map(|r| r.loss).sum::<f64>() / 20.0;
    assert!(tail <= 0.5 * at10, "loss {at10} at iteration 10, {tail} at the end");

    let images: Vec<_> = data.images.iter().collect();
    let seeds: Vec<u64> = (0..8).collect();
    let est = model.estimate_images(&images, 20, &seeds).unwrap();
    let iou = est
        .iter()
        .zip(&data.maps)
        .map(|(e, g)| {
            let a: Vec<f64> = e.iter().map(|&v| v as f64).collect();
            let b: Vec<f64> = g.iter().map(|&v| v as f64).collect();
            soft_iou(&a, &b)
        })
        .sum::<f64>()
        / 8.0;
    assert!(iou >= 0.5, "mean IoU {iou}");

    let x = model.images_to_tensor(&images).unwrap();
    let z1 = model.condition(&x, &Ctx::eval()).unwrap();
    let x_t = Tensor::zeros((8, 1, 64, 64), model.dtype(), &Device::Cpu).unwrap();
    let a = model.denoiser.forward(&x_t, &[1000; 8], &z1, &mut Ctx::eval()).unwrap();
    let swapped: Vec<_> = images.iter().rev().cloned().collect();
    let z1_other = model.condition(&model.images_to_tensor(&swapped).unwrap(), &Ctx::eval()).unwrap();
    let b = model.denoiser.forward(&x_t, &[1000; 8], &z1_other, &mut Ctx::eval()).unwrap();
    let diff: f32 = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar().unwrap();
    assert!(diff > 1e-3, "condition has no effect ({diff})");
}
