use ndarray::{Array2, Array3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trajdiff_core::blursim::{audit_pair, convolve_symmetric, procedural_sharp, synthesize_dataset, BlurPair, SharpSource, SynthConfig};
use trajdiff_core::cep::{coded_psf, invertibility_score, mtf, run_trial, ScoreConfig, ShutterCode, TrialConfig};
use trajdiff_core::deblur::{nonblind_deconv, DeconvParams};
use trajdiff_core::metrics::{central_crop, mnc, psnr, ssim};
use trajdiff_core::seed::derive_seed;
use trajdiff_core::trajkit::{rasterize_hr, resample_psf, simulate_trajectory, ContinuousTrajectory, HrTrajectoryMap, Psf, PsfGeometry, TrajectoryParams};

fn small_synth(n: usize) -> SynthConfig {
    SynthConfig { n_trajectories: n, ..SynthConfig::default() }
}

#[test]
fn dataset_round_trip_and_audit() {
    let dir = tempfile::tempdir().unwrap();
    let sources: Vec<_> = (0..2).map(|s| SharpSource::Procedural { seed: s, size: 96 }).collect();
    let manifest = synthesize_dataset(&sources, &small_synth(10), dir.path()).unwrap();
    assert_eq!(manifest.entries.len(), 20);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..4 {
        let rec = &manifest.entries[rng.gen_range(0..manifest.entries.len())];
        assert!(audit_pair(dir.path(), rec).unwrap(), "entry {}", rec.id);
        let pair = BlurPair::load(dir.path(), rec).unwrap();
        assert_eq!(pair.blurred.dim(), (64, 64, 3));
        assert_eq!(pair.hr_map.grid().dim(), (64, 64));
        assert!(pair.hr_map.is_connected());
        assert!((pair.psf.grid().sum() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn same_seed_same_manifest_bytes() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let src = [SharpSource::Procedural { seed: 3, size: 64 }];
    synthesize_dataset(&src, &small_synth(1), a.path()).unwrap();
    synthesize_dataset(&src, &small_synth(1), b.path()).unwrap();
    let read = |d: &std::path::Path| std::fs::read(d.join("manifest.jsonl")).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
}

#[test]
fn resampled_map_resembles_trajectory_psf() {
    let geom = PsfGeometry::new(16, 64);
    let mut total = 0.0;
    for seed in 0..10 {
        let t = simulate_trajectory(&TrajectoryParams { max_extent: 40.0, rng_seed: seed, ..TrajectoryParams::default() }).unwrap();
        let map = rasterize_hr(&t, 64, 64).unwrap();
        let from_map = resample_psf(&map, geom).unwrap();
        let from_path = resample_psf(&t, geom).unwrap();
        assert!((from_map.grid().sum() - 1.0).abs() < 1e-6);
        total += mnc(from_map.grid(), from_path.grid()).unwrap();
    }
    assert!(total / 10.0 > 0.7, "mean MNC {}", total / 10.0);
}

#[test]
fn true_kernel_deblurring_beats_doing_nothing() {
    let sharp = procedural_sharp(5, 64, 64);
    let t = simulate_trajectory(&TrajectoryParams { max_extent: 40.0, rng_seed: 2, ..TrajectoryParams::default() }).unwrap();
    let psf = resample_psf(&t, PsfGeometry::new(16, 64)).unwrap();
    let blurred = convolve_symmetric(sharp.pixels(), &psf).unwrap();
    let crop = |x: &Array3<f64>| central_crop(x, 16).unwrap();
    let restored = nonblind_deconv(&blurred, &psf, &DeconvParams::default()).unwrap().image;
    let noop = nonblind_deconv(&blurred, &Psf::delta(16), &DeconvParams::default()).unwrap().image;
    let truth = crop(sharp.pixels());
    assert!(psnr(&crop(&restored), &truth, 1.0).unwrap() > psnr(&crop(&noop), &truth, 1.0).unwrap());
    assert!(ssim(&crop(&restored), &truth).unwrap() > ssim(&crop(&noop), &truth).unwrap());
}

#[test]
fn coded_trials_favor_the_code_on_linear_motion() {
    let sharp = procedural_sharp(8, 96, 96);
    let line = ContinuousTrajectory::new((0..=100).map(|i| [i as f64 * 0.4, 0.0]).collect()).unwrap();
    let geom = PsfGeometry::new(16, 64);
    let r = run_trial(&sharp, &line, &line, geom, &TrialConfig::default(), 1).unwrap();
    assert!(r.coded_score > r.baseline_score);
    assert!(r.psnr_coded > r.psnr_uncoded, "{} vs {}", r.psnr_coded, r.psnr_uncoded);
    let again = run_trial(&sharp, &line, &line, geom, &TrialConfig::default(), 1).unwrap();
    assert_eq!(r, again);
}

#[test]
fn coded_psf_mass_and_bounds() {
    let geom = PsfGeometry::new(16, 64);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for seed in 0..20 {
        let t = simulate_trajectory(&TrajectoryParams { num_points: 400, max_extent: 40.0, rng_seed: seed, ..TrajectoryParams::default() }).unwrap();
        let mut bits: Vec<bool> = (0..32).map(|_| rng.gen()).collect();
        bits[0] = true;
        let psf = coded_psf(&t, &ShutterCode::new(bits).unwrap(), geom).unwrap();
        assert!((psf.grid().sum() - 1.0).abs() < 1e-6);
        let score = invertibility_score(&psf, &ScoreConfig::default()).unwrap();
        assert!((0.0..=1.0).contains(&score));
        assert!((mtf(&psf, 64).unwrap().dc() - 1.0).abs() < 1e-9);
    }
}

fn kernel(seed: u64, k: usize) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((k, k), |_| if rng.gen::<f64>() < 0.3 { rng.gen() } else { 0.0 })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn psf_is_a_distribution(seed in 0u64..10_000, extent in 4.0f64..40.0) {
        let t = simulate_trajectory(&TrajectoryParams { num_points: 300, max_extent: extent, rng_seed: seed, ..TrajectoryParams::default() }).unwrap();
        let psf = resample_psf(&t, PsfGeometry::new(16, 64)).unwrap();
        prop_assert!((psf.grid().sum() - 1.0).abs() < 1e-6);
        prop_assert!(psf.grid().iter().all(|&v| v >= 0.0));
        let map: HrTrajectoryMap = rasterize_hr(&t, 64, 64).unwrap();
        prop_assert!(map.is_connected());
    }

    #[test]
    fn mnc_is_symmetric_and_bounded(a in 0u64..1000, b in 0u64..1000) {
        let (ka, kb) = (kernel(a, 8), kernel(b + 1000, 8));
        prop_assume!(ka.sum() > 0.0 && kb.sum() > 0.0);
        let ab = mnc(&ka, &kb).unwrap();
        prop_assert!((ab - mnc(&kb, &ka).unwrap()).abs() < 1e-12);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&ab));
    }

    #[test]
    fn convolution_is_linear(seed in 0u64..1000, s in -2.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array3::from_shape_fn((12, 12, 3), |_| rng.gen::<f64>());
        let y = Array3::from_shape_fn((12, 12, 3), |_| rng.gen::<f64>());
        let k = kernel(derive_seed(seed, "k", 0), 5);
        prop_assume!(k.sum() > 0.0);
        let psf = Psf::normalized(k).unwrap();
        let lhs = convolve_symmetric(&(&x * s + &y), &psf).unwrap();
        let rhs = convolve_symmetric(&x, &psf).unwrap() * s + convolve_symmetric(&y, &psf).unwrap();
        prop_assert!(lhs.iter().zip(rhs.iter()).all(|(a, b)| (a - b).abs() < 1e-10));
    }
}
