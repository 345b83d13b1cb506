mod common;

use std::fs;

use common::*;
use dimo_core::harness::{
    evaluate, make_phantom, run_experiment, sample, train, undersample, DatasetContainer, EvalReport, ExperimentConfig,
    MaskSpec, Mode, StaticData,
};
use dimo_core::static_dimo::StaticDimo;
use dimo_core::DimoError;
use ndarray::ArrayD;
use num_complex::Complex64;
use proptest::prelude::*;

#[test]
fn presets_round_trip_through_toml() {
    for name in ["desk-static", "desk-quant", "paper-static", "paper-quant"] {
        let cfg = ExperimentConfig::preset(name).unwrap();
        cfg.validate().unwrap();
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
    }
    assert!(matches!(ExperimentConfig::preset("nope"), Err(DimoError::Config(_))));
}

#[test]
fn desk_presets_use_the_desk_geometry() {
    let s = ExperimentConfig::preset("desk-static").unwrap();
    assert_eq!((s.phantom.height, s.phantom.width, s.phantom.n_coils), (64, 64, 4));
    assert_eq!((s.mask.af, s.mask.center, s.schedule.steps), (4.0, 8, 200));
    let q = ExperimentConfig::preset("desk-quant").unwrap();
    assert_eq!(q.mode, Mode::Quant);
    assert_eq!(q.protocol.tr, 0.04);
    assert_eq!(q.protocol.flip_angles_deg, vec![5.0, 10.0, 20.0, 40.0]);
}

#[test]
fn bad_overrides_are_config_errors() {
    let cfg = ExperimentConfig::desk_static();
    assert!(matches!(cfg.with_overrides(&["training.nope=1".into()]), Err(DimoError::Config(_))));
    assert!(matches!(cfg.with_overrides(&["training.epochs".into()]), Err(DimoError::Config(_))));
    assert!(matches!(cfg.with_overrides(&["mask.af=0.5".into()]), Err(DimoError::Config(_))));
}

#[test]
fn dataset_container_round_trips_and_detects_tampering() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ds");
    let mut ds = DatasetContainer::create(&path, "static", serde_json::json!({"k": 1})).unwrap();
    let real = ArrayD::from_shape_fn(vec![2, 3], |i| (i[0] * 3 + i[1]) as f64 * 0.5);
    let cplx = ArrayD::from_shape_fn(vec![2, 2], |i| Complex64::new(i[0] as f64, -(i[1] as f64)));
    ds.write_real("r", &real).unwrap();
    ds.write_complex("c", &cplx).unwrap();
    let back = DatasetContainer::open(&path).unwrap();
    assert_eq!(back.read_real("r").unwrap(), real);
    assert_eq!(back.read_complex("c").unwrap(), cplx);
    assert_eq!(back.metadata()["k"], 1);
    let file = path.join(&back.manifest().arrays["r"].file);
    let mut bytes = fs::read(&file).unwrap();
    bytes[0] ^= 1;
    fs::write(&file, bytes).unwrap();
    assert!(DatasetContainer::open(&path).is_err());
}

#[test]
fn static_pipeline_is_consistent_and_resumable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config("desk-static", dir.path());
    let full = dir.path().join("full");
    let us = dir.path().join("af4");
    make_phantom(&cfg, &full).unwrap();
    undersample(&full, &us, cfg.mask, cfg.seeds().mask).unwrap();
    let d = StaticData::load(&DatasetContainer::open(&us).unwrap()).unwrap();
    assert_eq!(d.split.n_train + d.split.n_test, 3);
    for acq in &d.acquisitions {
        assert!(acq.on_mask_residual(acq.measured()).unwrap() < 1e-12);
    }

    let ckpt = dir.path().join("ckpt");
    let short = cfg.with_overrides(&["training.epochs=1".into()]).unwrap();
    assert_eq!(train(&short, &us, &ckpt).unwrap().epochs, 1);
    let resumed = train(&cfg, &us, &ckpt).unwrap();
    let fresh_dir = dir.path().join("fresh");
    let fresh = train(&cfg, &us, &fresh_dir).unwrap();
    assert_eq!(resumed, fresh);
    assert_eq!(StaticDimo::load(&ckpt).unwrap().losses(), StaticDimo::load(&fresh_dir).unwrap().losses());

    let recon = dir.path().join("recon");
    let report = sample(&cfg, &us, &ckpt, &recon).unwrap();
    assert_eq!(evaluate(&recon).unwrap(), report);
    let EvalReport::Static(s) = report else { panic!("static report expected") };
    assert_eq!(s.n_slices, 1);
    assert!(s.dimo.psnr.mean.is_finite());
}

#[test]
fn quant_pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config("desk-quant", dir.path());
    let report = run_experiment(&cfg).unwrap();
    assert_eq!(report.mode, "quant");
    let EvalReport::Quant(q) = &report.evaluations[0] else { panic!("quant report expected") };
    assert!(q.t1_nmse_zero_filled.iter().all(|v| v.is_finite()));
    assert!((0.0..=1.0).contains(&q.invalid_fraction_dimo));
    let u = report.uncertainty.as_ref().unwrap();
    assert_eq!(u.entries.iter().map(|e| e.n_samples).collect::<Vec<_>>(), vec![2, 3]);
    assert!(dir.path().join("report.json").exists());
    assert!(dir.path().join("config.toml").exists());
}

#[test]
fn mode_mismatch_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config("desk-static", dir.path());
    make_phantom(&cfg, &dir.path().join("full")).unwrap();
    let quant = tiny_config("desk-quant", dir.path());
    let err = train(&quant, &dir.path().join("full"), &dir.path().join("ck")).unwrap_err();
    assert!(matches!(err, DimoError::Data(_)));
    assert!(matches!(evaluate(&dir.path().join("missing")), Err(DimoError::Data(_) | DimoError::Io(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn overrides_survive_toml_round_trip(epochs in 1u64..1000, lr in 1e-6f64..1e-1, seed in any::<u32>()) {
        let cfg = ExperimentConfig::desk_static()
            .with_overrides(&[format!("training.epochs={epochs}"), format!("training.lr={lr:e}"), format!("seed={seed}")])
            .unwrap();
        prop_assert_eq!(cfg.training.epochs, epochs);
        prop_assert_eq!(cfg.seed, seed as u64);
        prop_assert_eq!(ExperimentConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap(), cfg);
    }

    #[test]
    fn mask_seeds_are_distinct_per_slice_and_angle(base in any::<u32>(), s in 0usize..64, a in 0usize..8) {
        let base = base as u64;
        prop_assert_ne!(MaskSpec::seed_for(base, s, a), MaskSpec::seed_for(base, s + 1, a));
        prop_assert_ne!(MaskSpec::seed_for(base, s, a), MaskSpec::seed_for(base, s, a + 1));
    }
}
