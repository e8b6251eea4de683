use nalgebra::{DMatrix, DVector};

use sbcp::embedstore::{validate_dataset, Dataset};
use sbcp::metrics::auroc;
use sbcp::synth::{generate, GroundTruth, SynthConfig};

/// `‖Uᵀf‖ / ‖f‖` for orthonormal `U`.
fn par_ratio(u: &DMatrix<f64>, f: &[f64]) -> f64 {
    let v = DVector::from_column_slice(f);
    u.tr_mul(&v).norm() / v.norm()
}

fn orth_ratio(u: &DMatrix<f64>, f: &[f64]) -> f64 {
    let v = DVector::from_column_slice(f);
    (&v - u * u.tr_mul(&v)).norm() / v.norm()
}

#[test]
fn no_leak_keeps_training_regions_in_span() {
    let sigma = 0.05;
    let out = generate(&SynthConfig {
        ood_leak: 0.0,
        noise_sigma: sigma,
        ..SynthConfig::default()
    })
    .unwrap();
    let u = out.planted_basis();
    for r in &out.train.records {
        assert!(orth_ratio(&u, &r.global) <= 3.0 * sigma);
        for f in r.locals_iter() {
            // exact up to the f32 rounding of stored features
            assert!(orth_ratio(&u, f) <= 1e-6);
        }
    }
}

#[test]
fn ood_features_lie_in_the_complement() {
    let sigma = 0.05;
    let out = generate(&SynthConfig::default()).unwrap();
    let u = out.planted_basis();
    for r in &out.ood_test.records {
        assert!(par_ratio(&u, &r.global) <= 3.0 * sigma);
        assert!(r.locals_iter().all(|f| par_ratio(&u, f) <= 3.0 * sigma));
    }
    let noiseless = generate(&SynthConfig {
        noise_sigma: 0.0,
        ..SynthConfig::default()
    })
    .unwrap();
    let u = noiseless.planted_basis();
    assert!(noiseless.ood_test.records.iter().all(|r| par_ratio(&u, &r.global) <= 1e-6));
}

#[test]
fn leaked_regions_match_ground_truth() {
    let out = generate(&SynthConfig::default()).unwrap();
    let u = out.planted_basis();
    for (r, mask) in out.train.records.iter().zip(&out.truth.train_region_ood) {
        assert_eq!(mask.iter().filter(|&&b| b).count(), 4);
        for (f, &ood) in r.locals_iter().zip(mask) {
            assert_eq!(par_ratio(&u, f) < 0.5, ood);
        }
    }
}

#[test]
fn oracle_detector_separates_perfectly() {
    for seed in 0..3 {
        let out = generate(&SynthConfig {
            seed,
            ..SynthConfig::default()
        })
        .unwrap();
        let u = out.planted_basis();
        let score = |ds: &Dataset| ds.records.iter().map(|r| par_ratio(&u, &r.global)).collect::<Vec<_>>();
        assert_eq!(auroc(&score(&out.id_test), &score(&out.ood_test)).unwrap(), 1.0);
    }
}

#[test]
fn outputs_are_valid_unit_and_reproducible() {
    let cfg = SynthConfig {
        seed: 9,
        ..SynthConfig::default()
    };
    let a = generate(&cfg).unwrap();
    let b = generate(&cfg).unwrap();
    for (x, y) in [(&a.train, &b.train), (&a.id_test, &b.id_test), (&a.ood_test, &b.ood_test)] {
        assert!(validate_dataset(x).is_empty());
        assert_eq!(x.to_bytes().unwrap(), y.to_bytes().unwrap());
        assert!(x.header.flags.normalized());
        for r in &x.records {
            let n: f64 = r.global.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }
    assert_eq!(a.truth, b.truth);
    let other = generate(&SynthConfig { seed: 10, ..cfg }).unwrap();
    assert_ne!(other.train.to_bytes().unwrap(), a.train.to_bytes().unwrap());
}

#[test]
fn ground_truth_sidecar_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let out = generate(&SynthConfig::default()).unwrap();
    let p = dir.path().join("train.sbcp");
    out.truth.write(&p).unwrap();
    assert!(dir.path().join("train.sbcp.truth.json").exists());
    let back = GroundTruth::read(&p).unwrap();
    assert_eq!(back.config, out.truth.config);
    assert_eq!(back.train_region_ood, out.truth.train_region_ood);
    assert!((back.basis() - out.planted_basis()).amax() < 1e-15);
}
