use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use sbcp::embedstore::{read_dataset, write_class_features, write_dataset};
use sbcp::metrics::{auroc, fpr_at_95_tpr};
use sbcp::subspace::alignment_ratios;
use sbcp::synth::{generate, SynthConfig};
use sbcp::trainer::{build_encoder, evaluate, load_checkpoint, train, TrainConfig};
use sbcp_ffi::*;

fn cpath(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let p = sbcp_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_owned()
}

fn small() -> SynthConfig {
    SynthConfig {
        dim: 24,
        num_classes: 3,
        subspace_dim: 4,
        train_per_class: 6,
        id_test: 20,
        ood_test: 15,
        grid_height: 2,
        grid_width: 2,
        ..SynthConfig::default()
    }
}

struct Files {
    _dir: tempfile::TempDir,
    train: CString,
    id: CString,
    ood: CString,
    text: CString,
    root: std::path::PathBuf,
}

fn files() -> Files {
    let dir = tempfile::tempdir().unwrap();
    let data = generate(&small()).unwrap();
    let root = dir.path().to_path_buf();
    write_dataset(&data.train, root.join("train.sbcp")).unwrap();
    write_dataset(&data.id_test, root.join("id.sbcp")).unwrap();
    write_dataset(&data.ood_test, root.join("ood.sbcp")).unwrap();
    write_class_features(&data.train.classes, root.join("text.sbcp")).unwrap();
    Files {
        train: cpath(&root.join("train.sbcp")),
        id: cpath(&root.join("id.sbcp")),
        ood: cpath(&root.join("ood.sbcp")),
        text: cpath(&root.join("text.sbcp")),
        root,
        _dir: dir,
    }
}

unsafe fn open(p: &CString) -> *mut SbcpDataset {
    let mut ds = ptr::null_mut();
    assert_eq!(sbcp_dataset_open(p.as_ptr(), &mut ds), SbcpStatus::Ok);
    ds
}

fn options() -> SbcpTrainOptions {
    let mut o = unsafe { std::mem::zeroed::<SbcpTrainOptions>() };
    assert_eq!(unsafe { sbcp_train_options_default(3, &mut o) }, SbcpStatus::Ok);
    o.prompts = 4;
    o.epochs = 3;
    o.batch_size = 5;
    o.lr = 0.05;
    o
}

#[test]
fn defaults_match_the_engine() {
    let o = unsafe {
        let mut o = std::mem::zeroed::<SbcpTrainOptions>();
        assert_eq!(sbcp_train_options_default(7, &mut o), SbcpStatus::Ok);
        o
    };
    let c = TrainConfig::new(7);
    assert_eq!(o.prompts, c.prompts);
    assert_eq!(o.lr, c.lr);
    assert_eq!(o.rank_c, c.softmax.rank_c);
    assert_eq!(o.tau, c.softmax.tau);
    assert_eq!((o.lambda1, o.lambda2, o.lambda3), (0.25, 2.0, 5.0));
    assert_eq!(o.modulation, SbcpModulation::Sct as u32);
    assert_eq!(o.encoder, SbcpEncoder::Surrogate as u32);
    assert_eq!(o.shots, 0);
    let v = unsafe { CStr::from_ptr(sbcp_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn dataset_handle_reports_shape() {
    let f = files();
    unsafe {
        let ds = open(&f.train);
        let (mut d, mut k, mut n, mut r) = (0, 0, 0, 0);
        assert_eq!(sbcp_dataset_shape(ds, &mut d, &mut k, &mut n, &mut r), SbcpStatus::Ok);
        assert_eq!((d, k, n, r), (24, 3, 18, 4));
        // outputs are optional
        assert_eq!(sbcp_dataset_shape(ds, ptr::null_mut(), &mut k, ptr::null_mut(), ptr::null_mut()), SbcpStatus::Ok);
        assert!(sbcp_last_error().is_null());
        sbcp_dataset_free(ds);
        sbcp_dataset_free(ptr::null_mut());
    }
}

#[test]
fn train_save_load_evaluate_matches_the_engine() {
    let f = files();
    unsafe {
        let train_ds = open(&f.train);
        let (id, ood) = (open(&f.id), open(&f.ood));
        let o = options();
        let mut model = ptr::null_mut();
        assert_eq!(sbcp_model_train(train_ds, &o, ptr::null(), &mut model), SbcpStatus::Ok);
        let (mut d, mut m) = (0, 0);
        assert_eq!(sbcp_model_shape(model, &mut d, &mut m), SbcpStatus::Ok);
        assert_eq!((d, m), (24, 4));

        // the same run through the Rust API
        let ds = read_dataset(f.root.join("train.sbcp")).unwrap();
        let cfg = TrainConfig {
            prompts: 4,
            epochs: 3,
            batch_size: 5,
            lr: 0.05,
            ..TrainConfig::new(3)
        };
        let enc = build_encoder(&cfg, 24, None).unwrap();
        let state = train(&ds, &cfg, &enc).unwrap();
        let mut w = vec![0.0; 24 * 4];
        assert_eq!(sbcp_model_prompts(model, w.as_mut_ptr(), w.len()), SbcpStatus::Ok);
        for i in 0..24 {
            for j in 0..4 {
                assert_eq!(w[i * 4 + j], state.prompts.matrix()[(i, j)]);
            }
        }
        assert_eq!(sbcp_model_prompts(model, w.as_mut_ptr(), 3), SbcpStatus::BufferTooSmall);

        let mut report = SbcpReport::default();
        assert_eq!(sbcp_model_evaluate(model, id, ood, 0.0, &mut report), SbcpStatus::Ok);
        let (idd, oodd) = (read_dataset(f.root.join("id.sbcp")).unwrap(), read_dataset(f.root.join("ood.sbcp")).unwrap());
        let expect = evaluate(&state.prompts, &enc, &idd.classes, &idd, &oodd, &cfg.softmax).unwrap();
        assert_eq!(report.auroc, expect.auroc);
        assert_eq!(report.fpr95, expect.fpr95);
        assert_eq!(report.id_accuracy, expect.id_accuracy);
        assert_eq!((report.n_id, report.n_ood), (20, 15));

        // per-sample scores reproduce the metrics
        let mut id_scores = vec![0.0; 20];
        let mut ood_scores = vec![0.0; 15];
        let mut preds = vec![0usize; 20];
        assert_eq!(sbcp_model_score(model, id, 0.0, id_scores.as_mut_ptr(), preds.as_mut_ptr(), 20), SbcpStatus::Ok);
        assert_eq!(sbcp_model_score(model, ood, 0.0, ood_scores.as_mut_ptr(), ptr::null_mut(), 15), SbcpStatus::Ok);
        assert_eq!(auroc(&id_scores, &ood_scores).unwrap(), report.auroc);
        assert!(preds.iter().all(|&p| p < 3));
        assert_eq!(sbcp_model_score(model, id, 0.0, id_scores.as_mut_ptr(), ptr::null_mut(), 19), SbcpStatus::BufferTooSmall);

        let ck = cpath(&f.root.join("w.ckpt"));
        assert_eq!(sbcp_model_save(model, ck.as_ptr()), SbcpStatus::Ok);
        let (_, meta) = load_checkpoint(&f.root.join("w.ckpt")).unwrap();
        assert_eq!(meta.epochs_completed, 3);
        let mut loaded = ptr::null_mut();
        assert_eq!(sbcp_model_load(ck.as_ptr(), ptr::null(), &mut loaded), SbcpStatus::Ok);
        let mut r2 = SbcpReport::default();
        assert_eq!(sbcp_model_evaluate(loaded, id, ood, 0.0, &mut r2), SbcpStatus::Ok);
        // f32 storage may move scores by rounding only
        assert!((r2.auroc - report.auroc).abs() < 0.02);

        for h in [model, loaded] {
            sbcp_model_free(h);
        }
        for h in [train_ds, id, ood] {
            sbcp_dataset_free(h);
        }
    }
}

#[test]
fn alignment_matches_the_projector() {
    let f = files();
    unsafe {
        let ds = open(&f.train);
        let o = SbcpTrainOptions { epochs: 1, ..options() };
        let mut model = ptr::null_mut();
        assert_eq!(sbcp_model_train(ds, &o, ptr::null(), &mut model), SbcpStatus::Ok);
        // training is deterministic, so the Rust API yields the same W
        let train_set = read_dataset(f.root.join("train.sbcp")).unwrap();
        let cfg = TrainConfig {
            prompts: 4,
            epochs: 1,
            batch_size: 5,
            lr: 0.05,
            ..TrainConfig::new(3)
        };
        let pm = train(&train_set, &cfg, &build_encoder(&cfg, 24, None).unwrap()).unwrap().prompts;
        let feat = train_set.records[0].global.clone();
        let (mut par, mut orth) = (0.0, 0.0);
        assert_eq!(sbcp_model_alignment(model, feat.as_ptr(), 24, &mut par, &mut orth), SbcpStatus::Ok);
        let (ep, eo) = alignment_ratios(&pm, &feat).unwrap();
        assert_eq!((par, orth), (ep, eo));
        // εI shrinks the projection when W is small, so only bound it
        assert!((0.0..=1.0).contains(&par) && orth > 0.0);

        assert_eq!(sbcp_model_alignment(model, feat.as_ptr(), 23, &mut par, &mut orth), SbcpStatus::Dimension);
        let zero = [0.0; 24];
        assert_eq!(sbcp_model_alignment(model, zero.as_ptr(), 24, &mut par, &mut orth), SbcpStatus::Degenerate);
        assert!(!last_error().is_empty());
        sbcp_model_free(model);
        sbcp_dataset_free(ds);
    }
}

#[test]
fn frozen_encoder_needs_text_features() {
    let f = files();
    unsafe {
        let ds = open(&f.train);
        let o = SbcpTrainOptions {
            encoder: SbcpEncoder::Frozen as u32,
            ..options()
        };
        let mut model = ptr::null_mut();
        assert_eq!(sbcp_model_train(ds, &o, ptr::null(), &mut model), SbcpStatus::InvalidArgument);
        assert!(model.is_null());
        assert_eq!(sbcp_model_train(ds, &o, f.text.as_ptr(), &mut model), SbcpStatus::Ok);
        // the sidecar remembers the text file
        let ck = cpath(&f.root.join("frozen.ckpt"));
        assert_eq!(sbcp_model_save(model, ck.as_ptr()), SbcpStatus::Ok);
        let mut loaded = ptr::null_mut();
        assert_eq!(sbcp_model_load(ck.as_ptr(), ptr::null(), &mut loaded), SbcpStatus::Ok);
        let missing = cpath(&f.root.join("nope.sbcp"));
        let mut again = ptr::null_mut();
        assert_eq!(sbcp_model_load(ck.as_ptr(), missing.as_ptr(), &mut again), SbcpStatus::Io);
        sbcp_model_free(loaded);
        sbcp_model_free(model);
        sbcp_dataset_free(ds);
    }
}

#[test]
fn errors_carry_status_and_message() {
    let f = files();
    unsafe {
        let mut ds = ptr::null_mut();
        assert_eq!(sbcp_dataset_open(ptr::null(), &mut ds), SbcpStatus::NullPointer);
        assert!(last_error().contains("path"));
        assert_eq!(sbcp_dataset_open(f.train.as_ptr(), ptr::null_mut()), SbcpStatus::NullPointer);

        let missing = cpath(&f.root.join("missing.sbcp"));
        assert_eq!(sbcp_dataset_open(missing.as_ptr(), &mut ds), SbcpStatus::Io);
        assert!(ds.is_null());
        assert!(last_error().contains("missing.sbcp"));

        let bytes = std::fs::read(f.root.join("train.sbcp")).unwrap();
        std::fs::write(f.root.join("cut.sbcp"), &bytes[..bytes.len() - 1]).unwrap();
        let cut = cpath(&f.root.join("cut.sbcp"));
        assert_eq!(sbcp_dataset_open(cut.as_ptr(), &mut ds), SbcpStatus::Format);
        assert!(last_error().contains("embedstore"));
        // text-feature files have no records to train on
        assert_eq!(sbcp_dataset_open(f.text.as_ptr(), &mut ds), SbcpStatus::Format);

        let bad_utf8 = CString::new(vec![0xff, 0xfe]).unwrap();
        assert_eq!(sbcp_dataset_open(bad_utf8.as_ptr(), &mut ds), SbcpStatus::InvalidArgument);

        let train_ds = open(&f.train);
        let mut model = ptr::null_mut();
        for bad in [
            SbcpTrainOptions { prompts: 24, ..options() },
            SbcpTrainOptions { modulation: 9, ..options() },
            SbcpTrainOptions { encoder: 9, ..options() },
            SbcpTrainOptions { tau: -1.0, ..options() },
        ] {
            assert_eq!(sbcp_model_train(train_ds, &bad, ptr::null(), &mut model), SbcpStatus::InvalidArgument);
            assert!(model.is_null());
        }
        // a successful call clears the message
        let mut n = 0;
        sbcp_dataset_shape(train_ds, ptr::null_mut(), ptr::null_mut(), &mut n, ptr::null_mut());
        assert!(sbcp_last_error().is_null());
        assert_eq!(sbcp_dataset_shape(ptr::null(), &mut n, ptr::null_mut(), ptr::null_mut(), ptr::null_mut()), SbcpStatus::NullPointer);
        sbcp_dataset_free(train_ds);
    }
}

#[test]
fn model_rejects_mismatched_datasets() {
    let f = files();
    let other = tempfile::tempdir().unwrap();
    let data = generate(&SynthConfig { num_classes: 4, ..small() }).unwrap();
    write_dataset(&data.id_test, other.path().join("k4.sbcp")).unwrap();
    unsafe {
        let ds = open(&f.train);
        let k4 = open(&cpath(&other.path().join("k4.sbcp")));
        let mut model = ptr::null_mut();
        assert_eq!(sbcp_model_train(ds, &SbcpTrainOptions { epochs: 1, ..options() }, ptr::null(), &mut model), SbcpStatus::Ok);
        let mut s = vec![0.0; 100];
        assert_eq!(sbcp_model_score(model, k4, 0.0, s.as_mut_ptr(), ptr::null_mut(), 100), SbcpStatus::Format);
        let mut r = SbcpReport::default();
        assert_eq!(sbcp_model_evaluate(model, k4, ds, 0.0, &mut r), SbcpStatus::Format);
        sbcp_model_free(model);
        sbcp_dataset_free(k4);
        sbcp_dataset_free(ds);
    }
}

#[test]
fn metric_functions_match_the_engine() {
    let id = [0.9, 0.5, 0.5, 0.7, 0.2];
    let ood = [0.5, 0.1, 0.8];
    unsafe {
        let mut a = 0.0;
        assert_eq!(sbcp_auroc(id.as_ptr(), 5, ood.as_ptr(), 3, &mut a), SbcpStatus::Ok);
        assert_eq!(a, auroc(&id, &ood).unwrap());
        let (mut fpr, mut eta) = (0.0, 0.0);
        assert_eq!(sbcp_fpr95(id.as_ptr(), 5, ood.as_ptr(), 3, &mut fpr, &mut eta), SbcpStatus::Ok);
        assert_eq!((fpr, eta), fpr_at_95_tpr(&id, &ood).unwrap());
        assert_eq!(sbcp_fpr95(id.as_ptr(), 5, ood.as_ptr(), 3, &mut fpr, ptr::null_mut()), SbcpStatus::Ok);
        assert_eq!(sbcp_auroc(id.as_ptr(), 5, ood.as_ptr(), 0, &mut a), SbcpStatus::EmptyInput);
        assert_eq!(sbcp_auroc(ptr::null(), 5, ood.as_ptr(), 3, &mut a), SbcpStatus::NullPointer);
        assert_eq!(sbcp_auroc(id.as_ptr(), 5, ood.as_ptr(), 3, ptr::null_mut()), SbcpStatus::NullPointer);
    }
}

#[test]
fn header_is_generated_and_compiles() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/sbcp.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in [
        "sbcp_last_error",
        "sbcp_dataset_open",
        "sbcp_model_train",
        "sbcp_model_evaluate",
        "sbcp_fpr95",
        "SBCP_STATUS_BUFFER_TOO_SMALL",
        "typedef struct SbcpModel SbcpModel;",
    ] {
        assert!(text.contains(name), "header lacks {name}");
    }
    let Ok(cc) = which_cc() else { return };
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"sbcp.h\"\nint main(void) { SbcpTrainOptions o; SbcpReport r; (void)o; (void)r;\n\
         return sbcp_dataset_open(0, 0) == SBCP_STATUS_OK; }\n",
    )
    .unwrap();
    let status = std::process::Command::new(cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(header.parent().unwrap())
        .arg(&src)
        .status()
        .unwrap();
    assert!(status.success());
}

fn which_cc() -> Result<&'static str, ()> {
    ["cc", "gcc", "clang"]
        .into_iter()
        .find(|c| std::process::Command::new(c).arg("--version").output().is_ok_and(|o| o.status.success()))
        .ok_or(())
}
