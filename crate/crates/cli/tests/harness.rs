use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use proptest::prelude::*;
use sha2::{Digest, Sha256};
use tlalign::mixing::MixStrategy;
use tlalign::trainer::OptimizerKind;
use tlalign::vit::Pooling;
use tlalign_cli::config::{DataSource, Precision, RunConfig};
use tlalign_cli::dataset::{load_idx, Split};
use tlalign_cli::experiment::{self, MIXLOG_FILE};

fn mnist_dir() -> PathBuf {
    std::env::var_os("TLALIGN_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

/// Checksum of the first `n` images decoded straight from the byte layout:
/// 16-byte header, then `rows * cols` bytes per image.
fn reference_checksum(bytes: &[u8], n: usize) -> (Vec<u8>, usize, usize) {
    let be = |o: usize| u32::from_be_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let (rows, cols) = (be(8), be(12));
    let mut h = Sha256::new();
    for i in 0..n {
        let start = 16 + i * rows * cols;
        for &b in &bytes[start..start + rows * cols] {
            h.update((b as f32 / 255.0).to_le_bytes());
        }
    }
    (h.finalize().to_vec(), rows, cols)
}

fn loader_checksum(images: &[tlalign::Image], n: usize) -> Vec<u8> {
    let mut h = Sha256::new();
    for img in &images[..n] {
        for &p in img.pixels() {
            h.update(p.to_le_bytes());
        }
    }
    h.finalize().to_vec()
}

#[test]
fn idx_loader_matches_byte_level_decode() {
    let dir = tempfile::tempdir().unwrap();
    let (ip, lp) = (dir.path().join("img"), dir.path().join("lab"));
    let mut img = Vec::new();
    for w in [0x803u32, 12, 5, 3] {
        img.extend_from_slice(&w.to_be_bytes());
    }
    img.extend((0..12 * 15).map(|i| (i * 37 % 256) as u8));
    let mut lab = Vec::new();
    for w in [0x801u32, 12] {
        lab.extend_from_slice(&w.to_be_bytes());
    }
    lab.extend((0..12).map(|i| (i % 10) as u8));
    fs::write(&ip, &img).unwrap();
    fs::write(&lp, &lab).unwrap();
    let ds = load_idx(&ip, &lp, Split::Train, 10, None).unwrap();
    let (want, rows, cols) = reference_checksum(&img, 10);
    assert_eq!((ds.images[0].height(), ds.images[0].width()), (rows, cols));
    assert_eq!(loader_checksum(&ds.images, 10), want);
    assert_eq!(
        ds.labels[..10],
        lab[8..18].iter().map(|&b| b as usize).collect::<Vec<_>>()[..]
    );
}

#[test]
fn mnist_loader_matches_byte_level_decode() {
    let dir = mnist_dir();
    let (ip, lp) = (
        dir.join("train-images-idx3-ubyte"),
        dir.join("train-labels-idx1-ubyte"),
    );
    if !ip.is_file() || !lp.is_file() {
        eprintln!(
            "MNIST not found in {}; run scripts/fetch_mnist.sh",
            dir.display()
        );
        return;
    }
    let ds = load_idx(&ip, &lp, Split::Train, 10, None).unwrap();
    assert_eq!(ds.len(), 60_000);
    assert_eq!((ds.images[0].height(), ds.images[0].width()), (28, 28));
    assert!(ds.labels.iter().all(|&l| l < 10));
    let bytes = fs::read(&ip).unwrap();
    let (want, _, _) = reference_checksum(&bytes, 10);
    assert_eq!(loader_checksum(&ds.images, 10), want);
    let labels = fs::read(&lp).unwrap();
    let first: Vec<usize> = labels[8..18].iter().map(|&b| b as usize).collect();
    assert_eq!(ds.labels[..10], first[..]);
}

fn synthetic_config(out: &Path, tl_align: bool, seed: u64) -> RunConfig {
    let mut cfg = RunConfig::parse(
        "model.image_size = 8\nmodel.patch_size = 4\nmodel.depth = 2\nmodel.dim = 16\n\
         model.heads = 2\nmodel.num_classes = 3\ndata.source = synthetic\ndata.classes = 3\n\
         data.train_per_class = 12\ndata.test_per_class = 4\ntrain.epochs = 2\n\
         train.batch_size = 6\nrun.log_mixes = on\nrun.diagnostic_samples = 3\n",
    )
    .unwrap();
    cfg.output = out.to_path_buf();
    cfg.train.tl_align = tl_align;
    cfg.train.seed = seed;
    cfg
}

fn body(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(String::from)
        .collect()
}

#[test]
fn paired_runs_share_mixing_decisions() {
    for strategy in [MixStrategy::CutMix, MixStrategy::BlockWise] {
        let (on, off) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let mut a = synthetic_config(on.path(), true, 5);
        let mut b = synthetic_config(off.path(), false, 5);
        a.train.mix.strategy = strategy;
        b.train.mix.strategy = strategy;
        let ra = experiment::train(&a, |_| {}).unwrap();
        let rb = experiment::train(&b, |_| {}).unwrap();
        let (la, lb) = (
            body(&on.path().join(MIXLOG_FILE)),
            body(&off.path().join(MIXLOG_FILE)),
        );
        assert_eq!(la.len(), 2 * 36);
        assert_eq!(la, lb);
        // targets differ, so training diverges
        assert_ne!(ra.metrics[1].train_loss, rb.metrics[1].train_loss);
    }
}

fn arb_config() -> impl Strategy<Value = RunConfig> {
    let model = (
        1usize..5,
        prop::sample::select(vec![8usize, 16]),
        1usize..4,
        any::<bool>(),
    );
    let train = (
        1usize..50,
        1usize..128,
        1e-6f64..1.0,
        0.0f64..0.5,
        any::<bool>(),
        any::<bool>(),
        any::<u64>(),
        0.0f64..0.9,
    );
    let mix = (
        0usize..4,
        0.0f64..=1.0,
        0.01f64..4.0,
        0.0f64..=1.0,
        0.0f64..=1.0,
    );
    let data = prop_oneof![
        (
            prop::option::of(1usize..60_000),
            prop::option::of(1usize..10_000),
            "[a-z][a-z0-9_/]{0,12}"
        )
            .prop_map(|(tr, te, dir)| DataSource::Mnist {
                dir: PathBuf::from(dir),
                train_limit: tr,
                test_limit: te,
            }),
        (
            1usize..17,
            1usize..500,
            1usize..100,
            0.0f64..1.0,
            any::<u64>()
        )
            .prop_map(|(classes, tr, te, noise, seed)| DataSource::Synthetic {
                classes,
                train_per_class: tr,
                test_per_class: te,
                noise,
                seed,
            }),
    ];
    (
        model,
        train,
        mix,
        data,
        "[a-z][a-z0-9_/]{0,12}",
        any::<bool>(),
        0usize..20,
        any::<bool>(),
    )
        .prop_map(|(m, t, x, data, out, f64p, diag, log)| {
            let mut c = RunConfig::default();
            c.model.depth = m.0;
            c.model.dim = m.1;
            c.model.mlp_ratio = m.2;
            c.model.pooling = if m.3 {
                Pooling::GlobalPool
            } else {
                Pooling::ClassToken
            };
            c.train.epochs = t.0;
            c.train.batch_size = t.1;
            c.train.learning_rate = t.2;
            c.train.weight_decay = t.3;
            c.train.optimizer = if t.4 {
                OptimizerKind::SgdMomentum
            } else {
                OptimizerKind::AdamwLite
            };
            c.train.tl_align = t.5;
            c.train.seed = t.6;
            c.train.label_smoothing = t.7;
            c.train.mix.strategy = [
                MixStrategy::CutMix,
                MixStrategy::MixUp,
                MixStrategy::RandomPatch,
                MixStrategy::BlockWise,
            ][x.0];
            c.train.mix.apply_prob = x.1;
            c.train.mix.mixup_alpha = x.2;
            c.train.mix.patch_prob = x.3;
            c.train.mix.block_budget = x.4;
            c.model.num_classes = data.num_classes();
            c.data = data;
            c.output = PathBuf::from(out);
            c.precision = if f64p { Precision::F64 } else { Precision::F32 };
            c.diagnostic_samples = diag;
            c.log_mixes = log;
            c
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn config_round_trips(c in arb_config()) {
        let text = c.serialize();
        let parsed = RunConfig::parse(&text).unwrap();
        prop_assert_eq!(&parsed, &c);
        prop_assert_eq!(parsed.serialize(), text);
        prop_assert_eq!(parsed.hash(), c.hash());
    }
}

fn tlalign() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tlalign"))
}

#[test]
fn cli_reports_config_errors_with_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "model.depth = 2\n# comment\nmodel.heads = many\n").unwrap();
    let out = tlalign()
        .args(["--config"])
        .arg(&cfg)
        .arg("train")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 3"), "{err}");
}

#[test]
fn cli_aborts_on_non_finite_loss() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = synthetic_config(&dir.path().join("run"), true, 1);
    cfg.train.optimizer = OptimizerKind::SgdMomentum;
    cfg.train.learning_rate = 1e300;
    cfg.train.weight_decay = 0.0;
    let path = dir.path().join("nan.cfg");
    fs::write(&path, cfg.serialize()).unwrap();
    let out = tlalign()
        .arg("--config")
        .arg(&path)
        .arg("train")
        .output()
        .unwrap();
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(out.status.code(), Some(3), "{err}");
    assert!(err.contains("non-finite loss at sample"), "{err}");
}

#[test]
fn cli_flags_override_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synthetic_config(&dir.path().join("ignored"), true, 1);
    let path = dir.path().join("run.cfg");
    fs::write(&path, cfg.serialize()).unwrap();
    let out_dir = dir.path().join("out");
    let out = tlalign()
        .arg("--config")
        .arg(&path)
        .args([
            "--seed",
            "9",
            "--tl-align",
            "off",
            "--mix",
            "mixup",
            "--precision",
            "f64",
            "--out",
        ])
        .arg(&out_dir)
        .arg("train")
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let written =
        RunConfig::parse(&fs::read_to_string(out_dir.join("config.txt")).unwrap()).unwrap();
    assert_eq!(written.train.seed, 9);
    assert!(!written.train.tl_align);
    assert_eq!(written.train.mix.strategy, MixStrategy::MixUp);
    assert_eq!(written.precision, Precision::F64);

    let diag = tlalign()
        .arg("--config")
        .arg(&path)
        .args([
            "--seed",
            "9",
            "--tl-align",
            "off",
            "--mix",
            "mixup",
            "--precision",
            "f64",
            "--out",
        ])
        .arg(&out_dir)
        .arg("diagnose")
        .output()
        .unwrap();
    assert!(
        diag.status.success(),
        "{}",
        String::from_utf8_lossy(&diag.stderr)
    );
}

#[test]
fn cli_selftest_and_gradcheck_succeed() {
    let out = tlalign().arg("selftest").output().unwrap();
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(out.status.code(), Some(0), "{text}");
    assert_eq!(
        text.lines().filter(|l| l.starts_with("PASS")).count(),
        6,
        "{text}"
    );

    let dir = tempfile::tempdir().unwrap();
    let out = tlalign()
        .arg("--out")
        .arg(dir.path())
        .arg("gradcheck")
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stdout)
    );
}
