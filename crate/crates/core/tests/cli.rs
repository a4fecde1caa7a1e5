//! End-to-end checks of the command-line surface: exit codes, file
//! layouts and the documented behaviors of each subcommand.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use kpn_translate::image::{Image, LabelMap};
use kpn_translate::networks::{
    save_checkpoint, CheckpointMeta, Discriminator, Encoder, FeatureMode, Kpn, ModelBundle,
};
use kpn_translate::params::{Geometry, SigmaBounds};
use kpn_translate::toy::{generate_scene, SceneKind, ToySceneSpec};

fn kpnt() -> Command {
    Command::new(env!("CARGO_BIN_EXE_kpnt"))
}

fn run(args: &[&str]) -> Output {
    kpnt().args(args).output().expect("spawn kpnt")
}

fn assert_exit(out: &Output, code: i32, ctx: &str) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "{ctx}\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn tiny_geometry_args() -> Vec<String> {
    vec![
        "--height".into(),
        "128".into(),
        "--width".into(),
        "128".into(),
        "--low-height".into(),
        "16".into(),
        "--low-width".into(),
        "16".into(),
    ]
}

fn make_tiny_dataset(dir: &Path, count: usize, seed: u64) {
    let mut args: Vec<String> = vec![
        "make-toy-data".into(),
        "--out".into(),
        dir.to_string_lossy().into(),
        "--count".into(),
        count.to_string(),
        "--seed".into(),
        seed.to_string(),
    ];
    args.extend(tiny_geometry_args());
    let out = kpnt().args(&args).output().unwrap();
    assert_exit(&out, 0, "make-toy-data");
}

fn identity_checkpoint(path: &Path, geom: Geometry) {
    let bundle = ModelBundle {
        meta: CheckpointMeta {
            geom,
            n_classes: 4,
            sigma_bounds: SigmaBounds::default(),
            enable_affine: true,
            enable_blur: true,
            enable_noise: true,
            noise_seed: 12345,
            feature_mode: FeatureMode::OneHot,
            iteration: 0,
        },
        encoder: Encoder::<f64>::oracle(4),
        kpn: Kpn::identity_init(4, SigmaBounds::default()),
        disc: Discriminator::init(1),
        disc_low: None,
        adam: None,
    };
    save_checkpoint(&bundle, path).unwrap();
}

fn tiny_config(dir: &Path, iterations: u64, seed: u64) -> PathBuf {
    let path = dir.join("train.cfg");
    std::fs::write(
        &path,
        format!(
            "iterations = {iterations}\nbatch = 2\nseed = {seed}\nhigh_h = 128\nhigh_w = 128\n\
             low_h = 16\nlow_w = 16\nn_classes = 4\ncheckpoint_every = 0\nprecision = f32\n"
        ),
    )
    .unwrap();
    path
}

#[test]
fn toy_data_layout_matches_contract() {
    let dir = tempfile::tempdir().unwrap();
    make_tiny_dataset(dir.path(), 3, 9);
    for i in 0..3 {
        assert!(dir.path().join(format!("src/img_{i:05}.png")).exists());
        assert!(dir.path().join(format!("src/lbl_{i:05}.png")).exists());
        assert!(dir.path().join(format!("tgt/img_{i:05}.png")).exists());
    }
}

#[test]
fn unknown_flag_is_rejected_with_usage() {
    let out = run(&["translate", "--definitely-not-a-flag"]);
    assert_exit(&out, 2, "unknown flag");
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.to_lowercase().contains("usage") || stderr.contains("Usage"));
}

#[test]
fn train_missing_source_dir_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 1, 0);
    let out = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--source",
        dir.path().join("nope").to_str().unwrap(),
        "--target",
        dir.path().join("nope2").to_str().unwrap(),
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_exit(&out, 2, "missing source dir");
}

#[test]
fn train_bad_config_key_exits_2_naming_key() {
    let dir = tempfile::tempdir().unwrap();
    make_tiny_dataset(dir.path(), 2, 1);
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "definitely_not_a_key = 4\n").unwrap();
    let out = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--source",
        dir.path().join("src").to_str().unwrap(),
        "--target",
        dir.path().join("tgt").to_str().unwrap(),
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_exit(&out, 2, "bad config key");
    assert!(String::from_utf8_lossy(&out.stderr).contains("definitely_not_a_key"));
}

#[test]
fn train_twice_same_seed_identical_loss_csv() {
    let dir = tempfile::tempdir().unwrap();
    make_tiny_dataset(dir.path(), 3, 13);
    let cfg = tiny_config(dir.path(), 2, 5);
    for name in ["a", "b"] {
        let out = run(&[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--source",
            dir.path().join("src").to_str().unwrap(),
            "--target",
            dir.path().join("tgt").to_str().unwrap(),
            "--out",
            dir.path().join(name).to_str().unwrap(),
        ]);
        assert_exit(&out, 0, "train run");
    }
    let a = std::fs::read(dir.path().join("a/loss_log.csv")).unwrap();
    let b = std::fs::read(dir.path().join("b/loss_log.csv")).unwrap();
    assert!(!a.is_empty());
    assert_eq!(a, b);
}

#[test]
fn translate_identity_checkpoint_within_one_quantization_step() {
    let dir = tempfile::tempdir().unwrap();
    make_tiny_dataset(dir.path(), 2, 21);
    let geom = Geometry::new(128, 128, 16, 16).unwrap();
    let ckpt = dir.path().join("identity.kpnc");
    identity_checkpoint(&ckpt, geom);
    let out_dir = dir.path().join("translated");
    let out = run(&[
        "translate",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--in",
        dir.path().join("src").to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--labels",
        dir.path().join("src").to_str().unwrap(),
    ]);
    assert_exit(&out, 0, "translate");
    for i in 0..2 {
        let name = format!("img_{i:05}.png");
        let a = Image::<f64>::load_png(&dir.path().join("src").join(&name)).unwrap();
        let b = Image::<f64>::load_png(&out_dir.join(&name)).unwrap();
        let max = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f64, f64::max);
        assert!(max <= 1.0 / 255.0 + 1e-9, "{name}: max diff {max}");
    }
    // Per-image timing lines are printed.
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("img_00000.png:"));
}

#[test]
fn translate_disabled_components_identity_for_any_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    make_tiny_dataset(dir.path(), 1, 23);
    let geom = Geometry::new(128, 128, 16, 16).unwrap();
    let ckpt = dir.path().join("scrambled.kpnc");
    // Scramble the prediction head so the checkpoint is far from identity.
    let mut bundle = ModelBundle {
        meta: CheckpointMeta {
            geom,
            n_classes: 4,
            sigma_bounds: SigmaBounds::default(),
            enable_affine: true,
            enable_blur: true,
            enable_noise: true,
            noise_seed: 1,
            feature_mode: FeatureMode::OneHot,
            iteration: 0,
        },
        encoder: Encoder::<f64>::oracle(4),
        kpn: Kpn::identity_init(4, SigmaBounds::default()),
        disc: Discriminator::init(1),
        disc_low: None,
        adam: None,
    };
    for (i, v) in bundle.kpn.conv.weight.data.iter_mut().enumerate() {
        *v = ((i % 7) as f64 - 3.0) * 0.2;
    }
    save_checkpoint(&bundle, &ckpt).unwrap();

    let out_dir = dir.path().join("translated");
    let out = run(&[
        "translate",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--in",
        dir.path().join("src").to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--labels",
        dir.path().join("src").to_str().unwrap(),
        "--disable",
        "affine",
        "--disable",
        "blur",
        "--disable",
        "noise",
    ]);
    assert_exit(&out, 0, "translate disabled");
    let name = "img_00000.png";
    let a = std::fs::read(dir.path().join("src").join(name)).unwrap();
    let b = std::fs::read(out_dir.join(name)).unwrap();
    assert_eq!(a, b, "fully disabled transform must be byte-identical");
}

#[test]
fn translate_geometry_mismatch_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    make_tiny_dataset(dir.path(), 1, 27);
    // Checkpoint with a different geometry than the inputs.
    let geom = Geometry::new(240, 416, 32, 56).unwrap();
    let ckpt = dir.path().join("big.kpnc");
    identity_checkpoint(&ckpt, geom);
    let out = run(&[
        "translate",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--in",
        dir.path().join("src").to_str().unwrap(),
        "--out",
        dir.path().join("t").to_str().unwrap(),
        "--labels",
        dir.path().join("src").to_str().unwrap(),
    ]);
    assert_exit(&out, 3, "geometry mismatch");
    assert!(String::from_utf8_lossy(&out.stderr).contains("240x416"));
}

#[test]
fn grad_check_passes_and_corrupt_hook_fails() {
    let out = run(&["grad-check", "--seed", "3", "--cases", "2"]);
    assert_exit(&out, 0, "grad-check");
    let stdout = String::from_utf8_lossy(&out.stdout);
    let components = stdout.lines().filter(|l| l.starts_with("[PASS]")).count();
    assert!(components >= 4, "only {components} components reported");

    let out = run(&["grad-check", "--seed", "3", "--cases", "2", "--corrupt"]);
    assert_exit(&out, 1, "corrupted grad-check");
    assert!(String::from_utf8_lossy(&out.stderr).contains("translate-params"));
}

#[test]
fn eval_seg_perfect_disjoint_and_hand_counted() {
    let dir = tempfile::tempdir().unwrap();
    let pred_dir = dir.path().join("pred");
    let gt_dir = dir.path().join("gt");
    std::fs::create_dir_all(&pred_dir).unwrap();
    std::fs::create_dir_all(&gt_dir).unwrap();

    let write = |dir: &Path, name: &str, data: &[u8], h: usize, w: usize| {
        LabelMap {
            h,
            w,
            data: data.to_vec(),
        }
        .save_png(&dir.join(name))
        .unwrap();
    };

    // Perfect prediction.
    write(&pred_dir, "a.png", &[0, 1, 1, 0], 2, 2);
    write(&gt_dir, "a.png", &[0, 1, 1, 0], 2, 2);
    let csv = dir.path().join("scores.csv");
    let out = run(&[
        "eval-seg",
        "--pred",
        pred_dir.to_str().unwrap(),
        "--gt",
        gt_dir.to_str().unwrap(),
        "--classes",
        "2",
        "--out",
        csv.to_str().unwrap(),
    ]);
    assert_exit(&out, 0, "eval-seg perfect");
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.lines().nth(1).unwrap().starts_with("1,1,1"));

    // Disjoint prediction: everything misclassified.
    write(&pred_dir, "a.png", &[1, 0, 0, 1], 2, 2);
    let out = run(&[
        "eval-seg",
        "--pred",
        pred_dir.to_str().unwrap(),
        "--gt",
        gt_dir.to_str().unwrap(),
        "--classes",
        "2",
        "--out",
        csv.to_str().unwrap(),
    ]);
    assert_exit(&out, 0, "eval-seg disjoint");
    let text = std::fs::read_to_string(&csv).unwrap();
    let fields: Vec<f64> = text
        .lines()
        .nth(1)
        .unwrap()
        .split(',')
        .map(|v| v.parse().unwrap())
        .collect();
    assert_eq!(fields, vec![0.0, 0.0, 0.0]);

    // Two-image hand-counted case across files:
    // image 1: gt [0,0,1,1] pred [0,1,1,1]; image 2: gt [1,1] pred [1,0].
    write(&pred_dir, "a.png", &[0, 1, 1, 1], 2, 2);
    write(&gt_dir, "a.png", &[0, 0, 1, 1], 2, 2);
    write(&pred_dir, "b.png", &[1, 0], 1, 2);
    write(&gt_dir, "b.png", &[1, 1], 1, 2);
    let out = run(&[
        "eval-seg",
        "--pred",
        pred_dir.to_str().unwrap(),
        "--gt",
        gt_dir.to_str().unwrap(),
        "--classes",
        "2",
        "--out",
        csv.to_str().unwrap(),
    ]);
    assert_exit(&out, 0, "eval-seg hand case");
    // cm = [[1,1],[1,3]]: pixel 4/6; class (1/2 + 3/4)/2; iou (1/3 + 3/5)/2.
    let text = std::fs::read_to_string(&csv).unwrap();
    let fields: Vec<f64> = text
        .lines()
        .nth(1)
        .unwrap()
        .split(',')
        .map(|v| v.parse().unwrap())
        .collect();
    assert!((fields[0] - 4.0 / 6.0).abs() < 1e-12);
    assert!((fields[1] - (0.5 + 0.75) / 2.0).abs() < 1e-12);
    assert!((fields[2] - (1.0 / 3.0 + 0.6) / 2.0).abs() < 1e-12);
}

#[test]
fn vis_params_writes_12_channels_and_argmax() {
    let dir = tempfile::tempdir().unwrap();
    let geom = Geometry::new(128, 128, 16, 16).unwrap();
    let ckpt = dir.path().join("identity.kpnc");
    identity_checkpoint(&ckpt, geom);
    let spec = {
        let mut s = ToySceneSpec::default_desk(31);
        s.geom = geom;
        s
    };
    let (img, labels) = generate_scene(&spec, SceneKind::Source, 0).unwrap();
    let img_path = dir.path().join("img.png");
    let lbl_path = dir.path().join("lbl.png");
    img.save_png(&img_path).unwrap();
    labels.save_png(&lbl_path).unwrap();
    let out_dir = dir.path().join("vis");
    let out = run(&[
        "vis-params",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--in",
        img_path.to_str().unwrap(),
        "--labels",
        lbl_path.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_exit(&out, 0, "vis-params");
    for c in 0..12 {
        assert!(out_dir.join(format!("param_ch{c:02}.png")).exists());
    }
    assert!(out_dir.join("encoder_argmax.png").exists());
    // Identity checkpoint: constant channels render as mid-gray.
    let ch0 = image::open(out_dir.join("param_ch00.png")).unwrap().to_luma8();
    assert!(ch0.pixels().all(|p| p.0[0] == 128));
    // Min/max are printed for every channel.
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(stdout.lines().filter(|l| l.contains("min")).count(), 12);
}
