// Scratch pilot for training-dynamics tuning. Run with:
//   cargo test --release --test pilot -- --ignored --nocapture

use kpn_translate::infer::{translate_with_bundle, InferOptions};
use kpn_translate::networks::load_checkpoint;
use kpn_translate::toy::{make_eval_set, make_toy_dataset, masked_mse, ToySceneSpec};
use kpn_translate::training::{train, Dataset, Precision, TrainConfig};

#[test]
#[ignore]
fn pilot_toy_recovery() {
    let dir = tempfile::tempdir().unwrap();
    let spec = ToySceneSpec::default_desk(42);
    let n_data = 64;
    let iters: u64 = std::env::var("PILOT_ITERS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(300);
    make_toy_dataset(&spec, n_data, dir.path()).unwrap();
    let src = Dataset::load_dir(&dir.path().join("src"), true, 240, 416).unwrap();
    let tgt = Dataset::load_dir(&dir.path().join("tgt"), false, 240, 416).unwrap();

    let per_loc = std::env::var("PILOT_PERLOC").is_ok();
    let cfg = TrainConfig {
        iterations: iters,
        seed: 7,
        noise_seed: Some(spec.noise_seed),
        checkpoint_every: 0,
        precision: Precision::F32,
        per_location_loss: per_loc,
        ..TrainConfig::desk()
    };
    let t0 = std::time::Instant::now();
    let outcome = train::<f32>(&cfg, &src, &tgt, &dir.path().join("run"), false).unwrap();
    eprintln!("trained {iters} iters in {:.1}s", t0.elapsed().as_secs_f64());

    let bundle = load_checkpoint::<f64>(&outcome.final_checkpoint).unwrap();
    let eval = make_eval_set(&spec, 8).unwrap();
    let mut base = 0.0;
    let mut fit = 0.0;
    let mut per_class_base = [0.0f64; 4];
    let mut per_class_fit = [0.0f64; 4];
    for (img, labels, reference) in &eval {
        let translated =
            translate_with_bundle(&bundle, img, Some(labels), &InferOptions::default()).unwrap();
        base += masked_mse(img, reference, None);
        fit += masked_mse(&translated, reference, None);
        for c in 0..4 {
            per_class_base[c] += masked_mse(img, reference, Some((labels, c as u8)));
            per_class_fit[c] += masked_mse(&translated, reference, Some((labels, c as u8)));
        }
    }
    eprintln!(
        "overall MSE: baseline {:.6} -> {:.6} ({:.1}% of baseline)",
        base / 8.0,
        fit / 8.0,
        100.0 * fit / base
    );
    for c in 0..4 {
        eprintln!(
            "class {c}: baseline {:.6} -> {:.6}",
            per_class_base[c] / 8.0,
            per_class_fit[c] / 8.0
        );
    }
}
