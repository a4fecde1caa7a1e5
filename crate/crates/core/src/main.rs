use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};

use kpn_translate::bench::{random_bench_inputs, time_translate};
use kpn_translate::error::{Error, Result};
use kpn_translate::gradcheck;
use kpn_translate::image::{Image, LabelMap};
use kpn_translate::infer::{translate_with_bundle, InferOptions};
use kpn_translate::metrics::ConfusionMatrix;
use kpn_translate::networks::load_checkpoint;
use kpn_translate::params::Geometry;
use kpn_translate::real::Real;
use kpn_translate::toy::{make_eval_set, make_toy_dataset, ToySceneSpec};
use kpn_translate::training::{train, Dataset, EncoderKind, Precision, TrainConfig};
use kpn_translate::translate::TransformConfig;

#[derive(Parser)]
#[command(
    name = "kpnt",
    about = "Unpaired image translation with per-pixel predicted transformation parameters",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Component {
    Affine,
    Blur,
    Noise,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic source/target dataset with known degradation.
    MakeToyData {
        /// Output directory (src/ and tgt/ are created inside).
        #[arg(long)]
        out: PathBuf,
        /// Number of source and target images.
        #[arg(long, default_value_t = 200)]
        count: usize,
        /// Extra held-out scenes written to eval/ with reference outputs.
        #[arg(long, default_value_t = 0)]
        eval_count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Generate targets without any degradation.
        #[arg(long, default_value_t = false)]
        identity: bool,
        #[arg(long, default_value_t = 240)]
        height: usize,
        #[arg(long, default_value_t = 416)]
        width: usize,
        #[arg(long, default_value_t = 32)]
        low_height: usize,
        #[arg(long, default_value_t = 56)]
        low_width: usize,
    },
    /// Train on a source (labeled) and target (unlabeled) directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Translate every image of a directory with a trained checkpoint.
    Translate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Label directory (required for oracle-encoder checkpoints).
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Disable transform components (repeatable).
        #[arg(long, value_enum)]
        disable: Vec<Component>,
        /// Run the engine in f32.
        #[arg(long, default_value_t = false)]
        f32: bool,
        /// Memoize blur kernels over sigma buckets.
        #[arg(long, default_value_t = false)]
        quantized: bool,
    },
    /// Verify analytic gradients against central finite differences.
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Cases per component.
        #[arg(long, default_value_t = 20)]
        cases: usize,
        /// Test hook: corrupt one gradient to exercise the failure path.
        #[arg(long, hide = true, default_value_t = false)]
        corrupt: bool,
    },
    /// Score predicted label maps against ground truth.
    EvalSeg {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        classes: usize,
        #[arg(long)]
        ignore: Option<u8>,
        /// CSV output path.
        #[arg(long, default_value = "seg_scores.csv")]
        out: PathBuf,
    },
    /// Dump the 12 predicted parameter channels as grayscale images.
    VisParams {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Time full-geometry translation of one image.
    Bench {
        #[arg(long, default_value_t = 720)]
        height: usize,
        #[arg(long, default_value_t = 1280)]
        width: usize,
        #[arg(long, default_value_t = 96)]
        low_height: usize,
        #[arg(long, default_value_t = 160)]
        low_width: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<u8> {
    match command {
        Command::MakeToyData {
            out,
            count,
            eval_count,
            seed,
            identity,
            height,
            width,
            low_height,
            low_width,
        } => {
            let geom = Geometry::new(height, width, low_height, low_width)?;
            let mut spec = if identity {
                ToySceneSpec::identity_desk(seed)
            } else {
                ToySceneSpec::default_desk(seed)
            };
            spec.geom = geom;
            make_toy_dataset(&spec, count, &out)?;
            if eval_count > 0 {
                let eval_dir = out.join("eval");
                std::fs::create_dir_all(&eval_dir).map_err(|e| Error::io(&eval_dir, e))?;
                for (i, (img, labels, degraded)) in
                    make_eval_set(&spec, eval_count)?.iter().enumerate()
                {
                    img.save_png(&eval_dir.join(format!("img_{i:05}.png")))?;
                    labels.save_png(&eval_dir.join(format!("lbl_{i:05}.png")))?;
                    degraded.save_png(&eval_dir.join(format!("ref_{i:05}.png")))?;
                }
            }
            println!(
                "wrote {count} source and target scenes under {} (classes: {})",
                out.display(),
                spec.n_classes
            );
            Ok(0)
        }

        Command::Train {
            config,
            source,
            target,
            out,
        } => {
            for (what, dir) in [("source", &source), ("target", &target)] {
                if !dir.is_dir() {
                    return Err(Error::Usage(format!(
                        "{what} directory {} does not exist",
                        dir.display()
                    )));
                }
            }
            let text = std::fs::read_to_string(&config).map_err(|e| Error::io(&config, e))?;
            let cfg = TrainConfig::parse(&text)?;
            let with_labels = cfg.encoder == EncoderKind::Oracle;
            let src = Dataset::load_dir(&source, with_labels, cfg.high_h, cfg.high_w)?;
            let tgt = Dataset::load_dir(&target, false, cfg.high_h, cfg.high_w)?;
            let outcome = match cfg.precision {
                Precision::F64 => train::<f64>(&cfg, &src, &tgt, &out, false)?,
                Precision::F32 => train::<f32>(&cfg, &src, &tgt, &out, false)?,
            };
            println!(
                "finished {} iterations; final checkpoint {}",
                outcome.iterations_run,
                outcome.final_checkpoint.display()
            );
            Ok(0)
        }

        Command::Translate {
            ckpt,
            input,
            out,
            labels,
            disable,
            f32: use_f32,
            quantized,
        } => {
            let opts = InferOptions {
                disable_affine: disable.contains(&Component::Affine),
                disable_blur: disable.contains(&Component::Blur),
                disable_noise: disable.contains(&Component::Noise),
                quantized_step: quantized.then_some(2.5e-4),
            };
            if use_f32 {
                translate_dir::<f32>(&ckpt, &input, &out, labels.as_deref(), &opts)
            } else {
                translate_dir::<f64>(&ckpt, &input, &out, labels.as_deref(), &opts)
            }
        }

        Command::GradCheck { seed, cases, corrupt } => {
            let reports = gradcheck::run_suite(seed, cases, corrupt)?;
            let mut all_ok = true;
            for r in &reports {
                let status = if r.passed() { "PASS" } else { "FAIL" };
                println!(
                    "[{status}] {:<22} max rel err {:.3e} over {} entries ({} cases)",
                    r.name, r.max_rel_err, r.entries_checked, r.cases
                );
                all_ok &= r.passed();
            }
            if all_ok {
                println!("all {} components within 1e-4", reports.len());
                Ok(0)
            } else {
                let failed: Vec<&str> = reports
                    .iter()
                    .filter(|r| !r.passed())
                    .map(|r| r.name.as_str())
                    .collect();
                eprintln!("gradient check failed: {}", failed.join(", "));
                Ok(1)
            }
        }

        Command::EvalSeg {
            pred,
            gt,
            classes,
            ignore,
            out,
        } => {
            let mut names: Vec<String> = std::fs::read_dir(&pred)
                .map_err(|e| Error::io(&pred, e))?
                .filter_map(|e| e.ok())
                .filter_map(|e| e.file_name().to_str().map(String::from))
                .filter(|n| n.ends_with(".png"))
                .collect();
            names.sort();
            if names.is_empty() {
                return Err(Error::Data(format!("no .png files in {}", pred.display())));
            }
            let mut cm = ConfusionMatrix::new(classes);
            for name in &names {
                let p = LabelMap::load_png(&pred.join(name))?;
                let gt_path = gt.join(name);
                if !gt_path.exists() {
                    return Err(Error::Data(format!(
                        "missing ground truth for {name} in {}",
                        gt.display()
                    )));
                }
                let g = LabelMap::load_png(&gt_path)?;
                cm.accumulate(&p, &g, ignore)?;
            }
            let scores = cm.scores()?;
            println!("{}", scores.table());
            std::fs::write(
                &out,
                format!("pixel_acc,class_acc,miou\n{}\n", scores.csv_line()),
            )
            .map_err(|e| Error::io(&out, e))?;
            Ok(0)
        }

        Command::VisParams {
            ckpt,
            input,
            labels,
            out,
        } => vis_params(&ckpt, &input, labels.as_deref(), &out),

        Command::Bench {
            height,
            width,
            low_height,
            low_width,
            seed,
        } => {
            let geom = Geometry::new(height, width, low_height, low_width)?;
            println!(
                "translating one {height}x{width} image ({} patches, 25x25 kernels) on {} threads",
                geom.patch_count(),
                rayon::current_num_threads()
            );
            let mut hard_ok = true;
            {
                let (img, pm, noise) = random_bench_inputs::<f32>(geom, seed)?;
                let t = time_translate(&img, &pm, &noise, &TransformConfig::default(), geom)?;
                println!("f32 exact     : {:8.3} s", t.as_secs_f64());
                hard_ok &= t.as_secs_f64() <= 10.0;
                let t = time_translate(&img, &pm, &noise, &TransformConfig::quantized(), geom)?;
                println!("f32 quantized : {:8.3} s", t.as_secs_f64());
            }
            {
                let (img, pm, noise) = random_bench_inputs::<f64>(geom, seed)?;
                let t = time_translate(&img, &pm, &noise, &TransformConfig::default(), geom)?;
                println!("f64 exact     : {:8.3} s", t.as_secs_f64());
                let t = time_translate(&img, &pm, &noise, &TransformConfig::quantized(), geom)?;
                println!("f64 quantized : {:8.3} s", t.as_secs_f64());
            }
            println!("soft target 2.0 s, hard limit 10.0 s, reference point 0.52 s");
            Ok(if hard_ok { 0 } else { 1 })
        }
    }
}

fn find_label_for(labels_dir: &Path, name: &str) -> Option<PathBuf> {
    // The img_/lbl_ sibling convention wins so that --labels may point at
    // the dataset directory itself.
    if let Some(stripped) = name.strip_prefix("img_") {
        let alt = labels_dir.join(format!("lbl_{stripped}"));
        if alt.exists() {
            return Some(alt);
        }
    }
    let direct = labels_dir.join(name);
    direct.exists().then_some(direct)
}

fn translate_dir<F: Real>(
    ckpt: &Path,
    input: &Path,
    out: &Path,
    labels_dir: Option<&Path>,
    opts: &InferOptions,
) -> Result<u8> {
    let bundle = load_checkpoint::<F>(ckpt)?;
    let mut names: Vec<String> = std::fs::read_dir(input)
        .map_err(|e| Error::io(input, e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str().map(String::from))
        .filter(|n| n.ends_with(".png") && !n.starts_with("lbl_"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::Data(format!("no .png images in {}", input.display())));
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for name in &names {
        let img = Image::<F>::load_png(&input.join(name))?;
        let labels = match labels_dir {
            Some(dir) => match find_label_for(dir, name) {
                Some(path) => Some(LabelMap::load_png(&path)?),
                None => {
                    return Err(Error::Data(format!(
                        "no label map for {name} in {}",
                        dir.display()
                    )));
                }
            },
            None => None,
        };
        let start = Instant::now();
        let translated = translate_with_bundle(&bundle, &img, labels.as_ref(), opts)?;
        let secs = start.elapsed().as_secs_f64();
        translated.save_png(&out.join(name))?;
        println!("{name}: {secs:.3} s");
    }
    Ok(0)
}

fn vis_params(ckpt: &Path, input: &Path, labels: Option<&Path>, out: &Path) -> Result<u8> {
    let bundle = load_checkpoint::<f64>(ckpt)?;
    let img = Image::<f64>::load_png(input)?;
    let labels = match labels {
        Some(p) => Some(LabelMap::load_png(p)?),
        None => None,
    };
    let pm = kpn_translate::infer::predict_param_map(&bundle, &img, labels.as_ref())?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let (h, w) = (pm.h, pm.w);
    for c in 0..kpn_translate::params::PARAM_CHANNELS {
        let plane = pm.plane(c);
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in plane {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let mut buf = image::GrayImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let v = plane[y * w + x];
                // A constant channel renders as mid-gray.
                let norm = if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
                buf.put_pixel(x as u32, y as u32, image::Luma([(norm * 255.0).round() as u8]));
            }
        }
        let path = out.join(format!("param_ch{c:02}.png"));
        buf.save(&path).map_err(|e| Error::Image {
            path: path.clone(),
            message: e.to_string(),
        })?;
        println!("channel {c:2}: min {lo:.6} max {hi:.6}");
    }

    // Encoder argmax as a color-indexed map.
    let geom = bundle.meta.geom;
    let low_img = img.resize_bilinear(geom.low_h, geom.low_w);
    let feats = bundle
        .encoder
        .features(Some(&low_img), labels.as_ref(), geom.low_h, geom.low_w)?;
    let palette: [[u8; 3]; 8] = [
        [0, 0, 0],
        [220, 60, 60],
        [60, 200, 60],
        [70, 90, 230],
        [230, 200, 60],
        [60, 200, 220],
        [220, 60, 220],
        [160, 160, 160],
    ];
    let plane = geom.low_h * geom.low_w;
    let mut buf = image::RgbImage::new(geom.low_w as u32, geom.low_h as u32);
    for p in 0..plane {
        let mut best = 0usize;
        let mut bestv = feats.data[p];
        for ch in 1..feats.shape[0] {
            if feats.data[ch * plane + p] > bestv {
                bestv = feats.data[ch * plane + p];
                best = ch;
            }
        }
        let color = palette[best % palette.len()];
        buf.put_pixel(
            (p % geom.low_w) as u32,
            (p / geom.low_w) as u32,
            image::Rgb(color),
        );
    }
    let path = out.join("encoder_argmax.png");
    buf.save(&path).map_err(|e| Error::Image {
        path: path.clone(),
        message: e.to_string(),
    })?;
    println!(
        "wrote 12 channel maps and encoder_argmax.png to {}",
        out.display()
    );
    Ok(0)
}
