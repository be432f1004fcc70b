use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use cardioquant::cardiac::{area_series_csv, quantify, CardiacReport};
use cardioquant::imaging::{
    expand_pattern, fps_stride, load_masks, load_sequence, read_pgm_file, save_sequence, subsample_fps,
    write_pgm_file, Manifest,
};
use cardioquant::metrics::{dice_coefficient, iou, pixel_accuracy};
use cardioquant::neural::{save_model, train_with, LossKind, UNet};
use cardioquant::preprocess::apply_pipeline;
use cardioquant::segment::{PrecomputedMasks, Segmenter};
use cardioquant::synth::{generate, make_training_set};
use cardioquant::{BinaryMask, GrayFrame, VideoSequence};
use rayon::prelude::*;

use crate::config::{build_backend, Backend, RunConfig};
use crate::exit::{code_for, Failure, EXIT_CONFIG, EXIT_FAILED, EXIT_IO};
use crate::output::write_atomic;

fn write_out(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    write_atomic(path, bytes).map_err(Failure::io)
}

#[derive(Debug, Default, Clone)]
pub struct SynthArgs {
    pub dataset: Option<usize>,
    pub fps: Option<f64>,
    pub duration: Option<f64>,
    pub phase: Option<f64>,
    pub modulation: Option<f64>,
    pub beat_freq: Option<f64>,
    pub video_id: Option<String>,
}

pub fn synth(mut cfg: RunConfig, args: &SynthArgs) -> Result<(), Failure> {
    let out = cfg.output_dir();
    if let Some(n) = args.dataset {
        let pairs = make_training_set(&cfg.training_ranges, n, cfg.synth.seed).map_err(Failure::config)?;
        for (sub, pick) in [("frames", 0), ("masks", 1)] {
            let dir = out.join(sub);
            fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display())).map_err(Failure::io)?;
            for (i, (frame, mask)) in pairs.iter().enumerate() {
                let img = if pick == 0 { frame.clone() } else { mask.to_frame() };
                write_pgm_file(&dir.join(format!("{i:04}.pgm")), &img)?;
            }
        }
        println!("wrote {n} frame/mask pairs to {}", out.display());
        return Ok(());
    }
    let s = &mut cfg.synth;
    s.fps = args.fps.unwrap_or(s.fps);
    s.duration = args.duration.unwrap_or(s.duration);
    s.phase = args.phase.unwrap_or(s.phase);
    s.modulation = args.modulation.unwrap_or(s.modulation);
    s.beat_freq = args.beat_freq.unwrap_or(s.beat_freq);
    if let Some(id) = &args.video_id {
        s.video_id = id.clone();
    }
    let (seq, masks, truth) = generate(&cfg.synth).map_err(Failure::config)?;
    let manifest = save_sequence(&seq, Some(&masks), &out)?;
    let json = serde_json::to_string_pretty(&truth).expect("truth serializes") + "\n";
    write_out(&out.join("truth.json"), json.as_bytes())?;
    println!("{} ({} frames, analytic EF {:.4}%)", manifest.display(), seq.len(), truth.ef_pct);
    Ok(())
}

/// Pairs `frames/NAME.pgm` with `masks/NAME.pgm`, sorted by name.
pub fn load_dataset(dir: &Path) -> Result<Vec<(GrayFrame, BinaryMask)>, Failure> {
    let names = pgm_names(&dir.join("frames"))?;
    let mask_names = pgm_names(&dir.join("masks"))?;
    if names != mask_names {
        let missing = names
            .iter()
            .find(|n| !mask_names.contains(n))
            .or_else(|| mask_names.iter().find(|n| !names.contains(n)));
        return Err(Failure::msg(
            EXIT_IO,
            format!("frames/ and masks/ in {} differ (first unmatched: {})", dir.display(), missing.map_or("?", |s| s)),
        ));
    }
    if names.is_empty() {
        return Err(Failure::msg(EXIT_IO, format!("no .pgm frames under {}", dir.join("frames").display())));
    }
    names
        .par_iter()
        .map(|n| {
            let frame = read_pgm_file(&dir.join("frames").join(n))?;
            let mask = BinaryMask::from_frame(&read_pgm_file(&dir.join("masks").join(n))?);
            if mask.dims() != frame.dims() {
                return Err(cardioquant::Error::DimensionMismatch { expected: frame.dims(), actual: mask.dims() });
            }
            Ok((frame, mask))
        })
        .collect::<cardioquant::Result<Vec<_>>>()
        .map_err(|e| Failure::new(EXIT_IO, e))
}

fn pgm_names(dir: &Path) -> Result<Vec<String>, Failure> {
    let entries = fs::read_dir(dir).with_context(|| format!("listing {}", dir.display())).map_err(Failure::io)?;
    let mut names = Vec::new();
    for e in entries {
        let e = e.map_err(Failure::io)?;
        let name = e.file_name().to_string_lossy().into_owned();
        if name.ends_with(".pgm") {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

pub struct TrainArgs {
    pub dataset_dir: PathBuf,
    pub epochs: Option<usize>,
    pub loss: Option<LossKind>,
}

pub fn train(mut cfg: RunConfig, args: &TrainArgs) -> Result<(), Failure> {
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    if let Some(l) = args.loss {
        cfg.train.loss = l;
    }
    cfg.train.validate().map_err(Failure::config)?;
    let data = load_dataset(&args.dataset_dir)?;
    let (w, h) = data[0].0.dims();
    let mut unet_cfg = cfg.unet.clone();
    unet_cfg.input_size = (h, w);
    let model = UNet::<f32>::init(unet_cfg).map_err(Failure::config)?;
    eprintln!("training on {} pairs of {w}x{h}, {} parameters", data.len(), model.param_count());
    let (best, history) = train_with(model, &data, &cfg.train, |r| {
        eprintln!(
            "epoch {:>3}  train_loss {:.4}  val_loss {:.4}  val_dice {:.4}  val_iou {:.4}  val_pixel_acc {:.4}",
            r.epoch, r.train_loss, r.val_loss, r.val_dice, r.val_iou, r.val_pixel_acc
        )
    })?;
    let out = cfg.output_dir();
    let model_path = cfg.model_path.clone().unwrap_or_else(|| out.join("model.cqunet"));
    write_out(&model_path, &save_model(&best))?;
    write_out(&out.join("history.csv"), history.to_csv().as_bytes())?;
    let b = history.best_record();
    println!(
        "best epoch {}: val_dice={:.6} val_iou={:.6} val_pixel_acc={:.6} (n_train={}, n_val={})",
        b.epoch, b.val_dice, b.val_iou, b.val_pixel_acc, history.n_train, history.n_val
    );
    println!("model written to {}", model_path.display());
    Ok(())
}

/// Runs `f` on every manifest; failures are reported and skipped. Exit code
/// policy: any success counts as success.
fn run_batch<T: Send>(
    manifests: &[PathBuf],
    f: impl Fn(&Path) -> cardioquant::Result<T> + Sync + Send,
) -> Result<Vec<T>, Failure> {
    if manifests.is_empty() {
        return Err(Failure::msg(EXIT_CONFIG, "no manifests given"));
    }
    let results: Vec<cardioquant::Result<T>> = manifests.par_iter().map(|m| f(m)).collect();
    let mut ok = Vec::new();
    let mut codes = Vec::new();
    for (path, r) in manifests.iter().zip(results) {
        match r {
            Ok(v) => ok.push(v),
            Err(e) => {
                eprintln!("warning: {}: {e}", path.display());
                codes.push(code_for(&e));
            }
        }
    }
    if ok.is_empty() {
        let code = if codes.iter().all(|&c| c == EXIT_IO) { EXIT_IO } else { EXIT_FAILED };
        return Err(Failure::msg(code, format!("all {} videos failed", manifests.len())));
    }
    if !codes.is_empty() {
        eprintln!("warning: {} of {} videos failed", codes.len(), manifests.len());
    }
    Ok(ok)
}

fn segmenter_for<'a>(backend: &'a Backend, manifest: &Path, stride: usize) -> cardioquant::Result<Box<dyn Segmenter + 'a>> {
    Ok(match backend {
        Backend::Ready(s) => Box::new(Borrowed(s.as_ref())),
        Backend::Masks => {
            let masks = load_masks(manifest)?.into_iter().step_by(stride).collect();
            Box::new(PrecomputedMasks { masks })
        }
    })
}

struct Borrowed<'a>(&'a dyn Segmenter);

impl Segmenter for Borrowed<'_> {
    fn segment(&self, seq: &VideoSequence) -> cardioquant::Result<Vec<BinaryMask>> {
        self.0.segment(seq)
    }
}

fn prepared(cfg: &RunConfig) -> Result<Backend, Failure> {
    cfg.validate()?;
    build_backend(cfg)
}

pub fn segment(cfg: RunConfig, manifests: &[PathBuf]) -> Result<(), Failure> {
    let backend = prepared(&cfg)?;
    let out = cfg.output_dir();
    let written = run_batch(manifests, |m| {
        let seq = load_sequence(m)?;
        let processed = seq.map_frames(|f| apply_pipeline(f, &cfg.preprocess))?;
        let masks = segmenter_for(&backend, m, 1)?.segment(&processed)?;
        save_sequence(&processed, Some(&masks), &out.join(seq.video_id()))
    })?;
    for p in written {
        println!("{}", p.display());
    }
    Ok(())
}

pub fn quantify_videos(cfg: RunConfig, manifests: &[PathBuf]) -> Result<(), Failure> {
    let backend = prepared(&cfg)?;
    let out = cfg.output_dir();
    let reports = run_batch(manifests, |m| {
        let seq = load_sequence(m)?;
        let report = quantify(&seq, segmenter_for(&backend, m, 1)?.as_ref(), &cfg.preprocess, cfg.geometry_method)?;
        write_report(&report, &out)?;
        Ok(report)
    })?;
    for r in reports {
        println!(
            "{}: EF {:.2}% (ED frame {}, ES frame {}), FS {:.4}, HR {}",
            r.video_id,
            r.ef_area,
            r.ed_frame,
            r.es_frame,
            r.fs_moments,
            r.hr.map_or("n/a".to_string(), |h| format!("{h:.1} bpm"))
        );
    }
    Ok(())
}

fn write_report(r: &CardiacReport, out: &Path) -> cardioquant::Result<()> {
    let emit = |name: String, body: String| {
        let path = out.join(name);
        write_atomic(&path, body.as_bytes())
            .map_err(|e| cardioquant::Error::Io { path, source: std::io::Error::other(format!("{e:#}")) })
    };
    emit(format!("{}_frames.csv", r.video_id), r.frames_csv())?;
    emit(format!("{}_summary.csv", r.video_id), r.summary_csv())
}

fn rate_label(rate: f64) -> String {
    if rate.fract() == 0.0 {
        format!("{}", rate as u64)
    } else {
        format!("{rate}")
    }
}

pub fn fpscheck(cfg: RunConfig, manifest: &Path) -> Result<(), Failure> {
    let backend = prepared(&cfg)?;
    if cfg.fps_rates.is_empty() {
        return Err(Failure::msg(EXIT_CONFIG, "fpscheck needs --fps-rates (e.g. 5,10,20)"));
    }
    let seq = load_sequence(manifest)?;
    let strides = cfg
        .fps_rates
        .iter()
        .map(|&r| fps_stride(seq.fps(), r))
        .collect::<cardioquant::Result<Vec<_>>>()
        .map_err(Failure::config)?;
    let out = cfg.output_dir();
    let mut summary = String::from("fps,n_frames,ed_frame,es_frame,ef_area_pct\n");
    for (&rate, &stride) in cfg.fps_rates.iter().zip(&strides) {
        let sub = subsample_fps(&seq, rate)?;
        let seg = segmenter_for(&backend, manifest, stride)?;
        let report = quantify(&sub, seg.as_ref(), &cfg.preprocess, cfg.geometry_method)?;
        let label = rate_label(rate);
        write_out(
            &out.join(format!("{}_area_{label}fps.csv", seq.video_id())),
            area_series_csv(&report.series).as_bytes(),
        )?;
        let _ = writeln!(
            summary,
            "{label},{},{},{},{:.6}",
            sub.len(),
            report.ed_frame,
            report.es_frame,
            report.ef_area
        );
        println!("{} fps: EF {:.4}% over {} frames", label, report.ef_area, sub.len());
    }
    write_out(&out.join(format!("{}_fps_ef.csv", seq.video_id())), summary.as_bytes())
}

/// Masks from a manifest (its `mask_pattern`), a directory holding such a
/// manifest, or a directory of PGM files. Returned sorted by name.
fn load_mask_set(path: &Path) -> Result<Vec<(String, BinaryMask)>, Failure> {
    let manifest_path = if path.is_dir() { path.join("manifest.json") } else { path.to_path_buf() };
    if manifest_path.is_file() {
        let manifest = Manifest::read(&manifest_path)?;
        if let Some(pattern) = &manifest.mask_pattern {
            let masks = load_masks(&manifest_path)?;
            let mut named = masks
                .into_iter()
                .enumerate()
                .map(|(i, m)| Ok((expand_pattern(pattern, i)?, m)))
                .collect::<cardioquant::Result<Vec<_>>>()?;
            named.sort_by(|a, b| a.0.cmp(&b.0));
            return Ok(named);
        }
        if !path.is_dir() {
            return Err(Failure::msg(EXIT_IO, format!("{} has no mask_pattern", path.display())));
        }
    }
    let names = pgm_names(path)?;
    names
        .into_iter()
        .map(|n| {
            let m = BinaryMask::from_frame(&read_pgm_file(&path.join(&n))?);
            Ok((n, m))
        })
        .collect::<cardioquant::Result<Vec<_>>>()
        .map_err(Failure::from)
}

pub fn eval(cfg: RunConfig, pred: &Path, truth: &Path) -> Result<(), Failure> {
    let pred = load_mask_set(pred)?;
    let truth = load_mask_set(truth)?;
    let pred_names: Vec<&str> = pred.iter().map(|p| p.0.as_str()).collect();
    let truth_names: Vec<&str> = truth.iter().map(|p| p.0.as_str()).collect();
    if pred_names != truth_names || pred.is_empty() {
        return Err(Failure::msg(
            EXIT_IO,
            format!("prediction and truth sets differ ({} vs {} masks, or names differ)", pred.len(), truth.len()),
        ));
    }
    let mut csv = String::from("name,pixel_accuracy,dice,iou\n");
    let (mut sa, mut sd, mut si) = (0.0, 0.0, 0.0);
    for ((name, p), (_, t)) in pred.iter().zip(&truth) {
        let acc = pixel_accuracy(t, p)?;
        let d = dice_coefficient(t, p)?.value;
        let j = iou(t, p)?.value;
        sa += acc;
        sd += d;
        si += j;
        let _ = writeln!(csv, "{name},{acc:.6},{d:.6},{j:.6}");
    }
    let n = pred.len() as f64;
    let mean = format!("mean,{:.6},{:.6},{:.6}", sa / n, sd / n, si / n);
    csv.push_str(&mean);
    csv.push('\n');
    write_out(&cfg.output_dir().join("metrics.csv"), csv.as_bytes())?;
    println!("{} masks: pixel_accuracy={:.6} dice={:.6} iou={:.6}", pred.len(), sa / n, sd / n, si / n);
    Ok(())
}
