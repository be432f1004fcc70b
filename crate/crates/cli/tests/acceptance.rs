//! Acceptance gate. Runs every criterion, prints one PASS/FAIL line each,
//! and exits non-zero if any fails.

mod common;

use std::collections::{HashMap, VecDeque};
use std::f64::consts::PI;
use std::fs;
use std::path::Path;
use std::time::Instant;

use cardioquant::cardiac::{quantify, CardiacReport};
use cardioquant::classical::otsu_threshold;
use cardioquant::geometry::{connected_components, measure_geometry, AxisMethod, Connectivity};
use cardioquant::imaging::{load_masks, load_sequence, subsample_fps};
use cardioquant::metrics::{dice_coefficient, iou};
use cardioquant::neural::{sample_loss, LossKind, Tensor4, UNet, UNetConfig};
use cardioquant::preprocess::{sharpen, PreprocessConfig};
use cardioquant::segment::PrecomputedMasks;
use cardioquant::synth::{analytic_ef, ellipse_mask};
use cardioquant::{BinaryMask, GrayFrame};
use common::{p, run_ok, summary_field, synth_video};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

/// Shared artifacts between criteria.
struct Ctx {
    work: tempfile::TempDir,
    /// Model trained by criterion 2, reused by criterion 3.
    model: Option<std::path::PathBuf>,
}

const TRAIN_PAIRS: &str = "200";
const TRAIN_EPOCHS: &str = "15";
const TRAIN_SEED: &str = "11";

fn c2_training(ctx: &mut Ctx) -> Outcome {
    let data = ctx.work.path().join("trainset");
    let out = ctx.work.path().join("trained");
    run_ok(&["synth", "--dataset", TRAIN_PAIRS, "--seed", TRAIN_SEED, "--out", p(&data)]);
    let start = Instant::now();
    run_ok(&["train", p(&data), "--epochs", TRAIN_EPOCHS, "--loss", "dice", "--seed", TRAIN_SEED, "--out", p(&out)]);
    let secs = start.elapsed().as_secs_f64();
    ctx.model = Some(out.join("model.cqunet"));
    let hist = fs::read_to_string(out.join("history.csv")).unwrap();
    let rows: Vec<Vec<f64>> = hist
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    // Columns: epoch, train_loss, val_loss, val_dice, val_iou, val_pixel_acc.
    let best = rows.iter().max_by(|a, b| a[3].total_cmp(&b[3])).unwrap();
    let pass = best[3] >= 0.90 && best[4] >= 0.82 && best[5] >= 0.97 && rows.len() <= 60 && secs <= 600.0;
    outcome(
        pass,
        format!(
            "best val dice {:.4} (>= 0.90), iou {:.4} (>= 0.82), pixel acc {:.4} (>= 0.97) at epoch {} of {}; {:.0} s (<= 600)",
            best[3], best[4], best[5], best[0], rows.len(), secs
        ),
    )
}

fn ef_of(dir: &Path) -> f64 {
    let csv = fs::read_to_string(dir.join("synth_summary.csv")).unwrap();
    summary_field(&csv, "ef_area_pct")
}

fn c3_ef_recovery(ctx: &Ctx) -> Outcome {
    let vid = ctx.work.path().join("c3_video");
    // Phase π/2 puts frames on the beat extremes so the sampled extremes are
    // the true ones.
    let manifest = synth_video(&vid, &["--fps", "20", "--duration", "3", "--modulation", "0.15", "--phase", &(PI / 2.0).to_string()]);
    let truth = analytic_ef(0.15);
    let gt_out = ctx.work.path().join("c3_gt");
    run_ok(&["quantify", p(&manifest), "--backend", "masks", "--out", p(&gt_out)]);
    let gt = ef_of(&gt_out);
    let Some(model) = &ctx.model else {
        return outcome(false, "no trained model (criterion 2 did not run)".into());
    };
    let un_out = ctx.work.path().join("c3_unet");
    run_ok(&["quantify", p(&manifest), "--backend", "unet", "--model", p(model), "--out", p(&un_out)]);
    let un = ef_of(&un_out);
    let pass = (gt - truth).abs() <= 1.0 && (un - truth).abs() <= 6.0;
    outcome(
        pass,
        format!(
            "analytic {truth:.2}%; ground-truth masks {gt:.2}% (|d| {:.2} <= 1); U-net {un:.2}% (|d| {:.2} <= 6)",
            (gt - truth).abs(),
            (un - truth).abs()
        ),
    )
}

fn c4_fps_sensitivity(ctx: &Ctx) -> Outcome {
    let start = Instant::now();
    // 1.25 Hz with phase π/4: at 5 fps every sample sits 1/8 cycle from the
    // nearest extremum (> 5 % phase), while 60 fps hits them within 1/96 cycle.
    let freq = 1.25;
    let phase = PI / 4.0;
    let vid = ctx.work.path().join("c4_video");
    let manifest = synth_video(
        &vid,
        &["--fps", "60", "--duration", "3", "--beat-freq", &freq.to_string(), "--phase", &phase.to_string(), "--video-id", "fps"],
    );
    let out = ctx.work.path().join("c4_out");
    run_ok(&["fpscheck", p(&manifest), "--backend", "masks", "--fps-rates", "5,10,20,60", "--out", p(&out)]);
    let csv = fs::read_to_string(out.join("fps_fps_ef.csv")).unwrap();
    let efs: Vec<(f64, f64)> = csv
        .lines()
        .skip(1)
        .map(|l| {
            let c: Vec<&str> = l.split(',').collect();
            (c[0].parse().unwrap(), c[4].parse().unwrap())
        })
        .collect();
    // Closest approach of any 5 fps sample to an extremum, in cycles.
    let n5 = (3.0 * 5.0) as usize;
    let min_dist = (0..n5)
        .map(|k| {
            let cyc = (freq * k as f64 / 5.0 + phase / (2.0 * PI)).rem_euclid(1.0);
            [0.25, 0.75].iter().map(|e: &f64| (cyc - e).abs().min(1.0 - (cyc - e).abs())).fold(f64::INFINITY, f64::min)
        })
        .fold(f64::INFINITY, f64::min);
    let truth = analytic_ef(0.15);
    let monotone = efs.windows(2).all(|w| w[0].1 <= w[1].1);
    let under = efs[0].1 < truth;
    let secs = start.elapsed().as_secs_f64();
    let pass = monotone && under && min_dist > 0.05 && secs < 60.0;
    let list: Vec<String> = efs.iter().map(|(r, e)| format!("{r} fps {e:.2}%")).collect();
    outcome(
        pass,
        format!(
            "EF {}; non-decreasing {monotone}; 5 fps nearest extremum {:.3} cycle (> 0.05), EF(5) < {truth:.2} {under}; {secs:.1} s",
            list.join(", "),
            min_dist
        ),
    )
}

fn gt_report(manifest: &Path, fps: f64) -> CardiacReport {
    let seq = load_sequence(manifest).unwrap();
    let masks = load_masks(manifest).unwrap();
    let stride = (seq.fps() / fps).round() as usize;
    let sub = subsample_fps(&seq, fps).unwrap();
    let seg = PrecomputedMasks { masks: masks.into_iter().step_by(stride).collect() };
    quantify(&sub, &seg, &PreprocessConfig::default(), AxisMethod::Moments).unwrap()
}

fn c5_heart_rate(ctx: &Ctx) -> Outcome {
    let vid = ctx.work.path().join("c5_video");
    let manifest = synth_video(&vid, &["--fps", "20", "--duration", "3", "--beat-freq", "2", "--video-id", "hr"]);
    let hr20 = gt_report(&manifest, 20.0).hr;
    let hr5 = gt_report(&manifest, 5.0).hr;
    let ok20 = hr20.is_some_and(|h| (h - 120.0).abs() <= 6.0);
    let ok5 = hr5.is_some_and(|h| (h - 120.0).abs() <= 15.0);
    outcome(ok20 && ok5, format!("20 fps {hr20:.2?} bpm (120 +/- 6); 5 fps {hr5:.2?} bpm (120 +/- 15)"))
}

fn random_frame(rng: &mut ChaCha8Rng, w: usize, h: usize) -> GrayFrame {
    // Mix of uniform noise and a few flat patches so histograms are lumpy.
    let lo = rng.random_range(0..128u8);
    let hi = rng.random_range(lo + 1..=255u8);
    GrayFrame::from_fn(w, h, |_, _| rng.random_range(lo..=hi)).unwrap()
}

/// Textbook Otsu: class 0 is `pixel <= t`; maximize ω0·ω1·(μ0−μ1)², ties to the smallest t.
fn otsu_brute(frame: &GrayFrame) -> u8 {
    let px = frame.pixels();
    let n = px.len() as f64;
    let mut best = (-1.0f64, 0u8);
    for t in 0..=255u8 {
        let (c0, c1): (Vec<f64>, Vec<f64>) = {
            let mut a = Vec::new();
            let mut b = Vec::new();
            for &v in px {
                if v <= t {
                    a.push(v as f64)
                } else {
                    b.push(v as f64)
                }
            }
            (a, b)
        };
        if c0.is_empty() || c1.is_empty() {
            continue;
        }
        let m0 = c0.iter().sum::<f64>() / c0.len() as f64;
        let m1 = c1.iter().sum::<f64>() / c1.len() as f64;
        let s = (c0.len() as f64 / n) * (c1.len() as f64 / n) * (m0 - m1).powi(2);
        // Relative slack so f64 rounding cannot break exact ties.
        if s > best.0 + 1e-12 * best.0.abs() {
            best = (s, t);
        }
    }
    best.1
}

/// Raster-order 8-connected flood fill.
fn flood_labels(mask: &BinaryMask) -> Vec<u32> {
    let (w, h) = mask.dims();
    let mut labels = vec![0u32; w * h];
    let mut next = 0;
    for y in 0..h {
        for x in 0..w {
            if !mask.get(x, y) || labels[y * w + x] != 0 {
                continue;
            }
            next += 1;
            labels[y * w + x] = next;
            let mut q = VecDeque::from([(x, y)]);
            while let Some((cx, cy)) = q.pop_front() {
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (nx, ny) = (cx as i64 + dx, cy as i64 + dy);
                        if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                            continue;
                        }
                        let (nx, ny) = (nx as usize, ny as usize);
                        if mask.get(nx, ny) && labels[ny * w + nx] == 0 {
                            labels[ny * w + nx] = next;
                            q.push_back((nx, ny));
                        }
                    }
                }
            }
        }
    }
    labels
}

/// Same partition regardless of label numbering?
fn same_partition(a: &[u32], b: &[u32]) -> bool {
    let mut ab = HashMap::new();
    let mut ba = HashMap::new();
    a.iter().zip(b).all(|(&x, &y)| *ab.entry(x).or_insert(y) == y && *ba.entry(y).or_insert(x) == x)
}

fn sharpen_direct(frame: &GrayFrame) -> GrayFrame {
    let k = [[0i32, -1, 0], [-1, 5, -1], [0, -1, 0]];
    let (w, h) = frame.dims();
    GrayFrame::from_fn(w, h, |x, y| {
        let mut acc = 0i32;
        for (j, row) in k.iter().enumerate() {
            for (i, &kv) in row.iter().enumerate() {
                let sx = (x as i64 + i as i64 - 1).clamp(0, w as i64 - 1) as usize;
                let sy = (y as i64 + j as i64 - 1).clamp(0, h as i64 - 1) as usize;
                acc += kv * frame.get(sx, sy) as i32;
            }
        }
        acc.clamp(0, 255) as u8
    })
    .unwrap()
}

fn c6_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let otsu_ok = (0..100)
        .filter(|_| {
            let f = random_frame(&mut rng, 32, 32);
            otsu_threshold(&f).map(|(t, _)| t).ok() == Some(otsu_brute(&f))
        })
        .count();
    let cc_ok = (0..100)
        .filter(|_| {
            let (w, h) = (rng.random_range(5..40), rng.random_range(5..40));
            let density = rng.random_range(0.2..0.7);
            let m = BinaryMask::from_fn(w, h, |_, _| rng.random_bool(density));
            same_partition(connected_components(&m, Connectivity::Eight).labels(), &flood_labels(&m))
        })
        .count();
    let sharpen_ok = (0..20)
        .filter(|_| {
            let (w, h) = (rng.random_range(3..50), rng.random_range(3..50));
            let f = random_frame(&mut rng, w, h);
            sharpen(&f).unwrap() == sharpen_direct(&f)
        })
        .count();
    outcome(
        otsu_ok == 100 && cc_ok == 100 && sharpen_ok == 20,
        format!("Otsu {otsu_ok}/100, connected components {cc_ok}/100, sharpen {sharpen_ok}/20 exact"),
    )
}

fn c7_metric_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let mut worst = 0.0f64;
    let mut tested = 0;
    while tested < 1000 {
        let (w, h) = (rng.random_range(1..30), rng.random_range(1..30));
        let (da, db) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
        let a = BinaryMask::from_fn(w, h, |_, _| rng.random_bool(da));
        let b = BinaryMask::from_fn(w, h, |_, _| rng.random_bool(db));
        if a.is_empty() && b.is_empty() {
            continue;
        }
        let d = dice_coefficient(&a, &b).unwrap().value;
        let j = iou(&a, &b).unwrap().value;
        worst = worst.max((j - d / (2.0 - d)).abs());
        tested += 1;
    }
    outcome(worst < 1e-12, format!("{tested} pairs, max |IoU - Dice/(2-Dice)| = {worst:.2e} (< 1e-12)"))
}

fn grad_check(kind: LossKind) -> (f64, usize) {
    let cfg = UNetConfig { depth: 1, base_channels: 2, dropout_p: 0.1, input_size: (8, 8), seed: 808 };
    let mut net = UNet::<f64>::init(cfg).unwrap();
    // Non-zero biases keep activations off ReLU kinks.
    for spec in net.layout().convs() {
        for b in &mut net.params_mut()[spec.b_off..spec.b_off + spec.cout] {
            *b = 0.03;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(809);
    let batch = Tensor4::new([2, 1, 8, 8], (0..128).map(|_| rng.random::<f64>()).collect()).unwrap();
    let truths: Vec<BinaryMask> = (0..2).map(|_| BinaryMask::from_fn(8, 8, |_, _| rng.random_bool(0.4))).collect();
    let seed = 810;
    let loss = |net: &UNet<f64>| {
        let (probs, _) = net.forward(&batch, true, seed).unwrap();
        (0..2).map(|i| sample_loss(probs.sample(i), truths[i].bits(), kind)).sum::<f64>() / 2.0
    };
    let (_, cache) = net.forward(&batch, true, seed).unwrap();
    let grads = net.backward(&cache, &truths, kind, 0.5).unwrap();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for j in 0..net.param_count() {
        let orig = net.params()[j];
        net.params_mut()[j] = orig + h;
        let up = loss(&net);
        net.params_mut()[j] = orig - h;
        let down = loss(&net);
        net.params_mut()[j] = orig;
        let numeric = (up - down) / (2.0 * h);
        let analytic = grads.values[j];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    (worst, net.param_count())
}

fn c8_gradient_check() -> Outcome {
    let start = Instant::now();
    let (bce, n) = grad_check(LossKind::Bce);
    let (dice, _) = grad_check(LossKind::Dice);
    let secs = start.elapsed().as_secs_f64();
    outcome(
        bce < 1e-4 && dice < 1e-4 && secs < 60.0,
        format!("{n} parameters; worst relative error BCE {bce:.2e}, Dice {dice:.2e} (< 1e-4); {secs:.1} s"),
    )
}

fn c9_geometry() -> Outcome {
    let (a, b) = (26.0, 16.0);
    let mut worst = (0.0f64, 0.0f64, 0.0f64);
    for i in 0..5 {
        let theta = i as f64 * PI / 5.0;
        let mask = ellipse_mask(80, 80, (39.5, 40.0), a, b, theta);
        let m = measure_geometry(&mask, AxisMethod::Moments);
        let c = measure_geometry(&mask, AxisMethod::Chord);
        worst.0 = worst.0.max((m.long_axis / (2.0 * a) - 1.0).abs());
        worst.1 = worst.1.max((m.short_axis / (2.0 * b) - 1.0).abs());
        worst.2 = worst.2.max((c.long_axis / (2.0 * a) - 1.0).abs());
    }
    outcome(
        worst.0 <= 0.02 && worst.1 <= 0.02 && worst.2 <= 0.02,
        format!(
            "semi-axes {a}/{b}, 5 orientations; worst error moments long {:.2}%, short {:.2}%, chord long {:.2}% (<= 2%)",
            worst.0 * 100.0,
            worst.1 * 100.0,
            worst.2 * 100.0
        ),
    )
}

fn c10_determinism(ctx: &Ctx) -> Outcome {
    let w = ctx.work.path();
    let manifest = synth_video(&w.join("c10_video"), &["--seed", "1234", "--video-id", "golden"]);
    let mut quantified = Vec::new();
    for run in ["q1", "q2"] {
        let out = w.join(run);
        run_ok(&["quantify", p(&manifest), "--backend", "otsu", "--out", p(&out)]);
        quantified.push((fs::read(out.join("golden_summary.csv")).unwrap(), fs::read(out.join("golden_frames.csv")).unwrap()));
    }
    let quantify_same = quantified[0] == quantified[1];

    let data = w.join("c10_data");
    run_ok(&["synth", "--dataset", "12", "--seed", "5", "--out", p(&data)]);
    let mut trained = Vec::new();
    for run in ["t1", "t2"] {
        let out = w.join(run);
        run_ok(&["train", p(&data), "--epochs", "2", "--seed", "5", "--out", p(&out)]);
        trained.push((fs::read(out.join("model.cqunet")).unwrap(), fs::read(out.join("history.csv")).unwrap()));
    }
    let train_same = trained[0] == trained[1];

    let golden_path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/golden_summary.csv");
    let golden = fs::read(&golden_path).unwrap_or_default();
    let golden_same = golden == quantified[0].0;
    outcome(
        quantify_same && train_same && golden_same,
        format!(
            "quantify CSVs identical {quantify_same}; model + history identical {train_same} ({} model bytes); golden summary match {golden_same}",
            trained[0].0.len()
        ),
    )
}

fn main() {
    let mut ctx = Ctx { work: tempfile::tempdir().unwrap(), model: None };
    let mut results = Vec::new();
    fn record(results: &mut Vec<(u32, &'static str, Outcome)>, n: u32, name: &'static str, o: Outcome) {
        println!("criterion {n:>2} {}: {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, name, o));
    }
    record(&mut results, 2, "synthetic U-net training", c2_training(&mut ctx));
    record(&mut results, 3, "EF recovery", c3_ef_recovery(&ctx));
    record(&mut results, 4, "frame-rate sensitivity", c4_fps_sensitivity(&ctx));
    record(&mut results, 5, "heart rate", c5_heart_rate(&ctx));
    record(&mut results, 6, "oracle equivalences", c6_oracles());
    record(&mut results, 7, "metric identity fuzz", c7_metric_identity());
    record(&mut results, 8, "gradient check", c8_gradient_check());
    record(&mut results, 9, "geometry on rendered ellipses", c9_geometry());
    record(&mut results, 10, "determinism and golden files", c10_determinism(&ctx));
    let substitutes_pass = results.iter().all(|r| r.2.pass);
    let c1 = outcome(
        substitutes_pass,
        "recorded dataset and trained weights unavailable; the synthetic substitute is criteria 2-10 above".into(),
    );
    record(&mut results, 1, "real-data substitution", c1);
    let failed: Vec<u32> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria passed", results.len());
    } else {
        println!("acceptance: FAILED criteria {failed:?}");
        std::process::exit(1);
    }
}
