//! Acceptance gate for the whole pipeline.
//!
//! Eight checks run in a fixed order inside a single test: metric
//! arithmetic on published confusion counts, finite-difference gradient
//! verification of every differentiable op, brute-force oracles for
//! position-sensitive pooling, the dual AUC computation, box geometry
//! properties, the end-to-end synthetic benchmark with its timing budget,
//! the learning-curve trend, and bit-exact reproducibility of every
//! generated artifact. One PASS/FAIL line per check; run with
//! `cargo test --test acceptance -- --nocapture` to watch progress.

use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use rand::Rng;

use strabscreen_cli::commands::{cmd_eval, cmd_gen_data, cmd_learning_curve, cmd_train};
use strabscreen_cli::config::PipelineConfig;
use strabscreen_core::classifier::{self, ClassifierConfig};
use strabscreen_core::detect::{decode_box, encode_box, nms, ohem_select, Detection};
use strabscreen_core::error::Error;
use strabscreen_core::metrics::{auc, auc_rank, confusion, roc_curve, se_sp_acc, ConfusionCounts, Label};
use strabscreen_core::model_io;
use strabscreen_core::psroi::{psroi_pool, RoIBox, VoteMode};
use strabscreen_core::rng::{seeded, uniform};
use strabscreen_core::synth::import_split;
use strabscreen_core::tensor::{grad_check, Parameter, Tensor};

type CheckResult = Result<String, String>;

macro_rules! req {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err(format!($($arg)+));
        }
    };
}

struct Ctx {
    root: PathBuf,
    cfg: PipelineConfig,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

#[test]
fn acceptance_gate() {
    let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    if root.exists() {
        fs::remove_dir_all(&root).expect("clear scratch dir");
    }
    fs::create_dir_all(&root).expect("create scratch dir");
    let mut ctx = Ctx { root, cfg: PipelineConfig::default() };

    let checks: [(&str, fn(&mut Ctx) -> CheckResult); 8] = [
        ("metric arithmetic from published confusion counts", check_metric_arithmetic),
        ("gradient checks across every differentiable op", check_gradients),
        ("position-sensitive pooling against brute force", check_psroi_oracle),
        ("trapezoidal AUC against the rank statistic", check_auc_dual),
        ("box geometry, suppression and hard-example selection", check_geometry),
        ("end-to-end synthetic benchmark", check_benchmark),
        ("learning curve over growing training sets", check_learning_curve),
        ("bit-identical reruns", check_determinism),
    ];

    let mut failed = Vec::new();
    for (name, check) in checks {
        let start = Instant::now();
        match check(&mut ctx) {
            Ok(detail) => {
                println!("PASS  {name}: {detail} [{:.1}s]", start.elapsed().as_secs_f64());
            }
            Err(detail) => {
                println!("FAIL  {name}: {detail}");
                failed.push(name);
            }
        }
    }
    assert!(failed.is_empty(), "failed acceptance checks: {failed:?}");
}

fn check_metric_arithmetic(_: &mut Ctx) -> CheckResult {
    let counts = ConfusionCounts::new(452, 1685, 121, 18);
    let (se, sp, acc) = se_sp_acc(&counts);
    let (se, sp, acc) = (
        se.ok_or("sensitivity undefined")?,
        sp.ok_or("specificity undefined")?,
        acc.ok_or("accuracy undefined")?,
    );
    req!((acc - 0.9389).abs() < 5e-5, "Acc {acc:.6} is not 0.9389 within 5e-5");
    req!((se - 0.9617).abs() < 5e-5, "Se {se:.6} is not 0.9617 within 5e-5");
    req!((sp - 0.9330).abs() < 5e-5, "Sp {sp:.6} is not 0.9330 within 5e-5");
    // the same numbers from first principles
    req!((acc - (452.0 + 1685.0) / 2276.0).abs() < 1e-15, "Acc disagrees with direct division");
    req!((se - 452.0 / 470.0).abs() < 1e-15, "Se disagrees with direct division");
    req!((sp - 1685.0 / 1806.0).abs() < 1e-15, "Sp disagrees with direct division");
    Ok(format!("Acc {acc:.6}, Se {se:.6}, Sp {sp:.6} from TP 452 TN 1685 FP 121 FN 18"))
}

fn rand_tensor<R: Rng>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| uniform(rng, lo, hi)).collect();
    Tensor::from_vec(shape, data).expect("shape matches data")
}

fn rand_param<R: Rng>(shape: &[usize], rng: &mut R) -> Parameter {
    Parameter::new(rand_tensor(shape, -1.0, 1.0, rng))
}

fn check_gradients(_: &mut Ctx) -> CheckResult {
    let mut rng = seeded(1001);
    let mut worst: (f64, &str) = (0.0, "none");
    let mut record = |name: &'static str, err: Result<f64, Error>| -> Result<(), String> {
        let err = err.map_err(|e| format!("{name}: {e}"))?;
        if err > worst.0 {
            worst = (err, name);
        }
        if err < 1e-4 {
            Ok(())
        } else {
            Err(format!("{name}: relative error {err:.3e} exceeds 1e-4"))
        }
    };

    let target = rand_tensor(&[1, 36], -1.0, 1.0, &mut rng);
    let mut params =
        vec![rand_param(&[2, 5, 6], &mut rng), rand_param(&[3, 2, 3, 3], &mut rng), rand_param(&[3], &mut rng)];
    record(
        "conv2d stride 1",
        grad_check(&mut params, 1e-5, |tape, ids| {
            let c = tape.conv2d(ids[0], ids[1], ids[2], 1)?;
            let f = tape.flatten_row(c)?;
            tape.mse_loss(f, &target)
        }),
    )?;

    let target = rand_tensor(&[1, 18], -1.0, 1.0, &mut rng);
    let mut params =
        vec![rand_param(&[2, 7, 7], &mut rng), rand_param(&[2, 2, 3, 3], &mut rng), rand_param(&[2], &mut rng)];
    record(
        "conv2d stride 2",
        grad_check(&mut params, 1e-5, |tape, ids| {
            let c = tape.conv2d(ids[0], ids[1], ids[2], 2)?;
            let f = tape.flatten_row(c)?;
            tape.mse_loss(f, &target)
        }),
    )?;

    let target = rand_tensor(&[1, 8], -1.0, 1.0, &mut rng);
    let mut params = vec![rand_param(&[2, 5, 5], &mut rng)];
    record(
        "maxpool 2x2",
        grad_check(&mut params, 1e-5, |tape, ids| {
            let p = tape.maxpool2d(ids[0], 2, 2)?;
            let f = tape.flatten_row(p)?;
            tape.mse_loss(f, &target)
        }),
    )?;

    // keep values away from the kink at zero
    let data: Vec<f64> = (0..21)
        .map(|_| if rng.gen_bool(0.5) { uniform(&mut rng, 0.2, 1.2) } else { -uniform(&mut rng, 0.2, 1.2) })
        .collect();
    let target = rand_tensor(&[3, 7], -1.0, 1.0, &mut rng);
    let mut params = vec![Parameter::new(Tensor::from_vec(&[3, 7], data).expect("shape"))];
    record(
        "relu",
        grad_check(&mut params, 1e-5, |tape, ids| {
            let r = tape.relu(ids[0])?;
            tape.mse_loss(r, &target)
        }),
    )?;

    let target = rand_tensor(&[3, 5], -1.0, 1.0, &mut rng);
    let mut params =
        vec![rand_param(&[3, 4], &mut rng), rand_param(&[4, 5], &mut rng), rand_param(&[5], &mut rng)];
    record(
        "linear",
        grad_check(&mut params, 1e-5, |tape, ids| {
            let l = tape.linear(ids[0], ids[1], ids[2])?;
            tape.mse_loss(l, &target)
        }),
    )?;

    let mut params = vec![rand_param(&[4, 3], &mut rng)];
    record(
        "softmax cross-entropy",
        grad_check(&mut params, 1e-5, |tape, ids| tape.softmax_cross_entropy(ids[0], &[0, 2, 1, 1])),
    )?;

    let target = rand_tensor(&[2, 6], -1.0, 1.0, &mut rng);
    let mut params = vec![rand_param(&[2, 6], &mut rng)];
    record(
        "mse",
        grad_check(&mut params, 1e-5, |tape, ids| tape.mse_loss(ids[0], &target)),
    )?;

    let roi = RoIBox::new(3.0, 2.0, 50.0, 43.0).map_err(|e| e.to_string())?;
    let mut params = vec![rand_param(&[18, 6, 7], &mut rng)];
    record(
        "psroi_pool + vote",
        grad_check(&mut params, 1e-5, |tape, ids| {
            let pooled = tape.psroi_pool(ids[0], &roi, 3, 2, 8)?;
            let votes = tape.vote(pooled, VoteMode::Mean)?;
            tape.softmax_cross_entropy(votes, &[1])
        }),
    )?;

    let tiny = ClassifierConfig::tiny();
    let (tiny, mut params) = classifier::build_network(&tiny, 7)
        .map_err(|e| format!("classifier build: {e}"))?
        .into_parts();
    let crops = [rand_tensor(&[3, 8, 8], 0.0, 1.0, &mut rng), rand_tensor(&[3, 8, 8], 0.0, 1.0, &mut rng)];
    let crop_refs: Vec<&Tensor> = crops.iter().collect();
    record(
        "full classifier on 8x8 input",
        grad_check(&mut params, 1e-4, |tape, ids| {
            let mut dropout_rng = seeded(0);
            let logits = classifier::classifier_graph(&tiny, tape, ids, &crop_refs, false, &mut dropout_rng)?;
            tape.softmax_cross_entropy(logits, &[1, 0])
        }),
    )?;

    Ok(format!("worst relative error {:.2e} ({}) across 9 graphs", worst.0, worst.1))
}

/// Per-bin mean recomputed from scratch: project the box corners onto the
/// feature grid by round-to-nearest, clamp, split each axis with the
/// floor/ceil rule, then average each bin's dedicated channel.
fn brute_force_pool(stack: &[f64], hf: usize, wf: usize, roi: &RoIBox) -> Option<Vec<f64>> {
    let cell = |v: f64, limit: usize| ((v / 8.0).round().max(0.0) as usize).min(limit);
    let (x0, x1) = (cell(roi.x0, wf), cell(roi.x1, wf));
    let (y0, y1) = (cell(roi.y0, hf), cell(roi.y1, hf));
    if x1 <= x0 || y1 <= y0 {
        return None;
    }
    let (w, h) = (x1 - x0, y1 - y0);
    let mut out = vec![0.0; 18];
    for by in 0..3 {
        for bx in 0..3 {
            let (ys, ye) = (by * h / 3, ((by + 1) * h).div_ceil(3));
            let (xs, xe) = (bx * w / 3, ((bx + 1) * w).div_ceil(3));
            for c in 0..2 {
                let chan = (by * 3 + bx) * 2 + c;
                let mut cells = Vec::new();
                for y in y0 + ys..y0 + ye {
                    for x in x0 + xs..x0 + xe {
                        cells.push(stack[chan * hf * wf + y * wf + x]);
                    }
                }
                out[chan] = cells.iter().sum::<f64>() / cells.len() as f64;
            }
        }
    }
    Some(out)
}

fn check_psroi_oracle(_: &mut Ctx) -> CheckResult {
    let mut rng = seeded(3003);
    let mut cases = 0;
    let mut worst = 0.0f64;
    while cases < 200 {
        let hf = rng.gen_range(4..12);
        let wf = rng.gen_range(4..12);
        let maps = rand_tensor(&[18, hf, wf], -2.0, 2.0, &mut rng);
        let x0 = uniform(&mut rng, -6.0, wf as f64 * 8.0 - 20.0);
        let y0 = uniform(&mut rng, -6.0, hf as f64 * 8.0 - 20.0);
        let roi = RoIBox::new(
            x0,
            y0,
            x0 + uniform(&mut rng, 14.0, wf as f64 * 8.0),
            y0 + uniform(&mut rng, 14.0, hf as f64 * 8.0),
        )
        .map_err(|e| e.to_string())?;
        let Some(oracle) = brute_force_pool(maps.data(), hf, wf, &roi) else {
            continue;
        };
        let (pooled, _) = psroi_pool(&maps, &roi, 3, 2, 8).map_err(|e| format!("pooling: {e}"))?;
        req!(pooled.len() == 18, "pooled {} values instead of 18", pooled.len());
        for (i, (&got, &want)) in pooled.iter().zip(&oracle).enumerate() {
            let diff = (got - want).abs();
            worst = worst.max(diff);
            req!(diff <= 1e-12, "case {cases} value {i}: {got} vs brute force {want}");
        }
        cases += 1;
    }

    // channel (by*3 + bx)*2 + c must feed exactly bin (by, bx) of class c
    let layout = {
        let mut data = Vec::new();
        for c in 0..18 {
            data.extend(std::iter::repeat(100.0 + 7.0 * c as f64).take(30));
        }
        Tensor::from_vec(&[18, 5, 6], data).expect("shape")
    };
    let full = RoIBox::new(0.0, 0.0, 48.0, 40.0).map_err(|e| e.to_string())?;
    let (pooled, _) = psroi_pool(&layout, &full, 3, 2, 8).map_err(|e| format!("pooling: {e}"))?;
    for (i, &v) in pooled.iter().enumerate() {
        req!(v == 100.0 + 7.0 * i as f64, "bin response {i} read {v}, not its dedicated channel");
    }
    Ok(format!("200 random pooling cases, max deviation {worst:.1e}; 18-channel layout verified"))
}

fn check_auc_dual(_: &mut Ctx) -> CheckResult {
    let mut rng = seeded(4004);
    let mut cases = 0;
    let mut worst = 0.0f64;
    while cases < 1000 {
        let n = rng.gen_range(2..40);
        let quantize = rng.gen_bool(0.5);
        let scores: Vec<f64> = (0..n)
            .map(|_| {
                let s: f64 = rng.gen();
                if quantize {
                    (s * 4.0).round() / 4.0
                } else {
                    s
                }
            })
            .collect();
        let labels: Vec<Label> =
            (0..n).map(|_| if rng.gen_bool(0.5) { Label::Strabismus } else { Label::Normal }).collect();
        if !labels.iter().any(|l| l.is_positive()) || labels.iter().all(|l| l.is_positive()) {
            continue;
        }
        let trapezoid = auc(&roc_curve(&scores, &labels).map_err(|e| e.to_string())?);
        let rank = auc_rank(&scores, &labels).map_err(|e| e.to_string())?;
        let diff = (trapezoid - rank).abs();
        worst = worst.max(diff);
        req!(diff <= 1e-12, "case {cases}: trapezoid {trapezoid} vs rank {rank}");

        // strictly increasing rescoring must not move the curve
        let transformed: Vec<f64> = scores.iter().map(|s| (2.0 * s).exp() + 3.0 * s).collect();
        let t2 = auc(&roc_curve(&transformed, &labels).map_err(|e| e.to_string())?);
        req!(
            (t2 - trapezoid).abs() <= 1e-12,
            "case {cases}: AUC moved from {trapezoid} to {t2} under a monotone transform"
        );
        cases += 1;
    }
    Ok(format!("1000 score sets with ties, max |trapezoid - rank| {worst:.1e}, transform-invariant"))
}

fn check_geometry(_: &mut Ctx) -> CheckResult {
    let mut rng = seeded(5005);

    for case in 0..1000 {
        let rand_box = |rng: &mut _| {
            let x0 = uniform(rng, -20.0, 120.0);
            let y0 = uniform(rng, -20.0, 120.0);
            RoIBox::new(x0, y0, x0 + uniform(rng, 0.5, 90.0), y0 + uniform(rng, 0.5, 90.0))
        };
        let b = rand_box(&mut rng).map_err(|e| e.to_string())?;
        let r = rand_box(&mut rng).map_err(|e| e.to_string())?;
        let delta = encode_box(&b, &r).map_err(|e| format!("encode case {case}: {e}"))?;
        let back = decode_box(&delta, &r);
        for (got, want) in [(back.x0, b.x0), (back.y0, b.y0), (back.x1, b.x1), (back.y1, b.y1)] {
            req!((got - want).abs() <= 1e-9, "round trip case {case}: {got} vs {want}");
        }
    }

    for case in 0..500 {
        let n = rng.gen_range(1..30);
        let dets: Vec<Detection> = (0..n)
            .map(|_| {
                let x0 = uniform(&mut rng, 0.0, 60.0);
                let y0 = uniform(&mut rng, 0.0, 60.0);
                Detection {
                    roi: RoIBox::new(x0, y0, x0 + uniform(&mut rng, 5.0, 40.0), y0 + uniform(&mut rng, 5.0, 40.0))
                        .expect("positive extent"),
                    prob: rng.gen(),
                }
            })
            .collect();
        let thresh = uniform(&mut rng, 0.2, 0.6);
        let kept = nms(&dets, thresh);
        req!(!kept.is_empty(), "suppression case {case} kept nothing");
        for k in &kept {
            req!(dets.contains(k), "suppression case {case} kept a detection not in the input");
        }
        for (i, a) in kept.iter().enumerate() {
            for b in &kept[i + 1..] {
                let iou = a.roi.iou(&b.roi);
                req!(iou <= thresh + 1e-12, "suppression case {case}: kept pair with IoU {iou:.4} > {thresh:.4}");
            }
        }
        for d in &dets {
            if kept.contains(d) {
                continue;
            }
            let blocked = kept.iter().any(|k| k.prob >= d.prob && k.roi.iou(&d.roi) > thresh);
            req!(blocked, "suppression case {case}: dropped a detection nothing overlaps");
        }
    }

    for case in 0..1000 {
        let n = rng.gen_range(0..50);
        let quantize = rng.gen_bool(0.3);
        let losses: Vec<f64> = (0..n)
            .map(|_| {
                let l = uniform(&mut rng, 0.0, 4.0);
                if quantize {
                    (l * 10.0).round() / 10.0
                } else {
                    l
                }
            })
            .collect();
        let b = rng.gen_range(0..12);
        let picked = ohem_select(&losses, b);
        let oracle = {
            let mut order: Vec<usize> = (0..losses.len()).collect();
            order.sort_by(|&i, &j| losses[j].total_cmp(&losses[i]).then(i.cmp(&j)));
            order.truncate(b);
            order.sort_unstable();
            order
        };
        req!(picked == oracle, "selection case {case}: {picked:?} vs full sort {oracle:?}");
    }

    Ok("1000 box round trips, 500 suppression sets, 1000 hard-example selections".into())
}

fn check_benchmark(ctx: &mut Ctx) -> CheckResult {
    let start = Instant::now();
    let data = ctx.path("data");
    let run = ctx.path("run");
    cmd_gen_data(&ctx.cfg, 42, &data).map_err(|f| format!("gen-data: {}", f.message()))?;
    cmd_train(&ctx.cfg, 42, &data, &run).map_err(|f| format!("train: {}", f.message()))?;
    cmd_eval(&run, &data, &run).map_err(|f| format!("eval: {}", f.message()))?;

    let det = model_io::load_detector(&run.join("detector.rfcn")).map_err(|e| e.to_string())?;
    let net = model_io::load_classifier(&run.join("classifier.rfcn")).map_err(|e| e.to_string())?;
    let test = import_split(&data.join("test")).map_err(|e| e.to_string())?;
    let side = net.config().input_side;

    let mut iou_sum = 0.0;
    let mut misses = 0usize;
    let mut scores = Vec::with_capacity(test.len());
    let mut labels = Vec::with_capacity(test.len());
    for sample in &test {
        match det.detect(&sample.image) {
            Ok(d) => {
                iou_sum += d.roi.iou(&sample.eye_box);
                let crop = classifier::resize_crop(&sample.image, &d.roi, side).map_err(|e| e.to_string())?;
                let norm = classifier::normalize_crop(&crop).map_err(|e| e.to_string())?;
                scores.push(classifier::predict(&net, &norm).map_err(|e| e.to_string())?.probability);
            }
            Err(Error::NoDetection) => {
                misses += 1;
                scores.push(0.0);
            }
            Err(e) => return Err(format!("detector failed on a test image: {e}")),
        }
        labels.push(sample.label);
    }
    let mean_iou = iou_sum / test.len() as f64;
    let counts = confusion(&scores, &labels, 0.5).map_err(|e| e.to_string())?;
    let acc = se_sp_acc(&counts).2.ok_or("accuracy undefined")?;
    let auc_value = auc(&roc_curve(&scores, &labels).map_err(|e| e.to_string())?);
    let elapsed = start.elapsed().as_secs_f64();

    // the written report must carry the same numbers (4 decimals)
    let metrics = fs::read_to_string(run.join("metrics.csv")).map_err(|e| e.to_string())?;
    let row = metrics.lines().nth(1).ok_or("metrics.csv has no data row")?;
    let fields: Vec<&str> = row.split(',').collect();
    req!(fields.len() == 8, "metrics row has {} fields", fields.len());
    let csv_acc: f64 = fields[6].parse().map_err(|_| format!("bad Acc field {:?}", fields[6]))?;
    let csv_auc: f64 = fields[7].parse().map_err(|_| format!("bad AUC field {:?}", fields[7]))?;
    req!((csv_acc - acc).abs() < 1e-4, "report Acc {csv_acc} vs recomputed {acc:.6}");
    req!((csv_auc - auc_value).abs() < 1e-4, "report AUC {csv_auc} vs recomputed {auc_value:.6}");

    req!(mean_iou >= 0.7, "mean IoU {mean_iou:.4} below 0.7");
    req!(auc_value >= 0.95, "AUC {auc_value:.4} below 0.95");
    req!(acc >= 0.90, "Acc {acc:.4} below 0.90");
    req!(elapsed < 900.0, "benchmark took {elapsed:.0}s, budget is 900s");
    Ok(format!(
        "mean IoU {mean_iou:.4} ({misses} of {} undetected), AUC {auc_value:.4}, Acc {acc:.4} in {elapsed:.0}s",
        test.len()
    ))
}

fn parse_curve_aucs(path: &PathBuf) -> Result<Vec<(usize, f64)>, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    text.lines()
        .skip(1)
        .map(|line| {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 5 {
                return Err(format!("curve row {line:?} has {} fields", fields.len()));
            }
            let n = fields[0].parse().map_err(|_| format!("bad size {:?}", fields[0]))?;
            let auc_value = fields[4].parse().map_err(|_| format!("bad AUC {:?}", fields[4]))?;
            Ok((n, auc_value))
        })
        .collect()
}

fn check_learning_curve(ctx: &mut Ctx) -> CheckResult {
    let start = Instant::now();
    let out = ctx.path("curve");
    cmd_learning_curve(&ctx.cfg, 42, &[50, 100, 200, 341], &out)
        .map_err(|f| format!("learning-curve: {}", f.message()))?;
    let rows = parse_curve_aucs(&out.join("learning_curve.csv"))?;
    req!(rows.len() == 4, "expected 4 curve rows, got {}", rows.len());

    let mut inversions = Vec::new();
    for pair in rows.windows(2) {
        let drop = pair[0].1 - pair[1].1;
        if drop > 1e-9 {
            inversions.push(drop);
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    req!(
        inversions.len() <= 1 && inversions.iter().all(|&d| d <= 0.02),
        "AUC sequence {:?} has inversions {inversions:?}",
        rows.iter().map(|r| r.1).collect::<Vec<_>>()
    );
    req!(elapsed < 1800.0, "learning curve took {elapsed:.0}s, budget is 1800s");
    let seq: Vec<String> = rows.iter().map(|&(n, a)| format!("{n}:{a:.4}")).collect();
    Ok(format!("AUC by train size {}, {} inversion(s) in {elapsed:.0}s", seq.join(" "), inversions.len()))
}

fn check_determinism(ctx: &mut Ctx) -> CheckResult {
    let data = ctx.path("data2");
    let run = ctx.path("run2");
    let curve = ctx.path("curve2");
    cmd_gen_data(&ctx.cfg, 42, &data).map_err(|f| format!("gen-data rerun: {}", f.message()))?;
    cmd_train(&ctx.cfg, 42, &data, &run).map_err(|f| format!("train rerun: {}", f.message()))?;
    cmd_eval(&run, &data, &run).map_err(|f| format!("eval rerun: {}", f.message()))?;
    cmd_learning_curve(&ctx.cfg, 42, &[50, 100, 200, 341], &curve)
        .map_err(|f| format!("learning-curve rerun: {}", f.message()))?;

    let pairs = [
        ("run/detector.rfcn", "run2/detector.rfcn"),
        ("run/classifier.rfcn", "run2/classifier.rfcn"),
        ("run/detector_loss.csv", "run2/detector_loss.csv"),
        ("run/classifier_loss.csv", "run2/classifier_loss.csv"),
        ("run/metrics.csv", "run2/metrics.csv"),
        ("run/roc_points.csv", "run2/roc_points.csv"),
        ("run/roc.svg", "run2/roc.svg"),
        ("curve/learning_curve.csv", "curve2/learning_curve.csv"),
    ];
    for (a, b) in pairs {
        let first = fs::read(ctx.path(a)).map_err(|e| format!("{a}: {e}"))?;
        let second = fs::read(ctx.path(b)).map_err(|e| format!("{b}: {e}"))?;
        req!(first == second, "{a} differs between reruns ({} vs {} bytes)", first.len(), second.len());
    }
    Ok(format!("{} model and report files byte-identical across reruns", pairs.len()))
}
