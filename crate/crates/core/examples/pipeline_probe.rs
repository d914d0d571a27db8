//! Scratch harness for tuning training lengths: times dataset generation,
//! detector training, and classifier training on the preset data, then
//! reports detection IoU and classification AUC on the test split.
//!
//! Usage: pipeline_probe [n_train n_test det_steps cls_iters det_lr_micro]

use std::time::Instant;

use strabscreen_core::classifier::{self, ClassifierConfig, TrainConfig};
use strabscreen_core::detect::{train_detector, DetectorConfig};
use strabscreen_core::metrics::{auc, confusion, roc_curve, se_sp_acc, Label};
use strabscreen_core::synth::{class_counts, gen_dataset, Sample};
use strabscreen_core::tensor::Tensor;

fn main() {
    let args: Vec<usize> = std::env::args().skip(1).map(|a| a.parse().unwrap()).collect();
    let (n_train, n_test) = (
        args.first().copied().unwrap_or(341),
        args.get(1).copied().unwrap_or(228),
    );
    let det_steps = args.get(2).copied().unwrap_or(400);
    let cls_iters = args.get(3).copied().unwrap_or(600);

    let t0 = Instant::now();
    let split = gen_dataset(n_train, n_test, 70.0 / 341.0, 47.0 / 228.0, 42).unwrap();
    println!(
        "gen: {} train {:?} / {} test {:?} in {:.2?}",
        split.train.len(),
        class_counts(&split.train),
        split.test.len(),
        class_counts(&split.test),
        t0.elapsed()
    );

    // detector
    let mut dcfg = DetectorConfig::default();
    dcfg.steps = det_steps;
    if let Some(micro) = args.get(4) {
        dcfg.lr = *micro as f64 * 1e-6;
    }
    println!("detector lr {}", dcfg.lr);
    let images: Vec<(&Tensor, _)> = split
        .train
        .iter()
        .map(|s| (&s.image, s.eye_box.clone()))
        .collect();
    let t1 = Instant::now();
    let (det, hist) = train_detector(&images, &dcfg, 42).unwrap();
    let dt = t1.elapsed();
    println!(
        "detector: {} steps in {:.2?} ({:.0} ms/step), loss {:.4} -> {:.4}",
        hist.len(),
        dt,
        dt.as_secs_f64() * 1000.0 / hist.len() as f64,
        hist.first().copied().unwrap_or(f64::NAN),
        hist.last().copied().unwrap_or(f64::NAN),
    );

    let t2 = Instant::now();
    let mut ious = Vec::new();
    let mut best_props = Vec::new();
    let mut misses = 0usize;
    for s in &split.test {
        match det.detect(&s.image) {
            Ok(d) => ious.push(d.roi.iou(&s.eye_box)),
            Err(_) => {
                misses += 1;
                ious.push(0.0);
            }
        }
        let best = det
            .proposal_boxes(&s.image)
            .unwrap()
            .iter()
            .map(|p| p.roi.iou(&s.eye_box))
            .fold(0.0, f64::max);
        best_props.push(best);
    }
    let mean_iou = ious.iter().sum::<f64>() / ious.len() as f64;
    let min_iou = ious.iter().cloned().fold(f64::INFINITY, f64::min);
    let mean_best = best_props.iter().sum::<f64>() / best_props.len() as f64;
    println!(
        "detect eval: mean IoU {mean_iou:.4} min {min_iou:.4} misses {misses} \
         best-proposal mean {mean_best:.4} in {:.2?}",
        t2.elapsed()
    );

    // classifier on ground-truth crops
    let cfg = ClassifierConfig::default();
    let crops = |samples: &[Sample]| -> Vec<(Tensor, Label)> {
        samples
            .iter()
            .map(|s| {
                let crop = classifier::resize_crop(&s.image, &s.eye_box, cfg.input_side).unwrap();
                (classifier::normalize_crop(&crop).unwrap(), s.label)
            })
            .collect()
    };
    let train_crops = crops(&split.train);
    let test_crops = crops(&split.test);

    let mut tc = TrainConfig::default();
    tc.iterations = cls_iters;
    let net = classifier::build_network(&cfg, 42).unwrap();
    let t3 = Instant::now();
    let (net, chist) = classifier::train_classifier(net, &train_crops, &tc).unwrap();
    let ct = t3.elapsed();
    println!(
        "classifier: {} iters in {:.2?} ({:.0} ms/iter), loss {:.4} -> {:.4}",
        chist.len(),
        ct,
        ct.as_secs_f64() * 1000.0 / chist.len() as f64,
        chist.first().copied().unwrap_or(f64::NAN),
        chist.last().copied().unwrap_or(f64::NAN),
    );

    let t4 = Instant::now();
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (crop, label) in &test_crops {
        scores.push(classifier::predict(&net, crop).unwrap().probability);
        labels.push(*label);
    }
    let curve = roc_curve(&scores, &labels).unwrap();
    let a = auc(&curve);
    let counts = confusion(&scores, &labels, 0.5).unwrap();
    let (se, sp, acc) = se_sp_acc(&counts);
    println!(
        "classify eval: AUC {a:.4} acc {:.4} se {:.4} sp {:.4} in {:.2?}",
        acc.unwrap_or(f64::NAN),
        se.unwrap_or(f64::NAN),
        sp.unwrap_or(f64::NAN),
        t4.elapsed()
    );
}
