//! Scratch harness: loads a saved detector, regenerates the preset
//! dataset, and compares classifier training recipes through the full
//! detect-then-classify pipeline on the test split.
//!
//! Usage: variant_probe <detector.rfcn>

use std::time::Instant;

use strabscreen_core::classifier::{self, ClassifierConfig, TrainConfig};
use strabscreen_core::error::Error;
use strabscreen_core::metrics::{auc, confusion, roc_curve, se_sp_acc, Label};
use strabscreen_core::model_io;
use strabscreen_core::rng::derive_seed;
use strabscreen_core::synth::gen_dataset;
use strabscreen_core::tensor::Tensor;

fn main() {
    let path = std::env::args().nth(1).expect("usage: variant_probe <detector.rfcn>");
    let det = model_io::load_detector(path.as_ref()).unwrap();
    let split = gen_dataset(341, 228, 70.0 / 341.0, 47.0 / 228.0, 42).unwrap();
    let cfg = ClassifierConfig::default();

    // detector pass over the test split: IoU plus the crop each variant scores
    let t0 = Instant::now();
    let mut test_crops: Vec<(f64, Option<Tensor>, Label)> = Vec::new();
    let mut misses = 0usize;
    for s in &split.test {
        match det.detect(&s.image) {
            Ok(d) => {
                let crop = classifier::resize_crop(&s.image, &d.roi, cfg.input_side).unwrap();
                let norm = classifier::normalize_crop(&crop).unwrap();
                test_crops.push((d.roi.iou(&s.eye_box), Some(norm), s.label));
            }
            Err(Error::NoDetection) => {
                misses += 1;
                test_crops.push((0.0, None, s.label));
            }
            Err(e) => panic!("detect: {e}"),
        }
    }
    let mean_iou = test_crops.iter().map(|(i, _, _)| i).sum::<f64>() / test_crops.len() as f64;
    let low = test_crops.iter().filter(|(i, _, _)| *i < 0.5).count();
    println!(
        "test detect: mean IoU {mean_iou:.4}, {misses} misses, {low} below 0.5, in {:.1?}",
        t0.elapsed()
    );

    // training crop sets
    let t1 = Instant::now();
    let mut matched: Vec<(Tensor, Label)> = Vec::new();
    let mut swapped = 0usize;
    for s in &split.train {
        let roi = match det.detect(&s.image) {
            Ok(d) if d.roi.iou(&s.eye_box) >= 0.5 => {
                swapped += 1;
                d.roi
            }
            Ok(_) | Err(Error::NoDetection) => s.eye_box,
            Err(e) => panic!("detect: {e}"),
        };
        let crop = classifier::resize_crop(&s.image, &roi, cfg.input_side).unwrap();
        matched.push((classifier::normalize_crop(&crop).unwrap(), s.label));
    }
    let gt: Vec<(Tensor, Label)> = split
        .train
        .iter()
        .map(|s| {
            let crop = classifier::resize_crop(&s.image, &s.eye_box, cfg.input_side).unwrap();
            (classifier::normalize_crop(&crop).unwrap(), s.label)
        })
        .collect();
    let mut both = matched.clone();
    both.extend(gt.iter().cloned());
    println!(
        "train crops: {}/{} from detector boxes, in {:.1?}",
        swapped,
        matched.len(),
        t1.elapsed()
    );

    let variants: [(&str, &[(Tensor, Label)], usize); 4] = [
        ("matched-300", &matched, 300),
        ("matched-600", &matched, 600),
        ("matched+gt-300", &both, 300),
        ("matched+gt-600", &both, 600),
    ];
    for (name, crops, iters) in variants {
        let t = Instant::now();
        let net = classifier::build_network(&cfg, derive_seed(42, 1)).unwrap();
        let mut tc = TrainConfig::default();
        tc.iterations = iters;
        tc.seed = derive_seed(42, 2);
        let (net, hist) = classifier::train_classifier(net, crops, &tc).unwrap();

        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for (_, crop, label) in &test_crops {
            let p = match crop {
                Some(c) => classifier::predict(&net, c).unwrap().probability,
                None => 0.0,
            };
            scores.push(p);
            labels.push(*label);
        }
        let counts = confusion(&scores, &labels, 0.5).unwrap();
        let (se, sp, acc) = se_sp_acc(&counts);
        let a = auc(&roc_curve(&scores, &labels).unwrap());
        println!(
            "{name}: tp {} tn {} fp {} fn {} se {:.4} sp {:.4} acc {:.4} auc {a:.4} \
             (loss {:.4}, {:.1?})",
            counts.tp,
            counts.tn,
            counts.fp,
            counts.fn_,
            se.unwrap_or(f64::NAN),
            sp.unwrap_or(f64::NAN),
            acc.unwrap_or(f64::NAN),
            hist.last().copied().unwrap_or(f64::NAN),
            t.elapsed()
        );
    }
}
