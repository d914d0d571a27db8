//! Prints proposal-level details for a few test images so detection
//! failures can be traced to the proposal stage or the scoring head.

use strabscreen_core::detect::{train_detector, DetectorConfig};
use strabscreen_core::synth::gen_dataset;
use strabscreen_core::tensor::Tensor;

fn main() {
    let steps: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(100);
    let split = gen_dataset(100, 10, 0.2, 0.2, 42).unwrap();
    let mut dcfg = DetectorConfig::default();
    dcfg.steps = steps;
    let images: Vec<(&Tensor, _)> =
        split.train.iter().map(|s| (&s.image, s.eye_box.clone())).collect();
    let (det, hist) = train_detector(&images, &dcfg, 42).unwrap();
    println!("trained {} steps, loss {:.3} -> {:.3}", hist.len(), hist[0], hist[hist.len() - 1]);

    for s in split.test.iter().take(4) {
        let shape = s.image.shape();
        println!(
            "image {}x{} gt=({:.1},{:.1},{:.1},{:.1})",
            shape[2], shape[1], s.eye_box.x0, s.eye_box.y0, s.eye_box.x1, s.eye_box.y1
        );
        let props = det.proposal_boxes(&s.image).unwrap();
        for (i, d) in props.iter().enumerate().take(8) {
            println!(
                "  prop {i}: rpn_prob {:.4} box ({:.1},{:.1},{:.1},{:.1}) iou {:.3}",
                d.prob,
                d.roi.x0,
                d.roi.y0,
                d.roi.x1,
                d.roi.y1,
                d.roi.iou(&s.eye_box)
            );
        }
        match det.detect(&s.image) {
            Ok(d) => println!(
                "  detect -> prob {:.4} box ({:.1},{:.1},{:.1},{:.1}) iou {:.3}",
                d.prob,
                d.roi.x0,
                d.roi.y0,
                d.roi.x1,
                d.roi.y1,
                d.roi.iou(&s.eye_box)
            ),
            Err(e) => println!("  detect -> {e}"),
        }
    }
}
