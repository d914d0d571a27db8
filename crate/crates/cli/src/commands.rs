//! The five pipeline commands. Each returns a [`Failure`] on error so the
//! binary can map it to the right exit code; all file outputs are
//! byte-deterministic for fixed seed and inputs.

use std::fs;
use std::path::{Path, PathBuf};

use strabscreen_core::classifier::{self, Network, TrainConfig};
use strabscreen_core::detect::{train_detector, DetectorModel};
use strabscreen_core::error::Error;
use strabscreen_core::metrics::{auc, confusion, roc_curve, Label, MetricReport, RocCurve};
use strabscreen_core::model_io;
use strabscreen_core::rng::derive_seed;
use strabscreen_core::synth::{
    self, class_counts, gen_dataset, import_split, DatasetSplit, Sample,
};
use strabscreen_core::tensor::Tensor;

use crate::config::PipelineConfig;
use crate::report;

/// Command failure with its process exit code: 2 for usage and IO
/// problems, 3 for training failures.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Training(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Training(_) => 3,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Training(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Failure {
        match e {
            Error::Training { .. } => Failure::Training(e.to_string()),
            other => Failure::Usage(other.to_string()),
        }
    }
}

pub type CmdResult = std::result::Result<(), Failure>;

/// Tags a training-stage error with the stage name and promotes any error
/// inside training to exit code 3.
fn stage_failure(stage: &str, e: Error) -> Failure {
    Failure::Training(format!("{stage}: {e}"))
}

fn generate(cfg: &PipelineConfig, seed: u64) -> Result<DatasetSplit, Failure> {
    let d = &cfg.dataset;
    gen_dataset(d.train_size, d.test_size, d.train_fraction(), d.test_fraction(), seed)
        .map_err(Failure::from)
}

pub fn cmd_gen_data(cfg: &PipelineConfig, seed: u64, out: &Path) -> CmdResult {
    let split = generate(cfg, seed)?;
    synth::export_dataset(&split, out)?;
    let (ts, tn) = class_counts(&split.train);
    let (es, en) = class_counts(&split.test);
    println!(
        "wrote {}: train {} ({ts} strabismus / {tn} normal), test {} ({es} strabismus / {en} normal)",
        out.display(),
        split.train.len(),
        split.test.len()
    );
    Ok(())
}

/// Ground-truth crops resized and normalized for the classifier.
fn gt_crops(cfg: &PipelineConfig, samples: &[Sample]) -> Result<Vec<(Tensor, Label)>, Failure> {
    let side = cfg.classifier.input_side;
    samples
        .iter()
        .map(|s| {
            let crop = classifier::resize_crop(&s.image, &s.eye_box, side)?;
            Ok((classifier::normalize_crop(&crop)?, s.label))
        })
        .collect()
}

/// Crops from the trained detector's own matched predictions, falling back
/// to the ground-truth box when the prediction misses it. The classifier
/// then trains on the same crop distribution it will see at inference.
fn matched_crops(
    det: &DetectorModel,
    cfg: &PipelineConfig,
    samples: &[Sample],
) -> Result<Vec<(Tensor, Label)>, Failure> {
    let side = cfg.classifier.input_side;
    samples
        .iter()
        .map(|s| {
            let roi = match det.detect(&s.image) {
                Ok(d) if d.roi.iou(&s.eye_box) >= 0.5 => d.roi,
                Ok(_) | Err(Error::NoDetection) => s.eye_box,
                Err(e) => return Err(stage_failure("detector", e)),
            };
            let crop = classifier::resize_crop(&s.image, &roi, side)?;
            Ok((classifier::normalize_crop(&crop)?, s.label))
        })
        .collect()
}

fn train_classifier_stage(
    cfg: &PipelineConfig,
    crops: &[(Tensor, Label)],
    seed: u64,
) -> Result<(Network, Vec<f64>), Failure> {
    let net = classifier::build_network(&cfg.classifier, derive_seed(seed, 1))
        .map_err(Failure::from)?;
    let mut tc: TrainConfig = cfg.train.clone();
    tc.seed = derive_seed(seed, 2);
    classifier::train_classifier(net, crops, &tc).map_err(|e| stage_failure("classifier", e))
}

fn loss_rows(history: &[f64]) -> Vec<Vec<String>> {
    history
        .iter()
        .enumerate()
        .map(|(i, l)| vec![(i + 1).to_string(), format!("{l:.6}")])
        .collect()
}

pub fn cmd_train(cfg: &PipelineConfig, seed: u64, data: &Path, out: &Path) -> CmdResult {
    let train = import_split(&data.join("train"))?;
    if train.is_empty() {
        return Err(Failure::Usage(format!("no training samples under {}", data.display())));
    }
    fs::create_dir_all(out)
        .map_err(|e| Failure::Usage(format!("{}: {e}", out.display())))?;

    let images: Vec<(&Tensor, _)> =
        train.iter().map(|s| (&s.image, s.eye_box.clone())).collect();
    let (det, det_hist) = train_detector(&images, &cfg.detector, seed)
        .map_err(|e| stage_failure("detector", e))?;
    model_io::save_detector(&det, &out.join("detector.rfcn"))?;
    report::write_csv(&out.join("detector_loss.csv"), &["step", "loss"], &loss_rows(&det_hist))?;

    let crops = matched_crops(&det, cfg, &train)?;
    let (net, cls_hist) = train_classifier_stage(cfg, &crops, seed)?;
    model_io::save_classifier(&net, &out.join("classifier.rfcn"))?;
    report::write_csv(
        &out.join("classifier_loss.csv"),
        &["step", "loss"],
        &loss_rows(&cls_hist),
    )?;

    println!(
        "trained detector ({} steps, final loss {:.4}) and classifier ({} steps, final loss {:.4}) -> {}",
        det_hist.len(),
        det_hist.last().copied().unwrap_or(f64::NAN),
        cls_hist.len(),
        cls_hist.last().copied().unwrap_or(f64::NAN),
        out.display()
    );
    Ok(())
}

/// Scores one labeled sample through detector and classifier. A missing
/// detection scores 0.0; the caller counts those separately.
fn pipeline_score(det: &DetectorModel, net: &Network, sample: &Sample) -> Result<(f64, bool), Error> {
    match det.detect(&sample.image) {
        Ok(d) => {
            let side = net.config().input_side;
            let crop = classifier::resize_crop(&sample.image, &d.roi, side)?;
            let norm = classifier::normalize_crop(&crop)?;
            Ok((classifier::predict(net, &norm)?.probability, false))
        }
        Err(Error::NoDetection) => Ok((0.0, true)),
        Err(other) => Err(other),
    }
}

fn load_models(models: &Path) -> Result<(DetectorModel, Network), Failure> {
    let det = model_io::load_detector(&models.join("detector.rfcn"))?;
    let net = model_io::load_classifier(&models.join("classifier.rfcn"))?;
    Ok((det, net))
}

pub struct EvalOutcome {
    pub report: MetricReport,
    pub curve: RocCurve,
    pub no_detection: usize,
}

/// Full-pipeline evaluation over labeled samples.
pub fn evaluate_samples(
    det: &DetectorModel,
    net: &Network,
    samples: &[Sample],
) -> Result<EvalOutcome, Failure> {
    let mut scores = Vec::with_capacity(samples.len());
    let mut labels = Vec::with_capacity(samples.len());
    let mut no_detection = 0usize;
    for s in samples {
        let (p, missed) = pipeline_score(det, net, s)?;
        scores.push(p);
        labels.push(s.label);
        no_detection += usize::from(missed);
    }
    let counts = confusion(&scores, &labels, 0.5)?;
    let curve = roc_curve(&scores, &labels)?;
    let a = auc(&curve);
    Ok(EvalOutcome {
        report: MetricReport::from_counts(counts, Some(a)),
        curve,
        no_detection,
    })
}

fn write_eval_reports(outcome: &EvalOutcome, out: &Path) -> CmdResult {
    fs::create_dir_all(out)
        .map_err(|e| Failure::Usage(format!("{}: {e}", out.display())))?;
    let metrics = format!("{}\r\n{}\r\n", MetricReport::CSV_HEADER, outcome.report.csv_row());
    fs::write(out.join("metrics.csv"), metrics)
        .map_err(|e| Failure::Usage(format!("{}: {e}", out.display())))?;

    let rows: Vec<Vec<String>> = outcome
        .curve
        .thresholds
        .iter()
        .zip(&outcome.curve.points)
        .map(|(t, &(fpr, tpr))| vec![t.to_string(), format!("{fpr:.6}"), format!("{tpr:.6}")])
        .collect();
    report::write_csv(&out.join("roc_points.csv"), &["threshold", "fpr", "tpr"], &rows)?;

    let auc_value = outcome.report.auc.unwrap_or(f64::NAN);
    fs::write(out.join("roc.svg"), report::roc_svg(&outcome.curve, auc_value))
        .map_err(|e| Failure::Usage(format!("{}: {e}", out.display())))?;
    Ok(())
}

pub fn cmd_eval(models: &Path, data: &Path, out: &Path) -> CmdResult {
    let test = import_split(&data.join("test"))?;
    if test.is_empty() {
        return Err(Failure::Usage(format!("empty test set under {}", data.display())));
    }
    let (det, net) = load_models(models)?;
    let outcome = evaluate_samples(&det, &net, &test)?;
    write_eval_reports(&outcome, out)?;
    println!(
        "evaluated {} images: {} ({} without detection, scored 0.0) -> {}",
        test.len(),
        outcome.report.csv_row(),
        outcome.no_detection,
        out.display()
    );
    Ok(())
}

pub fn cmd_predict(models: &Path, input: &Path, out: &Path) -> CmdResult {
    let mut files: Vec<PathBuf> = fs::read_dir(input)
        .map_err(|e| Failure::Usage(format!("{}: {e}", input.display())))?
        .filter_map(|entry| entry.ok().map(|d| d.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ppm"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Failure::Usage(format!("no .ppm images in {}", input.display())));
    }
    let (det, net) = load_models(models)?;
    let side = net.config().input_side;
    let version = model_io::FORMAT_VERSION.to_string();

    let mut rows = Vec::with_capacity(files.len());
    for path in &files {
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let image = synth::pnm::read_p6(path)
            .and_then(|(w, h, rgb)| synth::tensor_from_rgb(w, h, &rgb));
        let row = match image {
            Err(_) => vec![name, "READ_ERROR".into(), String::new(), String::new(), version.clone()],
            Ok(img) => match det.detect(&img) {
                Ok(d) => {
                    let crop = classifier::resize_crop(&img, &d.roi, side)?;
                    let norm = classifier::normalize_crop(&crop)?;
                    let p = classifier::predict(&net, &norm)?;
                    let label = match p.label {
                        Label::Strabismus => "strabismus",
                        Label::Normal => "normal",
                    };
                    vec![
                        name,
                        format!("{:.2} {:.2} {:.2} {:.2}", d.roi.x0, d.roi.y0, d.roi.x1, d.roi.y1),
                        format!("{:.6}", p.probability),
                        label.into(),
                        version.clone(),
                    ]
                }
                // unprocessable images (too small for the network) score
                // like undetected ones
                Err(_) => vec![
                    name,
                    "NO_DETECTION".into(),
                    "0.000000".into(),
                    "normal".into(),
                    version.clone(),
                ],
            },
        };
        rows.push(row);
    }
    fs::create_dir_all(out)
        .map_err(|e| Failure::Usage(format!("{}: {e}", out.display())))?;
    report::write_csv(
        &out.join("predictions.csv"),
        &["filename", "detection", "probability", "label", "model_version"],
        &rows,
    )?;
    println!("scored {} images -> {}", rows.len(), out.join("predictions.csv").display());
    Ok(())
}

/// Classifier-only metrics on ground-truth crops, for the learning curve.
fn crop_metrics(net: &Network, crops: &[(Tensor, Label)]) -> Result<MetricReport, Failure> {
    let mut scores = Vec::with_capacity(crops.len());
    let mut labels = Vec::with_capacity(crops.len());
    for (crop, label) in crops {
        scores.push(classifier::predict(net, crop).map_err(Failure::from)?.probability);
        labels.push(*label);
    }
    let counts = confusion(&scores, &labels, 0.5)?;
    let a = auc(&roc_curve(&scores, &labels)?);
    Ok(MetricReport::from_counts(counts, Some(a)))
}

pub fn cmd_learning_curve(
    cfg: &PipelineConfig,
    seed: u64,
    sizes: &[usize],
    out: &Path,
) -> CmdResult {
    if sizes.is_empty() {
        return Err(Failure::Usage("learning curve needs at least one size".into()));
    }
    if sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Failure::Usage(format!(
            "sizes must be strictly ascending, got {sizes:?}"
        )));
    }
    fs::create_dir_all(out)
        .map_err(|e| Failure::Usage(format!("{}: {e}", out.display())))?;

    let fmt = |v: Option<f64>| v.map_or("NA".to_string(), |x| format!("{x:.4}"));
    let mut rows = Vec::with_capacity(sizes.len());
    for &n in sizes {
        let mut sized = cfg.clone();
        sized.dataset.train_size = n;
        sized.dataset.train_strabismus =
            (n as f64 * cfg.dataset.train_fraction()).round() as usize;
        // the test split is identical across sizes: same seed, same params
        let split = generate(&sized, seed)?;
        let train_crops = gt_crops(cfg, &split.train)?;
        let (net, _) = train_classifier_stage(cfg, &train_crops, seed)?;
        let test_crops = gt_crops(cfg, &split.test)?;
        let report = crop_metrics(&net, &test_crops)?;
        println!("n_train {n}: {}", report.csv_row());
        rows.push(vec![
            n.to_string(),
            fmt(report.se),
            fmt(report.sp),
            fmt(report.acc),
            fmt(report.auc),
        ]);
    }
    report::write_csv(
        &out.join("learning_curve.csv"),
        &["n_train", "Se", "Sp", "Acc", "AUC"],
        &rows,
    )?;
    Ok(())
}
