//! Python bindings for the screening pipeline: dataset generation, the
//! two training stages, single-image prediction, and pipeline evaluation.
//! Build the `strabscreen` extension module with
//! `cargo build -p strabscreen-py` and import the produced shared library.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

use strabscreen_core::classifier;
use strabscreen_core::detect::{train_detector, DetectorConfig, DetectorModel};
use strabscreen_core::error::Error;
use strabscreen_core::metrics::{auc, auc_rank, confusion, roc_curve, se_sp_acc, Label};
use strabscreen_core::model_io;
use strabscreen_core::psroi::RoIBox;
use strabscreen_core::rng::derive_seed;
use strabscreen_core::synth;
use strabscreen_core::tensor::Tensor;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(_) | Error::ModelFile(_) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn label_str(label: Label) -> &'static str {
    match label {
        Label::Strabismus => "strabismus",
        Label::Normal => "normal",
    }
}

/// One synthetic face image with its eye-region box and class label.
#[pyclass(module = "strabscreen")]
pub struct Sample {
    inner: synth::Sample,
}

#[pymethods]
impl Sample {
    /// Image width in pixels.
    #[getter]
    fn width(&self) -> usize {
        self.inner.image.shape()[2]
    }

    /// Image height in pixels.
    #[getter]
    fn height(&self) -> usize {
        self.inner.image.shape()[1]
    }

    /// "strabismus" or "normal".
    #[getter]
    fn label(&self) -> &'static str {
        label_str(self.inner.label)
    }

    /// Ground-truth eye-region box as (x0, y0, x1, y1) in pixels.
    #[getter]
    fn eye_box(&self) -> (f64, f64, f64, f64) {
        let b = &self.inner.eye_box;
        (b.x0, b.y0, b.x1, b.y1)
    }

    /// Seed this scene was derived from.
    #[getter]
    fn seed(&self) -> u64 {
        self.inner.params.seed
    }

    /// Interleaved 8-bit RGB pixel data, row-major.
    fn rgb<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &synth::rgb_bytes(&self.inner.image))
    }

    fn __repr__(&self) -> String {
        format!(
            "Sample({}x{}, {}, seed={})",
            self.width(),
            self.height(),
            self.label(),
            self.inner.params.seed
        )
    }
}

fn wrap_samples(samples: Vec<synth::Sample>) -> Vec<Sample> {
    samples.into_iter().map(|inner| Sample { inner }).collect()
}

/// Generates a labeled train/test split of synthetic screening photos.
#[pyfunction]
#[pyo3(signature = (n_train, n_test, train_strabismus_fraction, test_strabismus_fraction, seed = 42))]
fn generate_dataset(
    n_train: usize,
    n_test: usize,
    train_strabismus_fraction: f64,
    test_strabismus_fraction: f64,
    seed: u64,
) -> PyResult<(Vec<Sample>, Vec<Sample>)> {
    let split = synth::gen_dataset(
        n_train,
        n_test,
        train_strabismus_fraction,
        test_strabismus_fraction,
        seed,
    )
    .map_err(py_err)?;
    Ok((wrap_samples(split.train), wrap_samples(split.test)))
}

/// The shipped benchmark preset: 341 training and 228 test images.
#[pyfunction]
#[pyo3(signature = (seed = 42))]
fn tenth_scale_preset(seed: u64) -> PyResult<(Vec<Sample>, Vec<Sample>)> {
    let split = synth::tenth_scale_preset(seed).map_err(py_err)?;
    Ok((wrap_samples(split.train), wrap_samples(split.test)))
}

/// Trapezoidal area under the ROC curve; `labels[i]` is true for the
/// positive (strabismus) class.
#[pyfunction]
fn roc_auc(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    let labels: Vec<Label> = labels
        .into_iter()
        .map(|p| if p { Label::Strabismus } else { Label::Normal })
        .collect();
    // the rank form is the cross-check; both are exposed through the curve
    let value = auc(&roc_curve(&scores, &labels).map_err(py_err)?);
    debug_assert!((value - auc_rank(&scores, &labels).map_err(py_err)?).abs() < 1e-9);
    Ok(value)
}

/// The eye-region detector.
#[pyclass(module = "strabscreen")]
pub struct Detector {
    model: DetectorModel,
}

#[pymethods]
impl Detector {
    /// Trains a fresh detector on the given samples.
    #[staticmethod]
    #[pyo3(signature = (samples, seed = 42, steps = None, lr = None))]
    fn train(
        samples: Vec<PyRef<Sample>>,
        seed: u64,
        steps: Option<usize>,
        lr: Option<f64>,
    ) -> PyResult<Detector> {
        let mut cfg = DetectorConfig::default();
        if let Some(s) = steps {
            cfg.steps = s;
        }
        if let Some(l) = lr {
            cfg.lr = l;
        }
        let images: Vec<(&Tensor, RoIBox)> =
            samples.iter().map(|s| (&s.inner.image, s.inner.eye_box)).collect();
        let (model, _) = train_detector(&images, &cfg, seed).map_err(py_err)?;
        Ok(Detector { model })
    }

    /// Best eye-region box as ((x0, y0, x1, y1), probability), or None when
    /// nothing clears the detection floor.
    fn detect(&self, sample: PyRef<Sample>) -> PyResult<Option<((f64, f64, f64, f64), f64)>> {
        match self.model.detect(&sample.inner.image) {
            Ok(d) => Ok(Some(((d.roi.x0, d.roi.y0, d.roi.x1, d.roi.y1), d.prob))),
            Err(Error::NoDetection) => Ok(None),
            Err(e) => Err(py_err(e)),
        }
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        model_io::save_detector(&self.model, &path).map_err(py_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Detector> {
        Ok(Detector { model: model_io::load_detector(&path).map_err(py_err)? })
    }
}

/// The strabismus/normal crop classifier.
#[pyclass(module = "strabscreen")]
pub struct Classifier {
    net: classifier::Network,
}

fn training_crop(
    det: Option<&Detector>,
    sample: &synth::Sample,
    side: usize,
) -> PyResult<Tensor> {
    let roi = match det {
        Some(d) => match d.model.detect(&sample.image) {
            Ok(found) if found.roi.iou(&sample.eye_box) >= 0.5 => found.roi,
            Ok(_) | Err(Error::NoDetection) => sample.eye_box,
            Err(e) => return Err(py_err(e)),
        },
        None => sample.eye_box,
    };
    let crop = classifier::resize_crop(&sample.image, &roi, side).map_err(py_err)?;
    classifier::normalize_crop(&crop).map_err(py_err)
}

#[pymethods]
impl Classifier {
    /// Trains a fresh classifier on eye-region crops of the samples. With a
    /// detector, each crop is the detector's own matched prediction
    /// (falling back to ground truth); without one, the ground-truth box.
    #[staticmethod]
    #[pyo3(signature = (samples, detector = None, seed = 42, iterations = None))]
    fn train(
        samples: Vec<PyRef<Sample>>,
        detector: Option<PyRef<Detector>>,
        seed: u64,
        iterations: Option<usize>,
    ) -> PyResult<Classifier> {
        let cfg = classifier::ClassifierConfig::default();
        let mut tc = classifier::TrainConfig::default();
        if let Some(n) = iterations {
            tc.iterations = n;
        }
        tc.seed = derive_seed(seed, 2);
        let det = detector.as_deref();
        let crops: Vec<(Tensor, Label)> = samples
            .iter()
            .map(|s| Ok((training_crop(det, &s.inner, cfg.input_side)?, s.inner.label)))
            .collect::<PyResult<_>>()?;
        let net = classifier::build_network(&cfg, derive_seed(seed, 1)).map_err(py_err)?;
        let (net, _) = classifier::train_classifier(net, &crops, &tc).map_err(py_err)?;
        Ok(Classifier { net })
    }

    /// Scores one sample as (probability, label). `region` overrides the
    /// crop box; by default the sample's ground-truth box is used.
    #[pyo3(signature = (sample, region = None))]
    fn predict(
        &self,
        sample: PyRef<Sample>,
        region: Option<(f64, f64, f64, f64)>,
    ) -> PyResult<(f64, &'static str)> {
        let roi = match region {
            Some((x0, y0, x1, y1)) => RoIBox::new(x0, y0, x1, y1).map_err(py_err)?,
            None => sample.inner.eye_box,
        };
        let side = self.net.config().input_side;
        let crop = classifier::resize_crop(&sample.inner.image, &roi, side).map_err(py_err)?;
        let norm = classifier::normalize_crop(&crop).map_err(py_err)?;
        let p = classifier::predict(&self.net, &norm).map_err(py_err)?;
        Ok((p.probability, label_str(p.label)))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        model_io::save_classifier(&self.net, &path).map_err(py_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Classifier> {
        Ok(Classifier { net: model_io::load_classifier(&path).map_err(py_err)? })
    }
}

/// Runs the two-stage pipeline over labeled samples and returns a dict of
/// confusion counts, Se/Sp/Acc, AUC, mean detection IoU, and the number of
/// images without a detection (scored 0.0).
#[pyfunction]
fn evaluate<'py>(
    py: Python<'py>,
    detector: PyRef<Detector>,
    classifier_: PyRef<Classifier>,
    samples: Vec<PyRef<Sample>>,
) -> PyResult<Bound<'py, PyDict>> {
    if samples.is_empty() {
        return Err(PyValueError::new_err("evaluate needs at least one sample"));
    }
    let side = classifier_.net.config().input_side;
    let mut scores = Vec::with_capacity(samples.len());
    let mut labels = Vec::with_capacity(samples.len());
    let mut iou_sum = 0.0;
    let mut no_detection = 0usize;
    for s in &samples {
        match detector.model.detect(&s.inner.image) {
            Ok(d) => {
                iou_sum += d.roi.iou(&s.inner.eye_box);
                let crop =
                    classifier::resize_crop(&s.inner.image, &d.roi, side).map_err(py_err)?;
                let norm = classifier::normalize_crop(&crop).map_err(py_err)?;
                scores.push(classifier::predict(&classifier_.net, &norm).map_err(py_err)?.probability);
            }
            Err(Error::NoDetection) => {
                no_detection += 1;
                scores.push(0.0);
            }
            Err(e) => return Err(py_err(e)),
        }
        labels.push(s.inner.label);
    }
    let counts = confusion(&scores, &labels, 0.5).map_err(py_err)?;
    let (se, sp, acc) = se_sp_acc(&counts);
    let auc_value = auc(&roc_curve(&scores, &labels).map_err(py_err)?);

    let out = PyDict::new(py);
    out.set_item("tp", counts.tp)?;
    out.set_item("tn", counts.tn)?;
    out.set_item("fp", counts.fp)?;
    out.set_item("fn", counts.fn_)?;
    out.set_item("se", se)?;
    out.set_item("sp", sp)?;
    out.set_item("acc", acc)?;
    out.set_item("auc", auc_value)?;
    out.set_item("mean_iou", iou_sum / samples.len() as f64)?;
    out.set_item("no_detection", no_detection)?;
    Ok(out)
}

#[pymodule]
mod strabscreen {
    #[pymodule_export]
    use super::Classifier;
    #[pymodule_export]
    use super::Detector;
    #[pymodule_export]
    use super::Sample;
    #[pymodule_export]
    use super::evaluate;
    #[pymodule_export]
    use super::generate_dataset;
    #[pymodule_export]
    use super::roc_auc;
    #[pymodule_export]
    use super::tenth_scale_preset;

    use pyo3::prelude::*;
    use pyo3::types::PyModule;
    use pyo3::Bound;

    #[pymodule_init]
    fn init(m: &Bound<'_, PyModule>) -> PyResult<()> {
        m.add("MODEL_FORMAT_VERSION", strabscreen_core::model_io::FORMAT_VERSION)
    }
}
