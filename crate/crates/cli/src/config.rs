//! Flat key=value pipeline configuration. A config file overrides the
//! shipped defaults; unknown keys are errors so typos cannot silently
//! fall back. The resolved state round-trips: parsing `resolved_text()`
//! reproduces the config exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use strabscreen_core::classifier::{ClassifierConfig, LossKind, TrainConfig};
use strabscreen_core::detect::DetectorConfig;
use strabscreen_core::error::{io_with_path, Error, Result};
use strabscreen_core::psroi::VoteMode;

/// Requested dataset composition. Strabismus fractions derive from the
/// counts, so `round(size * fraction)` recovers them exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetParams {
    pub train_size: usize,
    pub test_size: usize,
    pub train_strabismus: usize,
    pub test_strabismus: usize,
}

impl DatasetParams {
    pub fn train_fraction(&self) -> f64 {
        self.train_strabismus as f64 / self.train_size as f64
    }

    pub fn test_fraction(&self) -> f64 {
        self.test_strabismus as f64 / self.test_size as f64
    }
}

impl Default for DatasetParams {
    /// The tenth-scale mirror of the original corpus.
    fn default() -> DatasetParams {
        DatasetParams {
            train_size: 341,
            test_size: 228,
            train_strabismus: 70,
            test_strabismus: 47,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct PipelineConfig {
    pub dataset: DatasetParams,
    pub detector: DetectorConfig,
    pub classifier: ClassifierConfig,
    pub train: TrainConfig,
}

impl PipelineConfig {
    pub fn from_file(path: &Path) -> Result<PipelineConfig> {
        let text =
            fs::read_to_string(path).map_err(|e| Error::Io(io_with_path(e, path)))?;
        let mut cfg = PipelineConfig::default();
        for (ix, raw) in text.lines().enumerate() {
            let line = ix + 1;
            let stripped = match raw.find('#') {
                Some(at) => &raw[..at],
                None => raw,
            }
            .trim();
            if stripped.is_empty() {
                continue;
            }
            let (key, value) = stripped.split_once('=').ok_or_else(|| Error::Format {
                line,
                message: format!("expected key=value, got {stripped:?}"),
            })?;
            cfg.apply(key.trim(), value.trim())
                .map_err(|e| Error::Format { line, message: e.to_string() })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        if d.train_size == 0 || d.test_size == 0 {
            return Err(Error::Config("dataset sizes must be positive".into()));
        }
        if d.train_strabismus == 0
            || d.train_strabismus >= d.train_size
            || d.test_strabismus == 0
            || d.test_strabismus >= d.test_size
        {
            return Err(Error::Config(
                "each split needs at least one sample of each class".into(),
            ));
        }
        self.classifier.validate()?;
        self.train.validate()
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::Config(format!("bad value {value:?} for {what}"));
        macro_rules! num {
            () => {
                value.parse().map_err(|_| bad(key))?
            };
        }
        macro_rules! list {
            () => {{
                let items: std::result::Result<Vec<_>, _> =
                    value.split(',').map(|s| s.trim().parse()).collect();
                items.map_err(|_| bad(key))?.try_into().map_err(|_| bad(key))?
            }};
        }
        match key {
            "train_size" => self.dataset.train_size = num!(),
            "test_size" => self.dataset.test_size = num!(),
            "train_strabismus" => self.dataset.train_strabismus = num!(),
            "test_strabismus" => self.dataset.test_strabismus = num!(),

            "det_backbone" => self.detector.backbone_channels = list!(),
            "det_rpn_channels" => self.detector.rpn_channels = num!(),
            "det_scales" => {
                self.detector.anchor_scales = value
                    .split(',')
                    .map(|s| s.trim().parse())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad(key))?
            }
            "det_ratios" => {
                self.detector.anchor_ratios = value
                    .split(',')
                    .map(|s| s.trim().parse())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad(key))?
            }
            "det_k" => self.detector.k = num!(),
            "det_vote" => {
                self.detector.vote_mode = match value {
                    "mean" => VoteMode::Mean,
                    "sum" => VoteMode::Sum,
                    _ => return Err(bad(key)),
                }
            }
            "det_nms" => self.detector.nms_thresh = num!(),
            "det_train_proposals" => self.detector.train_proposals = num!(),
            "det_eval_proposals" => self.detector.eval_proposals = num!(),
            "det_ohem" => self.detector.ohem_batch = num!(),
            "det_rpn_sample" => self.detector.rpn_sample = num!(),
            "det_lr" => self.detector.lr = num!(),
            "det_momentum" => self.detector.momentum = num!(),
            "det_weight_decay" => self.detector.weight_decay = num!(),
            "det_steps" => self.detector.steps = num!(),

            "cls_side" => self.classifier.input_side = num!(),
            "cls_channels" => self.classifier.conv_channels = list!(),
            "cls_kernels" => self.classifier.conv_kernels = list!(),
            "cls_strides" => self.classifier.conv_strides = list!(),
            "cls_fc" => self.classifier.fc_widths = list!(),
            "cls_dropout" => {
                let p: f64 = num!();
                self.classifier.dropout = p;
                self.train.dropout = p;
            }
            "cls_loss" => {
                self.classifier.loss = match value {
                    "ce" => LossKind::CrossEntropy,
                    "mse" => LossKind::Mse,
                    _ => return Err(bad(key)),
                }
            }
            "cls_lr" => self.train.lr = num!(),
            "cls_batch" => self.train.batch = num!(),
            "cls_iterations" => self.train.iterations = num!(),
            "cls_momentum" => self.train.momentum = num!(),
            "cls_weight_decay" => self.train.weight_decay = num!(),

            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Every key with its current value, one per line, in documented order.
    pub fn resolved_text(&self) -> String {
        let join = |vals: &[usize]| -> String {
            vals.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
        };
        let joinf = |vals: &[f64]| -> String {
            vals.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
        };
        let mut out = String::new();
        let d = &self.dataset;
        let det = &self.detector;
        let c = &self.classifier;
        let t = &self.train;
        for (k, v) in [
            ("train_size", d.train_size.to_string()),
            ("test_size", d.test_size.to_string()),
            ("train_strabismus", d.train_strabismus.to_string()),
            ("test_strabismus", d.test_strabismus.to_string()),
            ("det_backbone", join(&det.backbone_channels)),
            ("det_rpn_channels", det.rpn_channels.to_string()),
            ("det_scales", joinf(&det.anchor_scales)),
            ("det_ratios", joinf(&det.anchor_ratios)),
            ("det_k", det.k.to_string()),
            (
                "det_vote",
                match det.vote_mode {
                    VoteMode::Mean => "mean".to_string(),
                    VoteMode::Sum => "sum".to_string(),
                },
            ),
            ("det_nms", det.nms_thresh.to_string()),
            ("det_train_proposals", det.train_proposals.to_string()),
            ("det_eval_proposals", det.eval_proposals.to_string()),
            ("det_ohem", det.ohem_batch.to_string()),
            ("det_rpn_sample", det.rpn_sample.to_string()),
            ("det_lr", det.lr.to_string()),
            ("det_momentum", det.momentum.to_string()),
            ("det_weight_decay", det.weight_decay.to_string()),
            ("det_steps", det.steps.to_string()),
            ("cls_side", c.input_side.to_string()),
            ("cls_channels", join(&c.conv_channels)),
            ("cls_kernels", join(&c.conv_kernels)),
            ("cls_strides", join(&c.conv_strides)),
            ("cls_fc", join(&c.fc_widths)),
            ("cls_dropout", c.dropout.to_string()),
            (
                "cls_loss",
                match c.loss {
                    LossKind::CrossEntropy => "ce".to_string(),
                    LossKind::Mse => "mse".to_string(),
                },
            ),
            ("cls_lr", t.lr.to_string()),
            ("cls_batch", t.batch.to_string()),
            ("cls_iterations", t.iterations.to_string()),
            ("cls_momentum", t.momentum.to_string()),
            ("cls_weight_decay", t.weight_decay.to_string()),
        ] {
            writeln!(out, "{k}={v}").expect("string write");
        }
        out
    }
}
