//! Binary model files. Layout, all integers little-endian:
//!
//! ```text
//! "RFCN"  magic
//! u16     format version (1)
//! u8      component tag (1 detector, 2 classifier)
//! u32     descriptor length, then that many UTF-8 bytes (the config as
//!         `key=value` pairs separated by spaces)
//! u64     parameter tensor count, then per tensor:
//!           u32 rank, u64 dims..., f64 values...
//! u32     CRC-32 (IEEE) of everything above
//! ```
//!
//! Saving a loaded model reproduces the file byte for byte: floats are
//! stored raw, and the descriptor text is regenerated from the parsed
//! config, whose fields round-trip through shortest-form formatting.

use std::fs;
use std::path::Path;

use crate::classifier::{ClassifierConfig, LossKind, Network};
use crate::detect::{DetectorConfig, DetectorModel};
use crate::error::{io_with_path, Error, Result};
use crate::psroi::VoteMode;
use crate::tensor::{Parameter, Tensor};

const MAGIC: &[u8; 4] = b"RFCN";
pub const FORMAT_VERSION: u16 = 1;
const TAG_DETECTOR: u8 = 1;
const TAG_CLASSIFIER: u8 = 2;

pub fn save_detector(model: &DetectorModel, path: &Path) -> Result<()> {
    let bytes = encode(TAG_DETECTOR, &detector_descriptor(model.config()), model.params());
    fs::write(path, bytes).map_err(|e| Error::Io(io_with_path(e, path)))
}

pub fn load_detector(path: &Path) -> Result<DetectorModel> {
    let (tag, descriptor, params) = decode(&read(path)?)?;
    if tag != TAG_DETECTOR {
        return Err(Error::ModelFile(format!("component tag {tag} is not a detector")));
    }
    DetectorModel::from_parts(parse_detector_descriptor(&descriptor)?, params)
}

pub fn save_classifier(net: &Network, path: &Path) -> Result<()> {
    let bytes = encode(TAG_CLASSIFIER, &classifier_descriptor(net.config()), net.params());
    fs::write(path, bytes).map_err(|e| Error::Io(io_with_path(e, path)))
}

pub fn load_classifier(path: &Path) -> Result<Network> {
    let (tag, descriptor, params) = decode(&read(path)?)?;
    if tag != TAG_CLASSIFIER {
        return Err(Error::ModelFile(format!("component tag {tag} is not a classifier")));
    }
    Network::from_parts(parse_classifier_descriptor(&descriptor)?, params)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Io(io_with_path(e, path)))
}

fn encode(tag: u8, descriptor: &str, params: &[Parameter]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(tag);
    out.extend_from_slice(&(descriptor.len() as u32).to_le_bytes());
    out.extend_from_slice(descriptor.as_bytes());
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for p in params {
        out.extend_from_slice(&(p.shape().len() as u32).to_le_bytes());
        for &d in p.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in p.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

fn decode(bytes: &[u8]) -> Result<(u8, String, Vec<Parameter>)> {
    let fail = |m: &str| Error::ModelFile(m.into());
    if bytes.len() < 4 + 2 + 1 + 4 + 8 + 4 {
        return Err(fail("file too short"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("four bytes"));
    let actual = crc32(body);
    if stored != actual {
        return Err(Error::ModelFile(format!(
            "checksum mismatch: stored {stored:08x}, computed {actual:08x}"
        )));
    }
    let mut r = Reader { bytes: body, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(fail("bad magic, not a model file"));
    }
    let version = u16::from_le_bytes(r.take(2)?.try_into().expect("two bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::ModelFile(format!("unsupported format version {version}")));
    }
    let tag = r.take(1)?[0];
    let dlen = u32::from_le_bytes(r.take(4)?.try_into().expect("four bytes")) as usize;
    let descriptor = String::from_utf8(r.take(dlen)?.to_vec())
        .map_err(|_| fail("descriptor is not UTF-8"))?;
    let count = r.take_u64()? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let rank = u32::from_le_bytes(r.take(4)?.try_into().expect("four bytes")) as usize;
        if rank > 8 {
            return Err(Error::ModelFile(format!("implausible tensor rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.take_u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")))
            .collect();
        params.push(Parameter::new(Tensor::from_vec(&shape, data)?));
    }
    if r.pos != body.len() {
        return Err(fail("trailing bytes after the last parameter"));
    }
    Ok((tag, descriptor, params))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::ModelFile("file truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn take_u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("eight bytes")))
    }
}

fn join_nums<T: std::fmt::Display>(vals: &[T]) -> String {
    vals.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn detector_descriptor(cfg: &DetectorConfig) -> String {
    format!(
        "backbone={} rpn_channels={} scales={} ratios={} k={} vote={} nms={} \
         train_proposals={} eval_proposals={} ohem={} rpn_sample={} lr={} momentum={} \
         weight_decay={} steps={}",
        join_nums(&cfg.backbone_channels),
        cfg.rpn_channels,
        join_nums(&cfg.anchor_scales),
        join_nums(&cfg.anchor_ratios),
        cfg.k,
        match cfg.vote_mode {
            VoteMode::Mean => "mean",
            VoteMode::Sum => "sum",
        },
        cfg.nms_thresh,
        cfg.train_proposals,
        cfg.eval_proposals,
        cfg.ohem_batch,
        cfg.rpn_sample,
        cfg.lr,
        cfg.momentum,
        cfg.weight_decay,
        cfg.steps,
    )
}

fn classifier_descriptor(cfg: &ClassifierConfig) -> String {
    format!(
        "side={} channels={} kernels={} strides={} fc={} dropout={} loss={}",
        cfg.input_side,
        join_nums(&cfg.conv_channels),
        join_nums(&cfg.conv_kernels),
        join_nums(&cfg.conv_strides),
        join_nums(&cfg.fc_widths),
        cfg.dropout,
        match cfg.loss {
            LossKind::CrossEntropy => "ce",
            LossKind::Mse => "mse",
        },
    )
}

/// Splits a descriptor into its `key=value` pairs, rejecting repeats.
fn descriptor_pairs(text: &str) -> Result<Vec<(&str, &str)>> {
    let mut pairs = Vec::new();
    for part in text.split_whitespace() {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| Error::ModelFile(format!("descriptor entry {part:?} lacks '='")))?;
        if pairs.iter().any(|&(seen, _)| seen == k) {
            return Err(Error::ModelFile(format!("descriptor repeats key {k:?}")));
        }
        pairs.push((k, v));
    }
    Ok(pairs)
}

struct Fields<'a> {
    pairs: Vec<(&'a str, &'a str)>,
}

impl<'a> Fields<'a> {
    fn get(&mut self, key: &str) -> Result<&'a str> {
        let at = self
            .pairs
            .iter()
            .position(|&(k, _)| k == key)
            .ok_or_else(|| Error::ModelFile(format!("descriptor missing key {key:?}")))?;
        Ok(self.pairs.remove(at).1)
    }

    fn num<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        let v = self.get(key)?;
        v.parse().map_err(|_| Error::ModelFile(format!("bad value {v:?} for {key:?}")))
    }

    fn list<T: std::str::FromStr, const N: usize>(&mut self, key: &str) -> Result<[T; N]> {
        let v = self.get(key)?;
        let items: Vec<T> = v
            .split(',')
            .map(|s| s.parse().map_err(|_| ()))
            .collect::<std::result::Result<_, ()>>()
            .map_err(|_| Error::ModelFile(format!("bad value {v:?} for {key:?}")))?;
        items.try_into().map_err(|_| {
            Error::ModelFile(format!("key {key:?} needs {N} comma-separated values"))
        })
    }

    fn vec<T: std::str::FromStr>(&mut self, key: &str) -> Result<Vec<T>> {
        let v = self.get(key)?;
        v.split(',')
            .map(|s| s.parse().map_err(|_| ()))
            .collect::<std::result::Result<_, ()>>()
            .map_err(|_| Error::ModelFile(format!("bad value {v:?} for {key:?}")))
    }

    fn finish(self) -> Result<()> {
        if let Some(&(k, _)) = self.pairs.first() {
            return Err(Error::ModelFile(format!("unknown descriptor key {k:?}")));
        }
        Ok(())
    }
}

fn parse_detector_descriptor(text: &str) -> Result<DetectorConfig> {
    let mut f = Fields { pairs: descriptor_pairs(text)? };
    let cfg = DetectorConfig {
        backbone_channels: f.list("backbone")?,
        rpn_channels: f.num("rpn_channels")?,
        anchor_scales: f.vec("scales")?,
        anchor_ratios: f.vec("ratios")?,
        k: f.num("k")?,
        vote_mode: match f.get("vote")? {
            "mean" => VoteMode::Mean,
            "sum" => VoteMode::Sum,
            other => return Err(Error::ModelFile(format!("unknown vote mode {other:?}"))),
        },
        nms_thresh: f.num("nms")?,
        train_proposals: f.num("train_proposals")?,
        eval_proposals: f.num("eval_proposals")?,
        ohem_batch: f.num("ohem")?,
        rpn_sample: f.num("rpn_sample")?,
        lr: f.num("lr")?,
        momentum: f.num("momentum")?,
        weight_decay: f.num("weight_decay")?,
        steps: f.num("steps")?,
    };
    f.finish()?;
    Ok(cfg)
}

fn parse_classifier_descriptor(text: &str) -> Result<ClassifierConfig> {
    let mut f = Fields { pairs: descriptor_pairs(text)? };
    let cfg = ClassifierConfig {
        input_side: f.num("side")?,
        conv_channels: f.list("channels")?,
        conv_kernels: f.list("kernels")?,
        conv_strides: f.list("strides")?,
        fc_widths: f.list("fc")?,
        dropout: f.num("dropout")?,
        loss: match f.get("loss")? {
            "ce" => LossKind::CrossEntropy,
            "mse" => LossKind::Mse,
            other => return Err(Error::ModelFile(format!("unknown loss kind {other:?}"))),
        },
    };
    f.finish()?;
    Ok(cfg)
}

/// CRC-32 (IEEE 802.3 polynomial, reflected), the same function the
/// common archive formats use.
pub fn crc32(bytes: &[u8]) -> u32 {
    const TABLE: [u32; 256] = crc_table();
    let mut c = u32::MAX;
    for &b in bytes {
        c = TABLE[((c ^ b as u32) & 0xFF) as usize] ^ (c >> 8);
    }
    c ^ u32::MAX
}

const fn crc_table() -> [u32; 256] {
    let mut table = [0u32; 256];
    let mut i = 0;
    while i < 256 {
        let mut c = i as u32;
        let mut bit = 0;
        while bit < 8 {
            c = if c & 1 != 0 { 0xEDB8_8320 ^ (c >> 1) } else { c >> 1 };
            bit += 1;
        }
        table[i] = c;
        i += 1;
    }
    table
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::build_network;
    use std::path::PathBuf;

    fn temp_path(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("model-io-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        dir.join(format!("{tag}.bin"))
    }

    #[test]
    fn crc32_matches_published_check_value() {
        assert_eq!(crc32(b"123456789"), 0xCBF4_3926);
        assert_eq!(crc32(b""), 0);
    }

    #[test]
    fn classifier_roundtrip_is_byte_identical() {
        let cfg = ClassifierConfig::tiny();
        let net = build_network(&cfg, 7).unwrap();
        let path = temp_path("cls");
        save_classifier(&net, &path).unwrap();
        let first = fs::read(&path).unwrap();
        let loaded = load_classifier(&path).unwrap();
        assert_eq!(loaded.config(), net.config());
        for (a, b) in loaded.params().iter().zip(net.params()) {
            assert_eq!(a.data(), b.data());
            assert_eq!(a.shape(), b.shape());
        }
        save_classifier(&loaded, &path).unwrap();
        assert_eq!(fs::read(&path).unwrap(), first);
    }

    #[test]
    fn detector_roundtrip_is_byte_identical() {
        let model = DetectorModel::new(DetectorConfig::default(), 11).unwrap();
        let path = temp_path("det");
        save_detector(&model, &path).unwrap();
        let first = fs::read(&path).unwrap();
        let loaded = load_detector(&path).unwrap();
        assert_eq!(loaded.config(), model.config());
        save_detector(&loaded, &path).unwrap();
        assert_eq!(fs::read(&path).unwrap(), first);
    }

    #[test]
    fn flipped_bit_fails_the_checksum() {
        let net = build_network(&ClassifierConfig::tiny(), 7).unwrap();
        let path = temp_path("flip");
        save_classifier(&net, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x10;
        fs::write(&path, bytes).unwrap();
        match load_classifier(&path) {
            Err(Error::ModelFile(m)) => assert!(m.contains("checksum"), "{m}"),
            Err(other) => panic!("expected checksum failure, got {other}"),
            Ok(_) => panic!("corrupt file loaded cleanly"),
        }
    }

    #[test]
    fn wrong_magic_and_truncation_are_rejected() {
        assert!(matches!(decode(b"PK\x03\x04"), Err(Error::ModelFile(_))));
        let net = build_network(&ClassifierConfig::tiny(), 7).unwrap();
        let path = temp_path("trunc");
        save_classifier(&net, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        match decode(&bytes[..bytes.len() - 9]) {
            Err(Error::ModelFile(_)) => {}
            other => panic!("expected model file error, got {other:?}"),
        }
    }

    #[test]
    fn component_tags_are_enforced() {
        let net = build_network(&ClassifierConfig::tiny(), 7).unwrap();
        let path = temp_path("tag");
        save_classifier(&net, &path).unwrap();
        match load_detector(&path) {
            Err(Error::ModelFile(m)) => assert!(m.contains("not a detector"), "{m}"),
            Err(other) => panic!("expected tag mismatch, got {other}"),
            Ok(_) => panic!("classifier file loaded as a detector"),
        }
    }

    #[test]
    fn descriptors_round_trip_non_default_configs() {
        let mut d = DetectorConfig::default();
        d.anchor_scales = vec![8.0, 24.5];
        d.vote_mode = VoteMode::Sum;
        d.lr = 0.00123;
        let text = detector_descriptor(&d);
        assert_eq!(parse_detector_descriptor(&text).unwrap(), d);

        let mut c = ClassifierConfig::tiny();
        c.loss = LossKind::Mse;
        c.dropout = 0.125;
        let text = classifier_descriptor(&c);
        assert_eq!(parse_classifier_descriptor(&text).unwrap(), c);
    }

    #[test]
    fn unknown_descriptor_key_is_rejected() {
        let text = format!("{} extra=1", classifier_descriptor(&ClassifierConfig::tiny()));
        assert!(matches!(parse_classifier_descriptor(&text), Err(Error::ModelFile(_))));
    }
}
