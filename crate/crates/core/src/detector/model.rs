//! Linear heads over box features, and the binary checkpoint format.
//!
//! Checkpoint layout (little-endian): magic `SDCK`, u32 version, u32 feature
//! dimension, u32 class count K, anchor config (f64 stride, u32 + f64 sizes,
//! u32 + f64 ratios, f64 positive IoU, f64 negative IoU), u32 epochs, u64 seed,
//! class names (u32 count, then u32 length + UTF-8 bytes each), then the f64
//! arrays: classifier weights (K+1)×d, classifier bias K+1, regressor weights 4×d,
//! regressor bias 4.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::anchors::AnchorConfig;
use super::features::{Features, FEATURE_DIM};
use crate::annotations::ClassCatalog;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SDCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TrainingMeta {
    pub epochs: u32,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorModel {
    pub anchors: AnchorConfig,
    pub catalog: ClassCatalog,
    /// All weights, flattened in checkpoint order.
    pub params: Vec<f64>,
    pub meta: TrainingMeta,
}

pub(crate) fn param_len(num_classes: usize) -> usize {
    (num_classes + 1) * (FEATURE_DIM + 1) + 4 * (FEATURE_DIM + 1)
}

impl DetectorModel {
    pub fn zeros(catalog: ClassCatalog, anchors: AnchorConfig) -> Result<DetectorModel> {
        anchors.validate()?;
        if catalog.is_empty() {
            return Err(Error::validation("detector needs at least one class"));
        }
        let params = vec![0.0; param_len(catalog.len())];
        Ok(DetectorModel { anchors, catalog, params, meta: TrainingMeta::default() })
    }

    /// Number of foreground classes K.
    pub fn num_classes(&self) -> usize {
        self.catalog.len()
    }

    fn offsets(&self) -> [usize; 4] {
        let k1 = self.num_classes() + 1;
        let cls_b = k1 * FEATURE_DIM;
        let reg_w = cls_b + k1;
        let reg_b = reg_w + 4 * FEATURE_DIM;
        [0, cls_b, reg_w, reg_b]
    }

    pub fn classifier_weights(&self) -> &[f64] {
        let o = self.offsets();
        &self.params[o[0]..o[1]]
    }

    pub fn classifier_bias(&self) -> &[f64] {
        let o = self.offsets();
        &self.params[o[1]..o[2]]
    }

    pub fn regressor_weights(&self) -> &[f64] {
        let o = self.offsets();
        &self.params[o[2]..o[3]]
    }

    pub fn regressor_bias(&self) -> &[f64] {
        &self.params[self.offsets()[3]..]
    }

    /// Class logits (index 0 = background) and regressed deltas.
    pub fn forward(&self, f: &Features, logits: &mut [f64], deltas: &mut [f64; 4]) {
        self.logits(f, logits);
        *deltas = self.deltas(f);
    }

    /// Classifier outputs, background first.
    pub fn logits(&self, f: &Features, logits: &mut [f64]) {
        let (w, b) = (self.classifier_weights(), self.classifier_bias());
        for (c, out) in logits.iter_mut().enumerate() {
            *out = dot(&w[c * FEATURE_DIM..(c + 1) * FEATURE_DIM], f) + b[c];
        }
    }

    /// Regressed box deltas `(dx, dy, dw, dh)`.
    pub fn deltas(&self, f: &Features) -> [f64; 4] {
        let (w, b) = (self.regressor_weights(), self.regressor_bias());
        std::array::from_fn(|r| dot(&w[r * FEATURE_DIM..(r + 1) * FEATURE_DIM], f) + b[r])
    }

    pub fn validate(&self) -> Result<()> {
        self.anchors.validate()?;
        self.catalog.validate()?;
        if self.params.len() != param_len(self.num_classes()) {
            return Err(Error::validation(format!(
                "model has {} parameters, expected {} for {} classes",
                self.params.len(),
                param_len(self.num_classes()),
                self.num_classes()
            )));
        }
        if let Some(i) = self.params.iter().position(|v| !v.is_finite()) {
            return Err(Error::validation(format!("model parameter {i} is not finite")));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(128 + self.params.len() * 8);
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        put_u32(&mut out, FEATURE_DIM as u32);
        put_u32(&mut out, self.num_classes() as u32);
        let a = &self.anchors;
        out.extend_from_slice(&a.stride.to_le_bytes());
        for list in [&a.sizes, &a.ratios] {
            put_u32(&mut out, list.len() as u32);
            for v in list {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&a.positive_iou.to_le_bytes());
        out.extend_from_slice(&a.negative_iou.to_le_bytes());
        put_u32(&mut out, self.meta.epochs);
        out.extend_from_slice(&self.meta.seed.to_le_bytes());
        put_u32(&mut out, self.catalog.len() as u32);
        for c in self.catalog.categories() {
            put_u32(&mut out, c.name.len() as u32);
            out.extend_from_slice(c.name.as_bytes());
        }
        for v in &self.params {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<DetectorModel> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::validation("not a detector checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::validation(format!(
                "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let dim = r.u32()? as usize;
        if dim != FEATURE_DIM {
            return Err(Error::validation(format!(
                "checkpoint feature dimension {dim} does not match {FEATURE_DIM}"
            )));
        }
        let k = r.u32()? as usize;
        let stride = r.f64()?;
        let sizes = r.f64_list()?;
        let ratios = r.f64_list()?;
        let anchors = AnchorConfig {
            stride,
            sizes,
            ratios,
            positive_iou: r.f64()?,
            negative_iou: r.f64()?,
        };
        let meta = TrainingMeta { epochs: r.u32()?, seed: r.u64()? };
        let n_names = r.u32()? as usize;
        if n_names != k {
            return Err(Error::validation(format!(
                "checkpoint declares {k} classes but lists {n_names} names"
            )));
        }
        let mut names = Vec::with_capacity(k);
        for _ in 0..k {
            let len = r.u32()? as usize;
            let s = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::validation("checkpoint class name is not UTF-8"))?;
            names.push(s.to_string());
        }
        let catalog = ClassCatalog::from_names(&names)?;
        let n = param_len(k);
        let mut params = Vec::with_capacity(n);
        for _ in 0..n {
            params.push(r.f64()?);
        }
        if r.pos != bytes.len() {
            return Err(Error::validation("trailing bytes after checkpoint weights"));
        }
        let m = DetectorModel { anchors, catalog, params, meta };
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<DetectorModel> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        DetectorModel::from_bytes(&bytes).map_err(|e| match e {
            Error::Validation(msg) => Error::Parse { path: path.to_path_buf(), context: msg },
            other => other,
        })
    }

    /// Hex SHA-256 of the serialized checkpoint.
    pub fn digest(&self) -> String {
        sha256_hex(&self.to_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[inline]
pub(crate) fn dot(w: &[f64], f: &Features) -> f64 {
    w.iter().zip(f).map(|(a, b)| a * b).sum()
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::validation("truncated checkpoint"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64_list(&mut self) -> Result<Vec<f64>> {
        let n = self.u32()? as usize;
        if n > 1024 {
            return Err(Error::validation("implausible anchor list length in checkpoint"));
        }
        (0..n).map(|_| self.f64()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotations::tests::catalog;

    fn model() -> DetectorModel {
        let mut m = DetectorModel::zeros(catalog(), AnchorConfig::default()).unwrap();
        for (i, p) in m.params.iter_mut().enumerate() {
            *p = (i as f64 * 0.37).sin();
        }
        m.meta = TrainingMeta { epochs: 7, seed: 42 };
        m
    }

    #[test]
    fn layout_sizes() {
        let m = model();
        assert_eq!(m.classifier_weights().len(), 4 * FEATURE_DIM);
        assert_eq!(m.classifier_bias().len(), 4);
        assert_eq!(m.regressor_weights().len(), 4 * FEATURE_DIM);
        assert_eq!(m.regressor_bias().len(), 4);
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = model();
        let bytes = m.to_bytes();
        assert_eq!(&bytes[..4], b"SDCK");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), FEATURE_DIM as u32);
        let back = DetectorModel::from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.digest(), m.digest());

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a/m.ckpt");
        m.save(&p).unwrap();
        assert_eq!(DetectorModel::load(&p).unwrap(), m);
    }

    #[test]
    fn corrupt_checkpoints_rejected() {
        let bytes = model().to_bytes();
        assert!(DetectorModel::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(DetectorModel::from_bytes(&bad).is_err());
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(DetectorModel::from_bytes(&bad).unwrap_err().to_string().contains("version"));
        let mut bad = bytes;
        let n = bad.len();
        bad[n - 8..].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(DetectorModel::from_bytes(&bad).is_err());
    }

    #[test]
    fn digest_changes_with_weights() {
        let mut m = model();
        let d = m.digest();
        m.params[3] += 1e-12;
        assert_ne!(m.digest(), d);
    }
}
