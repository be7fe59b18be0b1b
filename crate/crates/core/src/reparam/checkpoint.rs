//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        b"PXAC"
//! version      u32
//! config       u64 length + UTF-8 JSON
//! metadata     u64 count, then (u64 len, key bytes, u64 len, value bytes)*
//! entries      u64 count, then per entry:
//!                u8 section (0 weight, 1 first moment, 2 second moment)
//!                u64 name length + name bytes
//!                u32 ndim, u64 dims[ndim], u64 numel
//! padding      zero bytes up to the next multiple of 8
//! arrays       numel f64 values per entry, in entry order
//! checksum     u64, first 8 bytes of SHA-256 over everything above
//! ```

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::model::{Model, ModelConfig, WeightName};
use crate::tensor::Tensor;

use super::ReparamError;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"PXAC";
const OPTIMIZER_STEP_KEY: &str = "optimizer.step";

/// AdamW moments keyed by weight name.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: ModelConfig,
    pub weights: BTreeMap<String, Tensor>,
    pub metadata: BTreeMap<String, String>,
    pub optimizer: Option<OptimizerState>,
}

impl Checkpoint {
    pub fn from_model(model: &Model) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            config: model.config().clone(),
            weights: model.params().clone(),
            metadata: BTreeMap::new(),
            optimizer: None,
        }
    }

    pub fn with_metadata(mut self, key: &str, value: impl ToString) -> Self {
        self.metadata.insert(key.to_string(), value.to_string());
        self
    }

    pub fn to_model(&self) -> Result<Model, ReparamError> {
        Ok(Model::from_params(
            self.config.clone(),
            self.weights.clone(),
        )?)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, ReparamError> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.format_version.to_le_bytes());
        let config =
            serde_json::to_vec(&self.config).map_err(|e| ReparamError::Format(e.to_string()))?;
        put_bytes(&mut out, &config);

        let mut metadata = self.metadata.clone();
        if let Some(opt) = &self.optimizer {
            metadata.insert(OPTIMIZER_STEP_KEY.into(), opt.step.to_string());
        }
        put_u64(&mut out, metadata.len() as u64);
        for (k, v) in &metadata {
            put_bytes(&mut out, k.as_bytes());
            put_bytes(&mut out, v.as_bytes());
        }

        let mut entries: Vec<(u8, &String, &Tensor)> =
            self.weights.iter().map(|(n, t)| (0, n, t)).collect();
        if let Some(opt) = &self.optimizer {
            entries.extend(opt.m.iter().map(|(n, t)| (1, n, t)));
            entries.extend(opt.v.iter().map(|(n, t)| (2, n, t)));
        }
        put_u64(&mut out, entries.len() as u64);
        for (section, name, t) in &entries {
            WeightName::parse(name)?;
            out.push(*section);
            put_bytes(&mut out, name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                put_u64(&mut out, d as u64);
            }
            put_u64(&mut out, t.numel() as u64);
        }
        while out.len() % 8 != 0 {
            out.push(0);
        }
        for (_, _, t) in &entries {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let sum = checksum(&out);
        put_u64(&mut out, sum);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ReparamError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(ReparamError::BadMagic);
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(ReparamError::Version {
                found: version,
                supported: FORMAT_VERSION,
            });
        }
        let config_len = r.u64()? as usize;
        let config: ModelConfig = serde_json::from_slice(r.take(config_len)?)
            .map_err(|e| ReparamError::Format(format!("config: {e}")))?;

        let mut metadata = BTreeMap::new();
        for _ in 0..r.u64()? {
            let k = r.string()?;
            let v = r.string()?;
            metadata.insert(k, v);
        }

        struct Entry {
            section: u8,
            name: String,
            shape: Vec<usize>,
            numel: usize,
        }
        let count = r.u64()?;
        let mut entries = Vec::new();
        for _ in 0..count {
            let section = r.take(1)?[0];
            if section > 2 {
                return Err(ReparamError::Format(format!(
                    "unknown section tag {section}"
                )));
            }
            let name = r.string()?;
            WeightName::parse(&name)?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let numel = r.u64()? as usize;
            let declared: Option<usize> =
                shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
            if declared != Some(numel) || shape.contains(&0) || shape.is_empty() {
                return Err(ReparamError::ShapeMismatch {
                    name,
                    shape,
                    stored: numel,
                });
            }
            entries.push(Entry {
                section,
                name,
                shape,
                numel,
            });
        }
        while !r.pos.is_multiple_of(8) {
            r.take(1)?;
        }
        let needed = entries.iter().map(|e| e.numel * 8).sum::<usize>() + 8;
        if r.remaining() < needed {
            return Err(ReparamError::Truncated {
                needed,
                available: r.remaining(),
            });
        }
        if r.remaining() > needed {
            return Err(ReparamError::Format(format!(
                "{} trailing bytes after checksum",
                r.remaining() - needed
            )));
        }
        let body_end = bytes.len() - 8;
        let stored_sum = u64::from_le_bytes(bytes[body_end..].try_into().expect("8 bytes"));
        if checksum(&bytes[..body_end]) != stored_sum {
            return Err(ReparamError::Checksum);
        }

        let mut weights = BTreeMap::new();
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for e in entries {
            let data = (0..e.numel)
                .map(|_| r.f64())
                .collect::<Result<Vec<_>, _>>()?;
            let t =
                Tensor::new(&e.shape, data).map_err(|err| ReparamError::Format(err.to_string()))?;
            let slot = match e.section {
                0 => &mut weights,
                1 => &mut m,
                _ => &mut v,
            };
            if slot.insert(e.name.clone(), t).is_some() {
                return Err(ReparamError::Format(format!(
                    "duplicate entry `{}`",
                    e.name
                )));
            }
        }

        let optimizer = match metadata.remove(OPTIMIZER_STEP_KEY) {
            Some(step) => Some(OptimizerState {
                step: step
                    .parse()
                    .map_err(|_| ReparamError::Format(format!("bad optimizer step `{step}`")))?,
                m,
                v,
            }),
            None if m.is_empty() && v.is_empty() => None,
            None => {
                return Err(ReparamError::Format(
                    "optimizer moments without a step count".into(),
                ))
            }
        };

        Ok(Self {
            format_version: version,
            config,
            weights,
            metadata,
            optimizer,
        })
    }

    /// Write under an exclusive lock on `path`.
    pub fn save(&self, path: &Path) -> Result<(), ReparamError> {
        let bytes = self.to_bytes()?;
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        let mut file = OpenOptions::new()
            .write(true)
            .create(true)
            .truncate(false)
            .open(path)?;
        file.lock()?;
        file.set_len(0)?;
        file.write_all(&bytes)?;
        file.sync_all()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ReparamError> {
        let mut file = File::open(path)?;
        file.lock_shared()?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    /// Hex digest identifying the serialized content.
    pub fn fingerprint(&self) -> Result<String, ReparamError> {
        let bytes = self.to_bytes()?;
        Ok(format!("{:016x}", checksum(&bytes)))
    }
}

fn checksum(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    put_u64(out, b.len() as u64);
    out.extend_from_slice(b);
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], ReparamError> {
        if self.remaining() < n {
            return Err(ReparamError::Truncated {
                needed: n,
                available: self.remaining(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ReparamError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64, ReparamError> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64(&mut self) -> Result<f64, ReparamError> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn string(&mut self) -> Result<String, ReparamError> {
        let n = self.u64()? as usize;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|e| ReparamError::Format(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{InitScheme, Variant};
    use crate::tensor::SeededRng;
    use proptest::prelude::*;

    fn sample() -> Checkpoint {
        let model = Model::new(
            ModelConfig::desk(Variant::DitClassConditional),
            InitScheme::Random,
            4,
        )
        .unwrap();
        Checkpoint::from_model(&model)
            .with_metadata("seed", 4)
            .with_metadata("stage", "pixel_dependency")
    }

    fn with_optimizer(mut ck: Checkpoint) -> Checkpoint {
        let mut rng = SeededRng::new(1, 1);
        let m = ck
            .weights
            .iter()
            .map(|(k, t)| (k.clone(), Tensor::randn(t.shape(), 1.0, &mut rng)))
            .collect();
        let v = ck
            .weights
            .iter()
            .map(|(k, t)| {
                (
                    k.clone(),
                    Tensor::randn(t.shape(), 1.0, &mut rng).map(f64::abs),
                )
            })
            .collect();
        ck.optimizer = Some(OptimizerState { step: 17, m, v });
        ck
    }

    fn bitwise_equal(a: &Checkpoint, b: &Checkpoint) -> bool {
        let same = |x: &BTreeMap<String, Tensor>, y: &BTreeMap<String, Tensor>| {
            x.len() == y.len()
                && x.iter().zip(y).all(|((ka, ta), (kb, tb))| {
                    ka == kb
                        && ta.shape() == tb.shape()
                        && ta
                            .data()
                            .iter()
                            .zip(tb.data())
                            .all(|(p, q)| p.to_bits() == q.to_bits())
                })
        };
        a.config == b.config
            && a.metadata == b.metadata
            && same(&a.weights, &b.weights)
            && match (&a.optimizer, &b.optimizer) {
                (None, None) => true,
                (Some(x), Some(y)) => x.step == y.step && same(&x.m, &y.m) && same(&x.v, &y.v),
                _ => false,
            }
    }

    #[test]
    fn save_load_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        for ck in [sample(), with_optimizer(sample())] {
            let path = dir.path().join("a.ckpt");
            ck.save(&path).unwrap();
            let back = Checkpoint::load(&path).unwrap();
            assert!(bitwise_equal(&ck, &back));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn arbitrary_values_round_trip(values in proptest::collection::vec(any::<f64>(), 1..40), tag in "[a-z]{1,8}") {
            let mut ck = sample();
            ck.weights.clear();
            ck.weights.insert(format!("{tag}.0.w"), Tensor::from_vec(values.clone()));
            ck.metadata.insert("note".into(), tag);
            let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
            let got = back.weights.values().next().unwrap().data();
            prop_assert!(got.iter().zip(&values).all(|(a, b)| a.to_bits() == b.to_bits()));
            prop_assert_eq!(back.metadata, ck.metadata);
        }
    }

    #[test]
    fn arrays_are_eight_byte_aligned() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        let array_bytes: usize = ck.weights.values().map(|t| t.numel() * 8).sum();
        let start = bytes.len() - 8 - array_bytes;
        assert_eq!(start % 8, 0);
        let first = ck.weights.values().next().unwrap().data()[0];
        assert_eq!(&bytes[start..start + 8], &first.to_le_bytes());
    }

    /// Offset of the `numel` field of the first entry.
    fn first_numel_offset(bytes: &[u8]) -> usize {
        let mut pos = 8;
        let read = |p: usize| u64::from_le_bytes(bytes[p..p + 8].try_into().unwrap()) as usize;
        pos += 8 + read(pos);
        let meta = read(pos);
        pos += 8;
        for _ in 0..2 * meta {
            pos += 8 + read(pos);
        }
        pos += 8; // entry count
        pos += 1; // section
        pos += 8 + read(pos);
        let ndim = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
        pos + 4 + 8 * ndim
    }

    #[test]
    fn corrupted_length_is_a_shape_error() {
        let mut bytes = sample().to_bytes().unwrap();
        let off = first_numel_offset(&bytes);
        let numel = u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
        bytes[off..off + 8].copy_from_slice(&(numel + 1).to_le_bytes());
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(ReparamError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn future_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.ckpt");
        let mut bytes = sample().to_bytes().unwrap();
        bytes[4..8].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            Checkpoint::load(&path),
            Err(ReparamError::Version { found, supported }) if found == FORMAT_VERSION + 1 && supported == FORMAT_VERSION
        ));
    }

    #[test]
    fn truncation_and_bit_flips_are_distinct_errors() {
        let bytes = sample().to_bytes().unwrap();
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 100]),
            Err(ReparamError::Truncated { .. })
        ));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..3]),
            Err(ReparamError::Truncated { .. })
        ));
        let mut flipped = bytes.clone();
        let n = flipped.len();
        flipped[n - 20] ^= 1;
        assert!(matches!(
            Checkpoint::from_bytes(&flipped),
            Err(ReparamError::Checksum)
        ));
        let mut magic = bytes;
        magic[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&magic),
            Err(ReparamError::BadMagic)
        ));
    }

    #[test]
    fn invalid_names_are_refused() {
        let mut ck = sample();
        ck.weights.insert("NotAName".into(), Tensor::scalar(1.0));
        assert!(matches!(ck.to_bytes(), Err(ReparamError::Model(_))));
    }
}
