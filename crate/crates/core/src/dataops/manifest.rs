use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{assign_bucket, Bucket, DataError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub sample_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent_path: Option<String>,
    pub native_height: usize,
    pub native_width: usize,
    pub caption: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bucket_id: Option<usize>,
    /// Class index for class-conditional training.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_label: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuarantinedRecord {
    pub record: ManifestRecord,
    pub reason: String,
}

/// Line-delimited JSON records, one per line. Records whose caption is blank
/// are set aside in `quarantined` rather than dropped.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
    pub quarantined: Vec<QuarantinedRecord>,
}

impl DatasetManifest {
    pub fn new(records: Vec<ManifestRecord>) -> Self {
        let mut m = Self::default();
        for r in records {
            m.push(r);
        }
        m
    }

    pub fn push(&mut self, record: ManifestRecord) {
        if record.caption.trim().is_empty() {
            self.quarantined.push(QuarantinedRecord {
                record,
                reason: "empty caption".into(),
            });
        } else {
            self.records.push(record);
        }
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut m = Self::default();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let record: ManifestRecord =
                serde_json::from_str(line).map_err(|e| DataError::Parse {
                    path: origin.to_string(),
                    line: i + 1,
                    msg: e.to_string(),
                })?;
            m.push(record);
        }
        let mut ids: Vec<&str> = m.records.iter().map(|r| r.sample_id.as_str()).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(DataError::Manifest(format!(
                "duplicate sample_id `{}`",
                w[0]
            )));
        }
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, self.to_jsonl())?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn captions(&self) -> impl Iterator<Item = &str> {
        self.records.iter().map(|r| r.caption.as_str())
    }

    /// Set every record's bucket from its native aspect.
    pub fn assign_buckets(&mut self, buckets: &[Bucket]) -> Result<()> {
        for r in &mut self.records {
            r.bucket_id = Some(assign_bucket(r.native_height, r.native_width, buckets)?);
        }
        Ok(())
    }

    /// Every record carries a bucket id that exists in `buckets`.
    pub fn check_buckets(&self, buckets: &[Bucket]) -> Result<()> {
        for r in &self.records {
            match r.bucket_id {
                Some(id) if buckets.iter().any(|b| b.id == id) => {}
                Some(id) => {
                    return Err(DataError::Manifest(format!(
                        "record `{}` refers to bucket {id}, which does not exist",
                        r.sample_id
                    )))
                }
                None => {
                    return Err(DataError::Manifest(format!(
                        "record `{}` has no bucket",
                        r.sample_id
                    )))
                }
            }
        }
        Ok(())
    }
}
