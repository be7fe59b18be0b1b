//! Data-side machinery: aspect buckets, bucket-homogeneous batch scheduling,
//! the latent codec seam, dataset manifests and caption noun statistics.

mod bucket;
mod captions;
mod codec;
mod manifest;
mod schedule;

pub use bucket::{assign_bucket, make_buckets, Bucket, BUCKET_AREA_TOLERANCE};
pub use captions::{
    caption_stats, stats_report, CaptionStats, NounTagger, ReferenceCorpus, ReportRow, StatsReport,
    REFERENCE_CORPORA,
};
pub use codec::{read_tensor, write_tensor, LatentCodec, QuantizingCodec, SpaceToDepth};
pub use manifest::{DatasetManifest, ManifestRecord, QuarantinedRecord};
pub use schedule::{batch_scheduler, Batch, BatchSchedule};

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("config: {0}")]
    Config(String),
    #[error("scheduling: {0}")]
    Schedule(String),
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("codec: {0}")]
    Codec(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;
