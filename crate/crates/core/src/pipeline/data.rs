use std::path::{Path, PathBuf};

use crate::dataops::{
    make_buckets, read_tensor, write_tensor, Bucket, DatasetManifest, LatentCodec, ManifestRecord,
};
use crate::model::ModelConfig;
use crate::tensor::{SeededRng, Tensor};

use super::{PipelineError, Result, StageConfig};

/// One record with its latent resident in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    pub sample_id: String,
    pub latent: Tensor,
    pub caption: String,
    pub class_label: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub manifest: DatasetManifest,
    pub buckets: Vec<Bucket>,
    pub samples: Vec<TrainingSample>,
}

/// Buckets a stage trains on: one square bucket, or the multi-aspect set.
pub fn stage_buckets(
    stage: &StageConfig,
    model: &ModelConfig,
    downsample: usize,
) -> Result<Vec<Bucket>> {
    let quantum = model.patch_size * downsample;
    if stage.multi_aspect {
        let area = stage.resolution * stage.resolution;
        make_buckets(
            area,
            stage.bucket_count,
            stage.bucket_ratio_min,
            stage.bucket_ratio_max,
            quantum,
        )
        .map_err(|e| PipelineError::Config(format!("stage {}: {e}", stage.name)))
    } else {
        if !stage.resolution.is_multiple_of(quantum) {
            return Err(PipelineError::Config(format!(
                "stage {}: resolution {} is not a multiple of {quantum}",
                stage.name, stage.resolution
            )));
        }
        Ok(vec![Bucket {
            id: 0,
            height: stage.resolution,
            width: stage.resolution,
        }])
    }
}

impl TrainingSet {
    /// Load latents for every manifest record (latent files directly, image
    /// files through `codec`) and check each against its bucket's latent size.
    pub fn load(
        manifest_path: &Path,
        buckets: Vec<Bucket>,
        model: &ModelConfig,
        codec: &dyn LatentCodec,
    ) -> Result<Self> {
        let mut manifest =
            DatasetManifest::load(manifest_path).map_err(|e| PipelineError::Data(e.to_string()))?;
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        if buckets.len() == 1 {
            for r in &mut manifest.records {
                r.bucket_id = Some(buckets[0].id);
            }
        } else {
            manifest
                .assign_buckets(&buckets)
                .map_err(|e| PipelineError::Data(e.to_string()))?;
        }
        let f = codec.downsample();
        let mut samples = Vec::with_capacity(manifest.len());
        for r in &manifest.records {
            let latent = match (&r.latent_path, &r.image_path) {
                (Some(p), _) => read_tensor(&base.join(p)),
                (None, Some(p)) => read_tensor(&base.join(p)).and_then(|img| codec.encode(&img)),
                (None, None) => {
                    return Err(PipelineError::Data(format!(
                        "record `{}` has neither latent nor image",
                        r.sample_id
                    )))
                }
            }
            .map_err(|e| PipelineError::Data(format!("record `{}`: {e}", r.sample_id)))?;
            let bucket = buckets
                .iter()
                .find(|b| Some(b.id) == r.bucket_id)
                .expect("bucket assigned above");
            let (lh, lw) = bucket.latent_dims(f);
            if latent.shape() != [model.latent_channels, lh, lw] {
                return Err(PipelineError::Data(format!(
                    "record `{}`: latent {:?} does not fit bucket {} ({}x{} px → [{}, {lh}, {lw}])",
                    r.sample_id,
                    latent.shape(),
                    bucket.id,
                    bucket.height,
                    bucket.width,
                    model.latent_channels
                )));
            }
            samples.push(TrainingSample {
                sample_id: r.sample_id.clone(),
                latent,
                caption: r.caption.clone(),
                class_label: r.class_label,
            });
        }
        Ok(Self {
            manifest,
            buckets,
            samples,
        })
    }
}

/// Parameters of the two-mode synthetic latent set.
#[derive(Clone, Debug)]
pub struct SynthSpec {
    pub samples: usize,
    pub latent_channels: usize,
    pub buckets: Vec<Bucket>,
    pub downsample: usize,
    pub noise: f64,
    pub seed: u64,
}

pub const SYNTH_CAPTIONS: [&str; 2] = [
    "a red square on a white background",
    "a blue circle in a green field",
];

/// Mode `k` pattern at latent size `h×w`: a cosine across the width for
/// mode 0, down the height with alternating channel sign for mode 1.
pub fn synth_pattern(mode: usize, channels: usize, h: usize, w: usize) -> Tensor {
    let mut data = Vec::with_capacity(channels * h * w);
    for c in 0..channels {
        for y in 0..h {
            for x in 0..w {
                let v = if mode == 0 {
                    (std::f64::consts::PI * (x as f64 + 0.5) / w as f64).cos()
                } else {
                    let sign = if c % 2 == 0 { 1.0 } else { -1.0 };
                    sign * (std::f64::consts::PI * (y as f64 + 0.5) / h as f64).cos()
                };
                data.push(v);
            }
        }
    }
    Tensor::new(&[channels, h, w], data).expect("sized above")
}

/// Write latents and a manifest into `dir`; returns the manifest path.
/// Samples alternate modes and cycle through the buckets.
pub fn synth_dataset(dir: &Path, spec: &SynthSpec) -> Result<PathBuf> {
    if spec.buckets.is_empty() || spec.samples == 0 {
        return Err(PipelineError::Config(
            "synthetic set needs buckets and samples".into(),
        ));
    }
    let mut rng = SeededRng::new(spec.seed, 0);
    let mut records = Vec::with_capacity(spec.samples);
    for i in 0..spec.samples {
        let mode = i % 2;
        let bucket = spec.buckets[(i / 2) % spec.buckets.len()];
        let (lh, lw) = bucket.latent_dims(spec.downsample);
        let mut latent = synth_pattern(mode, spec.latent_channels, lh, lw);
        for v in latent.data_mut() {
            *v += spec.noise * rng.normal();
        }
        let rel = format!("latents/s{i:05}.tensor");
        write_tensor(&dir.join(&rel), &latent).map_err(|e| PipelineError::Data(e.to_string()))?;
        records.push(ManifestRecord {
            sample_id: format!("s{i:05}"),
            image_path: None,
            latent_path: Some(rel),
            native_height: bucket.height * 4,
            native_width: bucket.width * 4,
            caption: SYNTH_CAPTIONS[mode].to_string(),
            bucket_id: Some(bucket.id),
            class_label: Some(mode),
        });
    }
    let path = dir.join("manifest.jsonl");
    DatasetManifest::new(records)
        .save(&path)
        .map_err(|e| PipelineError::Data(e.to_string()))?;
    Ok(path)
}
