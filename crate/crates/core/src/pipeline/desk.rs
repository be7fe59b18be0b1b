use std::path::Path;

use crate::dataops::{make_buckets, Bucket};
use crate::model::{ModelConfig, Variant};

use super::{
    synth_dataset, InitFrom, PlanConfig, Result, StageConfig, StageName, SynthSpec, PREVIOUS,
};

/// Knobs of the small three-stage plan used for smoke runs.
#[derive(Clone, Debug)]
pub struct DeskPlan {
    pub run_id: String,
    pub seed: u64,
    pub steps: [usize; 3],
    pub batch_size: usize,
    pub lr: f64,
    pub samples: usize,
    /// Pixel side of the square stages; the multi-aspect stage keeps its area.
    pub resolution: usize,
    pub checkpoint_every: usize,
}

impl Default for DeskPlan {
    fn default() -> Self {
        Self {
            run_id: "desk".into(),
            seed: 0,
            steps: [60, 60, 30],
            batch_size: 4,
            lr: 1e-3,
            samples: 64,
            resolution: 64,
            checkpoint_every: 0,
        }
    }
}

impl DeskPlan {
    /// Write a square and a multi-aspect synthetic set under `dir/data` and
    /// return the plan: class-conditional pretraining, surgery into the
    /// text-conditioned model, then multi-aspect fine-tuning.
    pub fn build(&self, dir: &Path) -> Result<PlanConfig> {
        let mut plan = PlanConfig {
            run_id: self.run_id.clone(),
            seed: self.seed,
            out_dir: dir.join("runs"),
            checkpoint_every: self.checkpoint_every,
            ..PlanConfig::default()
        };
        let model = ModelConfig::desk(Variant::T2iAdalnSingle);
        plan.model = model.clone();
        let spec = |buckets: Vec<Bucket>| SynthSpec {
            samples: self.samples,
            latent_channels: model.latent_channels,
            buckets,
            downsample: plan.codec_downsample,
            noise: 0.05,
            seed: self.seed,
        };
        let square = vec![Bucket {
            id: 0,
            height: self.resolution,
            width: self.resolution,
        }];
        let quantum = model.patch_size * plan.codec_downsample;
        let multi = make_buckets(self.resolution * self.resolution, 3, 0.5, 2.0, quantum)?;
        let square_manifest = synth_dataset(&dir.join("data/square"), &spec(square))?;
        let multi_manifest = synth_dataset(&dir.join("data/multi"), &spec(multi))?;

        let stage = |name, variant, steps, manifest: &Path, init_from| StageConfig {
            name,
            variant,
            resolution: self.resolution,
            steps,
            batch_size: self.batch_size,
            lr: self.lr,
            weight_decay: 0.03,
            grad_clip: 1.0,
            multi_aspect: false,
            bucket_count: 3,
            bucket_ratio_min: 0.5,
            bucket_ratio_max: 2.0,
            manifest_path: manifest.to_path_buf(),
            init_from,
            overfit: false,
            label: None,
        };
        plan.stages = vec![
            stage(
                StageName::PixelDependency,
                Variant::DitClassConditional,
                self.steps[0],
                &square_manifest,
                InitFrom::Scratch,
            ),
            stage(
                StageName::TextImageAlign,
                Variant::T2iAdalnSingle,
                self.steps[1],
                &square_manifest,
                InitFrom::Reparam(PREVIOUS.into()),
            ),
            StageConfig {
                multi_aspect: true,
                ..stage(
                    StageName::HighAesthetics,
                    Variant::T2iAdalnSingle,
                    self.steps[2],
                    &multi_manifest,
                    InitFrom::Checkpoint(PREVIOUS.into()),
                )
            },
        ];
        plan.validate()?;
        Ok(plan)
    }
}
