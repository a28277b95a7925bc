//! Small synthetic scenes and the settings used to train on them.

use crate::hsi::{generate_synthetic_cube, DatasetDescriptor, SyntheticSpec};
use crate::models::Variant;
use crate::sampler::{SamplerConfig, ViewMode};
use crate::train::{AdamConfig, Experiment, ModelSettings, PreparedData, TrainConfig};
use crate::Result;

/// 16×16×10 block scene with three classes.
pub fn block_scene() -> Result<PreparedData> {
    let (cube, labels) = generate_synthetic_cube(16, 16, 10, 3, 1)?;
    PreparedData::prepare(&cube, &labels, DatasetDescriptor::unnamed("blocks", 3))
}

/// Noisy blocks crossed by one-pixel stripes, so most pixels sit near a class boundary.
pub fn striped_scene() -> Result<PreparedData> {
    let (cube, labels) = SyntheticSpec::striped(16, 16, 10, 3).generate(1)?;
    PreparedData::prepare(&cube, &labels, DatasetDescriptor::unnamed("striped", 3))
}

fn fixture_experiment(
    variant: Variant,
    views: ViewMode,
    branch_channels: usize,
    epochs: usize,
    per_class: usize,
) -> Experiment {
    let mut sampler = SamplerConfig::new(5);
    sampler.views = views;
    Experiment {
        model: ModelSettings {
            variant,
            p: 3,
            q: 3,
            r: 3,
            branch_channels,
        },
        sampler,
        samples_per_class: per_class,
        train: TrainConfig {
            epochs,
            batch_size: 16,
            adam: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            early_stop: None,
        },
        eval_batch: 256,
        threads: 1,
    }
}

/// 30 samples per class, 200 epochs.
pub fn block_experiment(variant: Variant) -> Experiment {
    fixture_experiment(variant, ViewMode::Nine, 32, 200, 30)
}

/// TPO-CNN1 on the striped scene, 50 samples per class, 100 epochs.
pub fn striped_experiment(views: ViewMode) -> Experiment {
    fixture_experiment(Variant::TpoCnn1, views, 16, 100, 50)
}
