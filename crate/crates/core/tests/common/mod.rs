//! Synthetic datasets shared by the integration tests.
#![allow(dead_code)]

use std::path::Path;

use semidet::annotations::{Dataset, DatasetKind};
use semidet::synthetic::{derive_seed, generate_dataset, WorldConfig};

pub struct Desk {
    pub labeled: Dataset,
    /// Unlabeled images (annotations stripped).
    pub unlabeled: Dataset,
    /// The same images with their hidden ground truth.
    pub unlabeled_truth: Dataset,
    pub val: Dataset,
}

/// Three disjoint synthetic sets drawn from `world` under `dir`.
pub fn desk(world: &WorldConfig, dir: &Path, seed: u64, sizes: (usize, usize, usize)) -> Desk {
    let make = |n: usize, stream: u64, name: &str| {
        if n == 0 {
            Dataset::new(DatasetKind::Labeled, world.catalog().unwrap()).with_root(dir.join(name))
        } else {
            generate_dataset(world, n, derive_seed(seed, stream), &dir.join(name)).unwrap()
        }
    };
    let labeled = make(sizes.0, 1, "labeled");
    let unlabeled_truth = make(sizes.1, 2, "unlabeled");
    let val = make(sizes.2, 3, "val");
    Desk { labeled, unlabeled: unlabeled_truth.strip_annotations(DatasetKind::Labeled), unlabeled_truth, val }
}

pub fn small_world() -> WorldConfig {
    WorldConfig { width: 48, height: 48, ..Default::default() }
}

/// Flat field, no clutter, no game drift, well separated colors.
pub fn separable_world() -> WorldConfig {
    let mut w = WorldConfig {
        width: 64,
        height: 64,
        texture_amplitude: 0.0,
        object_noise: 0.0,
        occlusion_allowance: 0.0,
        clutter_rate: 0.0,
        game_variation: 0.0,
        ..Default::default()
    };
    for c in &mut w.classes {
        c.frequency = 1.5;
        c.color_jitter = 0.0;
        c.width = (c.width.1, c.width.1);
        c.height = (c.height.1, c.height.1);
    }
    w
}

/// Short training so that pipeline plumbing tests stay fast.
pub fn quick_config(seed: u64) -> semidet::pipeline::PipelineConfig {
    let mut cfg = semidet::pipeline::PipelineConfig { seed, ..Default::default() };
    cfg.train.max_epochs = 4;
    cfg
}
