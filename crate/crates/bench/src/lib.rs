//! Fixtures shared by the benchmarks.

use nextvlad::data::{gen_synthetic, make_batch};
use nextvlad::metrics::PredictionSet;
use nextvlad::params::init_from_shapes;
use nextvlad::vlad::{NeXtVladParams, NetVladParams};
use nextvlad::{Batch, NeXtVladConfig, NetVladConfig, SplitMix64, SyntheticSpec, Tensor};

/// A padded batch of desk-scale synthetic videos.
pub fn desk_batch(batch: usize, max_frames: usize) -> Batch<f32> {
    let spec = SyntheticSpec {
        num_videos: batch,
        ..SyntheticSpec::default()
    };
    let d = gen_synthetic(&spec).expect("default spec is valid");
    make_batch(&d, &(0..batch).collect::<Vec<_>>(), max_frames).expect("indices are in range")
}

pub fn nextvlad_params(cfg: &NeXtVladConfig, seed: u64) -> NeXtVladParams<Tensor<f32>> {
    init_from_shapes(&NeXtVladParams::shapes(cfg), &mut SplitMix64::new(seed))
}

pub fn netvlad_params(cfg: &NetVladConfig, seed: u64) -> NetVladParams<Tensor<f32>> {
    init_from_shapes(&NetVladParams::shapes(cfg), &mut SplitMix64::new(seed))
}

/// Random top-20 predictions over `classes` for `videos` videos.
pub fn random_predictions(videos: usize, classes: usize, seed: u64) -> PredictionSet {
    let mut rng = SplitMix64::new(seed);
    let mut set = PredictionSet::new();
    for _ in 0..videos {
        let mut ids: Vec<usize> = (0..classes).collect();
        rng.shuffle(&mut ids);
        let preds = ids[..20.min(classes)].iter().map(|&c| (c, rng.uniform())).collect();
        let labels: Vec<usize> = ids[..1 + rng.below(3)].to_vec();
        set.push(preds, labels).expect("predictions are distinct and finite");
    }
    set
}
