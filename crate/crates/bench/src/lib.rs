//! Shared fixtures for the criterion benchmarks.

use vitprune_core::data::synth_blobs;
use vitprune_core::game::RewardConfig;
use vitprune_core::pruning::{PolicyMode, PolicyNets};
use vitprune_core::rl_train::{collect_trajectories, TrainConfig, UpdateBatch};
use vitprune_core::rng::{substream, Stream};
use vitprune_core::vit::{ViT, ViTConfig};
use vitprune_core::Tensor;

/// A random-weight model and one random image for `cfg`.
pub fn model_and_image(cfg: &ViTConfig, seed: u64) -> (ViT<f32>, Tensor<f32>) {
    let model = ViT::<f32>::new(cfg.clone(), seed).expect("valid config");
    let s = cfg.image_size;
    let image = Tensor::<f32>::randn(&[1, cfg.channels, s, s], 1.0, &mut substream(seed, Stream::DataGen, 0));
    (model, image)
}

/// Policy nets and one mini-batch of MAPPO trajectories from the desk model.
pub fn desk_update_batch(batch: usize, seed: u64) -> (PolicyNets<f32>, UpdateBatch<f32>, TrainConfig) {
    let cfg = ViTConfig::desk();
    let model = ViT::<f32>::new(cfg.clone(), seed).expect("valid config");
    let nets = PolicyNets::new(cfg.embed_dim, seed);
    let data = synth_blobs(seed, batch, cfg.image_size, cfg.num_classes).expect("synthetic data");
    let ids: Vec<usize> = (0..batch).collect();
    let (images, labels) = data.batch::<f32>(&ids);
    let train = TrainConfig {
        policy_mode: PolicyMode::Mappo,
        ..Default::default()
    };
    let rng = substream(seed, Stream::Actions, 0);
    let trajectories = collect_trajectories(
        &model,
        &nets,
        &images,
        &labels,
        &ids,
        &train,
        &RewardConfig::default(),
        rng,
    )
    .expect("collection succeeds");
    let update = UpdateBatch::from_trajectories(&trajectories, cfg.embed_dim, true);
    (nets, update, train)
}
