use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vitprune_core::checkpoint::param_hash;
use vitprune_core::data::{synth_split, Dataset};
use vitprune_core::evalkit::evaluate;
use vitprune_core::game::{argmax, RewardConfig};
use vitprune_core::pruning::{actor_logits, ActMode, PolicyMode, PolicyNets, PolicyPruner};
use vitprune_core::rl_train::{finetune_step, Phase, TrainConfig, Trainer};
use vitprune_core::vit::{NoPruning, ViT, ViTConfig};
use vitprune_core::{AdamState, Tensor};

fn small() -> ViTConfig {
    ViTConfig {
        embed_dim: 16,
        num_heads: 2,
        depth: 3,
        prune_after: vec![1, 2],
        ..ViTConfig::desk()
    }
}

fn data() -> (Dataset, Dataset) {
    synth_split(3, 96, 48, 16, 4).unwrap()
}

fn small_train(policy_mode: PolicyMode, finetune_enabled: bool) -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 32,
        k: 3,
        actor_lr: 1e-3,
        critic_lr: 1e-3,
        vit_lr: 1e-3,
        policy_mode,
        finetune_enabled,
        seed: 5,
        ..Default::default()
    }
}

fn trainer(mode: PolicyMode, finetune: bool) -> Trainer<f32> {
    let model = ViT::<f32>::new(small(), 1).unwrap();
    Trainer::new(
        model,
        PolicyNets::new(16, 2),
        small_train(mode, finetune),
        RewardConfig::default(),
    )
    .unwrap()
}

fn hashes(t: &Trainer<f32>) -> [String; 3] {
    [
        param_hash(&t.model.params),
        param_hash(&t.nets.actor.mlp.params),
        param_hash(&t.nets.critic.mlp.params),
    ]
}

#[test]
fn epochs_alternate_between_policy_and_vit() {
    let (train, test) = data();
    let mut t = trainer(PolicyMode::Mappo, true);
    let h0 = hashes(&t);
    let m1 = t.run_epoch(1, &train, &test).unwrap();
    let h1 = hashes(&t);
    assert_eq!(m1.phase, Phase::Rl);
    assert_eq!(h1[0], h0[0], "RL epoch touched the ViT");
    assert_ne!(h1[1], h0[1]);
    assert_ne!(h1[2], h0[2]);
    let m2 = t.run_epoch(2, &train, &test).unwrap();
    let h2 = hashes(&t);
    assert_eq!(m2.phase, Phase::Finetune);
    assert_ne!(h2[0], h1[0]);
    assert_eq!(h2[1..], h1[1..], "fine-tuning touched the policy");
    assert!(m2.l_theta.is_none() && m2.mean_reward.is_none());
}

#[test]
fn without_finetuning_the_vit_stays_frozen() {
    let (train, test) = data();
    let mut t = trainer(PolicyMode::SingleAgent, false);
    let vit = param_hash(&t.model.params);
    let history = t.train_loop(&train, &test, |_, _| Ok(())).unwrap();
    assert!(history.iter().all(|m| m.phase == Phase::Rl && m.l_phi.is_some()));
    assert_eq!(param_hash(&t.model.params), vit);
}

#[test]
fn random_policy_training_only_fine_tunes() {
    let (train, test) = data();
    let mut t = trainer(PolicyMode::Random { keep_prob: 0.5 }, true);
    let h0 = hashes(&t);
    let m1 = t.run_epoch(1, &train, &test).unwrap();
    assert!(m1.l_theta.is_none());
    assert_eq!(hashes(&t), h0);
}

#[test]
fn training_is_deterministic() {
    let (train, test) = data();
    let run = || {
        let mut t = trainer(PolicyMode::Mappo, true);
        let history = t.train_loop(&train, &test, |_, _| Ok(())).unwrap();
        (history, hashes(&t))
    };
    assert_eq!(run(), run());
}

#[test]
fn evaluation_is_deterministic_and_keep_all_matches_plain_inference() {
    let (_, test) = data();
    let model = ViT::<f32>::new(small(), 4).unwrap();
    let nets = PolicyNets::new(16, 4);
    let a = evaluate(&model, &nets, &test, PolicyMode::Mappo, 9, 10).unwrap();
    let b = evaluate(&model, &nets, &test, PolicyMode::Mappo, 9, 10).unwrap();
    assert_eq!(a, b);

    let keep_all = evaluate(&model, &nets, &test, PolicyMode::Random { keep_prob: 1.0 }, 9, 16).unwrap();
    assert_eq!(keep_all.retention, vec![1.0, 1.0]);
    let indices: Vec<usize> = (0..test.len()).collect();
    let (images, labels) = test.batch::<f32>(&indices);
    let (logits, _) = model.infer(&images, &mut NoPruning, false).unwrap();
    let c = model.config.num_classes;
    let correct = labels
        .iter()
        .enumerate()
        .filter(|(b, l)| argmax(&logits.values[b * c..(b + 1) * c]) == **l)
        .count();
    assert_eq!(keep_all.top1, correct as f64 / test.len() as f64);
}

#[test]
fn fine_tuning_overfits_a_fixed_batch() {
    let (train, _) = data();
    let mut model = ViT::<f32>::new(small(), 6).unwrap();
    let nets = PolicyNets::new(16, 6);
    let (images, labels) = train.batch::<f32>(&(0..8).collect::<Vec<_>>());
    let mut opt = AdamState::new(&model.params, 3e-3);
    let mut losses = Vec::new();
    for step in 0..50 {
        let rng = ChaCha8Rng::seed_from_u64(step);
        losses.push(
            finetune_step(
                &mut model,
                &nets,
                PolicyMode::Mappo,
                &images,
                &labels,
                &mut opt,
                10.0,
                rng,
            )
            .unwrap(),
        );
    }
    assert!(losses[49] < 0.5 * losses[0], "{losses:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn masks_shrink_layer_by_layer(seed in any::<u64>(), batch in 1usize..5, mode_pick in 0u8..3, keep in 0.0f64..1.0) {
        let model = ViT::<f64>::new(small(), seed).unwrap();
        let nets = PolicyNets::new(16, seed ^ 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let images = Tensor::new(&[batch, 1, 16, 16], (0..batch * 256).map(|_| rng.random::<f64>()).collect()).unwrap();
        let mode = match mode_pick {
            0 => PolicyMode::Mappo,
            1 => PolicyMode::SingleAgent,
            _ => PolicyMode::Random { keep_prob: keep },
        };
        let mut pruner = PolicyPruner::new(&nets, mode, ActMode::Train, ChaCha8Rng::seed_from_u64(seed));
        let (_, masks) = model.infer(&images, &mut pruner, false).unwrap();
        prop_assert_eq!(masks.len(), 2);
        prop_assert!(masks[1].is_subset_of(&masks[0]));
        for b in 0..batch {
            prop_assert!(masks[0].get(b, 0) && masks[1].get(b, 0));
        }
    }

    #[test]
    fn actor_is_permutation_equivariant(seed in any::<u64>(), n in 1usize..12) {
        let nets = PolicyNets::<f64>::new(16, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..16).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let tensor = |order: &[usize]| Tensor::new(&[n, 16], order.iter().flat_map(|&i| rows[i].clone()).collect()).unwrap();
        let identity: Vec<usize> = (0..n).collect();
        let base = actor_logits(&nets.actor, &tensor(&identity)).unwrap();
        let permuted = actor_logits(&nets.actor, &tensor(&perm)).unwrap();
        for (i, &src) in perm.iter().enumerate() {
            for a in 0..2 {
                prop_assert!((permuted.values[i * 2 + a] - base.values[src * 2 + a]).abs() < 1e-12);
            }
        }
    }
}
