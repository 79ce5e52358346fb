//! Forward-pass checks for the masked ViT against direct-formula oracles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vitprune_core::numerics::{grad_check, Graph, Tensor};
use vitprune_core::pruning::{ActMode, PolicyMode, PolicyNets, PolicyPruner};
use vitprune_core::vit::{compact_inference, KeepMask, NoPruning, PruneHook, StageState, TokenBatch, ViT, ViTConfig};
use vitprune_core::Result;

fn tiny() -> ViTConfig {
    ViTConfig {
        embed_dim: 8,
        num_heads: 2,
        ..ViTConfig::desk()
    }
}

fn random_model(config: ViTConfig, seed: u64) -> ViT<f64> {
    let mut m = ViT::<f64>::new(config, seed).unwrap();
    // Non-trivial norms and biases so the oracle exercises every term.
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    for t in m.params.tensors_mut() {
        for v in &mut t.values {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    m
}

fn random_images(config: &ViTConfig, batch: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = batch * config.channels * config.image_size * config.image_size;
    Tensor::new(
        &[batch, config.channels, config.image_size, config.image_size],
        (0..n).map(|_| rng.random::<f64>()).collect(),
    )
    .unwrap()
}

fn p<'a>(m: &'a ViT<f64>, name: &str) -> &'a [f64] {
    &m.params.get(m.params.slot(name).unwrap()).values
}

// --- direct-formula oracle -------------------------------------------------

fn ln(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter()
        .enumerate()
        .map(|(j, v)| g[j] * (v - mean) / (var + 1e-6).sqrt() + b[j])
        .collect()
}

fn lin(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let out = b.len();
    (0..out)
        .map(|o| b[o] + x.iter().enumerate().map(|(i, v)| v * w[i * out + o]).sum::<f64>())
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// Pre-norm block on one image; only tokens with `keep[t]` act as keys.
fn oracle_block(m: &ViT<f64>, block: usize, x: &[Vec<f64>], keep: &[bool]) -> Vec<Vec<f64>> {
    let pre = format!("blocks.{block}");
    let q = |s: &str| p(m, &format!("{pre}.{s}"));
    let d = m.config.embed_dim;
    let heads = m.config.num_heads;
    let dh = d / heads;
    let h: Vec<Vec<f64>> = x.iter().map(|r| ln(r, q("norm1.gain"), q("norm1.bias"))).collect();
    let qs: Vec<Vec<f64>> = h.iter().map(|r| lin(r, q("attn.q.weight"), q("attn.q.bias"))).collect();
    let ks: Vec<Vec<f64>> = h.iter().map(|r| lin(r, q("attn.k.weight"), q("attn.k.bias"))).collect();
    let vs: Vec<Vec<f64>> = h.iter().map(|r| lin(r, q("attn.v.weight"), q("attn.v.bias"))).collect();
    let n = x.len();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut ctx = vec![0.0; d];
        for hd in 0..heads {
            let sl = hd * dh..(hd + 1) * dh;
            let scores: Vec<f64> = (0..n)
                .map(|j| {
                    let s: f64 = qs[i][sl.clone()]
                        .iter()
                        .zip(&ks[j][sl.clone()])
                        .map(|(a, b)| a * b)
                        .sum();
                    s / (dh as f64).sqrt()
                })
                .collect();
            let max = (0..n).filter(|j| keep[*j]).map(|j| scores[j]).fold(f64::MIN, f64::max);
            let w: Vec<f64> = (0..n)
                .map(|j| if keep[j] { (scores[j] - max).exp() } else { 0.0 })
                .collect();
            let z: f64 = w.iter().sum();
            for j in 0..n {
                for (c, k) in sl.clone().enumerate() {
                    ctx[hd * dh + c] += w[j] / z * vs[j][k];
                }
            }
        }
        let a = lin(&ctx, q("attn.proj.weight"), q("attn.proj.bias"));
        let x1: Vec<f64> = x[i].iter().zip(&a).map(|(u, v)| u + v).collect();
        let h2 = ln(&x1, q("norm2.gain"), q("norm2.bias"));
        let f1: Vec<f64> = lin(&h2, q("mlp.fc1.weight"), q("mlp.fc1.bias"))
            .into_iter()
            .map(gelu)
            .collect();
        let f2 = lin(&f1, q("mlp.fc2.weight"), q("mlp.fc2.bias"));
        out.push(x1.iter().zip(&f2).map(|(u, v)| u + v).collect());
    }
    out
}

fn rows(tb: &TokenBatch<f64>, b: usize) -> Vec<Vec<f64>> {
    (0..tb.tokens()).map(|t| tb.token(b, t).to_vec()).collect()
}

// --- tests -----------------------------------------------------------------

#[test]
fn patch_embed_token_counts() {
    let m = random_model(tiny(), 1);
    let tb = m.patch_embed(&random_images(&m.config, 2, 0)).unwrap();
    assert_eq!(tb.features.shape, vec![2, 17, 8]);
    assert!(tb.keep_mask.flags().iter().all(|k| *k));

    let cfg = ViTConfig {
        image_size: 32,
        patch_size: 8,
        ..tiny()
    };
    let m = random_model(cfg, 1);
    assert_eq!(m.patch_embed(&random_images(&m.config, 1, 0)).unwrap().tokens(), 17);
    let wrong = random_images(&tiny(), 1, 0);
    assert!(m.patch_embed(&wrong).is_err());
}

#[test]
fn zero_image_and_projection_give_positional_embeddings() {
    let mut m = random_model(tiny(), 2);
    m.param_mut("patch_embed.weight").unwrap().values.fill(0.0);
    m.param_mut("patch_embed.bias").unwrap().values.fill(0.0);
    let images = Tensor::zeros(&[1, 1, 16, 16]);
    let tb = m.patch_embed(&images).unwrap();
    let pos = p(&m, "pos_embed");
    for t in 1..17 {
        assert_eq!(tb.token(0, t), &pos[t * 8..(t + 1) * 8]);
    }
}

#[test]
fn unmasked_block_matches_oracle() {
    for seed in 0..5 {
        let m = random_model(tiny(), seed);
        let tb = m.patch_embed(&random_images(&m.config, 2, seed)).unwrap();
        let out = m.block_forward(1, &tb).unwrap();
        for b in 0..2 {
            let want = oracle_block(&m, 1, &rows(&tb, b), &[true; 17]);
            for (t, row) in want.iter().enumerate() {
                for (a, e) in out.token(b, t).iter().zip(row) {
                    assert!((a - e).abs() < 1e-10, "seed {seed} image {b} token {t}: {a} vs {e}");
                }
            }
        }
    }
}

#[test]
fn masked_block_matches_oracle_and_isolates_pruned_tokens() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for seed in 0..5 {
        let m = random_model(tiny(), seed);
        let mut tb = m.patch_embed(&random_images(&m.config, 1, seed)).unwrap();
        let mut keep = vec![true; 17];
        for flag in keep.iter_mut().skip(1) {
            *flag = rng.random::<f64>() < 0.5;
        }
        tb.keep_mask = KeepMask::from_flags(1, 17, keep.clone()).unwrap();
        let out = m.block_forward(0, &tb).unwrap();
        let want = oracle_block(&m, 0, &rows(&tb, 0), &keep);
        for t in (0..17).filter(|t| keep[*t]) {
            for (a, e) in out.token(0, t).iter().zip(&want[t]) {
                assert!((a - e).abs() < 1e-10);
            }
        }

        let mut noisy = tb.clone();
        for t in (0..17).filter(|t| !keep[*t]) {
            for v in &mut noisy.features.values[t * 8..(t + 1) * 8] {
                *v += rng.random_range(-5.0..5.0);
            }
        }
        let out2 = m.block_forward(0, &noisy).unwrap();
        for t in (0..17).filter(|t| keep[*t]) {
            for (a, b) in out.token(0, t).iter().zip(out2.token(0, t)) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn lone_class_token_attends_to_itself() {
    let m = random_model(tiny(), 3);
    let mut tb = m.patch_embed(&random_images(&m.config, 1, 3)).unwrap();
    let mut keep = vec![false; 17];
    keep[0] = true;
    tb.keep_mask = KeepMask::from_flags(1, 17, keep).unwrap();
    let (_, attn) = m.block_with_attention(0, &tb).unwrap();
    for h in 0..2 {
        assert_eq!(attn.values[h * 17 * 17], 1.0);
    }
}

#[test]
fn classify_head_cases() {
    let mut m = random_model(
        ViTConfig {
            num_classes: 2,
            ..tiny()
        },
        4,
    );
    let tb = m.patch_embed(&random_images(&m.config, 2, 4)).unwrap();
    m.param_mut("head.weight").unwrap().values.fill(0.0);
    m.param_mut("head.bias").unwrap().values.copy_from_slice(&[0.5, -1.0]);
    let logits = m.classify(&tb).unwrap();
    assert_eq!(logits.shape, vec![2, 2]);
    assert_eq!(logits.values, vec![0.5, -1.0, 0.5, -1.0]);

    // Identity-like head reading the first two normalized features.
    let mut w = vec![0.0; 16];
    w[0] = 1.0; // feature 0 -> class 0
    w[3] = 1.0; // feature 1 -> class 1
    m.param_mut("head.weight").unwrap().values.copy_from_slice(&w);
    m.param_mut("head.bias").unwrap().values.fill(0.0);
    let logits = m.classify(&tb).unwrap();
    for b in 0..2 {
        let normed = ln(tb.token(b, 0), p(&m, "norm.gain"), p(&m, "norm.bias"));
        assert!((logits.values[2 * b] - normed[0]).abs() < 1e-12);
        assert!((logits.values[2 * b + 1] - normed[1]).abs() < 1e-12);
    }
}

struct CountingHook(usize);

impl PruneHook<f64> for CountingHook {
    fn decide(&mut self, state: &StageState<'_, f64>) -> Result<Vec<Vec<u8>>> {
        self.0 += 1;
        Ok(state.active_rows.iter().map(|r| vec![1; r.len()]).collect())
    }
}

#[test]
fn pruning_layers_follow_config() {
    let images = random_images(&tiny(), 2, 5);
    let plain = random_model(
        ViTConfig {
            prune_after: vec![],
            ..tiny()
        },
        5,
    );
    let mut hook = CountingHook(0);
    let (_, masks) = plain.infer(&images, &mut hook, false).unwrap();
    assert_eq!((hook.0, masks.len()), (0, 0));

    let nets = PolicyNets::<f64>::new(8, 0);
    let m = random_model(tiny(), 5);
    let mut pruner = PolicyPruner::new(&nets, PolicyMode::Mappo, ActMode::Train, ChaCha8Rng::seed_from_u64(0))
        .recording(&[10, 11], 2);
    let (_, masks) = m.infer(&images, &mut pruner, false).unwrap();
    assert_eq!(masks.len(), 2);
    for t in &pruner.trajectories {
        assert_eq!(t.layers.len(), 2);
        assert_eq!(t.layers[0].len(), 16);
    }
    // Agents at the second layer are exactly the tokens preserved at the first.
    for (b, t) in pruner.trajectories.iter().enumerate() {
        let kept: Vec<usize> = masks[0].active(b);
        assert_eq!(t.layers[1].iter().map(|s| s.token).collect::<Vec<_>>(), kept);
        assert!(masks[1].is_subset_of(&masks[0]));
        assert!(masks.iter().all(|mk| mk.get(b, 0)));
    }
}

#[test]
fn preserve_all_policy_equals_plain_forward() {
    let m = random_model(tiny(), 6);
    let plain = ViT::from_params(
        ViTConfig {
            prune_after: vec![],
            ..tiny()
        },
        m.params.clone(),
    )
    .unwrap();
    let images = random_images(&tiny(), 3, 6);
    let nets = PolicyNets::<f64>::new(8, 0);
    let mut keep_all = PolicyPruner::new(
        &nets,
        PolicyMode::Random { keep_prob: 1.0 },
        ActMode::Eval,
        ChaCha8Rng::seed_from_u64(0),
    );
    let (a, masks) = m.infer(&images, &mut keep_all, false).unwrap();
    let (b, _) = plain.infer(&images, &mut NoPruning, false).unwrap();
    assert!(masks.iter().all(|mk| mk.flags().iter().all(|k| *k)));
    for (x, y) in a.values.iter().zip(&b.values) {
        assert!((x - y).abs() < 1e-10);
    }
}

#[test]
fn compacted_execution_matches_masked_f32() {
    let cfg = tiny();
    let m32 = ViT::<f32>::from_params(cfg.clone(), random_model(cfg.clone(), 7).params.cast()).unwrap();
    let nets = PolicyNets::<f32>::new(8, 0);
    let images = random_images(&cfg, 4, 7).cast::<f32>();
    for i in 0..4 {
        let img = Tensor::new(&[1, 1, 16, 16], images.values[i * 256..(i + 1) * 256].to_vec()).unwrap();
        let mk = |s| {
            PolicyPruner::new(
                &nets,
                PolicyMode::Random { keep_prob: 0.5 },
                ActMode::Eval,
                ChaCha8Rng::seed_from_u64(s),
            )
        };
        let (masked, ma) = m32.infer(&img, &mut mk(i as u64), false).unwrap();
        let (compact, mb) = m32.infer(&img, &mut mk(i as u64), true).unwrap();
        assert_eq!(ma, mb);
        for (x, y) in masked.values.iter().zip(&compact.values) {
            assert!((x - y).abs() < 1e-5, "{x} vs {y}");
        }
    }
}

#[test]
fn compact_inference_on_block_outputs() {
    let m = random_model(tiny(), 8);
    let mut tb = m.patch_embed(&random_images(&m.config, 1, 8)).unwrap();
    let mut keep = vec![true; 17];
    for t in [2, 5, 6, 11, 12, 13, 14, 16] {
        keep[t] = false;
    }
    tb.keep_mask = KeepMask::from_flags(1, 17, keep).unwrap();
    let masked = m.block_forward(0, &tb).unwrap();
    let compact = m.block_forward(0, &compact_inference(&tb).unwrap()).unwrap();
    let masked_c = compact_inference(&masked).unwrap();
    assert_eq!(compact.tokens(), 9);
    for (a, b) in masked_c.features.values.iter().zip(&compact.features.values) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn full_model_loss_gradient_check() {
    let cfg = tiny();
    let base = random_model(cfg.clone(), 9);
    let images = random_images(&cfg, 2, 9);
    let labels = [1usize, 3];
    let mut keep = vec![true; 2 * 17];
    for t in [3, 7, 8, 20, 30] {
        keep[t] = false;
    }
    let mask = KeepMask::from_flags(2, 17, keep).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let all: Vec<(usize, usize)> = base
        .params
        .tensors()
        .iter()
        .enumerate()
        .flat_map(|(s, t)| (0..t.numel()).map(move |i| (s, i)))
        .collect();
    for _instance in 0..10 {
        let picks: Vec<(usize, usize)> = (0..12).map(|_| all[rng.random_range(0..all.len())]).collect();
        let point: Vec<f64> = picks.iter().map(|(s, i)| base.params.get(*s).values[*i]).collect();
        let f = |x: &[f64]| {
            let mut m = base.clone();
            for ((s, i), v) in picks.iter().zip(x) {
                m.params.get_mut(*s).values[*i] = *v;
            }
            let mut g = Graph::new();
            let vars = m.bind(&mut g, true);
            let mut h = m.embed_graph(&mut g, &vars, &images).unwrap();
            for blk in 0..cfg.depth {
                h = m
                    .block_graph(&mut g, &vars, blk, h, 2, 17, &mask.additive(cfg.num_heads))
                    .unwrap();
            }
            let logits = m.head_graph(&mut g, &vars, h, 2, 17);
            let loss = g.cross_entropy(logits, &labels);
            let grads = g.backward(loss);
            // Duplicated picks accumulate once per occurrence.
            let grad: Vec<f64> = picks.iter().map(|(s, i)| grads.wrt(vars[*s]).unwrap()[*i]).collect();
            (g.value(loss)[0], grad)
        };
        let err = grad_check(f, &point);
        assert!(err < 1e-4, "{err:e}");
    }
}
