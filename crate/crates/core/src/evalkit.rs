//! Accuracy, retention, FLOPs, throughput, reward-weight sweeps and mask images.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::game::{argmax, RewardConfig};
use crate::numerics::{Scalar, Tensor};
use crate::pruning::{ActMode, PolicyMode, PolicyNets, PolicyPruner, PRESERVE, PRUNE};
use crate::rl_train::{train_loop, TrainConfig};
use crate::rng::{substream, Stream};
use crate::vit::{NoPruning, PruneHook, StageState, ViT, ViTConfig};

/// Multiply-accumulates of one forward pass, counting one MAC as one FLOP.
///
/// `stage_tokens[i]` is the token count (class token included) after pruning
/// layer `i`; blocks before the first pruning layer see every token.
pub fn flops_count(cfg: &ViTConfig, stage_tokens: &[usize]) -> u64 {
    assert_eq!(
        stage_tokens.len(),
        cfg.num_stages(),
        "one token count per pruning layer"
    );
    let d = cfg.embed_dim as u64;
    let f = cfg.ffn_mult as u64;
    let mut n = cfg.num_tokens() as u64;
    let mut total = cfg.num_patches() as u64 * cfg.patch_dim() as u64 * d;
    for block in 1..=cfg.depth {
        total += 4 * n * d * d + 2 * n * n * d + 2 * f * n * d * d;
        if let Some(stage) = cfg.prune_after.iter().position(|b| *b == block) {
            n = stage_tokens[stage] as u64;
        }
    }
    total + d * cfg.num_classes as u64
}

pub fn flops_estimate(cfg: &ViTConfig, stage_tokens: &[usize]) -> f64 {
    flops_count(cfg, stage_tokens) as f64 / 1e9
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub top1: f64,
    /// Mean kept fraction of non-class tokens after each pruning layer.
    pub retention: Vec<f64>,
    /// Dataset mean of per-image estimates.
    pub gflops: f64,
    /// Absent unless measured; evaluation itself is timing-free.
    pub images_per_second: Option<f64>,
    pub policy_mode: String,
    pub alpha_over_beta: Option<f64>,
}

impl EvalReport {
    /// Mean of the per-layer retentions.
    pub fn mean_retention(&self) -> f64 {
        if self.retention.is_empty() {
            1.0
        } else {
            self.retention.iter().sum::<f64>() / self.retention.len() as f64
        }
    }
}

/// Deterministic pass over `dataset` with argmax actions (random policies use
/// a fixed substream of `seed`).
pub fn evaluate<F: Scalar>(
    model: &ViT<F>,
    nets: &PolicyNets<F>,
    dataset: &Dataset,
    mode: PolicyMode,
    seed: u64,
    batch_size: usize,
) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let cfg = &model.config;
    let stages = cfg.num_stages();
    let patches = cfg.num_patches() as f64;
    let classes = cfg.num_classes;
    let mut correct = 0usize;
    let mut retention = vec![0.0; stages];
    let mut flops = 0.0;
    let indices: Vec<usize> = (0..dataset.len()).collect();
    for (ci, chunk) in indices.chunks(batch_size.max(1)).enumerate() {
        let (images, labels) = dataset.batch::<F>(chunk);
        let rng = substream(seed, Stream::Masks, ci as u64);
        let mut pruner = PolicyPruner::new(nets, mode, ActMode::Eval, rng);
        let (logits, masks) = model.infer(&images, &mut pruner, false)?;
        for (b, label) in labels.iter().enumerate() {
            correct += usize::from(argmax(&logits.values[b * classes..(b + 1) * classes]) == *label);
            let kept: Vec<usize> = masks.iter().map(|m| m.kept_non_class(b)).collect();
            for (r, k) in retention.iter_mut().zip(&kept) {
                *r += *k as f64 / patches;
            }
            let tokens: Vec<usize> = kept.iter().map(|k| k + 1).collect();
            flops += flops_estimate(cfg, &tokens);
        }
    }
    let m = dataset.len() as f64;
    Ok(EvalReport {
        top1: correct as f64 / m,
        retention: retention.into_iter().map(|r| r / m).collect(),
        gflops: flops / m,
        images_per_second: None,
        policy_mode: mode.label(),
        alpha_over_beta: None,
    })
}

/// Keeps a fixed token subset at the first pruning layer and everything after.
#[derive(Debug, Clone)]
pub struct FixedMask {
    keep: Vec<bool>,
}

impl FixedMask {
    /// Keeps `round(retention * N)` patch tokens chosen uniformly at random.
    pub fn draw(cfg: &ViTConfig, retention: f64, seed: u64) -> Self {
        let n = cfg.num_patches();
        let k = ((retention.clamp(0.0, 1.0) * n as f64).round() as usize).min(n);
        let mut keep = vec![false; n + 1];
        keep[0] = true;
        for i in sample(&mut substream(seed, Stream::Masks, 0), n, k) {
            keep[i + 1] = true;
        }
        Self { keep }
    }

    pub fn kept(&self) -> usize {
        self.keep.iter().skip(1).filter(|k| **k).count()
    }
}

impl<F: Scalar> PruneHook<F> for FixedMask {
    fn decide(&mut self, state: &StageState<'_, F>) -> Result<Vec<Vec<u8>>> {
        Ok((0..state.batch)
            .map(|b| {
                state
                    .active_tokens(b)
                    .iter()
                    .map(|&t| {
                        if state.stage > 0 || self.keep[t] {
                            PRESERVE
                        } else {
                            PRUNE
                        }
                    })
                    .collect()
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputRow {
    /// `None` for the unpruned baseline.
    pub retention: Option<f64>,
    pub tokens_after_first_prune: usize,
    pub images_per_second: f64,
    /// Executed matrix-product MACs per image.
    pub macs: u64,
    pub gflops_estimate: f64,
}

impl ThroughputRow {
    pub fn speedup_over(&self, base: &ThroughputRow) -> f64 {
        self.images_per_second / base.images_per_second
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn time_trials(trials: usize, warmup: usize, mut run: impl FnMut() -> Result<()>) -> Result<f64> {
    for _ in 0..warmup {
        run()?;
    }
    let mut rates = Vec::with_capacity(trials);
    for _ in 0..trials {
        let t = Instant::now();
        run()?;
        rates.push(1.0 / t.elapsed().as_secs_f64().max(1e-12));
    }
    Ok(median(rates))
}

/// Median single-image images/s for the unpruned model and for compacted
/// execution at each retention target, with random 32-bit weights.
pub fn benchmark_throughput(
    cfg: &ViTConfig,
    retention_targets: &[f64],
    trials: usize,
    warmup: usize,
    seed: u64,
) -> Result<Vec<ThroughputRow>> {
    cfg.validate()?;
    if cfg.prune_after.is_empty() && !retention_targets.is_empty() {
        return Err(Error::Config(
            "retention targets need at least one pruning layer".into(),
        ));
    }
    let model = ViT::<f32>::new(cfg.clone(), seed)?;
    let s = cfg.image_size;
    let mut rng = substream(seed, Stream::DataGen, 0);
    let image = Tensor::<f32>::randn(&[1, cfg.channels, s, s], 1.0, &mut rng);
    let stage_full = vec![cfg.num_tokens(); cfg.num_stages()];

    let mut rows = Vec::with_capacity(1 + retention_targets.len());
    let (_, macs) = model.infer_counting(&image, &mut NoPruning, true)?;
    let ips = time_trials(trials, warmup, || model.infer(&image, &mut NoPruning, true).map(|_| ()))?;
    rows.push(ThroughputRow {
        retention: None,
        tokens_after_first_prune: cfg.num_tokens(),
        images_per_second: ips,
        macs,
        gflops_estimate: flops_estimate(cfg, &stage_full),
    });
    for &r in retention_targets {
        let mut hook = FixedMask::draw(cfg, r, seed);
        let tokens = hook.kept() + 1;
        let (_, macs) = model.infer_counting(&image, &mut hook, true)?;
        let ips = time_trials(trials, warmup, || model.infer(&image, &mut hook, true).map(|_| ()))?;
        rows.push(ThroughputRow {
            retention: Some(r),
            tokens_after_first_prune: tokens,
            images_per_second: ips,
            macs,
            gflops_estimate: flops_estimate(cfg, &vec![tokens; cfg.num_stages()]),
        });
    }
    Ok(rows)
}

pub fn write_throughput_table<W: Write>(rows: &[ThroughputRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "retention,tokens,images_per_second,speedup,gflops")?;
    let base = &rows[0];
    for r in rows {
        writeln!(
            out,
            "{},{},{:.2},{:.3},{:.4}",
            r.retention.map(|v| v.to_string()).unwrap_or_else(|| "none".into()),
            r.tokens_after_first_prune,
            r.images_per_second,
            r.speedup_over(base),
            r.gflops_estimate
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub ratio: f64,
    pub retention: Vec<f64>,
    pub gflops: f64,
    pub top1: f64,
}

/// Trains a fresh policy per `alpha / beta` ratio from the same starting
/// model and seed, then evaluates it. `beta` stays fixed.
pub fn sweep_alpha_beta<F: Scalar>(
    ratios: &[f64],
    beta: f64,
    pretrained: &ViT<F>,
    train: &Dataset,
    eval: &Dataset,
    cfg: &TrainConfig,
    reward: &RewardConfig,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(ratios.len());
    for &ratio in ratios {
        let reward = RewardConfig {
            alpha: ratio * beta,
            beta,
            ..*reward
        };
        let nets = PolicyNets::<F>::new(pretrained.config.embed_dim, cfg.seed);
        let (trainer, _) = train_loop(train, eval, pretrained.clone(), nets, cfg, &reward)?;
        let report = evaluate(
            &trainer.model,
            &trainer.nets,
            eval,
            cfg.policy_mode,
            cfg.seed,
            cfg.batch_size,
        )?;
        rows.push(SweepRow {
            ratio,
            retention: report.retention,
            gflops: report.gflops,
            top1: report.top1,
        });
    }
    Ok(rows)
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], num_stages: usize, mut out: W) -> std::io::Result<()> {
    let mut header = vec!["ratio".to_string()];
    header.extend((1..=num_stages).map(|i| format!("retention_l{i}")));
    header.extend(["gflops".into(), "top1".into()]);
    writeln!(out, "{}", header.join(","))?;
    for r in rows {
        let mut cells = vec![r.ratio.to_string()];
        cells.extend(r.retention.iter().map(|v| format!("{v:.6}")));
        cells.push(format!("{:.6}", r.gflops));
        cells.push(format!("{:.6}", r.top1));
        writeln!(out, "{}", cells.join(","))?;
    }
    Ok(())
}

/// Grayscale bytes of a `[C, H, W]` image in `[0, 1]` (channel mean), with
/// every pruned patch painted white. `keep` covers the class token at 0.
pub fn render_mask(image: &[f32], channels: usize, size: usize, keep: &[bool], patch: usize) -> Result<Vec<u8>> {
    if image.len() != channels * size * size || !size.is_multiple_of(patch) {
        return Err(Error::Shape(format!(
            "{} values for a {channels}x{size}x{size} image with patch {patch}",
            image.len()
        )));
    }
    let grid = size / patch;
    if keep.len() != grid * grid + 1 {
        return Err(Error::Shape(format!(
            "{} keep flags for {} patches",
            keep.len(),
            grid * grid
        )));
    }
    let plane = size * size;
    let mut out = Vec::with_capacity(plane);
    for y in 0..size {
        for x in 0..size {
            let token = 1 + (y / patch) * grid + x / patch;
            if keep[token] {
                let v = (0..channels).map(|c| image[c * plane + y * size + x]).sum::<f32>() / channels as f32;
                out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            } else {
                out.push(255);
            }
        }
    }
    Ok(out)
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(pixels);
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// One PGM per pruning layer, named `{stem}_l{i}.pgm` in `out_dir`.
pub fn visualize_masks(
    image: &[f32],
    channels: usize,
    size: usize,
    layer_masks: &[Vec<bool>],
    patch: usize,
    out_dir: &Path,
    stem: &str,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut paths = Vec::with_capacity(layer_masks.len());
    for (i, keep) in layer_masks.iter().enumerate() {
        let pixels = render_mask(image, channels, size, keep, patch)?;
        let path = out_dir.join(format!("{stem}_l{}.pgm", i + 1));
        write_pgm(&path, size, size, &pixels)?;
        paths.push(path);
    }
    Ok(paths)
}
