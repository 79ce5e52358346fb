use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use vitprune_core::checkpoint::Checkpoint;
use vitprune_core::evalkit::{
    benchmark_throughput, evaluate, sweep_alpha_beta, visualize_masks, write_sweep_csv, write_throughput_table,
    EvalReport,
};
use vitprune_core::game::argmax;
use vitprune_core::pruning::{ActMode, PolicyMode, PolicyNets, PolicyPruner};
use vitprune_core::rl_train::{pretrain_with, write_metrics_csv, EpochMetrics, Trainer};
use vitprune_core::rng::{substream, Stream};
use vitprune_core::vit::ViT;

use crate::config::RunConfig;
use crate::CliError;

type Result<T> = std::result::Result<T, CliError>;

fn runtime(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| runtime(path, e))
}

/// Creates the run directory and writes the resolved configuration.
fn prepare(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.output.dir.clone();
    fs::create_dir_all(&dir).map_err(|e| runtime(&dir, e))?;
    let snapshot = serde_json::to_string_pretty(cfg).expect("config serializes");
    write_file(&dir.join("config.json"), format!("{snapshot}\n").as_bytes())?;
    Ok(dir)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    write_file(path, format!("{text}\n").as_bytes())
}

fn save_checkpoint(path: &Path, cfg: &RunConfig, model: &ViT<f32>, nets: Option<&PolicyNets<f32>>) -> Result<()> {
    let meta = serde_json::json!({ "vit": cfg.vit, "policy_mode": cfg.train.policy_mode });
    let mut ckpt = Checkpoint::new(meta);
    ckpt.insert("vit", &model.params);
    if let Some(n) = nets {
        ckpt.insert("actor", &n.actor.mlp.params);
        ckpt.insert("critic", &n.critic.mlp.params);
    }
    ckpt.save(path)?;
    Ok(())
}

/// The ViT from `checkpoint.load` and its policy networks, fresh when the
/// checkpoint holds none.
fn load_artifacts(cfg: &RunConfig) -> Result<(ViT<f32>, PolicyNets<f32>, bool)> {
    let path = cfg
        .checkpoint
        .load
        .as_ref()
        .ok_or_else(|| CliError::Config("checkpoint.load (or --load) is required".into()))?;
    let ckpt = Checkpoint::load(path)?;
    let mut model = ViT::<f32>::new(cfg.vit.clone(), cfg.pretrain.seed)?;
    ckpt.restore("vit", &mut model.params)?;
    let mut nets = PolicyNets::<f32>::new(cfg.vit.embed_dim, cfg.train.seed);
    let has_policy = ckpt.has_prefix("actor");
    if has_policy {
        ckpt.restore("actor", &mut nets.actor.mlp.params)?;
        ckpt.restore("critic", &mut nets.critic.mlp.params)?;
    }
    Ok((model, nets, has_policy))
}

fn eval_report(cfg: &RunConfig, model: &ViT<f32>, nets: &PolicyNets<f32>, mode: PolicyMode) -> Result<EvalReport> {
    let (_, test) = cfg.datasets()?;
    let mut report = evaluate(model, nets, &test, mode, cfg.train.seed, cfg.train.batch_size)?;
    if cfg.reward.beta > 0.0 {
        report.alpha_over_beta = Some(cfg.reward.alpha / cfg.reward.beta);
    }
    Ok(report)
}

pub fn pretrain(cfg: &RunConfig) -> Result<()> {
    let dir = prepare(cfg)?;
    let (train, test) = cfg.datasets()?;
    let mut model = ViT::<f32>::new(cfg.vit.clone(), cfg.pretrain.seed)?;
    let keep_all = PolicyMode::Random { keep_prob: 1.0 };
    let nets = PolicyNets::<f32>::new(cfg.vit.embed_dim, cfg.train.seed);
    let mut rows = vec!["epoch,loss,top1".to_string()];
    let metrics_path = dir.join("metrics.csv");
    pretrain_with(&mut model, &train, &cfg.pretrain, |m, rec| {
        let top1 = evaluate(m, &nets, &test, keep_all, 0, cfg.pretrain.batch_size)?.top1;
        eprintln!("pretrain epoch {} loss {:.4} top1 {:.4}", rec.epoch, rec.loss, top1);
        rows.push(format!("{},{:.6},{:.6}", rec.epoch, rec.loss, top1));
        fs::write(&metrics_path, rows.join("\n") + "\n").map_err(|e| vitprune_core::Error::Format(e.to_string()))
    })?;
    save_checkpoint(&dir.join("checkpoint.json"), cfg, &model, None)?;
    let report = eval_report(cfg, &model, &nets, keep_all)?;
    write_json(&dir.join("report.json"), &report)
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let dir = prepare(cfg)?;
    let (train, test) = cfg.datasets()?;
    let (model, nets, _) = load_artifacts(cfg)?;
    let mut trainer = Trainer::new(model, nets, cfg.train.clone(), cfg.reward)?;
    let stages = cfg.vit.num_stages();
    let metrics_path = dir.join("metrics.csv");
    let mut history: Vec<EpochMetrics> = Vec::new();
    let every = cfg.checkpoint.every;
    trainer.train_loop(&train, &test, |t, m| {
        eprintln!(
            "epoch {} {} top1 {:.4} retention {:?}",
            m.epoch,
            m.phase.as_str(),
            m.top1,
            m.retention
        );
        history.push(m.clone());
        let mut buf = Vec::new();
        write_metrics_csv(&history, stages, &mut buf).expect("in-memory write");
        fs::write(&metrics_path, buf).map_err(|e| vitprune_core::Error::Format(e.to_string()))?;
        if every > 0 && m.epoch % every == 0 {
            save_checkpoint(
                &dir.join(format!("checkpoint_e{}.json", m.epoch)),
                cfg,
                &t.model,
                Some(&t.nets),
            )
            .map_err(|e| vitprune_core::Error::Format(e.to_string()))?;
        }
        Ok(())
    })?;
    save_checkpoint(&dir.join("checkpoint.json"), cfg, &trainer.model, Some(&trainer.nets))?;
    let report = eval_report(cfg, &trainer.model, &trainer.nets, cfg.train.policy_mode)?;
    write_json(&dir.join("report.json"), &report)
}

pub fn eval(cfg: &RunConfig) -> Result<()> {
    let dir = prepare(cfg)?;
    let (model, nets, has_policy) = load_artifacts(cfg)?;
    if cfg.train.policy_mode.is_learnable() && !has_policy {
        eprintln!("warning: checkpoint has no policy; using freshly initialized networks");
    }
    let report = eval_report(cfg, &model, &nets, cfg.train.policy_mode)?;
    let mut csv = String::from("top1");
    for i in 1..=report.retention.len() {
        csv += &format!(",mean_retention_l{i}");
    }
    csv += &format!(",gflops\n{:.6}", report.top1);
    for r in &report.retention {
        csv += &format!(",{r:.6}");
    }
    csv += &format!(",{:.6}\n", report.gflops);
    write_file(&dir.join("metrics.csv"), csv.as_bytes())?;
    write_json(&dir.join("report.json"), &report)?;
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    Ok(())
}

pub fn sweep(cfg: &RunConfig) -> Result<()> {
    let dir = prepare(cfg)?;
    let (train, test) = cfg.datasets()?;
    let (model, _, _) = load_artifacts(cfg)?;
    let rows = sweep_alpha_beta(
        &cfg.sweep.ratios,
        cfg.sweep.beta,
        &model,
        &train,
        &test,
        &cfg.train,
        &cfg.reward,
    )?;
    let mut buf = Vec::new();
    write_sweep_csv(&rows, cfg.vit.num_stages(), &mut buf).expect("in-memory write");
    write_file(&dir.join("sweep.csv"), &buf)?;
    print!("{}", String::from_utf8_lossy(&buf));
    Ok(())
}

pub fn bench(cfg: &RunConfig) -> Result<()> {
    let dir = prepare(cfg)?;
    let vit = cfg.bench.vit_config()?;
    let b = &cfg.bench;
    let rows = benchmark_throughput(&vit, &b.retention, b.trials, b.warmup, cfg.train.seed)?;
    let mut buf = Vec::new();
    write_throughput_table(&rows, &mut buf).expect("in-memory write");
    write_file(&dir.join("bench.csv"), &buf)?;
    print!("{}", String::from_utf8_lossy(&buf));
    std::io::stdout().flush().ok();
    Ok(())
}

pub fn visualize(cfg: &RunConfig) -> Result<()> {
    let dir = prepare(cfg)?;
    let (_, test) = cfg.datasets()?;
    let (model, nets, _) = load_artifacts(cfg)?;
    let count = cfg.visualize.count.min(test.len());
    let indices: Vec<usize> = (0..count).collect();
    let (images, labels) = test.batch::<f32>(&indices);
    let rng = substream(cfg.train.seed, Stream::Masks, 0);
    let mut pruner = PolicyPruner::new(&nets, cfg.train.policy_mode, ActMode::Eval, rng);
    let (logits, masks) = model.infer(&images, &mut pruner, false)?;
    let classes = cfg.vit.num_classes;
    let mut csv = String::from("image,label,prediction");
    for i in 1..=masks.len() {
        csv += &format!(",kept_l{i}");
    }
    csv.push('\n');
    let mask_dir = dir.join("masks");
    for (b, label) in labels.iter().enumerate() {
        let layer_masks: Vec<Vec<bool>> = masks.iter().map(|m| m.row(b).to_vec()).collect();
        visualize_masks(
            test.image(b),
            test.channels,
            test.height,
            &layer_masks,
            cfg.vit.patch_size,
            &mask_dir,
            &format!("img{b}"),
        )?;
        let pred = argmax(&logits.values[b * classes..(b + 1) * classes]);
        csv += &format!("{b},{label},{pred}");
        for m in &masks {
            csv += &format!(",{}", m.kept_non_class(b));
        }
        csv.push('\n');
    }
    write_file(&dir.join("metrics.csv"), csv.as_bytes())
}
