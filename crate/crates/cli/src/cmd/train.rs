use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::Args;
use hfb::hybrid::{Network, QuantMode};
use hfb::train::{
    evaluate, generate_synthetic, load_checkpoint, load_cifar10_binary, save_checkpoint, Dataset,
    MetricsLog, PhaseName, Trainer,
};
use serde::Serialize;

use crate::config::{DatasetKind, RunConfig};
use crate::error::{runtime, usage, CliResult};
use crate::output::{write_json, write_text};

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Checkpoint to continue from (any epoch-boundary checkpoint of the same run).
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop after this many epochs in this invocation.
    #[arg(long, hide = true)]
    pub stop_after: Option<usize>,
}

pub const LATEST: &str = "latest.ckpt";
pub const METRICS: &str = "metrics.jsonl";
pub const RESOLVED: &str = "config.resolved.toml";
pub const SUMMARY: &str = "summary.json";

pub fn phase_checkpoint(phase: PhaseName) -> String {
    format!("{}.ckpt", phase.as_str().to_ascii_lowercase())
}

#[derive(Serialize)]
struct Summary {
    schema: &'static str,
    mode: QuantMode,
    label: String,
    epochs: usize,
    final_eval_accuracy: f64,
    checkpoints: Vec<String>,
}

fn load_dataset(cfg: &RunConfig) -> CliResult<Dataset> {
    let mut ds = match cfg.dataset.kind {
        DatasetKind::Synthetic => {
            generate_synthetic(&cfg.dataset.synthetic.unwrap_or_default(), cfg.seed)
                .map_err(|e| usage(format!("config [dataset]: {e}")))?
        }
        DatasetKind::Cifar10 => {
            let path = cfg.dataset_path().expect("validated");
            if !path.is_dir() {
                return Err(usage(format!(
                    "config [dataset]: path {} is not a directory",
                    path.display()
                )));
            }
            load_cifar10_binary(&path).map_err(|e| usage(format!("config [dataset]: {e}")))?
        }
    };
    ds.augment = cfg.dataset.augment;
    Ok(ds)
}

fn check_compatible(cfg: &RunConfig, ds: &Dataset) -> CliResult<()> {
    let spec = cfg.arch_spec()?;
    if (ds.channels, ds.height, ds.width, ds.num_classes)
        != (
            spec.in_channels,
            spec.resolution,
            spec.resolution,
            spec.num_classes,
        )
    {
        return Err(usage(format!(
            "dataset is {}x{}x{} with {} classes, {} expects {}x{}x{} with {}",
            ds.channels,
            ds.height,
            ds.width,
            ds.num_classes,
            spec.name,
            spec.in_channels,
            spec.resolution,
            spec.resolution,
            spec.num_classes
        )));
    }
    Ok(())
}

fn timestamp() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

fn save(trainer: &Trainer<f32>, path: &Path) -> CliResult<()> {
    save_checkpoint(path, &trainer.checkpoint()?)
        .map_err(|e| runtime(format!("writing {}: {e}", path.display())))
}

pub fn run(args: &TrainArgs) -> CliResult<()> {
    let cfg = RunConfig::load(&args.config)?.resolved();
    cfg.validate()?;
    let data = load_dataset(&cfg)?;
    check_compatible(&cfg, &data)?;
    let spec = cfg.arch_spec()?;
    let train_cfg = cfg.train_config();

    let mut trainer = match &args.resume {
        Some(path) => {
            let ck = load_checkpoint::<f32>(path)
                .map_err(|e| usage(format!("--resume {}: {e}", path.display())))?;
            let t = Trainer::from_checkpoint(&ck)
                .map_err(|e| usage(format!("--resume {}: {e}", path.display())))?;
            if ck.arch != spec || ck.plan != cfg.plan || *t.config() != train_cfg.resolved() {
                return Err(usage(format!(
                    "--resume {}: checkpoint belongs to a different configuration",
                    path.display()
                )));
            }
            t
        }
        None => Trainer::new(Network::new(&spec, &cfg.plan, cfg.seed)?, train_cfg)?,
    };

    let dir = &cfg.output_dir();
    write_text(&dir.join(RESOLVED), &cfg.to_toml()?)?;
    let file = File::create(dir.join(METRICS)).map_err(runtime)?;
    let config_json = serde_json::to_value(&cfg).map_err(runtime)?;
    let mut log =
        MetricsLog::new(BufWriter::new(file), &config_json, timestamp()).map_err(runtime)?;
    for m in trainer.metrics() {
        log.epoch(m).map_err(runtime)?;
    }

    let mut ran = 0usize;
    let mut checkpoints: Vec<String> = cfg
        .train
        .phases
        .iter()
        .take(trainer.cursor().phase)
        .map(|p| phase_checkpoint(p.name))
        .filter(|n| dir.join(n).exists())
        .collect();
    while !trainer.is_done() && args.stop_after.is_none_or(|n| ran < n) {
        let phase = trainer.config().phases[trainer.cursor().phase].name;
        let m = trainer.run_epoch(&data)?;
        ran += 1;
        log.epoch(&m).map_err(runtime)?;
        println!(
            "{:<12} epoch {:>3}  lr {:.5}  loss {:.4}  train {:.4}  eval {:.4}",
            m.phase.as_str(),
            m.phase_epoch,
            m.lr,
            m.loss,
            m.train_acc,
            m.eval_acc
        );
        save(&trainer, &dir.join(LATEST))?;
        if trainer.is_done() || trainer.config().phases[trainer.cursor().phase].name != phase {
            let name = phase_checkpoint(phase);
            save(&trainer, &dir.join(&name))?;
            checkpoints.push(name);
        }
    }
    log.into_inner()
        .into_inner()
        .map_err(|e| runtime(e.error().to_string()))?;
    if !trainer.is_done() {
        println!(
            "stopped after {ran} epochs; continue with --resume {}",
            dir.join(LATEST).display()
        );
        return Ok(());
    }

    let mut net = trainer.into_network();
    if net.plan().mode == QuantMode::Twn {
        net.ternarize_post_training()?;
    }
    let acc = evaluate(&mut net, &data, cfg.train.eval_batch_size)?;
    println!("final eval accuracy: {acc:.4}");
    write_json(
        &dir.join(SUMMARY),
        &Summary {
            schema: "hfb-train-summary/1",
            mode: cfg.plan.mode,
            label: cfg.plan.label(),
            epochs: cfg.train.phases.iter().map(|p| p.epochs).sum(),
            final_eval_accuracy: acc,
            checkpoints,
        },
    )
}
