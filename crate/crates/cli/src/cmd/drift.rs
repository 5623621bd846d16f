use std::path::PathBuf;

use clap::Args;
use hfb::train::{drift_analysis, load_checkpoint, Checkpoint, DriftReport};
use serde::Serialize;

use crate::error::{usage, CliResult};
use crate::output::write_json;

#[derive(Debug, Args)]
pub struct DriftArgs {
    /// Checkpoint taken before quantization.
    #[arg(long)]
    pub before: PathBuf,
    /// Checkpoint taken after quantization.
    #[arg(long)]
    pub after: PathBuf,
    /// JSON output path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct DriftOutput<'a> {
    schema: &'static str,
    before: String,
    after: String,
    #[serde(flatten)]
    report: &'a DriftReport,
}

fn load(flag: &str, path: &PathBuf) -> CliResult<Checkpoint<f32>> {
    load_checkpoint(path).map_err(|e| usage(format!("--{flag} {}: {e}", path.display())))
}

pub fn run(args: &DriftArgs) -> CliResult<()> {
    let before = load("before", &args.before)?;
    let after = load("after", &args.after)?;
    let report = drift_analysis(&before, &after).map_err(usage)?;
    let s = &report.summary;
    println!(
        "filters {}  mean {:.6}  std {:.6}  skewness {:.4}  excess kurtosis {:.4}",
        s.count, s.mean, s.std, s.skewness, s.excess_kurtosis
    );
    println!(
        "histogram [0, {:.6}] {:?}",
        s.histogram.hi, s.histogram.counts
    );
    if let Some(path) = &args.out {
        write_json(
            path,
            &DriftOutput {
                schema: "hfb-drift/1",
                before: args.before.display().to_string(),
                after: args.after.display().to_string(),
                report: &report,
            },
        )?;
    }
    Ok(())
}
