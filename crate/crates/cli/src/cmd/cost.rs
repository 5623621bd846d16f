use std::path::PathBuf;

use clap::Args;
use hfb::cost::{table_report, write_csv, CostReport};
use hfb::hybrid::{ArchSpec, FcPolicy, QuantMode, QuantPlan};
use serde::Serialize;

use crate::error::{runtime, usage, CliResult};
use crate::output::{write_json, write_text};

#[derive(Debug, Args)]
pub struct CostArgs {
    /// mobilenet-v1 or tinynet
    #[arg(long, default_value = "mobilenet-v1")]
    pub arch: String,
    #[arg(long, default_value_t = 1.0)]
    pub width: f64,
    #[arg(long, default_value_t = 224)]
    pub resolution: usize,
    /// Classes of the tinynet head.
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    /// fp16, twn, strassen (st) or hybrid
    #[arg(long, default_value = "fp16")]
    pub mode: QuantMode,
    /// Full-precision fraction per layer; comma-separated values give one row each.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub alpha: Vec<f64>,
    /// Hidden-width factor; comma-separated values give one row each.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    pub rho: Vec<f64>,
    #[arg(long, value_enum, default_value = "paired")]
    pub fc_policy: FcPolicyArg,
    /// Directory for cost.csv and cost.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum FcPolicyArg {
    Paired,
    Learned,
}

#[derive(Serialize)]
struct CostConfig<'a> {
    arch: &'a str,
    width: f64,
    resolution: usize,
    classes: usize,
    mode: QuantMode,
    alpha: &'a [f64],
    rho: &'a [f64],
    fc_policy: FcPolicyArg,
}

#[derive(Serialize)]
struct CostOutput<'a> {
    schema: &'static str,
    config: CostConfig<'a>,
    reports: &'a [CostReport],
}

fn plans(args: &CostArgs) -> CliResult<Vec<QuantPlan>> {
    if let Some(a) = args.alpha.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(usage(format!("--alpha must lie in [0, 1], got {a}")));
    }
    if let Some(r) = args.rho.iter().find(|r| !(**r > 0.0 && r.is_finite())) {
        return Err(usage(format!("--rho must be positive, got {r}")));
    }
    if args.mode != QuantMode::Hybrid && args.alpha.iter().any(|&a| a != 0.0) {
        return Err(usage(format!(
            "--alpha applies only to --mode hybrid, got --mode {}",
            args.mode.name()
        )));
    }
    let fc_policy = match args.fc_policy {
        FcPolicyArg::Paired => FcPolicy::Paired,
        FcPolicyArg::Learned => FcPolicy::Learned,
    };
    let mut out = Vec::new();
    for &alpha in &args.alpha {
        for &rho in &args.rho {
            let mut p = match args.mode {
                QuantMode::Fp16 => QuantPlan::fp16(),
                QuantMode::Twn => QuantPlan::twn(),
                QuantMode::Strassen => QuantPlan::strassen(rho),
                QuantMode::Hybrid => QuantPlan::hybrid(alpha, rho),
            };
            p.fc_policy = fc_policy;
            p.validate().map_err(usage)?;
            out.push(p);
        }
    }
    out.dedup();
    Ok(out)
}

pub fn run(args: &CostArgs) -> CliResult<()> {
    let spec = ArchSpec::named(&args.arch, args.width, args.resolution, args.classes)
        .map_err(|e| usage(format!("--arch/--width/--resolution: {e}")))?;
    let reports = table_report(&spec, &plans(args)?)?;
    let mut csv = Vec::new();
    write_csv(&reports, &mut csv).map_err(runtime)?;
    let csv = String::from_utf8(csv).map_err(runtime)?;
    print!("{csv}");
    if let Some(dir) = &args.out {
        write_text(&dir.join("cost.csv"), &csv)?;
        let config = CostConfig {
            arch: &args.arch,
            width: args.width,
            resolution: args.resolution,
            classes: args.classes,
            mode: args.mode,
            alpha: &args.alpha,
            rho: &args.rho,
            fc_policy: args.fc_policy,
        };
        write_json(
            &dir.join("cost.json"),
            &CostOutput {
                schema: "hfb-cost/1",
                config,
                reports: &reports,
            },
        )?;
    }
    Ok(())
}
