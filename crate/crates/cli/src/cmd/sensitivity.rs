use std::fs;
use std::path::PathBuf;

use clap::{ArgGroup, Args};
use hfb::train::{builtin_filter, sensitivity_experiment, SensitivityPoint, DEFAULT_PAIRS};
use hfb::Tensor;
use serde::Serialize;

use crate::error::{usage, CliResult};
use crate::output::write_json;

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("filter").required(true).args(["filter_file", "builtin"])))]
pub struct SensitivityArgs {
    /// JSON file holding the filter as an array of rows.
    #[arg(long)]
    pub filter_file: Option<PathBuf>,
    /// Use the builtin 2x2 matmul filter.
    #[arg(long)]
    pub builtin: bool,
    /// Hidden widths, e.g. `2,3,4` or `2-8`.
    #[arg(long, default_value = "2-8", value_parser = parse_h_list)]
    pub h_list: HList,
    #[arg(long, default_value_t = DEFAULT_PAIRS)]
    pub pairs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// JSON output path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct HList(pub Vec<usize>);

pub fn parse_h_list(s: &str) -> Result<HList, String> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let num = |t: &str| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| format!("'{t}' is not a width"))
        };
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b) = (num(a)?, num(b)?);
                if a > b {
                    return Err(format!("empty range '{part}'"));
                }
                out.extend(a..=b);
            }
            None => out.push(num(part)?),
        }
    }
    if out.is_empty() {
        return Err("no widths given".into());
    }
    if out.contains(&0) {
        return Err("hidden width 0 is invalid".into());
    }
    Ok(HList(out))
}

#[derive(Serialize)]
struct SensitivityOutput<'a> {
    schema: &'static str,
    filter: Vec<Vec<f64>>,
    h_list: &'a [usize],
    pairs: usize,
    seed: u64,
    points: &'a [SensitivityPoint],
}

fn read_filter(path: &PathBuf) -> CliResult<Tensor<f64>> {
    let text = fs::read_to_string(path)
        .map_err(|e| usage(format!("--filter-file {}: {e}", path.display())))?;
    let rows: Vec<Vec<f64>> = serde_json::from_str(&text)
        .map_err(|e| usage(format!("--filter-file {}: {e}", path.display())))?;
    let cols = rows.first().map_or(0, Vec::len);
    if cols == 0 || rows.iter().any(|r| r.len() != cols) {
        return Err(usage(
            "--filter-file must hold a non-empty rectangular array of rows",
        ));
    }
    Tensor::from_vec(vec![rows.len(), cols], rows.concat()).map_err(usage)
}

pub fn run(args: &SensitivityArgs) -> CliResult<()> {
    let filter = match &args.filter_file {
        Some(p) => read_filter(p)?,
        None => builtin_filter(),
    };
    let points = sensitivity_experiment(&filter, &args.h_list.0, args.pairs, args.seed)?;
    println!(
        "{:>4} {:>14} {:>14} {}",
        "h", "loss", "rounded_loss", "diverged"
    );
    for p in &points {
        println!(
            "{:>4} {:>14.6e} {:>14.6e} {}",
            p.h, p.loss, p.rounded_loss, p.diverged
        );
    }
    if let Some(path) = &args.out {
        let cols = filter.shape()[1];
        let mut h_list = args.h_list.0.clone();
        h_list.sort_unstable();
        h_list.dedup();
        write_json(
            path,
            &SensitivityOutput {
                schema: "hfb-sensitivity/1",
                filter: filter.data().chunks(cols).map(<[f64]>::to_vec).collect(),
                h_list: &h_list,
                pairs: args.pairs,
                seed: args.seed,
                points: &points,
            },
        )?;
    }
    Ok(())
}
