//! Movement of the full-precision filters of each filter bank between two
//! checkpoints of the same network, typically the end of `FP_TRAIN` and the
//! end of training.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hybrid::{NetLayer, Network};
use crate::scalar::Scalar;
use crate::train::checkpoint::Checkpoint;

pub const HISTOGRAM_BINS: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDrift {
    pub layer: String,
    /// `|w_before - w_after|_2` per full-precision output filter.
    pub distances: Vec<f64>,
}

/// Equal-width bins over `[lo, hi]`; the last bin is closed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftSummary {
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub skewness: f64,
    pub excess_kurtosis: f64,
    pub histogram: Histogram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub layers: Vec<LayerDrift>,
    pub summary: DriftSummary,
}

/// Population moments; skewness and kurtosis are 0 for a constant sample.
pub fn summarize(values: &[f64]) -> DriftSummary {
    let n = values.len();
    let nf = n.max(1) as f64;
    let mean = values.iter().sum::<f64>() / nf;
    let moment = |p: i32| values.iter().map(|v| (v - mean).powi(p)).sum::<f64>() / nf;
    let var = moment(2);
    let std = var.sqrt();
    let (skewness, excess_kurtosis) = if var > 0.0 {
        (moment(3) / var.powf(1.5), moment(4) / (var * var) - 3.0)
    } else {
        (0.0, 0.0)
    };
    let max = values.iter().copied().fold(0.0, f64::max);
    let hi = if max > 0.0 { max } else { 1.0 };
    let mut counts = vec![0; HISTOGRAM_BINS];
    for &v in values {
        let b = ((v / hi) * HISTOGRAM_BINS as f64).floor() as usize;
        counts[b.min(HISTOGRAM_BINS - 1)] += 1;
    }
    DriftSummary {
        count: n,
        mean,
        std,
        skewness,
        excess_kurtosis,
        histogram: Histogram {
            lo: 0.0,
            hi,
            counts,
        },
    }
}

fn fp_banks<T: Scalar>(net: &Network<T>) -> Vec<(String, Option<Vec<f64>>, usize)> {
    net.layers()
        .iter()
        .enumerate()
        .filter_map(|(i, layer)| match layer {
            NetLayer::Conv { bank, .. } => Some((
                format!("l{i:02}"),
                bank.fp_filters()
                    .map(|f| f.data().iter().map(|v| v.to_f64_lossy()).collect()),
                bank.fp_channels(),
            )),
            _ => None,
        })
        .collect()
}

pub fn drift_analysis<T: Scalar>(
    before: &Checkpoint<T>,
    after: &Checkpoint<T>,
) -> Result<DriftReport> {
    if before.arch != after.arch || before.plan != after.plan {
        return Err(Error::invalid(format!(
            "checkpoints differ in architecture or plan: {} {} vs {} {}",
            before.arch.name,
            before.plan.label(),
            after.arch.name,
            after.plan.label()
        )));
    }
    let (a, b) = (fp_banks(&before.network()?), fp_banks(&after.network()?));
    let mut layers = Vec::new();
    for ((name, wa, c), (_, wb, _)) in a.into_iter().zip(b) {
        let (Some(wa), Some(wb)) = (wa, wb) else {
            continue;
        };
        if wa.len() != wb.len() {
            return Err(Error::shape(
                "drift_analysis",
                format!("{name}: {} vs {} weights", wa.len(), wb.len()),
            ));
        }
        let per = wa.len() / c;
        let distances = wa
            .chunks(per)
            .zip(wb.chunks(per))
            .map(|(x, y)| {
                x.iter()
                    .zip(y)
                    .map(|(p, q)| (p - q) * (p - q))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        layers.push(LayerDrift {
            layer: name,
            distances,
        });
    }
    let all: Vec<f64> = layers
        .iter()
        .flat_map(|l| l.distances.iter().copied())
        .collect();
    Ok(DriftReport {
        summary: summarize(&all),
        layers,
    })
}
