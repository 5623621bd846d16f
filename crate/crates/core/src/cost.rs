//! Analytic operation counts, model sizes and normalized energy and
//! throughput for networks described by an [`ArchSpec`] and a [`QuantPlan`].

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hybrid::{ArchSpec, FcPolicy, LayerDesc, LayerKind, QuantMode, QuantPlan};

/// Bits per full-precision value.
pub const FP_BITS: u64 = 16;
/// Bits per ternary entry.
pub const TERNARY_BITS: u64 = 2;

/// Per-operation energy in adder units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyModel {
    pub e_add: f64,
    pub e_mul: f64,
    pub e_mac: f64,
}

impl Default for EnergyModel {
    fn default() -> Self {
        Self {
            e_add: 1.0,
            e_mul: 1.0,
            e_mac: 5.0,
        }
    }
}

/// Silicon area of a MAC unit and of an adder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AreaModel {
    pub area_mac: f64,
    pub area_adder: f64,
}

impl Default for AreaModel {
    fn default() -> Self {
        Self {
            area_mac: 2.0,
            area_adder: 1.0,
        }
    }
}

/// Operation totals as reals, so published figures can be fed in directly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpTriple {
    pub muls: f64,
    pub adds: f64,
    pub macs: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub index: usize,
    pub kind: LayerKind,
    pub muls: u64,
    pub adds: u64,
    pub macs: u64,
    pub size_bits: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub network: String,
    pub mode: QuantMode,
    pub alpha: f64,
    pub rho: f64,
    pub muls: u64,
    pub adds: u64,
    pub macs: u64,
    pub model_size_bits: u64,
    pub energy_normalized: f64,
    pub throughput_normalized: f64,
    pub per_layer: Vec<LayerCost>,
}

impl CostReport {
    pub fn size_kb(&self) -> f64 {
        self.model_size_bits as f64 / 8.0 / 1024.0
    }

    pub fn ops(&self) -> OpTriple {
        OpTriple {
            muls: self.muls as f64,
            adds: self.adds as f64,
            macs: self.macs as f64,
        }
    }
}

/// Counts and storage of one layer. `fc_spn` says whether the dense layer
/// is strassenified (see [`QuantPlan::strassenify_fc`]).
///
/// Every weight layer stores one bias per output channel (16-bit, or
/// 2-bit under TWN); ternary tensors carry one 16-bit scale, folded SPN
/// layers a 16-bit `a_hat` of length `h` instead.
pub fn count_layer(layer: &LayerDesc, plan: &QuantPlan, fc_spn: bool) -> Result<LayerCost> {
    let (h_out, w_out) = layer.out_hw;
    if h_out == 0 || w_out == 0 {
        return Err(Error::invalid(format!(
            "layer has unresolved output extent {:?}",
            layer.out_hw
        )));
    }
    let twn = plan.mode == QuantMode::Twn;
    let p = layer.positions();
    let (ci, co) = (layer.c_in as u64, layer.c_out as u64);
    let kk = (layer.k * layer.k) as u64;
    let bias_bits = if twn { TERNARY_BITS } else { FP_BITS };
    let (mut muls, mut adds, mut macs, mut bits) = (0u64, 0u64, 0u64, 0u64);
    match layer.kind {
        LayerKind::GlobalPool => {}
        LayerKind::DepthwiseConv => {
            bits += co * bias_bits;
            if twn {
                adds += p * ci * kk;
                bits += TERNARY_BITS * ci * kk + FP_BITS;
            } else {
                macs += p * ci * kk;
                bits += FP_BITS * ci * kk;
            }
        }
        LayerKind::Dense => {
            bits += co * bias_bits;
            if fc_spn {
                let h = plan.fc_hidden(layer) as u64;
                muls += h;
                match plan.fc_policy {
                    FcPolicy::Paired => {
                        adds += h * ci + (h - co);
                        bits += TERNARY_BITS * h * ci + FP_BITS * h;
                    }
                    FcPolicy::Learned => {
                        adds += h * (ci + co);
                        bits += TERNARY_BITS * h * (ci + co) + FP_BITS * h;
                    }
                }
            } else if twn {
                adds += ci * co;
                bits += TERNARY_BITS * ci * co + FP_BITS;
            } else {
                macs += ci * co;
                bits += FP_BITS * ci * co;
            }
        }
        LayerKind::StandardConv | LayerKind::PointwiseConv => {
            bits += co * bias_bits;
            if twn {
                adds += p * co * ci * kk;
                bits += TERNARY_BITS * co * ci * kk + FP_BITS;
            } else {
                let split = plan.conv_split(layer.c_out);
                let (fp, spn, h) = (
                    split.fp_channels as u64,
                    split.spn_channels as u64,
                    split.h as u64,
                );
                macs += p * fp * ci * kk;
                bits += FP_BITS * fp * ci * kk;
                if spn > 0 {
                    muls += p * h;
                    adds += p * h * (ci * kk + spn);
                    bits += TERNARY_BITS * h * (ci * kk + spn) + FP_BITS * h;
                }
            }
        }
    }
    Ok(LayerCost {
        index: 0,
        kind: layer.kind,
        muls,
        adds,
        macs,
        size_bits: bits,
    })
}

fn layer_costs(spec: &ArchSpec, plan: &QuantPlan) -> Result<Vec<LayerCost>> {
    spec.validate()?;
    plan.validate()?;
    let fc_spn = plan.strassenify_fc(spec);
    spec.layers
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let mut c = count_layer(l, plan, fc_spn)?;
            c.index = i;
            Ok(c)
        })
        .collect()
}

/// Totals for a network. Energy and throughput are left at 0; see
/// [`evaluate`] for the normalized figures.
pub fn count_network(spec: &ArchSpec, plan: &QuantPlan) -> Result<CostReport> {
    let per_layer = layer_costs(spec, plan)?;
    Ok(CostReport {
        network: spec.name.clone(),
        mode: plan.mode,
        alpha: plan.alpha,
        rho: plan.rho,
        muls: per_layer.iter().map(|l| l.muls).sum(),
        adds: per_layer.iter().map(|l| l.adds).sum(),
        macs: per_layer.iter().map(|l| l.macs).sum(),
        model_size_bits: per_layer.iter().map(|l| l.size_bits).sum(),
        energy_normalized: 0.0,
        throughput_normalized: 0.0,
        per_layer,
    })
}

pub fn model_size(spec: &ArchSpec, plan: &QuantPlan) -> Result<u64> {
    Ok(layer_costs(spec, plan)?.iter().map(|l| l.size_bits).sum())
}

/// Energy relative to running `baseline_macs` MACs.
pub fn energy(ops: &OpTriple, baseline_macs: f64, model: &EnergyModel) -> Result<f64> {
    if !(baseline_macs > 0.0) {
        return Err(Error::invalid("baseline MAC count must be positive"));
    }
    Ok(
        (ops.muls * model.e_mul + ops.adds * model.e_add + ops.macs * model.e_mac)
            / (baseline_macs * model.e_mac),
    )
}

/// Throughput relative to an accelerator of MAC units only, when the same
/// area is split between MAC units and adders in the best proportion.
/// Multiplications run on MAC units.
pub fn throughput(ops: &OpTriple, baseline_macs: f64, area: &AreaModel) -> Result<f64> {
    let m = ops.macs + ops.muls;
    let a = ops.adds;
    if m <= 0.0 && a <= 0.0 {
        return Err(Error::invalid(
            "throughput of an empty workload is undefined",
        ));
    }
    if !(baseline_macs > 0.0) {
        return Err(Error::invalid("baseline MAC count must be positive"));
    }
    Ok(baseline_macs * area.area_mac / (m * area.area_mac + a * area.area_adder))
}

/// Full report with energy and throughput normalized to the FP16 network of
/// the same spec.
pub fn evaluate(spec: &ArchSpec, plan: &QuantPlan) -> Result<CostReport> {
    let baseline = count_network(spec, &QuantPlan::fp16())?.macs as f64;
    let mut r = count_network(spec, plan)?;
    r.energy_normalized = energy(&r.ops(), baseline, &EnergyModel::default())?;
    r.throughput_normalized = throughput(&r.ops(), baseline, &AreaModel::default())?;
    Ok(r)
}

/// One report per plan, in input order.
pub fn table_report(spec: &ArchSpec, plans: &[QuantPlan]) -> Result<Vec<CostReport>> {
    plans.iter().map(|p| evaluate(spec, p)).collect()
}

pub const CSV_HEADER: [&str; 9] = [
    "network",
    "alpha",
    "rho",
    "muls",
    "adds",
    "macs",
    "size_KB",
    "energy",
    "throughput",
];

pub fn write_csv<W: Write>(reports: &[CostReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in reports {
        w.write_record([
            format!("{}:{}", r.network, r.mode.name()),
            r.alpha.to_string(),
            r.rho.to_string(),
            r.muls.to_string(),
            r.adds.to_string(),
            r.macs.to_string(),
            format!("{:.2}", r.size_kb()),
            format!("{:.4}", r.energy_normalized),
            format!("{:.4}", r.throughput_normalized),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn to_json(reports: &[CostReport]) -> Result<String> {
    Ok(serde_json::to_string_pretty(reports)?)
}
