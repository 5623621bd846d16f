//! Published cost-table rows for MobileNets-V1 width 0.5 at 224x224.

use hfb::hybrid::QuantPlan;

pub struct Row {
    pub plan: QuantPlan,
    pub muls: f64,
    pub adds: f64,
    pub macs: f64,
    pub size_kb: f64,
    pub energy: f64,
    pub throughput: f64,
}

fn row(plan: QuantPlan, m: [f64; 7]) -> Row {
    Row {
        plan,
        muls: m[0] * 1e6,
        adds: m[1] * 1e6,
        macs: m[2] * 1e6,
        size_kb: m[3],
        energy: m[5],
        throughput: m[6],
    }
}

/// Columns: muls (M), adds (M), MACs (M), size (KB), unused, energy, throughput.
pub fn published() -> Vec<Row> {
    vec![
        row(
            QuantPlan::fp16(),
            [0.0, 0.0, 149.49, 2590.07, 0.0, 1.0, 1.0],
        ),
        row(QuantPlan::twn(), [0.0, 149.49, 0.0, 323.75, 0.0, 0.2, 2.0]),
        row(
            QuantPlan::strassen(0.5),
            [0.77, 158.54, 8.69, 522.33, 0.0, 0.27, 1.69],
        ),
        row(
            QuantPlan::strassen(0.75),
            [1.16, 236.16, 8.69, 631.76, 0.0, 0.37, 1.17],
        ),
        row(
            QuantPlan::strassen(1.0),
            [1.55, 313.78, 8.69, 741.19, 0.0, 0.48, 0.9],
        ),
        row(
            QuantPlan::strassen(2.0),
            [3.11, 624.27, 8.69, 1178.92, 0.0, 0.9, 0.46],
        ),
        row(
            QuantPlan::hybrid(0.25, 1.0),
            [1.16, 204.63, 43.76, 1004.67, 0.0, 0.56, 1.02],
        ),
        row(
            QuantPlan::hybrid(0.25, 1.33),
            [1.55, 270.95, 43.76, 1097.07, 0.0, 0.65, 0.83],
        ),
        row(
            QuantPlan::hybrid(0.25, 2.0),
            [2.33, 405.59, 43.76, 1284.65, 0.0, 0.84, 0.6],
        ),
        row(
            QuantPlan::hybrid(0.375, 1.0),
            [0.97, 157.84, 61.3, 1131.43, 0.0, 0.62, 1.06],
        ),
        row(
            QuantPlan::hybrid(0.375, 1.6),
            [1.55, 250.34, 61.3, 1260.44, 0.0, 0.74, 0.8],
        ),
        row(
            QuantPlan::hybrid(0.375, 2.0),
            [1.94, 312.01, 61.3, 1346.45, 0.0, 0.83, 0.68],
        ),
        row(
            QuantPlan::hybrid(0.5, 1.0),
            [1.28, 142.37, 78.83, 1267.13, 0.0, 0.72, 1.0],
        ),
        row(
            QuantPlan::hybrid(0.5, 2.0),
            [1.55, 228.68, 78.83, 1327.88, 0.0, 0.83, 0.77],
        ),
    ]
}

pub fn within(got: f64, want: f64, rel: f64) -> bool {
    if want == 0.0 {
        got == 0.0
    } else {
        ((got - want) / want).abs() <= rel
    }
}

/// The alpha=0.5, r=c_out row, whose counts are excluded from acceptance.
pub fn is_flagged(p: &QuantPlan) -> bool {
    p.alpha == 0.5 && p.rho == 1.0
}
