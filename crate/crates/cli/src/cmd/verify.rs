use std::path::PathBuf;

use clap::Args;
use hfb::spn::search::DEFAULT_TRIALS;
use hfb::spn::{
    make_canonical_strassen, make_naive_expansion, search_shared_value_spn, verify_spn_exact,
    BilinearMap, FilterBankTemplate, SpnTriple,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{CliError, CliResult};
use crate::output::write_json;

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Random integer matrix pairs per exactness check.
    #[arg(long, default_value_t = 1000)]
    pub trials: usize,
    /// Restart budget of the 6-product shared-value search.
    #[arg(long, default_value_t = DEFAULT_TRIALS)]
    pub h6_trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// JSON summary path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Corrupts one Strassen constant; exercises the failure path.
    #[arg(long, hide = true)]
    pub tamper: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING-KEBAB-CASE")]
pub enum Status {
    Pass,
    Fail,
    SearchExhausted,
}

impl Status {
    fn label(self) -> &'static str {
        match self {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::SearchExhausted => "SEARCH-EXHAUSTED",
        }
    }
}

#[derive(Debug, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub status: Status,
    pub detail: String,
}

#[derive(Serialize)]
struct VerifyOutput<'a> {
    schema: &'static str,
    trials: usize,
    h6_trials: usize,
    seed: u64,
    checks: &'a [CheckResult],
}

/// Basis verification plus agreement with the schoolbook product on random
/// integer pairs.
fn exactness(spn: &SpnTriple<f64>, trials: usize, rng: &mut ChaCha8Rng) -> (bool, String) {
    let reference = BilinearMap::matmul(2, 2, 2);
    let basis = verify_spn_exact(spn, &reference).unwrap_or(false);
    let mut mismatches = 0;
    for _ in 0..trials {
        let a: Vec<i64> = (0..4).map(|_| rng.random_range(-1000..=1000)).collect();
        let b: Vec<i64> = (0..4).map(|_| rng.random_range(-1000..=1000)).collect();
        match spn.apply_i64(&a, &b) {
            Ok(c) if c == reference.apply_i64(&a, &b) => {}
            _ => mismatches += 1,
        }
    }
    let ok = basis && mismatches == 0;
    (
        ok,
        format!(
            "h={}, basis {}, {mismatches}/{trials} random mismatches",
            spn.h(),
            if basis { "exact" } else { "inexact" }
        ),
    )
}

pub fn run_checks(args: &VerifyArgs) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut strassen = make_canonical_strassen::<f64>();
    if args.tamper {
        let v = strassen.wc.get(0, 0);
        strassen.wc.set(0, 0, if v == 1 { -1 } else { 1 });
    }
    let mut out = Vec::new();
    for (name, spn) in [
        ("canonical-strassen-7", strassen),
        ("naive-expansion-8", make_naive_expansion(2, 2, 2)),
    ] {
        let (ok, detail) = exactness(&spn, args.trials, &mut rng);
        out.push(CheckResult {
            name,
            status: if ok { Status::Pass } else { Status::Fail },
            detail,
        });
    }
    let (status, detail) = match search_shared_value_spn(
        &FilterBankTemplate::shared_value(),
        6,
        args.h6_trials,
        args.seed,
    ) {
        Ok(Some(found)) => (
            Status::Pass,
            format!(
                "basis-verified 6-product SPN found at trial {}",
                found.trial
            ),
        ),
        Ok(None) => (
            Status::SearchExhausted,
            format!("no exact 6-product SPN within {} trials", args.h6_trials),
        ),
        Err(e) => (Status::Fail, e.to_string()),
    };
    out.push(CheckResult {
        name: "shared-value-6",
        status,
        detail,
    });
    out
}

pub fn run(args: &VerifyArgs) -> CliResult<()> {
    let checks = run_checks(args);
    for c in &checks {
        println!("{:<22} {:<16} {}", c.name, c.status.label(), c.detail);
    }
    if let Some(path) = &args.out {
        write_json(
            path,
            &VerifyOutput {
                schema: "hfb-verify/1",
                trials: args.trials,
                h6_trials: args.h6_trials,
                seed: args.seed,
                checks: &checks,
            },
        )?;
    }
    let failed: Vec<&str> = checks
        .iter()
        .filter(|c| c.status == Status::Fail)
        .map(|c| c.name)
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Check(failed.join(", ")))
    }
}
