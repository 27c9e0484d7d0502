//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.
//!
//! Criterion numbers given as arguments select a subset:
//! `cargo test -p mtcap-cli --test acceptance -- 1 4`.

mod common;
mod decoding;
mod end_to_end;
mod gradients;
mod invariance;
mod oracles;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use common::Outcome;

type Criterion = (usize, &'static str, fn() -> Outcome);

const CRITERIA: [Criterion; 10] = [
    (1, "gradient fidelity", gradients::criterion),
    (2, "causal mask", invariance::causal_criterion),
    (3, "encoder invariances", invariance::encoder_criterion),
    (4, "decoding equivalence", decoding::criterion),
    (5, "metric and SCST oracles", oracles::criterion),
    (6, "learning-rate schedule", oracles::lr_criterion),
    (7, "toy task end to end", end_to_end::toy_task_criterion),
    (8, "self-critical direction", end_to_end::scst_criterion),
    (9, "multi-view direction", end_to_end::multi_view_criterion),
    (10, "reproducibility", end_to_end::reproducibility_criterion),
];

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failures = 0;
    let mut ran = 0;
    for (n, name, run) in CRITERIA {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        ran += 1;
        let t = Instant::now();
        let out = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Outcome::fail(format!("panicked: {msg}"))
        });
        if !out.pass {
            failures += 1;
        }
        println!(
            "{} criterion {n:>2} ({name}): {} [{:.1}s]",
            if out.pass { "PASS" } else { "FAIL" },
            out.detail,
            t.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
