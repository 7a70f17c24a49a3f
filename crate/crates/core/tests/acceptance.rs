//! Runs the full invariant suite at acceptance effort and prints one line
//! per criterion. Exits nonzero if any criterion fails.
//!
//! `SNLS_ACCEPTANCE_ONLY=3,7` restricts the run to the listed criteria and
//! `SNLS_ACCEPTANCE_SEED` replaces the master seed.

use snls_core::verify::{run_check, Effort, CHECK_NAMES};

fn main() {
    let only: Option<Vec<u32>> = std::env::var("SNLS_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let ids: Vec<u32> = (1..=CHECK_NAMES.len() as u32)
        .filter(|id| only.as_ref().is_none_or(|o| o.contains(id)))
        .collect();
    let seed = std::env::var("SNLS_ACCEPTANCE_SEED")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(20240611);
    let mut failed = 0;
    for id in ids {
        let r = run_check(id, Effort::Full, seed);
        println!("{r}");
        if !r.passed {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("acceptance: {failed} criteria failed");
        std::process::exit(1);
    }
    println!("acceptance: all criteria passed");
}
