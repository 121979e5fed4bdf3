//! Latent recovery on data from a process with known user states and
//! regime contexts: trained versus untrained encoders.
//!
//! cargo run --release --example ident_bench

use idmir::ident::{run_bench, IdentConfig};

fn main() -> idmir::Result<()> {
    for regimes in [1, 5] {
        let cfg = IdentConfig { regimes, ..IdentConfig::default() };
        let r = run_bench(&cfg, &[1, 2, 3])?;
        println!(
            "{regimes} regime(s): user-state MCC {:.3} (untrained {:.3}), context block R2 {:.3} (untrained {:.3})",
            r.mean_mcc, r.mean_baseline_mcc, r.mean_block_r2, r.mean_baseline_block_r2
        );
    }
    Ok(())
}
