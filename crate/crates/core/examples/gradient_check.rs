//! Finite-difference check of the full training loss at miniature size,
//! reported per parameter tensor.

use tatt::gradcheck::NetworkCase;
use tatt::NetworkConfig;

fn main() -> tatt::Result<()> {
    let case = NetworkCase::random(NetworkConfig::mini(), 1)?;
    let mut reports = case.check(8, 1)?;
    reports.sort_by(|a, b| b.max_rel_error.total_cmp(&a.max_rel_error));
    for r in &reports {
        println!(
            "{:<40} {:>3} entries  max rel err {:.2e}",
            r.name, r.checked, r.max_rel_error
        );
    }
    let worst = reports.first().map_or(0.0, |r| r.max_rel_error);
    println!(
        "worst {worst:.2e} -> {}",
        if worst < 1e-4 { "pass" } else { "FAIL" }
    );
    Ok(())
}
