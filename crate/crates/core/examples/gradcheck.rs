//! Finite-difference check of every loss term on the toy configuration,
//! then the same check with a deliberately wrong backward rule.

use cmd_distill::diagnostics::{grad_check_term, toy_config, LossTerm};
use cmd_distill::Result;

fn main() -> Result<()> {
    let cfg = toy_config();
    for term in LossTerm::ALL {
        let r = grad_check_term(&cfg, 0, term, None)?;
        println!(
            "{term:?}: max relative error {:.2e} ({})",
            r.max_rel_error,
            if r.passed { "PASS" } else { "FAIL" }
        );
    }
    let faulty = grad_check_term(&cfg, 0, LossTerm::Total, Some(("gelu", 1.5)))?;
    println!("\nwith the gelu gradient scaled by 1.5:\n{faulty}");
    Ok(())
}
