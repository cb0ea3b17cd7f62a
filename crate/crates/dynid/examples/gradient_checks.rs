//! Verify every registered differentiable composite against central finite
//! differences at 64-bit.
//!
//! ```text
//! cargo run --example gradient_checks
//! ```

use dynid::gradsuite::{run_registered, GRADCHECK_TOL};

fn main() {
    let checks = run_registered();
    let mut all = true;
    for check in &checks {
        println!(
            "{:<28} max relative error {:>10.3e}  [{}]",
            check.name,
            check.error,
            if check.pass { "pass" } else { "FAIL" }
        );
        all &= check.pass;
    }
    println!();
    if all {
        println!("all composites pass below {GRADCHECK_TOL:e}");
    } else {
        println!("FAILURES above {GRADCHECK_TOL:e}");
        std::process::exit(1);
    }
}
