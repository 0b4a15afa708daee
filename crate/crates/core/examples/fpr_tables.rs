//! False-positive rates of the bit-matching test: exact binomial tails,
//! the incomplete-beta route, a Monte Carlo estimate, and the thresholds
//! needed for a target global FPR as the registry grows.
//!
//! `cargo run --release --example fpr_tables`

use wibmark::attribution::{detection_threshold, fpr_at_least, fpr_closed_form, fpr_incomplete_beta, fpr_monte_carlo};
use wibmark::Rng;

fn main() -> wibmark::Result<()> {
    let mut rng = Rng::new(1);
    println!("  k  tau   P(M > tau)     incomplete beta  Monte Carlo (1e5)");
    for (k, tau) in [(16, 8), (16, 12), (32, 24), (48, 30), (48, 36), (64, 48)] {
        println!(
            "{k:3} {tau:4}   {:.6e}   {:.6e}     {:.6e}",
            fpr_closed_form(tau, k)?,
            fpr_incomplete_beta(tau, k)?,
            fpr_monte_carlo(tau, k, 100_000, &mut rng)?
        );
    }

    println!("\nmatching bits needed (M >= tau) for global FPR 1e-6");
    println!("  k   1 user   1e3 users   1e6 users");
    for k in [32, 48, 64] {
        let cell = |n: u64| match detection_threshold(k, 1e-6, n) {
            Ok(t) => format!("{t} ({:.1e})", fpr_at_least(t, k).unwrap_or(f64::NAN)),
            Err(_) => "unreachable".to_string(),
        };
        println!("{k:3}   {:<10} {:<12} {}", cell(1), cell(1_000), cell(1_000_000));
    }
    Ok(())
}
