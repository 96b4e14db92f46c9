//! Runs the default desk scenario under every balancer and prints a summary
//! line per policy.

use std::time::Instant;

use zonebal_core::{Policy, Scenario};

fn main() {
    let duration = std::env::args().nth(1).and_then(|s| s.parse().ok());
    for name in [
        "baseline",
        "zone:cold",
        "zone:warm_low",
        "zone:warm_mid",
        "zone:warm_high",
        "zone:hot",
    ] {
        let mut s = Scenario::default();
        if let Some(d) = duration {
            s.duration_us = d;
        }
        s.apply_policy(name.parse::<Policy>().unwrap());
        let t = Instant::now();
        let metrics = s.run().expect("run");
        let r = s.report(&metrics);
        println!(
            "{name:15} mean={:>8.3}us p99={:>5?} max={:>5?} migrations={:>6} checks={:>7} lock={:>8}us peak={:.1} ({:.2?})",
            r.mean_us.unwrap_or(0.0),
            r.p99_us,
            r.max_us,
            r.migrations,
            r.direct_checks,
            r.lock_hold_total_us,
            metrics.peak_utilization,
            t.elapsed()
        );
    }
}
