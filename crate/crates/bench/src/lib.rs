//! Benchmark fixtures.

use mrac_core::harness::Scenario;
use mrac_core::scenario::builtin;

/// A built-in example cut down to `duration` seconds.
pub fn short_example(name: &str, duration: f64) -> Scenario {
    let mut s = builtin(name).expect("known built-in");
    s.duration = duration;
    s
}
