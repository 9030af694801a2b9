//! Shared fixtures for the criterion benches.

use beem_core::{generate, Dataset, SynthConfig};

/// Twelve exits, ten classes, error falling from 0.35 to 0.10.
pub fn fixture(samples: usize, seed: u64) -> Dataset {
    let layers = 12;
    let q = (0..layers)
        .map(|i| 0.35 - 0.25 * i as f64 / (layers - 1) as f64)
        .collect();
    let cfg = SynthConfig {
        persistence: 0.3,
        ..SynthConfig::new(layers, 10, samples, q, seed)
    };
    generate(&cfg).expect("valid fixture config")
}
