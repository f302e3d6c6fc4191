//! Shared fixtures for the benchmarks.

use mcle_core::data::{generate_synthetic, SyntheticConfig};
use mcle_core::{DatasetSplit, RunConfig, Trainer};

/// Default-sized synthetic training split.
pub fn train_split(n: usize) -> DatasetSplit {
    generate_synthetic(1, n, &SyntheticConfig::default())
}

/// Trainer with default hyperparameters over `n` synthetic samples.
pub fn trainer(n: usize) -> Trainer {
    Trainer::new(RunConfig::default(), train_split(n), &[]).expect("default config is valid")
}
