//! Shared fixtures for the criterion benchmarks.

use merit_core::datagen::WorldConfig;
use merit_core::harness::ExperimentData;
use merit_core::Result;

/// A small simulated dataset that still has full-size sessions.
pub fn fixture() -> Result<ExperimentData> {
    ExperimentData::simulate(&WorldConfig {
        n_sessions: 600,
        test_sessions: 100,
        ..WorldConfig::default()
    })
}
