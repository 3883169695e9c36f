//! Shared fixtures for the benchmarks.

use dsted_core::{generate, LabeledSequence, WorkflowSpec};

/// Default-benchmark sequences for a fixed seed.
pub fn benchmark_sequences(n: usize) -> Vec<LabeledSequence> {
    generate(&WorkflowSpec::default_benchmark(), n, 17).expect("default spec is valid")
}
