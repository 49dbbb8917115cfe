//! Fixtures shared by the benchmarks.

use splitgnn_core::graph::{generate_synthetic, DatasetBundle, SyntheticSpec};
use splitgnn_core::protocol::SessionConfig;
use splitgnn_core::models::EncoderConfig;

/// The desk benchmark shrunk by `factor` in every node type.
pub fn scaled_benchmark(factor: usize) -> DatasetBundle {
    let mut spec = SyntheticSpec::desk_benchmark(1);
    for t in &mut spec.node_types {
        t.count /= factor;
    }
    generate_synthetic(&spec).expect("benchmark spec is valid")
}

pub fn session(hidden: usize, batch_size: usize) -> SessionConfig {
    SessionConfig {
        encoder: EncoderConfig {
            hidden,
            ..Default::default()
        },
        batch_size,
        key_bits: 512,
        ..Default::default()
    }
}
