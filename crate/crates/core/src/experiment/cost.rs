//! Split-learning bytes measured from transcripts against a closed-form
//! federated-learning model.

use serde::{Deserialize, Serialize};

use crate::transcript::{Transcript, ELEMENT_BYTES};

/// Model sizes `|W|` swept by the cost grid.
pub const DEFAULT_MODEL_SIZES: [u64; 5] = [1_000, 10_000, 100_000, 1_000_000, 10_000_000];

/// Every participant downloads and uploads the full model once per round.
pub fn comm_cost_fl(participants: u64, model_params: u64, rounds: u64) -> u64 {
    rounds * 2 * participants * model_params * ELEMENT_BYTES
}

/// Sum of every logged message.
pub fn comm_cost_sl<'a>(transcripts: impl IntoIterator<Item = &'a Transcript>) -> u64 {
    transcripts.into_iter().map(Transcript::total_bytes).sum()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostRow {
    pub digest: String,
    pub seed: u64,
    pub participants: u64,
    pub batch_size: u64,
    pub hidden: u64,
    /// Federated rounds, one per training epoch.
    pub rounds: u64,
    /// Split-learning batch rounds actually run.
    pub batch_rounds: u64,
    pub model_params: u64,
    pub sl_bytes: u64,
    pub fl_bytes: u64,
}

impl CostRow {
    /// The same measured run priced against another model size.
    pub fn with_model_size(&self, model_params: u64) -> CostRow {
        CostRow {
            model_params,
            fl_bytes: comm_cost_fl(self.participants, model_params, self.rounds),
            ..self.clone()
        }
    }
}

/// Every measured row repriced at each of `sizes`.
pub fn cost_sweep(measured: &[CostRow], sizes: &[u64]) -> Vec<CostRow> {
    measured
        .iter()
        .flat_map(|row| sizes.iter().map(|&w| row.with_model_size(w)))
        .collect()
}
