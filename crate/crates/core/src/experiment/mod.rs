//! Config-driven experiment runner, communication-cost model and CSV reports.

mod cost;
mod report;
mod run;

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{generate_synthetic, load_dataset, DatasetBundle, RelationOwner, SyntheticSpec};
use crate::protocol::{SessionConfig, Strategy};

pub use cost::{comm_cost_fl, comm_cost_sl, cost_sweep, CostRow, DEFAULT_MODEL_SIZES};
pub use report::{emit_report, read_cost, read_metrics, MetricsRow, TimingRow};
pub use run::{run_experiment, run_grid, standalone_bundle, ExperimentOutput, Grid, GRID_PARTICIPANTS, GRID_RATIOS};

/// What a run trains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RunStrategy {
    /// Centralized training on the undivided graph.
    Entire,
    /// One participant alone on its own view.
    Standalone(usize),
    Split(Strategy),
}

impl fmt::Display for RunStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunStrategy::Entire => write!(f, "entire"),
            RunStrategy::Standalone(i) => write!(f, "standalone_{i}"),
            RunStrategy::Split(Strategy::Average) => write!(f, "split_m"),
            RunStrategy::Split(Strategy::Concat) => write!(f, "split_c"),
            RunStrategy::Split(Strategy::Weighted) => write!(f, "split_w"),
        }
    }
}

impl FromStr for RunStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "entire" => RunStrategy::Entire,
            "split_m" => RunStrategy::Split(Strategy::Average),
            "split_c" => RunStrategy::Split(Strategy::Concat),
            "split_w" => RunStrategy::Split(Strategy::Weighted),
            _ => match s.strip_prefix("standalone_").map(str::parse) {
                Some(Ok(i)) => RunStrategy::Standalone(i),
                _ => return Err(Error::Config(format!("unknown strategy {s:?}"))),
            },
        })
    }
}

impl Serialize for RunStrategy {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for RunStrategy {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    /// Directory in the TSV dataset layout.
    Path(PathBuf),
    Synthetic(SyntheticSpec),
}

impl DataSource {
    pub fn load(&self) -> Result<DatasetBundle> {
        match self {
            DataSource::Path(p) => load_dataset(p),
            DataSource::Synthetic(spec) => generate_synthetic(spec),
        }
    }
}

fn default_participants() -> usize {
    2
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DataSource,
    #[serde(default = "default_participants")]
    pub participants: usize,
    /// Share of features and edges per participant; equal when absent.
    #[serde(default)]
    pub ratio: Option<Vec<f64>>,
    #[serde(default)]
    pub label_holder: usize,
    /// Relations owned by one participant instead of being dealt by ratio.
    #[serde(default)]
    pub relation_owners: BTreeMap<String, RelationOwner>,
    pub strategy: RunStrategy,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub session: SessionConfig,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn ratio(&self) -> Vec<f64> {
        self.ratio.clone().unwrap_or_else(|| vec![1.0; self.participants])
    }

    /// Ratio as `a:b:...`, for reports.
    pub fn ratio_label(&self) -> String {
        self.ratio()
            .iter()
            .map(|r| format!("{r}"))
            .collect::<Vec<_>>()
            .join(":")
    }

    pub fn validate(&self) -> Result<()> {
        if self.participants == 0 {
            return Err(Error::Config("participant count must be positive".into()));
        }
        let ratio = self.ratio();
        if ratio.len() != self.participants {
            return Err(Error::Config(format!(
                "ratio has {} entries for {} participants",
                ratio.len(),
                self.participants
            )));
        }
        if let Some(r) = ratio.iter().find(|r| !(r.is_finite() && **r > 0.0)) {
            return Err(Error::Config(format!("ratio entry {r} must be positive")));
        }
        if self.label_holder >= self.participants {
            return Err(Error::Config(format!(
                "label holder {} is not one of {} participants",
                self.label_holder, self.participants
            )));
        }
        if let RunStrategy::Standalone(i) = self.strategy {
            if i >= self.participants {
                return Err(Error::Config(format!("standalone_{i} names a missing participant")));
            }
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        self.session.validate()
    }

    /// First 16 hex digits of SHA-256 over the config with seeds removed.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.seeds.clear();
        c.session.seed = 0;
        let text = serde_json::to_string(&c).expect("config serializes");
        hex::encode(&Sha256::digest(text.as_bytes())[..8])
    }
}
