//! Per-seed execution of one config and of the predefined grids.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use super::cost::{comm_cost_fl, cost_sweep, CostRow, DEFAULT_MODEL_SIZES};
use super::report::{MetricsRow, TimingRow};
use super::{ExperimentConfig, RunStrategy};
use crate::error::{Error, Result};
use crate::graph::{vertical_partition, DatasetBundle, ParticipantView, PartitionSpec};
use crate::models::ModelKind;
use crate::protocol::{fit, CentralizedModel, Session, SessionConfig, SplitKind, Strategy, Trainer};
use crate::transcript::Transcript;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExperimentOutput {
    pub rows: Vec<MetricsRow>,
    pub cost: Vec<CostRow>,
    pub timing: Vec<TimingRow>,
    /// Training transcripts of split runs as `(config digest, seed, transcript)`.
    pub transcripts: Vec<(String, u64, Transcript)>,
}

impl ExperimentOutput {
    pub fn extend(&mut self, other: ExperimentOutput) {
        self.rows.extend(other.rows);
        self.cost.extend(other.cost);
        self.timing.extend(other.timing);
        self.transcripts.extend(other.transcripts);
    }
}

fn model_name(kind: ModelKind) -> &'static str {
    match kind {
        ModelKind::Hat => "hat",
        ModelKind::Gcn => "gcn",
        ModelKind::Gat => "gat",
    }
}

/// Participant `view` alone, with read access to the full graph's labels and splits.
pub fn standalone_bundle(view: &ParticipantView, full: &DatasetBundle) -> DatasetBundle {
    let mut graph = view.graph.clone();
    graph.labels = full.graph.labels.clone();
    DatasetBundle {
        graph,
        metapaths: view.metapaths.clone(),
        splits: full.splits.clone(),
    }
}

struct SeedRun<'a> {
    config: &'a ExperimentConfig,
    digest: &'a str,
    seed: u64,
    started: Instant,
    labels_granted: bool,
    out: ExperimentOutput,
}

impl SeedRun<'_> {
    fn train<T: Trainer>(&mut self, trainer: &mut T, session: &SessionConfig) -> Result<usize> {
        let mut epochs = 0;
        let strategy = self.config.strategy.to_string();
        let model = model_name(session.encoder.kind).to_string();
        fit(trainer, session, |epoch, loss, t| {
            epochs = epoch + 1;
            self.out.rows.push(MetricsRow {
                digest: self.digest.to_string(),
                strategy: strategy.clone(),
                model: model.clone(),
                participants: self.config.participants,
                ratio: self.config.ratio_label(),
                seed: self.seed,
                epoch,
                train_loss: loss,
                val_f1: t.evaluate(SplitKind::Val)?,
                test_f1: t.evaluate(SplitKind::Test)?,
                labels_granted: self.labels_granted,
            });
            self.out.timing.push(TimingRow {
                digest: self.digest.to_string(),
                strategy: strategy.clone(),
                seed: self.seed,
                epoch,
                wall_seconds: self.started.elapsed().as_secs_f64(),
            });
            Ok(())
        })?;
        Ok(epochs)
    }
}

/// Trains the configured strategy once per seed and collects reports.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    config.validate()?;
    let bundle = config.dataset.load()?;
    bundle.validate()?;
    let digest = config.digest();
    let mut out = ExperimentOutput::default();
    for &seed in &config.seeds {
        let session = SessionConfig {
            seed,
            ..config.session.clone()
        };
        let views = || -> Result<Vec<ParticipantView>> {
            let mut spec = PartitionSpec::from_ratio(bundle.graph.feature_dim(), &config.ratio(), config.label_holder)?;
            spec.relations = config.relation_owners.clone();
            vertical_partition(&bundle, &spec, seed)
        };
        let mut run = SeedRun {
            config,
            digest: &digest,
            seed,
            started: Instant::now(),
            labels_granted: false,
            out: ExperimentOutput::default(),
        };
        match config.strategy {
            RunStrategy::Entire => {
                let mut m = CentralizedModel::new(bundle.clone(), session.clone())?;
                run.train(&mut m, &session)?;
            }
            RunStrategy::Standalone(i) => {
                let views = views()?;
                if i != config.label_holder {
                    log::info!("standalone_{i}: participant {i} is granted read access to labels");
                    run.labels_granted = true;
                }
                let mut m = CentralizedModel::new(standalone_bundle(&views[i], &bundle), session.clone())?;
                run.train(&mut m, &session)?;
            }
            RunStrategy::Split(strategy) => {
                let session = SessionConfig { strategy, ..session };
                let mut s = Session::new(views()?, session.clone())?;
                s.align()?;
                let epochs = run.train(&mut s, &session)?;
                let model_params = CentralizedModel::new(bundle.clone(), session.clone())?.num_params() as u64;
                let t = s.transcript().clone();
                let participants = config.participants as u64;
                run.out.cost.push(CostRow {
                    digest: digest.clone(),
                    seed,
                    participants,
                    batch_size: session.batch_size as u64,
                    hidden: session.encoder.hidden as u64,
                    rounds: epochs as u64,
                    batch_rounds: s.round().saturating_sub(1),
                    model_params,
                    sl_bytes: t.total_bytes(),
                    fl_bytes: comm_cost_fl(participants, model_params, epochs as u64),
                });
                run.out.transcripts.push((digest.clone(), seed, t));
            }
        }
        out.extend(run.out);
    }
    Ok(out)
}

/// Predefined experiment grids.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Grid {
    /// Every strategy for GCN, GAT and HAT.
    Table1,
    /// `split_c` with 2, 4 and 8 equal participants.
    Table2,
    /// `split_c` with two participants at ratios 5:5, 3:7 and 1:9.
    Table3,
    /// Split runs at 2, 4 and 8 participants, priced against each model size.
    Cost,
}

impl FromStr for Grid {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table1" => Ok(Grid::Table1),
            "table2" => Ok(Grid::Table2),
            "table3" => Ok(Grid::Table3),
            "cost" => Ok(Grid::Cost),
            _ => Err(Error::Config(format!("unknown grid {s:?}; expected table1, table2, table3 or cost"))),
        }
    }
}

impl fmt::Display for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Grid::Table1 => "table1",
            Grid::Table2 => "table2",
            Grid::Table3 => "table3",
            Grid::Cost => "cost",
        })
    }
}

pub const GRID_PARTICIPANTS: [usize; 3] = [2, 4, 8];
pub const GRID_RATIOS: [[f64; 2]; 3] = [[5.0, 5.0], [3.0, 7.0], [1.0, 9.0]];

impl Grid {
    /// The configs this grid runs, derived from `base`.
    pub fn points(self, base: &ExperimentConfig) -> Vec<ExperimentConfig> {
        let with = |participants: usize, ratio: Option<Vec<f64>>, strategy: RunStrategy| ExperimentConfig {
            participants,
            ratio,
            strategy,
            label_holder: base.label_holder.min(participants - 1),
            ..base.clone()
        };
        let split_c = RunStrategy::Split(Strategy::Concat);
        match self {
            Grid::Table1 => [ModelKind::Gcn, ModelKind::Gat, ModelKind::Hat]
                .into_iter()
                .flat_map(|kind| {
                    let mut strategies = vec![RunStrategy::Entire];
                    strategies.extend((0..base.participants).map(RunStrategy::Standalone));
                    strategies.extend(
                        [Strategy::Average, Strategy::Concat, Strategy::Weighted].map(RunStrategy::Split),
                    );
                    strategies.into_iter().map(move |s| {
                        let mut c = with(base.participants, base.ratio.clone(), s);
                        c.session.encoder.kind = kind;
                        c
                    })
                })
                .collect(),
            Grid::Table2 => GRID_PARTICIPANTS.iter().map(|&i| with(i, None, split_c)).collect(),
            Grid::Table3 => GRID_RATIOS.iter().map(|r| with(2, Some(r.to_vec()), split_c)).collect(),
            Grid::Cost => {
                let s = match base.strategy {
                    RunStrategy::Split(_) => base.strategy,
                    _ => split_c,
                };
                GRID_PARTICIPANTS.iter().map(|&i| with(i, None, s)).collect()
            }
        }
    }
}

pub fn run_grid(base: &ExperimentConfig, grid: Grid) -> Result<ExperimentOutput> {
    let mut out = ExperimentOutput::default();
    for point in grid.points(base) {
        log::info!("{grid}: {} with {} participants ({})", point.strategy, point.participants, point.ratio_label());
        out.extend(run_experiment(&point)?);
    }
    if grid == Grid::Cost {
        out.cost = cost_sweep(&out.cost, &DEFAULT_MODEL_SIZES);
    }
    Ok(out)
}
