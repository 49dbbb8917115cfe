use std::fs;

use splitgnn_core::experiment::{
    comm_cost_fl, comm_cost_sl, emit_report, read_cost, read_metrics, run_experiment, run_grid,
    DataSource, ExperimentConfig, Grid, MetricsRow, RunStrategy, DEFAULT_MODEL_SIZES,
};
use splitgnn_core::graph::{generate_synthetic, SyntheticSpec};
use splitgnn_core::models::{EncoderConfig, ModelKind};
use splitgnn_core::protocol::{SessionConfig, Strategy};
use splitgnn_core::Error;

fn tiny_spec(seed: u64) -> SyntheticSpec {
    let mut s = SyntheticSpec::desk_benchmark(seed);
    s.node_types[0].count = 90;
    s.node_types[1].count = 40;
    s.node_types[2].count = 15;
    s.feature_dim = 12;
    s
}

fn tiny(strategy: RunStrategy) -> ExperimentConfig {
    ExperimentConfig {
        dataset: DataSource::Synthetic(tiny_spec(3)),
        participants: 2,
        ratio: None,
        label_holder: 0,
        relation_owners: Default::default(),
        strategy,
        seeds: vec![0],
        session: SessionConfig {
            encoder: EncoderConfig {
                hidden: 8,
                ..Default::default()
            },
            batch_size: 16,
            epochs: 2,
            key_bits: 512,
            ..Default::default()
        },
    }
}

fn final_f1(rows: &[MetricsRow], seed: u64) -> f64 {
    rows.iter().rfind(|r| r.seed == seed).unwrap().test_f1
}

#[test]
fn centralized_gcn_beats_majority_class() {
    let mut spec = SyntheticSpec::desk_benchmark(5);
    spec.node_types[0].count = 600;
    spec.node_types[1].count = 270;
    spec.node_types[2].count = 130;
    let bundle = generate_synthetic(&spec).unwrap();
    let labels = bundle.graph.labels.as_ref().unwrap();
    let mut counts = vec![0usize; labels.num_classes];
    for &v in &bundle.splits.test {
        counts[labels.classes[v].unwrap()] += 1;
    }
    let majority = *counts.iter().max().unwrap() as f64 / bundle.splits.test.len() as f64;

    let mut c = tiny(RunStrategy::Entire);
    c.dataset = DataSource::Synthetic(spec);
    c.session.encoder = EncoderConfig {
        kind: ModelKind::Gcn,
        hidden: 16,
        ..Default::default()
    };
    c.session.batch_size = 128;
    c.session.epochs = 10;
    c.session.learning_rate = 0.05;
    c.session.optimizer = splitgnn_core::OptimizerKind::Adam;
    let out = run_experiment(&c).unwrap();
    let f1 = final_f1(&out.rows, 0);
    assert!(f1 > majority + 0.05, "gcn {f1} vs majority {majority}");
}

#[test]
fn single_participant_split_reproduces_entire() {
    let mut entire = tiny(RunStrategy::Entire);
    entire.participants = 1;
    entire.session.encoder.dropout = 0.2;
    let split = ExperimentConfig {
        strategy: RunStrategy::Split(Strategy::Concat),
        ..entire.clone()
    };
    let a = run_experiment(&entire).unwrap();
    let b = run_experiment(&split).unwrap();
    assert_eq!(a.rows.len(), b.rows.len());
    for (x, y) in a.rows.iter().zip(&b.rows) {
        assert!((x.train_loss - y.train_loss).abs() <= 1e-9, "{} vs {}", x.train_loss, y.train_loss);
        assert_eq!(x.test_f1, y.test_f1);
    }
}

#[test]
fn two_seeds_give_two_groups_under_one_digest() {
    let mut c = tiny(RunStrategy::Split(Strategy::Average));
    c.seeds = vec![4, 9];
    let out = run_experiment(&c).unwrap();
    assert_eq!(out.rows.len(), 2 * c.session.epochs);
    assert!(out.rows.iter().all(|r| r.digest == c.digest()));
    assert_eq!(out.rows.iter().filter(|r| r.seed == 4).count(), c.session.epochs);
    assert_eq!(out.cost.len(), 2);
    assert_ne!(out.rows[0].train_loss, out.rows[2].train_loss);
    let other = ExperimentConfig {
        participants: 3,
        ..c.clone()
    };
    assert_ne!(other.digest(), c.digest());
}

#[test]
fn standalone_for_non_holder_is_flagged() {
    let out = run_experiment(&tiny(RunStrategy::Standalone(1))).unwrap();
    assert!(out.rows.iter().all(|r| r.labels_granted));
    let out = run_experiment(&tiny(RunStrategy::Standalone(0))).unwrap();
    assert!(out.rows.iter().all(|r| !r.labels_granted));
    assert!(out.cost.is_empty());
}

#[test]
fn micro_f1_stays_in_unit_interval() {
    for s in [Strategy::Average, Strategy::Concat, Strategy::Weighted] {
        let out = run_experiment(&tiny(RunStrategy::Split(s))).unwrap();
        for r in &out.rows {
            assert!((0.0..=1.0).contains(&r.val_f1) && (0.0..=1.0).contains(&r.test_f1));
            assert!(r.train_loss.is_finite());
        }
    }
}

#[test]
fn measured_split_bytes_equal_transcript_sum() {
    let out = run_experiment(&tiny(RunStrategy::Split(Strategy::Concat))).unwrap();
    let t: Vec<_> = out.transcripts.iter().map(|(_, _, t)| t).collect();
    assert_eq!(out.cost[0].sl_bytes, comm_cost_sl(t));
    let row = &out.cost[0];
    assert_eq!(row.fl_bytes, comm_cost_fl(2, row.model_params, row.rounds));
}

#[test]
fn fl_cost_formula() {
    assert_eq!(comm_cost_fl(1, 1, 1), 16);
    assert_eq!(comm_cost_fl(8, 1_000_000, 5), 640_000_000);
    for i in 1..10 {
        assert_eq!(comm_cost_fl(2 * i, 777, 3), 2 * comm_cost_fl(i, 777, 3));
    }
}

#[test]
fn secure_mode_costs_more_than_plaintext() {
    let plain = run_experiment(&tiny(RunStrategy::Split(Strategy::Average))).unwrap();
    let mut c = tiny(RunStrategy::Split(Strategy::Average));
    c.session.secure = true;
    c.session.epochs = 1;
    let secure = run_experiment(&c).unwrap();
    let plain_round = plain.transcripts[0].2.round(1).total_bytes();
    let secure_round = secure.transcripts[0].2.round(1).total_bytes();
    assert!(secure_round > plain_round, "{secure_round} vs {plain_round}");
}

#[test]
fn report_round_trips_and_is_idempotent() {
    let out = run_experiment(&tiny(RunStrategy::Split(Strategy::Weighted))).unwrap();
    let dir = tempfile::tempdir().unwrap();
    emit_report(dir.path(), &out.rows, &out.cost, &out.timing).unwrap();
    let metrics = fs::read(dir.path().join("metrics.csv")).unwrap();
    let cost = fs::read(dir.path().join("cost.csv")).unwrap();
    assert_eq!(read_metrics(&dir.path().join("metrics.csv")).unwrap(), out.rows);
    assert_eq!(read_cost(&dir.path().join("cost.csv")).unwrap(), out.cost);
    emit_report(dir.path(), &out.rows, &out.cost, &out.timing).unwrap();
    assert_eq!(fs::read(dir.path().join("metrics.csv")).unwrap(), metrics);
    assert_eq!(fs::read(dir.path().join("cost.csv")).unwrap(), cost);
}

#[test]
fn single_row_report_has_two_lines() {
    let out = run_experiment(&tiny(RunStrategy::Entire)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    emit_report(dir.path(), &out.rows[..1], &[], &[]).unwrap();
    let text = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(text.lines().count(), 2);
    assert!(text.starts_with("digest,strategy,model,participants,ratio,seed,epoch,train_loss,val_f1,test_f1,labels_granted\n"));
    let cost = fs::read_to_string(dir.path().join("cost.csv")).unwrap();
    assert_eq!(cost.lines().count(), 1);
}

#[test]
fn empty_rows_and_unwritable_paths_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(emit_report(dir.path(), &[], &[], &[]), Err(Error::Input(_))));
    let out = run_experiment(&tiny(RunStrategy::Entire)).unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let err = emit_report(&blocker.join("sub"), &out.rows, &[], &[]).unwrap_err();
    assert!(matches!(err, Error::Io { .. }), "{err}");
}

#[test]
fn grid_rerun_is_byte_identical() {
    let base = tiny(RunStrategy::Split(Strategy::Concat));
    let write = |grid| {
        let out = run_grid(&base, grid).unwrap();
        let dir = tempfile::tempdir().unwrap();
        emit_report(dir.path(), &out.rows, &out.cost, &out.timing).unwrap();
        (
            fs::read(dir.path().join("metrics.csv")).unwrap(),
            fs::read(dir.path().join("cost.csv")).unwrap(),
        )
    };
    assert_eq!(write(Grid::Table3), write(Grid::Table3));
}

#[test]
fn cost_grid_prices_every_model_size() {
    let mut base = tiny(RunStrategy::Split(Strategy::Concat));
    base.session.epochs = 1;
    let out = run_grid(&base, Grid::Cost).unwrap();
    assert_eq!(out.cost.len(), 3 * DEFAULT_MODEL_SIZES.len());
    for row in &out.cost {
        assert_eq!(row.fl_bytes, comm_cost_fl(row.participants, row.model_params, row.rounds));
    }
}

#[test]
fn table1_grid_covers_models_and_strategies() {
    let points = Grid::Table1.points(&tiny(RunStrategy::Entire));
    assert_eq!(points.len(), 3 * 6);
    let names: Vec<String> = points[..6].iter().map(|p| p.strategy.to_string()).collect();
    assert_eq!(names, ["entire", "standalone_0", "standalone_1", "split_m", "split_c", "split_w"]);
}

#[test]
fn bad_configs_are_config_errors() {
    let text = serde_json::to_string(&tiny(RunStrategy::Entire)).unwrap();
    assert!(ExperimentConfig::from_json(&text).is_ok());
    let unknown = text.replacen('{', "{\"bogus\":1,", 1);
    assert!(matches!(ExperimentConfig::from_json(&unknown), Err(Error::Config(_))));
    let mut c = tiny(RunStrategy::Entire);
    c.ratio = Some(vec![1.0, 0.0]);
    assert!(matches!(run_experiment(&c), Err(Error::Config(_))));
    assert!(matches!("table9".parse::<Grid>(), Err(Error::Config(_))));
    assert!(matches!("split_x".parse::<RunStrategy>(), Err(Error::Config(_))));
}
