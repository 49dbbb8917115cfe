mod common;

use common::{bundle20, random_tensor};
use proptest::prelude::*;
use splitgnn_core::graph::{vertical_partition, PartitionSpec};
use splitgnn_core::models::{EncoderConfig, ModelKind};
use splitgnn_core::privacy::transcript_audit;
use splitgnn_core::protocol::{
    combine_average, combine_concat, combine_weighted, micro_f1, route_gradient, CentralizedModel, Cut,
    SessionConfig, Session, SplitKind, Strategy,
};
use splitgnn_core::transcript::MessageKind;
use splitgnn_core::{finite_diff_check, Error, ParamSet, Tensor};

fn config(kind: ModelKind, strategy: Strategy) -> SessionConfig {
    SessionConfig {
        strategy,
        batch_size: 4,
        encoder: EncoderConfig {
            kind,
            layers: 2,
            hidden: 4,
            heads: 2,
            dropout: 0.2,
            ..EncoderConfig::default()
        },
        seed: 17,
        learning_rate: 0.05,
        key_bits: 512,
        ..SessionConfig::default()
    }
}

fn session(parties: usize, cfg: SessionConfig) -> Session {
    let bundle = bundle20(3);
    let spec = PartitionSpec::even(bundle.graph.feature_dim(), parties).unwrap();
    let views = vertical_partition(&bundle, &spec, 5).unwrap();
    let mut s = Session::new(views, cfg).unwrap();
    s.align().unwrap();
    s
}

#[test]
fn single_participant_concat_tracks_centralized_for_fifty_steps() {
    for kind in [ModelKind::Hat, ModelKind::Gcn, ModelKind::Gat] {
        let cfg = config(kind, Strategy::Concat);
        let mut split = session(1, cfg.clone());
        let mut central = CentralizedModel::new(bundle20(3), cfg.clone()).unwrap();
        let sched: Vec<Vec<usize>> = cfg.schedule(8).concat();
        for step in 0..50 {
            let b = &sched[step % sched.len()];
            let a = split.train_round(b).unwrap().loss;
            let c = central.train_round(b).unwrap();
            assert!((a - c).abs() <= 1e-9, "{kind:?} step {step}: {a} vs {c}");
        }
        assert_eq!(split.evaluate(SplitKind::Test).unwrap(), central.evaluate(SplitKind::Test).unwrap());
    }
}

/// Central-difference step for the pipeline checks.
const FD_STEP: f64 = 1e-4;

fn replace(ps: &ParamSet, values: &ParamSet) -> ParamSet {
    let mut out = ps.clone();
    out.values_mut().clone_from_slice(values.values());
    out
}

/// Every parameter of every party against central differences of the split loss.
fn full_pipeline_fd(cfg: SessionConfig, parties: usize) -> f64 {
    let mut s = session(parties, cfg);
    let batch = [0usize, 3, 5, 6, 7];
    let (_, grads) = s.loss_and_grads(&batch, false).unwrap();
    let loss = |s: &Session| s.clone().loss_and_grads(&batch, false).unwrap().0;
    let mut worst = 0.0f64;
    for p in 0..parties {
        let base = s.participants[p].encoder.params().clone();
        let e = finite_diff_check(
            |ps| {
                let mut t = s.clone();
                *t.participants[p].encoder.params_mut() = replace(&base, ps);
                Ok(loss(&t))
            },
            &base,
            &grads.participants[p],
            FD_STEP,
        )
        .unwrap();
        worst = worst.max(e);
    }
    let net = s.server.net.params.clone();
    worst = worst.max(
        finite_diff_check(
            |ps| {
                let mut t = s.clone();
                t.server.net.params = replace(&net, ps);
                Ok(loss(&t))
            },
            &net,
            &grads.server,
            FD_STEP,
        )
        .unwrap(),
    );
    if !grads.omega.is_empty() {
        let om = s.server.omega.clone();
        worst = worst.max(
            finite_diff_check(
                |ps| {
                    let mut t = s.clone();
                    t.server.omega = replace(&om, ps);
                    Ok(loss(&t))
                },
                &om,
                &grads.omega,
                FD_STEP,
            )
            .unwrap(),
        );
    }
    let head = s.head.params.clone();
    worst.max(
        finite_diff_check(
            |ps| {
                let mut t = s.clone();
                t.head.params = replace(&head, ps);
                Ok(loss(&t))
            },
            &head,
            &grads.head,
            FD_STEP,
        )
        .unwrap(),
    )
}

#[test]
fn split_gradients_match_finite_differences() {
    for strategy in [Strategy::Average, Strategy::Concat, Strategy::Weighted] {
        for kind in [ModelKind::Hat, ModelKind::Gcn, ModelKind::Gat] {
            let err = full_pipeline_fd(config(kind, strategy), 2);
            assert!(err < 1e-4, "{kind:?}/{strategy:?}: {err}");
        }
    }
    let logits = SessionConfig {
        cut: Cut::Logits,
        ..config(ModelKind::Hat, Strategy::Weighted)
    };
    assert!(full_pipeline_fd(logits, 2) < 1e-4);
}

#[test]
fn plaintext_round_bytes_follow_message_schema() {
    let (b, d) = (4u64, 4u64);
    for (parties, strategy) in [(2u64, Strategy::Average), (3, Strategy::Weighted), (2, Strategy::Concat)] {
        let mut s = session(parties as usize, config(ModelKind::Gcn, strategy));
        let out = s.train_round(&[0, 1, 2, 3]).unwrap();
        let t = s.transcript().round(out.round);
        assert_eq!(t.bytes_of(MessageKind::Embedding), parties * b * d * 8);
        assert_eq!(t.bytes_of(MessageKind::Hidden), b * d * 8);
        assert_eq!(t.bytes_of(MessageKind::Gradient), b * d * 8 + parties * b * d * 8);
        assert_eq!(out.bytes, t.total_bytes());
    }
}

#[test]
fn identical_seeds_give_identical_runs() {
    let run = || {
        let mut s = session(2, config(ModelKind::Hat, Strategy::Weighted));
        let losses: Vec<f64> = (0..3).map(|_| s.train_round(&[0, 2, 4, 6]).unwrap().loss).collect();
        (losses, s.transcript().clone())
    };
    assert_eq!(run(), run());
}

#[test]
fn training_before_alignment_is_a_protocol_error() {
    let bundle = bundle20(3);
    let views = vertical_partition(&bundle, &PartitionSpec::even(3, 2).unwrap(), 5).unwrap();
    let mut s = Session::new(views, config(ModelKind::Gcn, Strategy::Average)).unwrap();
    assert!(matches!(s.train_round(&[0]), Err(Error::Protocol(_))));
    assert!(matches!(s.evaluate(SplitKind::Val), Err(Error::Protocol(_))));
}

#[test]
fn session_requires_one_label_holder() {
    let bundle = bundle20(3);
    let mut views = vertical_partition(&bundle, &PartitionSpec::even(3, 2).unwrap(), 5).unwrap();
    views[0].splits = None;
    views[0].graph.labels = None;
    assert!(matches!(
        Session::new(views, config(ModelKind::Gcn, Strategy::Average)),
        Err(Error::Role(_))
    ));
}

#[test]
fn secure_sum_strategies_pass_the_audit() {
    for strategy in [Strategy::Average, Strategy::Weighted] {
        let cfg = SessionConfig {
            secure: true,
            ..config(ModelKind::Gcn, strategy)
        };
        let mut plain = session(2, config(ModelKind::Gcn, strategy));
        let mut secure = session(2, cfg);
        for _ in 0..2 {
            let a = plain.train_round(&[1, 2, 3]).unwrap();
            let b = secure.train_round(&[1, 2, 3]).unwrap();
            assert!((a.loss - b.loss).abs() < 1e-5, "{strategy:?}: {} vs {}", a.loss, b.loss);
            assert!(b.bytes > a.bytes);
        }
        let report = transcript_audit(secure.transcript());
        assert!(report.is_clean(), "{strategy:?}: {:?}", report.findings);
        let t = secure.transcript();
        assert_eq!(t.bytes_of(MessageKind::Embedding), 0);
        for r in t.rounds().into_iter().skip(1) {
            let n = t.round(r).records().iter().filter(|m| m.kind == MessageKind::Decrypt).count();
            assert_eq!(n, 1);
        }
    }
}

#[test]
fn plaintext_and_secure_concat_are_flagged() {
    let mut plain = session(2, config(ModelKind::Gcn, Strategy::Average));
    plain.train_round(&[0, 1]).unwrap();
    plain.train_round(&[2, 3]).unwrap();
    assert_eq!(transcript_audit(plain.transcript()).findings.len(), 4);

    let cfg = SessionConfig {
        secure: true,
        ..config(ModelKind::Gcn, Strategy::Concat)
    };
    let mut s = session(2, cfg);
    s.train_round(&[0, 1]).unwrap();
    let report = transcript_audit(s.transcript());
    assert_eq!(report.findings.len(), 1);
    assert!(report.findings[0].message.contains("decryptions"));
}

#[test]
fn labels_and_output_layer_stay_with_the_label_holder() {
    let mut s = session(3, config(ModelKind::Hat, Strategy::Concat));
    s.train_round(&[0, 1, 2, 3]).unwrap();
    let holder = format!("p{}", s.label_holder());
    for r in s.transcript().records() {
        assert!(!matches!(r.kind, MessageKind::Label | MessageKind::RawFeature | MessageKind::RawId));
        if r.kind == MessageKind::Hidden {
            assert_eq!(r.to, holder);
        }
        if r.from.starts_with('p') && r.from != holder {
            assert!(matches!(r.kind, MessageKind::Embedding | MessageKind::Psi | MessageKind::Gradient));
        }
    }
}

#[test]
fn weighted_with_one_hot_omega_selects_a_participant() {
    let a = random_tensor(1, &[3, 4]);
    let b = random_tensor(2, &[3, 4]);
    let one = Tensor::filled(&[4], 1.0);
    let zero = Tensor::zeros(&[4]);
    assert_eq!(combine_weighted(&[a.clone(), b.clone()], &[one, zero]).unwrap(), a);
}

#[test]
fn micro_f1_matches_confusion_recount() {
    use rand::Rng;
    let mut rng = splitgnn_core::nn::init_rng(4, &[]);
    let labels: Vec<usize> = (0..200).map(|_| rng.random_range(0..4)).collect();
    let preds: Vec<usize> = labels
        .iter()
        .map(|&y| if rng.random::<f64>() < 0.6 { y } else { rng.random_range(0..4) })
        .collect();
    let mut confusion = [[0usize; 4]; 4];
    for (&p, &y) in preds.iter().zip(&labels) {
        confusion[y][p] += 1;
    }
    let tp: usize = (0..4).map(|c| confusion[c][c]).sum();
    let fp: usize = (0..4).map(|c| (0..4).filter(|&y| y != c).map(|y| confusion[y][c]).sum::<usize>()).sum();
    let fn_: usize = (0..4).map(|c| (0..4).filter(|&p| p != c).map(|p| confusion[c][p]).sum::<usize>()).sum();
    let want = 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64;
    assert!((micro_f1(&preds, &labels).unwrap() - want).abs() < 1e-15);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn average_is_the_elementwise_loop_mean(seed in 0u64..1000, parties in 1usize..6, n in 1usize..5, d in 1usize..5) {
        let ts: Vec<Tensor> = (0..parties).map(|p| random_tensor(seed * 10 + p as u64, &[n, d])).collect();
        let got = combine_average(&ts).unwrap();
        for k in 0..n * d {
            let mut s = 0.0;
            for t in &ts {
                s += t.data()[k];
            }
            prop_assert!((got.data()[k] - s / parties as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn routed_gradients_reassemble(seed in 0u64..1000, parties in 1usize..6, n in 1usize..5, d in 1usize..5) {
        let g = random_tensor(seed, &[n, parties * d]);
        let parts = route_gradient(&g, Strategy::Concat, &[], parties, d).unwrap();
        prop_assert_eq!(combine_concat(&parts).unwrap(), g);
        let g = random_tensor(seed, &[n, d]);
        for part in route_gradient(&g, Strategy::Average, &[], parties, d).unwrap() {
            prop_assert!(part.map(|v| v * parties as f64).max_abs_diff(&g) < 1e-12);
        }
    }

    #[test]
    fn permuting_participants_permutes_column_blocks(seed in 0u64..1000, n in 1usize..4) {
        let a = random_tensor(seed, &[n, 2]);
        let b = random_tensor(seed + 1, &[n, 3]);
        let ab = combine_concat(&[a.clone(), b.clone()]).unwrap();
        let ba = combine_concat(&[b, a]).unwrap();
        prop_assert_eq!(ab.slice_cols(0, 2).unwrap(), ba.slice_cols(3, 5).unwrap());
        prop_assert_eq!(ab.slice_cols(2, 5).unwrap(), ba.slice_cols(0, 3).unwrap());
    }
}
