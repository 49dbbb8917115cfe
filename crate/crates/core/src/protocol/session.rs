//! In-process orchestration of one split-learning session.

use std::collections::HashMap;

use super::server::{label_forward_loss, OutputHead, ServerNet};
use super::{
    argmax_rows, combine_average, combine_concat, combine_weighted, micro_f1, omega_gradient, route_gradient,
    SessionConfig, SplitKind, Strategy, Trainer, SERVER_PARTY,
};
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::graph::{HetGraph, ParticipantView};
use crate::models::{local_embed, Encoder, ForwardCtx};
use crate::nn::{mix_seed, DropoutKey, ParamSet};
use crate::optim::Optimizer;
use crate::privacy::{psi_align, psi_salt, SecureAggregator};
use crate::tensor::Tensor;
use crate::transcript::{party, MessageKind, MessageRecord, Transcript, SERVER};

pub(crate) fn encoder_seed(seed: u64, party: usize) -> u64 {
    mix_seed(seed, &[0xe2c, party as u64])
}

pub(crate) fn server_seed(seed: u64) -> u64 {
    mix_seed(seed, &[0x5e7])
}

pub(crate) fn head_seed(seed: u64) -> u64 {
    mix_seed(seed, &[0x0c7])
}

#[derive(Clone, Debug)]
pub struct ParticipantState {
    pub view: ParticipantView,
    pub encoder: Encoder,
    optimizer: Optimizer,
}

impl ParticipantState {
    pub fn is_label_holder(&self) -> bool {
        self.view.is_label_holder()
    }
}

#[derive(Clone, Debug)]
pub struct ServerState {
    pub strategy: Strategy,
    pub net: ServerNet,
    /// One `[d]` weight vector per participant; empty unless weighted.
    pub omega: ParamSet,
    net_opt: Optimizer,
    omega_opt: Optimizer,
}

/// Result of private set intersection, as positions into `ids`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Alignment {
    pub ids: Vec<String>,
    /// `local[p][k]` is participant `p`'s node index for `ids[k]`.
    pub local: Vec<Vec<usize>>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SessionGrads {
    pub participants: Vec<Vec<Tensor>>,
    pub server: Vec<Tensor>,
    pub omega: Vec<Tensor>,
    pub head: Vec<Tensor>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoundOutcome {
    pub round: u64,
    pub loss: f64,
    pub bytes: u64,
}

#[derive(Clone, Debug)]
pub struct Session {
    pub config: SessionConfig,
    pub participants: Vec<ParticipantState>,
    pub server: ServerState,
    pub head: OutputHead,
    head_opt: Optimizer,
    label_holder: usize,
    alignment: Option<Alignment>,
    transcript: Transcript,
    secure: Option<SecureAggregator>,
    round: u64,
}

impl Session {
    pub fn new(views: Vec<ParticipantView>, config: SessionConfig) -> Result<Self> {
        config.validate()?;
        if views.is_empty() {
            return Err(Error::Input("a session needs at least one participant".into()));
        }
        for (i, v) in views.iter().enumerate() {
            if v.party != i {
                return Err(Error::Input(format!("view {i} belongs to participant {}", v.party)));
            }
        }
        let holders: Vec<usize> = views.iter().filter(|v| v.is_label_holder()).map(|v| v.party).collect();
        if holders.len() != 1 {
            return Err(Error::Role(format!("expected exactly one label holder, found {}", holders.len())));
        }
        let label_holder = holders[0];
        let num_classes = views[label_holder]
            .graph
            .num_classes()
            .ok_or_else(|| Error::Role("label holder has no labels".into()))?;
        let count = views.len();
        let d = config.encoder.hidden;
        let opt = || Optimizer::new(config.optimizer, config.learning_rate);
        let participants = views
            .into_iter()
            .map(|view| {
                let encoder = Encoder::new(
                    &config.encoder,
                    &view.graph.schema(),
                    &view.metapaths,
                    encoder_seed(config.seed, view.party),
                )?;
                Ok(ParticipantState {
                    view,
                    encoder,
                    optimizer: opt(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let input = if config.strategy == Strategy::Concat { count * d } else { d };
        let mut omega = ParamSet::new();
        if config.strategy == Strategy::Weighted {
            for p in 0..count {
                omega.add(format!("omega.p{p}"), Tensor::filled(&[d], 1.0 / count as f64));
            }
        }
        let server = ServerState {
            strategy: config.strategy,
            net: ServerNet::new(input, d, num_classes, config.cut, config.server_dropout, server_seed(config.seed)),
            omega,
            net_opt: opt(),
            omega_opt: opt(),
        };
        let secure = if config.secure {
            Some(SecureAggregator::new(config.key_bits, mix_seed(config.seed, &[0xc1f]))?)
        } else {
            None
        };
        Ok(Session {
            head: OutputHead::new(d, num_classes, config.cut, head_seed(config.seed)),
            head_opt: opt(),
            participants,
            server,
            label_holder,
            alignment: None,
            transcript: Transcript::new(),
            secure,
            round: 0,
            config,
        })
    }

    pub fn label_holder(&self) -> usize {
        self.label_holder
    }

    pub fn transcript(&self) -> &Transcript {
        &self.transcript
    }

    pub fn alignment(&self) -> Option<&Alignment> {
        self.alignment.as_ref()
    }

    /// Index of the next round; round 0 is alignment.
    pub fn round(&self) -> u64 {
        self.round
    }

    fn holder_graph(&self) -> &HetGraph {
        &self.participants[self.label_holder].view.graph
    }

    /// Private set intersection over external ids; restricts every split to aligned nodes.
    pub fn align(&mut self) -> Result<()> {
        if self.alignment.is_some() {
            return Err(Error::Protocol("session is already aligned".into()));
        }
        let salt = psi_salt(mix_seed(self.config.seed, &[0x5a1]));
        let id_sets: Vec<Vec<String>> = self
            .participants
            .iter()
            .map(|p| p.view.graph.external_ids.clone())
            .collect();
        let ids = if id_sets.len() == 1 {
            // Nothing to intersect with a single party.
            let mut ids = id_sets[0].clone();
            ids.sort();
            ids
        } else {
            psi_align(&id_sets, &salt, 0, &mut self.transcript)?
        };
        let position: HashMap<&str, usize> = ids.iter().enumerate().map(|(k, s)| (s.as_str(), k)).collect();
        let local = self
            .participants
            .iter()
            .map(|p| {
                let map: HashMap<&str, usize> = p
                    .view
                    .graph
                    .external_ids
                    .iter()
                    .enumerate()
                    .map(|(v, s)| (s.as_str(), v))
                    .collect();
                ids.iter()
                    .map(|s| {
                        map.get(s.as_str())
                            .copied()
                            .ok_or_else(|| Error::Protocol(format!("participant {} lost an aligned id", p.view.party)))
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let holder = &self.participants[self.label_holder].view;
        let splits = holder.splits.as_ref().ok_or_else(|| Error::Role("label holder has no splits".into()))?;
        let restrict = |nodes: &[usize]| -> Vec<usize> {
            nodes
                .iter()
                .filter_map(|&v| position.get(holder.graph.external_ids[v].as_str()).copied())
                .collect()
        };
        let alignment = Alignment {
            train: restrict(&splits.train),
            val: restrict(&splits.val),
            test: restrict(&splits.test),
            ids: ids.clone(),
            local,
        };
        self.alignment = Some(alignment);
        self.round = 1;
        Ok(())
    }

    fn aligned(&self) -> Result<&Alignment> {
        self.alignment
            .as_ref()
            .ok_or_else(|| Error::Protocol("session has not completed id alignment".into()))
    }

    fn split_positions(&self, split: SplitKind) -> Result<&[usize]> {
        let a = self.aligned()?;
        Ok(match split {
            SplitKind::Train => &a.train,
            SplitKind::Val => &a.val,
            SplitKind::Test => &a.test,
        })
    }

    fn labels_of(&self, ks: &[usize]) -> Result<Vec<usize>> {
        let a = self.aligned()?;
        let g = self.holder_graph();
        ks.iter()
            .map(|&k| {
                let v = a.local[self.label_holder][k];
                g.label(v)
                    .ok_or_else(|| Error::Input(format!("node {} has no label", g.external_ids[v])))
            })
            .collect()
    }

    fn combine(&mut self, hs: &[Tensor], round: u64, log: &mut Transcript) -> Result<Tensor> {
        let strategy = self.server.strategy;
        let omega = self.server.omega.values().to_vec();
        match self.secure.as_mut() {
            None => {
                for (p, h) in hs.iter().enumerate() {
                    log.push(MessageRecord::plain(round, &party(p), SERVER, MessageKind::Embedding, h.numel() as u64));
                }
                match strategy {
                    Strategy::Average => combine_average(hs),
                    Strategy::Concat => combine_concat(hs),
                    Strategy::Weighted => combine_weighted(hs, &omega),
                }
            }
            Some(agg) => match strategy {
                Strategy::Average => {
                    let s = agg.secure_sum(hs, round, log)?;
                    Ok(s.map(|v| v / hs.len() as f64))
                }
                Strategy::Weighted => agg.secure_weighted_sum(hs, &omega, round, log),
                Strategy::Concat => {
                    log::warn!("concat has no additive aggregate; decrypting each participant separately");
                    combine_concat(&agg.secure_blocks(hs, round, log)?)
                }
            },
        }
    }

    /// One forward and backward pass over aligned positions `ks`; parameters are untouched.
    fn forward_backward(&mut self, ks: &[usize], training: bool, round: u64) -> Result<(f64, SessionGrads, Transcript)> {
        if ks.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let mut log = Transcript::new();
        let labels = self.labels_of(ks)?;
        let a = self.aligned()?.clone();
        let cfg = &self.config;
        let n = self.participants.len();
        let d = cfg.encoder.hidden;

        let mut locals = Vec::with_capacity(n);
        let mut hs = Vec::with_capacity(n);
        for (p, part) in self.participants.iter().enumerate() {
            let nodes: Vec<usize> = ks.iter().map(|&k| a.local[p][k]).collect();
            let plan = part.encoder.plan(&part.view.graph, &nodes, cfg.node_budget)?;
            let mut tape = Tape::new();
            let bound = part.encoder.params().register(&mut tape);
            let ctx = ForwardCtx {
                key: DropoutKey {
                    seed: cfg.seed,
                    party: p as u64,
                    layer: 0,
                    step: round,
                },
                training,
            };
            let h = part.encoder.forward(&mut tape, &bound, &part.view.graph, &plan, ctx)?;
            hs.push(tape.value(h).clone());
            locals.push((tape, bound, h));
        }

        let x = self.combine(&hs, round, &mut log)?;
        let net = &self.server.net;
        let mut st = Tape::new();
        let sb = net.params.register(&mut st);
        let xv = st.leaf(x);
        let key = DropoutKey {
            seed: self.config.seed,
            party: SERVER_PARTY,
            layer: 0,
            step: round,
        };
        let out = net.forward(&mut st, &sb, xv, key, training)?;
        let out_val = st.value(out).clone();
        let holder = party(self.label_holder);
        log.push(MessageRecord::plain(round, SERVER, &holder, MessageKind::Hidden, out_val.numel() as u64));

        let ll = label_forward_loss(&self.head, &out_val, Some(&labels))?;
        log.push(MessageRecord::plain(round, &holder, SERVER, MessageKind::Gradient, ll.grad_hidden.numel() as u64));

        let sg = st.backward_with_seed(out, &ll.grad_hidden)?;
        let server_grads = net.params.collect_grads(&sb, &sg);
        let gx = sg.get_or_zeros(xv);
        let omega_vals = self.server.omega.values().to_vec();
        let routed = route_gradient(&gx, self.server.strategy, &omega_vals, n, d)?;
        let weighted = self.server.strategy == Strategy::Weighted;
        let omega_grads: Vec<Tensor> = if weighted {
            hs.iter().map(|h| omega_gradient(&gx, h)).collect()
        } else {
            Vec::new()
        };
        for (p, g) in routed.iter().enumerate() {
            if weighted && self.secure.is_some() {
                // The server never sees h_p: it ships g and ω_p, the participant
                // applies ω_p itself and returns its ω gradient.
                log.push(MessageRecord::plain(round, SERVER, &party(p), MessageKind::Gradient, (gx.numel() + d) as u64));
                log.push(MessageRecord::plain(round, &party(p), SERVER, MessageKind::Gradient, d as u64));
            } else {
                log.push(MessageRecord::plain(round, SERVER, &party(p), MessageKind::Gradient, g.numel() as u64));
            }
        }

        let mut participant_grads = Vec::with_capacity(n);
        for ((tape, bound, h), (part, g)) in locals.iter().zip(self.participants.iter().zip(&routed)) {
            let grads = tape.backward_with_seed(*h, g)?;
            participant_grads.push(part.encoder.params().collect_grads(bound, &grads));
        }
        Ok((
            ll.loss,
            SessionGrads {
                participants: participant_grads,
                server: server_grads,
                omega: omega_grads,
                head: ll.head_grads,
            },
            log,
        ))
    }

    /// Loss and every party's gradients on training positions `batch`, with no
    /// update and nothing logged.
    pub fn loss_and_grads(&mut self, batch: &[usize], training: bool) -> Result<(f64, SessionGrads)> {
        let ks = self.train_positions(batch)?;
        let round = self.round;
        let (loss, grads, _) = self.forward_backward(&ks, training, round)?;
        Ok((loss, grads))
    }

    fn train_positions(&self, batch: &[usize]) -> Result<Vec<usize>> {
        let train = &self.aligned()?.train;
        batch
            .iter()
            .map(|&b| {
                train
                    .get(b)
                    .copied()
                    .ok_or_else(|| Error::Input(format!("batch position {b} outside {} training nodes", train.len())))
            })
            .collect()
    }

    /// One full training round over positions `batch` of the aligned training list.
    pub fn train_round(&mut self, batch: &[usize]) -> Result<RoundOutcome> {
        let ks = self.train_positions(batch)?;
        let round = self.round;
        let (loss, grads, log) = self.forward_backward(&ks, true, round)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("loss became {loss} in round {round}")));
        }
        for (part, g) in self.participants.iter_mut().zip(&grads.participants) {
            part.optimizer.step(part.encoder.params_mut(), g)?;
        }
        self.server.net_opt.step(&mut self.server.net.params, &grads.server)?;
        if !grads.omega.is_empty() {
            self.server.omega_opt.step(&mut self.server.omega, &grads.omega)?;
        }
        self.head_opt.step(&mut self.head.params, &grads.head)?;
        let bytes = log.total_bytes();
        self.transcript.extend(&log);
        self.round += 1;
        Ok(RoundOutcome { round, loss, bytes })
    }

    /// Micro-F1 over an aligned split. Runs in plaintext and logs nothing.
    pub fn evaluate(&self, split: SplitKind) -> Result<f64> {
        let ks = self.split_positions(split)?.to_vec();
        if ks.is_empty() {
            return Err(Error::Domain(format!("{split:?} split has no aligned nodes")));
        }
        let a = self.aligned()?;
        let mut preds = Vec::with_capacity(ks.len());
        for chunk in ks.chunks(self.config.batch_size) {
            let hs = self
                .participants
                .iter()
                .enumerate()
                .map(|(p, part)| {
                    let nodes: Vec<usize> = chunk.iter().map(|&k| a.local[p][k]).collect();
                    local_embed(&part.encoder, &part.view.graph, &nodes)
                })
                .collect::<Result<Vec<_>>>()?;
            let x = match self.server.strategy {
                Strategy::Average => combine_average(&hs)?,
                Strategy::Concat => combine_concat(&hs)?,
                Strategy::Weighted => combine_weighted(&hs, self.server.omega.values())?,
            };
            preds.extend(argmax_rows(&predict(&self.server.net, &self.head, &x)?));
        }
        micro_f1(&preds, &self.labels_of(&ks)?)
    }
}

/// Inference through server and output head.
pub(crate) fn predict(net: &ServerNet, head: &OutputHead, x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let sb = net.params.register(&mut tape);
    let hb = head.params.register(&mut tape);
    let xv = tape.constant(x.clone());
    let key = DropoutKey {
        seed: 0,
        party: SERVER_PARTY,
        layer: 0,
        step: 0,
    };
    let h = net.forward(&mut tape, &sb, xv, key, false)?;
    let logits = head.forward(&mut tape, &hb, h)?;
    Ok(tape.value(logits).clone())
}

impl Trainer for Session {
    fn train_len(&self) -> Result<usize> {
        Ok(self.aligned()?.train.len())
    }

    fn train_batch(&mut self, batch: &[usize]) -> Result<f64> {
        Ok(self.train_round(batch)?.loss)
    }

    fn evaluate(&self, split: SplitKind) -> Result<f64> {
        Session::evaluate(self, split)
    }
}
