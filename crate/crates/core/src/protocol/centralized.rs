//! The same model trained on one tape over an undivided graph.

use std::rc::Rc;

use super::server::{OutputHead, ServerNet};
use super::session::{encoder_seed, head_seed, predict, server_seed};
use super::{argmax_rows, micro_f1, SessionConfig, SplitKind, Trainer, SERVER_PARTY};
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::graph::DatasetBundle;
use crate::models::{local_embed, Encoder, ForwardCtx};
use crate::nn::DropoutKey;
use crate::optim::Optimizer;
use crate::tensor::Tensor;

/// Encoder, server network and output layer as one model. Parameters are
/// initialised exactly as participant 0, the server and the label holder of
/// a split session with the same seed.
#[derive(Clone, Debug)]
pub struct CentralizedModel {
    pub config: SessionConfig,
    pub bundle: DatasetBundle,
    pub encoder: Encoder,
    pub net: ServerNet,
    pub head: OutputHead,
    opts: [Optimizer; 3],
    step: u64,
}

impl CentralizedModel {
    pub fn new(bundle: DatasetBundle, config: SessionConfig) -> Result<Self> {
        config.validate()?;
        bundle.validate()?;
        let classes = bundle
            .graph
            .num_classes()
            .ok_or_else(|| Error::Role("centralized training needs labels".into()))?;
        let d = config.encoder.hidden;
        let encoder = Encoder::new(
            &config.encoder,
            &bundle.graph.schema(),
            &bundle.metapaths,
            encoder_seed(config.seed, 0),
        )?;
        let net = ServerNet::new(d, d, classes, config.cut, config.server_dropout, server_seed(config.seed));
        let head = OutputHead::new(d, classes, config.cut, head_seed(config.seed));
        let opt = || Optimizer::new(config.optimizer, config.learning_rate);
        Ok(CentralizedModel {
            opts: [opt(), opt(), opt()],
            step: 1,
            config,
            bundle,
            encoder,
            net,
            head,
        })
    }

    /// Trainable scalars across encoder, server network and output layer.
    pub fn num_params(&self) -> usize {
        self.encoder.params().num_scalars() + self.net.params.num_scalars() + self.head.params.num_scalars()
    }

    fn nodes(&self, batch: &[usize]) -> Result<Vec<usize>> {
        let train = &self.bundle.splits.train;
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

    /// Loss and gradients `[encoder, server, head]` over training positions `batch`.
    pub fn loss_and_grads(&self, batch: &[usize], training: bool) -> Result<(f64, [Vec<Tensor>; 3])> {
        let nodes = self.nodes(batch)?;
        let g = &self.bundle.graph;
        let labels = nodes
            .iter()
            .map(|&v| g.label(v).ok_or_else(|| Error::Input(format!("node {} has no label", g.external_ids[v]))))
            .collect::<Result<Vec<_>>>()?;
        let plan = self.encoder.plan(g, &nodes, self.config.node_budget)?;
        let mut tape = Tape::new();
        let eb = self.encoder.params().register(&mut tape);
        let key = DropoutKey {
            seed: self.config.seed,
            party: 0,
            layer: 0,
            step: self.step,
        };
        let h = self.encoder.forward(&mut tape, &eb, g, &plan, ForwardCtx { key, training })?;
        let sb = self.net.params.register(&mut tape);
        let skey = DropoutKey {
            party: SERVER_PARTY,
            ..key
        };
        let out = self.net.forward(&mut tape, &sb, h, skey, training)?;
        let hb = self.head.params.register(&mut tape);
        let logits = self.head.forward(&mut tape, &hb, out)?;
        let loss = tape.cross_entropy(logits, Rc::new(labels))?;
        let grads = tape.backward(loss)?;
        Ok((
            tape.value(loss).data()[0],
            [
                self.encoder.params().collect_grads(&eb, &grads),
                self.net.params.collect_grads(&sb, &grads),
                self.head.params.collect_grads(&hb, &grads),
            ],
        ))
    }

    pub fn train_round(&mut self, batch: &[usize]) -> Result<f64> {
        let (loss, [ge, gs, gh]) = self.loss_and_grads(batch, true)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("loss became {loss} at step {}", self.step)));
        }
        self.opts[0].step(self.encoder.params_mut(), &ge)?;
        self.opts[1].step(&mut self.net.params, &gs)?;
        self.opts[2].step(&mut self.head.params, &gh)?;
        self.step += 1;
        Ok(loss)
    }

    pub fn evaluate(&self, split: SplitKind) -> Result<f64> {
        let s = &self.bundle.splits;
        let nodes = match split {
            SplitKind::Train => &s.train,
            SplitKind::Val => &s.val,
            SplitKind::Test => &s.test,
        };
        if nodes.is_empty() {
            return Err(Error::Domain(format!("{split:?} split is empty")));
        }
        let g = &self.bundle.graph;
        let mut preds = Vec::with_capacity(nodes.len());
        for chunk in nodes.chunks(self.config.batch_size) {
            let h = local_embed(&self.encoder, g, chunk)?;
            preds.extend(argmax_rows(&predict(&self.net, &self.head, &h)?));
        }
        let labels = nodes
            .iter()
            .map(|&v| g.label(v).ok_or_else(|| Error::Input(format!("node {} has no label", g.external_ids[v]))))
            .collect::<Result<Vec<_>>>()?;
        micro_f1(&preds, &labels)
    }
}

impl Trainer for CentralizedModel {
    fn train_len(&self) -> Result<usize> {
        Ok(self.bundle.splits.train.len())
    }

    fn train_batch(&mut self, batch: &[usize]) -> Result<f64> {
        self.train_round(batch)
    }

    fn evaluate(&self, split: SplitKind) -> Result<f64> {
        CentralizedModel::evaluate(self, split)
    }
}
