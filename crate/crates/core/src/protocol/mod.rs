//! Tripartite split training: participants encode their own graph views,
//! the server combines embeddings and runs its sub-network, and the label
//! holder computes the loss. Gradients travel back across both cuts.

mod centralized;
mod server;
mod session;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::EncoderConfig;
use crate::nn::init_rng;
use crate::optim::OptimizerKind;
use crate::tensor::Tensor;

pub use centralized::CentralizedModel;
pub use server::{label_forward_loss, server_forward, LabelLoss, OutputHead, ServerNet};
pub use session::{Alignment, ParticipantState, RoundOutcome, ServerState, Session, SessionGrads};

/// Dropout stream of the server network; participants use their index.
pub const SERVER_PARTY: u64 = 1 << 20;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Average,
    #[default]
    Concat,
    Weighted,
}

impl Strategy {
    pub fn is_sum(self) -> bool {
        !matches!(self, Strategy::Concat)
    }
}

/// Where the network is split between server and label holder.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Cut {
    /// Server emits the hidden layer; the output layer stays with the label holder.
    #[default]
    Hidden,
    /// Server emits class logits; the label holder only computes the loss.
    Logits,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Train,
    Val,
    Test,
}

fn default_batch() -> usize {
    512
}
fn default_lr() -> f64 {
    0.005
}
fn default_epochs() -> usize {
    5
}
fn default_server_dropout() -> f64 {
    0.3
}
fn default_key_bits() -> u64 {
    2048
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionConfig {
    #[serde(default)]
    pub strategy: Strategy,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub cut: Cut,
    #[serde(default)]
    pub secure: bool,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Train exactly this many batch rounds instead of full epochs.
    #[serde(default)]
    pub strict_rounds: Option<usize>,
    #[serde(default = "default_server_dropout")]
    pub server_dropout: f64,
    #[serde(default = "default_key_bits")]
    pub key_bits: u64,
    /// Cap on nodes touched by one batch's receptive field.
    #[serde(default)]
    pub node_budget: Option<usize>,
}

impl Default for SessionConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

impl SessionConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.server_dropout) {
            return Err(Error::Config(format!("server dropout {} outside [0, 1)", self.server_dropout)));
        }
        if self.secure && !crate::privacy::SUPPORTED_BITS.contains(&self.key_bits) {
            return Err(Error::Config(format!("unsupported key length {}", self.key_bits)));
        }
        if self.strict_rounds == Some(0) {
            return Err(Error::Config("strict round count must be positive".into()));
        }
        Ok(())
    }

    /// Batches of positions into a training list of `len` nodes, grouped by epoch.
    /// Each epoch is a fresh seeded permutation cut into chunks of `batch_size`.
    pub fn schedule(&self, len: usize) -> Vec<Vec<Vec<usize>>> {
        use rand::seq::SliceRandom;
        if len == 0 {
            return Vec::new();
        }
        let per_epoch = len.div_ceil(self.batch_size);
        let epochs = match self.strict_rounds {
            Some(r) => r.div_ceil(per_epoch),
            None => self.epochs,
        };
        let mut left = self.strict_rounds.unwrap_or(usize::MAX);
        let mut out = Vec::with_capacity(epochs);
        for e in 0..epochs {
            let mut order: Vec<usize> = (0..len).collect();
            order.shuffle(&mut init_rng(self.seed, &[0xba7c, e as u64]));
            let batches: Vec<Vec<usize>> = order
                .chunks(self.batch_size)
                .take(left)
                .map(<[usize]>::to_vec)
                .collect();
            left -= batches.len();
            out.push(batches);
        }
        out
    }
}

/// Common driver interface of split sessions and centralized models.
pub trait Trainer {
    fn train_len(&self) -> Result<usize>;
    /// One optimizer step over positions of the training list; returns the loss.
    fn train_batch(&mut self, batch: &[usize]) -> Result<f64>;
    fn evaluate(&self, split: SplitKind) -> Result<f64>;
}

/// Runs `config.schedule`, calling `on_epoch(epoch, mean loss, trainer)` after each epoch.
pub fn fit<T: Trainer>(
    trainer: &mut T,
    config: &SessionConfig,
    mut on_epoch: impl FnMut(usize, f64, &T) -> Result<()>,
) -> Result<Vec<f64>> {
    let len = trainer.train_len()?;
    if len == 0 {
        return Err(Error::Domain("no training nodes".into()));
    }
    let mut losses = Vec::new();
    for (epoch, batches) in config.schedule(len).into_iter().enumerate() {
        let mut total = 0.0;
        for b in &batches {
            let loss = trainer.train_batch(b)?;
            losses.push(loss);
            total += loss;
        }
        on_epoch(epoch, total / batches.len() as f64, trainer)?;
    }
    Ok(losses)
}

fn check_rows(locals: &[Tensor], op: &str) -> Result<()> {
    let first = locals
        .first()
        .ok_or_else(|| Error::Protocol(format!("{op}: no participant embeddings")))?;
    for (i, t) in locals.iter().enumerate() {
        if t.rank() != 2 || t.rows() != first.rows() {
            return Err(Error::Protocol(format!(
                "{op}: participant {i} sent shape {:?}, expected {} rows",
                t.shape(),
                first.rows()
            )));
        }
    }
    Ok(())
}

fn check_same(locals: &[Tensor], op: &str) -> Result<()> {
    check_rows(locals, op)?;
    let d = locals[0].cols();
    if let Some(i) = locals.iter().position(|t| t.cols() != d) {
        return Err(Error::Protocol(format!(
            "{op}: participant {i} sent {} columns, expected {d}",
            locals[i].cols()
        )));
    }
    Ok(())
}

/// Element-wise mean.
pub fn combine_average(locals: &[Tensor]) -> Result<Tensor> {
    check_same(locals, "combine_average")?;
    let mut out = combine_sum(locals);
    let k = locals.len() as f64;
    out.data_mut().iter_mut().for_each(|v| *v /= k);
    Ok(out)
}

fn combine_sum(locals: &[Tensor]) -> Tensor {
    let mut out = locals[0].clone();
    for t in &locals[1..] {
        for (o, v) in out.data_mut().iter_mut().zip(t.data()) {
            *o += v;
        }
    }
    out
}

/// Row-wise concatenation in participant order.
pub fn combine_concat(locals: &[Tensor]) -> Result<Tensor> {
    check_rows(locals, "combine_concat")?;
    let n = locals[0].rows();
    let width: usize = locals.iter().map(Tensor::cols).sum();
    let mut data = Vec::with_capacity(n * width);
    for r in 0..n {
        for t in locals {
            data.extend_from_slice(t.row(r));
        }
    }
    Tensor::matrix(n, width, data)
}

/// `Σ_i ω_i ⊙ locals_i` with each `ω_i` broadcast over rows.
pub fn combine_weighted(locals: &[Tensor], omega: &[Tensor]) -> Result<Tensor> {
    check_same(locals, "combine_weighted")?;
    if omega.len() != locals.len() {
        return Err(Error::Protocol(format!(
            "combine_weighted: {} weight vectors for {} participants",
            omega.len(),
            locals.len()
        )));
    }
    let (n, d) = (locals[0].rows(), locals[0].cols());
    if let Some(i) = omega.iter().position(|w| w.numel() != d) {
        return Err(Error::Protocol(format!(
            "combine_weighted: weight vector {i} has {} entries, expected {d}",
            omega[i].numel()
        )));
    }
    let mut out = Tensor::zeros(&[n, d]);
    for (t, w) in locals.iter().zip(omega) {
        for r in 0..n {
            let row = &mut out.data_mut()[r * d..(r + 1) * d];
            for ((o, v), wv) in row.iter_mut().zip(t.row(r)).zip(w.data()) {
                *o += wv * v;
            }
        }
    }
    Ok(out)
}

/// Gradient at the server input split into one gradient per participant.
/// `d` is the per-participant embedding width.
pub fn route_gradient(g: &Tensor, strategy: Strategy, omega: &[Tensor], parties: usize, d: usize) -> Result<Vec<Tensor>> {
    match strategy {
        Strategy::Average => {
            let k = parties as f64;
            Ok(vec![g.map(|v| v / k); parties])
        }
        Strategy::Concat => {
            if g.cols() != parties * d {
                return Err(Error::Protocol(format!(
                    "gradient has {} columns, expected {parties} blocks of {d}",
                    g.cols()
                )));
            }
            (0..parties).map(|i| g.slice_cols(i * d, (i + 1) * d)).collect()
        }
        Strategy::Weighted => omega
            .iter()
            .map(|w| {
                let mut out = g.clone();
                for r in 0..g.rows() {
                    for (o, wv) in out.data_mut()[r * d..(r + 1) * d].iter_mut().zip(w.data()) {
                        *o *= wv;
                    }
                }
                Ok(out)
            })
            .collect(),
    }
}

/// `∂loss/∂ω_i = Σ_rows g ⊙ h_i`.
pub fn omega_gradient(g: &Tensor, h: &Tensor) -> Tensor {
    let d = h.cols();
    let mut out = vec![0.0; d];
    for r in 0..h.rows() {
        for ((o, gv), hv) in out.iter_mut().zip(g.row(r)).zip(h.row(r)) {
            *o += gv * hv;
        }
    }
    Tensor::vector(out)
}

/// Micro-averaged F1 from pooled per-class counts.
pub fn micro_f1(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::Domain("micro-F1 of an empty split".into()));
    }
    if predictions.len() != labels.len() {
        return Err(Error::Dimension {
            op: "micro_f1",
            lhs: vec![predictions.len()],
            rhs: vec![labels.len()],
        });
    }
    let classes = predictions.iter().chain(labels).max().map_or(0, |m| m + 1);
    let (mut tp, mut fp, mut fn_) = (vec![0u64; classes], vec![0u64; classes], vec![0u64; classes]);
    for (&p, &y) in predictions.iter().zip(labels) {
        if p == y {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[y] += 1;
        }
    }
    let tp: u64 = tp.iter().sum();
    let fp: u64 = fp.iter().sum();
    let fn_: u64 = fn_.iter().sum();
    Ok(2.0 * tp as f64 / (2 * tp + fp + fn_) as f64)
}

/// Row-wise argmax.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0;
            for (c, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse() {
        let c = SessionConfig::default();
        assert_eq!(c.batch_size, 512);
        assert_eq!(c.strategy, Strategy::Concat);
        assert_eq!(c.cut, Cut::Hidden);
        assert!(serde_json::from_str::<SessionConfig>(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn schedule_covers_every_node_once_per_epoch() {
        let c = SessionConfig {
            batch_size: 4,
            epochs: 3,
            ..SessionConfig::default()
        };
        let s = c.schedule(10);
        assert_eq!(s.len(), 3);
        for e in &s {
            assert_eq!(e.len(), 3);
            let mut all: Vec<usize> = e.concat();
            all.sort();
            assert_eq!(all, (0..10).collect::<Vec<_>>());
        }
        assert_ne!(s[0], s[1]);
        let strict = SessionConfig {
            strict_rounds: Some(5),
            ..c
        };
        assert_eq!(strict.schedule(10).iter().map(Vec::len).sum::<usize>(), 5);
    }

    #[test]
    fn combine_examples() {
        let a = Tensor::from_rows(&[[1.0, 3.0]]).unwrap();
        let b = Tensor::from_rows(&[[3.0, 5.0]]).unwrap();
        assert_eq!(combine_average(&[a.clone(), b.clone()]).unwrap().data(), &[2.0, 4.0]);
        let c = Tensor::from_rows(&[[3.0]]).unwrap();
        assert_eq!(combine_concat(&[Tensor::from_rows(&[[1.0, 2.0]]).unwrap(), c]).unwrap().data(), &[1.0, 2.0, 3.0]);
        let w = Tensor::vector(vec![0.5, 0.5]);
        assert_eq!(combine_weighted(&[a.clone(), b.clone()], &[w.clone(), w]).unwrap(), combine_average(&[a, b]).unwrap());
    }

    #[test]
    fn shape_mismatch_names_participant() {
        let err = combine_average(&[Tensor::zeros(&[2, 2]), Tensor::zeros(&[2, 2]), Tensor::zeros(&[3, 2])]).unwrap_err();
        assert!(matches!(&err, Error::Protocol(m) if m.contains("participant 2")));
    }

    #[test]
    fn routing_examples() {
        let g = Tensor::from_rows(&[[2.0, 4.0]]).unwrap();
        let r = route_gradient(&g, Strategy::Average, &[], 2, 2).unwrap();
        assert_eq!(r[0].data(), &[1.0, 2.0]);
        assert_eq!(r[1].data(), &[1.0, 2.0]);
        let r = route_gradient(&g, Strategy::Concat, &[], 2, 1).unwrap();
        assert_eq!(combine_concat(&r).unwrap(), g);
    }

    #[test]
    fn f1_examples() {
        assert!((micro_f1(&[0, 1, 1], &[0, 1, 2]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(micro_f1(&[2, 0], &[2, 0]).unwrap(), 1.0);
        assert!(matches!(micro_f1(&[], &[]), Err(Error::Domain(_))));
    }
}
