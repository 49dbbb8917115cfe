//! Server sub-network and the label holder's output layer.

use std::rc::Rc;

use super::Cut;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{dropout, init_rng, Bound, DropoutKey, Linear, ParamSet};
use crate::tensor::Tensor;

/// `ELU(x W1 + b1)`, dropout, then `ELU(. W2 + b2)` (hidden cut) or raw logits.
#[derive(Clone, Debug, PartialEq)]
pub struct ServerNet {
    pub params: ParamSet,
    fc1: Linear,
    fc2: Linear,
    pub dropout: f64,
    pub cut: Cut,
}

impl ServerNet {
    pub fn new(input_dim: usize, hidden: usize, num_classes: usize, cut: Cut, dropout: f64, seed: u64) -> Self {
        let mut rng = init_rng(seed, &[0x5e7]);
        let mut params = ParamSet::new();
        let fc1 = Linear::new(&mut params, "server.fc1", input_dim, hidden, &mut rng);
        let out = match cut {
            Cut::Hidden => hidden,
            Cut::Logits => num_classes,
        };
        let fc2 = Linear::new(&mut params, "server.fc2", hidden, out, &mut rng);
        ServerNet {
            params,
            fc1,
            fc2,
            dropout,
            cut,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.fc1.fan_in
    }

    pub fn output_dim(&self) -> usize {
        self.fc2.fan_out
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var, key: DropoutKey, training: bool) -> Result<Var> {
        let got = tape.shape(x).last().copied().unwrap_or(0);
        if got != self.input_dim() {
            return Err(Error::Protocol(format!(
                "server expects {} input columns, got {got}",
                self.input_dim()
            )));
        }
        let h = self.fc1.forward(tape, bound, x)?;
        let h = tape.elu(h);
        let h = dropout(tape, h, self.dropout, key, training)?;
        let h = self.fc2.forward(tape, bound, h)?;
        Ok(match self.cut {
            Cut::Hidden => tape.elu(h),
            Cut::Logits => h,
        })
    }
}

/// Stand-alone server pass over a combined tensor.
pub fn server_forward(net: &ServerNet, combined: &Tensor, key: DropoutKey, training: bool) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = net.params.register(&mut tape);
    let x = tape.constant(combined.clone());
    let out = net.forward(&mut tape, &bound, x, key, training)?;
    Ok(tape.value(out).clone())
}

/// Output layer kept by the label holder; empty when the server emits logits.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputHead {
    pub params: ParamSet,
    out: Option<Linear>,
}

impl OutputHead {
    pub fn new(hidden: usize, num_classes: usize, cut: Cut, seed: u64) -> Self {
        let mut rng = init_rng(seed, &[0x0c7]);
        let mut params = ParamSet::new();
        let out = (cut == Cut::Hidden).then(|| Linear::new(&mut params, "head.out", hidden, num_classes, &mut rng));
        OutputHead { params, out }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, hidden: Var) -> Result<Var> {
        match &self.out {
            Some(l) => l.forward(tape, bound, hidden),
            None => Ok(hidden),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LabelLoss {
    pub loss: f64,
    /// `∂loss/∂hidden`, returned to the server.
    pub grad_hidden: Tensor,
    /// Gradients of the label holder's own parameters.
    pub head_grads: Vec<Tensor>,
}

/// Cross-entropy of the label holder's logits over `hidden`.
pub fn label_forward_loss(head: &OutputHead, hidden: &Tensor, labels: Option<&[usize]>) -> Result<LabelLoss> {
    let labels = labels.ok_or_else(|| Error::Role("only the label holder can compute the loss".into()))?;
    let mut tape = Tape::new();
    let bound = head.params.register(&mut tape);
    let h = tape.leaf(hidden.clone());
    let logits = head.forward(&mut tape, &bound, h)?;
    let loss = tape.cross_entropy(logits, Rc::new(labels.to_vec()))?;
    let grads = tape.backward(loss)?;
    Ok(LabelLoss {
        loss: tape.value(loss).data()[0],
        grad_hidden: grads.get_or_zeros(h),
        head_grads: head.params.collect_grads(&bound, &grads),
    })
}
