//! Parameters, layer helpers, and seeded dropout built on the tape.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_slice, Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Index of a tensor inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named trainable tensors owned by one party.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Records every parameter as a differentiable leaf.
    pub fn register(&self, tape: &mut Tape) -> Bound {
        Bound(self.values.iter().map(|v| tape.leaf(v.clone())).collect())
    }

    /// Collects per-parameter gradients in registration order.
    pub fn collect_grads(&self, bound: &Bound, grads: &Gradients) -> Vec<Tensor> {
        bound.0.iter().map(|&v| grads.get_or_zeros(v)).collect()
    }
}

/// Tape handles for a registered [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }
}

/// Deterministic seed stream for parameter initialisation.
pub fn init_rng(seed: u64, stream: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(seed, stream))
}

/// Mixes a seed with a tuple of stream identifiers (splitmix64 finaliser per word).
pub fn mix_seed(seed: u64, stream: &[u64]) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    stream
        .iter()
        .fold(splitmix(seed), |acc, &s| splitmix(acc ^ splitmix(s)))
}

/// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
pub fn xavier(rng: &mut impl Rng, fan_in: usize, fan_out: usize, shape: &[usize]) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product")
}

/// Dense affine map `x W + b`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = params.add(
            format!("{name}.weight"),
            xavier(rng, fan_in, fan_out, &[fan_in, fan_out]),
        );
        let bias = params.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
        Linear {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        linear(tape, x, bound.var(self.weight), bound.var(self.bias))
    }

    pub fn num_scalars(&self) -> usize {
        self.fan_in * self.fan_out + self.fan_out
    }
}

/// `out[i,j] = Σ_k x[i,k] W[k,j] + b[j]`.
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let xw = tape.matmul(x, w)?;
    tape.add_row(xw, b)
}

/// `exp(λ x_i) / Σ_k exp(λ x_k)` with max subtraction.
pub fn softmax(logits: &Tensor, temperature: f64) -> Result<Tensor> {
    if logits.numel() == 0 {
        return Err(Error::Domain("softmax of empty input".into()));
    }
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(Error::Domain(format!(
            "softmax temperature must be positive, got {temperature}"
        )));
    }
    let mut out = vec![0.0; logits.numel()];
    softmax_slice(logits.data(), temperature, &mut out);
    Ok(Tensor::vector(out))
}

/// Mean cross-entropy of `labels` under row-wise softmax of `logits`.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.cross_entropy(logits, Rc::new(labels.to_vec()))
}

/// Identifies one dropout application: masks depend only on these fields.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct DropoutKey {
    pub seed: u64,
    pub party: u64,
    pub layer: u64,
    pub step: u64,
}

impl DropoutKey {
    pub fn with_layer(self, layer: u64) -> Self {
        DropoutKey { layer, ..self }
    }

    pub fn mask(&self, len: usize, rate: f64) -> Vec<f64> {
        let mut rng =
            ChaCha8Rng::seed_from_u64(mix_seed(self.seed, &[self.party, self.layer, self.step]));
        let keep = 1.0 / (1.0 - rate);
        (0..len)
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect()
    }
}

/// Inverted dropout; the identity at inference or when `rate == 0`.
pub fn dropout(tape: &mut Tape, x: Var, rate: f64, key: DropoutKey, training: bool) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Domain(format!("dropout rate {rate} outside [0, 1)")));
    }
    if !training || rate == 0.0 {
        return Ok(x);
    }
    let mask = key.mask(tape.value(x).numel(), rate);
    tape.mul_const(x, Rc::new(mask))
}
