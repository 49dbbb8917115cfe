//! Participant-local graph encoders: heterogeneous attention (HAT) and the
//! GCN / GAT baselines.

mod baselines;
mod hat;

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{GraphSchema, HetGraph, LayerPlan, Metapath};
use crate::nn::{dropout, Bound, DropoutKey, ParamSet};
use crate::tensor::Tensor;

pub use baselines::{gcn_aggregate, GatEncoder, GcnEncoder};
pub use hat::{node_attention, path_attention, Fused, HatEncoder};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    #[default]
    Hat,
    Gcn,
    Gat,
}

/// How a node latent and a relation latent are merged.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    /// `[h; r] W + b`, a `2d -> d` projection.
    #[default]
    Concat,
    /// `h + r`.
    Add,
    /// `u ⊙ h + v ⊙ r` with learned `u`, `v` starting at ones.
    Linear,
}

fn default_layers() -> usize {
    2
}
fn default_hidden() -> usize {
    64
}
fn default_heads() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    #[serde(default)]
    pub kind: ModelKind,
    #[serde(default = "default_layers")]
    pub layers: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default)]
    pub fusion: Fusion,
    #[serde(default)]
    pub dropout: f64,
    /// Concatenate heads and project back to `hidden` instead of summing.
    #[serde(default)]
    pub concat_heads: bool,
    /// Attention temperature λ; `1/sqrt(hidden)` when absent.
    #[serde(default)]
    pub temperature: Option<f64>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            kind: ModelKind::Hat,
            layers: default_layers(),
            hidden: default_hidden(),
            heads: default_heads(),
            fusion: Fusion::Concat,
            dropout: 0.0,
            concat_heads: false,
            temperature: None,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("encoder needs at least one layer".into()));
        }
        if self.hidden == 0 || self.heads == 0 {
            return Err(Error::Config("hidden size and head count must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if let Some(t) = self.temperature {
            if !(t.is_finite() && t > 0.0) {
                return Err(Error::Config(format!("temperature {t} must be positive")));
            }
        }
        Ok(())
    }

    pub fn lambda(&self) -> f64 {
        self.temperature.unwrap_or(1.0 / (self.hidden as f64).sqrt())
    }
}

/// Per-forward settings that are not parameters.
#[derive(Clone, Copy, Debug)]
pub struct ForwardCtx {
    pub key: DropoutKey,
    pub training: bool,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        ForwardCtx {
            key: DropoutKey {
                seed: 0,
                party: 0,
                layer: 0,
                step: 0,
            },
            training: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Encoder {
    Hat(HatEncoder),
    Gcn(GcnEncoder),
    Gat(GatEncoder),
}

impl Encoder {
    /// Sizes parameters from the schema; `metapaths` are used by HAT only.
    pub fn new(
        config: &EncoderConfig,
        schema: &GraphSchema,
        metapaths: &[Metapath],
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        Ok(match config.kind {
            ModelKind::Hat => Encoder::Hat(HatEncoder::new(config, schema, metapaths, seed)?),
            ModelKind::Gcn => Encoder::Gcn(GcnEncoder::new(config, schema.feature_dim, seed)),
            ModelKind::Gat => Encoder::Gat(GatEncoder::new(config, schema.feature_dim, seed)),
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        match self {
            Encoder::Hat(e) => &e.config,
            Encoder::Gcn(e) => &e.config,
            Encoder::Gat(e) => &e.config,
        }
    }

    pub fn params(&self) -> &ParamSet {
        match self {
            Encoder::Hat(e) => &e.params,
            Encoder::Gcn(e) => &e.params,
            Encoder::Gat(e) => &e.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        match self {
            Encoder::Hat(e) => &mut e.params,
            Encoder::Gcn(e) => &mut e.params,
            Encoder::Gat(e) => &mut e.params,
        }
    }

    /// Metapaths the encoder reads; empty for the baselines.
    pub fn metapaths(&self) -> &[Metapath] {
        match self {
            Encoder::Hat(e) => &e.metapaths,
            _ => &[],
        }
    }

    pub fn plan(&self, graph: &HetGraph, batch: &[usize], budget: Option<usize>) -> Result<LayerPlan> {
        LayerPlan::build(graph, batch, self.metapaths(), self.config().layers, budget)
    }

    /// Embeddings `[batch.len() x hidden]` in batch order.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        graph: &HetGraph,
        plan: &LayerPlan,
        ctx: ForwardCtx,
    ) -> Result<Var> {
        if plan.hops() != self.config().layers {
            return Err(Error::Contract(format!(
                "plan has {} hops but the encoder has {} layers",
                plan.hops(),
                self.config().layers
            )));
        }
        let mut h = tape.constant(graph.features.select_rows(plan.input_nodes()));
        for l in 0..plan.hops() {
            if l > 0 {
                h = dropout(tape, h, self.config().dropout, ctx.key.with_layer(l as u64), ctx.training)?;
            }
            h = match self {
                Encoder::Hat(e) => e.layer(tape, bound, graph, plan, l, h)?,
                Encoder::Gcn(e) => e.layer(tape, bound, plan, l, h)?,
                Encoder::Gat(e) => e.layer(tape, bound, plan, l, h)?,
            };
        }
        tape.gather_rows(h, Rc::new(plan.output_index.clone()))
    }
}

/// Inference-only embeddings of `batch` over a participant's own graph.
pub fn local_embed(encoder: &Encoder, graph: &HetGraph, batch: &[usize]) -> Result<Tensor> {
    let plan = encoder.plan(graph, batch, None)?;
    let mut tape = Tape::new();
    let bound = encoder.params().register(&mut tape);
    let out = encoder.forward(&mut tape, &bound, graph, &plan, ForwardCtx::eval())?;
    Ok(tape.value(out).clone())
}

/// Rows of one layer's node set split by node type.
pub(crate) struct TypeGroups {
    /// Rows of each type, ascending.
    pub rows: Vec<Vec<usize>>,
    /// Position of every row within its type's list.
    pub pos: Vec<usize>,
}

impl TypeGroups {
    pub fn new(graph: &HetGraph, nodes: &[usize]) -> Self {
        let mut rows = vec![Vec::new(); graph.num_types()];
        let mut pos = Vec::with_capacity(nodes.len());
        for (r, &v) in nodes.iter().enumerate() {
            let t = graph.node_type[v];
            pos.push(rows[t].len());
            rows[t].push(r);
        }
        TypeGroups { rows, pos }
    }

    /// Gather index that reorders `concat_rows` of the non-empty groups back to row order.
    pub fn inverse(&self, graph: &HetGraph, nodes: &[usize]) -> Rc<Vec<usize>> {
        let mut offset = vec![0; self.rows.len()];
        let mut acc = 0;
        for (t, r) in self.rows.iter().enumerate() {
            offset[t] = acc;
            acc += r.len();
        }
        Rc::new(
            nodes
                .iter()
                .enumerate()
                .map(|(r, &v)| offset[graph.node_type[v]] + self.pos[r])
                .collect(),
        )
    }
}
