//! Heterogeneous attention encoder.
//!
//! Each layer transforms node features per node type and edge features per
//! relation, fuses them into neighbor latents, attends over each relation's
//! neighbors (self-loop included) with scaled dot products, and merges the
//! per-relation results with a learned path-level attention. Metapaths act as
//! extra relations whose "edge features" are the concatenated features of
//! every node and edge along an instance.

use std::rc::Rc;

use super::{EncoderConfig, Fusion, TypeGroups};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{BlockSource, EdgeBlock, GraphSchema, HetGraph, LayerPlan, Metapath};
use crate::nn::{init_rng, xavier, Bound, Linear, ParamId, ParamSet};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
enum ChannelKind {
    Relation,
    Path(Vec<String>),
}

/// A graph relation or a metapath treated as one.
#[derive(Clone, Debug, PartialEq)]
struct Channel {
    name: String,
    src_type: usize,
    kind: ChannelKind,
}

#[derive(Clone, Debug, PartialEq)]
enum FuseParams {
    Concat { w: ParamId, b: ParamId },
    Add,
    Linear { u: ParamId, v: ParamId },
}

#[derive(Clone, Debug, PartialEq)]
struct HeadParams {
    w_type: Vec<ParamId>,
    b_type: Vec<ParamId>,
    w_rel: Vec<ParamId>,
    b_rel: Vec<ParamId>,
    fuse: FuseParams,
}

#[derive(Clone, Debug, PartialEq)]
struct HatLayer {
    heads: Vec<HeadParams>,
    head_proj: Option<Linear>,
    q: ParamId,
    w_p: ParamId,
    b_p: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HatEncoder {
    pub config: EncoderConfig,
    pub params: ParamSet,
    pub metapaths: Vec<Metapath>,
    type_names: Vec<String>,
    channels: Vec<Channel>,
    layers: Vec<HatLayer>,
}

/// Output of the explicit (unfactored) transform-and-fuse step.
#[derive(Clone, Copy, Debug)]
pub struct Fused {
    /// `f W_τ + b_τ`.
    pub node: Var,
    /// `e W_ρ + b_ρ`.
    pub relation: Var,
    /// `[node; relation]` before projection, for concat fusion.
    pub joined: Option<Var>,
    pub out: Var,
}

impl HatEncoder {
    pub fn new(
        config: &EncoderConfig,
        schema: &GraphSchema,
        metapaths: &[Metapath],
        seed: u64,
    ) -> Result<Self> {
        let d = config.hidden;
        let mut channels: Vec<Channel> = schema
            .relations
            .iter()
            .map(|r| Channel {
                name: r.name.clone(),
                src_type: r.src_type,
                kind: ChannelKind::Relation,
            })
            .collect();
        let mut edge_dims: Vec<usize> = schema.relations.iter().map(|r| r.feature_dim).collect();
        for mp in metapaths {
            mp.validate(schema)?;
            channels.push(Channel {
                name: mp.name(),
                src_type: mp.src_type(schema)?,
                kind: ChannelKind::Path(mp.relations.clone()),
            });
            edge_dims.push(mp.instance_dim(schema)?);
        }

        let mut rng = init_rng(seed, &[0x4a7]);
        let mut params = ParamSet::new();
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let din = if l == 0 { schema.feature_dim } else { d };
            let mut heads = Vec::with_capacity(config.heads);
            for m in 0..config.heads {
                let p = format!("hat.l{l}.h{m}");
                let mut w_type = Vec::new();
                let mut b_type = Vec::new();
                for t in &schema.type_names {
                    w_type.push(params.add(format!("{p}.type.{t}.w"), xavier(&mut rng, din, d, &[din, d])));
                    b_type.push(params.add(format!("{p}.type.{t}.b"), Tensor::zeros(&[d])));
                }
                let mut w_rel = Vec::new();
                let mut b_rel = Vec::new();
                for (c, &de) in channels.iter().zip(&edge_dims) {
                    w_rel.push(params.add(format!("{p}.rel.{}.w", c.name), xavier(&mut rng, de, d, &[de, d])));
                    b_rel.push(params.add(format!("{p}.rel.{}.b", c.name), Tensor::zeros(&[d])));
                }
                let fuse = match config.fusion {
                    Fusion::Concat => FuseParams::Concat {
                        w: params.add(format!("{p}.fuse.w"), xavier(&mut rng, 2 * d, d, &[2 * d, d])),
                        b: params.add(format!("{p}.fuse.b"), Tensor::zeros(&[d])),
                    },
                    Fusion::Add => FuseParams::Add,
                    Fusion::Linear => FuseParams::Linear {
                        u: params.add(format!("{p}.fuse.u"), Tensor::filled(&[d], 1.0)),
                        v: params.add(format!("{p}.fuse.v"), Tensor::filled(&[d], 1.0)),
                    },
                };
                heads.push(HeadParams {
                    w_type,
                    b_type,
                    w_rel,
                    b_rel,
                    fuse,
                });
            }
            let head_proj = config.concat_heads.then(|| {
                Linear::new(&mut params, &format!("hat.l{l}.heads"), config.heads * d, d, &mut rng)
            });
            let q = params.add(format!("hat.l{l}.path.q"), xavier(&mut rng, d, 1, &[d]));
            let w_p = params.add(format!("hat.l{l}.path.w"), xavier(&mut rng, d, d, &[d, d]));
            let b_p = params.add(format!("hat.l{l}.path.b"), Tensor::zeros(&[d]));
            layers.push(HatLayer {
                heads,
                head_proj,
                q,
                w_p,
                b_p,
            });
        }
        Ok(HatEncoder {
            config: config.clone(),
            params,
            metapaths: metapaths.to_vec(),
            type_names: schema.type_names.clone(),
            channels,
            layers,
        })
    }

    /// Names of the relation channels in block order.
    pub fn channel_names(&self) -> Vec<&str> {
        self.channels.iter().map(|c| c.name.as_str()).collect()
    }

    /// Explicit fusion for one node type and channel: `f` is `[n x D_in]`, `e` is `[n x D_e]`.
    #[allow(clippy::too_many_arguments)]
    pub fn transform_and_fuse(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        layer: usize,
        head: usize,
        node_type: &str,
        channel: &str,
        f: Var,
        e: Var,
    ) -> Result<Fused> {
        let t = self
            .type_names
            .iter()
            .position(|n| n == node_type)
            .ok_or_else(|| Error::Schema(format!("unknown node type {node_type}")))?;
        let c = self
            .channels
            .iter()
            .position(|ch| ch.name == channel)
            .ok_or_else(|| Error::Schema(format!("unknown relation {channel}")))?;
        let hp = self
            .layers
            .get(layer)
            .and_then(|l| l.heads.get(head))
            .ok_or_else(|| Error::Contract(format!("no layer {layer} head {head}")))?;
        let wt = bound.var(hp.w_type[t]);
        let node = tape.matmul(f, wt)?;
        let node = tape.add_row(node, bound.var(hp.b_type[t]))?;
        let relation = tape.matmul(e, bound.var(hp.w_rel[c]))?;
        let relation = tape.add_row(relation, bound.var(hp.b_rel[c]))?;
        let (joined, out) = match hp.fuse {
            FuseParams::Concat { w, b } => {
                let j = tape.concat_cols(&[node, relation])?;
                let o = tape.matmul(j, bound.var(w))?;
                (Some(j), tape.add_row(o, bound.var(b))?)
            }
            FuseParams::Add => (None, tape.add(node, relation)?),
            FuseParams::Linear { u, v } => {
                let a = tape.mul_row(node, bound.var(u))?;
                let r = tape.mul_row(relation, bound.var(v))?;
                (None, tape.add(a, r)?)
            }
        };
        Ok(Fused {
            node,
            relation,
            joined,
            out,
        })
    }

    /// Node-type transform of every row of `h` (rows are `nodes`).
    fn typed_transform(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        graph: &HetGraph,
        nodes: &[usize],
        hp: &HeadParams,
        h: Var,
    ) -> Result<Var> {
        let groups = TypeGroups::new(graph, nodes);
        let mut parts = Vec::new();
        for (t, rows) in groups.rows.iter().enumerate() {
            if rows.is_empty() {
                continue;
            }
            let x = tape.gather_rows(h, Rc::new(rows.clone()))?;
            let y = tape.matmul(x, bound.var(hp.w_type[t]))?;
            parts.push(tape.add_row(y, bound.var(hp.b_type[t]))?);
        }
        let stacked = tape.concat_rows(&parts)?;
        tape.gather_rows(stacked, groups.inverse(graph, nodes))
    }

    /// Terms `X_k W[k-rows]` of one channel block, each with its gather index.
    fn edge_terms(&self, tape: &mut Tape, inputs: &[EdgeInput], w: Var) -> Result<Vec<GatherTerm>> {
        let mut terms = Vec::with_capacity(inputs.len());
        for inp in inputs {
            let wk = tape.slice_rows(w, inp.rows.0, inp.rows.1)?;
            terms.push((tape.matmul(inp.x, wk)?, inp.idx.clone()));
        }
        Ok(terms)
    }

    pub(crate) fn layer(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        graph: &HetGraph,
        plan: &LayerPlan,
        l: usize,
        h: Var,
    ) -> Result<Var> {
        let d = self.config.hidden;
        let lambda = self.config.lambda();
        let lower = &plan.nodes[l];
        let upper = &plan.nodes[l + 1];
        let block = &plan.layers[l];
        let layer = &self.layers[l];

        let inputs: Vec<Vec<EdgeInput>> = self
            .channels
            .iter()
            .zip(&block.blocks)
            .map(|(ch, b)| edge_inputs(tape, graph, ch, b))
            .collect::<Result<_>>()?;

        // Per head: node latents of the lower set, and their top fusion half.
        let mut hp = Vec::with_capacity(layer.heads.len());
        for head in &layer.heads {
            let x = self.typed_transform(tape, bound, graph, lower, head, h)?;
            let top = match head.fuse {
                FuseParams::Concat { w, b } => {
                    let w = bound.var(w);
                    let wt = tape.slice_rows(w, 0, d)?;
                    let wb = tape.slice_rows(w, d, 2 * d)?;
                    Some((tape.matmul(x, wt)?, wb, bound.var(b)))
                }
                _ => None,
            };
            hp.push((x, top));
        }

        let groups = TypeGroups::new(graph, upper);
        let mut outputs = Vec::new();
        for (t, rows) in groups.rows.iter().enumerate() {
            if rows.is_empty() {
                continue;
            }
            let self_idx = Rc::new(rows.iter().map(|&r| block.self_index[r]).collect::<Vec<_>>());
            let mut hself = Vec::with_capacity(hp.len());
            for (x, _) in &hp {
                hself.push(tape.gather_rows(*x, self_idx.clone())?);
            }
            let mut per_channel = Vec::new();
            for (c, ch) in self.channels.iter().enumerate() {
                if ch.src_type != t {
                    continue;
                }
                let eb = &block.blocks[c];
                let center = Rc::new(eb.center.iter().map(|&r| groups.pos[r]).collect::<Vec<_>>());
                let nb = Rc::new(eb.neighbor.clone());
                let mut aggs = Vec::with_capacity(hp.len());
                for (m, head) in layer.heads.iter().enumerate() {
                    let hn = if eb.center.is_empty() {
                        None
                    } else {
                        Some(self.neighbor_latents(tape, bound, head, &hp[m], c, &inputs[c], nb.clone())?)
                    };
                    let (agg, _) = node_attention(tape, hself[m], hn, center.clone(), lambda)?;
                    aggs.push(agg);
                }
                per_channel.push(self.finish_heads(tape, bound, layer, &aggs)?);
            }
            let z = if per_channel.is_empty() {
                self.finish_heads(tape, bound, layer, &hself)?
            } else {
                let (z, _) = path_attention(
                    tape,
                    &per_channel,
                    bound.var(layer.q),
                    bound.var(layer.w_p),
                    bound.var(layer.b_p),
                )?;
                z
            };
            outputs.push(z);
        }
        let stacked = tape.concat_rows(&outputs)?;
        tape.gather_rows(stacked, groups.inverse(graph, upper))
    }

    /// Fused latents of one channel's neighbors for one head.
    #[allow(clippy::too_many_arguments)]
    fn neighbor_latents(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        head: &HeadParams,
        hp: &(Var, Option<(Var, Var, Var)>),
        c: usize,
        inputs: &[EdgeInput],
        nb: Rc<Vec<usize>>,
    ) -> Result<Var> {
        let d = self.config.hidden;
        let w_r = bound.var(head.w_rel[c]);
        let b_r = bound.var(head.b_rel[c]);
        let n = nb.len();
        match (&head.fuse, hp) {
            (FuseParams::Concat { .. }, (_, Some((top, wb, bphi)))) => {
                // [h; r] W = h W_top + (e W_ρ + b_ρ) W_bot
                let m = tape.matmul(w_r, *wb)?;
                let mut terms = vec![(*top, Some(nb))];
                terms.extend(self.edge_terms(tape, inputs, m)?);
                let br = tape.reshape(b_r, vec![1, d])?;
                let cb = tape.matmul(br, *wb)?;
                let cb = tape.reshape(cb, vec![d])?;
                let cb = tape.add(cb, *bphi)?;
                tape.gather_sum(&terms, Some(cb))
            }
            (FuseParams::Add, (x, _)) => {
                let mut terms = vec![(*x, Some(nb))];
                terms.extend(self.edge_terms(tape, inputs, w_r)?);
                tape.gather_sum(&terms, Some(b_r))
            }
            (FuseParams::Linear { u, v }, (x, _)) => {
                let base = tape.gather_rows(*x, nb)?;
                let a = tape.mul_row(base, bound.var(*u))?;
                let mut terms = self.edge_terms(tape, inputs, w_r)?;
                if terms.is_empty() {
                    terms.push((tape.constant(Tensor::zeros(&[n, d])), None));
                }
                let r = tape.gather_sum(&terms, Some(b_r))?;
                let r = tape.mul_row(r, bound.var(*v))?;
                tape.add(a, r)
            }
            _ => Err(Error::Contract("fusion parameters out of sync".into())),
        }
    }

    /// Heads summed inside ELU, or concatenated, activated and projected.
    fn finish_heads(&self, tape: &mut Tape, bound: &Bound, layer: &HatLayer, aggs: &[Var]) -> Result<Var> {
        match &layer.head_proj {
            None => {
                let s = tape.add_all(aggs)?;
                Ok(tape.elu(s))
            }
            Some(proj) => {
                let cat = tape.concat_cols(aggs)?;
                let act = tape.elu(cat);
                proj.forward(tape, bound, act)
            }
        }
    }
}

/// A constant feature block and the weight rows it multiplies.
struct EdgeInput {
    x: Var,
    rows: (usize, usize),
    /// Gather from unique rows of `x` to block items; `None` when already aligned.
    idx: Option<Rc<Vec<usize>>>,
}

type GatherTerm = (Var, Option<Rc<Vec<usize>>>);

fn unique_index(keys: impl Iterator<Item = usize>) -> (Vec<usize>, Rc<Vec<usize>>) {
    let keys: Vec<usize> = keys.collect();
    let mut uniq = keys.clone();
    uniq.sort_unstable();
    uniq.dedup();
    let idx = keys
        .iter()
        .map(|k| uniq.binary_search(k).expect("present"))
        .collect();
    (uniq, Rc::new(idx))
}

fn edge_inputs(tape: &mut Tape, graph: &HetGraph, ch: &Channel, block: &EdgeBlock) -> Result<Vec<EdgeInput>> {
    if block.center.is_empty() {
        return Ok(Vec::new());
    }
    match (&ch.kind, &block.source) {
        (ChannelKind::Relation, BlockSource::Edges(ids)) => {
            let rel = graph.relation(&ch.name)?;
            Ok(vec![EdgeInput {
                x: tape.constant(rel.features().select_rows(ids)),
                rows: (0, rel.feature_dim()),
                idx: None,
            }])
        }
        (ChannelKind::Path(hops), BlockSource::Paths(insts)) => {
            let dn = graph.feature_dim();
            let mut out = Vec::new();
            for k in 0..=hops.len() {
                let (uniq, idx) = unique_index(insts.iter().map(|i| i.nodes[k]));
                out.push(EdgeInput {
                    x: tape.constant(graph.features.select_rows(&uniq)),
                    rows: (k * dn, (k + 1) * dn),
                    idx: Some(idx),
                });
            }
            let mut offset = (hops.len() + 1) * dn;
            for (k, name) in hops.iter().enumerate() {
                let rel = graph.relation(name)?;
                let de = rel.feature_dim();
                if de > 0 {
                    let (uniq, idx) = unique_index(insts.iter().map(|i| i.edges[k]));
                    out.push(EdgeInput {
                        x: tape.constant(rel.features().select_rows(&uniq)),
                        rows: (offset, offset + de),
                        idx: Some(idx),
                    });
                }
                offset += de;
            }
            Ok(out)
        }
        _ => Err(Error::Contract(format!("block kind does not match channel {}", ch.name))),
    }
}

/// Single-head attention of each target over itself and its neighbors.
///
/// `h_self` is `[g x d]`; `h_nbr` is `[E x d]` with `center[e]` the target row
/// of entry `e`. Returns the pre-activation aggregate `[g x d]` and the
/// coefficients `[g + E]` (self entries first).
pub fn node_attention(
    tape: &mut Tape,
    h_self: Var,
    h_nbr: Option<Var>,
    center: Rc<Vec<usize>>,
    lambda: f64,
) -> Result<(Var, Var)> {
    let g = tape.value(h_self).rows();
    let own = tape.row_dot(h_self, h_self)?;
    let Some(hn) = h_nbr else {
        // Only the self entry: every coefficient is 1.
        let seg = Rc::new((0..g).collect::<Vec<_>>());
        let scores = tape.scale(own, lambda);
        let alpha = tape.segment_softmax(scores, seg.clone(), g)?;
        let agg = tape.segment_weighted_sum(alpha, h_self, seg, g)?;
        return Ok((agg, alpha));
    };
    if tape.value(hn).rows() != center.len() {
        return Err(Error::Dimension {
            op: "node_attention",
            lhs: tape.shape(hn).to_vec(),
            rhs: vec![center.len()],
        });
    }
    let e = center.len();
    let cross = tape.gather_row_dot(h_self, center.clone(), hn)?;
    let own = tape.reshape(own, vec![g, 1])?;
    let cross = tape.reshape(cross, vec![e, 1])?;
    let scores = tape.concat_rows(&[own, cross])?;
    let scores = tape.reshape(scores, vec![g + e])?;
    let scores = tape.scale(scores, lambda);
    let seg: Vec<usize> = (0..g).chain(center.iter().copied()).collect();
    let alpha = tape.segment_softmax(scores, Rc::new(seg), g)?;
    let col = tape.reshape(alpha, vec![g + e, 1])?;
    let a_own = tape.slice_rows(col, 0, g)?;
    let a_own = tape.reshape(a_own, vec![g])?;
    let a_nbr = tape.slice_rows(col, g, g + e)?;
    let a_nbr = tape.reshape(a_nbr, vec![e])?;
    let self_part = tape.segment_weighted_sum(a_own, h_self, Rc::new((0..g).collect()), g)?;
    let nbr_part = tape.segment_weighted_sum(a_nbr, hn, center, g)?;
    Ok((tape.add(self_part, nbr_part)?, alpha))
}

/// Semantic attention across per-relation embeddings `zs` (each `[n x d]`).
///
/// `w_ρ = mean_i <q, tanh(z_{i,ρ} W_p + b_p)>`, `β = softmax(w)`,
/// `z = Σ_ρ β_ρ z_ρ`. Returns `(z, β)`.
pub fn path_attention(tape: &mut Tape, zs: &[Var], q: Var, w_p: Var, b_p: Var) -> Result<(Var, Var)> {
    if zs.is_empty() {
        return Err(Error::Contract("path attention needs at least one relation".into()));
    }
    let d = tape.value(q).numel();
    let qcol = tape.reshape(q, vec![d, 1])?;
    let mut scores = Vec::with_capacity(zs.len());
    for &z in zs {
        let p = tape.matmul(z, w_p)?;
        let p = tape.add_row(p, b_p)?;
        let p = tape.tanh(p);
        let s = tape.matmul(p, qcol)?;
        scores.push(tape.mean(s));
    }
    let w = tape.concat_rows(&scores)?;
    let beta = tape.softmax(w, 1.0)?;
    let mut terms = Vec::with_capacity(zs.len());
    for (k, &z) in zs.iter().enumerate() {
        terms.push(tape.scale_by_elem(z, beta, k)?);
    }
    Ok((tape.add_all(&terms)?, beta))
}
