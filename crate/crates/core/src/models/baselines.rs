//! Relation-agnostic baselines: every relation's edges are merged into one
//! neighbor list and edge features are ignored.

use std::rc::Rc;

use super::EncoderConfig;
use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::graph::{LayerBlock, LayerPlan};
use crate::nn::{init_rng, xavier, Bound, Linear, ParamId, ParamSet};

/// Aggregation entries of one layer: `(center row, lower row)`, self-loops first.
fn merged_items(block: &LayerBlock, with_self: bool) -> (Vec<usize>, Vec<usize>) {
    let mut seg = Vec::new();
    let mut src = Vec::new();
    if with_self {
        for (r, &s) in block.self_index.iter().enumerate() {
            seg.push(r);
            src.push(s);
        }
    }
    for b in &block.blocks {
        seg.extend(&b.center);
        src.extend(&b.neighbor);
    }
    (seg, src)
}

/// Mean of `values` rows grouped by `seg`; groups with no entries stay zero.
pub fn gcn_aggregate(tape: &mut Tape, values: Var, seg: &[usize], groups: usize) -> Result<Var> {
    let mut count = vec![0usize; groups];
    for &s in seg {
        count[s] += 1;
    }
    let w = seg.iter().map(|&s| 1.0 / count[s] as f64).collect();
    let w = tape.constant(crate::tensor::Tensor::vector(w));
    tape.segment_weighted_sum(w, values, Rc::new(seg.to_vec()), groups)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GcnEncoder {
    pub config: EncoderConfig,
    pub params: ParamSet,
    layers: Vec<Linear>,
}

impl GcnEncoder {
    pub fn new(config: &EncoderConfig, feature_dim: usize, seed: u64) -> Self {
        let mut rng = init_rng(seed, &[0x6c9]);
        let mut params = ParamSet::new();
        let layers = (0..config.layers)
            .map(|l| {
                let din = if l == 0 { feature_dim } else { config.hidden };
                Linear::new(&mut params, &format!("gcn.l{l}"), din, config.hidden, &mut rng)
            })
            .collect();
        GcnEncoder {
            config: config.clone(),
            params,
            layers,
        }
    }

    /// `ELU(mean_{j ∈ N(i) ∪ {i}} (h_j W + b))`.
    pub(crate) fn layer(&self, tape: &mut Tape, bound: &Bound, plan: &LayerPlan, l: usize, h: Var) -> Result<Var> {
        let block = &plan.layers[l];
        let x = self.layers[l].forward(tape, bound, h)?;
        let (seg, src) = merged_items(block, true);
        let values = tape.gather_rows(x, Rc::new(src))?;
        let agg = gcn_aggregate(tape, values, &seg, plan.nodes[l + 1].len())?;
        Ok(tape.elu(agg))
    }
}

#[derive(Clone, Debug, PartialEq)]
struct GatHead {
    lin: Linear,
    a_src: ParamId,
    a_dst: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GatEncoder {
    pub config: EncoderConfig,
    pub params: ParamSet,
    layers: Vec<(Vec<GatHead>, Option<Linear>)>,
}

impl GatEncoder {
    pub fn new(config: &EncoderConfig, feature_dim: usize, seed: u64) -> Self {
        let d = config.hidden;
        let mut rng = init_rng(seed, &[0x6a7]);
        let mut params = ParamSet::new();
        let layers = (0..config.layers)
            .map(|l| {
                let din = if l == 0 { feature_dim } else { d };
                let heads = (0..config.heads)
                    .map(|m| {
                        let p = format!("gat.l{l}.h{m}");
                        GatHead {
                            lin: Linear::new(&mut params, &p, din, d, &mut rng),
                            a_src: params.add(format!("{p}.a_src"), xavier(&mut rng, d, 1, &[d, 1])),
                            a_dst: params.add(format!("{p}.a_dst"), xavier(&mut rng, d, 1, &[d, 1])),
                        }
                    })
                    .collect();
                let proj = config.concat_heads.then(|| {
                    Linear::new(&mut params, &format!("gat.l{l}.heads"), config.heads * d, d, &mut rng)
                });
                (heads, proj)
            })
            .collect();
        GatEncoder {
            config: config.clone(),
            params,
            layers,
        }
    }

    /// `α_ij = softmax_j LeakyReLU(a_src·h_i + a_dst·h_j)` over `N(i) ∪ {i}`; heads summed inside ELU.
    pub(crate) fn layer(&self, tape: &mut Tape, bound: &Bound, plan: &LayerPlan, l: usize, h: Var) -> Result<Var> {
        let block = &plan.layers[l];
        let groups = plan.nodes[l + 1].len();
        let (seg, src) = merged_items(block, true);
        let center_lower: Rc<Vec<usize>> = Rc::new(seg.iter().map(|&r| block.self_index[r]).collect());
        let seg = Rc::new(seg);
        let src = Rc::new(src);
        let (heads, proj) = &self.layers[l];
        let mut aggs = Vec::with_capacity(heads.len());
        for head in heads {
            let x = head.lin.forward(tape, bound, h)?;
            let s = tape.matmul(x, bound.var(head.a_src))?;
            let t = tape.matmul(x, bound.var(head.a_dst))?;
            let si = tape.gather_rows(s, center_lower.clone())?;
            let tj = tape.gather_rows(t, src.clone())?;
            let e = tape.add(si, tj)?;
            let e = tape.reshape(e, vec![seg.len()])?;
            let e = tape.leaky_relu(e, 0.2);
            let alpha = tape.segment_softmax(e, seg.clone(), groups)?;
            let values = tape.gather_rows(x, src.clone())?;
            aggs.push(tape.segment_weighted_sum(alpha, values, seg.clone(), groups)?);
        }
        match proj {
            None => {
                let s = tape.add_all(&aggs)?;
                Ok(tape.elu(s))
            }
            Some(p) => {
                let cat = tape.concat_cols(&aggs)?;
                let act = tape.elu(cat);
                p.forward(tape, bound, act)
            }
        }
    }
}
