//! Exhaustive K-hop neighborhoods and metapath instances.
//!
//! Nothing here samples at random: a target's receptive field is complete.

use std::collections::{BTreeMap, BTreeSet};

use super::{HetGraph, Metapath, MetapathInstance, Relation};
use crate::error::{Error, Result};

/// Every instance of `path` starting at `root`, in depth-first edge order.
pub fn metapath_instances(
    graph: &HetGraph,
    path: &Metapath,
    root: usize,
) -> Result<Vec<MetapathInstance>> {
    let rels: Vec<&Relation> = path
        .relations
        .iter()
        .map(|r| graph.relation(r))
        .collect::<Result<_>>()?;
    let mut out = Vec::new();
    let mut nodes = vec![root];
    let mut edges = Vec::with_capacity(rels.len());
    dfs(&rels, &mut nodes, &mut edges, &mut out);
    Ok(out)
}

fn dfs(
    rels: &[&Relation],
    nodes: &mut Vec<usize>,
    edges: &mut Vec<usize>,
    out: &mut Vec<MetapathInstance>,
) {
    let hop = edges.len();
    if hop == rels.len() {
        out.push(MetapathInstance {
            nodes: nodes.clone(),
            edges: edges.clone(),
        });
        return;
    }
    let at = *nodes.last().expect("root present");
    for &e in rels[hop].out_edges(at) {
        nodes.push(rels[hop].edges()[e].1);
        edges.push(e);
        dfs(rels, nodes, edges, out);
        nodes.pop();
        edges.pop();
    }
}

/// The neighborhood of one batch, keyed by target id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Subgraph {
    /// Sorted, deduplicated batch.
    pub targets: Vec<usize>,
    /// Per target, per relation: nodes reached within K hops whose final hop used that relation.
    pub neighbors: BTreeMap<usize, BTreeMap<String, BTreeSet<usize>>>,
    /// Per target, per metapath (in input order): all instances rooted at the target.
    pub instances: BTreeMap<usize, Vec<Vec<MetapathInstance>>>,
}

fn check_request(graph: &HetGraph, targets: &[usize], metapaths: &[Metapath], hops: usize) -> Result<()> {
    if hops == 0 {
        return Err(Error::Config("hop count K must be at least 1".into()));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= graph.num_nodes()) {
        return Err(Error::Range(format!(
            "target {t} is not a node (graph has {})",
            graph.num_nodes()
        )));
    }
    let schema = graph.schema();
    for mp in metapaths {
        mp.validate(&schema)?;
    }
    Ok(())
}

pub fn sample_subgraph(
    graph: &HetGraph,
    targets: &[usize],
    metapaths: &[Metapath],
    hops: usize,
) -> Result<Subgraph> {
    check_request(graph, targets, metapaths, hops)?;
    let batch: BTreeSet<usize> = targets.iter().copied().collect();
    let mut neighbors = BTreeMap::new();
    let mut instances = BTreeMap::new();
    for &t in &batch {
        let mut per_rel: BTreeMap<String, BTreeSet<usize>> = graph
            .relations
            .keys()
            .map(|k| (k.clone(), BTreeSet::new()))
            .collect();
        let mut frontier = BTreeSet::from([t]);
        let mut seen = BTreeSet::from([t]);
        for _ in 0..hops {
            let mut next = BTreeSet::new();
            for &u in &frontier {
                for (name, rel) in &graph.relations {
                    for &e in rel.out_edges(u) {
                        let v = rel.edges()[e].1;
                        per_rel.get_mut(name).expect("all relations keyed").insert(v);
                        if seen.insert(v) {
                            next.insert(v);
                        }
                    }
                }
            }
            frontier = next;
        }
        neighbors.insert(t, per_rel);
        let inst = metapaths
            .iter()
            .map(|mp| metapath_instances(graph, mp, t))
            .collect::<Result<Vec<_>>>()?;
        instances.insert(t, inst);
    }
    Ok(Subgraph {
        targets: batch.into_iter().collect(),
        neighbors,
        instances,
    })
}

/// (center row, neighbor id, instance, edge index) per item.
type Group = (String, bool, Vec<(usize, usize, Option<MetapathInstance>, usize)>);

/// How one relation (or metapath) connects layer `l` rows to layer `l-1` rows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EdgeBlock {
    pub name: String,
    /// Row in `nodes[l]` of the aggregating node.
    pub center: Vec<usize>,
    /// Row in `nodes[l-1]` of the neighbor.
    pub neighbor: Vec<usize>,
    pub source: BlockSource,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum BlockSource {
    /// Edge indices into the relation.
    Edges(Vec<usize>),
    /// One instance per entry; the neighbor is the path endpoint.
    Paths(Vec<MetapathInstance>),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerBlock {
    /// Row in `nodes[l-1]` of each `nodes[l]` entry.
    pub self_index: Vec<usize>,
    /// Graph relations in name order, then metapaths in input order.
    pub blocks: Vec<EdgeBlock>,
}

/// Node sets and connectivity for a K-layer forward pass over a batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerPlan {
    /// `nodes[K]` is the sorted unique batch; `nodes[l-1]` adds everything layer `l` reads.
    pub nodes: Vec<Vec<usize>>,
    /// `layers[l-1]` feeds layer `l`.
    pub layers: Vec<LayerBlock>,
    /// Row in `nodes[K]` for each entry of the batch as given.
    pub output_index: Vec<usize>,
}

impl LayerPlan {
    /// `budget` caps the size of the input layer node set.
    pub fn build(
        graph: &HetGraph,
        batch: &[usize],
        metapaths: &[Metapath],
        hops: usize,
        budget: Option<usize>,
    ) -> Result<Self> {
        check_request(graph, batch, metapaths, hops)?;
        let top: Vec<usize> = batch.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
        let mut nodes = vec![top];
        let mut raw: Vec<Vec<Group>> = Vec::new();
        for _ in 0..hops {
            let layer = nodes.last().expect("non-empty");
            let mut below: BTreeSet<usize> = layer.iter().copied().collect();
            let mut groups = Vec::new();
            for (name, rel) in &graph.relations {
                let mut items = Vec::new();
                for (row, &u) in layer.iter().enumerate() {
                    for &e in rel.out_edges(u) {
                        let v = rel.edges()[e].1;
                        below.insert(v);
                        items.push((row, v, None, e));
                    }
                }
                groups.push((name.clone(), false, items));
            }
            for mp in metapaths {
                let mut items = Vec::new();
                for (row, &u) in layer.iter().enumerate() {
                    for inst in metapath_instances(graph, mp, u)? {
                        let v = *inst.nodes.last().expect("path has nodes");
                        below.insert(v);
                        items.push((row, v, Some(inst), 0));
                    }
                }
                groups.push((mp.name(), true, items));
            }
            if let Some(limit) = budget {
                if below.len() > limit {
                    return Err(Error::Range(format!(
                        "expanded frontier of {} nodes exceeds the node budget of {limit}",
                        below.len()
                    )));
                }
            }
            nodes.push(below.into_iter().collect());
            raw.push(groups);
        }
        nodes.reverse();
        raw.reverse();

        let position = |set: &[usize], v: usize| set.binary_search(&v).expect("node present");
        let layers = raw
            .into_iter()
            .enumerate()
            .map(|(l, groups)| {
                let (lower, upper) = (&nodes[l], &nodes[l + 1]);
                let blocks = groups
                    .into_iter()
                    .map(|(name, is_path, items)| {
                        let center = items.iter().map(|it| it.0).collect();
                        let neighbor = items.iter().map(|it| position(lower, it.1)).collect();
                        let source = if !is_path {
                            BlockSource::Edges(items.iter().map(|it| it.3).collect())
                        } else {
                            BlockSource::Paths(items.into_iter().map(|it| it.2.expect("path item")).collect())
                        };
                        EdgeBlock {
                            name,
                            center,
                            neighbor,
                            source,
                        }
                    })
                    .collect();
                LayerBlock {
                    self_index: upper.iter().map(|&v| position(lower, v)).collect(),
                    blocks,
                }
            })
            .collect();
        let top = &nodes[hops];
        let output_index = batch.iter().map(|&v| position(top, v)).collect();
        Ok(LayerPlan {
            nodes,
            layers,
            output_index,
        })
    }

    pub fn hops(&self) -> usize {
        self.layers.len()
    }

    pub fn input_nodes(&self) -> &[usize] {
        &self.nodes[0]
    }
}
