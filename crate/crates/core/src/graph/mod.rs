//! Heterogeneous graph model, dataset I/O, synthetic generation, metapath
//! sampling and vertical partitioning.

mod io;
mod partition;
mod sample;
mod synthetic;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use io::{load_dataset, write_dataset};
pub use partition::{vertical_partition, ParticipantView, PartitionSpec, RelationOwner};
pub use sample::{
    metapath_instances, sample_subgraph, BlockSource, EdgeBlock, LayerBlock, LayerPlan, Subgraph,
};
pub use synthetic::{generate_synthetic, RelationSpec, SyntheticSpec, TypeSpec};

/// One typed edge list with per-edge features and a CSR out-adjacency.
#[derive(Clone, Debug, PartialEq)]
pub struct Relation {
    pub name: String,
    pub src_type: usize,
    pub dst_type: usize,
    edges: Vec<(usize, usize)>,
    features: Tensor,
    offsets: Vec<usize>,
    order: Vec<usize>,
}

impl Relation {
    /// `features` is `[edges.len() x D_e]`.
    pub fn new(
        name: impl Into<String>,
        src_type: usize,
        dst_type: usize,
        num_nodes: usize,
        edges: Vec<(usize, usize)>,
        features: Tensor,
    ) -> Result<Self> {
        let name = name.into();
        if features.rank() != 2 || features.rows() != edges.len() {
            return Err(Error::Schema(format!(
                "relation {name}: {} edges but feature shape {:?}",
                edges.len(),
                features.shape()
            )));
        }
        if let Some(&(s, d)) = edges.iter().find(|&&(s, d)| s >= num_nodes || d >= num_nodes) {
            return Err(Error::Schema(format!(
                "relation {name}: edge ({s}, {d}) references a node outside 0..{num_nodes}"
            )));
        }
        let mut offsets = vec![0usize; num_nodes + 1];
        for &(s, _) in &edges {
            offsets[s + 1] += 1;
        }
        for i in 0..num_nodes {
            offsets[i + 1] += offsets[i];
        }
        let mut fill = offsets.clone();
        let mut order = vec![0; edges.len()];
        for (e, &(s, _)) in edges.iter().enumerate() {
            order[fill[s]] = e;
            fill[s] += 1;
        }
        Ok(Relation {
            name,
            src_type,
            dst_type,
            edges,
            features,
            offsets,
            order,
        })
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    /// Edge indices leaving `node`, in input order.
    pub fn out_edges(&self, node: usize) -> &[usize] {
        &self.order[self.offsets[node]..self.offsets[node + 1]]
    }

    /// Keeps the listed edges (in the given order) with their features.
    pub fn subset(&self, keep: &[usize]) -> Result<Relation> {
        let edges = keep.iter().map(|&e| self.edges[e]).collect();
        let features = self.features.select_rows(keep);
        Relation::new(
            self.name.clone(),
            self.src_type,
            self.dst_type,
            self.offsets.len() - 1,
            edges,
            features,
        )
    }
}

/// Per-node class labels; `None` for unlabeled nodes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Labels {
    pub classes: Vec<Option<usize>>,
    pub num_classes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HetGraph {
    pub type_names: Vec<String>,
    pub node_type: Vec<usize>,
    pub external_ids: Vec<String>,
    pub features: Tensor,
    pub relations: BTreeMap<String, Relation>,
    pub labels: Option<Labels>,
}

impl HetGraph {
    pub fn num_nodes(&self) -> usize {
        self.node_type.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn num_types(&self) -> usize {
        self.type_names.len()
    }

    pub fn type_id(&self, name: &str) -> Option<usize> {
        self.type_names.iter().position(|t| t == name)
    }

    pub fn relation(&self, name: &str) -> Result<&Relation> {
        self.relations
            .get(name)
            .ok_or_else(|| Error::Schema(format!("unknown relation {name}")))
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.labels.as_ref().map(|l| l.num_classes)
    }

    pub fn label(&self, node: usize) -> Option<usize> {
        self.labels.as_ref().and_then(|l| l.classes[node])
    }

    pub fn num_edges(&self) -> usize {
        self.relations.values().map(Relation::len).sum()
    }

    /// Checks every structural invariant.
    pub fn validate(&self) -> Result<()> {
        let n = self.num_nodes();
        if self.features.rank() != 2 || self.features.rows() != n {
            return Err(Error::Schema(format!(
                "feature matrix {:?} does not cover {n} nodes",
                self.features.shape()
            )));
        }
        if self.external_ids.len() != n {
            return Err(Error::Schema("external id count differs from node count".into()));
        }
        if let Some(&t) = self.node_type.iter().find(|&&t| t >= self.num_types()) {
            return Err(Error::Schema(format!("node type index {t} out of range")));
        }
        for rel in self.relations.values() {
            for &(s, d) in rel.edges() {
                if s >= n || d >= n {
                    return Err(Error::Schema(format!("{}: dangling edge ({s}, {d})", rel.name)));
                }
                if self.node_type[s] != rel.src_type || self.node_type[d] != rel.dst_type {
                    return Err(Error::Schema(format!(
                        "{}: edge ({s}, {d}) does not match its declared endpoint types",
                        rel.name
                    )));
                }
            }
        }
        if let Some(labels) = &self.labels {
            if labels.classes.len() != n {
                return Err(Error::Schema("label vector length differs from node count".into()));
            }
            if let Some(c) = labels.classes.iter().flatten().find(|&&c| c >= labels.num_classes) {
                return Err(Error::Schema(format!(
                    "label {c} outside [0, {})",
                    labels.num_classes
                )));
            }
        }
        Ok(())
    }

    pub fn schema(&self) -> GraphSchema {
        GraphSchema {
            type_names: self.type_names.clone(),
            relations: self
                .relations
                .values()
                .map(|r| RelationSchema {
                    name: r.name.clone(),
                    src_type: r.src_type,
                    dst_type: r.dst_type,
                    feature_dim: r.feature_dim(),
                })
                .collect(),
            feature_dim: self.feature_dim(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RelationSchema {
    pub name: String,
    pub src_type: usize,
    pub dst_type: usize,
    pub feature_dim: usize,
}

/// Type-level description of a graph, sufficient to size model parameters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GraphSchema {
    pub type_names: Vec<String>,
    pub relations: Vec<RelationSchema>,
    pub feature_dim: usize,
}

impl GraphSchema {
    pub fn relation(&self, name: &str) -> Result<&RelationSchema> {
        self.relations
            .iter()
            .find(|r| r.name == name)
            .ok_or_else(|| Error::Schema(format!("unknown relation {name}")))
    }
}

/// A schema-level relation sequence such as author→paper→author.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Metapath {
    pub relations: Vec<String>,
}

impl Metapath {
    pub fn new<S: Into<String>>(relations: impl IntoIterator<Item = S>) -> Self {
        Metapath {
            relations: relations.into_iter().map(Into::into).collect(),
        }
    }

    pub fn name(&self) -> String {
        self.relations.join(",")
    }

    pub fn len(&self) -> usize {
        self.relations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.relations.is_empty()
    }

    /// Checks the path is non-empty, known, and type-compatible hop by hop.
    pub fn validate(&self, schema: &GraphSchema) -> Result<()> {
        if self.relations.is_empty() {
            return Err(Error::Schema("empty metapath".into()));
        }
        let rels: Vec<&RelationSchema> = self
            .relations
            .iter()
            .map(|r| schema.relation(r))
            .collect::<Result<_>>()?;
        for pair in rels.windows(2) {
            if pair[0].dst_type != pair[1].src_type {
                return Err(Error::Schema(format!(
                    "metapath {}: {} ends at type {} but {} starts at type {}",
                    self.name(),
                    pair[0].name,
                    schema.type_names[pair[0].dst_type],
                    pair[1].name,
                    schema.type_names[pair[1].src_type]
                )));
            }
        }
        Ok(())
    }

    pub fn src_type(&self, schema: &GraphSchema) -> Result<usize> {
        Ok(schema.relation(&self.relations[0])?.src_type)
    }

    pub fn dst_type(&self, schema: &GraphSchema) -> Result<usize> {
        Ok(schema.relation(self.relations.last().expect("validated"))?.dst_type)
    }

    /// Width of an instance's concatenated node and edge features.
    pub fn instance_dim(&self, schema: &GraphSchema) -> Result<usize> {
        let edges: usize = self
            .relations
            .iter()
            .map(|r| schema.relation(r).map(|r| r.feature_dim))
            .sum::<Result<usize>>()?;
        Ok((self.len() + 1) * schema.feature_dim + edges)
    }
}

/// One concrete walk `v_0 -ρ_1-> v_1 ... -ρ_L-> v_L`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MetapathInstance {
    pub nodes: Vec<usize>,
    /// Edge index within each hop's relation.
    pub edges: Vec<usize>,
}

impl MetapathInstance {
    /// Node features of `v_0..v_L` followed by the edge features of each hop.
    pub fn features(&self, graph: &HetGraph, path: &Metapath) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for &v in &self.nodes {
            out.extend_from_slice(graph.features.row(v));
        }
        for (rel, &e) in path.relations.iter().zip(&self.edges) {
            out.extend_from_slice(graph.relation(rel)?.features().row(e));
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    pub fn validate(&self, graph: &HetGraph) -> Result<()> {
        let mut seen = vec![false; graph.num_nodes()];
        for &id in self.train.iter().chain(&self.val).chain(&self.test) {
            if id >= graph.num_nodes() {
                return Err(Error::Schema(format!("split id {id} is not a node")));
            }
            if std::mem::replace(&mut seen[id], true) {
                return Err(Error::Schema(format!("node {id} appears in more than one split")));
            }
            if graph.label(id).is_none() {
                return Err(Error::Schema(format!("split node {id} has no label")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    pub graph: HetGraph,
    pub metapaths: Vec<Metapath>,
    pub splits: Splits,
}

impl DatasetBundle {
    pub fn validate(&self) -> Result<()> {
        self.graph.validate()?;
        let schema = self.graph.schema();
        for mp in &self.metapaths {
            mp.validate(&schema)?;
        }
        self.splits.validate(&self.graph)
    }
}
