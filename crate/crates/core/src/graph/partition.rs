//! Vertical partitioning of one graph across participants.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{DatasetBundle, HetGraph, Labels, Metapath, Relation, Splits};
use crate::error::{Error, Result};
use crate::nn::mix_seed;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RelationOwner {
    /// Edges are dealt to every participant in proportion to `ratio`.
    Shared,
    /// All edges belong to one participant.
    Participant(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub num_participants: usize,
    /// Half-open column ranges, ascending and contiguous.
    pub feature_ranges: Vec<(usize, usize)>,
    /// Relations not listed are shared.
    #[serde(default)]
    pub relations: BTreeMap<String, RelationOwner>,
    pub label_holder: usize,
    pub ratio: Vec<f64>,
}

/// Sizes proportional to `ratio`, rounded down for all but the last part.
fn proportional(total: usize, ratio: &[f64]) -> Vec<usize> {
    let sum: f64 = ratio.iter().sum();
    let mut out: Vec<usize> = ratio[..ratio.len() - 1]
        .iter()
        .map(|r| (total as f64 * r / sum).floor() as usize)
        .collect();
    let used: usize = out.iter().sum();
    out.push(total - used);
    out
}

impl PartitionSpec {
    /// Feature columns and shared edges both follow `ratio`.
    pub fn from_ratio(feature_dim: usize, ratio: &[f64], label_holder: usize) -> Result<Self> {
        check_ratio(ratio)?;
        let mut start = 0;
        let feature_ranges = proportional(feature_dim, ratio)
            .into_iter()
            .map(|w| {
                start += w;
                (start - w, start)
            })
            .collect();
        let spec = PartitionSpec {
            num_participants: ratio.len(),
            feature_ranges,
            relations: BTreeMap::new(),
            label_holder,
            ratio: ratio.to_vec(),
        };
        if label_holder >= ratio.len() {
            return Err(Error::Config(format!(
                "label holder {label_holder} is not one of {} participants",
                ratio.len()
            )));
        }
        Ok(spec)
    }

    pub fn even(feature_dim: usize, participants: usize) -> Result<Self> {
        PartitionSpec::from_ratio(feature_dim, &vec![1.0; participants], 0)
    }

    pub fn owner(&self, relation: &str) -> RelationOwner {
        self.relations.get(relation).cloned().unwrap_or(RelationOwner::Shared)
    }

    pub fn validate(&self, graph: &HetGraph) -> Result<()> {
        let i = self.num_participants;
        if i == 0 {
            return Err(Error::Config("partition needs at least one participant".into()));
        }
        check_ratio(&self.ratio)?;
        if self.ratio.len() != i || self.feature_ranges.len() != i {
            return Err(Error::Config(format!(
                "{i} participants but {} ratios and {} feature ranges",
                self.ratio.len(),
                self.feature_ranges.len()
            )));
        }
        if self.label_holder >= i {
            return Err(Error::Config(format!(
                "label holder {} is not one of {i} participants",
                self.label_holder
            )));
        }
        let mut next = 0;
        for &(a, b) in &self.feature_ranges {
            if a != next || b < a {
                return Err(Error::Config(format!(
                    "feature ranges {:?} do not tile 0..{}",
                    self.feature_ranges,
                    graph.feature_dim()
                )));
            }
            next = b;
        }
        if next != graph.feature_dim() {
            return Err(Error::Config(format!(
                "feature ranges cover 0..{next} but the graph has {} columns",
                graph.feature_dim()
            )));
        }
        for (name, owner) in &self.relations {
            graph
                .relation(name)
                .map_err(|_| Error::Config(format!("partition names unknown relation {name}")))?;
            if let RelationOwner::Participant(p) = owner {
                if *p >= i {
                    return Err(Error::Config(format!(
                        "relation {name} assigned to participant {p} of {i}"
                    )));
                }
            }
        }
        Ok(())
    }
}

fn check_ratio(ratio: &[f64]) -> Result<()> {
    if ratio.is_empty() || ratio.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
        return Err(Error::Config(format!("ratio {ratio:?} must be non-empty and positive")));
    }
    Ok(())
}

/// What one participant holds after partitioning.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticipantView {
    pub party: usize,
    pub feature_range: (usize, usize),
    /// Local graph: every node id, own columns, own edges, labels only for the holder.
    pub graph: HetGraph,
    /// Original edge indices kept per relation, ascending.
    pub edge_ids: BTreeMap<String, Vec<usize>>,
    pub metapaths: Vec<Metapath>,
    /// Present only for the label holder.
    pub splits: Option<Splits>,
}

impl ParticipantView {
    pub fn is_label_holder(&self) -> bool {
        self.graph.labels.is_some()
    }

    pub fn bundle(&self) -> Result<DatasetBundle> {
        let splits = self
            .splits
            .clone()
            .ok_or_else(|| Error::Role(format!("participant {} holds no labels", self.party)))?;
        Ok(DatasetBundle {
            graph: self.graph.clone(),
            metapaths: self.metapaths.clone(),
            splits,
        })
    }
}

/// Assigns edge indices of one relation to participants.
///
/// Edges are ranked by a seeded hash of their unordered endpoint pair, so a
/// relation and its mirror are dealt identically.
fn deal_edges(rel: &Relation, ratio: &[f64], seed: u64) -> Vec<Vec<usize>> {
    let mut keyed: Vec<(u64, usize, usize, usize)> = rel
        .edges()
        .iter()
        .enumerate()
        .map(|(e, &(s, d))| {
            let (a, b) = (s.min(d), s.max(d));
            (mix_seed(seed, &[a as u64, b as u64]), a, b, e)
        })
        .collect();
    keyed.sort_unstable();
    let mut out = Vec::with_capacity(ratio.len());
    let mut at = 0;
    for count in proportional(rel.len(), ratio) {
        let mut part: Vec<usize> = keyed[at..at + count].iter().map(|k| k.3).collect();
        part.sort_unstable();
        out.push(part);
        at += count;
    }
    out
}

pub fn vertical_partition(
    bundle: &DatasetBundle,
    spec: &PartitionSpec,
    seed: u64,
) -> Result<Vec<ParticipantView>> {
    let graph = &bundle.graph;
    spec.validate(graph)?;
    let i = spec.num_participants;

    let mut assigned: Vec<BTreeMap<String, Vec<usize>>> = vec![BTreeMap::new(); i];
    for (name, rel) in &graph.relations {
        let parts = match spec.owner(name) {
            RelationOwner::Shared => deal_edges(rel, &spec.ratio, seed),
            RelationOwner::Participant(p) => (0..i)
                .map(|q| if q == p { (0..rel.len()).collect() } else { Vec::new() })
                .collect(),
        };
        for (q, part) in parts.into_iter().enumerate() {
            assigned[q].insert(name.clone(), part);
        }
    }

    let mut views = Vec::with_capacity(i);
    for (party, edge_ids) in assigned.into_iter().enumerate() {
        let (a, b) = spec.feature_ranges[party];
        let relations = graph
            .relations
            .iter()
            .map(|(name, rel)| Ok((name.clone(), rel.subset(&edge_ids[name])?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        let holder = party == spec.label_holder;
        let labels: Option<Labels> = if holder { graph.labels.clone() } else { None };
        views.push(ParticipantView {
            party,
            feature_range: (a, b),
            graph: HetGraph {
                type_names: graph.type_names.clone(),
                node_type: graph.node_type.clone(),
                external_ids: graph.external_ids.clone(),
                features: graph.features.slice_cols(a, b)?,
                relations,
                labels,
            },
            edge_ids,
            metapaths: bundle.metapaths.clone(),
            splits: holder.then(|| bundle.splits.clone()),
        });
    }
    Ok(views)
}
