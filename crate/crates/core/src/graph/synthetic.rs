//! Seeded stochastic-block heterogeneous graph generator.

use std::collections::{BTreeMap, HashSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use super::{DatasetBundle, HetGraph, Labels, Metapath, Relation, Splits};
use crate::error::{Error, Result};
use crate::nn::init_rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TypeSpec {
    pub name: String,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationSpec {
    pub name: String,
    pub src: String,
    pub dst: String,
    /// Mean out-degree of source nodes (Poisson).
    #[serde(default)]
    pub avg_degree: f64,
    /// Overrides the global edge feature width.
    #[serde(default)]
    pub edge_dim: Option<usize>,
    /// Mirror every edge of the named relation instead of sampling.
    #[serde(default)]
    pub reverse_of: Option<String>,
}

fn default_signal() -> f64 {
    1.0
}

fn default_split() -> [f64; 3] {
    [0.6, 0.2, 0.2]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub node_types: Vec<TypeSpec>,
    /// The labeled node type.
    pub target_type: String,
    pub relations: Vec<RelationSpec>,
    #[serde(default)]
    pub metapaths: Vec<Vec<String>>,
    pub feature_dim: usize,
    pub edge_dim: usize,
    pub num_classes: usize,
    /// Fraction of sampled edges that join same-class endpoints.
    pub homophily: f64,
    /// Per-column standard deviation of the class means.
    #[serde(default = "default_signal")]
    pub feature_signal: f64,
    /// Shift of the first edge feature: `+s` intra-class, `-s` otherwise.
    #[serde(default = "default_signal")]
    pub edge_signal: f64,
    #[serde(default = "default_split")]
    pub split: [f64; 3],
    pub seed: u64,
}

impl SyntheticSpec {
    /// Three node types, four relations (two mirrored pairs), two metapaths.
    pub fn desk_benchmark(seed: u64) -> Self {
        SyntheticSpec {
            node_types: vec![
                TypeSpec { name: "paper".into(), count: 1800 },
                TypeSpec { name: "author".into(), count: 800 },
                TypeSpec { name: "subject".into(), count: 400 },
            ],
            target_type: "paper".into(),
            relations: vec![
                RelationSpec {
                    name: "pa".into(),
                    src: "paper".into(),
                    dst: "author".into(),
                    avg_degree: 3.0,
                    edge_dim: None,
                    reverse_of: None,
                },
                RelationSpec {
                    name: "ap".into(),
                    src: "author".into(),
                    dst: "paper".into(),
                    avg_degree: 0.0,
                    edge_dim: None,
                    reverse_of: Some("pa".into()),
                },
                RelationSpec {
                    name: "ps".into(),
                    src: "paper".into(),
                    dst: "subject".into(),
                    avg_degree: 2.0,
                    edge_dim: None,
                    reverse_of: None,
                },
                RelationSpec {
                    name: "sp".into(),
                    src: "subject".into(),
                    dst: "paper".into(),
                    avg_degree: 0.0,
                    edge_dim: None,
                    reverse_of: Some("ps".into()),
                },
            ],
            metapaths: vec![
                vec!["pa".into(), "ap".into()],
                vec!["ps".into(), "sp".into()],
            ],
            feature_dim: 64,
            edge_dim: 4,
            num_classes: 3,
            homophily: 0.9,
            feature_signal: 0.1,
            edge_signal: 0.5,
            split: default_split(),
            seed,
        }
    }
}

/// Builds a labeled heterogeneous graph with block structure.
///
/// Every node draws a latent class. Sampled edges pick a same-class endpoint
/// with probability `homophily` and a different-class endpoint otherwise.
/// Features are Gaussian around a per-(type, class) mean. Only nodes of the
/// target type carry labels.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<DatasetBundle> {
    if spec.relations.is_empty() {
        return Err(Error::Config("synthetic spec needs at least one relation".into()));
    }
    if !(0.0..=1.0).contains(&spec.homophily) {
        return Err(Error::Config(format!("homophily {} outside [0, 1]", spec.homophily)));
    }
    if spec.num_classes == 0 {
        return Err(Error::Config("num_classes must be positive".into()));
    }
    let type_of = |name: &str| -> Result<usize> {
        spec.node_types
            .iter()
            .position(|t| t.name == name)
            .ok_or_else(|| Error::Config(format!("unknown node type {name}")))
    };
    let target = type_of(&spec.target_type)?;
    for r in &spec.relations {
        for t in [&r.src, &r.dst] {
            if spec.node_types[type_of(t)?].count == 0 {
                return Err(Error::Config(format!(
                    "relation {} references node type {t} with zero nodes",
                    r.name
                )));
            }
        }
    }

    let mut node_type = Vec::new();
    let mut external_ids = Vec::new();
    let mut by_type: Vec<Vec<usize>> = vec![Vec::new(); spec.node_types.len()];
    for (t, ts) in spec.node_types.iter().enumerate() {
        for k in 0..ts.count {
            by_type[t].push(node_type.len());
            external_ids.push(format!("{}-{k}", ts.name));
            node_type.push(t);
        }
    }
    let n = node_type.len();
    let c = spec.num_classes;

    let mut rng = init_rng(spec.seed, &[1]);
    let class: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
    // members[type][class] -> nodes
    let mut members = vec![vec![Vec::new(); c]; spec.node_types.len()];
    for v in 0..n {
        members[node_type[v]][class[v]].push(v);
    }

    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let d = spec.feature_dim;
    let means: Vec<Vec<Vec<f64>>> = (0..spec.node_types.len())
        .map(|_| {
            (0..c)
                .map(|_| (0..d).map(|_| spec.feature_signal * noise.sample(&mut rng)).collect())
                .collect()
        })
        .collect();
    let mut fdata = Vec::with_capacity(n * d);
    for v in 0..n {
        let mu = &means[node_type[v]][class[v]];
        fdata.extend(mu.iter().map(|m| m + noise.sample(&mut rng)));
    }
    let features = Tensor::matrix(n, d, fdata)?;

    let mut relations: BTreeMap<String, Relation> = BTreeMap::new();
    let ordered = spec
        .relations
        .iter()
        .filter(|r| r.reverse_of.is_none())
        .chain(spec.relations.iter().filter(|r| r.reverse_of.is_some()));
    for rs in ordered {
        let (src, dst) = (type_of(&rs.src)?, type_of(&rs.dst)?);
        let rel = match &rs.reverse_of {
            Some(orig) => {
                let o = relations.get(orig).ok_or_else(|| {
                    Error::Config(format!("{} mirrors unknown relation {orig}", rs.name))
                })?;
                if o.src_type != dst || o.dst_type != src {
                    return Err(Error::Config(format!(
                        "{} must swap the endpoint types of {orig}",
                        rs.name
                    )));
                }
                let edges = o.edges().iter().map(|&(s, t)| (t, s)).collect();
                Relation::new(rs.name.clone(), src, dst, n, edges, o.features().clone())?
            }
            None => {
                let de = rs.edge_dim.unwrap_or(spec.edge_dim);
                let mut rng = init_rng(spec.seed, &[2, relations.len() as u64]);
                let degree = Poisson::new(rs.avg_degree.max(1e-9))
                    .map_err(|e| Error::Config(format!("{}: {e}", rs.name)))?;
                let mut edges = Vec::new();
                let mut efeat = Vec::new();
                for &s in &by_type[src] {
                    let k = (degree.sample(&mut rng) as usize).min(by_type[dst].len());
                    let mut chosen = HashSet::with_capacity(k);
                    let mut attempts = 0;
                    while chosen.len() < k && attempts < 20 * k + 20 {
                        attempts += 1;
                        let same = rng.random::<f64>() < spec.homophily;
                        let pool: Vec<usize> = if same {
                            vec![class[s]]
                        } else {
                            (0..c).filter(|&k| k != class[s]).collect()
                        };
                        let Some(&cls) = pool.choose(&mut rng) else { continue };
                        let Some(&t) = members[dst][cls].choose(&mut rng) else { continue };
                        if chosen.insert(t) {
                            edges.push((s, t));
                            let shift = if class[s] == class[t] {
                                spec.edge_signal
                            } else {
                                -spec.edge_signal
                            };
                            for j in 0..de {
                                let base = noise.sample(&mut rng);
                                efeat.push(if j == 0 { base + shift } else { base });
                            }
                        }
                    }
                }
                let ef = Tensor::matrix(edges.len(), de, efeat)?;
                Relation::new(rs.name.clone(), src, dst, n, edges, ef)?
            }
        };
        relations.insert(rs.name.clone(), rel);
    }

    let classes = (0..n)
        .map(|v| (node_type[v] == target).then_some(class[v]))
        .collect();
    let graph = HetGraph {
        type_names: spec.node_types.iter().map(|t| t.name.clone()).collect(),
        node_type,
        external_ids,
        features,
        relations,
        labels: Some(Labels {
            classes,
            num_classes: c,
        }),
    };

    let mut labeled = by_type[target].clone();
    labeled.shuffle(&mut init_rng(spec.seed, &[3]));
    let total: f64 = spec.split.iter().sum();
    let n_train = (labeled.len() as f64 * spec.split[0] / total).round() as usize;
    let n_val = (labeled.len() as f64 * spec.split[1] / total).round() as usize;
    let n_val = n_val.min(labeled.len() - n_train);
    let mut splits = Splits {
        train: labeled[..n_train].to_vec(),
        val: labeled[n_train..n_train + n_val].to_vec(),
        test: labeled[n_train + n_val..].to_vec(),
    };
    splits.train.sort_unstable();
    splits.val.sort_unstable();
    splits.test.sort_unstable();

    let bundle = DatasetBundle {
        graph,
        metapaths: spec.metapaths.iter().map(|m| Metapath::new(m.clone())).collect(),
        splits,
    };
    bundle.validate()?;
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(homophily: f64, seed: u64) -> SyntheticSpec {
        let mut s = SyntheticSpec::desk_benchmark(seed);
        s.node_types[0].count = 200;
        s.node_types[1].count = 80;
        s.node_types[2].count = 40;
        s.num_classes = 2;
        s.homophily = homophily;
        s
    }

    #[test]
    fn full_homophily_joins_same_class() {
        let b = generate_synthetic(&small(1.0, 3)).unwrap();
        // Class of non-target nodes is latent; check through paper-author-paper paths.
        let pa = b.graph.relation("pa").unwrap();
        let ap = b.graph.relation("ap").unwrap();
        for &(p, a) in pa.edges() {
            for &e in ap.out_edges(a) {
                let q = ap.edges()[e].1;
                assert_eq!(b.graph.label(p), b.graph.label(q));
            }
        }
    }

    #[test]
    fn same_seed_is_reproducible() {
        let a = generate_synthetic(&small(0.7, 9)).unwrap();
        let b = generate_synthetic(&small(0.7, 9)).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&small(0.7, 10)).unwrap();
        assert_ne!(a.graph.relation("pa").unwrap().edges(), c.graph.relation("pa").unwrap().edges());
    }

    #[test]
    fn mirrored_relation_reverses_edges() {
        let b = generate_synthetic(&small(0.7, 1)).unwrap();
        let pa = b.graph.relation("pa").unwrap();
        let ap = b.graph.relation("ap").unwrap();
        let rev: Vec<_> = pa.edges().iter().map(|&(s, d)| (d, s)).collect();
        assert_eq!(ap.edges(), &rev[..]);
        assert_eq!(ap.features(), pa.features());
    }

    #[test]
    fn empty_referenced_type_is_config_error() {
        let mut s = small(0.5, 1);
        s.node_types[2].count = 0;
        assert!(matches!(generate_synthetic(&s), Err(Error::Config(_))));
    }
}
