#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::Rng;
use splitgnn_core::graph::{HetGraph, Labels, Metapath, Relation};
use splitgnn_core::nn::init_rng;
use splitgnn_core::Tensor;

pub fn random_tensor(seed: u64, shape: &[usize]) -> Tensor {
    let mut rng = init_rng(seed, &[991]);
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// 20 nodes of two types with mirrored relations `ab` / `ba` and 2-d edge features.
pub fn hetero20(seed: u64) -> (HetGraph, Vec<Metapath>) {
    let mut rng = init_rng(seed, &[77]);
    let n = 20;
    let node_type: Vec<usize> = (0..n).map(|v| usize::from(v >= 12)).collect();
    let mut ab = Vec::new();
    for a in 0..12 {
        for b in 12..n {
            if rng.random::<f64>() < 0.25 {
                ab.push((a, b));
            }
        }
    }
    let ef = random_tensor(seed + 1, &[ab.len(), 2]);
    let ba: Vec<_> = ab.iter().map(|&(a, b)| (b, a)).collect();
    let mut relations = BTreeMap::new();
    relations.insert("ab".to_string(), Relation::new("ab", 0, 1, n, ab, ef.clone()).unwrap());
    relations.insert("ba".to_string(), Relation::new("ba", 1, 0, n, ba, ef).unwrap());
    let g = HetGraph {
        type_names: vec!["a".into(), "b".into()],
        node_type,
        external_ids: (0..n).map(|v| format!("n{v}")).collect(),
        features: random_tensor(seed + 2, &[n, 3]),
        relations,
        labels: Some(Labels {
            classes: (0..n).map(|v| (v < 12).then_some(v % 2)).collect(),
            num_classes: 2,
        }),
    };
    (g, vec![Metapath::new(["ab", "ba"])])
}

/// Single-type graph from an edge list under relation `r`, with `D_e = 1`.
pub fn homogeneous(n: usize, edges: Vec<(usize, usize)>, features: Tensor) -> HetGraph {
    let m = edges.len();
    let ef = Tensor::new(vec![m, 1], (0..m).map(|e| 0.1 * e as f64).collect()).unwrap();
    HetGraph {
        type_names: vec!["t".into()],
        node_type: vec![0; n],
        external_ids: (0..n).map(|v| format!("v{v}")).collect(),
        features,
        relations: BTreeMap::from([("r".to_string(), Relation::new("r", 0, 0, n, edges, ef).unwrap())]),
        labels: None,
    }
}

/// `hetero20` with its 12 labeled nodes split 8 / 2 / 2.
pub fn bundle20(seed: u64) -> splitgnn_core::graph::DatasetBundle {
    let (graph, metapaths) = hetero20(seed);
    splitgnn_core::graph::DatasetBundle {
        graph,
        metapaths,
        splits: splitgnn_core::graph::Splits {
            train: (0..8).collect(),
            val: vec![8, 9],
            test: vec![10, 11],
        },
    }
}
