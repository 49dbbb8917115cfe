//! Tab-separated dataset directory format.
//!
//! ```text
//! nodes.tsv          node_id <TAB> node_type
//! features.tsv       node_id <TAB> f1,f2,...
//! edges_<rel>.tsv    src <TAB> dst <TAB> e1,e2,...   (edge features may be empty)
//! labels.tsv         node_id <TAB> class
//! metapaths.txt      rel1,rel2,...
//! splits.tsv         node_id <TAB> train|val|test
//! ```
//!
//! Node ids are opaque tokens; internal indices follow `nodes.tsv` order.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{DatasetBundle, HetGraph, Labels, Metapath, Relation, Splits};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

struct Lines {
    path: PathBuf,
    text: String,
}

impl Lines {
    fn read(dir: &Path, name: &str) -> Result<Self> {
        let path = dir.join(name);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Lines { path, text })
    }

    /// Non-blank lines with 1-based line numbers.
    fn rows(&self) -> impl Iterator<Item = (usize, &str)> {
        self.text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
            .filter(|(_, l)| !l.trim().is_empty())
    }

    fn err(&self, line: usize, msg: impl Into<String>) -> Error {
        Error::parse(&self.path, line, msg)
    }

    fn fields<'a>(&self, line: usize, row: &'a str, min: usize, max: usize) -> Result<Vec<&'a str>> {
        let f: Vec<&str> = row.split('\t').collect();
        if f.len() < min || f.len() > max {
            return Err(self.err(
                line,
                format!("expected {min}..={max} tab-separated fields, found {}", f.len()),
            ));
        }
        Ok(f)
    }

    fn floats(&self, line: usize, field: &str) -> Result<Vec<f64>> {
        if field.trim().is_empty() {
            return Ok(Vec::new());
        }
        field
            .split(',')
            .map(|v| {
                let x: f64 = v
                    .trim()
                    .parse()
                    .map_err(|_| self.err(line, format!("invalid float {v:?}")))?;
                if x.is_finite() {
                    Ok(x)
                } else {
                    Err(self.err(line, format!("non-finite value {v:?}")))
                }
            })
            .collect()
    }
}

fn lookup(ids: &HashMap<&str, usize>, lines: &Lines, line: usize, token: &str) -> Result<usize> {
    ids.get(token)
        .copied()
        .ok_or_else(|| lines.err(line, format!("unknown node id {token:?}")))
}

/// Parses a dataset directory into a validated bundle.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<DatasetBundle> {
    let dir = dir.as_ref();

    let nodes = Lines::read(dir, "nodes.tsv")?;
    let mut external_ids = Vec::new();
    let mut node_type = Vec::new();
    let mut type_names: Vec<String> = Vec::new();
    for (line, row) in nodes.rows() {
        let f = nodes.fields(line, row, 2, 2)?;
        let t = match type_names.iter().position(|t| t == f[1]) {
            Some(t) => t,
            None => {
                type_names.push(f[1].to_string());
                type_names.len() - 1
            }
        };
        external_ids.push(f[0].to_string());
        node_type.push(t);
    }
    let n = external_ids.len();
    let mut ids: HashMap<&str, usize> = HashMap::with_capacity(n);
    for (line, row) in nodes.rows() {
        let token = row.split('\t').next().unwrap_or_default();
        if ids.insert(token, ids.len()).is_some() {
            return Err(nodes.err(line, format!("duplicate node id {token:?}")));
        }
    }

    let feats = Lines::read(dir, "features.tsv")?;
    let mut rows: Vec<Option<Vec<f64>>> = vec![None; n];
    let mut dim = None;
    for (line, row) in feats.rows() {
        let f = feats.fields(line, row, 2, 2)?;
        let id = lookup(&ids, &feats, line, f[0])?;
        let values = feats.floats(line, f[1])?;
        match dim {
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(feats.err(line, format!("expected {d} features, found {}", values.len())))
            }
            _ => {}
        }
        if rows[id].replace(values).is_some() {
            return Err(feats.err(line, format!("duplicate features for {:?}", f[0])));
        }
    }
    let dim = dim.unwrap_or(0);
    let mut data = Vec::with_capacity(n * dim);
    for (id, r) in rows.into_iter().enumerate() {
        let r = r.ok_or_else(|| {
            feats.err(0, format!("no features for node {:?}", external_ids[id]))
        })?;
        data.extend(r);
    }
    let features = Tensor::matrix(n, dim, data)?;

    let mut edge_files: Vec<(String, PathBuf)> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok())
        .filter_map(|entry| {
            let name = entry.file_name().into_string().ok()?;
            let rel = name.strip_prefix("edges_")?.strip_suffix(".tsv")?.to_string();
            Some((rel, entry.path()))
        })
        .collect();
    edge_files.sort();
    let mut relations = BTreeMap::new();
    for (rel, _) in &edge_files {
        let lines = Lines::read(dir, &format!("edges_{rel}.tsv"))?;
        let mut edges = Vec::new();
        let mut efeat = Vec::new();
        let mut edim = None;
        let mut types = None;
        for (line, row) in lines.rows() {
            let f = lines.fields(line, row, 2, 3)?;
            let s = lookup(&ids, &lines, line, f[0])?;
            let d = lookup(&ids, &lines, line, f[1])?;
            let values = match f.get(2) {
                Some(v) => lines.floats(line, v)?,
                None => Vec::new(),
            };
            match edim {
                None => edim = Some(values.len()),
                Some(k) if k != values.len() => {
                    return Err(lines.err(
                        line,
                        format!("expected {k} edge features, found {}", values.len()),
                    ))
                }
                _ => {}
            }
            let pair = (node_type[s], node_type[d]);
            match types {
                None => types = Some(pair),
                Some(t) if t != pair => {
                    return Err(lines.err(
                        line,
                        format!(
                            "edge joins types {}->{} but relation {rel} is {}->{}",
                            type_names[pair.0], type_names[pair.1], type_names[t.0], type_names[t.1]
                        ),
                    ))
                }
                _ => {}
            }
            edges.push((s, d));
            efeat.extend(values);
        }
        let (src, dst) =
            types.ok_or_else(|| lines.err(0, format!("relation {rel} has no edges")))?;
        let ef = Tensor::matrix(edges.len(), edim.unwrap_or(0), efeat)?;
        relations.insert(rel.clone(), Relation::new(rel.clone(), src, dst, n, edges, ef)?);
    }

    let labels_file = Lines::read(dir, "labels.tsv")?;
    let mut classes = vec![None; n];
    for (line, row) in labels_file.rows() {
        let f = labels_file.fields(line, row, 2, 2)?;
        let id = lookup(&ids, &labels_file, line, f[0])?;
        let c: usize = f[1]
            .trim()
            .parse()
            .map_err(|_| labels_file.err(line, format!("invalid class {:?}", f[1])))?;
        if classes[id].replace(c).is_some() {
            return Err(labels_file.err(line, format!("duplicate label for {:?}", f[0])));
        }
    }
    let num_classes = classes.iter().flatten().max().map_or(0, |m| m + 1);

    let mp_file = Lines::read(dir, "metapaths.txt")?;
    let mut metapaths = Vec::new();
    for (line, row) in mp_file.rows() {
        let mp = Metapath::new(row.split(',').map(str::trim));
        if let Some(bad) = mp.relations.iter().find(|r| !relations.contains_key(*r)) {
            return Err(mp_file.err(line, format!("unknown relation {bad:?}")));
        }
        metapaths.push((line, mp));
    }

    let split_file = Lines::read(dir, "splits.tsv")?;
    let mut splits = Splits::default();
    for (line, row) in split_file.rows() {
        let f = split_file.fields(line, row, 2, 2)?;
        let id = lookup(&ids, &split_file, line, f[0])?;
        if classes[id].is_none() {
            return Err(split_file.err(line, format!("split node {:?} has no label", f[0])));
        }
        match f[1].trim() {
            "train" => splits.train.push(id),
            "val" => splits.val.push(id),
            "test" => splits.test.push(id),
            other => return Err(split_file.err(line, format!("unknown split {other:?}"))),
        }
    }

    let graph = HetGraph {
        type_names,
        node_type,
        external_ids,
        features,
        relations,
        labels: Some(Labels {
            classes,
            num_classes,
        }),
    };
    let schema = graph.schema();
    for (line, mp) in &metapaths {
        mp.validate(&schema)
            .map_err(|e| mp_file.err(*line, e.to_string()))?;
    }
    let bundle = DatasetBundle {
        graph,
        metapaths: metapaths.into_iter().map(|(_, m)| m).collect(),
        splits,
    };
    bundle.validate()?;
    Ok(bundle)
}

fn join(values: &[f64]) -> String {
    let mut s = String::new();
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        write!(s, "{v}").expect("write to string");
    }
    s
}

fn write_file(path: PathBuf, body: &str) -> Result<()> {
    fs::write(&path, body).map_err(|e| Error::io(path, e))
}

/// Writes a bundle in the directory format read by [`load_dataset`].
pub fn write_dataset(bundle: &DatasetBundle, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let g = &bundle.graph;
    let ext = &g.external_ids;

    let mut nodes = String::new();
    let mut feats = String::new();
    for v in 0..g.num_nodes() {
        writeln!(nodes, "{}\t{}", ext[v], g.type_names[g.node_type[v]]).expect("fmt");
        writeln!(feats, "{}\t{}", ext[v], join(g.features.row(v))).expect("fmt");
    }
    write_file(dir.join("nodes.tsv"), &nodes)?;
    write_file(dir.join("features.tsv"), &feats)?;

    for rel in g.relations.values() {
        let mut body = String::new();
        for (e, &(s, d)) in rel.edges().iter().enumerate() {
            writeln!(body, "{}\t{}\t{}", ext[s], ext[d], join(rel.features().row(e))).expect("fmt");
        }
        write_file(dir.join(format!("edges_{}.tsv", rel.name)), &body)?;
    }

    let mut labels = String::new();
    if let Some(l) = &g.labels {
        for (v, c) in l.classes.iter().enumerate() {
            if let Some(c) = c {
                writeln!(labels, "{}\t{c}", ext[v]).expect("fmt");
            }
        }
    }
    write_file(dir.join("labels.tsv"), &labels)?;

    let mps: String = bundle.metapaths.iter().map(|m| m.name() + "\n").collect();
    write_file(dir.join("metapaths.txt"), &mps)?;

    let mut splits = String::new();
    for (name, ids) in [
        ("train", &bundle.splits.train),
        ("val", &bundle.splits.val),
        ("test", &bundle.splits.test),
    ] {
        for &v in ids {
            writeln!(splits, "{}\t{name}", ext[v]).expect("fmt");
        }
    }
    write_file(dir.join("splits.tsv"), &splits)
}
