//! Directory dataset format: `features.csv`, `edges.csv`, `labels.csv` and
//! an optional `splits.json`. CSV files may start with a header row.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::graph::{make_splits, Graph, Split, SplitFractions, SplitSet};
use crate::tensor::DenseMatrix;

/// Loads a dataset directory. Missing splits are synthesized as ten
/// stratified 60/20/20 splits with seed 0.
pub fn load_dataset(dir: &Path) -> Result<(Graph, SplitSet)> {
    load_dataset_with(dir, SplitFractions::default(), 10, 0)
}

pub fn load_dataset_with(
    dir: &Path,
    fractions: SplitFractions,
    n_splits: usize,
    seed: u64,
) -> Result<(Graph, SplitSet)> {
    let features = read_features(&dir.join("features.csv"))?;
    let n = features.rows();
    let labels_path = dir.join("labels.csv");
    let labels = read_labels(&labels_path, n)?;
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    let edges = read_edges(&dir.join("edges.csv"), n)?;
    let g = Graph::new(features, edges, labels, num_classes)?;

    let splits_path = dir.join("splits.json");
    let splits = if splits_path.exists() {
        let text = fs::read_to_string(&splits_path).map_err(|e| Error::io(&splits_path, e))?;
        let mut splits: SplitSet = serde_json::from_str(&text)?;
        for (k, s) in splits.iter_mut().enumerate() {
            for ids in [&mut s.train, &mut s.val, &mut s.test] {
                ids.sort_unstable();
            }
            s.validate(&g)
                .map_err(|e| Error::Split(format!("{} split {k}: {e}", splits_path.display())))?;
        }
        splits
    } else {
        make_splits(&g, fractions, n_splits, seed)?
    };
    Ok((g, splits))
}

/// Writes `g` (and `splits`, when given) in the directory format.
pub fn save_dataset(g: &Graph, splits: Option<&[Split]>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut w = csv::Writer::from_path(dir.join("features.csv"))?;
    let mut header = vec!["node_id".to_string()];
    header.extend((0..g.feature_dim()).map(|j| format!("f{j}")));
    w.write_record(&header)?;
    for i in 0..g.num_nodes() {
        let mut rec = vec![i.to_string()];
        rec.extend(g.features().row(i).iter().map(|v| format!("{v:?}")));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(dir.join("features.csv"), e))?;

    let mut w = csv::Writer::from_path(dir.join("edges.csv"))?;
    w.write_record(["src", "dst"])?;
    for &(u, v) in g.edges() {
        w.write_record([u.to_string(), v.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(dir.join("edges.csv"), e))?;

    let mut w = csv::Writer::from_path(dir.join("labels.csv"))?;
    w.write_record(["node_id", "label"])?;
    for (i, y) in g.labels().iter().enumerate() {
        w.write_record([i.to_string(), y.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(dir.join("labels.csv"), e))?;

    if let Some(splits) = splits {
        let path = dir.join("splits.json");
        fs::write(&path, serde_json::to_string(splits)?).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

fn parse_err(file: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        file: file.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Data rows of a CSV file with their 1-based line numbers. A first row
/// whose leading field is not an integer is taken as a header.
fn read_rows(path: &Path) -> Result<Vec<(usize, Vec<String>)>> {
    if !path.exists() {
        return Err(Error::io(
            PathBuf::from(path),
            std::io::Error::new(std::io::ErrorKind::NotFound, "missing dataset file"),
        ));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut rows = Vec::new();
    for (k, rec) in reader.records().enumerate() {
        let rec = rec?;
        let line = rec.position().map_or(k + 1, |p| p.line() as usize);
        if rec.iter().all(|f| f.is_empty()) {
            continue;
        }
        if k == 0 && rec.get(0).is_some_and(|f| f.parse::<usize>().is_err()) {
            continue;
        }
        rows.push((line, rec.iter().map(str::to_string).collect()));
    }
    Ok(rows)
}

fn parse_id(path: &Path, line: usize, field: &str, what: &str) -> Result<usize> {
    field
        .parse()
        .map_err(|_| parse_err(path, line, format!("{what} {field:?} is not a nonnegative integer")))
}

fn read_features(path: &Path) -> Result<DenseMatrix> {
    let rows = read_rows(path)?;
    let mut width = None;
    let mut data = Vec::new();
    for (expected, (line, rec)) in rows.iter().enumerate() {
        let id = parse_id(path, *line, &rec[0], "node id")?;
        if id != expected {
            return Err(parse_err(
                path,
                *line,
                format!("node id {id} out of order, expected {expected}"),
            ));
        }
        let f = rec.len() - 1;
        match width {
            None => width = Some(f),
            Some(w) if w != f => {
                return Err(parse_err(
                    path,
                    *line,
                    format!("ragged row: {f} features, expected {w}"),
                ))
            }
            _ => {}
        }
        for field in &rec[1..] {
            let v: f64 = field
                .parse()
                .map_err(|_| parse_err(path, *line, format!("feature {field:?} is not a number")))?;
            if !v.is_finite() {
                return Err(parse_err(path, *line, format!("non-finite feature {field}")));
            }
            data.push(v);
        }
    }
    if rows.is_empty() {
        return Err(parse_err(path, 1, "no nodes"));
    }
    DenseMatrix::from_vec(rows.len(), width.unwrap_or(0), data)
}

fn read_labels(path: &Path, n: usize) -> Result<Vec<usize>> {
    let mut labels = vec![None; n];
    for (line, rec) in read_rows(path)? {
        if rec.len() != 2 {
            return Err(parse_err(path, line, format!("expected node_id,label, got {} fields", rec.len())));
        }
        let id = parse_id(path, line, &rec[0], "node id")?;
        let y = parse_id(path, line, &rec[1], "label")?;
        if id >= n {
            return Err(parse_err(path, line, format!("node id {id} outside {n} nodes")));
        }
        if labels[id].replace(y).is_some() {
            return Err(parse_err(path, line, format!("node {id} labelled twice")));
        }
    }
    labels
        .into_iter()
        .enumerate()
        .map(|(i, y)| y.ok_or_else(|| parse_err(path, 0, format!("node {i} has no label"))))
        .collect()
}

fn read_edges(path: &Path, n: usize) -> Result<Vec<(usize, usize)>> {
    let mut first_seen: HashMap<(usize, usize), usize> = HashMap::new();
    let mut edges = Vec::new();
    for (line, rec) in read_rows(path)? {
        if rec.len() != 2 {
            return Err(parse_err(path, line, format!("expected src,dst, got {} fields", rec.len())));
        }
        let u = parse_id(path, line, &rec[0], "source")?;
        let v = parse_id(path, line, &rec[1], "target")?;
        if u >= n || v >= n {
            return Err(parse_err(path, line, format!("edge ({u}, {v}) outside {n} nodes")));
        }
        if u == v {
            return Err(parse_err(path, line, format!("self-loop {u} {v}")));
        }
        let key = (u.min(v), u.max(v));
        if let Some(prev) = first_seen.insert(key, line) {
            return Err(parse_err(
                path,
                line,
                format!("duplicate edge ({u}, {v}), first seen on line {prev}"),
            ));
        }
        edges.push(key);
    }
    Ok(edges)
}
