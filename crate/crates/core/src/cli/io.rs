//! Text file formats. Indices in files are 1-based.
//!
//! * data: `shape: m1 .. mK`, then one `i1 .. iK v` line per listed entry;
//! * factors: one file per mode, `rows cols` then the rows of the matrix;
//! * queries: `i1 .. iK`, optionally followed by a 0/1 label;
//! * scores: `i1 .. iK score`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::inference::{FactorRole, FactorSet};
use crate::predict::QueryBatch;
use crate::tensor::{Shape, SparseTensorCOO};

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        line,
        msg: msg.into(),
    }
}

/// Non-empty, non-comment lines with their 1-based line numbers.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(n, l)| (n + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty())
}

fn parse_index(line: usize, tok: &str, mode: usize, size: usize) -> Result<usize> {
    let i: usize = tok
        .parse()
        .map_err(|_| parse_err(line, format!("invalid index '{tok}'")))?;
    if i == 0 || i > size {
        return Err(parse_err(
            line,
            format!("index {i} out of range 1..={size} in mode {}", mode + 1),
        ));
    }
    Ok(i - 1)
}

pub fn parse_data(text: &str) -> Result<SparseTensorCOO> {
    let mut lines = content_lines(text);
    let (hline, header) = lines
        .next()
        .ok_or_else(|| parse_err(1, "empty data file, expected 'shape: m1 .. mK'"))?;
    let dims = header
        .strip_prefix("shape:")
        .ok_or_else(|| parse_err(hline, "first line must be 'shape: m1 .. mK'"))?
        .split_whitespace()
        .map(|t| {
            t.parse::<usize>()
                .map_err(|_| parse_err(hline, format!("invalid mode size '{t}'")))
        })
        .collect::<Result<Vec<_>>>()?;
    let shape = Shape::new(dims).map_err(|e| parse_err(hline, e.to_string()))?;
    let k = shape.ndims();

    let mut first_seen: HashMap<usize, usize> = HashMap::new();
    let mut entries = Vec::new();
    for (line, l) in lines {
        let toks: Vec<&str> = l.split_whitespace().collect();
        if toks.len() != k + 1 {
            return Err(parse_err(
                line,
                format!("expected {} indices and a value, found {} fields", k, toks.len()),
            ));
        }
        let idx = (0..k)
            .map(|m| parse_index(line, toks[m], m, shape.dims()[m]))
            .collect::<Result<Vec<_>>>()?;
        let v: f64 = toks[k]
            .parse()
            .map_err(|_| parse_err(line, format!("invalid value '{}'", toks[k])))?;
        if v != 0.0 && v != 1.0 {
            return Err(parse_err(line, format!("value {} is not binary (0 or 1)", toks[k])));
        }
        if let Some(prev) = first_seen.insert(shape.offset(&idx), line) {
            return Err(parse_err(
                line,
                format!("duplicate coordinate, first listed at line {prev}"),
            ));
        }
        entries.push((idx, v));
    }
    SparseTensorCOO::new(shape, entries)
}

pub fn format_index(idx: &[usize]) -> String {
    idx.iter()
        .map(|i| (i + 1).to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn format_data(y: &SparseTensorCOO) -> String {
    let mut s = String::new();
    let dims: Vec<String> = y.shape().dims().iter().map(|d| d.to_string()).collect();
    let _ = writeln!(s, "shape: {}", dims.join(" "));
    for (idx, v) in y.iter() {
        let _ = writeln!(s, "{} {}", format_index(idx), v);
    }
    s
}

pub fn read_data(path: &Path) -> Result<SparseTensorCOO> {
    parse_data(&fs::read_to_string(path)?)
}

pub fn write_data(path: &Path, y: &SparseTensorCOO) -> Result<()> {
    Ok(fs::write(path, format_data(y))?)
}

pub fn parse_matrix(text: &str) -> Result<DMatrix<f64>> {
    let mut lines = content_lines(text);
    let (hline, header) = lines
        .next()
        .ok_or_else(|| parse_err(1, "empty factor file, expected 'rows cols'"))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| parse_err(hline, format!("invalid size '{t}'"))))
        .collect::<Result<_>>()?;
    let [rows, cols] = dims[..] else {
        return Err(parse_err(hline, "header must be 'rows cols'"));
    };
    let mut data = Vec::with_capacity(rows * cols);
    let mut seen_rows = 0;
    for (line, l) in lines {
        let row = l
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| parse_err(line, format!("invalid number '{t}'"))))
            .collect::<Result<Vec<_>>>()?;
        if row.len() != cols {
            return Err(parse_err(line, format!("expected {cols} values, found {}", row.len())));
        }
        seen_rows += 1;
        if seen_rows > rows {
            return Err(parse_err(line, format!("more than {rows} rows")));
        }
        data.extend(row);
    }
    if seen_rows != rows {
        return Err(Error::Shape(format!("expected {rows} rows, found {seen_rows}")));
    }
    Ok(DMatrix::from_row_slice(rows, cols, &data))
}

pub fn format_matrix(m: &DMatrix<f64>) -> String {
    let mut s = format!("{} {}\n", m.nrows(), m.ncols());
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| m[(i, j)].to_string()).collect();
        let _ = writeln!(s, "{}", row.join(" "));
    }
    s
}

/// `dir/factor_<k>.txt`, with `k` 1-based.
pub fn factor_path(dir: &Path, k: usize) -> PathBuf {
    dir.join(format!("factor_{}.txt", k + 1))
}

pub fn write_factors(dir: &Path, f: &FactorSet) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    f.matrices()
        .iter()
        .enumerate()
        .map(|(k, m)| {
            let p = factor_path(dir, k);
            fs::write(&p, format_matrix(m))?;
            Ok(p)
        })
        .collect()
}

/// Reads `factor_1.txt`, `factor_2.txt`, .. until the first missing file.
pub fn read_factors(dir: &Path) -> Result<FactorSet> {
    let mut mats = Vec::new();
    loop {
        let p = factor_path(dir, mats.len());
        if !p.exists() {
            break;
        }
        let text = fs::read_to_string(&p)?;
        mats.push(parse_matrix(&text).map_err(|e| match e {
            Error::Parse { line, msg } => Error::Parse {
                line,
                msg: format!("{}: {msg}", p.display()),
            },
            other => other,
        })?);
    }
    if mats.is_empty() {
        return Err(Error::Config(format!(
            "no factor files found in {}",
            dir.display()
        )));
    }
    FactorSet::new(mats, FactorRole::Common)
}

/// Query lines hold `K` indices, or `K` indices and a 0/1 label on every
/// line.
pub fn parse_queries(text: &str, shape: &Shape) -> Result<QueryBatch> {
    let k = shape.ndims();
    let mut indices = Vec::new();
    let mut labels = Vec::new();
    let mut labelled = None;
    for (line, l) in content_lines(text) {
        let toks: Vec<&str> = l.split_whitespace().collect();
        if toks.len() != k && toks.len() != k + 1 {
            return Err(Error::Shape(format!(
                "line {line}: {} fields for a {k}-mode array",
                toks.len()
            )));
        }
        let has_label = toks.len() == k + 1;
        if *labelled.get_or_insert(has_label) != has_label {
            return Err(parse_err(line, "either every query has a label or none does"));
        }
        let idx = (0..k)
            .map(|m| {
                parse_index(line, toks[m], m, shape.dims()[m]).map_err(|e| match e {
                    Error::Parse { line, msg } => Error::Shape(format!("line {line}: {msg}")),
                    other => other,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if has_label {
            labels.push(match toks[k] {
                "1" | "1.0" => true,
                "0" | "0.0" => false,
                t => return Err(parse_err(line, format!("label '{t}' is not 0 or 1"))),
            });
        }
        indices.push(idx);
    }
    let labels = (labelled == Some(true)).then_some(labels);
    QueryBatch::new(indices, labels, shape)
}

pub fn format_queries(q: &QueryBatch) -> String {
    let mut s = String::new();
    for (n, idx) in q.indices.iter().enumerate() {
        match &q.labels {
            Some(l) => {
                let _ = writeln!(s, "{} {}", format_index(idx), u8::from(l[n]));
            }
            None => {
                let _ = writeln!(s, "{}", format_index(idx));
            }
        }
    }
    s
}

pub fn format_scores(q: &QueryBatch, scores: &[f64]) -> String {
    let mut s = String::new();
    for (idx, p) in q.indices.iter().zip(scores) {
        let _ = writeln!(s, "{} {}", format_index(idx), p);
    }
    s
}

/// Rows of `i1 .. iK value`, as (1-based indices, value).
pub fn parse_valued_rows(text: &str) -> Result<Vec<(Vec<u64>, f64)>> {
    let mut out = Vec::new();
    let mut width = None;
    for (line, l) in content_lines(text) {
        let toks: Vec<&str> = l.split_whitespace().collect();
        if *width.get_or_insert(toks.len()) != toks.len() {
            return Err(parse_err(line, "inconsistent number of fields"));
        }
        let (last, idx) = toks.split_last().expect("non-empty line");
        let idx = idx
            .iter()
            .map(|t| t.parse().map_err(|_| parse_err(line, format!("invalid index '{t}'"))))
            .collect::<Result<Vec<u64>>>()?;
        let v: f64 = last
            .parse()
            .map_err(|_| parse_err(line, format!("invalid value '{last}'")))?;
        out.push((idx, v));
    }
    Ok(out)
}
