//! CSV tables: datasets use the header `in_0,...,out_0,...`.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};

use crate::neural::Dataset;
use crate::numlin::DenseMatrix;

/// Writes a header row and stringified rows.
pub fn write_table<I, R>(path: &Path, header: &[String], rows: I) -> Result<()>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Shortest text that parses back to the same value.
pub fn num(v: f64) -> String {
    format!("{v:e}")
}

pub fn header(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

pub fn write_dataset(path: &Path, data: &Dataset) -> Result<()> {
    let mut head: Vec<String> = (0..data.input_dim()).map(|i| format!("in_{i}")).collect();
    head.extend((0..data.output_dim()).map(|i| format!("out_{i}")));
    let rows = (0..data.len()).map(|r| {
        data.inputs
            .row(r)
            .iter()
            .chain(data.targets.row(r))
            .map(|&v| num(v))
            .collect::<Vec<_>>()
    });
    write_table(path, &head, rows)
}

/// Reads a dataset; errors name the offending line.
pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let head = r
        .headers()
        .with_context(|| format!("{}: line 1: unreadable header", path.display()))?
        .clone();
    let mut n_in = 0;
    let mut n_out = 0;
    for (k, name) in head.iter().enumerate() {
        let name = name.trim();
        if name == format!("in_{n_in}") && n_out == 0 {
            n_in += 1;
        } else if name == format!("out_{n_out}") && n_in > 0 {
            n_out += 1;
        } else {
            bail!(
                "{}: line 1: column {} is `{name}`, expected in_<k> columns then out_<k> columns",
                path.display(),
                k + 1
            );
        }
    }
    if n_in == 0 || n_out == 0 {
        bail!(
            "{}: line 1: header needs at least one in_ and one out_ column",
            path.display()
        );
    }
    let (mut ins, mut outs) = (Vec::new(), Vec::new());
    for rec in r.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            anyhow::anyhow!("{}: line {line}: {e}", path.display())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let vals = rec
            .iter()
            .map(|s| s.trim().parse::<f64>().ok().filter(|v| v.is_finite()))
            .collect::<Option<Vec<f64>>>()
            .with_context(|| {
                format!(
                    "{}: line {line}: expected {} finite numbers",
                    path.display(),
                    n_in + n_out
                )
            })?;
        ins.extend_from_slice(&vals[..n_in]);
        outs.extend_from_slice(&vals[n_in..]);
    }
    let rows = ins.len() / n_in;
    if rows == 0 {
        bail!("{}: no data rows", path.display());
    }
    let inputs = DenseMatrix::from_row_major(rows, n_in, ins)?;
    let targets = DenseMatrix::from_row_major(rows, n_out, outs)?;
    Ok(Dataset::new(inputs, targets)?)
}
