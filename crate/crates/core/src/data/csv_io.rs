//! CSV datasets with an `x1..xn,y1..ym` header.

use std::path::Path;

use super::{Dataset, DatasetMeta};
use crate::error::{QkanError, Result};
use crate::fsio::write_atomic;

/// Renders a dataset. Floats use the shortest representation that parses
/// back to the same bits.
pub fn to_csv_string(dataset: &Dataset) -> Result<String> {
    dataset.validate()?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let header: Vec<String> = (1..=dataset.n_features())
        .map(|i| format!("x{i}"))
        .chain((1..=dataset.n_targets()).map(|i| format!("y{i}")))
        .collect();
    let fail = |e: csv::Error| QkanError::Numerical(format!("csv encoding failed: {e}"));
    w.write_record(&header).map_err(fail)?;
    for (x, y) in dataset.inputs.iter().zip(&dataset.targets) {
        let row: Vec<String> = x.iter().chain(y).map(|v| format!("{v:?}")).collect();
        w.write_record(&row).map_err(fail)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| QkanError::Numerical(format!("csv encoding failed: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is ascii"))
}

pub fn write_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    write_atomic(path, to_csv_string(dataset)?.as_bytes())
}

pub fn read_csv(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| QkanError::io(path, e))?;
    parse_csv(&text, path)
}

fn parse_err(path: &Path, message: String) -> QkanError {
    QkanError::Parse {
        path: path.to_path_buf(),
        message,
    }
}

pub(crate) fn parse_csv(text: &str, path: &Path) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(text.as_bytes());
    let header = rdr
        .headers()
        .map_err(|e| parse_err(path, format!("line 1: {e}")))?
        .clone();
    let mut n_x = 0;
    let mut n_y = 0;
    for (i, name) in header.iter().enumerate() {
        let name = name.trim();
        if name == format!("x{}", n_x + 1) && n_y == 0 {
            n_x += 1;
        } else if name == format!("y{}", n_y + 1) {
            n_y += 1;
        } else {
            return Err(parse_err(path, format!("line 1: unexpected column `{name}` at position {}", i + 1)));
        }
    }
    if n_y == 0 {
        return Err(parse_err(path, "line 1: header has no target columns".into()));
    }
    let width = n_x + n_y;
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| parse_err(path, e.to_string()))?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != width {
            return Err(parse_err(
                path,
                format!("line {line}: expected {width} fields, found {}", record.len()),
            ));
        }
        let mut row = Vec::with_capacity(width);
        for field in record.iter() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| parse_err(path, format!("line {line}: invalid number `{field}`")))?;
            row.push(v);
        }
        targets.push(row.split_off(n_x));
        inputs.push(row);
    }
    Dataset::new(inputs, targets, DatasetMeta::default()).map_err(|e| parse_err(path, e.to_string()))
}
