use std::fs;
use std::path::Path;

use crate::data::Dataset;
use crate::error::{Error, Result};

/// Reads rows of `label, v1, ..., vd`. A first row whose label cell is not an
/// integer is treated as a header. Feature values must lie in `[0, 1]`.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.into(),
        line,
        msg,
    };
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        let label = match cells[0].parse::<usize>() {
            Ok(l) => l,
            Err(_) if i == 0 => continue,
            Err(_) => return Err(parse_err(i + 1, format!("label {:?} is not a class index", cells[0]))),
        };
        match width {
            None => width = Some(cells.len()),
            Some(w) if w != cells.len() => {
                return Err(parse_err(i + 1, format!("row has {} cells, expected {w}", cells.len())))
            }
            _ => {}
        }
        let mut values = Vec::with_capacity(cells.len() - 1);
        for cell in &cells[1..] {
            let v: f64 = cell
                .parse()
                .map_err(|_| parse_err(i + 1, format!("non-numeric cell {cell:?}")))?;
            if !(0.0..=1.0).contains(&v) {
                return Err(parse_err(i + 1, format!("value {v} outside [0, 1]")));
            }
            values.push(v);
        }
        rows.push(values);
        labels.push(label);
    }
    Dataset::from_rows(rows, labels)
}

/// Writes `label,v1,...,vd` rows without a header, using shortest round-trip
/// float formatting.
pub fn write_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    for (row, label) in ds.inputs().rows().into_iter().zip(ds.labels()) {
        out.push_str(&label.to_string());
        for v in row {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
