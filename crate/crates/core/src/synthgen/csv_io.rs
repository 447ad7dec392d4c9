//! One CSV file per modality: header row, comma separated, one sample per line.

use std::fs::File;
use std::path::{Path, PathBuf};

use super::{Ledger, MultimodalDataset};
use crate::neurocore::Matrix;
use crate::{Error, Result};

struct Table {
    path: PathBuf,
    columns: Vec<String>,
    rows: Vec<Vec<f64>>,
    /// 1-based source line of each row.
    lines: Vec<usize>,
}

fn read_table(path: &Path) -> Result<Table> {
    let file = File::open(path).map_err(|e| Error::Ingestion {
        path: path.to_path_buf(),
        line: 0,
        message: e.to_string(),
    })?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let columns: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Ingestion {
            path: path.to_path_buf(),
            line: 1,
            message: e.to_string(),
        })?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let mut rows = Vec::new();
    let mut lines = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Ingestion {
            path: path.to_path_buf(),
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let row = record
            .iter()
            .enumerate()
            .map(|(col, cell)| {
                cell.trim().parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| {
                    Error::Ingestion {
                        path: path.to_path_buf(),
                        line,
                        message: format!(
                            "non-numeric value {cell:?} in column {:?}",
                            columns.get(col).map_or("?", String::as_str)
                        ),
                    }
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
        lines.push(line);
    }
    Ok(Table {
        path: path.to_path_buf(),
        columns,
        rows,
        lines,
    })
}

/// Loads row-aligned per-modality CSV files. The label column is taken from
/// the first file that contains it and dropped from every file's features.
/// The resulting dataset has an unknown ledger.
pub fn load_csv<P: AsRef<Path>>(paths: &[P], label_column: &str) -> Result<MultimodalDataset> {
    if paths.is_empty() {
        return Err(Error::input("no modality files given"));
    }
    let tables = paths
        .iter()
        .map(|p| read_table(p.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    let n = tables[0].rows.len();
    for t in &tables[1..] {
        if t.rows.len() != n {
            return Err(Error::Ingestion {
                path: t.path.clone(),
                line: t.lines.last().copied().unwrap_or(1),
                message: format!(
                    "{} has {} rows but {} has {n}",
                    t.path.display(),
                    t.rows.len(),
                    tables[0].path.display()
                ),
            });
        }
    }

    let mut labels: Option<Vec<usize>> = None;
    let mut modalities = Vec::with_capacity(tables.len());
    for t in &tables {
        let label_idx = t.columns.iter().position(|c| c == label_column);
        if let (Some(li), None) = (label_idx, &labels) {
            let parsed = t
                .rows
                .iter()
                .zip(&t.lines)
                .map(|(row, &line)| {
                    let v = row[li];
                    if v >= 0.0 && v.fract() == 0.0 {
                        Ok(v as usize)
                    } else {
                        Err(Error::Ingestion {
                            path: t.path.clone(),
                            line,
                            message: format!("label {v} is not a non-negative integer"),
                        })
                    }
                })
                .collect::<Result<Vec<usize>>>()?;
            labels = Some(parsed);
        }
        let keep: Vec<usize> = (0..t.columns.len()).filter(|&c| Some(c) != label_idx).collect();
        let data: Vec<f64> = t
            .rows
            .iter()
            .flat_map(|row| keep.iter().map(move |&c| row[c]))
            .collect();
        modalities.push(Matrix::new(n, keep.len(), data)?);
    }
    let labels = labels.ok_or_else(|| Error::Ingestion {
        path: tables[0].path.clone(),
        line: 1,
        message: format!("no file has a label column named {label_column:?}"),
    })?;
    let num_classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    Ok(MultimodalDataset {
        modalities,
        labels,
        num_classes,
        ledger: Ledger::Unknown,
        strengths: None,
        latents: None,
    })
}

/// Writes `modality_<i>.csv` into `dir`, each with feature columns `x0…` and the label column.
pub fn write_csv(ds: &MultimodalDataset, dir: &Path, label_column: &str) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::with_capacity(ds.num_modalities());
    for (i, x) in ds.modalities.iter().enumerate() {
        let path = dir.join(format!("modality_{i}.csv"));
        let mut w = csv::Writer::from_path(&path).map_err(csv_io_error)?;
        let mut header: Vec<String> = (0..x.cols()).map(|c| format!("x{c}")).collect();
        header.push(label_column.to_string());
        w.write_record(&header).map_err(csv_io_error)?;
        for r in 0..x.rows() {
            let mut rec: Vec<String> = x.row(r).iter().map(|v| format!("{v:.16e}")).collect();
            rec.push(ds.labels[r].to_string());
            w.write_record(&rec).map_err(csv_io_error)?;
        }
        w.flush()?;
        paths.push(path);
    }
    Ok(paths)
}

fn csv_io_error(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}
