//! Real-data ingestion: a CSV with numeric features and one column naming the
//! domain of each row.

use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CovarianceSpec, DataPair};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Standardize {
    None,
    /// Column statistics over every row of the file.
    #[default]
    Pooled,
    /// Column statistics over the rows left out of the sample.
    HeldOut,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub domain_column: String,
    pub source_value: String,
    pub target_value: String,
    pub n_source: usize,
    pub n_target: usize,
    #[serde(default)]
    pub standardize: Standardize,
    #[serde(default)]
    pub seed: u64,
    /// Feature columns to keep; every other numeric column when absent.
    #[serde(default)]
    pub features: Option<Vec<String>>,
}

struct Table {
    source: Vec<Vec<f64>>,
    target: Vec<Vec<f64>>,
    d: usize,
}

fn read_table(path: &Path, split: &SplitSpec) -> Result<Table> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::Csv(format!("{}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Csv(e.to_string()))?
        .clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Csv(format!("column {name:?} not found")))
    };
    let domain = find(&split.domain_column)?;
    let columns: Vec<usize> = match &split.features {
        Some(names) => names.iter().map(|n| find(n)).collect::<Result<_>>()?,
        None => (0..headers.len()).filter(|&c| c != domain).collect(),
    };
    if columns.is_empty() {
        return Err(Error::Csv("no feature columns".into()));
    }
    let mut table = Table {
        source: Vec::new(),
        target: Vec::new(),
        d: columns.len(),
    };
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Csv(e.to_string()))?;
        let row = columns
            .iter()
            .map(|&c| {
                let cell = record.get(c).unwrap_or("").trim();
                cell.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| {
                    Error::Csv(format!(
                        "row {}, column {:?}: non-numeric value {cell:?}",
                        line + 2,
                        &headers[c]
                    ))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        let label = record.get(domain).unwrap_or("").trim();
        if label == split.source_value {
            table.source.push(row);
        } else if label == split.target_value {
            table.target.push(row);
        }
    }
    Ok(table)
}

fn to_matrix(rows: &[Vec<f64>], d: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows.len(), d), |(i, j)| rows[i][j])
}

fn standardize(mut m: Array2<f64>, stats: &Array2<f64>) -> Array2<f64> {
    if stats.nrows() < 2 {
        return m;
    }
    let mean = stats.mean_axis(Axis(0)).expect("non-empty");
    let std = stats.std_axis(Axis(0), 1.0);
    for mut row in m.rows_mut() {
        for ((v, mu), s) in row.iter_mut().zip(&mean).zip(&std) {
            *v = if *s > 0.0 { (*v - mu) / s } else { *v - mu };
        }
    }
    m
}

/// Samples `n_source`/`n_target` rows without replacement from each domain.
pub fn ingest_csv(path: impl AsRef<Path>, split: &SplitSpec) -> Result<(DataPair, CovarianceSpec)> {
    let table = read_table(path.as_ref(), split)?;
    for (name, have, want) in [
        ("source", table.source.len(), split.n_source),
        ("target", table.target.len(), split.n_target),
    ] {
        if want > have {
            return Err(Error::Data(format!(
                "requested {want} {name} rows but the file has {have}"
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(split.seed);
    let pick = |rows: &[Vec<f64>], n: usize, rng: &mut ChaCha8Rng| {
        let mut idx = sample(rng, rows.len(), n).into_vec();
        idx.sort_unstable();
        let mut chosen = vec![false; rows.len()];
        idx.iter().for_each(|&i| chosen[i] = true);
        let kept: Vec<Vec<f64>> = idx.iter().map(|&i| rows[i].clone()).collect();
        let rest: Vec<Vec<f64>> = rows
            .iter()
            .zip(&chosen)
            .filter(|(_, &c)| !c)
            .map(|(r, _)| r.clone())
            .collect();
        (kept, rest)
    };
    let (src, src_rest) = pick(&table.source, split.n_source, &mut rng);
    let (tgt, tgt_rest) = pick(&table.target, split.n_target, &mut rng);
    let d = table.d;
    let (mut source, mut target) = (to_matrix(&src, d), to_matrix(&tgt, d));
    let stats = match split.standardize {
        Standardize::None => None,
        Standardize::Pooled => Some(to_matrix(
            &table.source.iter().chain(&table.target).cloned().collect::<Vec<_>>(),
            d,
        )),
        Standardize::HeldOut => Some(to_matrix(
            &src_rest.into_iter().chain(tgt_rest).collect::<Vec<_>>(),
            d,
        )),
    };
    if let Some(stats) = stats {
        source = standardize(source, &stats);
        target = standardize(target, &stats);
    }
    let data = DataPair::new(source, target)?;
    let spec = CovarianceSpec::identity(split.n_source, split.n_target, d);
    Ok((data, spec))
}

/// Writes a data pair in the layout [`ingest_csv`] reads, with a `domain`
/// column holding `source` or `target`.
pub fn write_csv(data: &DataPair, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())
        .map_err(|e| Error::Csv(format!("{}: {e}", path.as_ref().display())))?;
    let mut header = vec!["domain".to_string()];
    header.extend((0..data.dim()).map(|k| format!("x{k}")));
    w.write_record(&header).map_err(|e| Error::Csv(e.to_string()))?;
    for (label, block) in [("source", &data.source), ("target", &data.target)] {
        for row in block.rows() {
            let mut rec = vec![label.to_string()];
            rec.extend(row.iter().map(|v| format!("{v:?}")));
            w.write_record(&rec).map_err(|e| Error::Csv(e.to_string()))?;
        }
    }
    w.flush()?;
    Ok(())
}
