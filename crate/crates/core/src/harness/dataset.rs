use std::fs::File;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::smiles::{parse, MolGraph};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("dataset I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("column {0:?} not found in header")]
    MissingColumn(String),
    #[error("dataset has no usable rows")]
    EmptyDataset,
}

/// Which CSV columns hold the SMILES string and the targets. An empty
/// target list means every other column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schema {
    pub smiles_column: String,
    pub target_columns: Vec<String>,
}

impl Default for Schema {
    fn default() -> Self {
        Schema { smiles_column: "smiles".into(), target_columns: Vec::new() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetRecord {
    /// 1-based line in the source file.
    pub line: u64,
    pub smiles: String,
    pub graph: MolGraph,
    /// `NaN` marks a missing value.
    pub targets: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SkippedRow {
    pub line: u64,
    pub reason: String,
}

/// Streams records from CSV input, parsing each SMILES as it goes.
/// Malformed rows come out as `Err(SkippedRow)`.
pub struct DatasetReader<R: Read> {
    records: csv::StringRecordsIntoIter<R>,
    smiles_idx: usize,
    target_idx: Vec<usize>,
    pub target_names: Vec<String>,
}

impl<R: Read> DatasetReader<R> {
    pub fn new(input: R, schema: &Schema) -> Result<DatasetReader<R>, DatasetError> {
        let mut rdr = csv::ReaderBuilder::new().flexible(true).trim(csv::Trim::All).from_reader(input);
        let header = rdr.headers()?.clone();
        let find = |name: &str| header.iter().position(|h| h == name).ok_or_else(|| DatasetError::MissingColumn(name.to_string()));
        let smiles_idx = find(&schema.smiles_column)?;
        let target_idx: Vec<usize> = if schema.target_columns.is_empty() {
            (0..header.len()).filter(|&i| i != smiles_idx).collect()
        } else {
            schema.target_columns.iter().map(|c| find(c)).collect::<Result<_, _>>()?
        };
        if target_idx.is_empty() {
            return Err(DatasetError::MissingColumn("<target>".into()));
        }
        let target_names = target_idx.iter().map(|&i| header[i].to_string()).collect();
        Ok(DatasetReader { records: rdr.into_records(), smiles_idx, target_idx, target_names })
    }
}

impl<R: Read> Iterator for DatasetReader<R> {
    type Item = Result<DatasetRecord, SkippedRow>;

    fn next(&mut self) -> Option<Self::Item> {
        let rec = self.records.next()?;
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line());
                return Some(Err(SkippedRow { line, reason: e.to_string() }));
            }
        };
        let line = rec.position().map_or(0, |p| p.line());
        let skip = |reason: String| Some(Err(SkippedRow { line, reason }));
        let Some(smiles) = rec.get(self.smiles_idx) else {
            return skip("missing SMILES field".into());
        };
        let graph = match parse(smiles) {
            Ok(g) => g,
            Err(e) => return skip(format!("SMILES: {e}")),
        };
        let mut targets = Vec::with_capacity(self.target_idx.len());
        for &i in &self.target_idx {
            let field = rec.get(i).unwrap_or("");
            let value = if field.is_empty() || field.eq_ignore_ascii_case("nan") {
                f64::NAN
            } else {
                match field.parse::<f64>() {
                    Ok(v) if v.is_finite() => v,
                    _ => return skip(format!("target {field:?} is not a number")),
                }
            };
            targets.push(value);
        }
        Some(Ok(DatasetRecord { line, smiles: smiles.to_string(), graph, targets }))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub target_names: Vec<String>,
    pub records: Vec<DatasetRecord>,
    pub skipped: Vec<SkippedRow>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn from_reader<R: Read>(input: R, schema: &Schema) -> Result<Dataset, DatasetError> {
        let reader = DatasetReader::new(input, schema)?;
        let target_names = reader.target_names.clone();
        let mut records = Vec::new();
        let mut skipped = Vec::new();
        for item in reader {
            match item {
                Ok(r) => records.push(r),
                Err(s) => skipped.push(s),
            }
        }
        if records.is_empty() {
            return Err(DatasetError::EmptyDataset);
        }
        Ok(Dataset { target_names, records, skipped })
    }
}

pub fn load_dataset(path: &Path, schema: &Schema) -> Result<Dataset, DatasetError> {
    Dataset::from_reader(File::open(path)?, schema)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_rows() {
        let ds = Dataset::from_reader("smiles,y\nCCO,1.5\nc1ccccc1,2\n".as_bytes(), &Schema::default()).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.records[1].targets, [2.0]);
        assert_eq!(ds.records[0].line, 2);
        assert!(ds.skipped.is_empty());
    }

    #[test]
    fn bad_rows_are_skipped_and_counted() {
        let csv = "smiles,y\nCCO,1\nC1CC,2\nCC,abc\nCN,\n";
        let ds = Dataset::from_reader(csv.as_bytes(), &Schema::default()).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.skipped.iter().map(|s| s.line).collect::<Vec<_>>(), [3, 4]);
        assert!(ds.records[1].targets[0].is_nan());
    }

    #[test]
    fn twelve_targets() {
        let names = ["mu", "alpha", "homo", "lumo", "gap", "r2", "zpve", "u0", "u298", "h298", "g298", "cv"];
        let mut csv = format!("smiles,{}\n", names.join(","));
        csv.push_str("CCO");
        for i in 0..12 {
            csv.push_str(&format!(",{i}"));
        }
        csv.push('\n');
        let ds = Dataset::from_reader(csv.as_bytes(), &Schema::default()).unwrap();
        assert_eq!(ds.records[0].targets.len(), 12);
        assert_eq!(ds.target_names, names);
    }

    #[test]
    fn errors() {
        let schema = Schema { smiles_column: "smi".into(), target_columns: vec![] };
        assert!(matches!(Dataset::from_reader("smiles,y\nC,1\n".as_bytes(), &schema), Err(DatasetError::MissingColumn(_))));
        assert!(matches!(Dataset::from_reader("smiles,y\nC1,1\n".as_bytes(), &Schema::default()), Err(DatasetError::EmptyDataset)));
    }
}
