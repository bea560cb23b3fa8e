use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::SweepConfig;
use crate::asymptotics::DivergenceFlags;
use crate::error::{Error, Result};
use crate::family::NonlinearityKind;
use crate::optimizer::Status;

/// One sweep cell. `theory_mse` is `None` (an empty CSV field) when the
/// prediction is unavailable or the kind was flagged divergent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub kind: NonlinearityKind,
    #[serde(rename = "N_d")]
    pub n_d: usize,
    #[serde(rename = "N_n")]
    pub n_n: usize,
    pub gamma: f64,
    pub trials: usize,
    pub median_mse: f64,
    pub mean_mse: f64,
    pub theory_mse: Option<f64>,
    pub diverged: bool,
    pub failed_trials: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub kind: NonlinearityKind,
    pub n_d: usize,
    pub n_n: usize,
    pub gamma: f64,
    pub trial: usize,
    pub seed: u64,
    pub sq_error: f64,
    pub c_error: f64,
    pub status: Status,
    pub iterations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KindTheory {
    pub kind: NonlinearityKind,
    pub divergence: DivergenceFlags,
    pub gamma_hat: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepMetadata {
    pub sweep: String,
    pub version: String,
    pub config: SweepConfig,
    pub n_total: Option<usize>,
    pub theory: Vec<KindTheory>,
    pub notes: Vec<String>,
    pub trials: Vec<TrialRecord>,
}

impl SweepMetadata {
    pub fn new(sweep: &str, config: SweepConfig) -> Self {
        Self {
            sweep: sweep.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config,
            n_total: None,
            theory: Vec::new(),
            notes: Vec::new(),
            trials: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ResultsTable {
    pub rows: Vec<ResultRow>,
    pub metadata: Option<SweepMetadata>,
}

pub const CSV_HEADER: &str = "kind,N_d,N_n,gamma,trials,median_mse,mean_mse,theory_mse,diverged,failed_trials";

fn metadata_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Writes the rows as CSV at `path` and any metadata as JSON next to it.
pub fn write_results(table: &ResultsTable, path: &Path) -> Result<()> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(BufWriter::new(file));
    w.write_record(CSV_HEADER.split(',')).map_err(csv_err)?;
    for row in &table.rows {
        w.serialize(row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;

    if let Some(meta) = &table.metadata {
        let mpath = metadata_path(path);
        let file = File::create(&mpath).map_err(|e| Error::io(&mpath, e))?;
        serde_json::to_writer_pretty(BufWriter::new(file), meta).map_err(|source| Error::Json {
            path: mpath.clone(),
            source,
        })?;
    }
    Ok(())
}

/// Reads a table written by [`write_results`], including metadata when present.
pub fn read_results(path: &Path) -> Result<ResultsTable> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let header: Vec<String> = r.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    if header.join(",") != CSV_HEADER {
        return Err(Error::InvalidInput(format!(
            "{}: unexpected header '{}'",
            path.display(),
            header.join(",")
        )));
    }
    let rows = r.deserialize().collect::<std::result::Result<Vec<ResultRow>, _>>().map_err(csv_err)?;

    let mpath = metadata_path(path);
    let metadata = if mpath.exists() {
        let file = File::open(&mpath).map_err(|e| Error::io(&mpath, e))?;
        Some(
            serde_json::from_reader(std::io::BufReader::new(file)).map_err(|source| Error::Json {
                path: mpath.clone(),
                source,
            })?,
        )
    } else {
        None
    };
    Ok(ResultsTable { rows, metadata })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn row(kind: NonlinearityKind, theory: Option<f64>) -> ResultRow {
        ResultRow {
            kind,
            n_d: 500,
            n_n: 500,
            gamma: 1.0,
            trials: 20,
            median_mse: 0.012345678901234567,
            mean_mse: 1.0 / 3.0,
            theory_mse: theory,
            diverged: theory.is_none(),
            failed_trials: 2,
        }
    }

    #[test]
    fn empty_table_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.csv");
        write_results(&ResultsTable::default(), &path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), format!("{CSV_HEADER}\n"));
        assert!(!path.with_extension("json").exists());
        assert_eq!(read_results(&path).unwrap(), ResultsTable::default());
    }

    #[test]
    fn divergent_theory_is_empty_field() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        let table = ResultsTable {
            rows: vec![row(NonlinearityKind::Is, None), row(NonlinearityKind::Nc, Some(2e-4))],
            metadata: Some(SweepMetadata::new("sample_size", SweepConfig::default())),
        };
        write_results(&table, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert!(lines[1].starts_with("is,500,500,1.0,20,"));
        assert!(lines[1].ends_with(",,true,2"), "{}", lines[1]);
        assert_eq!(read_results(&path).unwrap(), table);
    }

    #[test]
    fn missing_file_reports_path() {
        let err = read_results(Path::new("/nonexistent/results.csv")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/results.csv"));
    }

    fn arb_row() -> impl Strategy<Value = ResultRow> {
        (
            proptest::sample::select(NonlinearityKind::ALL.to_vec()),
            1usize..100_000,
            1usize..100_000,
            any::<f64>().prop_filter("finite", |v| v.is_finite()),
            (any::<f64>(), any::<f64>()).prop_filter("finite", |(a, b)| a.is_finite() && b.is_finite()),
            proptest::option::of(any::<f64>().prop_filter("finite", |v| v.is_finite())),
            any::<bool>(),
            0usize..50,
        )
            .prop_map(|(kind, n_d, n_n, gamma, (median, mean), theory, diverged, failed)| ResultRow {
                kind,
                n_d,
                n_n,
                gamma,
                trials: 50,
                median_mse: median,
                mean_mse: mean,
                theory_mse: theory,
                diverged,
                failed_trials: failed,
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn csv_round_trip(rows in proptest::collection::vec(arb_row(), 0..8)) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("t.csv");
            let table = ResultsTable { rows, metadata: None };
            write_results(&table, &path).unwrap();
            prop_assert_eq!(read_results(&path).unwrap(), table);
        }
    }
}
