//! Output files and their readers. CSV for tables, pretty JSON for reports,
//! little-endian binary for path dumps.
//!
//! Path dump layout: four `u64` (paths `M`, steps `N`, `n`, `d`), then the
//! `f64` values path by path, node by node, component by component. `X` and
//! `Y` rows hold `n` values over `N+1` nodes; `Z` rows hold `n·d` values
//! (row `i` of `Z` first) over the `N` nodes `j < N`.

use fbsde_core::comparison::ComparisonReport;
use fbsde_core::picard::{ConvergenceReport, IterationRecord, IterationState};
use fbsde_core::simulation::PathArray;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const HISTORY: &str = "history.csv";
pub const NODES: &str = "nodes.csv";
pub const GAPS: &str = "gaps.csv";
pub const REPORT: &str = "report.json";
pub const NORMS: &str = "norms.json";
pub const RESIDUALS: &str = "residuals.json";
pub const ASSUMPTIONS: &str = "assumptions.json";
pub const COMPARISON: &str = "comparison.json";
pub const ERROR: &str = "error.json";

#[derive(Debug, Error)]
pub enum OutputError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> OutputError + '_ {
    move |source| OutputError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> OutputError + '_ {
    move |source| OutputError::Csv {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), OutputError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| OutputError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    std::fs::write(path, text).map_err(io(path))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, OutputError> {
    let text = std::fs::read_to_string(path).map_err(io(path))?;
    serde_json::from_str(&text).map_err(|source| OutputError::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), OutputError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    for r in rows {
        w.serialize(r).map_err(csv_err(path))?;
    }
    w.flush().map_err(io(path))
}

fn read_rows<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, OutputError> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    r.deserialize().collect::<Result<_, _>>().map_err(csv_err(path))
}

/// One outer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub k: usize,
    pub supdiff_x: f64,
    pub supdiff_y: f64,
    pub eps_mono: f64,
    pub viol_y_monotone: f64,
    pub viol_x_monotone: f64,
    pub viol_y_upper: f64,
    pub viol_x_upper: f64,
    pub clips_y_lower: usize,
    pub clips_y_upper: usize,
    pub clips_x_upper: usize,
    pub max_inner_iterations: usize,
    pub truncations: usize,
}

impl From<&IterationRecord> for HistoryRow {
    fn from(h: &IterationRecord) -> Self {
        Self {
            k: h.k,
            supdiff_x: h.supdiff_x,
            supdiff_y: h.supdiff_y,
            eps_mono: h.eps_mono,
            viol_y_monotone: h.envelope.y_monotone.fraction,
            viol_x_monotone: h.envelope.x_monotone.fraction,
            viol_y_upper: h.envelope.y_upper.fraction,
            viol_x_upper: h.envelope.x_upper.fraction,
            clips_y_lower: h.clips.y_lower,
            clips_y_upper: h.clips.y_upper,
            clips_x_upper: h.clips.x_upper,
            max_inner_iterations: h.max_inner_iterations,
            truncations: h.truncations,
        }
    }
}

pub fn write_history(path: &Path, report: &ConvergenceReport) -> Result<(), OutputError> {
    let rows: Vec<HistoryRow> = report.history.iter().map(HistoryRow::from).collect();
    write_rows(path, &rows)
}

pub fn read_history(path: &Path) -> Result<Vec<HistoryRow>, OutputError> {
    read_rows(path)
}

/// Cross-path summary of one component at one node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRow {
    pub node: usize,
    pub t: f64,
    pub component: usize,
    pub y_mean: f64,
    pub y_sd: f64,
    pub x_mean: f64,
    pub x_sd: f64,
    pub u_mean: f64,
    pub y0_mean: f64,
    pub s_mean: f64,
}

fn mean_sd(p: &PathArray, j: usize, i: usize) -> (f64, f64) {
    let w = p.width();
    let m = p.paths() as f64;
    let vals = p.node(j).chunks_exact(w).map(|r| r[i]);
    let mean = vals.clone().sum::<f64>() / m;
    let var = if m > 1.0 {
        vals.map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

pub fn node_rows(state: &IterationState) -> Vec<NodeRow> {
    let n = state.y.width();
    let mut rows = Vec::with_capacity(state.y.nodes() * n);
    for j in 0..state.y.nodes() {
        for i in 0..n {
            let (y_mean, y_sd) = mean_sd(&state.y, j, i);
            let (x_mean, x_sd) = mean_sd(&state.x, j, i);
            rows.push(NodeRow {
                node: j,
                t: state.grid.t(j),
                component: i,
                y_mean,
                y_sd,
                x_mean,
                x_sd,
                u_mean: mean_sd(&state.u, j, i).0,
                y0_mean: mean_sd(&state.y0, j, i).0,
                s_mean: mean_sd(&state.s, j, i).0,
            });
        }
    }
    rows
}

pub fn write_nodes(path: &Path, state: &IterationState) -> Result<(), OutputError> {
    write_rows(path, &node_rows(state))
}

pub fn read_nodes(path: &Path) -> Result<Vec<NodeRow>, OutputError> {
    read_rows(path)
}

/// Mean `upper − lower` gap of one component at one node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    pub node: usize,
    pub t: f64,
    pub component: usize,
    pub mean_gap_x: f64,
    pub mean_gap_y: f64,
}

pub fn write_gaps(path: &Path, report: &ComparisonReport) -> Result<(), OutputError> {
    let rows: Vec<GapRow> = report
        .gaps
        .iter()
        .flat_map(|g| {
            (0..g.mean_gap_y.len()).map(move |i| GapRow {
                node: g.node,
                t: g.t,
                component: i,
                mean_gap_x: g.mean_gap_x[i],
                mean_gap_y: g.mean_gap_y[i],
            })
        })
        .collect();
    write_rows(path, &rows)
}

pub fn read_gaps(path: &Path) -> Result<Vec<GapRow>, OutputError> {
    read_rows(path)
}

/// Which process a dump holds; decides the row width from the header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PathKind {
    State,
    Z,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DumpHeader {
    pub paths: u64,
    pub steps: u64,
    pub n: u64,
    pub d: u64,
}

pub fn write_paths(
    path: &Path,
    data: &PathArray,
    kind: PathKind,
    n: usize,
    d: usize,
) -> Result<(), OutputError> {
    let (m, nodes, w) = data.shape();
    let (width, steps) = match kind {
        PathKind::State => (n, nodes - 1),
        PathKind::Z => (n * d, nodes),
    };
    if w != width {
        return Err(OutputError::Format {
            path: path.to_path_buf(),
            message: format!("row width {w}, expected {width}"),
        });
    }
    let file = File::create(path).map_err(io(path))?;
    let mut out = BufWriter::new(file);
    for v in [m, steps, n, d] {
        out.write_all(&(v as u64).to_le_bytes()).map_err(io(path))?;
    }
    for v in data.to_path_major() {
        out.write_all(&v.to_le_bytes()).map_err(io(path))?;
    }
    out.flush().map_err(io(path))
}

pub fn read_paths(path: &Path, kind: PathKind) -> Result<(DumpHeader, PathArray), OutputError> {
    let file = File::open(path).map_err(io(path))?;
    let mut bytes = Vec::new();
    BufReader::new(file).read_to_end(&mut bytes).map_err(io(path))?;
    let bad = |message: String| OutputError::Format {
        path: path.to_path_buf(),
        message,
    };
    if bytes.len() < 32 {
        return Err(bad("shorter than the 32-byte header".into()));
    }
    let word = |i: usize| u64::from_le_bytes(bytes[8 * i..8 * i + 8].try_into().expect("8 bytes"));
    let h = DumpHeader {
        paths: word(0),
        steps: word(1),
        n: word(2),
        d: word(3),
    };
    let (width, nodes) = match kind {
        PathKind::State => (h.n, h.steps + 1),
        PathKind::Z => (h.n * h.d, h.steps),
    };
    let (m, width, nodes) = (h.paths as usize, width as usize, nodes as usize);
    let expected = m * nodes * width;
    if bytes.len() != 32 + 8 * expected {
        return Err(bad(format!(
            "{} payload bytes, header implies {}",
            bytes.len() - 32,
            8 * expected
        )));
    }
    let values: Vec<f64> = bytes[32..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let arr = PathArray::from_path_major(m, nodes, width, &values).map_err(|e| bad(e.to_string()))?;
    Ok((h, arr))
}

/// Machine-readable failure record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub command: String,
    /// `config`, `numerical`, `hypothesis` or `io`.
    pub kind: String,
    pub exit_code: i32,
    pub message: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub causes: Vec<String>,
}

impl ErrorRecord {
    pub fn new(command: &str, kind: &str, exit_code: i32, err: &dyn std::error::Error) -> Self {
        let mut causes = Vec::new();
        let mut src = err.source();
        while let Some(s) = src {
            causes.push(s.to_string());
            src = s.source();
        }
        Self {
            command: command.into(),
            kind: kind.into(),
            exit_code,
            message: err.to_string(),
            causes,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dump_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("z.bin");
        let vals: Vec<f64> = (0..3 * 5 * 4).map(|i| (i as f64).sin() * 1e-300 + f64::EPSILON * i as f64).collect();
        let arr = PathArray::from_path_major(3, 5, 4, &vals).unwrap();
        write_paths(&path, &arr, PathKind::Z, 2, 2).unwrap();
        let (h, back) = read_paths(&path, PathKind::Z).unwrap();
        assert_eq!((h.paths, h.steps, h.n, h.d), (3, 5, 2, 2));
        assert_eq!(back, arr);
        assert!(read_paths(&path, PathKind::State).is_err());
    }

    #[test]
    fn truncated_dump_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bin");
        std::fs::write(&path, [0u8; 16]).unwrap();
        assert!(matches!(read_paths(&path, PathKind::State), Err(OutputError::Format { .. })));
    }

    #[test]
    fn csv_rows_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.csv");
        let rows = vec![
            GapRow {
                node: 0,
                t: 0.0,
                component: 0,
                mean_gap_x: 0.1 + 0.2,
                mean_gap_y: -1e-17,
            },
            GapRow {
                node: 1,
                t: 1.0 / 3.0,
                component: 0,
                mean_gap_x: f64::MIN_POSITIVE,
                mean_gap_y: 12345.678901234567,
            },
        ];
        write_rows(&path, &rows).unwrap();
        assert_eq!(read_gaps(&path).unwrap(), rows);
    }
}
