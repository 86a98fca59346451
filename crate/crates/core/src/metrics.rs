//! Per-round measurement against the analytic oracle and CSV traces.
//!
//! A trace file starts with `#`-prefixed `key=value` metadata lines and then
//! holds the columns
//! `round,grad_norm_sq,lower_err,z_err,phi,uplink_bits,broadcast_bits`.
//! Reals are written with 17 significant digits, which round-trips every
//! finite double; absent values are empty cells.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use crate::algorithms::ServerState;
use crate::problems::AnalyticOracle;

pub const COLUMNS: [&str; 7] = [
    "round",
    "grad_norm_sq",
    "lower_err",
    "z_err",
    "phi",
    "uplink_bits",
    "broadcast_bits",
];

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("trace parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("trace has no {0} column values")]
    Missing(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TraceRow {
    pub round: u64,
    /// `|grad Phi(x)|^2`
    pub grad_norm_sq: Option<f64>,
    /// `|y - y*(x)|`
    pub lower_err: Option<f64>,
    /// `|z - z*(x)|`
    pub z_err: Option<f64>,
    pub phi: Option<f64>,
    /// Cumulative uplink bits.
    pub uplink_bits: u64,
    /// Cumulative broadcast bits.
    pub broadcast_bits: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TraceHeader {
    pub cfg_digest: String,
    pub seed: u64,
    pub problem_digest: String,
}

/// Rows of a run plus the wall-clock seconds spent on each. Timings are not
/// serialized and do not take part in equality.
#[derive(Debug, Clone, Default)]
pub struct RunTrace {
    header: TraceHeader,
    rows: Vec<TraceRow>,
    seconds: Vec<f64>,
}

impl PartialEq for RunTrace {
    fn eq(&self, other: &Self) -> bool {
        self.header == other.header && self.rows == other.rows
    }
}

impl RunTrace {
    pub fn new(header: TraceHeader) -> Self {
        Self {
            header,
            rows: Vec::new(),
            seconds: Vec::new(),
        }
    }

    pub fn from_rows(header: TraceHeader, rows: Vec<TraceRow>) -> Self {
        let seconds = vec![0.0; rows.len()];
        Self { header, rows, seconds }
    }

    pub fn push(&mut self, row: TraceRow, seconds: f64) {
        self.rows.push(row);
        self.seconds.push(seconds);
    }

    pub fn header(&self) -> &TraceHeader {
        &self.header
    }

    pub fn rows(&self) -> &[TraceRow] {
        &self.rows
    }

    pub fn seconds(&self) -> &[f64] {
        &self.seconds
    }

    pub fn last(&self) -> Option<&TraceRow> {
        self.rows.last()
    }

    /// First row whose `grad_norm_sq` is at most `target`.
    pub fn first_below(&self, target: f64) -> Option<&TraceRow> {
        self.rows.iter().find(|r| r.grad_norm_sq.is_some_and(|g| g <= target))
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = format!(
            "# cfg_digest={}\n# seed={}\n# problem_digest={}\n",
            self.header.cfg_digest, self.header.seed, self.header.problem_digest
        );
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        w.write_record(COLUMNS).expect("in-memory write");
        for r in &self.rows {
            w.write_record([
                r.round.to_string(),
                real(r.grad_norm_sq),
                real(r.lower_err),
                real(r.z_err),
                real(r.phi),
                r.uplink_bits.to_string(),
                r.broadcast_bits.to_string(),
            ])
            .expect("in-memory write");
        }
        out.push_str(std::str::from_utf8(&w.into_inner().expect("in-memory flush")).expect("ascii"));
        out
    }

    pub fn from_csv_str(text: &str) -> Result<Self, MetricsError> {
        let parse_err = |line: usize, msg: String| MetricsError::Parse { line, msg };
        let mut header = TraceHeader::default();
        let mut body_start = 0;
        let mut meta_lines = 0;
        for line in text.split_inclusive('\n') {
            let Some(meta) = line.strip_prefix('#') else { break };
            meta_lines += 1;
            body_start += line.len();
            let meta = meta.trim();
            let (k, v) = meta
                .split_once('=')
                .ok_or_else(|| parse_err(meta_lines, format!("bad metadata line {meta:?}")))?;
            match k.trim() {
                "cfg_digest" => header.cfg_digest = v.trim().to_string(),
                "seed" => {
                    header.seed = v
                        .trim()
                        .parse()
                        .map_err(|e| parse_err(meta_lines, format!("seed: {e}")))?
                }
                "problem_digest" => header.problem_digest = v.trim().to_string(),
                _ => {}
            }
        }
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .from_reader(&text.as_bytes()[body_start..]);
        let mut records = rdr.records();
        let first = meta_lines + 1;
        let cols = records
            .next()
            .ok_or_else(|| parse_err(first, "missing column header".into()))?
            .map_err(|e| parse_err(first, e.to_string()))?;
        if cols.iter().ne(COLUMNS) {
            return Err(parse_err(first, format!("unexpected columns {cols:?}")));
        }
        let mut rows = Vec::new();
        for (i, rec) in records.enumerate() {
            let line = first + 1 + i;
            let rec = rec.map_err(|e| parse_err(line, e.to_string()))?;
            if rec.len() != COLUMNS.len() {
                return Err(parse_err(line, format!("expected {} fields, got {}", COLUMNS.len(), rec.len())));
            }
            let int = |j: usize| {
                rec[j]
                    .parse::<u64>()
                    .map_err(|e| parse_err(line, format!("{}: {e}", COLUMNS[j])))
            };
            let opt = |j: usize| -> Result<Option<f64>, MetricsError> {
                if rec[j].is_empty() {
                    return Ok(None);
                }
                let v = rec[j]
                    .parse::<f64>()
                    .map_err(|e| parse_err(line, format!("{}: {e}", COLUMNS[j])))?;
                Ok(Some(v))
            };
            rows.push(TraceRow {
                round: int(0)?,
                grad_norm_sq: opt(1)?,
                lower_err: opt(2)?,
                z_err: opt(3)?,
                phi: opt(4)?,
                uplink_bits: int(5)?,
                broadcast_bits: int(6)?,
            });
        }
        Ok(Self::from_rows(header, rows))
    }
}

fn real(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.16e}")).unwrap_or_default()
}

pub fn write_csv(trace: &RunTrace, path: &Path) -> Result<(), MetricsError> {
    fs::write(path, trace.to_csv_string()).map_err(|source| MetricsError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_csv(path: &Path) -> Result<RunTrace, MetricsError> {
    let text = fs::read_to_string(path).map_err(|source| MetricsError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    RunTrace::from_csv_str(&text)
}

/// Measures the server iterate against the analytic oracle. Bit columns
/// are left at zero for the caller to fill.
pub fn measure(state: &ServerState, analytic: Option<&dyn AnalyticOracle>) -> TraceRow {
    let mut row = TraceRow {
        round: state.round,
        ..TraceRow::default()
    };
    if let Some(a) = analytic {
        row.grad_norm_sq = Some(a.hypergrad(&state.x).norm_squared());
        row.lower_err = Some((&state.y - a.y_star(&state.x)).norm());
        row.z_err = Some((&state.z - a.z_star(&state.x)).norm());
        row.phi = Some(a.phi_value(&state.x));
    }
    row
}

/// Mean of `grad_norm_sq` over all rows of the trace.
pub fn averaged_stationarity(trace: &RunTrace) -> Result<f64, MetricsError> {
    if trace.rows.is_empty() {
        return Err(MetricsError::Missing("grad_norm_sq"));
    }
    let mut sum = 0.0;
    for r in &trace.rows {
        sum += r.grad_norm_sq.ok_or(MetricsError::Missing("grad_norm_sq"))?;
    }
    Ok(sum / trace.rows.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compressors::Vector;
    use crate::problems::{make_quadratic, QuadraticSpec};

    fn row(round: u64, g: f64) -> TraceRow {
        TraceRow {
            round,
            grad_norm_sq: Some(g),
            lower_err: Some(g / 3.0),
            z_err: None,
            phi: Some(-g * 1e-300),
            uplink_bits: round * 10,
            broadcast_bits: round * 7,
        }
    }

    fn header() -> TraceHeader {
        TraceHeader {
            cfg_digest: "abc".into(),
            seed: 42,
            problem_digest: "def".into(),
        }
    }

    #[test]
    fn empty_trace_is_header_only() {
        let t = RunTrace::new(header());
        let s = t.to_csv_string();
        assert_eq!(s.lines().filter(|l| !l.starts_with('#')).count(), 1);
        assert_eq!(RunTrace::from_csv_str(&s).unwrap(), t);
    }

    #[test]
    fn rows_round_trip_exactly() {
        let t = RunTrace::from_rows(header(), vec![row(0, 0.1), row(1, 1.0 / 3.0), row(2, f64::MIN_POSITIVE)]);
        let back = RunTrace::from_csv_str(&t.to_csv_string()).unwrap();
        assert_eq!(back, t);
        for (a, b) in back.rows().iter().zip(t.rows()) {
            assert_eq!(a.grad_norm_sq.unwrap().to_bits(), b.grad_norm_sq.unwrap().to_bits());
        }
    }

    #[test]
    fn file_round_trip_and_io_error_context() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let t = RunTrace::from_rows(header(), vec![row(0, 2.0)]);
        write_csv(&t, &path).unwrap();
        assert_eq!(read_csv(&path).unwrap(), t);
        let err = read_csv(&dir.path().join("missing.csv")).unwrap_err();
        assert!(err.to_string().contains("missing.csv"));
    }

    #[test]
    fn rejects_malformed_traces() {
        assert!(RunTrace::from_csv_str("").is_err());
        assert!(RunTrace::from_csv_str("a,b\n").is_err());
        let bad = "round,grad_norm_sq,lower_err,z_err,phi,uplink_bits,broadcast_bits\n1,x,,,,0,0\n";
        assert!(RunTrace::from_csv_str(bad).is_err());
        let short = "round,grad_norm_sq,lower_err,z_err,phi,uplink_bits,broadcast_bits\n1,,\n";
        assert!(RunTrace::from_csv_str(short).is_err());
    }

    #[test]
    fn averaged_stationarity_examples() {
        let t = RunTrace::from_rows(header(), vec![row(0, 0.0), row(1, 0.0)]);
        assert_eq!(averaged_stationarity(&t).unwrap(), 0.0);
        // column of norms [1, 2] -> squared [1, 4]
        let t = RunTrace::from_rows(header(), vec![row(0, 1.0), row(1, 4.0)]);
        assert_eq!(averaged_stationarity(&t).unwrap(), 2.5);
        let mut r = row(0, 1.0);
        r.grad_norm_sq = None;
        assert!(averaged_stationarity(&RunTrace::from_rows(header(), vec![r])).is_err());
    }

    fn scalar_state(x: f64, y: f64) -> (crate::problems::Problem, ServerState) {
        let p = make_quadratic(&QuadraticSpec::new(1, 1, 1, 0)).unwrap();
        let s = ServerState {
            x: Vector::from_element(1, x),
            y: Vector::from_element(1, y),
            z: Vector::zeros(1),
            h_x: Vector::zeros(0),
            hhat_x: Vector::zeros(0),
            m_y: Vector::zeros(0),
            m_z: Vector::zeros(0),
            round: 3,
        };
        (p, s)
    }

    #[test]
    fn measure_is_exact_at_the_solution_map() {
        let (p, mut s) = scalar_state(0.7, 0.0);
        let a = p.analytic().unwrap();
        s.y = a.y_star(&s.x);
        s.z = a.z_star(&s.x);
        let before = s.to_bytes();
        let r = measure(&s, Some(a));
        assert_eq!(s.to_bytes(), before);
        assert_eq!(r.lower_err, Some(0.0));
        assert_eq!(r.z_err, Some(0.0));
        assert_eq!(r.round, 3);
        assert!(measure(&s, None).grad_norm_sq.is_none());
    }
}
