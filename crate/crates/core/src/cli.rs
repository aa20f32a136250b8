//! Command-line front end: CSV in, smoothed derivatives out.

use std::fs::File;
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use clap::Parser;
use serde::Serialize;

use crate::em::{fit, EmConfig, FitReport};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::kalman::TimeSeries;
use crate::model::{ModelOrder, MAX_ORDER};
use crate::smoother::{states_at, DenseState};

pub const EXIT_OK: i32 = 0;
pub const EXIT_PARSE: i32 = 1;
pub const EXIT_FIT: i32 = 2;
pub const EXIT_NOT_CONVERGED: i32 = 3;

/// Estimate a smooth signal and its derivatives from noisy samples.
///
/// Reads a CSV with header `t,y` (repeated `t` rows are simultaneous
/// measurements) and writes `t,x0..x{d-1},sd0..sd{d-1}`.
#[derive(Debug, Clone, Parser)]
#[command(name = "smoothderiv", version)]
pub struct CliConfig {
    /// Input CSV file.
    pub input: PathBuf,

    /// State dimension d (signal plus d−1 derivatives).
    #[arg(long = "order", default_value_t = 3,
          value_parser = clap::value_parser!(u8).range(1..=MAX_ORDER as i64))]
    pub order: u8,

    /// Maximum number of EM iterations.
    #[arg(long = "max-iter", default_value_t = 50)]
    pub max_iters: usize,

    /// Relative change of the smoothed signal at which EM stops.
    #[arg(long = "tol", default_value_t = 1e-3)]
    pub rel_tol: f64,

    /// Emit rows on a uniform grid with this spacing instead of at the data abscissas.
    #[arg(long, conflicts_with = "dense_times")]
    pub dense_step: Option<f64>,

    /// Emit rows at the times listed in this file (one per line, optional `t` header).
    #[arg(long)]
    pub dense_times: Option<PathBuf>,

    /// Write fitted parameters and the likelihood trace to this file.
    #[arg(long)]
    pub params_out: Option<PathBuf>,

    /// Hold the measurement variance at this value instead of estimating it.
    #[arg(long)]
    pub fixed_r: Option<f64>,

    /// Exit with status 3 when EM does not converge within --max-iter.
    #[arg(long)]
    pub strict: bool,

    /// Write the estimates here instead of standard output.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

impl CliConfig {
    fn em_config(&self) -> EmConfig {
        EmConfig {
            max_iters: self.max_iters,
            rel_tol: self.rel_tol,
            fixed_r: self.fixed_r,
            ..EmConfig::default()
        }
    }
}

fn parse_error(message: impl Into<String>, line: u64) -> Error {
    Error::Parse {
        message: message.into(),
        line,
    }
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        kind => parse_error(format!("malformed CSV: {kind:?}"), line),
    }
}

fn parse_number(field: &str, name: &str, line: u64) -> Result<f64> {
    let v: f64 = field
        .parse()
        .map_err(|_| parse_error(format!("non-numeric {name} value {field:?}"), line))?;
    if !v.is_finite() {
        return Err(parse_error(format!("non-finite {name} value {field:?}"), line));
    }
    Ok(v)
}

/// Parse `t,y` CSV text; rows sharing a `t` become one abscissa.
pub fn parse_series(text: &str) -> Result<TimeSeries> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = rdr.headers().map_err(csv_error)?.clone();
    if header.is_empty() || (header.len() == 1 && header[0].is_empty()) {
        return Err(parse_error("empty input", 1));
    }
    if header.len() != 2 || &header[0] != "t" || &header[1] != "y" {
        return Err(parse_error(
            format!("expected header `t,y`, found `{}`", header.iter().collect::<Vec<_>>().join(",")),
            1,
        ));
    }

    let mut abscissas: Vec<f64> = Vec::new();
    let mut groups: Vec<Vec<f64>> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_error)?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let t = parse_number(&rec[0], "t", line)?;
        let y = parse_number(&rec[1], "y", line)?;
        match abscissas.last() {
            Some(&last) if t < last => {
                return Err(parse_error("abscissas must be nondecreasing", line));
            }
            Some(&last) if t == last => groups.last_mut().expect("group exists").push(y),
            _ => {
                abscissas.push(t);
                groups.push(vec![y]);
            }
        }
    }
    if abscissas.is_empty() {
        return Err(parse_error("no data rows", 1));
    }
    TimeSeries::new(abscissas, groups)
}

pub fn parse_input(path: &Path) -> Result<TimeSeries> {
    let mut text = String::new();
    File::open(path)?.read_to_string(&mut text)?;
    parse_series(&text)
}

/// Query times, one per line, optionally headed by `t`.
pub fn parse_times(text: &str) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = (i + 1) as u64;
        let field = raw.trim();
        if field.is_empty() || (i == 0 && field == "t") {
            continue;
        }
        out.push(parse_number(field, "t", line)?);
    }
    if out.is_empty() {
        return Err(parse_error("no query times", 1));
    }
    out.sort_by(|a, b| a.total_cmp(b));
    out.dedup();
    Ok(out)
}

/// `t₁, t₁ + h, …` up to and including `t_T`; points within 1e-9·h of a
/// data abscissa are snapped onto it.
pub fn dense_grid(abscissas: &[f64], step: f64) -> Result<Vec<f64>> {
    if !(step.is_finite() && step > 0.0) {
        return Err(Error::invalid(format!("dense step must be positive, got {step}")));
    }
    let (first, last) = (abscissas[0], abscissas[abscissas.len() - 1]);
    let n = ((last - first) / step + 1e-9).floor() as usize;
    let snap = 1e-9 * step;
    let mut times = Vec::with_capacity(n + 2);
    for i in 0..=n {
        let t = (first + step * i as f64).min(last);
        let pos = abscissas.partition_point(|&s| s < t);
        let near = [pos.checked_sub(1), Some(pos)]
            .into_iter()
            .flatten()
            .filter_map(|p| abscissas.get(p).copied())
            .find(|&s| (s - t).abs() <= snap);
        times.push(near.unwrap_or(t));
    }
    if times.last() != Some(&last) {
        times.push(last);
    }
    times.dedup();
    Ok(times)
}

fn fmt_num(v: f64) -> String {
    format!("{v:.16e}")
}

/// Write the estimate table.
pub fn write_states(out: &mut impl Write, states: &[DenseState], d: usize) -> io::Result<()> {
    let mut header = vec!["t".to_string()];
    header.extend((0..d).map(|j| format!("x{j}")));
    header.extend((0..d).map(|j| format!("sd{j}")));
    writeln!(out, "{}", header.join(","))?;
    for s in states {
        let mut row = Vec::with_capacity(1 + 2 * d);
        row.push(fmt_num(s.t));
        row.extend(s.mean.iter().map(|&v| fmt_num(v)));
        row.extend((0..d).map(|j| fmt_num(s.cov[(j, j)].max(0.0).sqrt())));
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct ParamsDocument {
    q: f64,
    #[serde(rename = "R")]
    r: f64,
    m0: Vec<f64>,
    #[serde(rename = "P0")]
    p0: Vec<f64>,
    nll: f64,
    nll_trace: Vec<f64>,
    iterations: usize,
    converged: bool,
    q_init_at_boundary: bool,
}

/// Key–value (TOML) report of the fitted parameters.
pub fn params_report(rep: &FitReport) -> String {
    let p0 = rep.params.p0();
    let d = p0.nrows();
    let doc = ParamsDocument {
        q: rep.params.q,
        r: rep.params.r,
        m0: rep.params.m0.iter().copied().collect(),
        p0: (0..d).flat_map(|i| (0..d).map(move |j| (i, j))).map(|ij| p0[ij]).collect(),
        nll: rep.smoothed.nll,
        nll_trace: rep.nll_trace.clone(),
        iterations: rep.iterations,
        converged: rep.converged,
        q_init_at_boundary: rep.q_init_at_boundary,
    };
    toml::to_string(&doc).expect("params document serialises")
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Parse { .. } | Error::InvalidArgument(_) | Error::Io(_) => EXIT_PARSE,
        Error::Conditioning { .. } | Error::Fitting(_) | Error::Internal(_) => EXIT_FIT,
    }
}

/// Query times requested by the configuration, validated against the data range.
fn output_times(cfg: &CliConfig, ts: &TimeSeries) -> Result<Vec<f64>> {
    let ab = ts.abscissas();
    if let Some(h) = cfg.dense_step {
        return dense_grid(ab, h);
    }
    if let Some(path) = &cfg.dense_times {
        let mut text = String::new();
        File::open(path)?.read_to_string(&mut text)?;
        let times = parse_times(&text)?;
        let (first, last) = (ab[0], ab[ab.len() - 1]);
        if let Some(t) = times.iter().find(|&&t| t < first || t > last) {
            return Err(Error::invalid(format!(
                "query time {t} outside the data range [{first}, {last}]"
            )));
        }
        return Ok(times);
    }
    Ok(ab.to_vec())
}

/// Run the whole pipeline; returns the process exit code.
pub fn run(cfg: &CliConfig, stdout: &mut impl Write, stderr: &mut impl Write) -> i32 {
    match execute(cfg, stdout) {
        Ok(rep) => {
            if cfg.strict && !rep.converged {
                let _ = writeln!(
                    stderr,
                    "EM did not converge within {} iterations",
                    cfg.max_iters
                );
                EXIT_NOT_CONVERGED
            } else {
                EXIT_OK
            }
        }
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            exit_code(&e)
        }
    }
}

fn execute(cfg: &CliConfig, stdout: &mut impl Write) -> Result<FitReport> {
    let order = ModelOrder::new(cfg.order as usize)?;
    let em_cfg = cfg.em_config();
    em_cfg.validate()?;
    let ts = parse_input(&cfg.input)?;
    let times = output_times(cfg, &ts)?;

    let rep = fit(&ts, order, &em_cfg)?;
    let states = states_at(&rep.forward, &rep.smoothed, &times, Execution::default())?;

    match &cfg.output {
        Some(path) => {
            let mut w = BufWriter::new(File::create(path)?);
            write_states(&mut w, &states, order.get())?;
            w.flush()?;
        }
        None => write_states(stdout, &states, order.get())?,
    }
    if let Some(path) = &cfg.params_out {
        std::fs::write(path, params_report(&rep))?;
    }
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groups_simultaneous_rows() {
        let ts = parse_series("t,y\n0,1.0\n0,1.2\n1,2.0").unwrap();
        assert_eq!(ts.len(), 2);
        assert_eq!(ts.measurements()[0], vec![1.0, 1.2]);
        assert_eq!(ts.measurements()[1], vec![2.0]);
    }

    #[test]
    fn numerically_equal_times_group() {
        let ts = parse_series("t,y\n1.0,1\n1,2\n1e0,3\n").unwrap();
        assert_eq!(ts.len(), 1);
        assert_eq!(ts.total_measurements(), 3);
    }

    #[test]
    fn crlf_accepted() {
        let ts = parse_series("t,y\r\n0,1\r\n1,2\r\n").unwrap();
        assert_eq!(ts.len(), 2);
    }

    #[test]
    fn unsorted_reports_line() {
        let err = parse_series("t,y\n1,0\n0,1").unwrap_err();
        assert_eq!(err.to_string(), "abscissas must be nondecreasing (line 3)");
    }

    #[test]
    fn non_numeric_reports_line() {
        let err = parse_series("t,y\n0,1\n1,abc\n").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            e => panic!("{e}"),
        }
        assert!(parse_series("t,y\n0,nan\n").is_err());
    }

    #[test]
    fn empty_and_bad_header() {
        assert!(matches!(parse_series(""), Err(Error::Parse { .. })));
        assert!(matches!(parse_series("t,y\n"), Err(Error::Parse { .. })));
        assert!(matches!(parse_series("time,value\n0,1\n"), Err(Error::Parse { .. })));
        assert!(matches!(parse_series("t,y\n0,1,2\n"), Err(Error::Parse { .. })));
    }

    #[test]
    fn dense_grid_covers_interval() {
        let g = dense_grid(&[0.0, 1.0], 0.01).unwrap();
        assert_eq!(g.len(), 101);
        assert_eq!(g[0], 0.0);
        assert_eq!(*g.last().unwrap(), 1.0);
        let g = dense_grid(&[0.0, 0.25, 1.0], 0.3).unwrap();
        assert_eq!(g, vec![0.0, 0.3, 0.6, 0.8999999999999999, 1.0]);
        assert!(dense_grid(&[0.0, 1.0], 0.0).is_err());
    }

    #[test]
    fn times_file() {
        assert_eq!(parse_times("t\n0.5\n0.25\n\n").unwrap(), vec![0.25, 0.5]);
        assert!(parse_times("t\n").is_err());
        assert!(parse_times("t\nx\n").is_err());
    }

    #[test]
    fn numbers_round_trip() {
        for v in [0.1, 1.0 / 3.0, 12345.678901234567, 1e-300, -2.5e17] {
            assert_eq!(fmt_num(v).parse::<f64>().unwrap().to_bits(), v.to_bits());
        }
    }
}
