//! CSV and JSON result files.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use crate::error::{Result, SyncError};

use super::experiment::ExperimentResult;

pub const CSV_HEADER: [&str; 11] =
    ["trial", "seed", "method", "n", "d", "sigma", "rho", "g_prime", "h", "status", "runtime_ms"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputFormat {
    Csv,
    Json,
}

impl FromStr for OutputFormat {
    type Err = SyncError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            _ => Err(SyncError::InvalidInput(format!("unknown format {s:?}"))),
        }
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One row per trial, then one row per aggregate statistic. Aggregate rows
/// carry the statistic name in `trial` and `aggregate` in `status`.
pub fn write_csv<W: Write>(result: &ExperimentResult, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for t in &result.trials {
        w.write_record([
            t.trial.to_string(),
            t.seed.to_string(),
            t.method.to_string(),
            t.n.to_string(),
            t.d.to_string(),
            t.sigma.to_string(),
            t.rho.to_string(),
            opt(t.g_prime),
            opt(t.h),
            t.status.label().to_string(),
            t.runtime_ms.to_string(),
        ])?;
    }
    if !result.trials.is_empty() {
        let c = &result.config;
        let gp = result.aggregate("g_prime");
        let h = result.aggregate("h");
        type Pick = fn(&super::experiment::Aggregate) -> Option<f64>;
        let stats: [(&str, Pick); 3] = [("mean", |a| a.mean), ("median", |a| a.median), ("std", |a| a.std)];
        for (name, pick) in stats {
            w.write_record([
                name.to_string(),
                c.spec.seed.to_string(),
                c.method.to_string(),
                c.spec.n.to_string(),
                c.spec.d.to_string(),
                c.spec.sigma.to_string(),
                c.spec.rho.to_string(),
                opt(gp.and_then(pick)),
                opt(h.and_then(pick)),
                "aggregate".to_string(),
                result.runtime_ms.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<W: Write>(result: &ExperimentResult, mut out: W) -> Result<()> {
    serde_json::to_writer_pretty(&mut out, result)?;
    out.write_all(b"\n")?;
    Ok(())
}

pub fn read_json<R: Read>(input: R) -> Result<ExperimentResult> {
    Ok(serde_json::from_reader(input)?)
}

/// Writes `result` to `path` in the requested format.
pub fn emit(result: &ExperimentResult, format: OutputFormat, path: &Path) -> Result<()> {
    let mut file = BufWriter::new(File::create(path)?);
    match format {
        OutputFormat::Csv => write_csv(result, &mut file)?,
        OutputFormat::Json => write_json(result, &mut file)?,
    }
    file.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::experiment::{run_experiment, ExperimentConfig};
    use crate::harness::instance::{InstanceSpec, TransformClass};
    use crate::sync_direct::Method;

    fn small(trials: usize) -> ExperimentResult {
        let spec = InstanceSpec::new(8, 3, 0.2, 0.5, TransformClass::Orthogonal, 3);
        run_experiment(&ExperimentConfig::new(spec, Method::H, trials)).unwrap()
    }

    #[test]
    fn json_round_trip_is_byte_identical() {
        let r = small(3);
        let mut a = Vec::new();
        write_json(&r, &mut a).unwrap();
        let back = read_json(a.as_slice()).unwrap();
        assert_eq!(back, r);
        let mut b = Vec::new();
        write_json(&back, &mut b).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn csv_layout() {
        let r = small(2);
        let mut buf = Vec::new();
        write_csv(&r, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "trial,seed,method,n,d,sigma,rho,g_prime,h,status,runtime_ms");
        assert_eq!(lines.len(), 1 + 2 + 3);
        assert!(lines[1].starts_with("0,"));
        assert!(lines[3].starts_with("mean,"));
    }

    #[test]
    fn empty_result_is_header_only() {
        let r = small(0);
        let mut buf = Vec::new();
        write_csv(&r, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), format!("{}\n", CSV_HEADER.join(",")));
    }
}
