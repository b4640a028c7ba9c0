//! CSV contracts and the plain-text weights format.
//!
//! Floats are written with 17 significant digits so they re-parse exactly.
//! Inner ratios are written in percent.

use std::io::{Read, Write};

use crate::budget::BudgetPlan;
use crate::densela::Matrix;
use crate::error::{Error, Result};
use crate::metrics::FrontierPoint;

pub const PLAN_COLUMNS: [&str; 6] = ["method", "p", "l", "r", "total", "utilization"];
pub const METRICS_COLUMNS: [&str; 11] = ["run_id", "method", "p", "l", "r", "trainable", "seed", "step", "split", "loss", "error"];
pub const FRONTIER_COLUMNS: [&str; 4] = ["label", "learning", "forgetting", "pareto"];

/// Metrics CSV `split` values.
pub const SPLITS: [&str; 5] = ["train", "target_zero_shot", "target", "source_before", "source_after"];

pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Inner ratio as a percentage, without floating-point noise (`0.4` → `40`).
pub fn fmt_percent(p: f64) -> String {
    let v = (p * 100.0 * 1e9).round() / 1e9;
    format!("{v}")
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_plan_csv<W: Write>(out: W, plans: &[BudgetPlan]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(PLAN_COLUMNS)?;
    for p in plans {
        w.write_record([
            p.config.method.as_str().to_string(),
            opt(p.config.p.map(fmt_percent)),
            opt(p.config.l),
            opt(p.config.r),
            p.total.to_string(),
            fmt_f64(p.utilization),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub run_id: String,
    pub method: String,
    /// Percent.
    pub p: Option<f64>,
    pub l: Option<usize>,
    pub r: Option<usize>,
    pub trainable: usize,
    pub seed: u64,
    pub step: usize,
    pub split: String,
    pub loss: f64,
    pub error: f64,
}

pub fn write_metrics_csv<W: Write>(out: W, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(METRICS_COLUMNS)?;
    for r in rows {
        w.write_record([
            r.run_id.clone(),
            r.method.clone(),
            opt(r.p.map(|p| fmt_percent(p / 100.0))),
            opt(r.l),
            opt(r.r),
            r.trainable.to_string(),
            r.seed.to_string(),
            r.step.to_string(),
            r.split.clone(),
            fmt_f64(r.loss),
            fmt_f64(r.error),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_frontier_csv<W: Write>(out: W, points: &[FrontierPoint]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(FRONTIER_COLUMNS)?;
    for p in points {
        w.write_record([p.label.clone(), fmt_f64(p.learning), fmt_f64(p.forgetting), p.pareto.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn schema_err(what: &str, line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Parse(format!("{what} CSV line {line}: {msg}"))
}

fn reader<R: Read>(input: R, what: &str, columns: &[&str]) -> Result<csv::Reader<R>> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != columns {
        return Err(schema_err(what, 1, format!("expected columns {columns:?}, got {header:?}")));
    }
    Ok(r)
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, what: &str, line: usize, name: &str) -> Result<T> {
    rec[i].parse().map_err(|_| schema_err(what, line, format!("bad {name} '{}'", &rec[i])))
}

fn opt_field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, what: &str, line: usize, name: &str) -> Result<Option<T>> {
    if rec[i].is_empty() {
        Ok(None)
    } else {
        field(rec, i, what, line, name).map(Some)
    }
}

/// One parsed plan CSV row; `p` in percent.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanRow {
    pub method: String,
    pub p: Option<f64>,
    pub l: Option<usize>,
    pub r: Option<usize>,
    pub total: usize,
    pub utilization: f64,
}

/// Parses and validates a plan CSV.
pub fn read_plan_csv<R: Read>(input: R) -> Result<Vec<PlanRow>> {
    let mut r = reader(input, "plan", &PLAN_COLUMNS)?;
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        rows.push(PlanRow {
            method: rec[0].to_string(),
            p: opt_field(&rec, 1, "plan", line, "p")?,
            l: opt_field(&rec, 2, "plan", line, "l")?,
            r: opt_field(&rec, 3, "plan", line, "r")?,
            total: field(&rec, 4, "plan", line, "total")?,
            utilization: field(&rec, 5, "plan", line, "utilization")?,
        });
    }
    Ok(rows)
}

/// Parses and validates a metrics CSV.
pub fn read_metrics_csv<R: Read>(input: R) -> Result<Vec<MetricsRow>> {
    let what = "metrics";
    let mut r = reader(input, what, &METRICS_COLUMNS)?;
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let row = MetricsRow {
            run_id: rec[0].to_string(),
            method: rec[1].to_string(),
            p: opt_field(&rec, 2, what, line, "p")?,
            l: opt_field(&rec, 3, what, line, "l")?,
            r: opt_field(&rec, 4, what, line, "r")?,
            trainable: field(&rec, 5, what, line, "trainable")?,
            seed: field(&rec, 6, what, line, "seed")?,
            step: field(&rec, 7, what, line, "step")?,
            split: rec[8].to_string(),
            loss: field(&rec, 9, what, line, "loss")?,
            error: field(&rec, 10, what, line, "error")?,
        };
        if !SPLITS.contains(&row.split.as_str()) {
            return Err(schema_err(what, line, format!("unknown split '{}'", row.split)));
        }
        if !(0.0..=1.0).contains(&row.error) {
            return Err(schema_err(what, line, format!("error {} outside [0, 1]", row.error)));
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Parses and validates a frontier CSV.
pub fn read_frontier_csv<R: Read>(input: R) -> Result<Vec<FrontierPoint>> {
    let what = "frontier";
    let mut r = reader(input, what, &FRONTIER_COLUMNS)?;
    let mut pts = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        pts.push(FrontierPoint {
            label: rec[0].to_string(),
            learning: field(&rec, 1, what, line, "learning")?,
            forgetting: field(&rec, 2, what, line, "forgetting")?,
            pareto: field(&rec, 3, what, line, "pareto")?,
        });
    }
    Ok(pts)
}

/// Parses the plain-text weights format:
///
/// ```text
/// # comment
/// layer NAME ROWS COLS
/// <ROWS lines of COLS numbers>
/// ```
pub fn parse_weights_text(text: &str) -> Result<Vec<(String, Matrix)>> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty());
    let mut layers = Vec::new();
    while let Some((no, line)) = lines.next() {
        let f: Vec<&str> = line.split_whitespace().collect();
        let bad = |msg: &str| Error::Parse(format!("weights line {no}: {msg}"));
        if f.len() != 4 || f[0] != "layer" {
            return Err(bad("expected 'layer NAME ROWS COLS'"));
        }
        let rows: usize = f[2].parse().map_err(|_| bad("bad row count"))?;
        let cols: usize = f[3].parse().map_err(|_| bad("bad column count"))?;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let (rno, row) = lines.next().ok_or_else(|| bad("layer ends early"))?;
            let vals: Vec<f64> = row
                .split_whitespace()
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Parse(format!("weights line {rno}: bad number")))?;
            if vals.len() != cols {
                return Err(Error::Parse(format!("weights line {rno}: expected {cols} values, got {}", vals.len())));
            }
            data.extend(vals);
        }
        if layers.iter().any(|(n, _): &(String, Matrix)| n == f[1]) {
            return Err(bad("duplicate layer name"));
        }
        layers.push((f[1].to_string(), Matrix::new(rows, cols, data)?));
    }
    if layers.is_empty() {
        return Err(Error::Parse("weights file declares no layers".into()));
    }
    Ok(layers)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_round_trip_through_text() {
        for v in [0.1 + 0.2, 1.0 / 3.0, 1e-300, -2.5e17, 0.0] {
            assert_eq!(fmt_f64(v).parse::<f64>().unwrap().to_bits(), v.to_bits());
        }
        assert_eq!(fmt_percent(0.4), "40");
        assert_eq!(fmt_percent(0.57), "57");
        assert_eq!(fmt_percent(0.125), "12.5");
    }

    #[test]
    fn metrics_round_trip() {
        let row = MetricsRow {
            run_id: "r".into(),
            method: "ssvd-o".into(),
            p: Some(40.0),
            l: Some(8),
            r: None,
            trainable: 10,
            seed: 3,
            step: 5,
            split: "train".into(),
            loss: 0.1 + 0.2,
            error: 0.25,
        };
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, std::slice::from_ref(&row)).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("run_id,method,p,l,r,trainable,seed,step,split,loss,error\n"));
        assert!(text.contains("ssvd-o,40,8,,10"));
        assert_eq!(read_metrics_csv(&buf[..]).unwrap(), vec![row]);
    }

    #[test]
    fn schema_violations_are_rejected() {
        assert!(read_metrics_csv(&b"run_id,method\n"[..]).is_err());
        let bad_split = "run_id,method,p,l,r,trainable,seed,step,split,loss,error\nx,lora,,,4,1,0,0,dev,0.1,0.1\n";
        assert!(read_metrics_csv(bad_split.as_bytes()).is_err());
        let bad_err = "run_id,method,p,l,r,trainable,seed,step,split,loss,error\nx,lora,,,4,1,0,0,train,0.1,1.5\n";
        assert!(read_metrics_csv(bad_err.as_bytes()).is_err());
    }

    #[test]
    fn weights_text() {
        let text = "# two layers\nlayer a 2 2\n1 0\n0 1\nlayer b 1 3\n1 2 3 # trailing\n";
        let layers = parse_weights_text(text).unwrap();
        assert_eq!(layers.len(), 2);
        assert_eq!(layers[1].1.shape(), (1, 3));
        assert!(parse_weights_text("layer a 2 2\n1 0\n").is_err());
        assert!(parse_weights_text("layer a 1 2\n1 x\n").is_err());
        assert!(parse_weights_text("").is_err());
    }
}
