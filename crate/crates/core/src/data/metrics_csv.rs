//! Metrics CSV persistence.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::train::{MetricsRecord, MetricsSink};

pub const METRICS_HEADER: &str = "epoch,train_loss,train_top1,eval_loss,eval_top1,lr,wall_time_s";

/// Formats like C's `%.6g`: six significant digits, trailing zeros
/// trimmed, scientific notation for very small or large magnitudes.
pub fn format_significant(v: f64) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if v == 0.0 {
        return "0".into();
    }
    let sci = format!("{v:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..6).contains(&exp) {
        let mantissa = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{mantissa}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (5 - exp) as usize;
        trim_zeros(&format!("{v:.decimals$}")).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn row(r: &MetricsRecord) -> String {
    format!(
        "{},{},{},{},{},{},{}\n",
        r.epoch,
        format_significant(r.train_loss),
        format_significant(r.train_top1_error),
        format_significant(r.eval_loss),
        format_significant(r.eval_top1_error),
        format_significant(r.lr),
        format_significant(r.wall_time_seconds),
    )
}

pub fn write_metrics_csv(records: &[MetricsRecord], path: &Path) -> Result<()> {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&row(r));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == METRICS_HEADER => {}
        other => {
            return Err(Error::Parse(format!(
                "{}: expected header `{METRICS_HEADER}`, found {other:?}",
                path.display()
            )))
        }
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let bad = |what: &str| Error::Parse(format!("{}:{}: {what}", path.display(), i + 2));
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 7 {
                return Err(bad(&format!("expected 7 fields, found {}", fields.len())));
            }
            let num = |j: usize| fields[j].parse::<f64>().map_err(|_| bad(&format!("bad number `{}`", fields[j])));
            Ok(MetricsRecord {
                epoch: fields[0].parse().map_err(|_| bad("bad epoch"))?,
                train_loss: num(1)?,
                train_top1_error: num(2)?,
                eval_loss: num(3)?,
                eval_top1_error: num(4)?,
                lr: num(5)?,
                wall_time_seconds: num(6)?,
            })
        })
        .collect()
}

/// Sink that appends each record to a CSV file as it arrives.
pub struct CsvMetricsSink {
    out: BufWriter<File>,
}

impl CsvMetricsSink {
    /// Creates (truncating) the file and writes the header.
    pub fn create(path: &Path) -> Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "{METRICS_HEADER}")?;
        out.flush()?;
        Ok(Self { out })
    }
}

impl MetricsSink for CsvMetricsSink {
    fn emit(&mut self, record: &MetricsRecord) -> Result<()> {
        self.out.write_all(row(record).as_bytes())?;
        self.out.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn record(epoch: usize, x: f64) -> MetricsRecord {
        MetricsRecord {
            epoch,
            train_loss: x,
            train_top1_error: 12.5,
            eval_loss: x * 1.7,
            eval_top1_error: 33.3333,
            lr: 0.001,
            wall_time_seconds: 0.0,
        }
    }

    #[test]
    fn significant_digit_formatting() {
        assert_eq!(format_significant(0.1), "0.1");
        assert_eq!(format_significant(1.0 / 3.0), "0.333333");
        assert_eq!(format_significant(123456.7), "123457");
        assert_eq!(format_significant(1234567.0), "1.23457e+06");
        assert_eq!(format_significant(0.0001), "0.0001");
        assert_eq!(format_significant(0.00001234), "1.234e-05");
        assert_eq!(format_significant(-2.5), "-2.5");
        assert_eq!(format_significant(100.0), "100");
        assert_eq!(format_significant(f64::NAN), "nan");
        assert_eq!(format_significant(999999.5), "1e+06");
    }

    #[test]
    fn empty_list_writes_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        write_metrics_csv(&[], &path).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), format!("{METRICS_HEADER}\n"));
        assert!(read_metrics_csv(&path).unwrap().is_empty());
    }

    #[test]
    fn two_records_three_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        write_metrics_csv(&[record(0, 1.5), record(1, 0.75)], &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(!text.contains('\r'));
    }

    #[test]
    fn sink_matches_batch_writer() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
        let recs = [record(0, 2.0), record(1, 1.25)];
        write_metrics_csv(&recs, &a).unwrap();
        let mut sink = CsvMetricsSink::create(&b).unwrap();
        for r in &recs {
            sink.emit(r).unwrap();
        }
        drop(sink);
        assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
    }

    proptest! {
        #[test]
        fn round_trip_at_printed_precision(x in -1e9f64..1e9, e in 0usize..1000) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("m.csv");
            write_metrics_csv(&[record(e, x)], &path).unwrap();
            let once = read_metrics_csv(&path).unwrap();
            write_metrics_csv(&once, &path).unwrap();
            let twice = read_metrics_csv(&path).unwrap();
            prop_assert_eq!(&once, &twice);
            let rel = (once[0].train_loss - x).abs() / x.abs().max(1e-300);
            prop_assert!(rel <= 5e-6);
        }
    }
}
