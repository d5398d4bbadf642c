//! Per-epoch metrics and their CSV form.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const METRICS_HEADER: &str = "epoch;training_acc;training_loss;validation_acc;validation_loss";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub epoch: u64,
    pub training_acc: f64,
    pub training_loss: f64,
    pub validation_acc: f64,
    pub validation_loss: f64,
}

pub fn validate_rows(rows: &[MetricsRow]) -> Result<()> {
    for (i, r) in rows.iter().enumerate() {
        if !(0.0..=1.0).contains(&r.training_acc) || !(0.0..=1.0).contains(&r.validation_acc) {
            return Err(Error::Invalid(format!(
                "epoch {}: accuracy outside [0, 1]",
                r.epoch
            )));
        }
        if i > 0 && r.epoch <= rows[i - 1].epoch {
            return Err(Error::Invalid(format!(
                "epoch {} does not increase",
                r.epoch
            )));
        }
    }
    Ok(())
}

pub fn metrics_csv(rows: &[MetricsRow]) -> Result<String> {
    validate_rows(rows)?;
    let mut s = String::with_capacity(64 * (rows.len() + 1));
    s.push_str(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{};{:.6};{:.6};{:.6};{:.6}",
            r.epoch, r.training_acc, r.training_loss, r.validation_acc, r.validation_loss
        );
    }
    Ok(s)
}

pub fn emit_metrics_csv(rows: &[MetricsRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, metrics_csv(rows)?).map_err(|e| Error::io(path, e))
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Format(
            "metrics file lacks the expected header".into(),
        ));
    }
    let mut rows = Vec::new();
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split(';').collect();
        let bad = || Error::Format(format!("bad metrics line {line:?}"));
        if f.len() != 5 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        rows.push(MetricsRow {
            epoch: f[0].parse().map_err(|_| bad())?,
            training_acc: num(f[1])?,
            training_loss: num(f[2])?,
            validation_acc: num(f[3])?,
            validation_loss: num(f[4])?,
        });
    }
    validate_rows(&rows)?;
    Ok(rows)
}

pub fn read_metrics_csv(path: impl AsRef<Path>) -> Result<Vec<MetricsRow>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_metrics_csv(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows() -> Vec<MetricsRow> {
        (1..=3)
            .map(|e| MetricsRow {
                epoch: e,
                training_acc: 0.1 * e as f64 + 1e-9,
                training_loss: 2.0 / e as f64,
                validation_acc: 0.123_456_789,
                validation_loss: 1.75,
            })
            .collect()
    }

    #[test]
    fn three_rows_make_four_lines() {
        let text = metrics_csv(&rows()).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert_eq!(
            text.lines().next().unwrap(),
            "epoch;training_acc;training_loss;validation_acc;validation_loss"
        );
        assert!(text.contains("1;0.100000;2.000000;0.123457;1.750000\n"));
    }

    #[test]
    fn round_trip_to_six_decimals() {
        let back = parse_metrics_csv(&metrics_csv(&rows()).unwrap()).unwrap();
        for (a, b) in back.iter().zip(rows()) {
            assert_eq!(a.epoch, b.epoch);
            assert!((a.training_acc - b.training_acc).abs() <= 5e-7);
            assert!((a.validation_acc - b.validation_acc).abs() <= 5e-7);
            assert!((a.training_loss - b.training_loss).abs() <= 5e-7);
        }
    }

    #[test]
    fn rejects_invalid_rows() {
        let mut r = rows();
        r[2].epoch = 2;
        assert!(metrics_csv(&r).is_err());
        let mut r = rows();
        r[0].validation_acc = 1.5;
        assert!(metrics_csv(&r).is_err());
        assert!(parse_metrics_csv("epoch,acc\n").is_err());
        let dir = tempfile::tempdir().unwrap();
        assert!(emit_metrics_csv(&rows(), dir.path().join("missing/x.csv")).is_err());
    }
}
