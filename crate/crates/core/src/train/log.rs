//! Per-iteration training log.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::schedule::LossWeights;

pub const LOG_HEADER: &str =
    "t,view,alpha,lambda_enh,lambda_gs,lambda_therm,loss_enh,loss_gs,loss_therm,loss_total,lr,num_gaussians,gt_violation";

/// Largest amount by which a target pixel left the convex-blend bound
/// allowed before a row is rejected.
pub const GT_BOUND_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub t: usize,
    pub view: usize,
    pub alpha: f64,
    pub weights: LossWeights,
    pub loss_enh: f64,
    pub loss_gs: f64,
    pub loss_therm: f64,
    pub loss_total: f64,
    pub lr: f64,
    pub num_gaussians: usize,
    /// `max(0, min(GT_prev, I_enh) − GT, GT − max(GT_prev, I_enh))` over the
    /// updated target.
    pub gt_violation: f64,
}

impl LogRow {
    /// One CSV line; floats use the shortest representation that parses
    /// back to the same bits.
    pub fn to_csv(&self) -> String {
        let w = &self.weights;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.t,
            self.view,
            self.alpha,
            w.lambda_enh,
            w.lambda_gs,
            w.lambda_therm,
            self.loss_enh,
            self.loss_gs,
            self.loss_therm,
            self.loss_total,
            self.lr,
            self.num_gaussians,
            self.gt_violation
        )
    }

    pub fn parse_csv(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 13 {
            return Err(Error::InvalidConfig(format!("log row has {} fields, expected 13", f.len())));
        }
        let num = |i: usize| -> Result<f64> {
            f[i].parse()
                .map_err(|_| Error::InvalidConfig(format!("log field {i} `{}` is not a number", f[i])))
        };
        let int = |i: usize| -> Result<usize> {
            f[i].parse()
                .map_err(|_| Error::InvalidConfig(format!("log field {i} `{}` is not an integer", f[i])))
        };
        Ok(Self {
            t: int(0)?,
            view: int(1)?,
            alpha: num(2)?,
            weights: LossWeights {
                lambda_enh: num(3)?,
                lambda_gs: num(4)?,
                lambda_therm: num(5)?,
            },
            loss_enh: num(6)?,
            loss_gs: num(7)?,
            loss_therm: num(8)?,
            loss_total: num(9)?,
            lr: num(10)?,
            num_gaussians: int(11)?,
            gt_violation: num(12)?,
        })
    }
}

pub fn write_log(rows: &[LogRow], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "{LOG_HEADER}")?;
    for r in rows {
        writeln!(out, "{}", r.to_csv())?;
    }
    Ok(())
}

pub fn read_log(path: &Path) -> Result<Vec<LogRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_log(&text)
}

pub fn parse_log(text: &str) -> Result<Vec<LogRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == LOG_HEADER => {}
        _ => return Err(Error::InvalidConfig("training log has an unexpected header".into())),
    }
    lines.filter(|l| !l.trim().is_empty()).map(LogRow::parse_csv).collect()
}

/// Checks the invariants every log must satisfy: valid normalized weights,
/// `α ∈ [0, 1]` nondecreasing in `t`, targets within the convex-blend bound
/// and finite losses.
pub fn validate_log(rows: &[LogRow]) -> Result<()> {
    let mut prev: Option<&LogRow> = None;
    for r in rows {
        let fail = |m: String| Err(Error::InvalidConfig(format!("log row t={}: {m}", r.t)));
        if let Err(e) = r.weights.validate() {
            return fail(e.to_string());
        }
        if !(0.0..=1.0).contains(&r.alpha) {
            return fail(format!("alpha {} outside [0, 1]", r.alpha));
        }
        if let Some(p) = prev {
            if r.t <= p.t {
                return fail("iterations not increasing".into());
            }
            if r.alpha < p.alpha {
                return fail(format!("alpha decreased from {} to {}", p.alpha, r.alpha));
            }
        }
        if !(r.gt_violation <= GT_BOUND_TOLERANCE) {
            return fail(format!("target left the blend bound by {}", r.gt_violation));
        }
        for v in [r.loss_enh, r.loss_gs, r.loss_therm, r.loss_total, r.lr] {
            if !v.is_finite() {
                return fail("non-finite value".into());
            }
        }
        prev = Some(r);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(t: usize, alpha: f64) -> LogRow {
        LogRow {
            t,
            view: 3,
            alpha,
            weights: LossWeights::from_raw([0.1, 0.9, 0.2]).unwrap(),
            loss_enh: 0.1 + 1e-17 * t as f64,
            loss_gs: 1.0 / 3.0,
            loss_therm: 0.2,
            loss_total: 0.3,
            lr: 1e-3,
            num_gaussians: 10,
            gt_violation: 0.0,
        }
    }

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let rows: Vec<LogRow> = (0..5).map(|t| row(t, t as f64 / 7.0)).collect();
        let mut buf = Vec::new();
        write_log(&rows, &mut buf).unwrap();
        let back = parse_log(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(back, rows);
        validate_log(&back).unwrap();
    }

    #[test]
    fn violations_detected() {
        assert!(validate_log(&[row(0, 0.5), row(1, 0.4)]).is_err());
        assert!(validate_log(&[row(0, 1.5)]).is_err());
        let mut r = row(0, 0.1);
        r.gt_violation = 1e-6;
        assert!(validate_log(&[r]).is_err());
        let mut r = row(0, 0.1);
        r.weights.lambda_gs = 0.05;
        assert!(validate_log(&[r]).is_err());
        assert!(parse_log("bad header\n").is_err());
    }
}
