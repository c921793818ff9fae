//! File products: CSV plot data for curves and series, JSON reports.
//!
//! Numbers are written with the shortest round-trip representation, so a
//! written file parses back to the exact same values and identical inputs
//! produce byte-identical products.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::{CoreError, Result};
use crate::measure::{ImpactCurve, LagSeries, VolumeDistribution};
use crate::propagator::{Kernel, KappaChiStudy};
use crate::fit::ConstraintResiduals;

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    let file = std::fs::File::create(path).map_err(|e| CoreError::io(path.display().to_string(), e))?;
    Ok(std::io::BufWriter::new(file))
}

fn io_err(path: &Path, e: std::io::Error) -> CoreError {
    CoreError::io(path.display().to_string(), e)
}

/// Curve/series CSV header shared by all plot-data products.
pub const CURVE_HEADER: &str = "bin_or_lag,value,count,stderr";

pub fn write_impact_curve_csv(path: &Path, curve: &ImpactCurve) -> Result<()> {
    let mut w = create(path)?;
    (|| -> std::io::Result<()> {
        writeln!(w, "{CURVE_HEADER}")?;
        for i in 0..curve.len() {
            writeln!(
                w,
                "{},{},{},{}",
                curve.bin_mean_volume[i], curve.delta[i], curve.count[i], curve.stderr[i]
            )?;
        }
        Ok(())
    })()
    .map_err(|e| io_err(path, e))
}

pub fn write_lag_series_csv(path: &Path, series: &LagSeries) -> Result<()> {
    let mut w = create(path)?;
    (|| -> std::io::Result<()> {
        writeln!(w, "{CURVE_HEADER}")?;
        for l in 0..series.values.len() {
            writeln!(
                w,
                "{},{},{},{}",
                l, series.values[l], series.counts[l], series.stderr[l]
            )?;
        }
        Ok(())
    })()
    .map_err(|e| io_err(path, e))
}

/// Read a curve/series CSV back as (abscissa, value, count, stderr) rows.
pub fn read_curve_csv(path: &Path) -> Result<Vec<(f64, f64, u64, f64)>> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == CURVE_HEADER => {}
        other => {
            return Err(CoreError::Schema(format!(
                "expected curve header '{CURVE_HEADER}', got {other:?}"
            )))
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 4 {
            return Err(CoreError::Schema(format!(
                "curve row {} has {} fields, expected 4",
                i + 2,
                parts.len()
            )));
        }
        let parse_f = |s: &str| -> Result<f64> {
            s.trim()
                .parse()
                .map_err(|_| CoreError::Schema(format!("bad number '{s}' in curve row {}", i + 2)))
        };
        let count: u64 = parts[2]
            .trim()
            .parse()
            .map_err(|_| CoreError::Schema(format!("bad count in curve row {}", i + 2)))?;
        rows.push((parse_f(parts[0])?, parse_f(parts[1])?, count, parse_f(parts[3])?));
    }
    Ok(rows)
}

pub fn write_volume_distribution_csv(path: &Path, dist: &VolumeDistribution) -> Result<()> {
    let mut w = create(path)?;
    (|| -> std::io::Result<()> {
        writeln!(w, "{CURVE_HEADER}")?;
        for i in 0..dist.density.len() {
            let center = (dist.bin_lo[i] * dist.bin_hi[i]).sqrt();
            writeln!(w, "{},{},{},0", center, dist.density[i], dist.count[i])?;
        }
        Ok(())
    })()
    .map_err(|e| io_err(path, e))
}

pub fn write_kernel_csv(path: &Path, kernel: &Kernel) -> Result<()> {
    let mut w = create(path)?;
    (|| -> std::io::Result<()> {
        writeln!(w, "l,G0")?;
        for (i, v) in kernel.values().iter().enumerate() {
            writeln!(w, "{},{}", i + 1, v)?;
        }
        Ok(())
    })()
    .map_err(|e| io_err(path, e))
}

/// Read a kernel CSV written by [`write_kernel_csv`].
pub fn read_kernel_csv(path: &Path) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == "l,G0" => {}
        other => {
            return Err(CoreError::Schema(format!(
                "expected kernel header 'l,G0', got {other:?}"
            )))
        }
    }
    let mut values = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 2 {
            return Err(CoreError::Schema(format!("kernel row {} malformed", i + 2)));
        }
        let l: usize = parts[0]
            .trim()
            .parse()
            .map_err(|_| CoreError::Schema(format!("bad lag in kernel row {}", i + 2)))?;
        if l != i + 1 {
            return Err(CoreError::Schema(format!(
                "kernel lags must be 1..n in order, got {l} at row {}",
                i + 2
            )));
        }
        values.push(
            parts[1]
                .trim()
                .parse()
                .map_err(|_| CoreError::Schema(format!("bad value in kernel row {}", i + 2)))?,
        );
    }
    Ok(values)
}

pub fn write_kappa_chi_csv(path: &Path, study: &KappaChiStudy) -> Result<()> {
    let mut w = create(path)?;
    (|| -> std::io::Result<()> {
        writeln!(w, "firm,chi,kappa_measured,kappa_reconstructed,r0")?;
        for row in &study.rows {
            writeln!(
                w,
                "{},{},{},{},{}",
                row.firm, row.chi, row.kappa_measured, row.kappa_reconstructed, row.r0
            )?;
        }
        Ok(())
    })()
    .map_err(|e| io_err(path, e))
}

pub fn write_constraint_csv(path: &Path, residuals: &ConstraintResiduals) -> Result<()> {
    let mut w = create(path)?;
    (|| -> std::io::Result<()> {
        writeln!(w, "firm,residual")?;
        for (firm, r) in &residuals.per_firm {
            writeln!(w, "{firm},{r}")?;
        }
        Ok(())
    })()
    .map_err(|e| io_err(path, e))
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)
        .map_err(|e| CoreError::Config(format!("json serialize for {}: {e}", path.display())))?;
    w.write_all(b"\n").map_err(|e| io_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::SeriesKind;

    #[test]
    fn curve_csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("series.csv");
        let series = LagSeries {
            kind: SeriesKind::Correlation,
            values: vec![1.0, 0.123456789012345, 3.0e-17],
            counts: vec![10, 9, 8],
            stderr: vec![0.0, 0.25, 0.5],
        };
        write_lag_series_csv(&path, &series).unwrap();
        let rows = read_curve_csv(&path).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[1].0, 1.0);
        assert_eq!(rows[1].1, 0.123456789012345);
        assert_eq!(rows[2].1, 3.0e-17);
        assert_eq!(rows[2].2, 8);
    }
}
