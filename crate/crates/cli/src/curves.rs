//! Multi-seed score curves aligned on a common step grid.

use std::path::{Path, PathBuf};

use crate::error::{CliError, Result};

/// Per-seed score series sampled on one step grid, with pointwise envelopes.
#[derive(Clone, Debug, PartialEq)]
pub struct CurveBundle {
    pub steps: Vec<u64>,
    pub labels: Vec<String>,
    /// `series[s][i]` is seed `s` at `steps[i]`.
    pub series: Vec<Vec<f64>>,
    pub min: Vec<f64>,
    pub mean: Vec<f64>,
    pub max: Vec<f64>,
}

impl CurveBundle {
    /// Aligns irregularly sampled series by carrying each one's last value
    /// forward. The grid is every sample step from the point where all
    /// series have started. Empty series are skipped with a warning.
    pub fn from_series(input: Vec<(String, Vec<(u64, f64)>)>) -> Result<Self, String> {
        let mut kept = Vec::new();
        for (label, mut points) in input {
            if points.is_empty() {
                log::warn!("skipping empty series `{label}`");
                continue;
            }
            points.sort_by_key(|p| p.0);
            kept.push((label, points));
        }
        if kept.is_empty() {
            return Err("no non-empty series to aggregate".into());
        }
        let start = kept.iter().map(|(_, p)| p[0].0).max().unwrap_or(0);
        let mut steps: Vec<u64> = kept.iter().flat_map(|(_, p)| p.iter().map(|x| x.0)).filter(|s| *s >= start).collect();
        steps.sort_unstable();
        steps.dedup();

        let mut labels = Vec::with_capacity(kept.len());
        let mut series = Vec::with_capacity(kept.len());
        for (label, points) in kept {
            let mut j = 0;
            let mut aligned = Vec::with_capacity(steps.len());
            for &s in &steps {
                while j + 1 < points.len() && points[j + 1].0 <= s {
                    j += 1;
                }
                aligned.push(points[j].1);
            }
            labels.push(label);
            series.push(aligned);
        }
        let n = series.len() as f64;
        let column = |i: usize| series.iter().map(move |s| s[i]);
        let min = (0..steps.len()).map(|i| column(i).fold(f64::INFINITY, f64::min)).collect();
        let max = (0..steps.len()).map(|i| column(i).fold(f64::NEG_INFINITY, f64::max)).collect();
        // clamped so rounding in the sum cannot push the mean outside the envelope
        let mean = (0..steps.len())
            .map(|i| {
                let m = column(i).sum::<f64>() / n;
                let (lo, hi) = (column(i).fold(f64::INFINITY, f64::min), column(i).fold(f64::NEG_INFINITY, f64::max));
                m.clamp(lo, hi)
            })
            .collect();
        Ok(Self { steps, labels, series, min, mean, max })
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["step".to_string(), "min".into(), "mean".into(), "max".into()];
        header.extend(self.labels.iter().cloned());
        w.write_record(&header).expect("in-memory write");
        for (i, step) in self.steps.iter().enumerate() {
            let mut row = vec![step.to_string(), self.min[i].to_string(), self.mean[i].to_string(), self.max[i].to_string()];
            row.extend(self.series.iter().map(|s| s[i].to_string()));
            w.write_record(&row).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is UTF-8")
    }

    pub fn from_csv(text: &str) -> Result<Self, String> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header = r.headers().map_err(|e| e.to_string())?.clone();
        if header.len() < 5 || header.iter().take(4).ne(["step", "min", "mean", "max"]) {
            return Err("not a curve bundle (expected step,min,mean,max followed by series)".into());
        }
        let labels: Vec<String> = header.iter().skip(4).map(str::to_string).collect();
        let mut b = Self { steps: Vec::new(), labels, series: vec![Vec::new(); header.len() - 4], min: Vec::new(), mean: Vec::new(), max: Vec::new() };
        for rec in r.records() {
            let rec = rec.map_err(|e| e.to_string())?;
            let num = |i: usize| rec[i].parse::<f64>().map_err(|e| format!("line {}: `{}`: {e}", rec.position().map_or(0, |p| p.line()), &rec[i]));
            b.steps.push(rec[0].parse().map_err(|e| format!("step `{}`: {e}", &rec[0]))?);
            b.min.push(num(1)?);
            b.mean.push(num(2)?);
            b.max.push(num(3)?);
            for (s, series) in b.series.iter_mut().enumerate() {
                series.push(num(4 + s)?);
            }
        }
        Ok(b)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_csv(&text).map_err(|m| CliError::data(path, m))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| CliError::io(path, e))
    }
}

/// Reads `(global_step, score)` pairs from an evaluation CSV (`mean_return`
/// column) or a training metrics CSV (`episode_return`, rows without a
/// finished episode skipped).
pub fn read_score_series(path: &Path) -> Result<Vec<(u64, f64)>> {
    let data = |m: String| CliError::data(path, m);
    let mut r = csv::Reader::from_path(path).map_err(|e| data(e.to_string()))?;
    let header = r.headers().map_err(|e| data(e.to_string()))?.clone();
    let col = |name: &str| header.iter().position(|h| h == name);
    let step = col("global_step").ok_or_else(|| data("missing global_step column".into()))?;
    let score = col("mean_return").or_else(|| col("episode_return")).ok_or_else(|| data("no mean_return or episode_return column".into()))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| data(e.to_string()))?;
        if rec[score].is_empty() {
            continue;
        }
        let s = rec[step].parse().map_err(|e| data(format!("global_step `{}`: {e}", &rec[step])))?;
        let v = rec[score].parse().map_err(|e| data(format!("score `{}`: {e}", &rec[score])))?;
        out.push((s, v));
    }
    Ok(out)
}

/// Aggregates score CSVs into one bundle labelled by file path.
pub fn aggregate_curves(paths: &[PathBuf]) -> Result<CurveBundle> {
    let mut input = Vec::with_capacity(paths.len());
    for p in paths {
        input.push((p.display().to_string(), read_score_series(p)?));
    }
    CurveBundle::from_series(input).map_err(CliError::config)
}
