//! Convergence-speed and final-score comparison of two curve bundles.

use crate::curves::CurveBundle;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CompareOptions {
    pub threshold: f64,
    /// Step reported for series that never reach the threshold.
    pub budget: u64,
    /// Trailing grid points averaged into each seed's final score.
    pub final_window: usize,
}

/// Summary of one bundle, optionally relative to the other.
#[derive(Clone, Debug, PartialEq)]
pub struct ModeSummary {
    pub label: String,
    pub seeds: usize,
    pub threshold: f64,
    /// Median over seeds of the first step at or above the threshold, with
    /// censored seeds counted at the budget.
    pub median_steps: f64,
    /// The median rests on at least one censored seed.
    pub censored: bool,
    pub censored_seeds: usize,
    /// First step at which the across-seed mean curve reaches the threshold.
    pub mean_curve_steps: Option<u64>,
    pub final_mean: f64,
    pub final_std: f64,
    pub final_min: f64,
    pub final_max: f64,
    /// `final_max - final_min`
    pub final_spread: f64,
    /// Other bundle's median divided by this one's; above 1 means this one is faster.
    /// Undefined when either median is censored.
    pub speedup: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompareReport {
    pub rows: Vec<ModeSummary>,
}

fn first_crossing(steps: &[u64], values: &[f64], threshold: f64) -> Option<u64> {
    steps.iter().zip(values).find(|(_, v)| **v >= threshold).map(|(s, _)| *s)
}

/// Median of `(value, censored)` pairs; censored if a middle element is.
fn median(mut xs: Vec<(f64, bool)>) -> (f64, bool) {
    xs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        let (a, b) = (xs[n / 2 - 1], xs[n / 2]);
        ((a.0 + b.0) / 2.0, a.1 || b.1)
    }
}

fn summarize(label: &str, b: &CurveBundle, opts: &CompareOptions) -> ModeSummary {
    let per_seed: Vec<(f64, bool)> = b
        .series
        .iter()
        .map(|s| match first_crossing(&b.steps, s, opts.threshold) {
            Some(step) => (step as f64, false),
            None => (opts.budget as f64, true),
        })
        .collect();
    let censored_seeds = per_seed.iter().filter(|p| p.1).count();
    let (median_steps, censored) = if per_seed.is_empty() { (opts.budget as f64, true) } else { median(per_seed) };

    let w = opts.final_window.max(1);
    let finals: Vec<f64> = b
        .series
        .iter()
        .map(|s| {
            let tail = &s[s.len().saturating_sub(w)..];
            tail.iter().sum::<f64>() / tail.len().max(1) as f64
        })
        .collect();
    let n = finals.len() as f64;
    let final_mean = finals.iter().sum::<f64>() / n;
    let final_std = if finals.len() > 1 { (finals.iter().map(|f| (f - final_mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
    let final_min = finals.iter().cloned().fold(f64::INFINITY, f64::min);
    let final_max = finals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    ModeSummary {
        label: label.to_string(),
        seeds: b.series.len(),
        threshold: opts.threshold,
        median_steps,
        censored,
        censored_seeds,
        mean_curve_steps: first_crossing(&b.steps, &b.mean, opts.threshold),
        final_mean,
        final_std,
        final_min,
        final_max,
        final_spread: final_max - final_min,
        speedup: None,
    }
}

/// Summarizes both bundles and the speedup of each relative to the other.
pub fn compare_report(a: (&str, &CurveBundle), b: (&str, &CurveBundle), opts: &CompareOptions) -> CompareReport {
    let mut ra = summarize(a.0, a.1, opts);
    let mut rb = summarize(b.0, b.1, opts);
    if !ra.censored && !rb.censored && ra.median_steps > 0.0 && rb.median_steps > 0.0 {
        ra.speedup = Some(rb.median_steps / ra.median_steps);
        rb.speedup = Some(ra.median_steps / rb.median_steps);
    }
    CompareReport { rows: vec![ra, rb] }
}

impl CompareReport {
    /// True when no speedup could be computed because a median is censored.
    pub fn censored_only(&self) -> bool {
        self.rows.iter().any(|r| r.censored)
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "label",
            "seeds",
            "threshold",
            "median_steps_to_threshold",
            "censored",
            "censored_seeds",
            "mean_curve_steps_to_threshold",
            "final_mean",
            "final_std",
            "final_min",
            "final_max",
            "final_spread",
            "speedup",
        ])
        .expect("in-memory write");
        for r in &self.rows {
            let opt = |v: Option<String>| v.unwrap_or_else(|| "NA".into());
            w.write_record([
                r.label.clone(),
                r.seeds.to_string(),
                r.threshold.to_string(),
                r.median_steps.to_string(),
                r.censored.to_string(),
                r.censored_seeds.to_string(),
                opt(r.mean_curve_steps.map(|s| s.to_string())),
                r.final_mean.to_string(),
                r.final_std.to_string(),
                r.final_min.to_string(),
                r.final_max.to_string(),
                r.final_spread.to_string(),
                opt(r.speedup.map(|s| s.to_string())),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is UTF-8")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step_curve(at: u64, seeds: usize) -> CurveBundle {
        let pts = vec![(0, 0.0), (at, 1.0), (40_000, 1.0)];
        CurveBundle::from_series((0..seeds).map(|s| (format!("s{s}"), pts.clone())).collect()).unwrap()
    }

    fn opts(threshold: f64) -> CompareOptions {
        CompareOptions { threshold, budget: 50_000, final_window: 1 }
    }

    #[test]
    fn identical_bundles_give_identical_rows() {
        let b = step_curve(10_000, 3);
        let r = compare_report(("x", &b), ("x", &b), &opts(0.8));
        assert_eq!(r.rows[0], r.rows[1]);
        assert_eq!(r.rows[0].speedup, Some(1.0));
    }

    #[test]
    fn speedup_is_the_ratio_of_medians() {
        let (a, b) = (step_curve(10_000, 5), step_curve(20_000, 5));
        let r = compare_report(("a", &a), ("b", &b), &opts(0.8));
        assert_eq!(r.rows[0].median_steps, 10_000.0);
        assert_eq!(r.rows[0].speedup, Some(2.0));
        assert_eq!(r.rows[1].speedup, Some(0.5));
        assert!(!r.censored_only());
    }

    #[test]
    fn unreachable_threshold_is_censored() {
        let (a, b) = (step_curve(10_000, 2), step_curve(20_000, 2));
        let r = compare_report(("a", &a), ("b", &b), &opts(2.0));
        for row in &r.rows {
            assert!(row.censored);
            assert_eq!(row.median_steps, 50_000.0);
            assert_eq!(row.censored_seeds, 2);
            assert_eq!(row.mean_curve_steps, None);
            assert_eq!(row.speedup, None);
        }
        assert!(r.censored_only());
        assert!(r.to_csv().lines().nth(1).unwrap().ends_with(",NA"));
    }

    #[test]
    fn median_handles_censoring_and_even_counts() {
        assert_eq!(median(vec![(3.0, false), (1.0, false), (9.0, true)]), (3.0, false));
        assert_eq!(median(vec![(9.0, true), (1.0, false), (9.0, true), (2.0, false)]), (5.5, true));
    }

    #[test]
    fn final_scores_average_the_window() {
        let b = CurveBundle::from_series(vec![("a".into(), vec![(0, 0.0), (1, 1.0), (2, 3.0)]), ("b".into(), vec![(0, 1.0)])]).unwrap();
        let r = compare_report(("a", &b), ("b", &b), &CompareOptions { final_window: 2, ..opts(0.5) });
        assert_eq!(r.rows[0].final_max, 2.0);
        assert_eq!(r.rows[0].final_min, 1.0);
        assert_eq!(r.rows[0].final_spread, 1.0);
    }
}
