//! Metrics CSV, seed aggregation and paired comparisons.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::protocol::Metrics;

pub const CONFIDENCE: f64 = 0.95;

/// One line of the metrics file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub variant: String,
    #[serde(rename = "K")]
    pub k: usize,
    pub seed: u64,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

pub fn metric_rows(metrics: &[Metrics]) -> Vec<MetricRow> {
    metrics
        .iter()
        .flat_map(|m| {
            m.rows().into_iter().map(move |(split, metric, value)| MetricRow {
                variant: m.variant.name().into(),
                k: m.k,
                seed: m.seed,
                split: split.into(),
                metric: metric.into(),
                value,
            })
        })
        .collect()
}

pub fn write_metrics_csv(rows: &[MetricRow], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv(input: impl Read) -> Result<Vec<MetricRow>> {
    csv::Reader::from_reader(input)
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

/// Mean over seeds with a Student-t confidence half-width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub variant: String,
    pub k: usize,
    pub split: String,
    pub metric: String,
    pub n: usize,
    pub mean: f64,
    /// `None` for a single seed.
    pub half_width: Option<f64>,
}

pub fn t_half_width(values: &[f64], confidence: f64) -> Option<f64> {
    let n = values.len();
    if n < 2 {
        return None;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64).ok()?;
    Some(t.inverse_cdf(0.5 + confidence / 2.0) * (var / n as f64).sqrt())
}

/// Groups rows by `(variant, K, split, metric)` in sorted order.
pub fn summarize(rows: &[MetricRow]) -> Vec<Summary> {
    let mut groups: BTreeMap<(String, usize, String, String), Vec<f64>> = BTreeMap::new();
    for r in rows {
        groups
            .entry((r.variant.clone(), r.k, r.split.clone(), r.metric.clone()))
            .or_default()
            .push(r.value);
    }
    groups
        .into_iter()
        .map(|((variant, k, split, metric), v)| Summary {
            variant,
            k,
            split,
            metric,
            n: v.len(),
            mean: v.iter().sum::<f64>() / v.len() as f64,
            half_width: t_half_width(&v, CONFIDENCE),
        })
        .collect()
}

const COLUMNS: [(&str, &str); 6] = [
    ("box_ap", "new"),
    ("box_ap", "base"),
    ("box_ap", "all"),
    ("mask_ap", "new"),
    ("mask_ap", "base"),
    ("mask_ap", "all"),
];

/// AP in percent, `mean ± half-width`, one line per `(variant, K)`.
pub fn markdown_table(summaries: &[Summary]) -> String {
    let mut cells: BTreeMap<(usize, String), BTreeMap<(&str, &str), &Summary>> = BTreeMap::new();
    for s in summaries {
        if let Some(&col) = COLUMNS.iter().find(|(m, sp)| *m == s.metric && *sp == s.split) {
            cells.entry((s.k, s.variant.clone())).or_default().insert(col, s);
        }
    }
    let mut out = String::from(
        "| variant | K | box AP new | box AP base | box AP all | mask AP new | mask AP base | mask AP all |\n\
         |---|---|---|---|---|---|---|---|\n",
    );
    for ((k, variant), row) in &cells {
        out.push_str(&format!("| {variant} | {k} |"));
        for col in COLUMNS {
            let text = match row.get(&col) {
                Some(s) => match s.half_width {
                    Some(h) => format!(" {:.1} ± {:.1} |", 100.0 * s.mean, 100.0 * h),
                    None => format!(" {:.1} |", 100.0 * s.mean),
                },
                None => " - |".into(),
            };
            out.push_str(&text);
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedTest {
    pub n: usize,
    pub mean_diff: f64,
    pub t: f64,
    /// One-sided p-value for `mean(a − b) > 0`.
    pub p: f64,
}

pub fn paired_t_greater(a: &[f64], b: &[f64]) -> Result<PairedTest> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::InvalidArgument("paired test needs two equal samples of size >= 2".into()));
    }
    let n = a.len();
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let sd = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    let (t, p) = if sd == 0.0 {
        let t = if mean > 0.0 { f64::INFINITY } else if mean < 0.0 { f64::NEG_INFINITY } else { 0.0 };
        (t, if mean > 0.0 { 0.0 } else if mean < 0.0 { 1.0 } else { 0.5 })
    } else {
        let t = mean / (sd / (n as f64).sqrt());
        let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        (t, 1.0 - dist.cdf(t))
    };
    Ok(PairedTest {
        n,
        mean_diff: mean,
        t,
        p,
    })
}

/// Values of one `(variant, K, split, metric)` series ordered by seed.
pub fn series(rows: &[MetricRow], variant: &str, k: usize, split: &str, metric: &str) -> Vec<(u64, f64)> {
    let mut v: Vec<(u64, f64)> = rows
        .iter()
        .filter(|r| r.variant == variant && r.k == k && r.split == split && r.metric == metric)
        .map(|r| (r.seed, r.value))
        .collect();
    v.sort_by_key(|p| p.0);
    v
}

/// Values of `a` and `b` on the seeds both have, in seed order.
pub fn paired_by_seed(
    rows: &[MetricRow],
    a: &str,
    b: &str,
    k: usize,
    split: &str,
    metric: &str,
) -> (Vec<f64>, Vec<f64>) {
    let other: BTreeMap<u64, f64> = series(rows, b, k, split, metric).into_iter().collect();
    series(rows, a, k, split, metric)
        .into_iter()
        .filter_map(|(seed, x)| other.get(&seed).map(|&y| (x, y)))
        .unzip()
}

/// Pairs compared in the report, as `(better, worse)` hypotheses.
pub const COMPARISONS: [(&str, &str); 4] = [
    ("mask_probit", "mask_sigmoid"),
    ("mask_sig_uncert", "mask_sigmoid"),
    ("ifs_rcnn", "mask_probit"),
    ("ifs_rcnn", "mask_sig_uncert"),
];

/// One-sided paired tests on new-class box AP for every K and every pair in
/// [`COMPARISONS`] with at least two common seeds.
pub fn comparison_table(rows: &[MetricRow]) -> String {
    let mut ks: Vec<usize> = rows.iter().map(|r| r.k).collect();
    ks.sort_unstable();
    ks.dedup();
    let mut out = String::from("| K | hypothesis | seeds | mean diff | t | p |\n|---|---|---|---|---|---|\n");
    for k in ks {
        for (a, b) in COMPARISONS {
            let (x, y) = paired_by_seed(rows, a, b, k, "new", "box_ap");
            if let Ok(t) = paired_t_greater(&x, &y) {
                out.push_str(&format!(
                    "| {k} | {a} > {b} | {} | {:+.2} | {:.2} | {:.4} |\n",
                    t.n,
                    100.0 * t.mean_diff,
                    t.t,
                    t.p
                ));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn row(variant: &str, k: usize, seed: u64, value: f64) -> MetricRow {
        MetricRow {
            variant: variant.into(),
            k,
            seed,
            split: "new".into(),
            metric: "box_ap".into(),
            value,
        }
    }

    #[test]
    fn csv_roundtrip_is_exact() {
        let rows = vec![row("mask_sigmoid", 1, 0, 0.1 + 0.2), row("ifs_rcnn", 5, 3, 1.0 / 3.0)];
        let mut buf = Vec::new();
        write_metrics_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("variant,K,seed,split,metric,value\n"), "{text}");
        assert_eq!(read_metrics_csv(buf.as_slice()).unwrap(), rows);
    }

    #[test]
    fn confidence_interval_example() {
        // t_{0.975, 4} = 2.776445
        let h = t_half_width(&[1.0, 2.0, 3.0, 4.0, 5.0], 0.95).unwrap();
        assert_abs_diff_eq!(h, 2.776445 * (2.5f64 / 5.0).sqrt(), epsilon = 1e-5);
        assert_eq!(t_half_width(&[1.0], 0.95), None);
    }

    #[test]
    fn paired_test_examples() {
        let a = [0.5, 0.6, 0.55, 0.7, 0.65];
        let b = [0.4, 0.5, 0.5, 0.6, 0.5];
        let t = paired_t_greater(&a, &b).unwrap();
        assert!(t.mean_diff > 0.0 && t.p < 0.01, "{t:?}");
        let r = paired_t_greater(&b, &a).unwrap();
        assert_abs_diff_eq!(r.p, 1.0 - t.p, epsilon = 1e-12);
        assert_eq!(paired_t_greater(&[1.0, 2.0], &[0.0, 1.0]).unwrap().p, 0.0);
        assert!(paired_t_greater(&[1.0], &[0.0]).is_err());
    }

    #[test]
    fn summary_and_table() {
        let rows: Vec<MetricRow> = (0..3).map(|s| row("mask_sigmoid", 1, s, 0.2 + 0.1 * s as f64)).collect();
        let sums = summarize(&rows);
        assert_eq!(sums.len(), 1);
        assert_abs_diff_eq!(sums[0].mean, 0.3, epsilon = 1e-12);
        let table = markdown_table(&sums);
        assert!(table.contains("| mask_sigmoid | 1 | 30.0 ± "), "{table}");
        assert!(table.contains(" - |"));
    }
}
