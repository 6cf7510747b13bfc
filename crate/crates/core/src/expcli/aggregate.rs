use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::CliError;

/// Percentile levels reported for every checkpoint.
pub const PERCENTILES: [f64; 5] = [10.0, 25.0, 50.0, 75.0, 90.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    AvgReward,
    FbarNorm,
    BellmanError,
    MseToQstar,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::AvgReward, Metric::FbarNorm, Metric::BellmanError, Metric::MseToQstar];

    pub fn name(self) -> &'static str {
        match self {
            Metric::AvgReward => "avg_reward",
            Metric::FbarNorm => "fbar_norm",
            Metric::BellmanError => "bellman_error",
            Metric::MseToQstar => "mse_to_qstar",
        }
    }

    pub fn parse(s: &str) -> Option<Metric> {
        Metric::ALL.into_iter().find(|m| m.name() == s)
    }
}

/// One line of a run CSV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub run_id: usize,
    pub n: u64,
    pub metric: Metric,
    pub value: f64,
}

/// Linear-interpolation percentile of sorted data (`p` in percent).
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of empty data");
    let h = (sorted.len() - 1) as f64 * p / 100.0;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    (sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])).clamp(sorted[lo], sorted[hi])
}

/// Per-checkpoint percentiles of one metric across runs.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateResult {
    pub metric: Metric,
    /// `(n, [p10, p25, p50, p75, p90])`, sorted by `n`.
    pub rows: Vec<(u64, [f64; 5])>,
}

impl AggregateResult {
    pub fn from_rows(rows: &[RunRow], metric: Metric) -> AggregateResult {
        let mut by_n: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
        for r in rows.iter().filter(|r| r.metric == metric) {
            by_n.entry(r.n).or_default().push(r.value);
        }
        let rows = by_n
            .into_iter()
            .map(|(n, mut vals)| {
                vals.sort_by(f64::total_cmp);
                (n, PERCENTILES.map(|p| percentile(&vals, p)))
            })
            .collect();
        AggregateResult { metric, rows }
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), CliError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["n", "p10", "p25", "p50", "p75", "p90"]).map_err(CliError::runtime)?;
        for (n, ps) in &self.rows {
            let mut rec = vec![n.to_string()];
            rec.extend(ps.iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(CliError::runtime)?;
        }
        w.flush().map_err(CliError::runtime)
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("CSV is UTF-8")
    }
}

pub fn write_run_csv<W: Write>(rows: &[RunRow], out: W) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["run_id", "n", "metric", "value"]).map_err(CliError::runtime)?;
    for r in rows {
        w.write_record([r.run_id.to_string(), r.n.to_string(), r.metric.name().to_string(), r.value.to_string()])
            .map_err(CliError::runtime)?;
    }
    w.flush().map_err(CliError::runtime)
}

pub fn read_run_csv(text: &str) -> Result<Vec<RunRow>, CliError> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    rdr.deserialize().map(|r| r.map_err(CliError::config)).collect()
}
