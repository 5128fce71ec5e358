//! Evaluation reports.
//!
//! Values are kept exact in memory. [`emit_report`] writes JSON with sorted keys,
//! floats rounded to 6 significant digits, and non-finite values as the strings
//! `"inf"`, `"-inf"` and `"nan"`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::ser::{SerializeMap, SerializeSeq};
use serde::{Serialize, Serializer};

use crate::error::Result;

use super::config::Mode;
use super::ingest::ItemError;
use super::io::write_text;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// `x` rounded to 6 significant digits.
pub fn round6(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{x:.5e}").parse().expect("formatted float parses")
}

fn ser_f64<S: Serializer>(x: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    match *x {
        v if v.is_nan() => s.serialize_str("nan"),
        v if v == f64::INFINITY => s.serialize_str("inf"),
        v if v == f64::NEG_INFINITY => s.serialize_str("-inf"),
        v => s.serialize_f64(round6(v)),
    }
}

struct Num(f64);

impl Serialize for Num {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        ser_f64(&self.0, s)
    }
}

fn ser_metrics<S: Serializer>(m: &BTreeMap<String, f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    let mut map = s.serialize_map(Some(m.len()))?;
    for (k, v) in m {
        map.serialize_entry(k, &Num(*v))?;
    }
    map.end()
}

fn ser_traces<S: Serializer>(m: &BTreeMap<String, Vec<f64>>, s: S) -> std::result::Result<S::Ok, S::Error> {
    struct Trace<'a>(&'a [f64]);
    impl Serialize for Trace<'_> {
        fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
            let mut seq = s.serialize_seq(Some(self.0.len()))?;
            for v in self.0 {
                seq.serialize_element(&Num(*v))?;
            }
            seq.end()
        }
    }
    let mut map = s.serialize_map(Some(m.len()))?;
    for (k, v) in m {
        map.serialize_entry(k, &Trace(v))?;
    }
    map.end()
}

/// One (item, cell) measurement.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Record {
    pub item_id: String,
    /// Experiment cell, e.g. `protect` or `protect/jpeg`.
    pub cell: String,
    /// Seed every random draw of this record derives from.
    pub seed: u64,
    #[serde(serialize_with = "ser_metrics")]
    pub metrics: BTreeMap<String, f64>,
    #[serde(serialize_with = "ser_traces")]
    pub traces: BTreeMap<String, Vec<f64>>,
    /// Paths relative to the run directory.
    pub artifacts: Vec<String>,
    pub error: Option<String>,
}

impl Record {
    pub fn new(item_id: &str, cell: &str, seed: u64) -> Self {
        Self {
            item_id: item_id.to_string(),
            cell: cell.to_string(),
            seed,
            ..Self::default()
        }
    }

    pub fn metric(&mut self, name: &str, value: f64) {
        self.metrics.insert(name.to_string(), value);
    }

    pub fn trace(&mut self, name: &str, values: Vec<f64>) {
        self.traces.insert(name.to_string(), values);
    }
}

/// Summary of one metric in one cell over its finite values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Aggregate {
    pub count: usize,
    #[serde(serialize_with = "ser_f64")]
    pub mean: f64,
    #[serde(serialize_with = "ser_f64")]
    pub median: f64,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Option<Self> {
        let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median = if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        };
        Some(Self {
            count: n,
            mean: v.iter().sum::<f64>() / n as f64,
            median,
        })
    }
}

/// `cell -> metric -> aggregate` over all records.
pub fn aggregate(records: &[Record]) -> BTreeMap<String, BTreeMap<String, Aggregate>> {
    let mut values: BTreeMap<&str, BTreeMap<&str, Vec<f64>>> = BTreeMap::new();
    for r in records {
        for (k, v) in &r.metrics {
            values.entry(&r.cell).or_default().entry(k).or_default().push(*v);
        }
    }
    values
        .into_iter()
        .map(|(cell, metrics)| {
            let aggs = metrics
                .into_iter()
                .filter_map(|(k, v)| Aggregate::of(&v).map(|a| (k.to_string(), a)))
                .collect();
            (cell.to_string(), aggs)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckpointRef {
    pub path: String,
    /// Hex sha256 of the checkpoint file.
    pub digest: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub run_id: String,
    pub mode: Mode,
    pub config_digest: String,
    pub seed: Option<u64>,
    pub checkpoint: Option<CheckpointRef>,
    pub tool_version: String,
    /// Seconds since the Unix epoch; the only field that varies between identical runs.
    pub created_at: u64,
    pub records: Vec<Record>,
    pub errors: Vec<ItemError>,
    pub aggregates: BTreeMap<String, BTreeMap<String, Aggregate>>,
}

impl EvalReport {
    pub fn new(run_id: String, mode: Mode, config_digest: String, seed: Option<u64>) -> Self {
        let created_at = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_secs());
        Self {
            run_id,
            mode,
            config_digest,
            seed,
            checkpoint: None,
            tool_version: TOOL_VERSION.to_string(),
            created_at,
            records: Vec::new(),
            errors: Vec::new(),
            aggregates: BTreeMap::new(),
        }
    }

    /// Recomputes the aggregates from the records.
    pub fn finalize(&mut self) {
        self.aggregates = aggregate(&self.records);
    }

    /// Whether the stored aggregates match a recomputation.
    pub fn is_consistent(&self) -> bool {
        self.aggregates == aggregate(&self.records)
    }

    pub fn records_in<'a>(&'a self, cell: &'a str) -> impl Iterator<Item = &'a Record> + 'a {
        self.records.iter().filter(move |r| r.cell == cell)
    }

    pub fn to_json(&self) -> Result<String> {
        let value = serde_json::to_value(self)?;
        let mut text = serde_json::to_string_pretty(&value)?;
        text.push('\n');
        Ok(text)
    }

    /// The JSON body without `created_at`.
    pub fn body_json(&self) -> Result<String> {
        let mut value = serde_json::to_value(self)?;
        if let Some(map) = value.as_object_mut() {
            map.remove("created_at");
        }
        Ok(serde_json::to_string_pretty(&value)?)
    }
}

pub fn emit_report(report: &EvalReport, path: &Path) -> Result<()> {
    write_text(path, &report.to_json()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rounding_and_non_finite() {
        assert_eq!(round6(1.23456789), 1.23457);
        assert_eq!(round6(-0.000123456789), -0.000123457);
        assert_eq!(round6(123456789.0), 123457000.0);
        let mut r = Record::new("a", "c", 1);
        r.metric("x", f64::INFINITY);
        r.metric("y", 2.0 / 3.0);
        r.trace("t", vec![f64::NAN, 1.0]);
        let v = serde_json::to_value(&r).unwrap();
        assert_eq!(v["metrics"]["x"], "inf");
        assert_eq!(v["metrics"]["y"].as_f64().unwrap(), 0.666667);
        assert_eq!(v["traces"]["t"][0], "nan");
    }

    #[test]
    fn aggregates_skip_non_finite() {
        let a = Aggregate::of(&[3.0, f64::INFINITY, 1.0, 2.0, 10.0]).unwrap();
        assert_eq!(a.count, 4);
        assert_eq!(a.mean, 4.0);
        assert_eq!(a.median, 2.5);
        assert!(Aggregate::of(&[f64::NAN]).is_none());
    }

    #[test]
    fn keys_are_sorted() {
        let mut rep = EvalReport::new("r".into(), Mode::Protect, "d".into(), Some(1));
        let mut r = Record::new("i", "protect", 1);
        r.metric("zeta", 1.0);
        r.metric("alpha", 2.0);
        rep.records.push(r);
        rep.finalize();
        assert!(rep.is_consistent());
        let text = rep.to_json().unwrap();
        assert!(text.find("\"aggregates\"").unwrap() < text.find("\"records\"").unwrap());
        assert!(text.find("\"alpha\"").unwrap() < text.find("\"zeta\"").unwrap());
    }
}
