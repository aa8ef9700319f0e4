//! Result rows and their CSV and JSON encodings.

use std::fmt;
use std::io::{self, BufRead, Write};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub const VERSION_LINE: &str = "# uring-engine-results v1";
pub const HEADER: [&str; 7] = ["bench", "variant", "param", "metric", "value", "host", "timestamp"];

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Num(f64),
    /// The measurement did not run; the reason is machine-readable.
    Skipped(String),
}

impl Value {
    pub fn num(&self) -> Option<f64> {
        match self {
            Value::Num(v) => Some(*v),
            Value::Skipped(_) => None,
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Num(v) => write!(f, "{v}"),
            Value::Skipped(r) => write!(f, "skipped:{r}"),
        }
    }
}

impl std::str::FromStr for Value {
    type Err = String;

    fn from_str(s: &str) -> Result<Value, String> {
        if let Some(r) = s.strip_prefix("skipped:") {
            return Ok(Value::Skipped(r.to_string()));
        }
        s.parse::<f64>().map(Value::Num).map_err(|_| format!("bad value {s:?}"))
    }
}

impl Serialize for Value {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Value::Num(v) => s.serialize_f64(*v),
            Value::Skipped(_) => s.collect_str(self),
        }
    }
}

impl<'de> Deserialize<'de> for Value {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Value, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Value::Num(v)),
            Raw::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub bench: String,
    pub variant: String,
    pub param: String,
    pub metric: String,
    pub value: Value,
    /// Host name and the cycle counter source, as `name/source`.
    pub host: String,
    pub timestamp: String,
}

/// Collects rows for one invocation.
#[derive(Debug, Clone)]
pub struct Rows {
    host: String,
    pub rows: Vec<Row>,
}

pub fn host_id() -> String {
    let name = std::fs::read_to_string("/proc/sys/kernel/hostname")
        .map(|s| s.trim().to_string())
        .unwrap_or_else(|_| "unknown".into());
    format!("{name}/{}", uring_engine::cycles::clock().source.name())
}

impl Default for Rows {
    fn default() -> Self {
        Rows::new(host_id())
    }
}

impl Rows {
    pub fn new(host: String) -> Rows {
        Rows { host, rows: Vec::new() }
    }

    pub fn push(&mut self, bench: &str, variant: &str, param: impl fmt::Display, metric: &str, value: Value) {
        let value = match value {
            Value::Num(v) if !v.is_finite() => Value::Skipped(format!("non-finite result {v}")),
            Value::Skipped(r) => Value::Skipped(r.replace(['\n', '\r'], " ")),
            v => v,
        };
        self.rows.push(Row {
            bench: bench.into(),
            variant: variant.into(),
            param: param.to_string(),
            metric: metric.into(),
            value,
            host: self.host.clone(),
            timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
        });
    }

    pub fn num(&mut self, bench: &str, variant: &str, param: impl fmt::Display, metric: &str, v: f64) {
        self.push(bench, variant, param, metric, Value::Num(v));
    }

    pub fn skip(&mut self, bench: &str, variant: &str, param: impl fmt::Display, metric: &str, reason: impl fmt::Display) {
        self.push(bench, variant, param, metric, Value::Skipped(reason.to_string()));
    }

    pub fn find(&self, bench: &str, variant: &str, param: &str, metric: &str) -> Option<&Row> {
        self.rows
            .iter()
            .find(|r| r.bench == bench && r.variant == variant && r.param == param && r.metric == metric)
    }
}

pub fn write_csv(out: impl Write, rows: &[Row]) -> io::Result<()> {
    let mut out = io::BufWriter::new(out);
    writeln!(out, "{VERSION_LINE}")?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(HEADER)?;
    for r in rows {
        w.write_record([
            r.bench.as_str(),
            &r.variant,
            &r.param,
            &r.metric,
            &r.value.to_string(),
            &r.host,
            &r.timestamp,
        ])?;
    }
    w.flush()
}

pub fn read_csv(input: impl BufRead) -> Result<Vec<Row>, String> {
    let mut input = input;
    let mut first = String::new();
    input.read_line(&mut first).map_err(|e| e.to_string())?;
    if first.trim_end() != VERSION_LINE {
        return Err(format!("expected {VERSION_LINE:?}, found {:?}", first.trim_end()));
    }
    let mut rdr = csv::Reader::from_reader(input);
    let header = rdr.headers().map_err(|e| e.to_string())?;
    if header.iter().ne(HEADER) {
        return Err(format!("unexpected header {header:?}"));
    }
    rdr.records()
        .map(|rec| {
            let rec = rec.map_err(|e| e.to_string())?;
            let f = |i: usize| rec.get(i).unwrap_or_default().to_string();
            Ok(Row {
                bench: f(0),
                variant: f(1),
                param: f(2),
                metric: f(3),
                value: f(4).parse()?,
                host: f(5),
                timestamp: f(6),
            })
        })
        .collect()
}

pub fn write_json(out: impl Write, rows: &[Row]) -> io::Result<()> {
    let mut out = io::BufWriter::new(out);
    serde_json::to_writer_pretty(&mut out, rows)?;
    writeln!(out)?;
    out.flush()
}

pub fn read_json(input: impl io::Read) -> Result<Vec<Row>, String> {
    serde_json::from_reader(input).map_err(|e| e.to_string())
}
