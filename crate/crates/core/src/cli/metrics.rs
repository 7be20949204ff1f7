//! Line-delimited JSON metrics: one record per round, then one summary
//! record. Wall-clock timings live in a separate stream so reruns produce
//! byte-identical metrics.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::CliError;
use crate::federation::{ClientState, RoundReport, SimulationResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    /// `server` or `client:<id>`.
    pub source: String,
    pub metric: String,
    pub value: f64,
}

fn entry(source: &str, metric: &str, value: f64) -> Entry {
    Entry { source: source.to_owned(), metric: metric.to_owned(), value }
}

fn round_entries(r: &RoundReport) -> Vec<Entry> {
    let mut out = vec![
        entry("server", "accuracy", r.server_accuracy),
        entry("server", "loss", r.server_loss),
        entry("server", "train_loss", r.train_loss),
        entry("server", "bytes_up", r.bytes_up as f64),
        entry("server", "bytes_down", r.bytes_down as f64),
        entry("server", "cumulative_bytes_up", r.cumulative_bytes_up as f64),
        entry("server", "cumulative_bytes_down", r.cumulative_bytes_down as f64),
    ];
    for (k, &v) in r.per_class_recall.iter().enumerate() {
        out.push(entry("server", &format!("recall_class_{k}"), v));
    }
    for c in &r.clients {
        let src = format!("client:{}", c.id);
        out.push(entry(&src, "train_loss", c.train_loss));
        out.push(entry(&src, "local_accuracy", c.local_accuracy));
        out.push(entry(&src, "m", c.m as f64));
        out.push(entry(&src, "bytes_up", c.bytes_up as f64));
    }
    out
}

fn line(v: &Value) -> Result<String, CliError> {
    serde_json::to_string(v).map(|s| s + "\n").map_err(|e| CliError::Metrics(e.to_string()))
}

pub fn metrics_stream(
    result: &SimulationResult,
    clients: &[ClientState],
    class_counts: &[usize],
) -> Result<String, CliError> {
    let mut out = String::new();
    for r in &result.reports {
        out += &line(&json!({ "type": "round", "round": r.round, "entries": round_entries(r) }))?;
    }
    let augmentation: Vec<Value> = clients
        .iter()
        .map(|c| {
            let per_class: Vec<usize> =
                c.augmentation.as_ref().map(|a| a.classes.iter().map(|x| x.synthetic).collect()).unwrap_or_default();
            let unreachable: Vec<usize> = c
                .augmentation
                .as_ref()
                .map(|a| a.unreachable().map(|x| x.class).collect())
                .unwrap_or_default();
            let last = c.gan_history.last();
            json!({
                "client": c.id,
                "real_histogram": c.data.real_histogram(),
                "synthetic_per_class": per_class,
                "unreachable_classes": unreachable,
                "gan_final_d_loss": last.map(|h| h.d_loss),
                "gan_final_g_loss": last.map(|h| h.g_loss),
            })
        })
        .collect();
    let mut summary = serde_json::to_value(&result.summary).map_err(|e| CliError::Metrics(e.to_string()))?;
    if let Value::Object(map) = &mut summary {
        map.insert("type".into(), json!("summary"));
        map.insert("long_tail_class_counts".into(), json!(class_counts));
        map.insert("augmentation".into(), Value::Array(augmentation));
    }
    out += &line(&summary)?;
    Ok(out)
}

pub fn timing_stream(result: &SimulationResult) -> Result<String, CliError> {
    let mut out = String::new();
    for r in &result.reports {
        out += &line(&json!({ "round": r.round, "duration_secs": r.duration_secs }))?;
    }
    Ok(out)
}

/// CSV tables derived from a metrics stream.
#[derive(Clone, Debug, PartialEq)]
pub struct PlotTables {
    pub server_accuracy: String,
    pub client_loss: String,
    pub bytes: String,
}

impl PlotTables {
    pub const NAMES: [&'static str; 3] = ["server_accuracy.csv", "client_loss.csv", "bytes.csv"];

    pub fn write_to(&self, dir: &Path) -> Result<(), CliError> {
        fs::create_dir_all(dir).map_err(|source| CliError::Io { path: dir.to_path_buf(), source })?;
        for (name, text) in Self::NAMES.iter().zip([&self.server_accuracy, &self.client_loss, &self.bytes]) {
            let p = dir.join(name);
            fs::write(&p, text).map_err(|source| CliError::Io { path: p.clone(), source })?;
        }
        Ok(())
    }
}

#[derive(Deserialize)]
struct RoundLine {
    round: usize,
    entries: Vec<Entry>,
}

fn csv_text(header: &[&str], rows: &[Vec<String>]) -> Result<String, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| CliError::Metrics(e.to_string());
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(r).map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Metrics(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| CliError::Metrics(e.to_string()))
}

/// Builds the accuracy, per-client loss and cumulative byte tables.
pub fn export_plot_data(stream: &str) -> Result<PlotTables, CliError> {
    let (mut acc, mut loss, mut bytes) = (Vec::new(), Vec::new(), Vec::new());
    for (n, raw) in stream.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let v: Value =
            serde_json::from_str(raw).map_err(|e| CliError::Metrics(format!("line {}: {e}", n + 1)))?;
        match v.get("type").and_then(Value::as_str) {
            Some("round") => {}
            Some("summary") => continue,
            other => return Err(CliError::Metrics(format!("line {}: unknown record type {other:?}", n + 1))),
        }
        let r: RoundLine =
            serde_json::from_value(v).map_err(|e| CliError::Metrics(format!("line {}: {e}", n + 1)))?;
        let get = |metric: &str| {
            r.entries
                .iter()
                .find(|e| e.source == "server" && e.metric == metric)
                .map(|e| e.value)
                .ok_or_else(|| CliError::Metrics(format!("line {}: missing server {metric}", n + 1)))
        };
        acc.push(vec![r.round.to_string(), get("accuracy")?.to_string(), get("loss")?.to_string()]);
        bytes.push(vec![
            r.round.to_string(),
            (get("cumulative_bytes_up")? as u64).to_string(),
            (get("cumulative_bytes_down")? as u64).to_string(),
        ]);
        for e in r.entries.iter().filter(|e| e.metric == "train_loss") {
            if let Some(id) = e.source.strip_prefix("client:") {
                loss.push(vec![r.round.to_string(), id.to_owned(), e.value.to_string()]);
            }
        }
    }
    Ok(PlotTables {
        server_accuracy: csv_text(&["round", "accuracy", "loss"], &acc)?,
        client_loss: csv_text(&["round", "client", "train_loss"], &loss)?,
        bytes: csv_text(&["round", "cumulative_bytes_up", "cumulative_bytes_down"], &bytes)?,
    })
}
