//! Line-delimited metrics records: one JSON object per line. The stream
//! opens with a config record, carries one record per loss term per step
//! (with the active stage), and one summary record per epoch with the
//! accuracy triple.

use crate::config::ExperimentConfig;
use crate::losses::LossBreakdown;
use crate::schedule::{EpochRecord, StageKind};
use serde::Serialize;
use serde_json::{Map, Value};
use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

pub struct MetricsWriter<W: Write> {
    out: W,
}

#[derive(Serialize)]
struct TermRecord<'a> {
    record: &'static str,
    iteration: u64,
    epoch: u64,
    stage: StageKind,
    term: &'a str,
    value: f64,
}

#[derive(Serialize)]
struct EpochLine<'a> {
    record: &'static str,
    #[serde(flatten)]
    epoch: &'a EpochRecord,
}

impl MetricsWriter<std::io::BufWriter<std::fs::File>> {
    pub fn create(path: &Path) -> std::io::Result<Self> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        Ok(MetricsWriter {
            out: std::io::BufWriter::new(std::fs::File::create(path)?),
        })
    }
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(out: W) -> Self {
        MetricsWriter { out }
    }

    fn line<T: Serialize>(&mut self, value: &T) -> std::io::Result<()> {
        serde_json::to_writer(&mut self.out, value)?;
        self.out.write_all(b"\n")
    }

    /// The resolved configuration, flattened into one record (sorted keys).
    pub fn write_config(&mut self, config: &ExperimentConfig) -> std::io::Result<()> {
        let mut map = Map::new();
        map.insert("record".into(), Value::String("config".into()));
        for line in config.to_sorted_lines().lines() {
            let (k, v) = line.split_once('=').expect("echo lines are key=value");
            map.insert(k.to_string(), Value::String(v.to_string()));
        }
        self.line(&Value::Object(map))
    }

    /// Per-term records for one optimizer step.
    pub fn write_step(
        &mut self,
        iteration: u64,
        epoch: u64,
        stage: StageKind,
        breakdown: &LossBreakdown,
    ) -> std::io::Result<()> {
        for (term, value) in [
            ("un_nce", breakdown.un_nce),
            ("un_cls", breakdown.un_cls),
            ("sup_nce", breakdown.sup_nce),
            ("sup_cls", breakdown.sup_cls),
            ("entropy", breakdown.entropy),
            ("total", breakdown.total),
        ] {
            self.line(&TermRecord {
                record: "loss",
                iteration,
                epoch,
                stage,
                term,
                value,
            })?;
        }
        Ok(())
    }

    pub fn write_epoch(&mut self, epoch: &EpochRecord) -> std::io::Result<()> {
        self.line(&EpochLine {
            record: "epoch",
            epoch,
        })
    }

    /// Diagnostic record for a run aborted by a numeric failure.
    pub fn write_abort(&mut self, iteration: u64, breakdown: &LossBreakdown) -> std::io::Result<()> {
        #[derive(Serialize)]
        struct Abort<'a> {
            record: &'static str,
            iteration: u64,
            #[serde(flatten)]
            breakdown: &'a LossBreakdown,
        }
        self.line(&Abort {
            record: "abort",
            iteration,
            breakdown,
        })
    }

    pub fn flush(&mut self) -> std::io::Result<()> {
        self.out.flush()
    }
}

/// One metrics file, parsed leniently: malformed lines are counted, not fatal.
pub struct ParsedMetrics {
    pub config: BTreeMap<String, String>,
    /// `(epoch, acc_all, acc_old, acc_new)` for epoch records that carry an
    /// accuracy evaluation.
    pub acc_series: Vec<(u64, f64, Option<f64>, Option<f64>)>,
    pub malformed: usize,
}

pub fn read_metrics(path: &Path) -> std::io::Result<ParsedMetrics> {
    let file = std::fs::File::open(path)?;
    let mut parsed = ParsedMetrics {
        config: BTreeMap::new(),
        acc_series: Vec::new(),
        malformed: 0,
    };
    for line in std::io::BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let Ok(Value::Object(map)) = serde_json::from_str::<Value>(&line) else {
            parsed.malformed += 1;
            continue;
        };
        match map.get("record").and_then(Value::as_str) {
            Some("config") => {
                for (k, v) in &map {
                    if k != "record" {
                        if let Value::String(s) = v {
                            parsed.config.insert(k.clone(), s.clone());
                        }
                    }
                }
            }
            Some("epoch") => {
                let epoch = map.get("epoch").and_then(Value::as_u64);
                let acc_all = map.get("acc_all").and_then(Value::as_f64);
                if let (Some(epoch), Some(acc_all)) = (epoch, acc_all) {
                    parsed.acc_series.push((
                        epoch,
                        acc_all,
                        map.get("acc_old").and_then(Value::as_f64),
                        map.get("acc_new").and_then(Value::as_f64),
                    ));
                }
            }
            Some(_) => {}
            None => parsed.malformed += 1,
        }
    }
    Ok(parsed)
}
