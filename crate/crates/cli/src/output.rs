//! CSV tables and the JSON manifest.

use std::path::Path;

use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::run::TaskRecord;

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: String,
    header: Vec<String>,
    rows: Vec<Vec<String>>,
    /// Preformatted contents, written verbatim.
    raw: Option<(Vec<u8>, usize)>,
}

impl Table {
    pub fn new(name: &str, header: &[&str]) -> Self {
        Table {
            name: name.into(),
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
            raw: None,
        }
    }

    pub fn raw(name: &str, bytes: Vec<u8>, rows: usize) -> Self {
        Table {
            name: name.into(),
            header: Vec::new(),
            rows: Vec::new(),
            raw: Some((bytes, rows)),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn len(&self) -> usize {
        match &self.raw {
            Some((_, n)) => *n,
            None => self.rows.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        let path = dir.join(&self.name);
        if let Some((bytes, _)) = &self.raw {
            return std::fs::write(path, bytes);
        }
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.flush()
    }
}

#[derive(Debug, Serialize)]
pub struct Artifact {
    pub path: String,
    pub rows: usize,
}

#[derive(Debug, Serialize)]
pub struct TaskEntry {
    pub task: String,
    pub status: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Serialize)]
pub struct Manifest<'a> {
    pub toolkit: &'static str,
    pub version: &'static str,
    pub experiment: &'a str,
    pub config: &'a ExperimentConfig,
    pub seeds: &'a [u64],
    pub workers: usize,
    pub wall_time_seconds: f64,
    pub artifacts: Vec<Artifact>,
    pub tasks: Vec<TaskEntry>,
    pub failed_tasks: usize,
}

impl<'a> Manifest<'a> {
    pub fn new(cfg: &'a ExperimentConfig, tables: &[Table], tasks: &[TaskRecord], workers: usize, wall: f64) -> Self {
        let tasks: Vec<TaskEntry> = tasks
            .iter()
            .map(|t| TaskEntry {
                task: t.name.clone(),
                status: if t.error.is_some() { "failed" } else { "ok" },
                error: t.error.clone(),
            })
            .collect();
        Manifest {
            toolkit: "convhom",
            version: env!("CARGO_PKG_VERSION"),
            experiment: &cfg.experiment,
            config: cfg,
            seeds: &cfg.seeds,
            workers,
            wall_time_seconds: wall,
            artifacts: tables
                .iter()
                .map(|t| Artifact {
                    path: t.name.clone(),
                    rows: t.len(),
                })
                .collect(),
            failed_tasks: tasks.iter().filter(|t| t.status == "failed").count(),
            tasks,
        }
    }

    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(std::io::Error::other)?;
        std::fs::write(dir.join("manifest.json"), text + "\n")
    }
}
