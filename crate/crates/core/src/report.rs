// SPDX-License-Identifier: MIT OR Apache-2.0

//! Tabular results shared by every command: `results.json` plus the list of
//! files a command produced.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::Result;
use crate::store::{read_json, write_json};

pub const RESULTS_FILE: &str = "results.json";
pub const OUTPUTS_FILE: &str = "outputs.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Results {
    pub kind: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Value>>,
    pub summary: Value,
}

/// Files written by a command, relative to its output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputManifest {
    pub command: String,
    pub files: Vec<String>,
}

impl Results {
    pub fn new(kind: impl Into<String>, columns: &[&str]) -> Self {
        Self {
            kind: kind.into(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
            summary: Value::Null,
        }
    }

    pub fn push(&mut self, row: Vec<Value>) {
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.columns.join(",");
        out.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(csv_cell).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("results serialize");
        s.push('\n');
        s
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        write_json(self, dir.as_ref().join(RESULTS_FILE))
    }

    pub fn read(dir: impl AsRef<Path>) -> Result<Self> {
        read_json(dir.as_ref().join(RESULTS_FILE))
    }
}

fn csv_cell(v: &Value) -> String {
    match v {
        Value::Null => String::new(),
        Value::String(s) if s.contains([',', '"', '\n']) => format!("\"{}\"", s.replace('"', "\"\"")),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}
