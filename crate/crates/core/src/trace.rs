//! Per-iteration metric tables produced by every runner.

use serde::Serialize;

use crate::error::{Error, Result};

/// A table of named numeric columns plus warning flags raised during the run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trace {
    columns: Vec<String>,
    rows: Vec<Vec<f64>>,
    flags: Vec<String>,
}

impl Trace {
    pub fn new<S: AsRef<str>>(columns: &[S]) -> Self {
        Self {
            columns: columns.iter().map(|c| c.as_ref().to_string()).collect(),
            rows: Vec::new(),
            flags: Vec::new(),
        }
    }

    /// Appends a row; its length must match the column count.
    pub fn push(&mut self, row: Vec<f64>) -> Result<()> {
        if row.len() != self.columns.len() {
            return Err(Error::Dimension {
                context: "trace row",
                expected: self.columns.len(),
                got: row.len(),
            });
        }
        self.rows.push(row);
        Ok(())
    }

    /// Records a warning once.
    pub fn flag(&mut self, message: impl Into<String>) {
        let message = message.into();
        if !self.flags.contains(&message) {
            self.flags.push(message);
        }
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn flags(&self) -> &[String] {
        &self.flags
    }

    pub fn is_flagged(&self) -> bool {
        !self.flags.is_empty()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let idx = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[idx]).collect())
    }

    pub fn last(&self, name: &str) -> Option<f64> {
        let idx = self.columns.iter().position(|c| c == name)?;
        self.rows.last().map(|r| r[idx])
    }
}
