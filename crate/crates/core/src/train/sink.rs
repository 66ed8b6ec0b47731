use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::PhaseKind;
use crate::error::Result;
use crate::model::ParameterStore;
use crate::pruning::PruneMask;

pub const METRICS_HEADER: &str = "step,phase,loss,lr,nonzero_params";

#[derive(Debug, Clone, PartialEq)]
pub struct LogRecord {
    pub step: u64,
    pub phase: PhaseKind,
    pub loss: f32,
    pub lr: f64,
    pub nonzero_params: usize,
}

impl LogRecord {
    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{}", self.step, self.phase, self.loss, self.lr, self.nonzero_params)
    }
}

pub trait MetricsSink {
    fn record(&mut self, rec: &LogRecord) -> Result<()>;

    /// Called after every update with the current weights; the default ignores it.
    fn observe(&mut self, _step: u64, _store: &ParameterStore, _mask: Option<&PruneMask>) -> Result<()> {
        Ok(())
    }
}

#[derive(Debug, Default)]
pub struct NullSink;

impl MetricsSink for NullSink {
    fn record(&mut self, _rec: &LogRecord) -> Result<()> {
        Ok(())
    }
}

#[derive(Debug, Default)]
pub struct MemorySink {
    pub records: Vec<LogRecord>,
}

impl MetricsSink for MemorySink {
    fn record(&mut self, rec: &LogRecord) -> Result<()> {
        self.records.push(rec.clone());
        Ok(())
    }
}

/// Appends rows to a CSV file, writing the header first.
pub struct CsvSink {
    out: BufWriter<File>,
}

impl CsvSink {
    pub fn create(path: &Path) -> Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "{METRICS_HEADER}")?;
        Ok(CsvSink { out })
    }
}

impl MetricsSink for CsvSink {
    fn record(&mut self, rec: &LogRecord) -> Result<()> {
        writeln!(self.out, "{}", rec.csv_row())?;
        self.out.flush()?;
        Ok(())
    }
}

impl<S: MetricsSink + ?Sized> MetricsSink for &mut S {
    fn record(&mut self, rec: &LogRecord) -> Result<()> {
        (**self).record(rec)
    }

    fn observe(&mut self, step: u64, store: &ParameterStore, mask: Option<&PruneMask>) -> Result<()> {
        (**self).observe(step, store, mask)
    }
}
