use std::fmt::{self, Write as _};
use std::fs;
use std::io;
use std::path::Path;

pub const CSV_HEADER: &str = "epoch,step,split,loss,rmse";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// One logged value. Per-step training rows carry no RMSE; full-split
/// rows have `loss == rmse²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricRow {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: usize,
    pub split: Split,
    pub loss: f64,
    pub rmse: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    pub rows: Vec<MetricRow>,
}

impl MetricsLog {
    pub fn push(&mut self, row: MetricRow) {
        debug_assert!(self.rows.last().map_or(true, |r| r.epoch <= row.epoch));
        self.rows.push(row);
    }

    pub fn test_rows(&self) -> impl Iterator<Item = &MetricRow> {
        self.rows.iter().filter(|r| r.split == Split::Test)
    }

    /// Floats use the shortest representation that round-trips.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            let rmse = r.rmse.map(|v| v.to_string()).unwrap_or_default();
            writeln!(s, "{},{},{},{},{}", r.epoch, r.step, r.split, r.loss, rmse).unwrap();
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> io::Result<()> {
        fs::write(path, self.to_csv())
    }
}
