use crate::error::Result;

/// Per-epoch training summary. Errors are top-1 percentages.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_top1_error: f64,
    pub eval_loss: f64,
    pub eval_top1_error: f64,
    pub lr: f64,
    pub wall_time_seconds: f64,
}

impl MetricsRecord {
    /// A record whose training loss is not finite marks the epoch in which
    /// training diverged.
    pub fn is_diverged(&self) -> bool {
        !self.train_loss.is_finite()
    }
}

/// Append-only consumer of metrics records.
pub trait MetricsSink {
    fn emit(&mut self, record: &MetricsRecord) -> Result<()>;
}

impl MetricsSink for Vec<MetricsRecord> {
    fn emit(&mut self, record: &MetricsRecord) -> Result<()> {
        self.push(record.clone());
        Ok(())
    }
}
