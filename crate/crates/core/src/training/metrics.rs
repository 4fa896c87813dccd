use std::fmt::Write as _;

/// One row of the metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: Option<f64>,
    pub seconds: f64,
    pub clamped_plans: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsRecord {
    pub rows: Vec<EpochMetrics>,
}

pub const METRICS_HEADER: &str = "epoch,split,loss,accuracy,seconds,clamped_plans";

impl MetricsRecord {
    pub fn push(&mut self, row: EpochMetrics) {
        self.rows.push(row);
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.rows.last().map(|r| r.loss)
    }

    /// Line-oriented CSV. Wall-clock seconds are nondeterministic, so they
    /// are only written when `with_seconds` is set; otherwise the column is
    /// left empty and the file is reproducible byte for byte.
    pub fn to_csv(&self, with_seconds: bool) -> String {
        let mut out = String::from(METRICS_HEADER);
        out.push('\n');
        for r in &self.rows {
            let acc = r.accuracy.map(|a| format!("{a:.6}")).unwrap_or_default();
            let secs = if with_seconds {
                format!("{:.3}", r.seconds)
            } else {
                String::new()
            };
            let _ = writeln!(
                out,
                "{},{},{:.10e},{},{},{}",
                r.epoch, r.split, r.loss, acc, secs, r.clamped_plans
            );
        }
        out
    }
}
