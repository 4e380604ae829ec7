//! Metrics rows shared by every training stage.

/// One append-only metrics record; persisted as a CSV row by the harness.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub config_hash: String,
    pub stage: String,
    pub step: u64,
    pub metric: String,
    pub value: f64,
    pub wall_ms: u64,
}

impl RunRecord {
    pub fn new(stage: &str, step: u64, metric: &str, value: f64) -> Self {
        RunRecord {
            config_hash: String::new(),
            stage: stage.to_string(),
            step,
            metric: metric.to_string(),
            value,
            wall_ms: 0,
        }
    }

    pub fn with_hash(mut self, hash: &str) -> Self {
        self.config_hash = hash.to_string();
        self
    }

    pub fn with_wall_ms(mut self, ms: u64) -> Self {
        self.wall_ms = ms;
        self
    }
}
