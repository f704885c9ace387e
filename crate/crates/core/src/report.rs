//! Job report written by both command-line tools: `key=value` lines.

use std::fmt::Write as _;

use crate::config::write_kv;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct JobReport {
    pub outcome: String,
    pub layers_total: u32,
    pub layers_printed: u32,
    pub bytes_sent: u64,
    pub bytes_received: u64,
    /// Filament pushed for part paths, guide paths excluded.
    pub extruded: f64,
    pub guide_extruded: f64,
    /// Wall seconds per layer.
    pub layer_times: Vec<f64>,
    pub validation: String,
    pub dwell: Option<String>,
    pub ledger_digest: Option<String>,
    pub max_resident_layers: Option<usize>,
}

/// Keys whose values depend on wall-clock timing.
pub const TIMING_KEYS: [&str; 2] = ["layer_times", "dwell"];

impl JobReport {
    pub fn to_kv(&self) -> String {
        let mut times = String::new();
        for (i, t) in self.layer_times.iter().enumerate() {
            let _ = write!(times, "{}{t:.4}", if i > 0 { "," } else { "" });
        }
        let mut pairs = vec![
            ("outcome", self.outcome.clone()),
            ("layers_total", self.layers_total.to_string()),
            ("layers_printed", self.layers_printed.to_string()),
            ("bytes_sent", self.bytes_sent.to_string()),
            ("bytes_received", self.bytes_received.to_string()),
            ("extruded_mm", format!("{:.5}", self.extruded)),
            ("guide_extruded_mm", format!("{:.5}", self.guide_extruded)),
            ("layer_times", times),
            ("validation", self.validation.clone()),
        ];
        if let Some(d) = &self.dwell {
            pairs.push(("dwell", d.clone()));
        }
        if let Some(d) = &self.ledger_digest {
            pairs.push(("ledger_digest", d.clone()));
        }
        if let Some(m) = self.max_resident_layers {
            pairs.push(("max_resident_layers", m.to_string()));
        }
        write_kv(pairs)
    }
}
