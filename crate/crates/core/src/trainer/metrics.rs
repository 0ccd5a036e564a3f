//! Metrics CSV rows.

use std::fmt::Write as _;
use std::path::Path;

pub const METRICS_HEADER: &str = "step,stage,loss_seg,loss_con,loss_pl,val_miou,pseudo_miou,wall_ms";

/// One row per evaluation interval. Loss columns are means over the
/// interval; `pseudo_miou` scores `f` on the unlabelled images.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub stage: u8,
    pub loss_seg: f64,
    pub loss_con: f64,
    pub loss_pl: f64,
    pub val_miou: f64,
    pub pseudo_miou: Option<f64>,
    pub wall_ms: u64,
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        let pseudo = self.pseudo_miou.map(|v| format!("{v:.6}")).unwrap_or_default();
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{},{}",
            self.step, self.stage, self.loss_seg, self.loss_con, self.loss_pl, self.val_miou, pseudo, self.wall_ms
        )
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{}", r.to_csv());
    }
    out
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> std::io::Result<()> {
    std::fs::write(path, metrics_csv(rows))
}

/// Parses a metrics file written by [`write_metrics_csv`].
pub fn read_metrics_csv(text: &str) -> Result<Vec<MetricsRow>, String> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == METRICS_HEADER => {}
        other => return Err(format!("unexpected header {other:?}")),
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 {
                return Err(format!("row {}: expected 8 fields, got {}", i + 1, f.len()));
            }
            let num = |k: usize| f[k].trim().parse::<f64>().map_err(|e| format!("row {}: {e}", i + 1));
            let int = |k: usize| f[k].trim().parse::<u64>().map_err(|e| format!("row {}: {e}", i + 1));
            Ok(MetricsRow {
                step: int(0)? as usize,
                stage: int(1)? as u8,
                loss_seg: num(2)?,
                loss_con: num(3)?,
                loss_pl: num(4)?,
                val_miou: num(5)?,
                pseudo_miou: if f[6].trim().is_empty() { None } else { Some(num(6)?) },
                wall_ms: int(7)?,
            })
        })
        .collect()
}
