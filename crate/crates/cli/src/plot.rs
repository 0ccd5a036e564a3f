//! SVG line charts of metrics files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use tssl_core::trainer::{read_metrics_csv, MetricsRow};

use crate::CliError;

const W: f64 = 640.0;
const H: f64 = 360.0;
const MARGIN: f64 = 48.0;
const COLOURS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

struct Series {
    label: String,
    points: Vec<(f64, f64)>,
}

fn chart(title: &str, series: &[Series]) -> String {
    let all = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x0 > x1 {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-12 {
        y1 = y0 + 1.0;
    }
    let px = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (W - 2.0 * MARGIN);
    let py = |y: f64| H - MARGIN - (y - y0) / (y1 - y0) * (H - 2.0 * MARGIN);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{title}</text>"#, W / 2.0);
    let _ = writeln!(
        s,
        r#"<path d="M{m} {t} V{b} H{r}" stroke="black" fill="none"/>"#,
        m = MARGIN,
        t = MARGIN,
        b = H - MARGIN,
        r = W - MARGIN
    );
    for (v, anchor, x, y) in [
        (x0, "start", px(x0), H - MARGIN + 16.0),
        (x1, "end", px(x1), H - MARGIN + 16.0),
    ] {
        let _ = writeln!(s, r#"<text x="{x:.1}" y="{y:.1}" text-anchor="{anchor}">{v}</text>"#);
    }
    for v in [y0, y1] {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.3}</text>"#,
            MARGIN - 4.0,
            py(v) + 4.0
        );
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">step</text>"#, W / 2.0, H - 12.0);
    for (i, ser) in series.iter().enumerate() {
        let colour = COLOURS[i % COLOURS.len()];
        let pts: Vec<String> = ser.points.iter().map(|&(x, y)| format!("{:.1},{:.1}", px(x), py(y))).collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" stroke="{colour}" stroke-width="1.5" fill="none"/>"#,
            pts.join(" ")
        );
        let ly = MARGIN + 14.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{ly:.1}" fill="{colour}" text-anchor="end">{}</text>"#,
            W - MARGIN,
            ser.label
        );
    }
    s.push_str("</svg>\n");
    s
}

type Column = (&'static str, fn(&MetricsRow) -> Option<f64>);

const CHARTS: [(&str, &str, &[Column]); 3] = [
    (
        "loss",
        "training losses",
        &[
            ("seg", |r| Some(r.loss_seg)),
            ("con", |r| Some(r.loss_con)),
            ("pl", |r| Some(r.loss_pl)),
        ],
    ),
    ("val_miou", "validation mIoU", &[("val", |r| Some(r.val_miou))]),
    ("pseudo_miou", "mIoU on unlabelled images", &[("unlabelled", |r| r.pseudo_miou)]),
];

/// Writes `loss.svg`, `val_miou.svg` and `pseudo_miou.svg` to `out`, one
/// series per input file (and per loss term).
pub fn cmd_plot(files: &[PathBuf], out: &Path) -> Result<(), CliError> {
    let mut runs = Vec::new();
    for f in files {
        let text = fs::read_to_string(f).map_err(|e| CliError::Io(format!("{}: {e}", f.display())))?;
        let rows = read_metrics_csv(&text).map_err(|e| CliError::Data(format!("{}: {e}", f.display())))?;
        let name = f.file_stem().and_then(|s| s.to_str()).unwrap_or("run").to_string();
        runs.push((name, rows));
    }
    fs::create_dir_all(out)?;
    for (file, title, columns) in CHARTS {
        let mut series = Vec::new();
        for (name, rows) in &runs {
            for (col, get) in columns.iter() {
                let points: Vec<(f64, f64)> =
                    rows.iter().filter_map(|r| get(r).map(|v| (r.step as f64, v))).collect();
                if points.is_empty() {
                    continue;
                }
                let label = if columns.len() > 1 { format!("{name} {col}") } else { name.clone() };
                series.push(Series { label, points });
            }
        }
        fs::write(out.join(format!("{file}.svg")), chart(title, &series))?;
    }
    println!("wrote {} charts to {}", CHARTS.len(), out.display());
    Ok(())
}
