//! Per-epoch summaries of a run's gradient and gate logs.
//!
//! `report.csv` holds one row per probed epoch. The optional SVG output
//! is a set of bare polyline charts, one per series.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trainer::metrics::{read_csv, write_csv, GateRecord, GradRow, GLOBAL_ROW};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub epoch: usize,
    pub probes: usize,
    pub conflict_fraction: f64,
    /// Mean of the defined global cosines; empty if none was defined.
    pub global_cos: Option<f64>,
    pub mean_gate_target: f64,
    /// Element-weighted gate statistics; empty when no fusion step ran.
    pub mean_g_fbank: Option<f64>,
    pub frac_g_fbank_above_1: Option<f64>,
}

pub const REPORT_HEADER: &[&str] = &[
    "epoch",
    "probes",
    "conflict_fraction",
    "global_cos",
    "mean_gate_target",
    "mean_g_fbank",
    "frac_g_fbank_above_1",
];

pub fn build_report(grads: &[GradRow], gates: &[GateRecord]) -> Vec<ReportRow> {
    #[derive(Default)]
    struct Acc {
        probes: usize,
        conflict: f64,
        cos_sum: f64,
        cos_n: usize,
        target: f64,
        g_sum: f64,
        above: f64,
        n: usize,
    }
    let mut by_epoch: BTreeMap<usize, Acc> = BTreeMap::new();
    for r in grads.iter().filter(|r| r.layer == GLOBAL_ROW) {
        let a = by_epoch.entry(r.epoch).or_default();
        a.probes += 1;
        a.conflict += r.conflict_fraction;
        a.target += r.gate_target;
        if let Some(c) = r.global_cos {
            a.cos_sum += c;
            a.cos_n += 1;
        }
    }
    for g in gates {
        if let Some(a) = by_epoch.get_mut(&g.epoch) {
            let n = g.n_elements as f64;
            a.g_sum += g.mean_g_fbank * n;
            a.above += g.frac_g_fbank_above_1 * n;
            a.n += g.n_elements;
        }
    }
    by_epoch
        .into_iter()
        .map(|(epoch, a)| {
            let p = a.probes as f64;
            let n = a.n as f64;
            ReportRow {
                epoch,
                probes: a.probes,
                conflict_fraction: a.conflict / p,
                global_cos: (a.cos_n > 0).then(|| a.cos_sum / a.cos_n as f64),
                mean_gate_target: a.target / p,
                mean_g_fbank: (a.n > 0).then(|| a.g_sum / n),
                frac_g_fbank_above_1: (a.n > 0).then(|| (a.above / n).clamp(0.0, 1.0)),
            }
        })
        .collect()
}

/// A minimal line chart: one polyline, axis box, title and axis ranges.
pub fn svg_line_plot(title: &str, points: &[(f64, f64)]) -> String {
    const W: f64 = 480.0;
    const H: f64 = 300.0;
    const PAD: f64 = 40.0;
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in points {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if points.is_empty() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let sx = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(
        s,
        r#"<rect x="{PAD}" y="{PAD}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        W - 2.0 * PAD,
        H - 2.0 * PAD
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        W / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<text x="{PAD}" y="{}" font-size="10">{x0}</text><text x="{}" y="{}" font-size="10" text-anchor="end">{x1}</text>"#,
        H - PAD + 14.0,
        W - PAD,
        H - PAD + 14.0
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-size="10" text-anchor="end">{y0:.3}</text><text x="{}" y="{}" font-size="10" text-anchor="end">{y1:.3}</text>"#,
        PAD - 4.0,
        H - PAD,
        PAD - 4.0,
        PAD + 4.0
    );
    let pts: Vec<String> = points
        .iter()
        .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
        .collect();
    let _ = writeln!(
        s,
        r#"<polyline fill="none" stroke="steelblue" stroke-width="2" points="{}"/>"#,
        pts.join(" ")
    );
    s.push_str("</svg>\n");
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Reads `grads.csv` and `gates.csv` from `run`, writes `report.csv` and,
/// with `svg`, one chart per series. Returns the paths written.
pub fn write_report(run: &Path, svg: bool) -> Result<(Vec<ReportRow>, Vec<PathBuf>)> {
    for name in ["grads.csv", "gates.csv"] {
        let p = run.join(name);
        if !p.is_file() {
            return Err(Error::io(
                &p,
                std::io::Error::new(std::io::ErrorKind::NotFound, "missing run log"),
            ));
        }
    }
    let grads: Vec<GradRow> = read_csv(&run.join("grads.csv"))?;
    let gates: Vec<GateRecord> = read_csv(&run.join("gates.csv"))?;
    let rows = build_report(&grads, &gates);
    let mut written = vec![run.join("report.csv")];
    write_csv(&written[0], &rows, REPORT_HEADER)?;
    if svg {
        type Series = fn(&ReportRow) -> Option<f64>;
        let series: [(&str, &str, Series); 4] = [
            ("conflict_fraction", "Conflict fraction", |r| {
                Some(r.conflict_fraction)
            }),
            ("global_cos", "Global gradient cosine", |r| r.global_cos),
            ("mean_g_fbank", "Mean g_fbank", |r| r.mean_g_fbank),
            ("frac_g_fbank_above_1", "Fraction of g_fbank above 1", |r| {
                r.frac_g_fbank_above_1
            }),
        ];
        for (file, title, get) in series {
            let pts: Vec<(f64, f64)> = rows
                .iter()
                .filter_map(|r| get(r).map(|y| (r.epoch as f64, y)))
                .collect();
            let path = run.join(format!("report_{file}.svg"));
            fs::write(&path, svg_line_plot(title, &pts)).map_err(|e| Error::io(&path, e))?;
            written.push(path);
        }
    }
    Ok((rows, written))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn global(epoch: usize, step: usize, cos: Option<f64>, conflict: f64) -> GradRow {
        GradRow {
            step,
            epoch,
            layer: GLOBAL_ROW.into(),
            cos_theta: cos,
            norm_fbank: 1.0,
            norm_unit: 1.0,
            global_cos: cos,
            conflict_fraction: conflict,
            gate_target: 1.0,
        }
    }

    fn gate(epoch: usize, g: f64, above: f64, n: usize) -> GateRecord {
        GateRecord {
            step: 0,
            epoch,
            mean_g_fbank: g,
            mean_g_unit: 1.0,
            frac_g_fbank_above_1: above,
            n_elements: n,
        }
    }

    #[test]
    fn one_row_per_probed_epoch() {
        let mut grads = vec![global(1, 1, Some(0.5), 0.0), global(1, 2, Some(-0.5), 0.5)];
        grads.push(GradRow {
            layer: "dec.0.w".into(),
            ..global(2, 3, None, 1.0)
        });
        grads.push(global(2, 3, None, 1.0));
        let gates = vec![
            gate(1, 1.2, 1.0, 10),
            gate(1, 0.8, 0.0, 30),
            gate(3, 9.0, 1.0, 5),
        ];
        let rows = build_report(&grads, &gates);
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].probes, 2);
        assert_eq!(rows[0].conflict_fraction, 0.25);
        assert_eq!(rows[0].global_cos, Some(0.0));
        assert!((rows[0].mean_g_fbank.unwrap() - 0.9).abs() < 1e-15);
        assert_eq!(rows[0].frac_g_fbank_above_1, Some(0.25));
        assert_eq!(rows[1].global_cos, None);
        assert_eq!(rows[1].mean_g_fbank, None);
    }

    #[test]
    fn all_gates_above_one() {
        let grads = vec![global(1, 1, Some(1.0), 0.0)];
        let gates = vec![gate(1, 1.2, 1.0, 7), gate(1, 1.2, 1.0, 3)];
        assert_eq!(
            build_report(&grads, &gates)[0].frac_g_fbank_above_1,
            Some(1.0)
        );
    }

    #[test]
    fn svg_is_well_formed() {
        let s = svg_line_plot("a < b", &[(1.0, 0.0), (2.0, 0.5), (3.0, 0.25)]);
        assert!(s.starts_with("<svg"));
        assert!(s.trim_end().ends_with("</svg>"));
        assert!(s.contains("a &lt; b"));
        assert_eq!(s.matches("<polyline").count(), 1);
        assert!(svg_line_plot("empty", &[]).contains("<polyline"));
    }

    #[test]
    fn missing_inputs_are_io_errors() {
        let dir = tempfile::tempdir().unwrap();
        let err = write_report(dir.path(), false).unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }
}
