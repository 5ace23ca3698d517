use std::fmt::Write as _;
use std::path::Path;

use super::{RocCurve, ScoredSample};
use crate::error::{Error, Result};

/// Writes `id,score,label[,einstein_radius,flux_ratio]`. The metadata
/// columns appear when any sample carries metadata.
pub fn write_scores_csv(path: impl AsRef<Path>, samples: &[ScoredSample]) -> Result<()> {
    let with_meta = samples.iter().any(|s| s.einstein_radius.is_some() || s.flux_ratio.is_some());
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec!["id", "score", "label"];
    if with_meta {
        header.extend(["einstein_radius", "flux_ratio"]);
    }
    w.write_record(&header).map_err(csv_err)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for s in samples {
        let mut row = vec![s.id.clone(), s.score.to_string(), s.label.to_string()];
        if with_meta {
            row.push(opt(s.einstein_radius));
            row.push(opt(s.flux_ratio));
        }
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_scores_csv(path: impl AsRef<Path>) -> Result<Vec<ScoredSample>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize::<ScoredSample>().map(|row| row.map_err(csv_err)).collect()
}

/// Writes the ROC table `threshold,fpr,tpr`; the origin's threshold is `inf`.
pub fn write_roc_csv(path: impl AsRef<Path>, roc: &RocCurve) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["threshold", "fpr", "tpr"]).map_err(csv_err)?;
    for p in &roc.points {
        let t = p.threshold.map_or_else(|| "inf".to_owned(), |t| t.to_string());
        w.write_record([t, p.fpr.to_string(), p.tpr.to_string()]).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

/// Plots TPR against FPR with the chance diagonal, as a standalone SVG.
pub fn render_roc_svg(roc: &RocCurve, title: &str) -> String {
    const SIZE: f64 = 400.0;
    const PAD: f64 = 50.0;
    let x = |fpr: f64| PAD + fpr * SIZE;
    let y = |tpr: f64| PAD + (1.0 - tpr) * SIZE;
    let total = SIZE + 2.0 * PAD;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{total}" height="{total}" viewBox="0 0 {total} {total}">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<rect x="{PAD}" y="{PAD}" width="{SIZE}" height="{SIZE}" fill="none" stroke="black"/>"#
    );
    for i in 0..=4 {
        let v = i as f64 / 4.0;
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="middle">{v:.2}</text>"#,
            x(v),
            PAD + SIZE + 16.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="end">{v:.2}</text>"#,
            PAD - 6.0,
            y(v) + 4.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="gray" stroke-dasharray="4 4"/>"#,
        x(0.0),
        y(0.0),
        x(1.0),
        y(1.0)
    );
    let pts: Vec<String> = roc.points.iter().map(|p| format!("{:.2},{:.2}", x(p.fpr), y(p.tpr))).collect();
    let _ = writeln!(svg, r#"<polyline points="{}" fill="none" stroke="steelblue" stroke-width="2"/>"#, pts.join(" "));
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" font-size="14" text-anchor="middle">{} (AUROC = {:.4})</text>"#,
        total / 2.0,
        PAD - 18.0,
        escape(title),
        roc.auroc
    );
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" font-size="12" text-anchor="middle">False positive rate</text>"#,
        total / 2.0,
        total - 10.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="14" y="{:.1}" font-size="12" text-anchor="middle" transform="rotate(-90 14 {:.1})">True positive rate</text>"#,
        total / 2.0,
        total / 2.0
    );
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
