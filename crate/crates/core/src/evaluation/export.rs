use std::fmt::Write as _;

use super::kappa::StagingConfusion;
use super::metrics::Metric;
use super::EvalReport;
use crate::error::{Error, Result};

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "N/A".to_string(), |v| format!("{:.2}", v * 100.0))
}

fn metric_cells(m: &Metric) -> [String; 3] {
    [
        pct(m.value),
        pct(m.ci.map(|c| c[0])),
        pct(m.ci.map(|c| c[1])),
    ]
}

/// Per-region table in percent, `N/A` for undefined values.
pub fn region_table_csv(report: &EvalReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "region",
        "accuracy",
        "accuracy_ci_low",
        "accuracy_ci_high",
        "sensitivity",
        "sensitivity_ci_low",
        "sensitivity_ci_high",
        "specificity",
        "specificity_ci_low",
        "specificity_ci_high",
        "false_positive",
        "false_negative",
        "positive_cases",
        "f1",
        "f1_ci_low",
        "f1_ci_high",
        "f_accuracy_recall",
    ])?;
    for row in &report.regions {
        let m = &row.evaluation.metrics;
        let c = &row.evaluation.counts;
        let mut rec = vec![row.label.clone()];
        rec.extend(metric_cells(&m.accuracy));
        rec.extend(metric_cells(&m.recall));
        rec.extend(metric_cells(&m.specificity));
        rec.push(c.fp.to_string());
        rec.push(c.fn_.to_string());
        rec.push(row.positive_cases.to_string());
        rec.extend(metric_cells(&m.f1));
        rec.push(pct(m.f_accuracy_recall.value));
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Reference(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Plain-text stage confusion matrix; rows are reference, columns predicted.
pub fn confusion_text(c: &StagingConfusion) -> String {
    let names: Vec<String> = c.stages.iter().map(|s| s.to_string()).collect();
    let width = names
        .iter()
        .map(String::len)
        .chain(c.matrix.iter().flatten().map(|v| v.to_string().len()))
        .max()
        .unwrap_or(1)
        .max(3);
    let mut out = String::new();
    let _ = write!(out, "{:>width$}", "ref\\pred");
    for n in &names {
        let _ = write!(out, " {n:>width$}");
    }
    out.push('\n');
    for (n, row) in names.iter().zip(&c.matrix) {
        let _ = write!(out, "{n:>w$}", w = width.max(8));
        for v in row {
            let _ = write!(out, " {v:>width$}");
        }
        out.push('\n');
    }
    out
}

/// Heatmap of the stage confusion matrix as a standalone SVG document.
pub fn confusion_svg(c: &StagingConfusion) -> String {
    let k = c.stages.len();
    let cell = 60;
    let margin = 90;
    let size = margin + k * cell + 20;
    let max = c.matrix.iter().flatten().copied().max().unwrap_or(0).max(1) as f64;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" font-family="sans-serif" font-size="14">"#
    );
    let _ = writeln!(s, r#"<rect width="{size}" height="{size}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" text-anchor="middle">Predicted</text>"#,
        margin + k * cell / 2
    );
    let _ = writeln!(
        s,
        r#"<text x="20" y="{0}" text-anchor="middle" transform="rotate(-90 20 {0})">Reference</text>"#,
        margin + k * cell / 2
    );
    for (i, st) in c.stages.iter().enumerate() {
        let label = if *st == crate::staging::Stage::NoInvolvement { "None".to_string() } else { st.to_string() };
        let mid = margin + i * cell + cell / 2;
        let _ = writeln!(s, r#"<text x="{mid}" y="{}" text-anchor="middle">{label}</text>"#, margin - 10);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{label}</text>"#, margin - 10, mid + 5);
    }
    for (i, row) in c.matrix.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            let t = v as f64 / max;
            let shade = (255.0 - 200.0 * t).round() as u8;
            let (x, y) = (margin + j * cell, margin + i * cell);
            let _ = writeln!(
                s,
                r##"<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="rgb({shade},{shade},255)" stroke="#444"/>"##
            );
            let fill = if t > 0.6 { "white" } else { "black" };
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="middle" fill="{fill}">{v}</text>"#,
                x + cell / 2,
                y + cell / 2 + 5
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

fn with_ci(m: &Metric) -> String {
    match (m.value, m.ci) {
        (Some(_), Some([lo, hi])) => format!("{} ({} - {})", pct(m.value), pct(Some(lo)), pct(Some(hi))),
        _ => pct(m.value),
    }
}

/// Short human-readable summary of the headline numbers.
pub fn summary_text(r: &EvalReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "patients: {}", r.patients);
    let p = &r.pooled.metrics;
    let _ = writeln!(
        s,
        "regions: accuracy {}  sensitivity {}  specificity {}",
        with_ci(&p.accuracy),
        with_ci(&p.recall),
        with_ci(&p.specificity)
    );
    let _ = writeln!(s, "staging: accuracy {}", with_ci(&r.staging.accuracy));
    let kappa = r.staging.weighted_kappa.map_or("undefined".to_string(), |k| format!("{k:.4}"));
    let _ = writeln!(s, "staging: weighted kappa {kappa}");
    let t = &r.therapeutic;
    let m = &t.evaluation.metrics;
    let _ = writeln!(
        s,
        "limited/advanced: accuracy {}  sensitivity {}  specificity {}",
        with_ci(&m.accuracy),
        with_ci(&m.recall),
        with_ci(&m.specificity)
    );
    let _ = writeln!(
        s,
        "limited/advanced: f1 {}  macro-f1 {}  f(accuracy, sensitivity) {}",
        pct(t.positive_f1),
        pct(t.macro_f1),
        pct(t.f_accuracy_recall)
    );
    for w in &r.warnings {
        let _ = writeln!(s, "warning: {w}");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::staging::Stage::*;

    #[test]
    fn text_and_svg_render_all_cells() {
        let c = StagingConfusion::from_pairs(&[(I, I), (II, III), (IV, IV), (IV, IV)]);
        let t = confusion_text(&c);
        assert_eq!(t.lines().count(), 5);
        assert!(t.lines().last().unwrap().trim_end().ends_with('2'));
        let svg = confusion_svg(&c);
        assert!(svg.starts_with("<svg"));
        assert_eq!(svg.matches("<rect").count(), 1 + 16);
    }

    #[test]
    fn percent_cells() {
        assert_eq!(pct(None), "N/A");
        assert_eq!(pct(Some(0.85074626)), "85.07");
    }
}
