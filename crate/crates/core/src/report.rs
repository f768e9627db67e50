//! Hand-written SVG figures.
//!
//! * [`activation_diagram`]: signed per-dimension mean against dimension index.
//! * [`frequency_bars`]: horizontal bars of outlier frequency per dimension.
//! * [`variance_accuracy_scatter`]: per-dimension variance against 1-D
//!   accuracy, with the outlier threshold drawn as a dashed line.

use std::fmt::Write;

use crate::onedim::SweepResult;
use crate::persistence::DimFrequency;

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 400.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 20.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 50.0;

fn escape(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

/// Linear map from a data range onto a pixel range. Degenerate ranges are
/// widened so every point still lands inside the plot.
#[derive(Clone, Copy)]
struct Scale {
    lo: f64,
    hi: f64,
    px_lo: f64,
    px_hi: f64,
}

impl Scale {
    fn new(lo: f64, hi: f64, px_lo: f64, px_hi: f64) -> Self {
        let (lo, hi) = if hi > lo {
            (lo, hi)
        } else {
            let pad = if lo == 0.0 { 1.0 } else { lo.abs() * 0.1 };
            (lo - pad, hi + pad)
        };
        Self { lo, hi, px_lo, px_hi }
    }

    fn map(&self, v: f64) -> f64 {
        self.px_lo + (v - self.lo) / (self.hi - self.lo) * (self.px_hi - self.px_lo)
    }
}

fn plot_box() -> (f64, f64, f64, f64) {
    (MARGIN_LEFT, WIDTH - MARGIN_RIGHT, MARGIN_TOP, HEIGHT - MARGIN_BOTTOM)
}

fn open(svg: &mut String, title: &str) {
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
}

fn axes(svg: &mut String, x_label: &str, y_label: &str) {
    let (x0, x1, y0, y1) = plot_box();
    let _ = writeln!(
        svg,
        r#"<rect x="{x0}" y="{y0}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        x1 - x0,
        y1 - y0
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        (x0 + x1) / 2.0,
        HEIGHT - 12.0,
        escape(x_label)
    );
    let _ = writeln!(
        svg,
        r#"<text x="18" y="{y}" text-anchor="middle" transform="rotate(-90 18 {y})">{}</text>"#,
        escape(y_label),
        y = (y0 + y1) / 2.0
    );
}

fn tick_label(v: f64) -> String {
    if v == 0.0 || (v.abs() >= 0.01 && v.abs() < 10_000.0) {
        format!("{v:.2}")
    } else {
        format!("{v:.2e}")
    }
}

fn y_ticks(svg: &mut String, scale: &Scale) {
    let (x0, _, _, _) = plot_box();
    for i in 0..=4 {
        let v = scale.lo + (scale.hi - scale.lo) * i as f64 / 4.0;
        let y = scale.map(v);
        let _ = writeln!(svg, r#"<line x1="{}" y1="{y:.2}" x2="{x0}" y2="{y:.2}" stroke="black"/>"#, x0 - 4.0);
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{:.2}" text-anchor="end">{}</text>"#,
            x0 - 6.0,
            y + 4.0,
            tick_label(v)
        );
    }
}

fn x_ticks(svg: &mut String, scale: &Scale, count: usize, integer: bool) {
    let (_, _, _, y1) = plot_box();
    for i in 0..=count {
        let v = scale.lo + (scale.hi - scale.lo) * i as f64 / count as f64;
        let x = scale.map(v);
        let label = if integer { format!("{}", v.round() as i64) } else { tick_label(v) };
        let _ = writeln!(svg, r#"<line x1="{x:.2}" y1="{y1}" x2="{x:.2}" y2="{}" stroke="black"/>"#, y1 + 4.0);
        let _ = writeln!(svg, r#"<text x="{x:.2}" y="{}" text-anchor="middle">{label}</text>"#, y1 + 18.0);
    }
}

/// Activation diagram: one stem per dimension from zero to its mean value.
pub fn activation_diagram(means: &[f64], title: &str) -> String {
    let (x0, x1, y0, y1) = plot_box();
    let lo = means.iter().copied().fold(0.0, f64::min);
    let hi = means.iter().copied().fold(0.0, f64::max);
    let ys = Scale::new(lo, hi, y1, y0);
    let xs = Scale::new(0.0, means.len().saturating_sub(1) as f64, x0 + 2.0, x1 - 2.0);

    let mut svg = String::new();
    open(&mut svg, title);
    axes(&mut svg, "dimension", "mean activation");
    y_ticks(&mut svg, &ys);
    x_ticks(&mut svg, &xs, 4.min(means.len().saturating_sub(1)).max(1), true);
    let zero = ys.map(0.0);
    let _ = writeln!(svg, r##"<line x1="{x0}" y1="{zero:.2}" x2="{x1}" y2="{zero:.2}" stroke="#888"/>"##);
    let _ = writeln!(svg, r##"<g stroke="#1f77b4" stroke-width="1">"##);
    for (i, &m) in means.iter().enumerate() {
        let x = xs.map(i as f64);
        let _ = writeln!(svg, r#"<line x1="{x:.2}" y1="{zero:.2}" x2="{x:.2}" y2="{:.2}"><title>dim {i}: {m}</title></line>"#, ys.map(m));
    }
    svg.push_str("</g>\n</svg>\n");
    svg
}

/// Horizontal bars of outlier frequency, one row per dimension, in the given
/// order (most frequent first).
pub fn frequency_bars(entries: &[DimFrequency], title: &str) -> String {
    let (x0, x1, y0, y1) = plot_box();
    let xs = Scale::new(0.0, 1.0, x0, x1);
    let rows = entries.len().max(1) as f64;
    let band = (y1 - y0) / rows;

    let mut svg = String::new();
    open(&mut svg, title);
    axes(&mut svg, "frequency", "dimension");
    x_ticks(&mut svg, &xs, 4, false);
    let _ = writeln!(svg, r##"<g fill="#d62728">"##);
    for (row, e) in entries.iter().enumerate() {
        let y = y0 + band * row as f64;
        let _ = writeln!(
            svg,
            r#"<rect x="{x0}" y="{:.2}" width="{:.2}" height="{:.2}"><title>dim {}: {} runs ({:.3})</title></rect>"#,
            y + band * 0.15,
            xs.map(e.frequency) - x0,
            band * 0.7,
            e.dim,
            e.count,
            e.frequency
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{:.2}" text-anchor="end" fill="black">{}</text>"#,
            x0 - 6.0,
            y + band / 2.0 + 4.0,
            e.dim
        );
    }
    svg.push_str("</g>\n</svg>\n");
    svg
}

/// Variance against 1-D validation accuracy for every swept dimension. The
/// best dimension is highlighted; the dashed line marks 5x mean variance.
pub fn variance_accuracy_scatter(sweep: &SweepResult, title: &str) -> String {
    let (x0, x1, y0, y1) = plot_box();
    let max_var = sweep
        .per_dim
        .iter()
        .map(|r| r.variance)
        .fold(sweep.outlier_threshold, f64::max);
    let xs = Scale::new(0.0, max_var * 1.05, x0, x1);
    let acc_lo = sweep.per_dim.iter().map(|r| r.val_accuracy).fold(1.0, f64::min);
    let ys = Scale::new(acc_lo.min(0.5), 1.0, y1, y0);

    let mut svg = String::new();
    open(&mut svg, title);
    axes(&mut svg, "variance", "1-D validation accuracy");
    x_ticks(&mut svg, &xs, 4, false);
    y_ticks(&mut svg, &ys);

    let tx = xs.map(sweep.outlier_threshold);
    let _ = writeln!(
        svg,
        r##"<line x1="{tx:.2}" y1="{y0}" x2="{tx:.2}" y2="{y1}" stroke="#444" stroke-dasharray="6,4"><title>outlier threshold {}</title></line>"##,
        sweep.outlier_threshold
    );
    let _ = writeln!(svg, r##"<g fill="#1f77b4" fill-opacity="0.7">"##);
    for r in &sweep.per_dim {
        let fill = if r.dim == sweep.best_dim { r##" fill="#d62728""## } else { "" };
        let _ = writeln!(
            svg,
            r#"<circle cx="{:.2}" cy="{:.2}" r="3"{fill}><title>dim {}: var {} acc {}</title></circle>"#,
            xs.map(r.variance),
            ys.map(r.val_accuracy),
            r.dim,
            r.variance,
            r.val_accuracy
        );
    }
    svg.push_str("</g>\n</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::onedim::SweepRecord;

    fn parses(svg: &str) -> roxmltree::Document<'_> {
        roxmltree::Document::parse(svg).expect("well-formed XML")
    }

    #[test]
    fn activation_diagram_has_one_stem_per_dim() {
        let svg = activation_diagram(&[0.1, -3.0, 0.2, 12.5], "gpt2 <sst2> & co");
        let doc = parses(&svg);
        let stems = doc.descendants().filter(|n| n.has_tag_name("line") && n.children().any(|c| c.has_tag_name("title"))).count();
        assert_eq!(stems, 4);
        assert!(svg.contains("gpt2 &lt;sst2&gt; &amp; co"));
    }

    #[test]
    fn degenerate_inputs_still_render() {
        parses(&activation_diagram(&[0.0], "flat"));
        parses(&activation_diagram(&[], "empty"));
        parses(&frequency_bars(&[], "none"));
    }

    #[test]
    fn bars_follow_entry_order() {
        let entries = [
            DimFrequency { dim: 138, count: 20, frequency: 1.0 },
            DimFrequency { dim: 447, count: 10, frequency: 0.5 },
        ];
        let svg = frequency_bars(&entries, "persistence");
        let doc = parses(&svg);
        let widths: Vec<f64> = doc
            .descendants()
            .filter(|n| n.has_tag_name("rect") && n.children().any(|c| c.has_tag_name("title")))
            .map(|n| n.attribute("width").unwrap().parse().unwrap())
            .collect();
        assert_eq!(widths.len(), 2);
        assert!((widths[0] - 2.0 * widths[1]).abs() < 0.02);
    }

    #[test]
    fn scatter_has_dashed_threshold() {
        let sweep = SweepResult {
            per_dim: (0..3)
                .map(|d| SweepRecord {
                    dim: d,
                    variance: d as f64,
                    variance_percentile: 0,
                    val_accuracy: 0.5 + 0.1 * d as f64,
                    train_accuracy: 0.5,
                })
                .collect(),
            best_dim: 2,
            correlation_pearson: Some(1.0),
            correlation_spearman: Some(1.0),
            outlier_threshold: 5.0,
        };
        let svg = variance_accuracy_scatter(&sweep, "fig");
        let doc = parses(&svg);
        assert_eq!(doc.descendants().filter(|n| n.has_tag_name("circle")).count(), 3);
        assert!(doc.descendants().any(|n| n.attribute("stroke-dasharray").is_some()));
    }
}
