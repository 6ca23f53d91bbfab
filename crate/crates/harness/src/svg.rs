//! Minimal deterministic SVG line plot for learning curves.

use firm_core::metrics::LearningCurve;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 48.0;

/// Render the AUROC-vs-epoch curve as a standalone SVG document.
pub fn learning_curve_svg(curve: &LearningCurve, title: &str) -> String {
    let (x0, x1) = (
        *curve.epochs.first().unwrap_or(&0) as f64,
        *curve.epochs.last().unwrap_or(&1) as f64,
    );
    let span = (x1 - x0).max(1.0);
    let to_x = |e: f64| MARGIN + (e - x0) / span * (WIDTH - 2.0 * MARGIN);
    let to_y = |a: f64| HEIGHT - MARGIN - a * (HEIGHT - 2.0 * MARGIN);
    let mut points = String::new();
    for (e, a) in curve.epochs.iter().zip(curve.aurocs.iter()) {
        points.push_str(&format!("{:.2},{:.2} ", to_x(*e as f64), to_y(*a)));
    }
    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    svg.push_str(&format!(
        "<text x=\"{:.1}\" y=\"24\" font-family=\"monospace\" font-size=\"14\">{}</text>\n",
        MARGIN, title
    ));
    // axes
    svg.push_str(&format!(
        "<line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n",
        m = MARGIN,
        b = HEIGHT - MARGIN,
        r = WIDTH - MARGIN
    ));
    svg.push_str(&format!(
        "<line x1=\"{m}\" y1=\"{t}\" x2=\"{m}\" y2=\"{b}\" stroke=\"black\"/>\n",
        m = MARGIN,
        t = MARGIN,
        b = HEIGHT - MARGIN
    ));
    for frac in [0.0, 0.25, 0.5, 0.75, 1.0] {
        svg.push_str(&format!(
            "<text x=\"6\" y=\"{:.1}\" font-family=\"monospace\" font-size=\"11\">{:.2}</text>\n",
            to_y(frac) + 4.0,
            frac
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"monospace\" font-size=\"11\">epoch {x0:.0}..{x1:.0}</text>\n",
        WIDTH / 2.0 - 40.0,
        HEIGHT - 12.0
    ));
    svg.push_str(&format!(
        "<polyline fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"1.5\" points=\"{}\"/>\n",
        points.trim_end()
    ));
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn svg_is_deterministic_and_well_formed() {
        let curve = LearningCurve::new(vec![0, 10, 20], vec![0.5, 0.8, 0.92]).unwrap();
        let a = learning_curve_svg(&curve, "toy");
        let b = learning_curve_svg(&curve, "toy");
        assert_eq!(a, b);
        assert!(a.starts_with("<svg"));
        assert!(a.contains("polyline"));
        assert!(a.trim_end().ends_with("</svg>"));
    }
}
