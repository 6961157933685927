//! Minimal SVG line plots for exported rollout quantities. One fixed
//! viewport, polylines in data coordinates mapped through a padded bounding
//! box, dashed horizontal guides with value labels.

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 16.0;
const TOP: f64 = 36.0;
const BOTTOM: f64 = 44.0;

const PALETTE: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

pub struct Series {
    pub label: String,
    pub points: Vec<[f64; 2]>,
}

fn bounds(series: &[Series], hlines: &[f64]) -> ([f64; 2], [f64; 2]) {
    let mut x = [f64::INFINITY, f64::NEG_INFINITY];
    let mut y = [f64::INFINITY, f64::NEG_INFINITY];
    for s in series {
        for p in &s.points {
            x[0] = x[0].min(p[0]);
            x[1] = x[1].max(p[0]);
            y[0] = y[0].min(p[1]);
            y[1] = y[1].max(p[1]);
        }
    }
    for &h in hlines {
        y[0] = y[0].min(h);
        y[1] = y[1].max(h);
    }
    // Degenerate ranges still need a drawable box.
    if !(x[0] < x[1]) {
        x = [x[0] - 1.0, x[1] + 1.0];
    }
    if !(y[0] < y[1]) {
        y = [y[0] - 1.0, y[1] + 1.0];
    }
    let pad = |b: [f64; 2]| {
        let m = 0.05 * (b[1] - b[0]);
        [b[0] - m, b[1] + m]
    };
    (pad(x), pad(y))
}

/// Renders the series into a standalone SVG document.
pub fn line_plot(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
    hlines: &[f64],
) -> String {
    let (xb, yb) = bounds(series, hlines);
    let px = |x: f64| LEFT + (x - xb[0]) / (xb[1] - xb[0]) * (WIDTH - LEFT - RIGHT);
    let py = |y: f64| HEIGHT - BOTTOM - (y - yb[0]) / (yb[1] - yb[0]) * (HEIGHT - TOP - BOTTOM);

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    ));
    svg.push_str(&format!(
        "<rect x=\"{LEFT}\" y=\"{TOP}\" width=\"{}\" height=\"{}\" fill=\"white\" stroke=\"#333\"/>\n",
        WIDTH - LEFT - RIGHT,
        HEIGHT - TOP - BOTTOM
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
        0.5 * WIDTH,
        title
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
        0.5 * WIDTH,
        HEIGHT - 10.0,
        x_label
    ));
    svg.push_str(&format!(
        "<text x=\"16\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{}</text>\n",
        0.5 * HEIGHT,
        0.5 * HEIGHT,
        y_label
    ));
    // Corner tick labels carry the data range.
    svg.push_str(&format!(
        "<text x=\"{LEFT}\" y=\"{}\" text-anchor=\"middle\">{:.3}</text>\n",
        HEIGHT - BOTTOM + 16.0,
        xb[0]
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{:.3}</text>\n",
        WIDTH - RIGHT,
        HEIGHT - BOTTOM + 16.0,
        xb[1]
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{:.3}</text>\n",
        LEFT - 6.0,
        HEIGHT - BOTTOM + 4.0,
        yb[0]
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{:.3}</text>\n",
        LEFT - 6.0,
        TOP + 4.0,
        yb[1]
    ));

    for &h in hlines {
        let y = py(h);
        svg.push_str(&format!(
            "<line x1=\"{LEFT}\" y1=\"{y:.2}\" x2=\"{}\" y2=\"{y:.2}\" stroke=\"#888\" \
             stroke-dasharray=\"6 4\"/>\n",
            WIDTH - RIGHT
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{:.2}\" text-anchor=\"end\" fill=\"#555\">{h:.4}</text>\n",
            WIDTH - RIGHT - 4.0,
            y - 4.0
        ));
    }

    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> =
            s.points.iter().map(|p| format!("{:.2},{:.2}", px(p[0]), py(p[1]))).collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            pts.join(" ")
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" fill=\"{color}\">{}</text>\n",
            LEFT + 8.0,
            TOP + 16.0 + 16.0 * i as f64,
            s.label
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plot_contains_every_series_and_guide() {
        let series = vec![
            Series { label: "a".into(), points: vec![[0.0, 0.0], [1.0, 2.0]] },
            Series { label: "b".into(), points: vec![[0.0, 1.0], [1.0, -1.0]] },
        ];
        let svg = line_plot("title", "t", "y", &series, &[0.5]);
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert_eq!(svg.matches("stroke-dasharray").count(), 1);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn degenerate_ranges_still_produce_finite_coordinates() {
        let series =
            vec![Series { label: "flat".into(), points: vec![[0.0, 3.0], [0.0, 3.0]] }];
        let svg = line_plot("t", "x", "y", &series, &[]);
        assert!(!svg.contains("NaN") && !svg.contains("inf"));
    }
}
