//! Minimal SVG line-plot emitter: log-scale convergence panels without a
//! plotting dependency.

/// One panel: points (x, y) drawn with a log10 y-axis.
pub struct Panel {
    pub title: String,
    pub x_label: String,
    pub points: Vec<(f64, f64)>,
}

const PANEL_W: f64 = 460.0;
const PANEL_H: f64 = 340.0;
const MARGIN_L: f64 = 64.0;
const MARGIN_B: f64 = 46.0;
const MARGIN_T: f64 = 28.0;
const MARGIN_R: f64 = 16.0;

/// Render panels side by side. Non-positive y-values are clipped to half the
/// smallest positive value so saturated runs stay visible on the log axis.
pub fn render(panels: &[Panel], y_label: &str) -> String {
    let total_w = PANEL_W * panels.len() as f64;
    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{total_w}\" height=\"{PANEL_H}\" \
         viewBox=\"0 0 {total_w} {PANEL_H}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    ));
    svg.push_str(&format!(
        "<rect width=\"{total_w}\" height=\"{PANEL_H}\" fill=\"white\"/>\n"
    ));
    for (idx, panel) in panels.iter().enumerate() {
        svg.push_str(&render_panel(panel, idx as f64 * PANEL_W, y_label));
    }
    svg.push_str("</svg>\n");
    svg
}

fn render_panel(panel: &Panel, x_off: f64, y_label: &str) -> String {
    let mut out = String::new();
    let floor = panel
        .points
        .iter()
        .map(|p| p.1)
        .filter(|v| *v > 0.0)
        .fold(f64::INFINITY, f64::min);
    let floor = if floor.is_finite() { floor * 0.5 } else { 1e-12 };
    let pts: Vec<(f64, f64)> = panel
        .points
        .iter()
        .map(|&(x, y)| (x, y.max(floor).log10()))
        .collect();
    if pts.is_empty() {
        return out;
    }
    let (x_min, x_max) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |a, p| {
        (a.0.min(p.0), a.1.max(p.0))
    });
    let (y_min, y_max) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |a, p| {
        (a.0.min(p.1), a.1.max(p.1))
    });
    let x_span = (x_max - x_min).max(1e-9);
    let y_lo = y_min.floor();
    let y_hi = y_max.ceil().max(y_lo + 1.0);

    let plot_w = PANEL_W - MARGIN_L - MARGIN_R;
    let plot_h = PANEL_H - MARGIN_T - MARGIN_B;
    let to_px = |x: f64, ylog: f64| {
        (
            x_off + MARGIN_L + (x - x_min) / x_span * plot_w,
            MARGIN_T + (y_hi - ylog) / (y_hi - y_lo) * plot_h,
        )
    };

    // Frame and title.
    out.push_str(&format!(
        "<rect x=\"{:.1}\" y=\"{MARGIN_T}\" width=\"{plot_w:.1}\" height=\"{plot_h:.1}\" \
         fill=\"none\" stroke=\"#444\"/>\n",
        x_off + MARGIN_L
    ));
    out.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"13\">{}</text>\n",
        x_off + MARGIN_L + plot_w / 2.0,
        MARGIN_T - 10.0,
        xml_escape(&panel.title)
    ));

    // Log-decade gridlines and y tick labels.
    let mut dec = y_lo as i64;
    while dec <= y_hi as i64 {
        let (_, py) = to_px(x_min, dec as f64);
        out.push_str(&format!(
            "<line x1=\"{:.1}\" y1=\"{py:.1}\" x2=\"{:.1}\" y2=\"{py:.1}\" stroke=\"#ddd\"/>\n",
            x_off + MARGIN_L,
            x_off + MARGIN_L + plot_w
        ));
        out.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">1e{dec}</text>\n",
            x_off + MARGIN_L - 6.0,
            py + 4.0
        ));
        dec += 1;
    }

    // A few x ticks.
    for t in 0..=4 {
        let x = x_min + x_span * t as f64 / 4.0;
        let (px, _) = to_px(x, y_lo);
        out.push_str(&format!(
            "<line x1=\"{px:.1}\" y1=\"{:.1}\" x2=\"{px:.1}\" y2=\"{:.1}\" stroke=\"#444\"/>\n",
            MARGIN_T + plot_h,
            MARGIN_T + plot_h + 4.0
        ));
        out.push_str(&format!(
            "<text x=\"{px:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n",
            MARGIN_T + plot_h + 16.0,
            format_tick(x)
        ));
    }
    out.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n",
        x_off + MARGIN_L + plot_w / 2.0,
        MARGIN_T + plot_h + 34.0,
        xml_escape(&panel.x_label)
    ));
    out.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" \
         transform=\"rotate(-90 {:.1} {:.1})\">{}</text>\n",
        x_off + 14.0,
        MARGIN_T + plot_h / 2.0,
        x_off + 14.0,
        MARGIN_T + plot_h / 2.0,
        xml_escape(y_label)
    ));

    // The trace itself.
    let path: Vec<String> = pts
        .iter()
        .map(|&(x, ylog)| {
            let (px, py) = to_px(x, ylog);
            format!("{px:.2},{py:.2}")
        })
        .collect();
    out.push_str(&format!(
        "<polyline points=\"{}\" fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"1.5\"/>\n",
        path.join(" ")
    ));
    out
}

fn format_tick(v: f64) -> String {
    if v == 0.0 {
        "0".to_string()
    } else if v.abs() >= 1000.0 || v.fract() == 0.0 {
        format!("{:.0}", v)
    } else {
        format!("{:.1}", v)
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
