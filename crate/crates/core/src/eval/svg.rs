//! Minimal deterministic SVG line plots; no plotting dependency needed for
//! the handful of figures this lab emits.

use std::fmt::Write;

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

pub struct PlotOptions {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub x_log: bool,
    pub width: f64,
    pub height: f64,
}

impl Default for PlotOptions {
    fn default() -> Self {
        PlotOptions {
            title: String::new(),
            x_label: String::new(),
            y_label: String::new(),
            x_log: false,
            width: 640.0,
            height: 480.0,
        }
    }
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f",
];

fn fmt(v: f64) -> String {
    format!("{v:.4}")
}

/// Renders polyline series with axes, ticks and a legend. Output is a pure
/// function of the inputs.
pub fn line_plot(series: &[Series], opts: &PlotOptions) -> String {
    let margin_l = 70.0;
    let margin_r = 20.0;
    let margin_t = 40.0;
    let margin_b = 55.0;
    let plot_w = opts.width - margin_l - margin_r;
    let plot_h = opts.height - margin_t - margin_b;

    let tx = |x: f64| if opts.x_log { x.log10() } else { x };
    let mut xs: Vec<f64> = Vec::new();
    let mut ys: Vec<f64> = Vec::new();
    for s in series {
        for &(x, y) in &s.points {
            xs.push(tx(x));
            ys.push(y);
        }
    }
    let (x_min, x_max) = bounds(&xs);
    let (y_min, y_max) = bounds(&ys);
    let sx = move |x: f64| margin_l + (tx(x) - x_min) / (x_max - x_min) * plot_w;
    let sy = move |y: f64| margin_t + (y_max - y) / (y_max - y_min) * plot_h;

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" viewBox="0 0 {} {}">"#,
        opts.width, opts.height, opts.width, opts.height
    );
    let _ = writeln!(
        out,
        r#"<rect width="{}" height="{}" fill="white"/>"#,
        opts.width, opts.height
    );
    let _ = writeln!(
        out,
        r#"<text x="{}" y="22" text-anchor="middle" font-family="sans-serif" font-size="15">{}</text>"#,
        opts.width / 2.0,
        opts.title
    );

    // Frame and ticks.
    let _ = writeln!(
        out,
        r##"<rect x="{margin_l}" y="{margin_t}" width="{plot_w}" height="{plot_h}" fill="none" stroke="#444"/>"##
    );
    for k in 0..=4 {
        let fx = x_min + (x_max - x_min) * k as f64 / 4.0;
        let px = margin_l + plot_w * k as f64 / 4.0;
        let label = if opts.x_log { 10f64.powf(fx) } else { fx };
        let _ = writeln!(
            out,
            r##"<line x1="{px}" y1="{}" x2="{px}" y2="{}" stroke="#ccc"/>"##,
            margin_t,
            margin_t + plot_h
        );
        let _ = writeln!(
            out,
            r#"<text x="{px}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="11">{}</text>"#,
            margin_t + plot_h + 16.0,
            fmt(label)
        );
        let fy = y_min + (y_max - y_min) * k as f64 / 4.0;
        let py = margin_t + plot_h - plot_h * k as f64 / 4.0;
        let _ = writeln!(
            out,
            r##"<line x1="{margin_l}" y1="{py}" x2="{}" y2="{py}" stroke="#ccc"/>"##,
            margin_l + plot_w
        );
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" text-anchor="end" font-family="sans-serif" font-size="11">{}</text>"#,
            margin_l - 6.0,
            py + 4.0,
            fmt(fy)
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12">{}</text>"#,
        margin_l + plot_w / 2.0,
        opts.height - 12.0,
        opts.x_label
    );
    let _ = writeln!(
        out,
        r#"<text x="16" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12" transform="rotate(-90 16 {})">{}</text>"#,
        margin_t + plot_h / 2.0,
        margin_t + plot_h / 2.0,
        opts.y_label
    );

    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let mut path = String::new();
        let mut sorted = s.points.clone();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
        for (k, &(x, y)) in sorted.iter().enumerate() {
            let _ = write!(
                path,
                "{}{},{} ",
                if k == 0 { "" } else { "" },
                fmt(sx(x)),
                fmt(sy(y))
            );
        }
        let _ = writeln!(
            out,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.8"/>"#,
            path.trim_end()
        );
        for &(x, y) in &sorted {
            let _ = writeln!(
                out,
                r#"<circle cx="{}" cy="{}" r="2.6" fill="{color}"/>"#,
                fmt(sx(x)),
                fmt(sy(y))
            );
        }
        let ly = margin_t + 14.0 + 16.0 * i as f64;
        let _ = writeln!(
            out,
            r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#,
            margin_l + plot_w - 130.0,
            margin_l + plot_w - 110.0
        );
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11">{}</text>"#,
            margin_l + plot_w - 105.0,
            ly + 4.0,
            s.label
        );
    }
    out.push_str("</svg>\n");
    out
}

fn bounds(values: &[f64]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in values {
        if v.is_finite() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        let pad = (hi - lo) * 0.05;
        (lo - pad, hi + pad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plot_is_deterministic_and_well_formed() {
        let series = vec![
            Series {
                label: "a".to_string(),
                points: vec![(0.25, 30.0), (0.5, 33.0), (1.0, 36.0)],
            },
            Series {
                label: "b".to_string(),
                points: vec![(0.3, 31.0), (0.6, 34.0)],
            },
        ];
        let opts = PlotOptions {
            title: "t".to_string(),
            x_log: true,
            ..PlotOptions::default()
        };
        let a = line_plot(&series, &opts);
        let b = line_plot(&series, &opts);
        assert_eq!(a, b);
        assert!(a.starts_with("<svg"));
        assert!(a.trim_end().ends_with("</svg>"));
        assert_eq!(a.matches("<polyline").count(), 2);
    }
}
