//! Static SVG line charts. Output is a pure function of the input, so plot
//! files are byte-identical across runs.

use std::fmt::Write as _;

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum XScale {
    Linear,
    /// Evenly spaced ticks in input order, labelled with the x values.
    Categorical,
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn fmt_num(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 1000.0 || v.abs() < 0.01 {
        format!("{v:.2e}")
    } else {
        let s = format!("{v:.4}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn line_chart(title: &str, x_label: &str, y_label: &str, scale: XScale, series: &[Series]) -> String {
    let mut xs: Vec<f64> = series
        .iter()
        .flat_map(|s| s.points.iter().map(|p| p.0))
        .filter(|v| v.is_finite())
        .collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    let ys: Vec<f64> = series
        .iter()
        .flat_map(|s| s.points.iter().map(|p| p.1))
        .filter(|v| v.is_finite())
        .collect();

    let (x_min, x_max) = match scale {
        XScale::Linear => (
            xs.first().copied().unwrap_or(0.0),
            xs.last().copied().unwrap_or(1.0),
        ),
        XScale::Categorical => (0.0, xs.len().saturating_sub(1) as f64),
    };
    let mut y_min = ys.iter().copied().fold(f64::INFINITY, f64::min);
    let mut y_max = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !y_min.is_finite() {
        (y_min, y_max) = (0.0, 1.0);
    }
    if y_max - y_min < 1e-12 {
        y_min -= 0.5;
        y_max += 0.5;
    }
    let pad = 0.05 * (y_max - y_min);
    let (y_min, y_max) = (y_min - pad, y_max + pad);
    let x_span = if x_max > x_min { x_max - x_min } else { 1.0 };

    let plot_w = W - LEFT - RIGHT;
    let plot_h = H - TOP - BOTTOM;
    let x_pos = |x: f64| -> f64 {
        let u = match scale {
            XScale::Linear => x,
            XScale::Categorical => xs.iter().position(|&v| v == x).unwrap_or(0) as f64,
        };
        LEFT + (u - x_min) / x_span * plot_w
    };
    let y_pos = |y: f64| TOP + (1.0 - (y - y_min) / (y_max - y_min)) * plot_h;

    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#).unwrap();
    writeln!(
        s,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
        LEFT + plot_w / 2.0,
        escape(title)
    )
    .unwrap();
    writeln!(
        s,
        r#"<rect x="{LEFT}" y="{TOP}" width="{plot_w}" height="{plot_h}" fill="none" stroke="black"/>"#
    )
    .unwrap();

    for i in 0..=4 {
        let y = y_min + (y_max - y_min) * i as f64 / 4.0;
        let py = y_pos(y);
        writeln!(
            s,
            r##"<line x1="{LEFT}" y1="{py:.2}" x2="{}" y2="{py:.2}" stroke="#ddd"/><text x="{}" y="{:.2}" text-anchor="end">{}</text>"##,
            LEFT + plot_w,
            LEFT - 6.0,
            py + 4.0,
            fmt_num(y)
        )
        .unwrap();
    }
    let ticks: Vec<f64> = match scale {
        XScale::Categorical => xs.clone(),
        XScale::Linear => (0..=4).map(|i| x_min + x_span * i as f64 / 4.0).collect(),
    };
    for x in ticks {
        let px = x_pos(x);
        writeln!(
            s,
            r#"<text x="{px:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            TOP + plot_h + 18.0,
            fmt_num(x)
        )
        .unwrap();
    }
    writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        LEFT + plot_w / 2.0,
        H - 10.0,
        escape(x_label)
    )
    .unwrap();
    writeln!(
        s,
        r#"<text x="16" y="{0}" text-anchor="middle" transform="rotate(-90 16 {0})">{1}</text>"#,
        TOP + plot_h / 2.0,
        escape(y_label)
    )
    .unwrap();

    for (i, ser) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = ser
            .points
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", x_pos(x), y_pos(y)))
            .collect();
        if pts.len() > 1 {
            writeln!(
                s,
                r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
                pts.join(" ")
            )
            .unwrap();
        }
        for p in &pts {
            let (x, y) = p.split_once(',').unwrap();
            writeln!(s, r#"<circle cx="{x}" cy="{y}" r="3" fill="{color}"/>"#).unwrap();
        }
        let ly = TOP + 10.0 + 18.0 * i as f64;
        writeln!(
            s,
            r#"<line x1="{0}" y1="{ly}" x2="{1}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{2}" y="{3}">{4}</text>"#,
            W - RIGHT + 12.0,
            W - RIGHT + 32.0,
            W - RIGHT + 38.0,
            ly + 4.0,
            escape(&ser.label)
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chart_is_deterministic_and_well_formed() {
        let series = vec![
            Series {
                label: "a<b".into(),
                points: vec![(0.125, 1.0), (0.25, 0.5), (0.5, 0.25)],
            },
            Series {
                label: "flat".into(),
                points: vec![(0.125, 2.0), (0.5, f64::NAN)],
            },
        ];
        let a = line_chart("t", "bpp", "mse", XScale::Categorical, &series);
        let b = line_chart("t", "bpp", "mse", XScale::Categorical, &series);
        assert_eq!(a, b);
        assert!(a.starts_with("<svg") && a.ends_with("</svg>\n"));
        assert!(a.contains("a&lt;b"));
        assert!(!a.contains("NaN"));
        let empty = line_chart("t", "x", "y", XScale::Linear, &[]);
        assert!(!empty.contains("NaN") && !empty.contains("inf"));
    }
}
