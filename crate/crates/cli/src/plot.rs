//! Minimal grouped bar charts as standalone SVG. Output depends only on the
//! inputs, so reruns of a study produce identical files.

use std::fmt::Write;

pub struct Series<'a> {
    pub name: &'a str,
    pub color: &'a str,
    pub values: Vec<Option<f64>>,
}

pub struct Chart<'a> {
    pub title: &'a str,
    pub y_label: &'a str,
    pub categories: Vec<String>,
    pub series: Vec<Series<'a>>,
    /// One tick per category (e.g. the true value).
    pub markers: Option<(&'a str, Vec<f64>)>,
    /// Horizontal rule across the plot (e.g. efficiency 1).
    pub reference: Option<f64>,
}

const WIDTH: f64 = 760.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

impl Chart<'_> {
    fn range(&self) -> (f64, f64) {
        let vals = self
            .series
            .iter()
            .flat_map(|s| s.values.iter().flatten().copied())
            .chain(self.markers.iter().flat_map(|(_, m)| m.iter().copied()))
            .chain(self.reference)
            .filter(|v| v.is_finite());
        let (lo, hi) = vals.fold((0.0f64, 0.0f64), |(a, b), v| (a.min(v), b.max(v)));
        let pad = ((hi - lo) * 0.08).max(1e-12);
        (if lo < 0.0 { lo - pad } else { 0.0 }, hi + pad)
    }

    pub fn to_svg(&self) -> String {
        let (lo, hi) = self.range();
        let plot_w = WIDTH - LEFT - RIGHT;
        let plot_h = HEIGHT - TOP - BOTTOM;
        let y = |v: f64| TOP + plot_h * (hi - v) / (hi - lo);
        let n = self.categories.len().max(1) as f64;
        let group_w = plot_w / n;
        let bar_w = group_w * 0.8 / self.series.len().max(1) as f64;

        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
            LEFT + plot_w / 2.0,
            escape(self.title)
        );
        let _ = writeln!(
            s,
            r#"<text transform="translate(16,{:.1}) rotate(-90)" text-anchor="middle">{}</text>"#,
            TOP + plot_h / 2.0,
            escape(self.y_label)
        );

        for i in 0..=5 {
            let v = lo + (hi - lo) * i as f64 / 5.0;
            let yy = y(v);
            let _ = writeln!(
                s,
                r##"<line x1="{LEFT}" x2="{:.1}" y1="{yy:.1}" y2="{yy:.1}" stroke="#e0e0e0"/><text x="{:.1}" y="{:.1}" text-anchor="end">{v:.3}</text>"##,
                LEFT + plot_w,
                LEFT - 6.0,
                yy + 4.0
            );
        }
        let _ = writeln!(
            s,
            r##"<line x1="{LEFT}" x2="{:.1}" y1="{:.1}" y2="{:.1}" stroke="#333"/>"##,
            LEFT + plot_w,
            y(0.0),
            y(0.0)
        );

        for (c, name) in self.categories.iter().enumerate() {
            let gx = LEFT + group_w * c as f64 + group_w * 0.1;
            for (k, ser) in self.series.iter().enumerate() {
                let Some(v) = ser.values.get(c).copied().flatten().filter(|v| v.is_finite()) else {
                    continue;
                };
                let (top, bottom) = (y(v.max(0.0)), y(v.min(0.0)));
                let _ = writeln!(
                    s,
                    r#"<rect x="{:.1}" y="{top:.1}" width="{bar_w:.1}" height="{:.1}" fill="{}"><title>{} {}: {v}</title></rect>"#,
                    gx + bar_w * k as f64,
                    (bottom - top).max(0.5),
                    ser.color,
                    escape(ser.name),
                    escape(name)
                );
            }
            if let Some((_, m)) = &self.markers {
                if let Some(&v) = m.get(c) {
                    let yy = y(v);
                    let _ = writeln!(
                        s,
                        r##"<line x1="{:.1}" x2="{:.1}" y1="{yy:.1}" y2="{yy:.1}" stroke="#000" stroke-width="2"/>"##,
                        gx - 2.0,
                        gx + group_w * 0.8 + 2.0
                    );
                }
            }
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
                LEFT + group_w * (c as f64 + 0.5),
                HEIGHT - BOTTOM + 18.0,
                escape(name)
            );
        }

        if let Some(r) = self.reference {
            let yy = y(r);
            let _ = writeln!(
                s,
                r##"<line x1="{LEFT}" x2="{:.1}" y1="{yy:.1}" y2="{yy:.1}" stroke="#b00" stroke-dasharray="6 4"/>"##,
                LEFT + plot_w
            );
        }

        let lx = WIDTH - RIGHT + 16.0;
        let mut ly = TOP + 10.0;
        for ser in &self.series {
            let _ = writeln!(
                s,
                r#"<rect x="{lx:.1}" y="{:.1}" width="12" height="12" fill="{}"/><text x="{:.1}" y="{ly:.1}">{}</text>"#,
                ly - 10.0,
                ser.color,
                lx + 18.0,
                escape(ser.name)
            );
            ly += 20.0;
        }
        if let Some((label, _)) = &self.markers {
            let _ = writeln!(
                s,
                r##"<line x1="{lx:.1}" x2="{:.1}" y1="{:.1}" y2="{:.1}" stroke="#000" stroke-width="2"/><text x="{:.1}" y="{ly:.1}">{}</text>"##,
                lx + 12.0,
                ly - 4.0,
                ly - 4.0,
                lx + 18.0,
                escape(label)
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_bars_markers_and_missing_values() {
        let c = Chart {
            title: "a < b",
            y_label: "value",
            categories: vec!["x1".into(), "L1".into()],
            series: vec![
                Series {
                    name: "joint",
                    color: "#1f77b4",
                    values: vec![Some(2.0), Some(-2.2)],
                },
                Series {
                    name: "baseline",
                    color: "#ff7f0e",
                    values: vec![Some(1.9), None],
                },
            ],
            markers: Some(("truth", vec![2.0, -2.2])),
            reference: Some(1.0),
        };
        let svg = c.to_svg();
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
        assert_eq!(svg.matches("<title>").count(), 3);
        assert!(svg.contains("a &lt; b"));
        assert_eq!(svg, c.to_svg());
    }
}
