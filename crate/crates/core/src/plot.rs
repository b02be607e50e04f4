//! Minimal SVG charts for reports: box plots, grouped bars and line curves.

use std::fmt::Write as _;

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const COLORS: [&str; 6] = ["#4C72B0", "#DD8452", "#55A868", "#C44E52", "#8172B3", "#937860"];

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

struct Frame {
    lo: f64,
    hi: f64,
    svg: String,
}

impl Frame {
    fn new(title: &str, lo: f64, hi: f64) -> Self {
        let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
        let mut svg = String::new();
        let _ = writeln!(
            svg,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        let _ = writeln!(svg, r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, esc(title));
        let mut f = Self { lo, hi, svg };
        for i in 0..=4 {
            let v = lo + (hi - lo) * i as f64 / 4.0;
            let y = f.y(v);
            let _ = writeln!(
                f.svg,
                r##"<line x1="{LEFT}" x2="{}" y1="{y:.1}" y2="{y:.1}" stroke="#ddd"/><text x="{}" y="{:.1}" text-anchor="end">{}</text>"##,
                W - RIGHT,
                LEFT - 6.0,
                y + 4.0,
                fmt_tick(v)
            );
        }
        f
    }

    fn y(&self, v: f64) -> f64 {
        let t = (v - self.lo) / (self.hi - self.lo);
        H - BOTTOM - t * (H - TOP - BOTTOM)
    }

    fn finish(mut self) -> String {
        let _ = writeln!(
            self.svg,
            r#"<line x1="{LEFT}" x2="{LEFT}" y1="{TOP}" y2="{}" stroke="black"/><line x1="{LEFT}" x2="{}" y1="{}" y2="{}" stroke="black"/>"#,
            H - BOTTOM,
            W - RIGHT,
            H - BOTTOM,
            H - BOTTOM
        );
        self.svg.push_str("</svg>\n");
        self.svg
    }
}

fn fmt_tick(v: f64) -> String {
    if v.abs() >= 100.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

fn bounds<'a>(values: impl Iterator<Item = &'a f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values.filter(|v| v.is_finite()) {
        lo = lo.min(*v);
        hi = hi.max(*v);
    }
    if lo > hi {
        (0.0, 1.0)
    } else {
        (lo.min(0.0), hi)
    }
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let j = (i + 1).min(sorted.len() - 1);
    sorted[i] + (sorted[j] - sorted[i]) * (pos - i as f64)
}

/// Box-and-whisker plot (quartiles, min/max whiskers) per group.
pub fn box_plot(title: &str, groups: &[(String, Vec<f64>)], range: Option<(f64, f64)>) -> String {
    let (lo, hi) = range.unwrap_or_else(|| bounds(groups.iter().flat_map(|g| g.1.iter())));
    let mut f = Frame::new(title, lo, hi);
    let slot = (W - LEFT - RIGHT) / groups.len().max(1) as f64;
    for (i, (name, vals)) in groups.iter().enumerate() {
        let cx = LEFT + slot * (i as f64 + 0.5);
        let _ = writeln!(f.svg, r#"<text x="{cx:.1}" y="{}" text-anchor="middle">{}</text>"#, H - BOTTOM + 18.0, esc(name));
        let mut v: Vec<f64> = vals.iter().copied().filter(|x| x.is_finite()).collect();
        if v.is_empty() {
            continue;
        }
        v.sort_by(f64::total_cmp);
        let [mn, q1, md, q3, mx] = [0.0, 0.25, 0.5, 0.75, 1.0].map(|q| f.y(quantile(&v, q)));
        let bw = slot * 0.4;
        let color = COLORS[i % COLORS.len()];
        let _ = writeln!(
            f.svg,
            r#"<line x1="{cx:.1}" x2="{cx:.1}" y1="{mn:.1}" y2="{mx:.1}" stroke="black"/><rect x="{:.1}" y="{q3:.1}" width="{bw:.1}" height="{:.1}" fill="{color}" stroke="black"/><line x1="{:.1}" x2="{:.1}" y1="{md:.1}" y2="{md:.1}" stroke="black" stroke-width="2"/>"#,
            cx - bw / 2.0,
            (q1 - q3).max(0.5),
            cx - bw / 2.0,
            cx + bw / 2.0
        );
    }
    f.finish()
}

/// Grouped bar chart: one group per category, one bar per series.
pub fn bar_chart(title: &str, categories: &[String], series: &[(String, Vec<f64>)], range: Option<(f64, f64)>) -> String {
    let (lo, hi) = range.unwrap_or_else(|| bounds(series.iter().flat_map(|s| s.1.iter())));
    let mut f = Frame::new(title, lo, hi);
    let slot = (W - LEFT - RIGHT) / categories.len().max(1) as f64;
    let bw = slot * 0.8 / series.len().max(1) as f64;
    for (ci, cat) in categories.iter().enumerate() {
        let x0 = LEFT + slot * ci as f64 + slot * 0.1;
        let _ = writeln!(
            f.svg,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#,
            x0 + slot * 0.4,
            H - BOTTOM + 18.0,
            esc(cat)
        );
        for (si, (_, vals)) in series.iter().enumerate() {
            let Some(v) = vals.get(ci).copied().filter(|v| v.is_finite()) else {
                continue;
            };
            let (y, base) = (f.y(v), f.y(lo.max(0.0)));
            let _ = writeln!(
                f.svg,
                r#"<rect x="{:.1}" y="{:.1}" width="{bw:.1}" height="{:.1}" fill="{}"/>"#,
                x0 + bw * si as f64,
                y.min(base),
                (base - y).abs(),
                COLORS[si % COLORS.len()]
            );
        }
    }
    legend(&mut f.svg, series.iter().map(|s| s.0.as_str()));
    f.finish()
}

/// Line plot of `(x, y)` series.
pub fn line_plot(title: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let (lo, hi) = bounds(series.iter().flat_map(|s| s.1.iter().map(|p| &p.1)));
    let (xlo, xhi) = bounds(series.iter().flat_map(|s| s.1.iter().map(|p| &p.0)));
    let xhi = if xhi > xlo { xhi } else { xlo + 1.0 };
    let mut f = Frame::new(title, lo, hi);
    let x = |v: f64| LEFT + (v - xlo) / (xhi - xlo) * (W - LEFT - RIGHT);
    for (i, (_, pts)) in series.iter().enumerate() {
        let path: Vec<String> = pts
            .iter()
            .filter(|p| p.1.is_finite())
            .map(|p| format!("{:.1},{:.1}", x(p.0), f.y(p.1)))
            .collect();
        let _ = writeln!(
            f.svg,
            r#"<polyline fill="none" stroke="{}" stroke-width="1.5" points="{}"/>"#,
            COLORS[i % COLORS.len()],
            path.join(" ")
        );
    }
    let _ = writeln!(
        f.svg,
        r#"<text x="{LEFT}" y="{}">{}</text><text x="{}" y="{}" text-anchor="end">{}</text>"#,
        H - BOTTOM + 18.0,
        fmt_tick(xlo),
        W - RIGHT,
        H - BOTTOM + 18.0,
        fmt_tick(xhi)
    );
    legend(&mut f.svg, series.iter().map(|s| s.0.as_str()));
    f.finish()
}

fn legend<'a>(svg: &mut String, names: impl Iterator<Item = &'a str>) {
    for (i, n) in names.enumerate() {
        let y = TOP + 14.0 * i as f64;
        let _ = writeln!(
            svg,
            r#"<rect x="{}" y="{}" width="10" height="10" fill="{}"/><text x="{}" y="{}">{}</text>"#,
            W - RIGHT - 150.0,
            y,
            COLORS[i % COLORS.len()],
            W - RIGHT - 135.0,
            y + 9.0,
            esc(n)
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn charts_are_well_formed() {
        let g = vec![("LV".to_string(), vec![0.8, 0.9, 0.85]), ("RV".to_string(), vec![])];
        let s = box_plot("Dice <test>", &g, Some((0.0, 1.0)));
        assert!(s.starts_with("<svg") && s.ends_with("</svg>\n"));
        assert!(s.contains("Dice &lt;test&gt;"));
        let b = bar_chart("b", &["LV".into()], &[("a".into(), vec![0.5]), ("b".into(), vec![f64::NAN])], None);
        assert_eq!(b.matches("<rect x").count(), 1 + 2);
        let l = line_plot("loss", &[("train".into(), vec![(0.0, 1.0), (1.0, 0.5)])]);
        assert!(l.contains("polyline"));
    }
}
