//! Minimal self-contained SVG line and scatter plots.

use std::fmt::Write;

use crate::error::{LabError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
    /// Draw markers only, no connecting line.
    pub scatter: bool,
}

impl Series {
    pub fn line(name: &str, points: Vec<(f64, f64)>) -> Self {
        Self {
            name: name.into(),
            points,
            scatter: false,
        }
    }

    pub fn scatter(name: &str, points: Vec<(f64, f64)>) -> Self {
        Self {
            name: name.into(),
            points,
            scatter: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Plot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub log_x: bool,
    pub series: Vec<Series>,
}

const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];
const W: f64 = 640.0;
const H: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 55.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn ticks(lo: f64, hi: f64) -> Vec<f64> {
    let span = (hi - lo).max(1e-12);
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|s| *s >= raw).unwrap_or(10.0 * mag);
    let mut t = (lo / step).ceil() * step;
    let mut out = Vec::new();
    while t <= hi + 1e-9 * span {
        out.push(if t.abs() < 1e-12 * span { 0.0 } else { t });
        t += step;
    }
    out
}

fn label(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-3) {
        format!("{v:.1e}")
    } else {
        let s = format!("{v:.4}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

impl Plot {
    pub fn to_svg(&self) -> Result<String> {
        let tx = |x: f64| if self.log_x { x.log10() } else { x };
        let pts: Vec<(f64, f64)> = self
            .series
            .iter()
            .flat_map(|s| s.points.iter().copied())
            .filter(|(x, y)| x.is_finite() && y.is_finite() && (!self.log_x || *x > 0.0))
            .map(|(x, y)| (tx(x), y))
            .collect();
        if pts.is_empty() {
            return Err(LabError::Empty(format!("plot `{}` has no finite points", self.title)));
        }
        let (mut x0, mut x1) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.0), b.max(p.0)));
        let (mut y0, mut y1) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.1), b.max(p.1)));
        if x1 - x0 < 1e-12 {
            x0 -= 0.5;
            x1 += 0.5;
        }
        if y1 - y0 < 1e-12 {
            y0 -= 0.5;
            y1 += 0.5;
        }
        let pad = 0.05 * (y1 - y0);
        y0 -= pad;
        y1 += pad;
        let pw = W - LEFT - RIGHT;
        let ph = H - TOP - BOTTOM;
        let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
        let sy = |y: f64| TOP + ph - (y - y0) / (y1 - y0) * ph;

        let mut s = String::new();
        let w = |s: &mut String, t: String| s.push_str(&t);
        w(
            &mut s,
            format!(
                "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"12\">\n"
            ),
        );
        w(&mut s, format!("<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n"));
        w(&mut s, format!("<text x=\"{}\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n", LEFT + pw / 2.0, escape(&self.title)));
        w(&mut s, format!("<rect x=\"{LEFT}\" y=\"{TOP}\" width=\"{pw}\" height=\"{ph}\" fill=\"none\" stroke=\"#333\"/>\n"));
        for t in ticks(x0, x1) {
            let x = sx(t);
            let text = if self.log_x { label(10f64.powf(t)) } else { label(t) };
            let _ = writeln!(s, "<line x1=\"{x:.2}\" y1=\"{:.2}\" x2=\"{x:.2}\" y2=\"{:.2}\" stroke=\"#333\"/>", TOP + ph, TOP + ph + 5.0);
            let _ = writeln!(s, "<text x=\"{x:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{text}</text>", TOP + ph + 18.0);
        }
        for t in ticks(y0, y1) {
            let y = sy(t);
            let _ = writeln!(s, "<line x1=\"{:.2}\" y1=\"{y:.2}\" x2=\"{LEFT}\" y2=\"{y:.2}\" stroke=\"#333\"/>", LEFT - 5.0);
            let _ = writeln!(s, "<line x1=\"{LEFT}\" y1=\"{y:.2}\" x2=\"{:.2}\" y2=\"{y:.2}\" stroke=\"#eee\"/>", LEFT + pw);
            let _ = writeln!(s, "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{}</text>", LEFT - 8.0, y + 4.0, label(t));
        }
        let _ = writeln!(
            s,
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>",
            LEFT + pw / 2.0,
            H - 12.0,
            escape(&self.x_label)
        );
        let _ = writeln!(
            s,
            "<text x=\"16\" y=\"{:.2}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.2})\">{}</text>",
            TOP + ph / 2.0,
            TOP + ph / 2.0,
            escape(&self.y_label)
        );
        for (i, series) in self.series.iter().enumerate() {
            let c = COLORS[i % COLORS.len()];
            let p: Vec<(f64, f64)> = series
                .points
                .iter()
                .filter(|(x, y)| x.is_finite() && y.is_finite() && (!self.log_x || *x > 0.0))
                .map(|&(x, y)| (sx(tx(x)), sy(y)))
                .collect();
            if series.scatter || p.len() == 1 {
                for (x, y) in &p {
                    let _ = writeln!(s, "<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"4\" fill=\"{c}\"/>");
                }
            } else if !p.is_empty() {
                let path: Vec<String> = p.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
                let _ = writeln!(s, "<polyline fill=\"none\" stroke=\"{c}\" stroke-width=\"1.5\" points=\"{}\"/>", path.join(" "));
            }
            let ly = TOP + 14.0 + 18.0 * i as f64;
            let lx = LEFT + pw + 12.0;
            let _ = writeln!(s, "<rect x=\"{lx:.2}\" y=\"{:.2}\" width=\"12\" height=\"12\" fill=\"{c}\"/>", ly - 10.0);
            let _ = writeln!(s, "<text x=\"{:.2}\" y=\"{ly:.2}\">{}</text>", lx + 18.0, escape(&series.name));
        }
        s.push_str("</svg>\n");
        Ok(s)
    }

    /// Long-format CSV: `series,x,y`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| LabError::Serde(e.to_string());
        w.write_record(["series", &self.x_label, &self.y_label]).map_err(err)?;
        for s in &self.series {
            for (x, y) in &s.points {
                w.write_record([s.name.as_str(), &x.to_string(), &y.to_string()]).map_err(err)?;
            }
        }
        String::from_utf8(w.into_inner().map_err(|e| LabError::Serde(e.to_string()))?).map_err(|e| LabError::Serde(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn svg_is_self_contained_and_labelled() {
        let p = Plot {
            title: "MI <vs> iteration".into(),
            x_label: "iteration".into(),
            y_label: "plug-in MI (nats)".into(),
            log_x: false,
            series: vec![Series::line("erased", vec![(0.0, 0.6), (100.0, 0.1), (200.0, 0.02)])],
        };
        let svg = p.to_svg().unwrap();
        assert!(svg.starts_with("<svg xmlns"));
        assert!(svg.contains("plug-in MI (nats)"));
        assert!(svg.contains("&lt;vs&gt;"));
        assert!(!svg.contains("href"));
        assert!(svg.contains("<polyline"));
        let csv = p.to_csv().unwrap();
        assert_eq!(csv.lines().count(), 4);
    }

    #[test]
    fn empty_and_log_axes() {
        let empty = Plot {
            title: "t".into(),
            x_label: "x".into(),
            y_label: "y".into(),
            log_x: true,
            series: vec![Series::scatter("s", vec![(0.0, 1.0)])],
        };
        assert!(empty.to_svg().is_err());
        let ok = Plot {
            series: vec![Series::scatter("s", vec![(1.0, 0.5), (64.0, 0.52)])],
            ..empty
        };
        assert!(ok.to_svg().unwrap().contains("<circle"));
        assert_eq!(ticks(0.0, 1.0).len(), 6);
    }
}
