//! Hand-written SVG so figures need no renderer. Output depends only on the
//! input values, so identical inputs give identical bytes.

use std::fmt::Write as _;

use ltsa::metrics::percentile;
use ltsa::{Error, Result};
use serde::{Deserialize, Serialize};

const PALETTE: [&str; 6] = ["#1b6ca8", "#d1495b", "#2e8b57", "#edae49", "#6a4c93", "#555555"];

/// One bootstrap sample, as written to `samples.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub model: String,
    pub metric: String,
    pub t: f64,
    pub dt: f64,
    pub sample: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoxStats {
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    /// Most extreme samples within 1.5 IQR of the box.
    pub whisker_lo: f64,
    pub whisker_hi: f64,
    pub outliers: Vec<f64>,
}

pub fn box_stats(values: &[f64]) -> Option<BoxStats> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let (q1, median, q3) = (percentile(&v, 0.25), percentile(&v, 0.5), percentile(&v, 0.75));
    let iqr = q3 - q1;
    let (fence_lo, fence_hi) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
    let inside: Vec<f64> = v.iter().copied().filter(|x| (fence_lo..=fence_hi).contains(x)).collect();
    Some(BoxStats {
        median,
        q1,
        q3,
        whisker_lo: inside.first().copied().unwrap_or(q1),
        whisker_hi: inside.last().copied().unwrap_or(q3),
        outliers: v.into_iter().filter(|x| !(fence_lo..=fence_hi).contains(x)).collect(),
    })
}

fn header(out: &mut String, w: f64, h: f64) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" viewBox="0 0 {w:.0} {h:.0}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(out, r#"<rect width="{w:.0}" height="{h:.0}" fill="white"/>"#);
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Linear map of `[lo, hi]` onto `[top + height, top]`.
struct YAxis {
    lo: f64,
    hi: f64,
    top: f64,
    height: f64,
}

impl YAxis {
    fn of(values: impl Iterator<Item = f64>, top: f64, height: f64) -> Self {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for x in values {
            lo = lo.min(x);
            hi = hi.max(x);
        }
        let pad = ((hi - lo) * 0.05).max(1e-3);
        Self { lo: lo - pad, hi: hi + pad, top, height }
    }

    fn y(&self, v: f64) -> f64 {
        self.top + self.height * (self.hi - v) / (self.hi - self.lo)
    }

    fn draw(&self, out: &mut String, x: f64, right: f64) {
        for k in 0..=4 {
            let v = self.lo + (self.hi - self.lo) * k as f64 / 4.0;
            let y = self.y(v);
            let _ = writeln!(out, r##"<line x1="{x:.2}" y1="{y:.2}" x2="{right:.2}" y2="{y:.2}" stroke="#dddddd"/>"##);
            let _ = writeln!(out, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{v:.3}</text>"#, x - 4.0, y + 4.0);
        }
    }
}

fn legend(out: &mut String, names: &[String], x: f64, y: f64) {
    for (i, n) in names.iter().enumerate() {
        let yy = y + 16.0 * i as f64;
        let c = PALETTE[i % PALETTE.len()];
        let _ = writeln!(out, r#"<rect x="{x:.2}" y="{:.2}" width="10" height="10" fill="{c}"/>"#, yy - 9.0);
        let _ = writeln!(out, r#"<text x="{:.2}" y="{yy:.2}">{}</text>"#, x + 14.0, escape(n));
    }
}

const EMPTY_HINT: &str = "produce one with `ltsa evaluate --boot N` or `ltsa compare`, then pass it via --samples";

/// Box per model inside each (t, dt) cell, cells in order of first appearance.
pub fn box_plot(rows: &[SampleRow], metric: &str) -> Result<String> {
    let rows: Vec<&SampleRow> = rows.iter().filter(|r| r.metric == metric).collect();
    if rows.is_empty() {
        return Err(Error::Data(format!("report has no {metric} samples; {EMPTY_HINT}")));
    }
    let mut models: Vec<String> = Vec::new();
    let mut cells: Vec<(f64, f64)> = Vec::new();
    for r in &rows {
        if !models.contains(&r.model) {
            models.push(r.model.clone());
        }
        if !cells.contains(&(r.t, r.dt)) {
            cells.push((r.t, r.dt));
        }
    }
    let slot = 18.0;
    let cell_w = slot * models.len() as f64 + 16.0;
    let (left, top, plot_h) = (60.0, 30.0, 300.0);
    let width = left + cell_w * cells.len() as f64 + 120.0;
    let height = top + plot_h + 50.0;
    let axis = YAxis::of(rows.iter().map(|r| r.value), top, plot_h);

    let mut out = String::new();
    header(&mut out, width, height);
    let _ = writeln!(out, r#"<text x="{left:.2}" y="18">{}</text>"#, escape(metric));
    axis.draw(&mut out, left, left + cell_w * cells.len() as f64);
    for (ci, &(t, dt)) in cells.iter().enumerate() {
        let x0 = left + cell_w * ci as f64 + 8.0;
        let label_x = x0 + slot * models.len() as f64 / 2.0;
        let _ = writeln!(
            out,
            r#"<text x="{label_x:.2}" y="{:.2}" text-anchor="middle">{t}/{dt}</text>"#,
            top + plot_h + 16.0
        );
        for (mi, m) in models.iter().enumerate() {
            let values: Vec<f64> = rows.iter().filter(|r| &r.model == m && (r.t, r.dt) == (t, dt)).map(|r| r.value).collect();
            let Some(b) = box_stats(&values) else { continue };
            let c = PALETTE[mi % PALETTE.len()];
            let (xl, xm) = (x0 + slot * mi as f64 + 2.0, x0 + slot * mi as f64 + slot / 2.0);
            let bw = slot - 4.0;
            let _ = writeln!(
                out,
                r#"<line x1="{xm:.2}" y1="{:.2}" x2="{xm:.2}" y2="{:.2}" stroke="{c}"/>"#,
                axis.y(b.whisker_lo),
                axis.y(b.whisker_hi)
            );
            let _ = writeln!(
                out,
                r#"<rect x="{xl:.2}" y="{:.2}" width="{bw:.2}" height="{:.2}" fill="{c}" fill-opacity="0.35" stroke="{c}"/>"#,
                axis.y(b.q3),
                (axis.y(b.q1) - axis.y(b.q3)).max(0.5)
            );
            let ym = axis.y(b.median);
            let _ = writeln!(
                out,
                r#"<line x1="{xl:.2}" y1="{ym:.2}" x2="{:.2}" y2="{ym:.2}" stroke="{c}" stroke-width="2"/>"#,
                xl + bw
            );
            for o in &b.outliers {
                let _ = writeln!(out, r#"<circle cx="{xm:.2}" cy="{:.2}" r="1.5" fill="{c}"/>"#, axis.y(*o));
            }
        }
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">t / dt (years)</text>"#,
        left + cell_w * cells.len() as f64 / 2.0,
        height - 8.0
    );
    legend(&mut out, &models, width - 110.0, top + 10.0);
    out.push_str("</svg>\n");
    Ok(out)
}

/// One model's curves: `(eye label, [S(0), S(1), ..., S(j_max)])`.
pub type CurveSet = (String, Vec<(String, Vec<f64>)>);

/// A polyline per eye per model; models share colour, eyes share dash pattern.
pub fn curve_plot(sets: &[CurveSet], step_years: f64) -> Result<String> {
    let n_curves: usize = sets.iter().map(|(_, c)| c.len()).sum();
    if n_curves == 0 {
        return Err(Error::Data("no survival curves to plot; pass --model and --eye".into()));
    }
    let steps = sets.iter().flat_map(|(_, c)| c.iter().map(|(_, s)| s.len())).max().unwrap_or(1).max(2) - 1;
    let (left, top, plot_w, plot_h) = (60.0, 30.0, 420.0, 300.0);
    let (width, height) = (left + plot_w + 160.0, top + plot_h + 50.0);
    let axis = YAxis { lo: 0.0, hi: 1.0, top, height: plot_h };
    let x = |j: usize| left + plot_w * j as f64 / steps as f64;

    let mut out = String::new();
    header(&mut out, width, height);
    let _ = writeln!(out, r#"<text x="{left:.2}" y="18">survival probability</text>"#);
    axis.draw(&mut out, left, left + plot_w);
    for k in 0..=4 {
        let j = steps * k / 4;
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{:.1}</text>"#,
            x(j),
            top + plot_h + 16.0,
            j as f64 * step_years
        );
    }
    let mut names = Vec::new();
    for (mi, (model, curves)) in sets.iter().enumerate() {
        let c = PALETTE[mi % PALETTE.len()];
        for (ei, (eye, s)) in curves.iter().enumerate() {
            let pts: Vec<String> = s.iter().enumerate().map(|(j, v)| format!("{:.2},{:.2}", x(j), axis.y(*v))).collect();
            let dash = if ei == 0 { String::new() } else { format!(r#" stroke-dasharray="{} 3""#, 2 + 2 * ei) };
            let _ = writeln!(
                out,
                r#"<polyline data-model="{}" data-eye="{}" points="{}" fill="none" stroke="{c}" stroke-width="1.5"{dash}/>"#,
                escape(model),
                escape(eye),
                pts.join(" ")
            );
        }
        names.push(model.clone());
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">years since enrollment</text>"#,
        left + plot_w / 2.0,
        height - 8.0
    );
    legend(&mut out, &names, left + plot_w + 20.0, top + 10.0);
    out.push_str("</svg>\n");
    Ok(out)
}
