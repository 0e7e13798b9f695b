//! Per-country SVG charts of estimates and data.

use std::fmt::Write as _;

use crate::estimates::EstimateGrid;
use crate::model::{Observation, SeriesType};

const W: f64 = 720.0;
const H: f64 = 420.0;
const PAD_L: f64 = 56.0;
const PAD_R: f64 = 110.0;
const PAD_T: f64 = 36.0;
const PAD_B: f64 = 40.0;

fn colour(s: SeriesType) -> &'static str {
    match s {
        SeriesType::VR => "#1b7837",
        SeriesType::SVR => "#5aae61",
        SeriesType::DHS => "#2166ac",
        SeriesType::OtherDHS => "#67a9cf",
        SeriesType::MICS => "#b2182b",
        SeriesType::Others => "#e08214",
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Round-number tick step giving roughly `n` ticks over `span`.
fn tick_step(span: f64, n: f64) -> f64 {
    let raw = (span / n).max(1e-9);
    let mag = 10f64.powf(raw.log10().floor());
    let r = raw / mag;
    let m = if r < 1.5 {
        1.0
    } else if r < 3.5 {
        2.0
    } else if r < 7.5 {
        5.0
    } else {
        10.0
    };
    m * mag
}

/// SVG chart with the 95% band, median, expected NMR and the country's
/// observations (excluded ones hollow).
pub fn country_svg(grid: &EstimateGrid, title: &str, obs: &[&Observation]) -> String {
    let x0 = grid
        .years
        .first()
        .copied()
        .unwrap_or(1990.5)
        .min(obs.iter().map(|o| o.t).fold(f64::INFINITY, f64::min));
    let x1 = grid.years.last().copied().unwrap_or(2015.5);
    let ymax = grid
        .summary
        .iter()
        .map(|s| s.upper.max(s.expected_nmr))
        .chain(obs.iter().map(|o| o.nmr))
        .filter(|v| v.is_finite())
        .fold(1.0, f64::max)
        * 1.08;
    let sx = |x: f64| PAD_L + (x - x0) / (x1 - x0).max(1.0) * (W - PAD_L - PAD_R);
    let sy = |y: f64| H - PAD_B - y / ymax * (H - PAD_T - PAD_B);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{PAD_L}" y="20" font-size="14">{}</text>"#,
        escape(title)
    );

    let step = tick_step(ymax, 5.0);
    let mut y = 0.0;
    while y <= ymax {
        let py = sy(y);
        let _ = writeln!(
            s,
            r##"<line x1="{PAD_L}" x2="{:.1}" y1="{py:.1}" y2="{py:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{y}</text>"##,
            W - PAD_R,
            PAD_L - 4.0,
            py + 4.0
        );
        y += step;
    }
    let xstep = tick_step(x1 - x0, 6.0).max(1.0);
    let mut x = (x0 / xstep).ceil() * xstep;
    while x <= x1 {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{x}</text>"#,
            sx(x),
            H - PAD_B + 16.0
        );
        x += xstep;
    }
    let _ = writeln!(
        s,
        r##"<text x="14" y="{:.1}" transform="rotate(-90 14 {:.1})" text-anchor="middle">NMR per 1,000</text>"##,
        H / 2.0,
        H / 2.0
    );

    if !grid.summary.is_empty() {
        let mut band = String::new();
        for p in &grid.summary {
            let _ = write!(band, "{:.1},{:.1} ", sx(p.year), sy(p.upper));
        }
        for p in grid.summary.iter().rev() {
            let _ = write!(band, "{:.1},{:.1} ", sx(p.year), sy(p.lower));
        }
        let _ = writeln!(
            s,
            r##"<polygon points="{}" fill="#9e9ac8" fill-opacity="0.35"/>"##,
            band.trim_end()
        );
        let line = |f: &dyn Fn(&crate::estimates::YearSummary) -> f64| {
            grid.summary
                .iter()
                .map(|p| format!("{:.1},{:.1}", sx(p.year), sy(f(p))))
                .collect::<Vec<_>>()
                .join(" ")
        };
        let _ = writeln!(
            s,
            r##"<polyline points="{}" fill="none" stroke="#54278f" stroke-width="2"/>"##,
            line(&|p| p.median)
        );
        let _ = writeln!(
            s,
            r##"<polyline points="{}" fill="none" stroke="#444" stroke-dasharray="5,4"/>"##,
            line(&|p| p.expected_nmr)
        );
    }

    for o in obs {
        if !o.nmr.is_finite() {
            continue;
        }
        let c = colour(o.series_type);
        let fill = if o.included { c } else { "none" };
        let _ = writeln!(
            s,
            r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{fill}" stroke="{c}"/>"#,
            sx(o.t),
            sy(o.nmr)
        );
    }

    let lx = W - PAD_R + 12.0;
    let mut ly = PAD_T + 6.0;
    let _ = writeln!(
        s,
        r##"<line x1="{lx}" x2="{:.1}" y1="{ly}" y2="{ly}" stroke="#54278f" stroke-width="2"/><text x="{:.1}" y="{:.1}">estimate</text>"##,
        lx + 18.0,
        lx + 22.0,
        ly + 4.0
    );
    ly += 16.0;
    let _ = writeln!(
        s,
        r##"<line x1="{lx}" x2="{:.1}" y1="{ly}" y2="{ly}" stroke="#444" stroke-dasharray="5,4"/><text x="{:.1}" y="{:.1}">expected</text>"##,
        lx + 18.0,
        lx + 22.0,
        ly + 4.0
    );
    for t in [
        SeriesType::VR,
        SeriesType::SVR,
        SeriesType::DHS,
        SeriesType::OtherDHS,
        SeriesType::MICS,
        SeriesType::Others,
    ] {
        if obs.iter().any(|o| o.series_type == t) {
            ly += 16.0;
            let _ = writeln!(
                s,
                r#"<circle cx="{:.1}" cy="{ly}" r="3" fill="{c}" stroke="{c}"/><text x="{:.1}" y="{:.1}">{}</text>"#,
                lx + 9.0,
                lx + 22.0,
                ly + 4.0,
                t.as_str(),
                c = colour(t)
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ticks_are_round() {
        assert_eq!(tick_step(43.0, 5.0), 10.0);
        assert_eq!(tick_step(7.0, 5.0), 1.0);
        assert_eq!(tick_step(25.0, 6.0), 5.0);
    }
}
