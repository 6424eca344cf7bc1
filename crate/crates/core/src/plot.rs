//! Plain-text plot outputs: SVG runtime curves and PGM density renderings.

use std::fmt::Write as _;
use std::path::Path;

use crate::bench::{slopes, BenchRecord};
use crate::error::{Error, Result};
use crate::fscrs::DensityGrid;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN: f64 = 60.0;
const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

/// Log-log plot of median time against token count, one series per
/// mechanism, each labelled with its fitted slope.
pub fn bench_svg(records: &[BenchRecord]) -> Result<String> {
    if records.is_empty() {
        return Err(Error::InvalidArgument(
            "no benchmark records to plot".into(),
        ));
    }
    let fitted = slopes(records)?;
    let lx: Vec<f64> = records
        .iter()
        .map(|r| (r.n_tokens as f64).log10())
        .collect();
    let ly: Vec<f64> = records
        .iter()
        .map(|r| r.median_ns.max(1.0).log10())
        .collect();
    let (x0, x1) = bounds(&lx);
    let (y0, y1) = bounds(&ly);
    let px = |v: f64| MARGIN + (v - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
    let py = |v: f64| HEIGHT - MARGIN - (v - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);

    let mut s = String::new();
    let w = &mut s;
    let _ = writeln!(
        w,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(w, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let (left, right, top, bottom) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
    let _ = writeln!(
        w,
        r#"<path d="M{left} {top} L{left} {bottom} L{right} {bottom}" stroke="black" fill="none"/>"#
    );
    for d in (x0.ceil() as i32)..=(x1.floor() as i32) {
        let x = px(d as f64);
        let _ = writeln!(
            w,
            r#"<line x1="{x:.1}" y1="{bottom}" x2="{x:.1}" y2="{}" stroke="black"/>"#,
            bottom + 5.0
        );
        let _ = writeln!(
            w,
            r#"<text x="{x:.1}" y="{}" text-anchor="middle">1e{d}</text>"#,
            bottom + 20.0
        );
    }
    for d in (y0.ceil() as i32)..=(y1.floor() as i32) {
        let y = py(d as f64);
        let _ = writeln!(
            w,
            r#"<line x1="{}" y1="{y:.1}" x2="{left}" y2="{y:.1}" stroke="black"/>"#,
            left - 5.0
        );
        let _ = writeln!(
            w,
            r#"<text x="{}" y="{:.1}" text-anchor="end">1e{d}</text>"#,
            left - 8.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        w,
        r#"<text x="{}" y="{}" text-anchor="middle">tokens N (log)</text>"#,
        WIDTH / 2.0,
        HEIGHT - 15.0
    );
    let _ = writeln!(
        w,
        r#"<text x="15" y="{}" text-anchor="middle" transform="rotate(-90 15 {})">median time ns (log)</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0
    );
    for (i, (name, slope)) in fitted.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = records
            .iter()
            .zip(lx.iter().zip(&ly))
            .filter(|(r, _)| &r.mechanism == name)
            .map(|(_, (&x, &y))| format!("{:.1},{:.1}", px(x), py(y)))
            .collect();
        let _ = writeln!(
            w,
            r#"<polyline class="series" data-mechanism="{name}" points="{}" stroke="{color}" fill="none" stroke-width="2"/>"#,
            pts.join(" ")
        );
        for p in &pts {
            let (x, y) = p.split_once(',').expect("formatted pair");
            let _ = writeln!(w, r#"<circle cx="{x}" cy="{y}" r="3" fill="{color}"/>"#);
        }
        let _ = writeln!(
            w,
            r#"<text class="slope" x="{}" y="{}" fill="{color}">{name}: slope {slope:.2}</text>"#,
            left + 10.0,
            top + 16.0 * (i as f64 + 1.0)
        );
    }
    let _ = writeln!(w, "</svg>");
    Ok(s)
}

fn bounds(v: &[f64]) -> (f64, f64) {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo < 1e-9 {
        (lo - 0.5, hi + 0.5)
    } else {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    }
}

/// Grayscale PGM of a density CSV grid, brightest at the largest count.
pub fn density_pgm(text: &str, origin: &Path) -> Result<Vec<u8>> {
    let grid = DensityGrid::from_csv(text).map_err(|(line, message)| Error::Parse {
        path: origin.to_path_buf(),
        line,
        message,
    })?;
    Ok(grid.to_pgm())
}
