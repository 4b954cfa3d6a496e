//! Static SVG line charts from CSV logs.

use std::fmt::Write as _;

use crate::{Error, Result};

/// Numeric columns of a headed CSV, by name.
pub fn read_columns(text: &str) -> Result<Vec<(String, Vec<f64>)>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| Error::Data("empty CSV".into()))?;
    let mut cols: Vec<(String, Vec<f64>)> = header.split(',').map(|h| (h.trim().to_string(), Vec::new())).collect();
    for (i, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != cols.len() {
            return Err(Error::Data(format!("CSV row {} has {} cells, header has {}", i + 2, cells.len(), cols.len())));
        }
        for (c, cell) in cols.iter_mut().zip(cells) {
            let v = cell.trim().parse::<f64>().map_err(|e| Error::Data(format!("CSV row {}: {cell:?}: {e}", i + 2)))?;
            c.1.push(v);
        }
    }
    Ok(cols)
}

/// A single-series line chart. Non-finite points are skipped; `log_y` plots
/// log10 of positive values.
pub fn line_chart(title: &str, x_label: &str, xs: &[f64], ys: &[f64], log_y: bool) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const PAD: f64 = 56.0;
    let pts: Vec<(f64, f64)> = xs
        .iter()
        .zip(ys)
        .filter(|(x, y)| x.is_finite() && y.is_finite() && (!log_y || **y > 0.0))
        .map(|(&x, &y)| (x, if log_y { y.log10() } else { y }))
        .collect();
    let span = |v: &mut dyn Iterator<Item = f64>| {
        let (lo, hi) = v.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
        if !lo.is_finite() {
            (0.0, 1.0)
        } else if hi - lo < 1e-12 {
            (lo - 0.5, hi + 0.5)
        } else {
            (lo, hi)
        }
    };
    let (x0, x1) = span(&mut pts.iter().map(|p| p.0));
    let (y0, y1) = span(&mut pts.iter().map(|p| p.1));
    let sx = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" text-anchor="middle" font-family="sans-serif" font-size="16">{}</text>"#,
        W / 2.0,
        escape(title)
    );
    let _ = writeln!(s, r#"<path d="M{PAD} {PAD} V{} H{}" fill="none" stroke="black"/>"#, H - PAD, W - PAD);
    let fmt_y = |y: f64| if log_y { format!("1e{y:.1}") } else { format!("{y:.4}") };
    for (v, y) in [(y0, H - PAD), (y1, PAD)] {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end" font-family="sans-serif" font-size="11">{}</text>"#,
            PAD - 4.0,
            y + 4.0,
            fmt_y(v)
        );
    }
    for (v, x) in [(x0, PAD), (x1, W - PAD)] {
        let _ =
            writeln!(s, r#"<text x="{x}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="11">{v}</text>"#, H - PAD + 16.0);
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12">{}</text>"#,
        W / 2.0,
        H - 12.0,
        escape(x_label)
    );
    if !pts.is_empty() {
        let d: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="steelblue" stroke-width="2"/>"#, d.join(" "));
    }
    s.push_str("</svg>\n");
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// `(file stem, svg)` charts of loss, PSNR and cond from a metrics CSV.
pub fn metrics_charts(csv: &str) -> Result<Vec<(&'static str, String)>> {
    let cols = read_columns(csv)?;
    let col = |name: &str| {
        cols.iter().find(|c| c.0 == name).map(|c| c.1.clone()).ok_or_else(|| Error::Data(format!("metrics CSV has no {name:?} column")))
    };
    let epoch = col("epoch")?;
    Ok(vec![
        ("loss", line_chart("training loss", "epoch", &epoch, &col("loss")?, true)),
        ("psnr", line_chart("validation PSNR (dB)", "epoch", &epoch, &col("psnr")?, false)),
        ("cond", line_chart("condition number of filter bank", "epoch", &epoch, &col("cond")?, true)),
    ])
}
