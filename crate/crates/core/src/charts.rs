//! Static SVG line charts rendered from the experiment CSVs.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{ModelError, Result};

const W: f64 = 720.0;
const H: f64 = 420.0;
const MARGIN: (f64, f64, f64, f64) = (70.0, 30.0, 40.0, 50.0); // left, right, top, bottom
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#7f7f7f"];

pub struct Series {
    pub name: String,
    pub y: Vec<f64>,
}

/// Renders one chart. Empty or all-NaN input yields the axes alone.
pub fn line_chart(title: &str, x_label: &str, x: &[f64], series: &[Series]) -> String {
    let (l, r, t, b) = MARGIN;
    let finite = |v: &&f64| v.is_finite();
    let xs: Vec<f64> = x.iter().filter(finite).copied().collect();
    let ys: Vec<f64> = series.iter().flat_map(|s| s.y.iter().filter(finite).copied()).collect();
    let range = |v: &[f64]| {
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !lo.is_finite() {
            (0.0, 1.0)
        } else if hi - lo < 1e-12 * lo.abs().max(1.0) {
            (lo - 0.5, hi + 0.5)
        } else {
            (lo, hi)
        }
    };
    let (x0, x1) = range(&xs);
    let (y0, y1) = range(&ys);
    let px = |v: f64| l + (v - x0) / (x1 - x0) * (W - l - r);
    let py = |v: f64| H - b - (v - y0) / (y1 - y0) * (H - t - b);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        W / 2.0,
        escape(title)
    );
    let _ = writeln!(
        svg,
        r#"<path d="M{l} {t} L{l} {yb} L{xr} {yb}" fill="none" stroke="black"/>"#,
        yb = H - b,
        xr = W - r
    );
    for k in 0..=4 {
        let f = k as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            px(xv),
            H - b + 18.0,
            tick(xv)
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            l - 6.0,
            py(yv) + 4.0,
            tick(yv)
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        (l + W - r) / 2.0,
        H - 10.0,
        escape(x_label)
    );
    for (k, s) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let mut d = String::new();
        let mut pen = false;
        for (xv, yv) in x.iter().zip(&s.y) {
            if !(xv.is_finite() && yv.is_finite()) {
                pen = false;
                continue;
            }
            let _ = write!(d, "{}{:.2} {:.2} ", if pen { "L" } else { "M" }, px(*xv), py(*yv));
            pen = true;
        }
        if !d.is_empty() {
            let _ = writeln!(
                svg,
                r#"<path d="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
                d.trim_end()
            );
        }
        let ly = t + 14.0 * k as f64 + 6.0;
        let _ = writeln!(
            svg,
            r#"<line x1="{a}" y1="{ly}" x2="{b}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{c}" y="{ty}">{}</text>"#,
            escape(&s.name),
            a = W - r - 150.0,
            b = W - r - 130.0,
            c = W - r - 125.0,
            ty = ly + 4.0
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e5 || v.abs() < 1e-3) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Columns of a numeric CSV by header name; empty cells read as NaN.
pub fn read_columns(path: &Path) -> Result<HashMap<String, Vec<f64>>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| ModelError::Io(format!("{}: {e}", path.display())))?;
    let headers: Vec<String> = r
        .headers()
        .map_err(|e| ModelError::Io(format!("{}: {e}", path.display())))?
        .iter()
        .map(str::to_owned)
        .collect();
    let mut cols: HashMap<String, Vec<f64>> = headers.iter().map(|h| (h.clone(), Vec::new())).collect();
    for rec in r.records() {
        let rec = rec.map_err(|e| ModelError::Io(format!("{}: {e}", path.display())))?;
        for (h, v) in headers.iter().zip(rec.iter()) {
            cols.get_mut(h).unwrap().push(v.parse().unwrap_or(f64::NAN));
        }
    }
    Ok(cols)
}

fn column<'a>(cols: &'a HashMap<String, Vec<f64>>, name: &str, file: &Path) -> Result<&'a Vec<f64>> {
    cols.get(name)
        .ok_or_else(|| ModelError::Io(format!("{}: missing column `{name}`", file.display())))
}

/// Writes the learning, quotes, inventory and P&L charts next to the CSVs.
pub fn emit_charts(dir: &Path) -> Result<Vec<PathBuf>> {
    let lc_path = dir.join("learning_curve.csv");
    let tr_path = dir.join("mean_trajectory.csv");
    let lc = read_columns(&lc_path)?;
    let tr = read_columns(&tr_path)?;
    let mut out = Vec::new();
    let mut write = |name: &str, svg: String| -> Result<()> {
        let p = dir.join(name);
        std::fs::write(&p, svg).map_err(|e| ModelError::Io(format!("{}: {e}", p.display())))?;
        out.push(p);
        Ok(())
    };

    let epoch = column(&lc, "epoch", &lc_path)?;
    let learn: Vec<Series> = ["return", "hedge_penalty", "activity_penalty"]
        .iter()
        .map(|n| {
            column(&lc, n, &lc_path).map(|y| Series {
                name: n.to_string(),
                y: y.clone(),
            })
        })
        .collect::<Result<_>>()?;
    write(
        "learning_metrics.svg",
        line_chart("Learning metrics", "epoch", epoch, &learn),
    )?;

    let t = column(&tr, "t", &tr_path)?;
    let pick = |names: &[&str]| -> Result<Vec<Series>> {
        names
            .iter()
            .map(|n| {
                column(&tr, n, &tr_path).map(|y| Series {
                    name: n.to_string(),
                    y: y.clone(),
                })
            })
            .collect()
    };
    write(
        "quotes.svg",
        line_chart(
            "Average option quotes",
            "t (years)",
            t,
            &pick(&["beta", "reference", "alpha"])?,
        ),
    )?;
    write(
        "inventories.svg",
        line_chart("Average inventories", "t (years)", t, &pick(&["i", "q"])?),
    )?;
    write("pnl.svg", line_chart("Average P&L", "t (years)", t, &pick(&["pnl"])?))?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_chart_has_axes_only() {
        let svg = line_chart(
            "empty",
            "x",
            &[],
            &[Series {
                name: "y".into(),
                y: vec![],
            }],
        );
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
        assert!(svg.contains("<path d=\"M70"));
        assert_eq!(svg.matches("stroke-width=\"1.5\"").count(), 0);
    }

    #[test]
    fn charts_are_deterministic_and_skip_gaps() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let s = || {
            vec![Series {
                name: "a<b".into(),
                y: vec![1.0, f64::NAN, 3.0, 2.0],
            }]
        };
        let a = line_chart("t", "x", &x, &s());
        assert_eq!(a, line_chart("t", "x", &x, &s()));
        assert!(a.contains("a&lt;b"));
        // the NaN breaks the polyline into two pieces
        let path = a.lines().find(|l| l.contains("stroke-width=\"1.5\"")).unwrap();
        assert_eq!(path.matches('M').count(), 2);
    }

    #[test]
    fn missing_column_is_named() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("learning_curve.csv"), "epoch,return\n1,2\n").unwrap();
        std::fs::write(dir.path().join("mean_trajectory.csv"), "t\n0\n").unwrap();
        let err = emit_charts(dir.path()).unwrap_err().to_string();
        assert!(err.contains("hedge_penalty"), "{err}");
    }
}
