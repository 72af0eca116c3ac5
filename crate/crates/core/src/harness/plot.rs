use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::metrics::{AggregateCurve, CurvePoint, MeanStd};
use crate::error::{Error, Result};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 150.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 50.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#7f7f7f", "#9467bd", "#ff7f0e"];

struct Panel {
    file_stem: &'static str,
    title: &'static str,
    value: fn(&CurvePoint) -> MeanStd,
    unit_range: bool,
}

const PANELS: [Panel; 3] = [
    Panel {
        file_stem: "success_rate",
        title: "test success rate",
        value: |p| p.success_rate,
        unit_range: true,
    },
    Panel {
        file_stem: "bc_loss",
        title: "BC loss",
        value: |p| p.bc_loss,
        unit_range: false,
    },
    Panel {
        file_stem: "filter_fraction",
        title: "filter pass fraction",
        value: |p| p.filter_fraction,
        unit_range: true,
    },
];

/// Writes `<env>_<panel>.svg` for each environment and panel: one mean line
/// with a ±1 std band per variant. Returns the written paths.
pub fn emit_plots(curves: &[AggregateCurve], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if curves.is_empty() || curves.iter().all(|c| c.points.is_empty()) {
        return Err(Error::Metrics("no curves to plot".into()));
    }
    let mut by_env: BTreeMap<&str, Vec<&AggregateCurve>> = BTreeMap::new();
    for c in curves.iter().filter(|c| !c.points.is_empty()) {
        by_env.entry(&c.env).or_default().push(c);
    }
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    for (env, mut group) in by_env {
        group.sort_by(|a, b| a.variant.cmp(&b.variant));
        for panel in &PANELS {
            let path = out_dir.join(format!("{env}_{}.svg", panel.file_stem));
            std::fs::write(&path, render(env, panel, &group))?;
            written.push(path);
        }
    }
    Ok(written)
}

fn render(env: &str, panel: &Panel, curves: &[&AggregateCurve]) -> String {
    let points = curves.iter().flat_map(|c| c.points.iter());
    let x_max = points.clone().map(|p| p.env_steps).max().unwrap_or(1).max(1) as f64;
    let (y_lo, y_hi) = if panel.unit_range {
        (0.0, 1.0)
    } else {
        let lo = points
            .clone()
            .map(|p| {
                let v = (panel.value)(p);
                v.mean - v.std
            })
            .fold(f64::INFINITY, f64::min)
            .min(0.0);
        let hi = points
            .map(|p| {
                let v = (panel.value)(p);
                v.mean + v.std
            })
            .fold(f64::NEG_INFINITY, f64::max);
        (lo, if hi > lo { hi } else { lo + 1.0 })
    };
    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let sx = |x: f64| MARGIN_LEFT + x / x_max * plot_w;
    let sy = |y: f64| MARGIN_TOP + (1.0 - (y.clamp(y_lo, y_hi) - y_lo) / (y_hi - y_lo)) * plot_h;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{} ({})</text>"#,
        MARGIN_LEFT + plot_w / 2.0,
        panel.title,
        escape(env)
    );
    let _ = writeln!(
        svg,
        r#"<rect x="{MARGIN_LEFT}" y="{MARGIN_TOP}" width="{plot_w}" height="{plot_h}" fill="none" stroke="black"/>"#
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (x, y) = (sx(f * x_max), sy(y_lo + f * (y_hi - y_lo)));
        let _ = writeln!(
            svg,
            r#"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="black"/><text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            MARGIN_TOP + plot_h,
            MARGIN_TOP + plot_h + 5.0,
            MARGIN_TOP + plot_h + 18.0,
            f * x_max
        );
        let _ = writeln!(
            svg,
            r#"<line x1="{:.2}" y1="{y:.2}" x2="{MARGIN_LEFT}" y2="{y:.2}" stroke="black"/><text x="{:.2}" y="{:.2}" text-anchor="end">{:.3}</text>"#,
            MARGIN_LEFT - 5.0,
            MARGIN_LEFT - 8.0,
            y + 4.0,
            y_lo + f * (y_hi - y_lo)
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">env steps</text>"#,
        MARGIN_LEFT + plot_w / 2.0,
        HEIGHT - 10.0
    );

    for (i, c) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let vals: Vec<(f64, MeanStd)> = c
            .points
            .iter()
            .map(|p| (p.env_steps as f64, (panel.value)(p)))
            .collect();
        let upper = vals.iter().map(|(x, v)| format!("{:.2},{:.2}", sx(*x), sy(v.mean + v.std)));
        let lower = vals.iter().rev().map(|(x, v)| format!("{:.2},{:.2}", sx(*x), sy(v.mean - v.std)));
        let band: Vec<String> = upper.chain(lower).collect();
        let _ = writeln!(
            svg,
            r#"<polygon points="{}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#,
            band.join(" ")
        );
        let line: Vec<String> = vals
            .iter()
            .map(|(x, v)| format!("{:.2},{:.2}", sx(*x), sy(v.mean)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            line.join(" ")
        );
        let ly = MARGIN_TOP + 10.0 + 18.0 * i as f64;
        let lx = WIDTH - MARGIN_RIGHT + 12.0;
        let _ = writeln!(
            svg,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0,
            escape(&c.variant)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat_curve(variant: &str, value: f64) -> AggregateCurve {
        let ms = MeanStd { mean: value, std: 0.0 };
        AggregateCurve {
            env: "point_reach".into(),
            variant: variant.into(),
            seeds: vec![0],
            points: (0..3)
                .map(|i| CurvePoint {
                    env_steps: i * 100,
                    success_rate: ms,
                    bc_loss: ms,
                    filter_fraction: ms,
                    critic_loss: ms,
                    actor_loss: ms,
                })
                .collect(),
        }
    }

    #[test]
    fn empty_input_is_an_error_and_writes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("plots");
        assert!(emit_plots(&[], &out).is_err());
        assert!(!out.exists());
    }

    #[test]
    fn one_file_per_panel() {
        let dir = tempfile::tempdir().unwrap();
        let files = emit_plots(&[flat_curve("none", 0.5), flat_curve("static_qg", 0.7)], dir.path()).unwrap();
        assert_eq!(files.len(), 3);
        for f in files {
            assert!(f.exists());
        }
    }

    #[test]
    fn constant_curve_is_flat_with_zero_band() {
        let svg = render("point_reach", &PANELS[0], &[&flat_curve("none", 0.5)]);
        let line = svg.lines().find(|l| l.starts_with("<polyline")).unwrap();
        let ys: Vec<&str> = line
            .split('"')
            .nth(1)
            .unwrap()
            .split(' ')
            .map(|p| p.split(',').nth(1).unwrap())
            .collect();
        assert!(ys.windows(2).all(|w| w[0] == w[1]));
        let band = svg.lines().find(|l| l.starts_with("<polygon")).unwrap();
        assert!(band.split('"').nth(1).unwrap().split(' ').all(|p| p.ends_with(ys[0])));
    }
}
