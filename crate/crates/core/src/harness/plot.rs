//! Self-contained SVG figures from the CSV outputs.

use std::fmt::Write as _;
use std::fs::File;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::monte_carlo::{fit_rate, HittingSample, SurvivalCurve, DEFAULT_BURN_IN};

use super::run::SweepResult;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKind {
    Survival,
    RateVsL,
    RateVsEps2,
    HittingLaw,
}

impl FromStr for PlotKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "survival" => PlotKind::Survival,
            "rate_vs_L" | "rate_vs_l" => PlotKind::RateVsL,
            "rate_vs_eps2" => PlotKind::RateVsEps2,
            "hitting_law" => PlotKind::HittingLaw,
            _ => {
                return Err(Error::config(
                    "kind",
                    format!("unknown plot `{s}` (survival, rate_vs_L, rate_vs_eps2, hitting_law)"),
                ))
            }
        })
    }
}

impl std::fmt::Display for PlotKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PlotKind::Survival => "survival",
            PlotKind::RateVsL => "rate_vs_L",
            PlotKind::RateVsEps2 => "rate_vs_eps2",
            PlotKind::HittingLaw => "hitting_law",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Style {
    Line,
    Markers,
}

#[derive(Debug, Clone)]
struct Series {
    name: String,
    style: Style,
    points: Vec<(f64, f64)>,
    /// Half-widths of vertical error bars, parallel to `points`.
    errors: Vec<f64>,
}

impl Series {
    fn line(name: &str, points: Vec<(f64, f64)>) -> Self {
        Series {
            name: name.into(),
            style: Style::Line,
            points,
            errors: Vec::new(),
        }
    }

    fn markers(name: &str, points: Vec<(f64, f64)>, errors: Vec<f64>) -> Self {
        Series {
            name: name.into(),
            style: Style::Markers,
            points,
            errors,
        }
    }
}

struct Figure {
    title: String,
    xlabel: String,
    ylabel: String,
    log_y: bool,
    series: Vec<Series>,
}

const W: f64 = 640.0;
const H: f64 = 440.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;
const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

impl Figure {
    fn render(&self) -> String {
        let ty = |y: f64| if self.log_y { y.log10() } else { y };
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for s in &self.series {
            for (i, &(x, y)) in s.points.iter().enumerate() {
                if self.log_y && y <= 0.0 {
                    continue;
                }
                let e = s.errors.get(i).copied().unwrap_or(0.0);
                xs.push(x);
                ys.push(ty(y));
                if e > 0.0 {
                    ys.push(ty(y + e));
                    if !self.log_y || y - e > 0.0 {
                        ys.push(ty(y - e));
                    }
                }
            }
        }
        let range = |v: &[f64]| {
            let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if !lo.is_finite() {
                (0.0, 1.0)
            } else if hi - lo < 1e-300 {
                (lo - 0.5, hi + 0.5)
            } else {
                let pad = 0.05 * (hi - lo);
                (lo - pad, hi + pad)
            }
        };
        let (x0, x1) = range(&xs);
        let (y0, y1) = range(&ys);
        let px = |x: f64| LEFT + (x - x0) / (x1 - x0) * (W - LEFT - RIGHT);
        let py = |y: f64| H - BOTTOM - (ty(y) - y0) / (y1 - y0) * (H - TOP - BOTTOM);

        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#,
            W / 2.0,
            escape(&self.title)
        );
        // axes
        let _ = writeln!(
            s,
            r#"<g class="axes" stroke="black"><line x1="{LEFT}" y1="{b}" x2="{r}" y2="{b}"/><line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{b}"/></g>"#,
            b = H - BOTTOM,
            r = W - RIGHT
        );
        for i in 0..=4 {
            let fx = x0 + (x1 - x0) * i as f64 / 4.0;
            let fy = y0 + (y1 - y0) * i as f64 / 4.0;
            let xp = LEFT + (W - LEFT - RIGHT) * i as f64 / 4.0;
            let yp = H - BOTTOM - (H - TOP - BOTTOM) * i as f64 / 4.0;
            let ylab = if self.log_y { format!("{:.3e}", 10f64.powf(fy)) } else { format!("{fy:.3e}") };
            let _ = writeln!(
                s,
                r#"<g class="tick"><line x1="{xp}" y1="{b}" x2="{xp}" y2="{b5}" stroke="black"/><text x="{xp}" y="{bt}" text-anchor="middle">{fx:.3e}</text><line x1="{LEFT}" y1="{yp}" x2="{l5}" y2="{yp}" stroke="black"/><text x="{lt}" y="{yp}" text-anchor="end" dominant-baseline="middle">{ylab}</text></g>"#,
                b = H - BOTTOM,
                b5 = H - BOTTOM + 5.0,
                bt = H - BOTTOM + 18.0,
                l5 = LEFT - 5.0,
                lt = LEFT - 8.0,
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            (LEFT + W - RIGHT) / 2.0,
            H - 18.0,
            escape(&self.xlabel)
        );
        let _ = writeln!(
            s,
            r#"<text x="18" y="{c}" text-anchor="middle" transform="rotate(-90 18 {c})">{}</text>"#,
            escape(&self.ylabel),
            c = (TOP + H - BOTTOM) / 2.0
        );

        for (k, ser) in self.series.iter().enumerate() {
            let color = COLORS[k % COLORS.len()];
            let visible: Vec<(usize, f64, f64)> = ser
                .points
                .iter()
                .enumerate()
                .filter(|(_, p)| !self.log_y || p.1 > 0.0)
                .map(|(i, p)| (i, p.0, p.1))
                .collect();
            let _ = writeln!(s, r#"<g class="series" data-name="{}">"#, escape(&ser.name));
            match ser.style {
                Style::Line => {
                    let pts: Vec<String> =
                        visible.iter().map(|&(_, x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
                    let _ = writeln!(
                        s,
                        r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
                        pts.join(" ")
                    );
                }
                Style::Markers => {
                    for &(i, x, y) in &visible {
                        let e = ser.errors.get(i).copied().unwrap_or(0.0);
                        if e > 0.0 {
                            let lo = if self.log_y && y - e <= 0.0 { y } else { y - e };
                            let _ = writeln!(
                                s,
                                r#"<line class="errorbar" x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="{color}"/>"#,
                                py(lo),
                                py(y + e),
                                x = px(x)
                            );
                        }
                        let _ = writeln!(
                            s,
                            r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{color}"/>"#,
                            px(x),
                            py(y)
                        );
                    }
                }
            }
            let _ = writeln!(s, "</g>");
            let ly = TOP + 14.0 * (k as f64 + 1.0);
            let _ = writeln!(
                s,
                r#"<g class="legend"><rect x="{}" y="{}" width="10" height="10" fill="{color}"/><text x="{}" y="{}">{}</text></g>"#,
                W - RIGHT - 200.0,
                ly - 9.0,
                W - RIGHT - 185.0,
                ly,
                escape(&ser.name)
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

/// Keeps at most `max` roughly evenly spaced points.
fn thin(points: Vec<(f64, f64)>, max: usize) -> Vec<(f64, f64)> {
    if points.len() <= max {
        return points;
    }
    let step = points.len() as f64 / max as f64;
    let mut out: Vec<(f64, f64)> = (0..max).map(|i| points[(i as f64 * step) as usize]).collect();
    if let Some(&last) = points.last() {
        out.push(last);
    }
    out
}

fn survival_figure(curve: &SurvivalCurve) -> Figure {
    let pts: Vec<(f64, f64)> = (0..curve.survivors.len())
        .filter(|&n| curve.survivors[n] > 0)
        .map(|n| (n as f64, curve.fraction(n)))
        .collect();
    let mut series = vec![Series::markers("Monte Carlo survival", thin(pts, 400), Vec::new())];
    let mut title = "survival fraction".to_string();
    if let Ok(fit) = fit_rate(curve, DEFAULT_BURN_IN) {
        let s0 = curve.fraction(fit.first);
        let line = [fit.first, fit.last]
            .iter()
            .map(|&n| (n as f64, s0 * (-fit.rate * (n - fit.first) as f64).exp()))
            .collect();
        series.push(Series::line("fitted exponential", line));
        title = format!("survival fraction, fitted rate {:.4e} +- {:.1e}", fit.rate, fit.stderr);
    }
    Figure {
        title,
        xlabel: "n".into(),
        ylabel: "S_n / total (log scale)".into(),
        log_y: true,
        series,
    }
}

fn sweep_figure(result: &SweepResult, kind: PlotKind) -> Figure {
    let ok: Vec<_> = result.rows.iter().filter(|r| r.rate_mc.is_some()).collect();
    let x = |r: &super::run::SweepRow| match kind {
        PlotKind::RateVsL => r.sites as f64,
        _ => r.eps * r.eps,
    };
    let data = ok.iter().map(|r| (x(r), r.rate_mc.unwrap_or(0.0))).collect();
    let errors = ok.iter().map(|r| 3.0 * r.rate_mc_stderr.unwrap_or(0.0)).collect();
    // theta L d eps^2
    let mut reference: Vec<(f64, f64)> = ok
        .iter()
        .filter_map(|r| r.theta.map(|t| (x(r), t * (r.sites * r.d) as f64 * r.eps * r.eps)))
        .collect();
    reference.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (xlabel, title) = match kind {
        PlotKind::RateVsL => ("L", "collision rate against lattice size"),
        _ => ("eps^2", "collision rate against eps^2"),
    };
    Figure {
        title: title.into(),
        xlabel: xlabel.into(),
        ylabel: "rate".into(),
        log_y: false,
        series: vec![
            Series::markers("fitted rate (3 stderr bars)", data, errors),
            Series::line("theta L d eps^2", reference),
        ],
    }
}

fn hitting_figure(sample: &HittingSample) -> Figure {
    let mut t: Vec<f64> = sample
        .times
        .iter()
        .zip(&sample.censored)
        .filter(|(_, &c)| !c)
        .map(|(&v, _)| v as f64 * sample.rescale)
        .collect();
    t.sort_by(f64::total_cmp);
    let n = sample.times.len() as f64;
    let emp: Vec<(f64, f64)> = t.iter().enumerate().map(|(i, &v)| (v, (n - i as f64) / n)).collect();
    let tmax = t.last().copied().unwrap_or(1.0);
    let exact = (0..=200).map(|i| tmax * i as f64 / 200.0).map(|x| (x, (-x).exp())).collect();
    Figure {
        title: format!("rescaled hitting times (rescale {:.4e})", sample.rescale),
        xlabel: "t".into(),
        ylabel: "P(T >= t) (log scale)".into(),
        log_y: true,
        series: vec![
            Series::markers("empirical survival", thin(emp, 400), Vec::new()),
            Series::line("exp(-t)", exact),
        ],
    }
}

/// Reads `csv_path`, checks its columns against `kind` and writes an SVG.
/// Hitting times are rescaled by `rescale`, or by one over their mean.
pub fn emit_plot(csv_path: &Path, kind: PlotKind, svg_path: &Path, rescale: Option<f64>) -> Result<()> {
    let fig = match kind {
        PlotKind::Survival => survival_figure(&SurvivalCurve::read_csv(File::open(csv_path)?, csv_path)?),
        PlotKind::RateVsL | PlotKind::RateVsEps2 => sweep_figure(&SweepResult::read_csv(csv_path)?, kind),
        PlotKind::HittingLaw => {
            let mut sample = HittingSample::read_csv(File::open(csv_path)?, csv_path, 1.0)?;
            sample.rescale = match rescale {
                Some(r) => r,
                None => {
                    let mean = sample.times.iter().sum::<u64>() as f64 / sample.times.len().max(1) as f64;
                    if mean > 0.0 {
                        1.0 / mean
                    } else {
                        1.0
                    }
                }
            };
            hitting_figure(&sample)
        }
    };
    std::fs::write(svg_path, fig.render())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::monte_carlo::MeasureKind;

    fn curve() -> SurvivalCurve {
        let survivors: Vec<u64> = (0..=60).map(|n| (100_000.0 * (-0.05 * n as f64).exp()) as u64).collect();
        SurvivalCurve {
            n_max: 60,
            survivors,
            total: 100_000,
            seed: 0,
            measure_kind: MeasureKind::Lebesgue,
            conditioned: false,
        }
    }

    #[test]
    fn survival_plot_has_data_and_fit() {
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("s.csv");
        curve().save(&csv).unwrap();
        let svg = dir.path().join("s.svg");
        emit_plot(&csv, PlotKind::Survival, &svg, None).unwrap();
        let text = std::fs::read_to_string(&svg).unwrap();
        assert!(text.starts_with("<svg"));
        assert_eq!(text.matches(r#"class="series""#).count(), 2);
        assert_eq!(text.matches("<polyline").count(), 1);
        assert_eq!(text.matches("<circle").count(), 61);
        assert_eq!(text.matches(r#"class="axes""#).count(), 1);
    }

    #[test]
    fn wrong_columns_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("s.csv");
        curve().save(&csv).unwrap();
        let svg = dir.path().join("x.svg");
        for kind in [PlotKind::RateVsL, PlotKind::HittingLaw] {
            assert!(matches!(
                emit_plot(&csv, kind, &svg, None),
                Err(Error::SchemaMismatch { .. })
            ));
        }
    }

    #[test]
    fn kinds_parse() {
        for k in [PlotKind::Survival, PlotKind::RateVsL, PlotKind::RateVsEps2, PlotKind::HittingLaw] {
            assert_eq!(k.to_string().parse::<PlotKind>().unwrap(), k);
        }
        assert!("pie".parse::<PlotKind>().is_err());
    }
}
