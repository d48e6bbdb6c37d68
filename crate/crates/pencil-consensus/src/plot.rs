//! Static SVG line plots of a simulation trace: plain text output with no
//! renderer dependencies, one polyline per data series.
//!
//! Four files: agent states per coordinate, protocol inputs, observer errors
//! per coordinate, and the energy function against its certified envelope on
//! a log scale. Non-finite and (on the log plot) non-positive points are
//! dropped from the polylines; a single surviving point degenerates into a
//! one-point polyline, which is still a valid SVG document.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::CliError;
use crate::sim::SimTrace;

/// File names emitted by [`emit_plots_svg`], in emission order.
pub const PLOT_FILES: [&str; 4] = [
    "states.svg",
    "inputs.svg",
    "observer_errors.svg",
    "lyapunov.svg",
];

const WIDTH: f64 = 860.0;
const PANEL_HEIGHT: f64 = 300.0;
const MARGIN_LEFT: f64 = 74.0;
const MARGIN_RIGHT: f64 = 24.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 46.0;
/// Cap on polyline vertices per series; longer traces are strided down.
const MAX_POINTS: usize = 1200;

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#7f7f7f",
];

struct Series {
    label: String,
    points: Vec<(f64, f64)>,
}

struct Panel {
    title: String,
    y_label: String,
    series: Vec<Series>,
}

fn tick_label(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if (1e-3..1e4).contains(&a) {
        let s = format!("{v:.4}");
        let s = s.trim_end_matches('0').trim_end_matches('.');
        s.to_string()
    } else {
        format!("{v:.3e}")
    }
}

fn finite_range(values: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    (lo <= hi).then_some((lo, hi))
}

/// Widens degenerate ranges so a constant series still gets a drawable band.
fn pad_range((lo, hi): (f64, f64)) -> (f64, f64) {
    if lo < hi {
        (lo, hi)
    } else {
        let pad = 0.5 + lo.abs() * 0.05;
        (lo - pad, hi + pad)
    }
}

fn render_panel(out: &mut String, panel: &Panel, y_offset: f64) {
    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = PANEL_HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let x0 = MARGIN_LEFT;
    let y0 = y_offset + MARGIN_TOP;

    let xr = finite_range(
        panel
            .series
            .iter()
            .flat_map(|s| s.points.iter().map(|p| p.0)),
    );
    let yr = finite_range(
        panel
            .series
            .iter()
            .flat_map(|s| s.points.iter().map(|p| p.1)),
    );
    let (x_lo, x_hi) = pad_range(xr.unwrap_or((0.0, 1.0)));
    let (y_lo, y_hi) = pad_range(yr.unwrap_or((0.0, 1.0)));
    let sx = move |x: f64| x0 + (x - x_lo) / (x_hi - x_lo) * plot_w;
    let sy = move |y: f64| y0 + plot_h - (y - y_lo) / (y_hi - y_lo) * plot_h;

    let _ = writeln!(
        out,
        r##"<g font-family="monospace" font-size="13" fill="#202020">"##
    );
    let _ = writeln!(
        out,
        r##"<rect x="{x0}" y="{y0}" width="{plot_w}" height="{plot_h}" fill="#fcfcfc" stroke="#404040"/>"##
    );
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" font-size="15">{}</text>"#,
        x0,
        y_offset + 24.0,
        panel.title
    );
    // axis extreme labels
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        x0,
        y0 + plot_h + 18.0,
        tick_label(x_lo)
    );
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        x0 + plot_w,
        y0 + plot_h + 18.0,
        tick_label(x_hi)
    );
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
        x0 - 6.0,
        y0 + plot_h,
        tick_label(y_lo)
    );
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
        x0 - 6.0,
        y0 + 12.0,
        tick_label(y_hi)
    );
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">t</text>"#,
        x0 + plot_w / 2.0,
        y0 + plot_h + 34.0
    );
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle" transform="rotate(-90 {} {})">{}</text>"#,
        x0 - 52.0,
        y0 + plot_h / 2.0,
        x0 - 52.0,
        y0 + plot_h / 2.0,
        panel.y_label
    );

    for (si, s) in panel.series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        let pts: String = s
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect::<Vec<_>>()
            .join(" ");
        let _ = writeln!(
            out,
            r#"<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.4"/>"#
        );
        // legend entry
        let lx = x0 + 10.0 + (si as f64) * 110.0;
        let ly = y0 + 14.0;
        let _ = writeln!(
            out,
            r#"<rect x="{lx}" y="{}" width="10" height="10" fill="{color}"/>"#,
            ly - 9.0
        );
        let _ = writeln!(out, r#"<text x="{}" y="{ly}">{}</text>"#, lx + 14.0, s.label);
    }
    let _ = writeln!(out, "</g>");
}

fn render_document(panels: &[Panel]) -> String {
    let height = PANEL_HEIGHT * panels.len() as f64;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (i, p) in panels.iter().enumerate() {
        render_panel(&mut out, p, PANEL_HEIGHT * i as f64);
    }
    let _ = writeln!(out, "</svg>");
    out
}

fn stride_for(len: usize) -> usize {
    len.div_ceil(MAX_POINTS).max(1)
}

/// t-indexed series of one scalar per sample, strided and filtered later.
fn sampled<'a>(
    trace: &'a SimTrace<f64>,
    mut value: impl FnMut(usize) -> f64 + 'a,
) -> Vec<(f64, f64)> {
    let step = stride_for(trace.len());
    let mut pts: Vec<(f64, f64)> = (0..trace.len())
        .step_by(step)
        .map(|s| (trace.times[s], value(s)))
        .collect();
    // the last sample carries the terminal value; never stride it away
    if trace.len() > 0 && (trace.len() - 1) % step != 0 {
        let s = trace.len() - 1;
        pts.push((trace.times[s], value(s)));
    }
    pts
}

/// Writes the four plot files into `dir` and returns their paths.
pub fn emit_plots_svg(trace: &SimTrace<f64>, dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    if trace.is_empty() {
        return Err(CliError::Usage("cannot plot an empty trace".into()));
    }
    fs::create_dir_all(dir)?;
    let n = trace.n;
    let n_agents = trace.n_followers + 1;

    let states_panels: Vec<Panel> = (0..n)
        .map(|i| Panel {
            title: format!("agent states, coordinate {}", i + 1),
            y_label: format!("x{}", i + 1),
            series: (0..n_agents)
                .map(|k| Series {
                    label: if k == 0 {
                        "leader".into()
                    } else {
                        format!("agent {k}")
                    },
                    points: sampled(trace, |s| trace.states[s][k][i]),
                })
                .collect(),
        })
        .collect();

    let inputs_panel = Panel {
        title: "protocol inputs".into(),
        y_label: "u".into(),
        series: (1..n_agents)
            .map(|k| Series {
                label: format!("agent {k}"),
                points: sampled(trace, |s| trace.inputs[s][k]),
            })
            .collect(),
    };

    let error_panels: Vec<Panel> = (0..n)
        .map(|i| Panel {
            title: format!("observer errors, coordinate {}", i + 1),
            y_label: format!("e{}", i + 1),
            series: (0..n_agents)
                .map(|k| Series {
                    label: if k == 0 {
                        "leader".into()
                    } else {
                        format!("agent {k}")
                    },
                    points: sampled(trace, |s| {
                        trace.observer_states[s][k][i] - trace.states[s][k][i]
                    }),
                })
                .collect(),
        })
        .collect();

    let log10_or_nan = |v: f64| {
        if v > 0.0 && v.is_finite() {
            v.log10()
        } else {
            f64::NAN
        }
    };
    let have_bounds = trace.bounds.len() == trace.len();
    let mut lyapunov_series = vec![Series {
        label: "V".into(),
        points: sampled(trace, |s| log10_or_nan(trace.v[s])),
    }];
    if have_bounds {
        lyapunov_series.push(Series {
            label: "envelope".into(),
            points: sampled(trace, |s| log10_or_nan(trace.bounds[s])),
        });
    }
    let lyapunov_panel = Panel {
        title: "energy function and certified envelope".into(),
        y_label: "log10 V".into(),
        series: lyapunov_series,
    };

    let files = [
        (PLOT_FILES[0], render_document(&states_panels)),
        (PLOT_FILES[1], render_document(&[inputs_panel])),
        (PLOT_FILES[2], render_document(&error_panels)),
        (PLOT_FILES[3], render_document(&[lyapunov_panel])),
    ];
    let mut paths = Vec::with_capacity(files.len());
    for (name, text) in files {
        let path = dir.join(name);
        fs::write(&path, text)?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthesis::SynthMode;
    use nalgebra::dvector;

    fn single_sample_trace() -> SimTrace<f64> {
        let mut trace = SimTrace::empty(SynthMode::OutputFeedback, 2, 1);
        trace.times.push(0.0);
        trace.taus.push(0.0);
        trace.states.push(vec![dvector![0.5, 0.0], dvector![2.0, 1.0]]);
        trace
            .observer_states
            .push(vec![dvector![0.0, 0.0], dvector![0.0, 0.0]]);
        trace.inputs.push(vec![0.0, -3.0]);
        trace.eta_hat.push(dvector![0.0, 0.0]);
        if let Some(eps) = trace.epsilon.as_mut() {
            eps.push(dvector![1.0, 0.5]);
        }
        trace.v.push(4.0);
        trace.bounds.push(8.0);
        trace
    }

    #[test]
    fn single_sample_trace_renders_valid_degenerate_documents() {
        let trace = single_sample_trace();
        let dir = std::env::temp_dir().join("pencil-consensus-plot-single");
        let files = emit_plots_svg(&trace, &dir).unwrap();
        assert_eq!(files.len(), 4);
        for f in &files {
            let text = fs::read_to_string(f).unwrap();
            assert!(text.starts_with("<svg "), "{f:?}");
            assert!(text.trim_end().ends_with("</svg>"), "{f:?}");
            assert!(text.contains("<polyline"), "{f:?}");
            assert!(!text.contains("NaN"), "{f:?}");
            // every opened group is closed
            assert_eq!(text.matches("<g ").count(), text.matches("</g>").count());
        }
        // degenerate polyline: a single coordinate pair, no separating space
        let states = fs::read_to_string(&files[0]).unwrap();
        let poly = states
            .lines()
            .find(|l| l.starts_with("<polyline"))
            .unwrap();
        let pts = poly.split("points=\"").nth(1).unwrap();
        let pts = &pts[..pts.find('"').unwrap()];
        assert_eq!(pts.split(' ').count(), 1, "{pts:?}");
    }

    #[test]
    fn empty_trace_is_refused() {
        let trace = SimTrace::empty(SynthMode::StateFeedback, 2, 1);
        let dir = std::env::temp_dir().join("pencil-consensus-plot-empty");
        assert!(emit_plots_svg(&trace, &dir).is_err());
    }

    #[test]
    fn envelope_series_is_emitted_only_when_bounds_exist() {
        let mut trace = single_sample_trace();
        let dir = std::env::temp_dir().join("pencil-consensus-plot-env");
        emit_plots_svg(&trace, &dir).unwrap();
        let text = fs::read_to_string(dir.join(PLOT_FILES[3])).unwrap();
        assert!(text.contains(">envelope</text>"));

        trace.bounds.clear();
        emit_plots_svg(&trace, &dir).unwrap();
        let text = fs::read_to_string(dir.join(PLOT_FILES[3])).unwrap();
        assert!(!text.contains(">envelope</text>"));
    }
}
