use std::fmt::Write;

use crate::eval::{EvalReport, TraceSample};
use crate::policy::Variant;

const PANEL_W: f64 = 420.0;
const PANEL_H: f64 = 240.0;
const MARGIN: f64 = 48.0;

struct Series {
    label: &'static str,
    color: &'static str,
    dashed: bool,
    right_axis: bool,
    points: Vec<(f64, f64)>,
}

/// Tick-by-tick mean over all trials of one object.
fn mean_trace(report: &EvalReport, object_index: usize) -> Vec<TraceSample> {
    let traces: Vec<&[TraceSample]> = report
        .trials
        .iter()
        .filter(|t| t.object_index == object_index)
        .map(|t| t.trace.as_slice())
        .collect();
    let len = traces.iter().map(|t| t.len()).min().unwrap_or(0);
    (0..len)
        .map(|i| {
            let n = traces.len() as f64;
            let mean =
                |f: fn(&TraceSample) -> f64| traces.iter().map(|t| f(&t[i])).sum::<f64>() / n;
            TraceSample {
                time: traces[0][i].time,
                aperture: mean(|s| s.aperture),
                applied_force: mean(|s| s.applied_force),
                contact_force: mean(|s| s.contact_force),
                commanded_aperture: mean(|s| s.commanded_aperture),
            }
        })
        .collect()
}

fn series_for(report: &EvalReport, trace: &[TraceSample]) -> Vec<Series> {
    let pick = |f: fn(&TraceSample) -> f64| trace.iter().map(|s| (s.time, f(s))).collect();
    let mut out = vec![Series {
        label: "aperture (mm)",
        color: "#1f5fbf",
        dashed: false,
        right_axis: false,
        points: pick(|s| s.aperture),
    }];
    if report.variant != Some(Variant::PositionOnly) {
        out.push(Series {
            label: "applied force (N)",
            color: "#2a9d3a",
            dashed: true,
            right_axis: true,
            points: pick(|s| s.applied_force),
        });
        out.push(Series {
            label: "contact force (N)",
            color: "#7b3fa6",
            dashed: true,
            right_axis: true,
            points: pick(|s| s.contact_force),
        });
    }
    out
}

fn max_of<'a>(series: impl Iterator<Item = &'a Series>, floor: f64) -> f64 {
    series
        .flat_map(|s| s.points.iter().map(|p| p.1))
        .filter(|v| v.is_finite())
        .fold(floor, f64::max)
}

fn panel(svg: &mut String, report: &EvalReport, trace: &[TraceSample], x0: f64) {
    let series = series_for(report, trace);
    let t_max = trace.last().map_or(1.0, |s| s.time).max(1e-9);
    let left_max = 1.1 * max_of(series.iter().filter(|s| !s.right_axis), 1.0);
    let right_max = 1.1 * max_of(series.iter().filter(|s| s.right_axis), 0.5);
    let (w, h) = (PANEL_W - 2.0 * MARGIN, PANEL_H - 2.0 * MARGIN);
    let px = |t: f64| x0 + MARGIN + w * t / t_max;
    let py = |v: f64, max: f64| MARGIN + h * (1.0 - v / max);

    let _ = writeln!(
        svg,
        r##"<text x="{:.1}" y="{:.1}" font-size="13" text-anchor="middle">{}</text>"##,
        x0 + PANEL_W / 2.0,
        MARGIN / 2.0,
        report.agent
    );
    let _ = writeln!(
        svg,
        r##"<rect x="{:.1}" y="{MARGIN}" width="{w:.1}" height="{h:.1}" fill="none" stroke="#888"/>"##,
        x0 + MARGIN
    );
    let _ = writeln!(
        svg,
        r##"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="end">{left_max:.0}</text>"##,
        x0 + MARGIN - 4.0,
        MARGIN + 4.0
    );
    let _ = writeln!(
        svg,
        r##"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="middle">{t_max:.2} s</text>"##,
        x0 + MARGIN + w,
        MARGIN + h + 14.0
    );
    if series.iter().any(|s| s.right_axis) {
        let _ = writeln!(
            svg,
            r##"<text x="{:.1}" y="{:.1}" font-size="10">{right_max:.1} N</text>"##,
            x0 + MARGIN + w + 4.0,
            MARGIN + 4.0
        );
    }
    for (k, s) in series.iter().enumerate() {
        let max = if s.right_axis { right_max } else { left_max };
        let points: Vec<String> = s
            .points
            .iter()
            .map(|&(t, v)| format!("{:.1},{:.1}", px(t), py(v, max)))
            .collect();
        let dash = if s.dashed {
            r#" stroke-dasharray="5 3""#
        } else {
            ""
        };
        let _ = writeln!(
            svg,
            r##"<polyline fill="none" stroke="{}" stroke-width="1.8"{dash} points="{}"/>"##,
            s.color,
            points.join(" ")
        );
        let ly = MARGIN + h + 28.0 + 12.0 * k as f64;
        let _ = writeln!(
            svg,
            r##"<line x1="{:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{}"{dash}/><text x="{:.1}" y="{:.1}" font-size="10">{}</text>"##,
            x0 + MARGIN,
            x0 + MARGIN + 18.0,
            s.color,
            x0 + MARGIN + 22.0,
            ly + 3.0,
            s.label
        );
    }
}

/// Side-by-side panels of the mean grasp trace of one object, one panel per
/// evaluation report.
pub fn trace_svg(object: &str, object_index: usize, reports: &[EvalReport]) -> String {
    let width = PANEL_W * reports.len().max(1) as f64;
    let height = PANEL_H + 20.0;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" font-family="sans-serif">"#
    );
    let _ = writeln!(svg, "<title>{}</title>", escape(object));
    for (i, r) in reports.iter().enumerate() {
        let trace = mean_trace(r, object_index);
        panel(&mut svg, r, &trace, PANEL_W * i as f64);
    }
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}
