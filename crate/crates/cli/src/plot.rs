//! PNG figures: per-step error curves and single-sample scenario overlays.
//!
//! Text needs a TrueType font. One is looked up at `SAPI_FONT` or a few
//! common system paths; without one the figures are drawn unlabelled.

use crate::commands::PredictionDump;
use crate::error::CliError;
use plotters::prelude::*;
use plotters::style::{register_font, FontStyle};
use std::path::Path;
use std::sync::OnceLock;

const FONT_PATHS: [&str; 5] = [
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/TTF/DejaVuSans.ttf",
    "/usr/share/fonts/dejavu/DejaVuSans.ttf",
    "/System/Library/Fonts/Supplemental/Arial.ttf",
    "C:\\Windows\\Fonts\\arial.ttf",
];

fn has_font() -> bool {
    static FONT: OnceLock<bool> = OnceLock::new();
    *FONT.get_or_init(|| {
        let env = std::env::var("SAPI_FONT").ok();
        for p in env.iter().map(String::as_str).chain(FONT_PATHS) {
            if let Ok(bytes) = std::fs::read(p) {
                if register_font("sans-serif", FontStyle::Normal, Box::leak(bytes.into_boxed_slice())).is_ok() {
                    return true;
                }
            }
        }
        false
    })
}

fn draw_err<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Runtime(format!("drawing failed: {e}"))
}

const PALETTE: [RGBColor; 6] =
    [RGBColor(31, 119, 180), RGBColor(255, 127, 14), RGBColor(44, 160, 44), RGBColor(214, 39, 40), RGBColor(148, 103, 189), RGBColor(140, 86, 75)];

/// One line per `(label, per-step errors)` on shared axes.
pub fn per_step_chart(path: &Path, series: &[(String, Vec<f64>)]) -> Result<(), CliError> {
    let text = has_font();
    let root = BitMapBackend::new(path, (900, 560)).into_drawing_area();
    root.fill(&WHITE).map_err(draw_err)?;
    let steps = series.iter().map(|(_, v)| v.len()).max().unwrap_or(1).max(2);
    let ymax = series.iter().flat_map(|(_, v)| v.iter().copied()).fold(0.0f64, f64::max).max(1e-3) * 1.1;
    let mut builder = ChartBuilder::on(&root);
    builder.margin(20);
    if text {
        builder.caption("Displacement error per prediction step", ("sans-serif", 24)).x_label_area_size(45).y_label_area_size(60);
    }
    let mut chart = builder.build_cartesian_2d(1f64..steps as f64, 0f64..ymax).map_err(draw_err)?;
    let mut mesh = chart.configure_mesh();
    if text {
        mesh.x_desc("prediction step (0.4 s)").y_desc("mean displacement error [m]");
    } else {
        mesh.x_labels(0).y_labels(0);
    }
    mesh.draw().map_err(draw_err)?;
    for (i, (label, values)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<(f64, f64)> = values.iter().enumerate().map(|(k, e)| ((k + 1) as f64, *e)).collect();
        let drawn = chart.draw_series(LineSeries::new(pts.clone(), color.stroke_width(2))).map_err(draw_err)?;
        if text {
            drawn.label(label.as_str()).legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
        }
        chart.draw_series(pts.iter().map(|&p| Circle::new(p, 3, color.filled()))).map_err(draw_err)?;
    }
    if text {
        chart
            .configure_series_labels()
            .position(SeriesLabelPosition::UpperLeft)
            .background_style(WHITE.mix(0.85))
            .border_style(BLACK)
            .draw()
            .map_err(draw_err)?;
    }
    root.present().map_err(draw_err)
}

fn bounds(dump: &PredictionDump) -> (f64, f64, f64, f64) {
    let pts = dump.history.iter().chain(&dump.ground_truth).chain(&dump.prediction).chain(&dump.constant_velocity);
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in pts {
        x0 = x0.min(p[0]);
        x1 = x1.max(p[0]);
        y0 = y0.min(p[1]);
        y1 = y1.max(p[1]);
    }
    let pad = 12.0;
    let (cx, cy) = ((x0 + x1) / 2.0, (y0 + y1) / 2.0);
    let half = ((x1 - x0).max(y1 - y0) / 2.0 + pad).max(20.0);
    (cx - half, cx + half, cy - half, cy + half)
}

fn tuples(v: &[[f64; 2]]) -> Vec<(f64, f64)> {
    v.iter().map(|p| (p[0], p[1])).collect()
}

/// Ego-frame scene: gray ground, white lanes, vehicle boxes, faded history,
/// ground truth, prediction and the dashed constant-velocity reference.
pub fn overlay(path: &Path, dump: &PredictionDump) -> Result<(), CliError> {
    let text = has_font();
    let root = BitMapBackend::new(path, (760, 760)).into_drawing_area();
    root.fill(&WHITE).map_err(draw_err)?;
    let (x0, x1, y0, y1) = bounds(dump);
    let mut builder = ChartBuilder::on(&root);
    builder.margin(15);
    if text {
        builder
            .caption(format!("{} | {} | {:?}", dump.sample_id, dump.model, dump.behavior), ("sans-serif", 20))
            .x_label_area_size(40)
            .y_label_area_size(50);
    }
    let mut chart = builder.build_cartesian_2d(x0..x1, y0..y1).map_err(draw_err)?;
    chart.plotting_area().fill(&RGBColor(105, 105, 105)).map_err(draw_err)?;
    let mut mesh = chart.configure_mesh();
    mesh.disable_mesh();
    if text {
        mesh.x_desc("right [m]").y_desc("forward [m]");
    } else {
        mesh.x_labels(0).y_labels(0);
    }
    mesh.draw().map_err(draw_err)?;

    chart.draw_series(dump.lanes.iter().map(|l| Polygon::new(tuples(l), RGBColor(235, 235, 235).filled()))).map_err(draw_err)?;
    chart
        .draw_series(dump.lanes.iter().map(|l| {
            let mut ring = tuples(l);
            ring.extend(ring.first().copied());
            PathElement::new(ring, RGBColor(170, 170, 170).stroke_width(1))
        }))
        .map_err(draw_err)?;
    chart.draw_series(dump.vehicles.iter().map(|v| Polygon::new(tuples(v), RGBColor(70, 110, 200).mix(0.8).filled()))).map_err(draw_err)?;

    let history = tuples(&dump.history);
    chart.draw_series(history.iter().map(|&p| Circle::new(p, 3, RGBColor(60, 60, 60).mix(0.35).filled()))).map_err(draw_err)?;
    let last = history.last().copied().unwrap_or((0.0, 0.0));
    let with_start = |v: &[[f64; 2]]| std::iter::once(last).chain(tuples(v)).collect::<Vec<_>>();

    let cv = DashedLineSeries::new(with_start(&dump.constant_velocity), 8, 6, BLACK.stroke_width(2));
    let drawn = chart.draw_series(cv).map_err(draw_err)?;
    if text {
        drawn.label("constant velocity").legend(|(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], BLACK.stroke_width(2)));
    }
    let gt_color = RGBColor(20, 150, 40);
    let drawn = chart.draw_series(LineSeries::new(with_start(&dump.ground_truth), gt_color.stroke_width(3))).map_err(draw_err)?;
    if text {
        drawn.label("ground truth").legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], gt_color.stroke_width(3)));
    }
    let pred_color = RGBColor(215, 40, 40);
    let drawn = chart.draw_series(LineSeries::new(with_start(&dump.prediction), pred_color.stroke_width(3))).map_err(draw_err)?;
    if text {
        drawn.label("prediction").legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], pred_color.stroke_width(3)));
        chart
            .configure_series_labels()
            .position(SeriesLabelPosition::UpperLeft)
            .background_style(WHITE.mix(0.9))
            .border_style(BLACK)
            .draw()
            .map_err(draw_err)?;
    }
    root.present().map_err(draw_err)
}
