//! Line plots with seed spread, written as PNG and SVG.
//!
//! The bitmap build carries no font engine, so PNG files hold axes, series and
//! spread bars only; the SVG twin carries the title, axis names and legend.

use std::path::{Path, PathBuf};

use plotters::coord::Shift;
use plotters::prelude::*;

use crate::error::{Error, Result};

/// One curve: `(x, mean, low, high)` points.
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64, f64, f64)>,
}

#[derive(Clone, Debug)]
pub struct PlotSpec<'a> {
    pub title: &'a str,
    pub x_label: &'a str,
    pub y_label: &'a str,
}

const SIZE: (u32, u32) = (800, 560);

fn plot_err<E: std::fmt::Display>(e: E) -> Error {
    Error::Plot(e.to_string())
}

fn bounds(series: &[Series]) -> Option<((f64, f64), (f64, f64))> {
    let pts = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    let mut any = false;
    for &(x, m, lo, hi) in pts {
        if ![x, m, lo, hi].iter().all(|v| v.is_finite()) {
            continue;
        }
        any = true;
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(lo.min(m));
        y1 = y1.max(hi.max(m));
    }
    if !any {
        return None;
    }
    let pad = |a: f64, b: f64| {
        let w = if b > a { (b - a) * 0.05 } else { a.abs().max(1.0) * 0.05 };
        (a - w, b + w)
    };
    Some((pad(x0, x1), pad(y0, y1)))
}

fn draw<DB: DrawingBackend>(root: DrawingArea<DB, Shift>, spec: &PlotSpec<'_>, series: &[Series], text: bool) -> Result<()>
where
    DB::ErrorType: 'static,
{
    let ((x0, x1), (y0, y1)) = bounds(series).ok_or_else(|| Error::Plot("no finite points".into()))?;
    root.fill(&WHITE).map_err(plot_err)?;
    let mut builder = ChartBuilder::on(&root);
    builder.margin(20);
    if text {
        builder.caption(spec.title, ("sans-serif", 22)).x_label_area_size(45).y_label_area_size(60);
    } else {
        builder.x_label_area_size(10).y_label_area_size(10);
    }
    let mut chart = builder.build_cartesian_2d(x0..x1, y0..y1).map_err(plot_err)?;
    let mut mesh = chart.configure_mesh();
    if text {
        mesh.x_desc(spec.x_label).y_desc(spec.y_label);
    } else {
        mesh.x_labels(0).y_labels(0);
    }
    mesh.draw().map_err(plot_err)?;
    for (i, s) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        let line: Vec<(f64, f64)> = s.points.iter().map(|p| (p.0, p.1)).collect();
        let drawn = chart
            .draw_series(LineSeries::new(line.clone(), color.stroke_width(2)))
            .map_err(plot_err)?;
        if text {
            drawn
                .label(s.name.as_str())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
        }
        chart
            .draw_series(line.iter().map(|&(x, y)| Circle::new((x, y), 3, color.filled())))
            .map_err(plot_err)?;
        chart
            .draw_series(s.points.iter().map(|&(x, _, lo, hi)| PathElement::new(vec![(x, lo), (x, hi)], color)))
            .map_err(plot_err)?;
    }
    if text {
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(plot_err)?;
    }
    root.present().map_err(plot_err)?;
    Ok(())
}

/// Write `<stem>.png` and `<stem>.svg`; returns both paths.
pub fn line_plot(stem: &Path, spec: &PlotSpec<'_>, series: &[Series]) -> Result<Vec<PathBuf>> {
    if let Some(dir) = stem.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let png = stem.with_extension("png");
    let svg = stem.with_extension("svg");
    draw(BitMapBackend::new(&png, SIZE).into_drawing_area(), spec, series, false)?;
    draw(SVGBackend::new(&svg, SIZE).into_drawing_area(), spec, series, true)?;
    Ok(vec![png, svg])
}
