//! Static SVG figures: RD curves and resource scatter plots.

use std::path::{Path, PathBuf};

use kdlic::metrics::results::{curves, profiles, ResultRecord};
use kdlic::metrics::RDCurve;
use kdlic::{Error, Result};
use plotters::prelude::*;

const SIZE: (u32, u32) = (800, 600);

fn plot_error(e: impl std::fmt::Display) -> Error {
    Error::Precondition(format!("plotting failed: {e}"))
}

/// Padded axis range covering `values`.
fn span(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    let pad = if hi > lo { (hi - lo) * 0.08 } else { lo.abs().max(1.0) * 0.1 };
    (lo - pad, hi + pad)
}

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    /// Join the points with a line.
    pub line: bool,
}

/// Renders one figure to an SVG string.
pub fn render(title: &str, x_desc: &str, y_desc: &str, series: &[Series]) -> Result<String> {
    let all = || series.iter().flat_map(|s| s.points.iter());
    if all().next().is_none() {
        return Err(Error::Precondition(format!("`{title}` has no points to plot")));
    }
    if let Some(bad) = all().find(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(Error::NumericInput(format!("`{title}` has a non-finite point {bad:?}")));
    }
    let (x0, x1) = span(all().map(|p| p.0));
    let (y0, y1) = span(all().map(|p| p.1));
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, SIZE).into_drawing_area();
        root.fill(&WHITE).map_err(plot_error)?;
        let mut chart = ChartBuilder::on(&root)
            .caption(title, ("sans-serif", 22))
            .margin(16)
            .x_label_area_size(44)
            .y_label_area_size(56)
            .build_cartesian_2d(x0..x1, y0..y1)
            .map_err(plot_error)?;
        chart.configure_mesh().x_desc(x_desc).y_desc(y_desc).draw().map_err(plot_error)?;
        for (i, s) in series.iter().enumerate() {
            let color = Palette99::pick(i).to_rgba();
            if s.line && s.points.len() > 1 {
                chart
                    .draw_series(LineSeries::new(s.points.iter().copied(), color.stroke_width(2)))
                    .map_err(plot_error)?;
            }
            chart
                .draw_series(s.points.iter().map(|&p| Circle::new(p, 4, color.filled())))
                .map_err(plot_error)?
                .label(s.label.as_str())
                .legend(move |(x, y)| Circle::new((x + 10, y), 4, color.filled()));
        }
        chart
            .configure_series_labels()
            .position(SeriesLabelPosition::LowerRight)
            .background_style(WHITE.mix(0.85))
            .border_style(BLACK)
            .draw()
            .map_err(plot_error)?;
        root.present().map_err(plot_error)?;
    }
    Ok(svg)
}

fn rd_series(curves: &[RDCurve]) -> Vec<Series> {
    curves
        .iter()
        .map(|c| {
            let mut points: Vec<(f64, f64)> = c.points.iter().map(|p| (p.bpp, p.psnr)).collect();
            points.sort_by(|a, b| a.0.total_cmp(&b.0));
            Series { label: c.model_id.clone(), points, line: true }
        })
        .collect()
}

/// Resource axes of the scatter plots: file stem, axis title, accessor.
type Axis = (&'static str, &'static str, fn(&kdlic::profiler::ProfileReport) -> Option<f64>);

const AXES: [Axis; 4] = [
    ("params", "parameters (M)", |r| Some(r.params_m)),
    ("gflops", "GFLOPs / frame", |r| Some(r.gflops_per_frame)),
    ("fps", "throughput (frames/s)", |r| Some(r.throughput_fps)),
    ("energy", "energy (mJ/frame)", |r| r.energy_mj_per_frame),
];

/// Writes `rd.svg` for RD records and, for models with both RD and profile
/// records, PSNR and bpp scatter plots against each resource axis. Nothing
/// is written unless every figure renders.
pub fn plot_results(records: &[ResultRecord], out_dir: &Path, title: &str) -> Result<Vec<PathBuf>> {
    let mut figures: Vec<(String, String)> = Vec::new();
    let rd = curves(records);
    if !rd.is_empty() {
        figures.push(("rd.svg".into(), render(title, "bits per pixel", "PSNR (dB)", &rd_series(&rd))?));
    }
    let reports = profiles(records);
    for (stem, desc, get) in AXES {
        let mut psnr = Vec::new();
        let mut bpp = Vec::new();
        for r in &reports {
            let (Some(x), Some(curve)) = (get(r), rd.iter().find(|c| c.model_id == r.model_id)) else {
                continue;
            };
            for p in &curve.points {
                let label = format!("{} {}", r.model_id, p.label);
                psnr.push(Series { label: label.clone(), points: vec![(x, p.psnr)], line: false });
                bpp.push(Series { label, points: vec![(x, p.bpp)], line: false });
            }
        }
        if !psnr.is_empty() {
            figures.push((format!("psnr_vs_{stem}.svg"), render(title, desc, "PSNR (dB)", &psnr)?));
            figures.push((format!("bpp_vs_{stem}.svg"), render(title, desc, "bits per pixel", &bpp)?));
        }
    }
    if figures.is_empty() {
        return Err(Error::Precondition("the results contain no RD points to plot".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(format!("creating {}", out_dir.display()), e))?;
    let mut written = Vec::new();
    for (name, svg) in figures {
        let path = out_dir.join(name);
        std::fs::write(&path, svg).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_series_are_rejected() {
        let s = [Series { label: "a".into(), points: vec![], line: true }];
        assert!(matches!(render("t", "x", "y", &s), Err(Error::Precondition(_))));
    }

    #[test]
    fn rendering_is_deterministic() {
        let s = [Series { label: "a".into(), points: vec![(0.1, 30.0), (0.5, 35.0)], line: true }];
        let a = render("t", "x", "y", &s).unwrap();
        assert_eq!(a, render("t", "x", "y", &s).unwrap());
        assert!(a.starts_with("<svg"));
    }

    #[test]
    fn single_points_get_a_visible_range() {
        assert!(span([2.0].into_iter()).0 < 2.0);
        assert_eq!(span([1.0, 3.0].into_iter()), (1.0 - 0.16, 3.0 + 0.16));
    }
}
