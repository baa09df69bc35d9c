//! Bjøntegaard delta rate and PSNR between two RD curves.
//!
//! Each curve is fitted in the (PSNR, log10 bpp) plane, the fits are
//! integrated analytically over the overlap of the two curves' ranges, and
//! the mean difference is reported.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::RDCurve;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BdFit {
    /// Least-squares cubic polynomial.
    #[default]
    Cubic,
    /// Piecewise cubic Hermite interpolation with monotone slopes.
    Pchip,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BdOptions {
    pub fit: BdFit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BdOutcome {
    /// Percent for BD-rate, dB for BD-PSNR.
    pub value: f64,
    /// Integration interval in the independent variable (PSNR for BD-rate,
    /// log10 bpp for BD-PSNR).
    pub overlap: (f64, f64),
    /// Fit actually used; curves with fewer than four points fall back to
    /// piecewise-linear.
    pub fit_used: String,
    pub warnings: Vec<String>,
}

/// Function of one variable that can be integrated exactly.
enum Fitted {
    /// Coefficients of `c0 + c1 x + c2 x^2 + c3 x^3`.
    Poly([f64; 4]),
    /// Per-segment `a + b t + c t^2 + d t^3` with `t = x - knots[i]`.
    Segments { knots: Vec<f64>, coeffs: Vec<[f64; 4]> },
}

fn antiderivative(c: &[f64; 4], t: f64) -> f64 {
    t * (c[0] + t * (c[1] / 2.0 + t * (c[2] / 3.0 + t * c[3] / 4.0)))
}

impl Fitted {
    fn integrate(&self, lo: f64, hi: f64) -> f64 {
        match self {
            Fitted::Poly(c) => antiderivative(c, hi) - antiderivative(c, lo),
            Fitted::Segments { knots, coeffs } => {
                let mut total = 0.0;
                for (i, c) in coeffs.iter().enumerate() {
                    let a = knots[i].max(lo);
                    let b = knots[i + 1].min(hi);
                    if b > a {
                        total += antiderivative(c, b - knots[i]) - antiderivative(c, a - knots[i]);
                    }
                }
                total
            }
        }
    }
}

fn cubic_least_squares(x: &[f64], y: &[f64]) -> Result<[f64; 4]> {
    let n = x.len();
    let a = DMatrix::from_fn(n, 4, |r, c| x[r].powi(c as i32));
    let b = DVector::from_column_slice(y);
    let sol = a.svd(true, true).solve(&b, 1e-14).map_err(|e| Error::Precondition(format!("cubic fit failed: {e}")))?;
    Ok([sol[0], sol[1], sol[2], sol[3]])
}

/// Endpoint slope, three-point formula kept shape-preserving.
fn pchip_edge(h0: f64, h1: f64, d0: f64, d1: f64) -> f64 {
    let d = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
    if d.signum() != d0.signum() {
        0.0
    } else if d0.signum() != d1.signum() && d.abs() > 3.0 * d0.abs() {
        3.0 * d0
    } else {
        d
    }
}

fn pchip_slopes(x: &[f64], y: &[f64]) -> Vec<f64> {
    let n = x.len();
    let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
    let delta: Vec<f64> = (0..n - 1).map(|i| (y[i + 1] - y[i]) / h[i]).collect();
    if n == 2 {
        return vec![delta[0], delta[0]];
    }
    let mut m = vec![0.0; n];
    for k in 1..n - 1 {
        if delta[k - 1] * delta[k] > 0.0 {
            let w1 = 2.0 * h[k] + h[k - 1];
            let w2 = h[k] + 2.0 * h[k - 1];
            m[k] = (w1 + w2) / (w1 / delta[k - 1] + w2 / delta[k]);
        }
    }
    m[0] = pchip_edge(h[0], h[1], delta[0], delta[1]);
    m[n - 1] = pchip_edge(h[n - 2], h[n - 3], delta[n - 2], delta[n - 3]);
    m
}

fn hermite_segments(x: &[f64], y: &[f64], m: &[f64]) -> Fitted {
    let coeffs = (0..x.len() - 1)
        .map(|i| {
            let h = x[i + 1] - x[i];
            let delta = (y[i + 1] - y[i]) / h;
            [y[i], m[i], (3.0 * delta - 2.0 * m[i] - m[i + 1]) / h, (m[i] + m[i + 1] - 2.0 * delta) / (h * h)]
        })
        .collect();
    Fitted::Segments { knots: x.to_vec(), coeffs }
}

fn fit(x: &[f64], y: &[f64], method: BdFit, warnings: &mut Vec<String>, which: &str) -> Result<(Fitted, &'static str)> {
    if x.len() < 4 {
        warnings.push(format!("{which} curve has {} points; using piecewise-linear interpolation", x.len()));
    }
    let needs_order = x.len() < 4 || method == BdFit::Pchip;
    let mut pairs: Vec<(f64, f64)> = x.iter().copied().zip(y.iter().copied()).collect();
    if needs_order {
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        if pairs.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::Precondition(format!(
                "{which} curve repeats an abscissa; interpolation needs distinct values"
            )));
        }
    }
    let xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    if x.len() < 4 {
        let coeffs = (0..xs.len() - 1).map(|i| [ys[i], (ys[i + 1] - ys[i]) / (xs[i + 1] - xs[i]), 0.0, 0.0]).collect();
        return Ok((Fitted::Segments { knots: xs, coeffs }, "linear"));
    }
    match method {
        BdFit::Cubic => Ok((Fitted::Poly(cubic_least_squares(&xs, &ys)?), "cubic")),
        BdFit::Pchip => {
            let m = pchip_slopes(&xs, &ys);
            Ok((hermite_segments(&xs, &ys, &m), "pchip"))
        }
    }
}

/// Sorts by rate, rejects repeated rates and flags non-monotone quality.
fn prepare(curve: &RDCurve, which: &str, warnings: &mut Vec<String>) -> Result<Vec<(f64, f64)>> {
    if curve.points.len() < 2 {
        return Err(Error::Precondition(format!(
            "{which} curve `{}` has {} point(s); BD metrics need at least 2",
            curve.model_id,
            curve.points.len()
        )));
    }
    let mut pts: Vec<(f64, f64)> = Vec::with_capacity(curve.points.len());
    for p in &curve.points {
        if !(p.bpp > 0.0 && p.bpp.is_finite() && p.psnr.is_finite()) {
            return Err(Error::NumericInput(format!(
                "{which} curve `{}` has a point with bpp {} and PSNR {}",
                curve.model_id, p.bpp, p.psnr
            )));
        }
        pts.push((p.bpp, p.psnr));
    }
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    if pts.windows(2).any(|w| w[1].0 <= w[0].0) {
        return Err(Error::Precondition(format!("{which} curve `{}` has repeated bpp values", curve.model_id)));
    }
    if pts.windows(2).any(|w| w[1].1 <= w[0].1) {
        let msg = format!("{which} curve `{}` is not strictly increasing in PSNR", curve.model_id);
        log::warn!("{msg}");
        warnings.push(msg);
    }
    Ok(pts)
}

fn range(v: &[f64]) -> (f64, f64) {
    v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

#[derive(Clone, Copy)]
enum Axis {
    /// Integrate log-rate over PSNR.
    Rate,
    /// Integrate PSNR over log-rate.
    Quality,
}

fn bd(reference: &RDCurve, test: &RDCurve, options: BdOptions, axis: Axis) -> Result<BdOutcome> {
    let mut warnings = Vec::new();
    let r = prepare(reference, "reference", &mut warnings)?;
    let t = prepare(test, "test", &mut warnings)?;
    let split = |pts: &[(f64, f64)]| -> (Vec<f64>, Vec<f64>) {
        let log_rate: Vec<f64> = pts.iter().map(|p| p.0.log10()).collect();
        let q: Vec<f64> = pts.iter().map(|p| p.1).collect();
        match axis {
            Axis::Rate => (q, log_rate),
            Axis::Quality => (log_rate, q),
        }
    };
    let (rx, ry) = split(&r);
    let (tx, ty) = split(&t);
    let rr = range(&rx);
    let tr = range(&tx);
    let lo = rr.0.max(tr.0);
    let hi = rr.1.min(tr.1);
    if hi <= lo {
        return Err(Error::NoOverlap { reference: rr, test: tr });
    }
    let (rf, used_r) = fit(&rx, &ry, options.fit, &mut warnings, "reference")?;
    let (tf, used_t) = fit(&tx, &ty, options.fit, &mut warnings, "test")?;
    let mean_diff = (tf.integrate(lo, hi) - rf.integrate(lo, hi)) / (hi - lo);
    let value = match axis {
        Axis::Rate => (10f64.powf(mean_diff) - 1.0) * 100.0,
        Axis::Quality => mean_diff,
    };
    let fit_used = if used_r == used_t { used_r.to_string() } else { format!("{used_r}/{used_t}") };
    Ok(BdOutcome { value, overlap: (lo, hi), fit_used, warnings })
}

/// Average bitrate change of `test` relative to `reference` at equal PSNR, in percent.
pub fn bd_rate(reference: &RDCurve, test: &RDCurve) -> Result<f64> {
    Ok(bd_rate_with(reference, test, BdOptions::default())?.value)
}

/// Average PSNR change of `test` relative to `reference` at equal rate, in dB.
pub fn bd_psnr(reference: &RDCurve, test: &RDCurve) -> Result<f64> {
    Ok(bd_psnr_with(reference, test, BdOptions::default())?.value)
}

pub fn bd_rate_with(reference: &RDCurve, test: &RDCurve, options: BdOptions) -> Result<BdOutcome> {
    bd(reference, test, options, Axis::Rate)
}

pub fn bd_psnr_with(reference: &RDCurve, test: &RDCurve, options: BdOptions) -> Result<BdOutcome> {
    bd(reference, test, options, Axis::Quality)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::RDPoint;

    fn curve(points: &[(f64, f64)]) -> RDCurve {
        RDCurve::new(
            "c",
            points.iter().map(|&(bpp, psnr)| RDPoint { bpp, psnr, msssim: None, label: String::new() }).collect(),
        )
    }

    fn reference() -> RDCurve {
        curve(&[(0.12, 27.1), (0.2, 28.9), (0.31, 30.4), (0.48, 32.2), (0.67, 34.5), (0.95, 36.0)])
    }

    #[test]
    fn pchip_reproduces_reference_slopes() {
        // scipy.interpolate.PchipInterpolator([0, 1, 3, 4], [0, 1, 1.5, 4]).derivative()(x)
        let m = pchip_slopes(&[0.0, 1.0, 3.0, 4.0], &[0.0, 1.0, 1.5, 4.0]);
        let expected = [1.25, 0.428_571_428_571_428_55, 0.5, 3.25];
        for (a, b) in m.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn hermite_integral_of_linear_data_is_exact() {
        let x = [0.0, 1.0, 2.5, 4.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        let f = hermite_segments(&x, &y, &pchip_slopes(&x, &y));
        assert!((f.integrate(0.5, 3.0) - (9.0 + 3.0 - 0.25 - 0.5)).abs() < 1e-12);
    }

    #[test]
    fn known_cubic_fit() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let y: Vec<f64> = x.iter().map(|v: &f64| 1.0 - v + 0.5 * v * v + 0.1 * v.powi(3)).collect();
        let c = cubic_least_squares(&x, &y).unwrap();
        for (a, b) in c.iter().zip([1.0, -1.0, 0.5, 0.1]) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn few_points_fall_back_with_warning() {
        let r = curve(&[(0.2, 30.0), (0.4, 33.0)]);
        let t = curve(&[(0.2, 31.0), (0.4, 34.0)]);
        let out = bd_psnr_with(&r, &t, BdOptions::default()).unwrap();
        assert!((out.value - 1.0).abs() < 1e-12);
        assert_eq!(out.fit_used, "linear");
        assert!(!out.warnings.is_empty());
        assert!(bd_psnr(&curve(&[(0.2, 30.0)]), &t).is_err());
    }

    #[test]
    fn disjoint_curves_report_both_ranges() {
        let r = curve(&[(0.1, 25.0), (0.2, 27.0), (0.3, 28.0), (0.4, 29.0)]);
        let t = curve(&[(1.0, 35.0), (2.0, 37.0), (3.0, 38.0), (4.0, 39.0)]);
        match bd_rate(&r, &t) {
            Err(Error::NoOverlap { reference, test }) => {
                assert_eq!(reference, (25.0, 29.0));
                assert_eq!(test, (35.0, 39.0));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn non_monotone_quality_warns() {
        let r = reference();
        let mut t = reference();
        t.points[2].psnr = 28.0;
        let out = bd_psnr_with(&r, &t, BdOptions::default()).unwrap();
        assert!(out.warnings.iter().any(|w| w.contains("not strictly increasing")));
    }

    #[test]
    fn pchip_variant_agrees_on_shifts() {
        let r = reference();
        let mut t = reference();
        t.points.iter_mut().for_each(|p| p.psnr += 1.0);
        let opts = BdOptions { fit: BdFit::Pchip };
        assert!((bd_psnr_with(&r, &t, opts).unwrap().value - 1.0).abs() < 1e-9);
        let mut t = reference();
        t.points.iter_mut().for_each(|p| p.bpp *= 2.0);
        assert!((bd_rate_with(&r, &t, opts).unwrap().value - 100.0).abs() < 1e-6);
    }
}
