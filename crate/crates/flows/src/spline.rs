use crate::{Error, Result};

/// Minimum bin fraction and knot derivative, keeping the transform away
/// from degenerate slopes.
pub(crate) const MIN_BIN_FRACTION: f64 = 1e-3;
pub(crate) const MIN_DERIVATIVE: f64 = 1e-3;

/// Shift such that softplus(0 + SHIFT) + MIN_DERIVATIVE == 1, so raw zeros
/// give unit knot derivatives (identity initialization).
pub(crate) fn derivative_shift() -> f64 {
    ((1.0 - MIN_DERIVATIVE).exp_m1()).ln()
}

/// Monotone rational-quadratic spline knots for one dimension: `x`/`y` are
/// the K+1 knot positions, `d` the K+1 knot derivatives.
#[derive(Debug, Clone)]
pub(crate) struct KnotSet {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub d: Vec<f64>,
}

/// Normalized widths/heights summing to the interval length, with K+1
/// positive derivatives. Borrowed view used by the standalone transform.
#[derive(Debug, Clone, Copy)]
pub struct SplineSegments<'a> {
    pub widths: &'a [f64],
    pub heights: &'a [f64],
    pub derivatives: &'a [f64],
}

/// Softmax with a floor: min + (1 - K*min) * softmax(raw), scaled to `span`.
pub(crate) fn normalized_bins(raw: &[f64], span: f64) -> Vec<f64> {
    let k = raw.len();
    let max = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = raw.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = out.iter().sum();
    for v in out.iter_mut() {
        *v = (MIN_BIN_FRACTION + (1.0 - k as f64 * MIN_BIN_FRACTION) * (*v / total)) * span;
    }
    out
}

/// Build knots from a raw conditioner block of 3K-1 values:
/// K width logits, K height logits, K-1 interior derivative raws.
/// Boundary derivatives are pinned to one to match the linear tails.
pub(crate) fn knots_from_raw(raw: &[f64], bins: usize, lo: f64, hi: f64) -> KnotSet {
    debug_assert_eq!(raw.len(), 3 * bins - 1);
    let span = hi - lo;
    let widths = normalized_bins(&raw[..bins], span);
    let heights = normalized_bins(&raw[bins..2 * bins], span);
    let shift = derivative_shift();
    let mut x = Vec::with_capacity(bins + 1);
    let mut y = Vec::with_capacity(bins + 1);
    x.push(lo);
    y.push(lo);
    for i in 0..bins {
        x.push(x[i] + widths[i]);
        y.push(y[i] + heights[i]);
    }
    x[bins] = hi;
    y[bins] = hi;
    let mut d = Vec::with_capacity(bins + 1);
    d.push(1.0);
    for r in &raw[2 * bins..] {
        d.push(MIN_DERIVATIVE + softplus(r + shift));
    }
    d.push(1.0);
    KnotSet { x, y, d }
}

fn softplus(v: f64) -> f64 {
    v.max(0.0) + (-v.abs()).exp().ln_1p()
}

fn find_bin(knots: &[f64], v: f64) -> usize {
    let k = knots.len() - 1;
    let mut idx = knots[1..k].partition_point(|&edge| edge <= v);
    if idx > k - 1 {
        idx = k - 1;
    }
    idx
}

/// Forward transform within the interval; caller handles the tails.
pub(crate) fn spline_forward(ks: &KnotSet, v: f64) -> (f64, f64) {
    let k = find_bin(&ks.x, v);
    let w = ks.x[k + 1] - ks.x[k];
    let h = ks.y[k + 1] - ks.y[k];
    let s = h / w;
    let (d0, d1) = (ks.d[k], ks.d[k + 1]);
    let xi = (v - ks.x[k]) / w;
    let xi1 = xi * (1.0 - xi);
    let den = s + (d1 + d0 - 2.0 * s) * xi1;
    let out = ks.y[k] + h * (s * xi * xi + d0 * xi1) / den;
    let num2 = d1 * xi * xi + 2.0 * s * xi1 + d0 * (1.0 - xi) * (1.0 - xi);
    let log_deriv = 2.0 * s.ln() + num2.ln() - 2.0 * den.ln();
    (out, log_deriv)
}

/// Inverse transform within the interval via the stable quadratic root.
pub(crate) fn spline_inverse(ks: &KnotSet, value: f64) -> (f64, f64) {
    let k = find_bin(&ks.y, value);
    let w = ks.x[k + 1] - ks.x[k];
    let h = ks.y[k + 1] - ks.y[k];
    let s = h / w;
    let (d0, d1) = (ks.d[k], ks.d[k + 1]);
    let yr = value - ks.y[k];
    let delta = d1 + d0 - 2.0 * s;
    let a = h * (s - d0) + yr * delta;
    let b = h * d0 - yr * delta;
    let c = -s * yr;
    let disc = (b * b - 4.0 * a * c).max(0.0);
    let xi = 2.0 * c / (-b - disc.sqrt());
    let xi = xi.clamp(0.0, 1.0);
    let out = ks.x[k] + xi * w;
    let xi1 = xi * (1.0 - xi);
    let den = s + delta * xi1;
    let num2 = d1 * xi * xi + 2.0 * s * xi1 + d0 * (1.0 - xi) * (1.0 - xi);
    let log_deriv_fwd = 2.0 * s.ln() + num2.ln() - 2.0 * den.ln();
    (out, -log_deriv_fwd)
}

/// Monotone rational-quadratic spline on the interval, identity with unit
/// slope outside it. Returns the mapped value and the log absolute
/// derivative of the applied map.
pub fn rq_spline_apply(
    value: f64,
    segments: &SplineSegments,
    interval: (f64, f64),
    inverse: bool,
) -> Result<(f64, f64)> {
    let (lo, hi) = interval;
    let k = segments.widths.len();
    if k == 0 || segments.heights.len() != k || segments.derivatives.len() != k + 1 {
        return Err(Error::SplineParams {
            reason: format!(
                "expected K widths, K heights, K+1 derivatives; got {}/{}/{}",
                k,
                segments.heights.len(),
                segments.derivatives.len()
            ),
        });
    }
    if !(lo < hi) {
        return Err(Error::SplineParams {
            reason: format!("invalid interval [{lo}, {hi}]"),
        });
    }
    let span = hi - lo;
    for (name, vals) in [("widths", segments.widths), ("heights", segments.heights)] {
        if vals.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::SplineParams {
                reason: format!("{name} must be strictly positive"),
            });
        }
        let total: f64 = vals.iter().sum();
        if (total - span).abs() > 1e-6 * span.max(1.0) {
            return Err(Error::SplineParams {
                reason: format!("{name} sum {total} does not cover the interval length {span}"),
            });
        }
    }
    if segments.derivatives.iter().any(|d| !(*d > 0.0)) {
        return Err(Error::SplineParams {
            reason: "derivatives must be strictly positive".into(),
        });
    }
    if !(lo..=hi).contains(&value) {
        return Ok((value, 0.0));
    }
    let mut x = Vec::with_capacity(k + 1);
    let mut y = Vec::with_capacity(k + 1);
    x.push(lo);
    y.push(lo);
    for i in 0..k {
        x.push(x[i] + segments.widths[i]);
        y.push(y[i] + segments.heights[i]);
    }
    x[k] = hi;
    y[k] = hi;
    let ks = KnotSet {
        x,
        y,
        d: segments.derivatives.to_vec(),
    };
    Ok(if inverse {
        spline_inverse(&ks, value)
    } else {
        spline_forward(&ks, value)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn equal_segments(k: usize, span: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        (
            vec![span / k as f64; k],
            vec![span / k as f64; k],
            vec![1.0; k + 1],
        )
    }

    #[test]
    fn identity_spline_is_identity() {
        let (w, h, d) = equal_segments(10, 10.0);
        let seg = SplineSegments {
            widths: &w,
            heights: &h,
            derivatives: &d,
        };
        let (out, ld) = rq_spline_apply(0.7, &seg, (-5.0, 5.0), false).unwrap();
        assert!((out - 0.7).abs() < 1e-12);
        assert!(ld.abs() < 1e-12);
    }

    #[test]
    fn outside_interval_is_identity() {
        let (w, h, mut d) = equal_segments(10, 10.0);
        d[3] = 0.2;
        d[7] = 4.0;
        let seg = SplineSegments {
            widths: &w,
            heights: &h,
            derivatives: &d,
        };
        let (out, ld) = rq_spline_apply(6.0, &seg, (-5.0, 5.0), false).unwrap();
        assert_eq!(out, 6.0);
        assert_eq!(ld, 0.0);
    }

    #[test]
    fn non_normalized_widths_rejected() {
        let w = vec![1.0; 10];
        let h = vec![1.0; 10];
        let d = vec![1.0; 11];
        let seg = SplineSegments {
            widths: &w,
            heights: &h,
            derivatives: &d,
        };
        assert!(rq_spline_apply(0.0, &seg, (-5.0, 6.0), false).is_err());
    }

    #[test]
    fn knots_from_zero_raw_are_identity() {
        let raw = vec![0.0; 29];
        let ks = knots_from_raw(&raw, 10, -5.0, 5.0);
        for (i, (x, y)) in ks.x.iter().zip(&ks.y).enumerate() {
            assert!((x - y).abs() < 1e-12, "knot {i}");
        }
        for d in &ks.d {
            assert!((d - 1.0).abs() < 1e-12);
        }
        let (out, ld) = spline_forward(&ks, 1.234);
        assert!((out - 1.234).abs() < 1e-12);
        assert!(ld.abs() < 1e-12);
    }
}
