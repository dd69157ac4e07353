use crate::error::{Error, Result};
use crate::synthdata::{gaussian_taps, BBox};
use crate::tensor::Tensor;

fn check_2d(op: &'static str, map: &Tensor, bbox: &BBox) -> Result<(usize, usize)> {
    let &[h, w] = map.shape() else {
        return Err(Error::shape(op, format!("expected a 2-D map, got {:?}", map.shape())));
    };
    if bbox.height == 0 || bbox.width == 0 || bbox.top + bbox.height > h || bbox.left + bbox.width > w {
        return Err(Error::invalid(format!("{op}: bbox {bbox:?} outside a {h}×{w} map")));
    }
    Ok((h, w))
}

/// Effective heat ratio.
///
/// For thresholds `τ_i = i / (n − 1)`, `P_τ` is the set of positions with score
/// `≥ τ`; the ratio at `τ` is the in-box score mass of `P_τ` divided by `|P_τ|`
/// (0 when `P_τ` is empty). The result is the trapezoid area of the ratio over
/// `τ ∈ [0, 1]`.
pub fn ehr(map: &Tensor, bbox: &BBox, n_thresholds: usize) -> Result<f64> {
    let (_, w) = check_2d("ehr", map, bbox)?;
    if n_thresholds < 2 {
        return Err(Error::invalid("ehr needs at least 2 thresholds"));
    }
    let v = map.data();
    let ratios: Vec<f64> = (0..n_thresholds)
        .map(|i| {
            let tau = i as f64 / (n_thresholds - 1) as f64;
            let (mut count, mut inside) = (0usize, 0.0);
            for (k, &s) in v.iter().enumerate() {
                if s >= tau {
                    count += 1;
                    if bbox.contains(k / w, k % w) {
                        inside += s;
                    }
                }
            }
            if count == 0 {
                0.0
            } else {
                inside / count as f64
            }
        })
        .collect();
    let dt = 1.0 / (n_thresholds - 1) as f64;
    Ok(ratios.windows(2).map(|r| dt * (r[0] + r[1]) / 2.0).sum())
}

/// Fraction of the top-`n` positions (ties by ascending index) inside the box;
/// `n` defaults to the box area.
pub fn bbox_ratio(map: &Tensor, bbox: &BBox, n: Option<usize>) -> Result<f64> {
    let (_, w) = check_2d("bbox_ratio", map, bbox)?;
    let n = n.unwrap_or(bbox.area());
    if n == 0 || n > map.len() {
        return Err(Error::invalid(format!("bbox_ratio: n = {n} for {} positions", map.len())));
    }
    let order = super::descending_order(map.data());
    let hits = order[..n].iter().filter(|&&k| bbox.contains(k / w, k % w)).count();
    Ok(hits as f64 / n as f64)
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// The normalized 11×11 Gaussian window (σ = 1.5), row-major.
pub fn ssim_window() -> Vec<f64> {
    let t = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    t.iter().flat_map(|a| t.iter().map(move |b| a * b)).collect()
}

/// Structural similarity of two equally shaped 2-D maps with dynamic range 1:
/// the mean of the local SSIM over every window position fully inside the maps.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("ssim", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let &[h, w] = a.shape() else {
        return Err(Error::shape("ssim", format!("expected 2-D maps, got {:?}", a.shape())));
    };
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape("ssim", format!("{h}×{w} map smaller than the {SSIM_WINDOW}×{SSIM_WINDOW} window")));
    }
    let win = ssim_window();
    let (c1, c2) = ((SSIM_K1).powi(2), (SSIM_K2).powi(2));
    let (x, y) = (a.data(), b.data());
    let mut total = 0.0;
    let mut count = 0usize;
    for r0 in 0..=h - SSIM_WINDOW {
        for c0 in 0..=w - SSIM_WINDOW {
            let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..SSIM_WINDOW {
                for j in 0..SSIM_WINDOW {
                    let g = win[i * SSIM_WINDOW + j];
                    let k = (r0 + i) * w + c0 + j;
                    mx += g * x[k];
                    my += g * y[k];
                    xx += g * x[k] * x[k];
                    yy += g * y[k] * y[k];
                    xy += g * x[k] * y[k];
                }
            }
            let (vx, vy, cxy) = (xx - mx * mx, yy - my * my, xy - mx * my);
            total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}
