//! Image quality metrics: MAE, PSNR and Gaussian-window SSIM.
//!
//! SSIM uses an 11x11 Gaussian window (sigma 1.5) applied as a separable
//! zero-padded "same" convolution, with `C1 = 0.01²` and `C2 = 0.03²` for
//! data in `[0, 1]`. The same routine provides the analytic gradient used by
//! the training loss.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::image::Image;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

pub fn mae(a: &Image, b: &Image) -> Result<f64> {
    a.check_same_shape(b)?;
    let n = a.len() as f64;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / n)
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    a.check_same_shape(b)?;
    let n = a.len() as f64;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
}

/// PSNR for unit-range data; `f64::INFINITY` when the images are identical.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-10.0 * m.log10())
}

pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    a.check_same_shape(b)?;
    Ok(ssim_impl(a, b, false).0)
}

/// Mean SSIM and its gradient with respect to `a`.
pub fn ssim_with_grad(a: &Image, b: &Image) -> Result<(f64, Image)> {
    a.check_same_shape(b)?;
    let (value, grad) = ssim_impl(a, b, true);
    Ok((value, grad.expect("gradient requested")))
}

pub(crate) fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable zero-padded convolution with the (symmetric) SSIM window.
fn blur(src: &[f64], width: usize, height: usize, kernel: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    let mut tmp = vec![0.0; src.len()];
    for y in 0..height {
        let row = &src[y * width..(y + 1) * width];
        for x in 0..width {
            let mut acc = 0.0;
            for (k, w) in kernel.iter().enumerate() {
                let sx = x as isize + k as isize - r;
                if sx >= 0 && (sx as usize) < width {
                    acc += w * row[sx as usize];
                }
            }
            tmp[y * width + x] = acc;
        }
    }
    let mut out = vec![0.0; src.len()];
    for y in 0..height {
        for (k, w) in kernel.iter().enumerate() {
            let sy = y as isize + k as isize - r;
            if sy < 0 || sy as usize >= height {
                continue;
            }
            let src_row = &tmp[sy as usize * width..(sy as usize + 1) * width];
            let dst_row = &mut out[y * width..(y + 1) * width];
            for (d, s) in dst_row.iter_mut().zip(src_row) {
                *d += w * s;
            }
        }
    }
    out
}

fn ssim_impl(a: &Image, b: &Image, want_grad: bool) -> (f64, Option<Image>) {
    let (w, h) = (a.width(), a.height());
    let n = a.len();
    let kernel = gaussian_window();
    let x = a.data();
    let y = b.data();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(p, q)| p * q).collect();
    let mu_x = blur(x, w, h, &kernel);
    let mu_y = blur(y, w, h, &kernel);
    let e_xx = blur(&xx, w, h, &kernel);
    let e_yy = blur(&yy, w, h, &kernel);
    let e_xy = blur(&xy, w, h, &kernel);

    let mut total = 0.0;
    let (mut d_mu, mut d_exx, mut d_exy) = if want_grad {
        (vec![0.0; n], vec![0.0; n], vec![0.0; n])
    } else {
        (Vec::new(), Vec::new(), Vec::new())
    };
    for i in 0..n {
        let (mx, my) = (mu_x[i], mu_y[i]);
        let sxx = e_xx[i] - mx * mx;
        let syy = e_yy[i] - my * my;
        let sxy = e_xy[i] - mx * my;
        let a1 = 2.0 * mx * my + SSIM_C1;
        let a2 = 2.0 * sxy + SSIM_C2;
        let b1 = mx * mx + my * my + SSIM_C1;
        let b2 = sxx + syy + SSIM_C2;
        let s = a1 * a2 / (b1 * b2);
        total += s;
        if want_grad {
            // partials with respect to mu_x, sigma_xx, sigma_xy
            let ds_dmx = (2.0 * my * a2) / (b1 * b2) - s * 2.0 * mx / b1;
            let ds_dsxx = -s / b2;
            let ds_dsxy = 2.0 * a1 / (b1 * b2);
            // sigma_xx = E[x²] - mu_x², sigma_xy = E[xy] - mu_x mu_y
            d_mu[i] = ds_dmx - 2.0 * mx * ds_dsxx - my * ds_dsxy;
            d_exx[i] = ds_dsxx;
            d_exy[i] = ds_dsxy;
        }
    }
    let mean = total / n as f64;
    if !want_grad {
        return (mean, None);
    }
    let g_mu = blur(&d_mu, w, h, &kernel);
    let g_xx = blur(&d_exx, w, h, &kernel);
    let g_xy = blur(&d_exy, w, h, &kernel);
    let inv_n = 1.0 / n as f64;
    let grad: Vec<f64> = (0..n)
        .map(|i| (g_mu[i] + 2.0 * x[i] * g_xx[i] + y[i] * g_xy[i]) * inv_n)
        .collect();
    (mean, Some(Image::from_vec(w, h, grad).expect("same shape")))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub view_id: String,
    pub mae: f64,
    /// `None` encodes +∞ (identical images) in JSON.
    pub psnr: Option<f64>,
    pub ssim: f64,
    pub wall_seconds: f64,
    pub peak_memory_bytes: u64,
    pub parameter_count: usize,
}

impl ViewMetrics {
    pub fn psnr_value(&self) -> f64 {
        self.psnr.unwrap_or(f64::INFINITY)
    }
}

/// Compare a prediction against ground truth on one view.
pub fn evaluate_view(view_id: &str, predicted: &Image, truth: &Image) -> Result<ViewMetrics> {
    let p = predicted.clamped();
    let psnr_value = psnr(&p, truth)?;
    Ok(ViewMetrics {
        view_id: view_id.to_string(),
        mae: mae(&p, truth)?,
        psnr: psnr_value.is_finite().then_some(psnr_value),
        ssim: ssim(&p, truth)?,
        wall_seconds: 0.0,
        peak_memory_bytes: 0,
        parameter_count: 0,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub folds: Vec<ViewMetrics>,
    pub mean_mae: f64,
    pub mean_psnr: Option<f64>,
    pub mean_ssim: f64,
    pub total_wall_seconds: f64,
    pub peak_memory_bytes: u64,
    pub parameter_count: usize,
}

impl MetricsReport {
    pub fn from_folds(method: impl Into<String>, folds: Vec<ViewMetrics>) -> Self {
        let n = folds.len().max(1) as f64;
        let mean_psnr = folds.iter().map(|f| f.psnr_value()).sum::<f64>() / n;
        Self {
            method: method.into(),
            mean_mae: folds.iter().map(|f| f.mae).sum::<f64>() / n,
            mean_psnr: mean_psnr.is_finite().then_some(mean_psnr),
            mean_ssim: folds.iter().map(|f| f.ssim).sum::<f64>() / n,
            total_wall_seconds: folds.iter().map(|f| f.wall_seconds).sum(),
            peak_memory_bytes: folds.iter().map(|f| f.peak_memory_bytes).max().unwrap_or(0),
            parameter_count: folds.iter().map(|f| f.parameter_count).max().unwrap_or(0),
            folds,
        }
    }

    pub fn mean_psnr_value(&self) -> f64 {
        self.mean_psnr.unwrap_or(f64::INFINITY)
    }
}

/// Plain-text comparison table with the columns
/// `Model | MAE | PSNR | SSIM | Training time(s) | Memory cost (GB)`.
pub fn format_table(reports: &[MetricsReport]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<12} {:>9} {:>8} {:>6} {:>17} {:>17}\n",
        "Model", "MAE", "PSNR", "SSIM", "Training time(s)", "Memory cost (GB)"
    ));
    for r in reports {
        let psnr = match r.mean_psnr {
            Some(p) => format!("{p:.2}"),
            None => "inf".to_string(),
        };
        out.push_str(&format!(
            "{:<12} {:>9.5} {:>8} {:>6.3} {:>17.1} {:>17.3}\n",
            r.method,
            r.mean_mae,
            psnr,
            r.mean_ssim,
            r.total_wall_seconds,
            r.peak_memory_bytes as f64 / 1e9
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut impl Rng, w: usize, h: usize) -> Image {
        Image::from_fn(w, h, |_, _| rng.random_range(0.0..1.0))
    }

    /// Direct 2D-window SSIM: for each pixel, explicit weighted sums over the
    /// 11x11 neighbourhood with zero padding.
    fn reference_ssim(a: &Image, b: &Image) -> f64 {
        let half = 5isize;
        let mut g1 = [0.0; 11];
        for (i, v) in g1.iter_mut().enumerate() {
            let d = i as f64 - 5.0;
            *v = (-d * d / 4.5).exp();
        }
        let s: f64 = g1.iter().sum();
        let (w, h) = (a.width() as isize, a.height() as isize);
        let mut total = 0.0;
        for py in 0..h {
            for px in 0..w {
                let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in -half..=half {
                    for dx in -half..=half {
                        let (sx, sy) = (px + dx, py + dy);
                        if sx < 0 || sy < 0 || sx >= w || sy >= h {
                            continue;
                        }
                        let wt = g1[(dx + half) as usize] * g1[(dy + half) as usize] / (s * s);
                        let va = a.get(sx as usize, sy as usize);
                        let vb = b.get(sx as usize, sy as usize);
                        mx += wt * va;
                        my += wt * vb;
                        xx += wt * va * va;
                        yy += wt * vb * vb;
                        xy += wt * va * vb;
                    }
                }
                let vx = xx - mx * mx;
                let vy = yy - my * my;
                let cxy = xy - mx * my;
                total += ((2.0 * mx * my + 1e-4) * (2.0 * cxy + 9e-4))
                    / ((mx * mx + my * my + 1e-4) * (vx + vy + 9e-4));
            }
        }
        total / (w * h) as f64
    }

    #[test]
    fn identical_images() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_image(&mut rng, 20, 17);
        assert_eq!(mae(&a, &a).unwrap(), 0.0);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        assert_relative_eq!(ssim(&a, &a).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn constant_offset() {
        let a = Image::zeros(16, 16);
        let b = Image::filled(16, 16, 0.1);
        assert_relative_eq!(mae(&a, &b).unwrap(), 0.1, epsilon = 1e-15);
        assert_relative_eq!(psnr(&a, &b).unwrap(), 20.0, epsilon = 1e-9);
    }

    #[test]
    fn ssim_matches_direct_window_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..3 {
            let a = random_image(&mut rng, 32, 32);
            let b = random_image(&mut rng, 32, 32);
            assert_relative_eq!(ssim(&a, &b).unwrap(), reference_ssim(&a, &b), epsilon = 1e-6);
        }
    }

    #[test]
    fn metrics_are_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_image(&mut rng, 24, 19);
        let b = random_image(&mut rng, 24, 19);
        assert_eq!(mae(&a, &b).unwrap(), mae(&b, &a).unwrap());
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        assert_relative_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap(), epsilon = 1e-14);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let a = Image::zeros(4, 4);
        let b = Image::zeros(4, 5);
        assert!(mae(&a, &b).is_err());
        assert!(psnr(&a, &b).is_err());
        assert!(ssim(&a, &b).is_err());
    }

    #[test]
    fn ssim_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_image(&mut rng, 14, 12);
        let b = random_image(&mut rng, 14, 12);
        let (_, grad) = ssim_with_grad(&a, &b).unwrap();
        let h = 1e-6;
        for i in (0..a.len()).step_by(7) {
            let mut p = a.clone();
            let mut m = a.clone();
            p.data_mut()[i] += h;
            m.data_mut()[i] -= h;
            let fd = (ssim(&p, &b).unwrap() - ssim(&m, &b).unwrap()) / (2.0 * h);
            assert_relative_eq!(grad.data()[i], fd, epsilon = 1e-9, max_relative = 1e-5);
        }
    }

    #[test]
    fn report_means_are_arithmetic_means() {
        let folds: Vec<ViewMetrics> = (0..4)
            .map(|i| ViewMetrics {
                view_id: format!("cam{i}"),
                mae: 0.01 * i as f64,
                psnr: Some(30.0 + i as f64),
                ssim: 0.9 + 0.01 * i as f64,
                wall_seconds: 1.0,
                peak_memory_bytes: 100 * i as u64,
                parameter_count: 10,
            })
            .collect();
        let r = MetricsReport::from_folds("x", folds);
        assert_relative_eq!(r.mean_mae, 0.015, epsilon = 1e-15);
        assert_relative_eq!(r.mean_psnr.unwrap(), 31.5, epsilon = 1e-12);
        assert_relative_eq!(r.mean_ssim, 0.915, epsilon = 1e-12);
        assert_eq!(r.peak_memory_bytes, 300);
        let table = format_table(&[r]);
        assert!(table.starts_with("Model"));
        for col in ["MAE", "PSNR", "SSIM", "Training time(s)", "Memory cost (GB)"] {
            assert!(table.contains(col));
        }
    }
}
