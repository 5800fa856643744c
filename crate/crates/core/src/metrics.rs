//! Image metrics on interleaved RGB images in `[0, 1]`.

use crate::error::{check_len, Error, Result};

pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// `10 · log10(1 / MSE)`, capped at 99 dB for identical images.
pub fn psnr(a: &[f64], b: &[f64]) -> Result<f64> {
    check_len("image values", a.len(), b.len())?;
    if a.is_empty() {
        return Err(Error::Input("cannot compute PSNR of an empty image".into()));
    }
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse <= 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of one channel plane.
fn filter(plane: &[f64], w: usize, h: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let ow = w + 1 - n;
    let oh = h + 1 - n;
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    (out, ow, oh)
}

/// Mean SSIM with an 11×11 Gaussian window (σ = 1.5), averaged over channels.
pub fn ssim(a: &[f64], b: &[f64], width: usize, height: usize) -> Result<f64> {
    check_len("image values", width * height * 3, a.len())?;
    check_len("image values", a.len(), b.len())?;
    if width < SSIM_WINDOW || height < SSIM_WINDOW {
        return Err(Error::Input(format!(
            "image {width}x{height} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let k = gaussian_window();
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let mut total = 0.0;
    for ch in 0..3 {
        let pa: Vec<f64> = (0..width * height).map(|i| a[3 * i + ch]).collect();
        let pb: Vec<f64> = (0..width * height).map(|i| b[3 * i + ch]).collect();
        let prod = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p * q).collect() };
        let (mu_a, ow, oh) = filter(&pa, width, height, &k);
        let (mu_b, ..) = filter(&pb, width, height, &k);
        let (aa, ..) = filter(&prod(&pa, &pa), width, height, &k);
        let (bb, ..) = filter(&prod(&pb, &pb), width, height, &k);
        let (ab, ..) = filter(&prod(&pa, &pb), width, height, &k);
        let mut sum = 0.0;
        for i in 0..ow * oh {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        total += sum / (ow * oh) as f64;
    }
    Ok(total / 3.0)
}
