//! PSNR and single-scale SSIM on `[0,1]` images.

use thiserror::Error;

use crate::image::ImageBuffer;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("image dimensions differ: {a_width}x{a_height}x{a_channels} vs {b_width}x{b_height}x{b_channels}")]
    DimensionMismatch {
        a_width: usize,
        a_height: usize,
        a_channels: usize,
        b_width: usize,
        b_height: usize,
        b_channels: usize,
    },
    #[error("image {width}x{height} is smaller than the {window}x{window} SSIM window")]
    ImageTooSmall {
        width: usize,
        height: usize,
        window: usize,
    },
}

fn check_dims(a: &ImageBuffer, b: &ImageBuffer) -> Result<(), MetricsError> {
    if !a.same_shape(b) {
        return Err(MetricsError::DimensionMismatch {
            a_width: a.width,
            a_height: a.height,
            a_channels: a.channels,
            b_width: b.width,
            b_height: b.height,
            b_channels: b.channels,
        });
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB with peak 1.0, over all pixels and
/// channels jointly. Both inputs are clamped to `[0,1]` before comparison;
/// identical images give `+∞`.
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64, MetricsError> {
    check_dims(a, b)?;
    let mut sse = 0.0f64;
    for (&x, &y) in a.data.iter().zip(b.data.iter()) {
        let d = x.clamp(0.0, 1.0) as f64 - y.clamp(0.0, 1.0) as f64;
        sse += d * d;
    }
    let mse = sse / a.data.len() as f64;
    if mse == 0.0 {
        Ok(f64::INFINITY)
    } else {
        Ok(10.0 * (1.0 / mse).log10())
    }
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn ssim_taps() -> [f64; SSIM_WINDOW] {
    let mut taps = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, t) in taps.iter_mut().enumerate() {
        *t = (-0.5 * ((i as f64 - half) / SSIM_SIGMA).powi(2)).exp();
        sum += *t;
    }
    for t in &mut taps {
        *t /= sum;
    }
    taps
}

fn to_gray(img: &ImageBuffer) -> Vec<f64> {
    let n = img.pixel_count();
    let mut gray = vec![0.0f64; n];
    for c in 0..img.channels {
        let plane = img.plane(c);
        for (g, &v) in gray.iter_mut().zip(plane.iter()) {
            *g += v.clamp(0.0, 1.0) as f64;
        }
    }
    let inv = 1.0 / img.channels as f64;
    for g in &mut gray {
        *g *= inv;
    }
    gray
}

/// Single-scale SSIM with the standard 11×11 Gaussian window (σ = 1.5),
/// K1 = 0.01, K2 = 0.03 and dynamic range 1.0, averaged over fully valid
/// window positions. Color inputs are converted to grayscale by channel mean.
pub fn ssim(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64, MetricsError> {
    check_dims(a, b)?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(MetricsError::ImageTooSmall {
            width: a.width,
            height: a.height,
            window: SSIM_WINDOW,
        });
    }
    let (w, h) = (a.width, a.height);
    let ga = to_gray(a);
    let gb = to_gray(b);
    let taps = ssim_taps();
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let half = SSIM_WINDOW / 2;

    // Separable weighted moments: horizontal pass over the five products,
    // then a vertical pass at each valid center.
    let fields: [&[f64]; 2] = [&ga, &gb];
    let mut hx = vec![0.0f64; w * h]; // E[a] horizontal
    let mut hy = vec![0.0f64; w * h];
    let mut hxx = vec![0.0f64; w * h];
    let mut hyy = vec![0.0f64; w * h];
    let mut hxy = vec![0.0f64; w * h];
    for y in 0..h {
        for x in half..w - half {
            let mut mx = 0.0;
            let mut my = 0.0;
            let mut mxx = 0.0;
            let mut myy = 0.0;
            let mut mxy = 0.0;
            for (i, &t) in taps.iter().enumerate() {
                let idx = y * w + x + i - half;
                let va = fields[0][idx];
                let vb = fields[1][idx];
                mx += t * va;
                my += t * vb;
                mxx += t * va * va;
                myy += t * vb * vb;
                mxy += t * va * vb;
            }
            let idx = y * w + x;
            hx[idx] = mx;
            hy[idx] = my;
            hxx[idx] = mxx;
            hyy[idx] = myy;
            hxy[idx] = mxy;
        }
    }

    let mut total = 0.0f64;
    let mut count = 0usize;
    for y in half..h - half {
        for x in half..w - half {
            let mut mx = 0.0;
            let mut my = 0.0;
            let mut mxx = 0.0;
            let mut myy = 0.0;
            let mut mxy = 0.0;
            for (i, &t) in taps.iter().enumerate() {
                let idx = (y + i - half) * w + x;
                mx += t * hx[idx];
                my += t * hy[idx];
                mxx += t * hxx[idx];
                myy += t * hyy[idx];
                mxy += t * hxy[idx];
            }
            let var_a = mxx - mx * mx;
            let var_b = myy - my * my;
            let cov = mxy - mx * my;
            let s = ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                / ((mx * mx + my * my + c1) * (var_a + var_b + c2));
            total += s;
            count += 1;
        }
    }
    Ok(total / count as f64)
}
