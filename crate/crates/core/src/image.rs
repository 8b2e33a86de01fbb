//! Planar float image storage and a small blur helper used by the
//! segmentation-based initializer.

/// Planar H×W×C float image. Values are nominally in `[0,1]`; out-of-range
/// samples are allowed during optimization (e.g. unclamped noise targets) and
/// clamping happens only at export or metric time.
///
/// Layout: channel-major, row-major within each plane, so sample `(x, y, c)`
/// lives at `data[c * width * height + y * width + x]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer {
    pub width: usize,
    pub height: usize,
    /// 1 (grayscale) or 3 (RGB).
    pub channels: usize,
    pub data: Vec<f32>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        assert!(channels == 1 || channels == 3, "channels must be 1 or 3");
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    /// Constant-valued image; `value` is broadcast across channels.
    pub fn constant(width: usize, height: usize, channels: usize, value: f32) -> Self {
        let mut img = Self::new(width, height, channels);
        img.data.fill(value);
        img
    }

    #[inline]
    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.pixel_count();
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.pixel_count();
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[c * self.pixel_count() + y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, value: f32) {
        let n = self.pixel_count();
        self.data[c * n + y * self.width + x] = value;
    }

    /// Copy with every sample clamped to `[0,1]`.
    pub fn clamped(&self) -> Self {
        let mut out = self.clone();
        for v in &mut out.data {
            *v = v.clamp(0.0, 1.0);
        }
        out
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.width == other.width
            && self.height == other.height
            && self.channels == other.channels
    }
}

/// Separable Gaussian blur with edge clamping. Used to stabilize region
/// growing on noisy inputs before segmentation; not part of the regression
/// model itself.
pub fn gaussian_blur(img: &ImageBuffer, sigma: f64) -> ImageBuffer {
    if sigma <= 0.0 {
        return img.clone();
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut taps = Vec::with_capacity((2 * radius + 1) as usize);
    let mut sum = 0.0;
    for i in -radius..=radius {
        let w = (-0.5 * (i as f64 / sigma).powi(2)).exp();
        taps.push(w);
        sum += w;
    }
    for w in &mut taps {
        *w /= sum;
    }

    let (w, h) = (img.width as i64, img.height as i64);
    let mut tmp = img.clone();
    let mut out = img.clone();
    for c in 0..img.channels {
        // Horizontal pass.
        let src = img.plane(c);
        let dst = tmp.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0f64;
                for (ti, tap) in taps.iter().enumerate() {
                    let sx = (x + ti as i64 - radius).clamp(0, w - 1);
                    acc += tap * src[(y * w + sx) as usize] as f64;
                }
                dst[(y * w + x) as usize] = acc as f32;
            }
        }
        // Vertical pass.
        let src = tmp.plane(c);
        let dst = out.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0f64;
                for (ti, tap) in taps.iter().enumerate() {
                    let sy = (y + ti as i64 - radius).clamp(0, h - 1);
                    acc += tap * src[(sy * w + x) as usize] as f64;
                }
                dst[(y * w + x) as usize] = acc as f32;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn planar_indexing_round_trips() {
        let mut img = ImageBuffer::new(4, 3, 3);
        img.set(2, 1, 2, 0.5);
        assert_eq!(img.get(2, 1, 2), 0.5);
        assert_eq!(img.data[2 * 12 + 1 * 4 + 2], 0.5);
    }

    #[test]
    fn blur_preserves_constant_images() {
        let img = ImageBuffer::constant(16, 16, 1, 0.42);
        let blurred = gaussian_blur(&img, 2.0);
        for v in &blurred.data {
            assert!((v - 0.42).abs() < 1e-6);
        }
    }

    #[test]
    fn blur_reduces_noise_variance() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut img = ImageBuffer::new(64, 64, 1);
        for v in &mut img.data {
            *v = rng.random_range(0.0..1.0);
        }
        let blurred = gaussian_blur(&img, 2.0);
        let var = |d: &[f32]| {
            let mean = d.iter().map(|v| *v as f64).sum::<f64>() / d.len() as f64;
            d.iter().map(|v| (*v as f64 - mean).powi(2)).sum::<f64>() / d.len() as f64
        };
        assert!(var(&blurred.data) < 0.2 * var(&img.data));
    }
}
