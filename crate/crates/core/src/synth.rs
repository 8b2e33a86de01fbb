//! Deterministic synthetic test scenes: piecewise-smooth images with soft
//! edges, gradients and mild texture. Used by tests, benchmarks and demos in
//! place of shipping binary image assets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::image::ImageBuffer;

/// A "natural-looking" RGB scene: smooth background gradients, a handful of
/// anti-aliased elliptical shapes with distinct colors, and low-frequency
/// texture. Deterministic for a given seed.
pub fn natural_scene(width: usize, height: usize, seed: u64) -> ImageBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (wf, hf) = (width as f64, height as f64);

    // Per-channel smooth background: affine ramp plus one low-frequency wave.
    struct Bg {
        base: f64,
        gx: f64,
        gy: f64,
        amp: f64,
        fx: f64,
        fy: f64,
        phase: f64,
    }
    let bgs: Vec<Bg> = (0..3)
        .map(|_| Bg {
            base: rng.random_range(0.25..0.75),
            gx: rng.random_range(-0.3..0.3),
            gy: rng.random_range(-0.3..0.3),
            amp: rng.random_range(0.05..0.12),
            fx: rng.random_range(0.5..2.0),
            fy: rng.random_range(0.5..2.0),
            phase: rng.random_range(0.0..std::f64::consts::TAU),
        })
        .collect();

    // Rotated soft-edged ellipses, large to small so small ones stay visible.
    struct Shape {
        cx: f64,
        cy: f64,
        rx: f64,
        ry: f64,
        angle: f64,
        color: [f64; 3],
        edge: f64,
    }
    let mut shapes: Vec<Shape> = (0..12)
        .map(|_| Shape {
            cx: rng.random_range(0.1 * wf..0.9 * wf),
            cy: rng.random_range(0.1 * hf..0.9 * hf),
            rx: rng.random_range(0.04 * wf..0.28 * wf),
            ry: rng.random_range(0.04 * hf..0.28 * hf),
            angle: rng.random_range(0.0..std::f64::consts::PI),
            color: [
                rng.random_range(0.05..0.95),
                rng.random_range(0.05..0.95),
                rng.random_range(0.05..0.95),
            ],
            edge: rng.random_range(1.0..2.5),
        })
        .collect();
    shapes.sort_by(|a, b| (b.rx * b.ry).total_cmp(&(a.rx * a.ry)));

    let mut img = ImageBuffer::new(width, height, 3);
    for y in 0..height {
        for x in 0..width {
            let (fx, fy) = (x as f64 / wf, y as f64 / hf);
            let mut px = [0.0f64; 3];
            for (c, bg) in bgs.iter().enumerate() {
                px[c] = bg.base
                    + bg.gx * (fx - 0.5)
                    + bg.gy * (fy - 0.5)
                    + bg.amp
                        * (std::f64::consts::TAU * (bg.fx * fx + bg.fy * fy) + bg.phase).sin();
            }
            for s in &shapes {
                let dx = x as f64 - s.cx;
                let dy = y as f64 - s.cy;
                let (ca, sa) = (s.angle.cos(), s.angle.sin());
                let u = (ca * dx + sa * dy) / s.rx;
                let v = (-sa * dx + ca * dy) / s.ry;
                // Signed distance proxy in pixels, soft edge of width `edge`.
                let r = (u * u + v * v).sqrt();
                let d = (r - 1.0) * s.rx.min(s.ry);
                let t = (0.5 - d / s.edge).clamp(0.0, 1.0);
                let alpha = t * t * (3.0 - 2.0 * t);
                if alpha > 0.0 {
                    for c in 0..3 {
                        px[c] = px[c] * (1.0 - alpha) + s.color[c] * alpha;
                    }
                }
            }
            for c in 0..3 {
                img.set(x, y, c, px[c].clamp(0.02, 0.98) as f32);
            }
        }
    }
    img
}

/// Grayscale step edge: columns left of `width/2` at `lo`, the rest at `hi`.
pub fn step_scene(width: usize, height: usize, lo: f32, hi: f32) -> ImageBuffer {
    let mut img = ImageBuffer::new(width, height, 1);
    for y in 0..height {
        for x in 0..width {
            img.set(x, y, 0, if x < width / 2 { lo } else { hi });
        }
    }
    img
}
