//! Segmentation-guided kernel initialization: deterministic mean-tracking
//! region growing over RGB similarity, then per-segment kernel allocation.

use std::collections::VecDeque;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::image::{gaussian_blur, ImageBuffer};
use crate::kernel::{Chol2, Kernel, KernelSet, Vec2, MAX_CHANNELS};

/// Default isotropic kernel scale at initialization, pixels.
pub const INIT_SCALE: f64 = 5.0;

#[derive(Debug, Error, PartialEq)]
pub enum SegmentError {
    #[error("{available} kernels cannot cover {segments} segments (need at least one each)")]
    TooFewKernels { available: usize, segments: usize },
}

/// Per-pixel segment labels with contiguous ids `0..count`, each segment
/// 4-connected.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentMap {
    pub labels: Vec<u32>,
    pub width: usize,
    pub height: usize,
    pub count: usize,
    /// Pixels per segment.
    pub sizes: Vec<usize>,
}

impl SegmentMap {
    pub fn label(&self, x: usize, y: usize) -> u32 {
        self.labels[y * self.width + x]
    }
}

#[inline]
fn max_channel_diff(a: &[f64; MAX_CHANNELS], b: &[f64; MAX_CHANNELS], channels: usize) -> f64 {
    let mut d = 0.0f64;
    for c in 0..channels {
        d = d.max((a[c] - b[c]).abs());
    }
    d
}

#[inline]
fn pixel_color_255(img: &ImageBuffer, idx: usize) -> [f64; MAX_CHANNELS] {
    let n = img.pixel_count();
    let mut c = [0.0; MAX_CHANNELS];
    for ch in 0..img.channels {
        c[ch] = img.data[ch * n + idx] as f64 * 255.0;
    }
    c
}

/// 4-connected region growing with running means: a pixel joins a region if
/// its max-channel absolute difference to the region's running mean (0–255
/// scale) is at most `threshold`. Regions smaller than `min_size` are merged
/// into their most similar 4-adjacent region. Scan order is row-major, so
/// the result is deterministic.
pub fn segment_image(img: &ImageBuffer, threshold: f64, min_size: usize) -> SegmentMap {
    assert!(threshold > 0.0);
    let (w, h) = (img.width, img.height);
    let n = w * h;
    const UNLABELED: u32 = u32::MAX;
    let mut labels = vec![UNLABELED; n];
    let mut means: Vec<[f64; MAX_CHANNELS]> = Vec::new();
    let mut sizes: Vec<usize> = Vec::new();
    let mut queue = VecDeque::new();

    let neighbors = |idx: usize, out: &mut [usize; 4]| -> usize {
        let (x, y) = (idx % w, idx / w);
        let mut count = 0;
        if y > 0 {
            out[count] = idx - w;
            count += 1;
        }
        if x > 0 {
            out[count] = idx - 1;
            count += 1;
        }
        if x + 1 < w {
            out[count] = idx + 1;
            count += 1;
        }
        if y + 1 < h {
            out[count] = idx + w;
            count += 1;
        }
        count
    };

    let mut nbuf = [0usize; 4];
    for seed in 0..n {
        if labels[seed] != UNLABELED {
            continue;
        }
        let region = means.len() as u32;
        labels[seed] = region;
        means.push(pixel_color_255(img, seed));
        sizes.push(1);
        queue.clear();
        queue.push_back(seed);
        while let Some(p) = queue.pop_front() {
            let count = neighbors(p, &mut nbuf);
            for &q in &nbuf[..count] {
                if labels[q] != UNLABELED {
                    continue;
                }
                let color = pixel_color_255(img, q);
                let r = region as usize;
                if max_channel_diff(&color, &means[r], img.channels) <= threshold {
                    labels[q] = region;
                    let size = sizes[r] as f64;
                    for c in 0..img.channels {
                        means[r][c] = (means[r][c] * size + color[c]) / (size + 1.0);
                    }
                    sizes[r] += 1;
                    queue.push_back(q);
                }
            }
        }
    }

    // Merge undersized regions into their most similar 4-adjacent region.
    // Simultaneous per-pass merging through a union-find; every pass at
    // least halves the number of undersized regions, so this terminates
    // quickly even on heavily fragmented inputs.
    let mut parent: Vec<u32> = (0..means.len() as u32).collect();
    fn find(parent: &mut [u32], mut r: u32) -> u32 {
        while parent[r as usize] != r {
            parent[r as usize] = parent[parent[r as usize] as usize];
            r = parent[r as usize];
        }
        r
    }
    loop {
        let small: Vec<bool> = sizes
            .iter()
            .enumerate()
            .map(|(r, &s)| s > 0 && s < min_size && parent[r] == r as u32)
            .collect();
        if !small.iter().any(|&s| s) || sizes.iter().filter(|&&s| s > 0).count() <= 1 {
            break;
        }
        // Best (most similar, ties to lowest id) adjacent region per small one.
        let mut best: Vec<Option<(f64, u32)>> = vec![None; means.len()];
        for idx in 0..n {
            let r = find(&mut parent, labels[idx]);
            if !small[r as usize] {
                continue;
            }
            let count = neighbors(idx, &mut nbuf);
            for &q in &nbuf[..count] {
                let rq = find(&mut parent, labels[q]);
                if rq == r {
                    continue;
                }
                let d = max_channel_diff(&means[r as usize], &means[rq as usize], img.channels);
                let candidate = (d, rq);
                best[r as usize] = Some(match best[r as usize] {
                    None => candidate,
                    Some(cur) => {
                        if candidate.0 < cur.0 || (candidate.0 == cur.0 && candidate.1 < cur.1) {
                            candidate
                        } else {
                            cur
                        }
                    }
                });
            }
        }
        let mut merged_any = false;
        for r in 0..means.len() {
            if small[r] {
                if let Some((_, target)) = best[r] {
                    let root_t = find(&mut parent, target);
                    if root_t != r as u32 {
                        parent[r] = root_t;
                        merged_any = true;
                    }
                }
            }
        }
        if !merged_any {
            break;
        }
        // Refresh labels, sizes and means for the merged regions.
        for s in &mut sizes {
            *s = 0;
        }
        let mut sums: Vec<[f64; MAX_CHANNELS]> = vec![[0.0; MAX_CHANNELS]; means.len()];
        for idx in 0..n {
            let r = find(&mut parent, labels[idx]);
            labels[idx] = r;
            sizes[r as usize] += 1;
            let c = pixel_color_255(img, idx);
            for ch in 0..img.channels {
                sums[r as usize][ch] += c[ch];
            }
        }
        for r in 0..means.len() {
            if sizes[r] > 0 {
                for ch in 0..img.channels {
                    means[r][ch] = sums[r][ch] / sizes[r] as f64;
                }
            }
        }
    }

    // Relabel contiguously, in row-major first-occurrence order.
    let mut remap = vec![u32::MAX; means.len()];
    let mut count = 0u32;
    for idx in 0..n {
        let r = find(&mut parent, labels[idx]);
        if remap[r as usize] == u32::MAX {
            remap[r as usize] = count;
            count += 1;
        }
        labels[idx] = remap[r as usize];
    }
    let mut final_sizes = vec![0usize; count as usize];
    for &l in &labels {
        final_sizes[l as usize] += 1;
    }
    SegmentMap {
        labels,
        width: w,
        height: h,
        count: count as usize,
        sizes: final_sizes,
    }
}

/// Largest-remainder apportionment of `total` kernels over the segment sizes,
/// with at least one kernel per segment.
fn apportion(sizes: &[usize], total: usize) -> Vec<usize> {
    let n = sizes.len();
    let total_pixels: usize = sizes.iter().sum();
    let ideal: Vec<f64> = sizes
        .iter()
        .map(|&s| total as f64 * s as f64 / total_pixels as f64)
        .collect();
    let mut counts: Vec<usize> = ideal.iter().map(|&v| v.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    // Hand out the remainder by largest fractional part (ties: larger
    // segment, then lower id).
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let ra = ideal[a] - ideal[a].floor();
        let rb = ideal[b] - ideal[b].floor();
        rb.partial_cmp(&ra)
            .unwrap()
            .then(sizes[b].cmp(&sizes[a]))
            .then(a.cmp(&b))
    });
    for i in 0..total.saturating_sub(assigned) {
        counts[order[i % n]] += 1;
    }
    // Lift empty segments to one kernel, paying from the largest counts
    // (ties: smaller segment first) so the sum stays exact.
    for c in &mut counts {
        if *c == 0 {
            *c = 1;
        }
    }
    let mut sum: usize = counts.iter().sum();
    while sum > total {
        let donor = (0..n)
            .filter(|&j| counts[j] > 1)
            .max_by(|&a, &b| {
                counts[a]
                    .cmp(&counts[b])
                    .then(sizes[b].cmp(&sizes[a]))
                    .then(b.cmp(&a))
            })
            .expect("total >= segment count guarantees a donor");
        counts[donor] -= 1;
        sum -= 1;
    }
    counts
}

/// Distributes `total` kernels over segments proportionally to segment size
/// (largest-remainder, at least one per segment). Centers are drawn uniformly
/// from each segment's pixels, experts start at the segment mean color, and
/// bandwidths at the isotropic 5-pixel scale.
pub fn allocate_kernels(
    img: &ImageBuffer,
    seg: &SegmentMap,
    total: usize,
    seed: u64,
) -> Result<KernelSet, SegmentError> {
    if total < seg.count {
        return Err(SegmentError::TooFewKernels {
            available: total,
            segments: seg.count,
        });
    }
    let counts = apportion(&seg.sizes, total);

    let mut pixels_of: Vec<Vec<u32>> = vec![Vec::new(); seg.count];
    for (idx, &l) in seg.labels.iter().enumerate() {
        pixels_of[l as usize].push(idx as u32);
    }
    let mut mean_color: Vec<[f64; MAX_CHANNELS]> = vec![[0.0; MAX_CHANNELS]; seg.count];
    for (r, pixels) in pixels_of.iter().enumerate() {
        for &p in pixels {
            let n = img.pixel_count();
            for c in 0..img.channels {
                mean_color[r][c] += img.data[c * n + p as usize] as f64;
            }
        }
        for c in 0..img.channels {
            mean_color[r][c] /= pixels.len() as f64;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kernels = Vec::with_capacity(total);
    for r in 0..seg.count {
        let picks = counts[r];
        let pool = &pixels_of[r];
        let chosen: Vec<usize> = if picks <= pool.len() {
            rand::seq::index::sample(&mut rng, pool.len(), picks).into_vec()
        } else {
            use rand::Rng;
            (0..picks).map(|_| rng.random_range(0..pool.len())).collect()
        };
        for i in chosen {
            let p = pool[i] as usize;
            let (x, y) = (p % img.width, p / img.width);
            kernels.push(Kernel::new(
                Vec2::new(x as f64, y as f64),
                Chol2::isotropic(INIT_SCALE),
                mean_color[r],
            ));
        }
    }
    Ok(KernelSet::new(kernels, img.channels))
}

/// Uniform random centers over the image domain with the isotropic 5-pixel
/// scale; experts start at the color of the nearest pixel.
pub fn random_init(img: &ImageBuffer, total: usize, seed: u64) -> KernelSet {
    random_init_scaled(img, total, seed, INIT_SCALE)
}

/// As [`random_init`] with an explicit isotropic scale; pass
/// `width / total` for the width-over-count rule.
pub fn random_init_scaled(img: &ImageBuffer, total: usize, seed: u64, scale: f64) -> KernelSet {
    use rand::Rng;
    assert!(total >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kernels = (0..total)
        .map(|_| {
            let x = rng.random_range(0.0..img.width as f64);
            let y = rng.random_range(0.0..img.height as f64);
            let px = (x.round() as usize).min(img.width - 1);
            let py = (y.round() as usize).min(img.height - 1);
            let mut m = [0.0; MAX_CHANNELS];
            for c in 0..img.channels {
                m[c] = img.get(px, py, c) as f64;
            }
            Kernel::new(Vec2::new(x, y), Chol2::isotropic(scale.max(crate::kernel::CHOL_FLOOR)), m)
        })
        .collect();
    KernelSet::new(kernels, img.channels)
}

/// How a kernel pool is initialized from an image.
#[derive(Clone, Debug, PartialEq)]
pub enum InitMethod {
    Random {
        scale: f64,
    },
    Segment {
        /// Pixel-difference threshold on the 0–255 scale.
        threshold: f64,
        min_size: usize,
        /// Gaussian blur applied to a copy of the image before region
        /// growing (0 disables it). Keeps segmentation usable on noisy
        /// inputs; kernel colors still come from the unblurred image.
        presmooth_sigma: f64,
    },
}

impl InitMethod {
    pub fn random() -> Self {
        InitMethod::Random { scale: INIT_SCALE }
    }

    pub fn segment(threshold: f64) -> Self {
        InitMethod::Segment {
            threshold,
            min_size: 16,
            presmooth_sigma: 0.0,
        }
    }

    pub fn build(&self, img: &ImageBuffer, total: usize, seed: u64) -> Result<KernelSet, SegmentError> {
        match *self {
            InitMethod::Random { scale } => Ok(random_init_scaled(img, total, seed, scale)),
            InitMethod::Segment {
                threshold,
                min_size,
                presmooth_sigma,
            } => {
                let seg = if presmooth_sigma > 0.0 {
                    segment_image(&gaussian_blur(img, presmooth_sigma), threshold, min_size)
                } else {
                    segment_image(img, threshold, min_size)
                };
                allocate_kernels(img, &seg, total, seed)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn half_and_half(w: usize, h: usize) -> ImageBuffer {
        let mut img = ImageBuffer::new(w, h, 3);
        for y in 0..h {
            for x in 0..w {
                let v = if x < w / 2 { 0.0 } else { 1.0 };
                for c in 0..3 {
                    img.set(x, y, c, v);
                }
            }
        }
        img
    }

    #[test]
    fn splits_black_white_halves() {
        let img = half_and_half(32, 16);
        let seg = segment_image(&img, 10.0, 16);
        assert_eq!(seg.count, 2);
        for y in 0..16 {
            for x in 0..32 {
                assert_eq!(seg.label(x, y), if x < 16 { 0 } else { 1 });
            }
        }
    }

    #[test]
    fn constant_image_is_one_segment() {
        let img = ImageBuffer::constant(24, 24, 3, 0.5);
        let seg = segment_image(&img, 10.0, 16);
        assert_eq!(seg.count, 1);
        assert_eq!(seg.sizes, vec![24 * 24]);
    }

    #[test]
    fn vacuous_threshold_gives_one_segment() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let mut img = ImageBuffer::new(16, 16, 3);
        for v in &mut img.data {
            *v = rng.random_range(0.0..1.0);
        }
        let seg = segment_image(&img, 255.0, 16);
        assert_eq!(seg.count, 1);
    }

    #[test]
    fn segmentation_is_deterministic() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut img = ImageBuffer::new(32, 32, 3);
        for v in &mut img.data {
            *v = rng.random_range(0.0..1.0);
        }
        let a = segment_image(&img, 40.0, 8);
        let b = segment_image(&img, 40.0, 8);
        assert_eq!(a, b);
    }

    #[test]
    fn small_regions_get_merged() {
        // A single bright pixel in a flat field is below any reasonable
        // min_size and must be absorbed.
        let mut img = ImageBuffer::constant(16, 16, 1, 0.2);
        img.set(8, 8, 0, 1.0);
        let seg = segment_image(&img, 10.0, 4);
        assert_eq!(seg.count, 1);
    }

    #[test]
    fn allocation_is_proportional() {
        let img = half_and_half(32, 16);
        let seg = segment_image(&img, 10.0, 16);
        let ks = allocate_kernels(&img, &seg, 10, 1).unwrap();
        assert_eq!(ks.len(), 10);
        let left = ks.kernels.iter().filter(|k| k.mu.x < 16.0).count();
        assert_eq!(left, 5);
    }

    #[test]
    fn allocation_largest_remainder_split() {
        // 90% / 10% split over 20 columns: 18 black, 2 white.
        let mut img = ImageBuffer::new(20, 10, 1);
        for y in 0..10 {
            for x in 0..20 {
                img.set(x, y, 0, if x < 18 { 0.0 } else { 1.0 });
            }
        }
        let seg = segment_image(&img, 10.0, 4);
        assert_eq!(seg.count, 2);
        let ks = allocate_kernels(&img, &seg, 10, 1).unwrap();
        let big = ks.kernels.iter().filter(|k| k.mu.x < 18.0).count();
        assert_eq!((big, ks.len() - big), (9, 1));
    }

    #[test]
    fn too_few_kernels_is_an_error() {
        // Five well-separated stripes.
        let mut img = ImageBuffer::new(25, 8, 1);
        for y in 0..8 {
            for x in 0..25 {
                img.set(x, y, 0, (x / 5) as f32 * 0.2);
            }
        }
        let seg = segment_image(&img, 10.0, 4);
        assert_eq!(seg.count, 5);
        let err = allocate_kernels(&img, &seg, 3, 1).unwrap_err();
        assert_eq!(err, SegmentError::TooFewKernels { available: 3, segments: 5 });
    }

    #[test]
    fn allocation_covers_every_segment() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for trial in 0..30 {
            // Random blocky images produce varied segment layouts.
            let mut img = ImageBuffer::new(32, 32, 1);
            for by in 0..4 {
                for bx in 0..4 {
                    let v = rng.random_range(0..5) as f32 * 0.2;
                    for y in 0..8 {
                        for x in 0..8 {
                            img.set(bx * 8 + x, by * 8 + y, 0, v);
                        }
                    }
                }
            }
            let seg = segment_image(&img, 10.0, 4);
            let total = seg.count + rng.random_range(0..40);
            let ks = allocate_kernels(&img, &seg, total, trial).unwrap();
            assert_eq!(ks.len(), total);
            let mut per_segment = vec![0usize; seg.count];
            for k in &ks.kernels {
                let (x, y) = (k.mu.x as usize, k.mu.y as usize);
                per_segment[seg.label(x, y) as usize] += 1;
            }
            assert!(per_segment.iter().all(|&c| c >= 1));
            // Monotone: bigger segments never get fewer kernels.
            let mut order: Vec<usize> = (0..seg.count).collect();
            order.sort_by_key(|&r| seg.sizes[r]);
            for pair in order.windows(2) {
                assert!(
                    per_segment[pair[0]] <= per_segment[pair[1]]
                        || seg.sizes[pair[0]] == seg.sizes[pair[1]],
                    "sizes {:?} counts {:?}",
                    seg.sizes,
                    per_segment
                );
            }
        }
    }

    #[test]
    fn random_init_is_deterministic_and_bounded() {
        let img = ImageBuffer::constant(64, 48, 3, 0.31);
        let a = random_init(&img, 100, 9);
        let b = random_init(&img, 100, 9);
        assert_eq!(a, b);
        for k in &a.kernels {
            assert!(k.mu.x >= 0.0 && k.mu.x < 64.0);
            assert!(k.mu.y >= 0.0 && k.mu.y < 48.0);
            assert_eq!(k.m[0], 0.31f32 as f64);
        }
    }

    #[test]
    fn random_init_single_kernel_takes_image_color() {
        let img = ImageBuffer::constant(8, 8, 1, 0.77);
        let ks = random_init(&img, 1, 4);
        assert_eq!(ks.len(), 1);
        assert_eq!(ks.kernels[0].m[0], 0.77f32 as f64);
    }
}
