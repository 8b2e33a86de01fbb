//! Domain types for steered 2D Gaussian kernels and the kernel pool.

use crate::image::ImageBuffer;

/// Lower bound applied to the Cholesky diagonal after every optimizer step.
/// Keeps every covariance safely positive definite.
pub const CHOL_FLOOR: f64 = 1e-3;

/// Maximum channel count supported by the constant experts.
pub const MAX_CHANNELS: usize = 3;

/// Continuous pixel coordinate. Pixel centers sit at integer coordinates,
/// origin top-left, x along columns and y along rows.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

/// Lower-triangular Cholesky factor of a 2×2 covariance:
/// `L = [[l11, 0], [l21, l22]]`, `Σ = L·Lᵀ`. The diagonal stays at or above
/// [`CHOL_FLOOR`], which makes `Σ` positive definite by construction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Chol2 {
    pub l11: f64,
    pub l21: f64,
    pub l22: f64,
}

impl Chol2 {
    pub fn new(l11: f64, l21: f64, l22: f64) -> Self {
        Self { l11, l21, l22 }
    }

    /// Isotropic factor with standard deviation `scale` pixels on both axes.
    pub fn isotropic(scale: f64) -> Self {
        Self::new(scale, 0.0, scale)
    }

    /// Reconstructs `Σ = L·Lᵀ` as `[[s00, s01], [s01, s11]]`.
    pub fn covariance(&self) -> [[f64; 2]; 2] {
        let s00 = self.l11 * self.l11;
        let s01 = self.l11 * self.l21;
        let s11 = self.l21 * self.l21 + self.l22 * self.l22;
        [[s00, s01], [s01, s11]]
    }

    /// Entries `(p00, p01, p11)` of the precision matrix `Σ⁻¹`, computed from
    /// the factor directly so no 2×2 inversion of `Σ` is needed.
    #[inline]
    pub fn precision(&self) -> (f64, f64, f64) {
        let a = 1.0 / self.l11;
        let d = 1.0 / self.l22;
        let c = -self.l21 * a * d;
        // Σ⁻¹ = L⁻ᵀ·L⁻¹ with L⁻¹ = [[a, 0], [c, d]].
        (a * a + c * c, c * d, d * d)
    }

    /// Returns a copy with every entry multiplied by `factor`
    /// (covariance scales by `factor²`).
    pub fn scaled(&self, factor: f64) -> Self {
        Self::new(self.l11 * factor, self.l21 * factor, self.l22 * factor)
    }

    /// Clamps the diagonal to [`CHOL_FLOOR`].
    pub fn clamp_diagonal(&mut self) {
        self.l11 = self.l11.max(CHOL_FLOOR);
        self.l22 = self.l22.max(CHOL_FLOOR);
    }

    pub fn is_valid(&self) -> bool {
        self.l11.is_finite()
            && self.l21.is_finite()
            && self.l22.is_finite()
            && self.l11 >= CHOL_FLOOR
            && self.l22 >= CHOL_FLOOR
    }
}

/// One steered Gaussian expert: center, Cholesky-parametrized covariance,
/// gate log-weight and a constant per-channel color expert.
///
/// `log_pi` stays exactly 0 unless gate weights are made learnable. Expert
/// values are kept unclamped during optimization (soft range `[-0.5, 1.5]`)
/// and only clamped to `[0,1]` at image export.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Kernel {
    pub mu: Vec2,
    pub chol: Chol2,
    pub log_pi: f64,
    pub m: [f64; MAX_CHANNELS],
}

impl Kernel {
    pub fn new(mu: Vec2, chol: Chol2, m: [f64; MAX_CHANNELS]) -> Self {
        Self {
            mu,
            chol,
            log_pi: 0.0,
            m,
        }
    }

    /// Isotropic kernel with a gray expert, handy in tests.
    pub fn isotropic(x: f64, y: f64, scale: f64, value: f64) -> Self {
        Self::new(Vec2::new(x, y), Chol2::isotropic(scale), [value; MAX_CHANNELS])
    }
}

/// The full pool of kernels bound to a channel count.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelSet {
    pub kernels: Vec<Kernel>,
    /// Number of meaningful entries in each kernel's `m`.
    pub channels: usize,
}

impl KernelSet {
    pub fn new(kernels: Vec<Kernel>, channels: usize) -> Self {
        assert!(channels >= 1 && channels <= MAX_CHANNELS);
        Self { kernels, channels }
    }

    pub fn len(&self) -> usize {
        self.kernels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kernels.is_empty()
    }

    /// Scalar parameters per kernel: `mu_x, mu_y, l11, l21, l22, log_pi, m_0..m_{C-1}`.
    pub fn param_stride(&self) -> usize {
        6 + self.channels
    }

    pub fn param_count(&self) -> usize {
        self.len() * self.param_stride()
    }

    pub fn get_param(&self, coord: ParamCoord) -> f64 {
        let k = &self.kernels[coord.kernel];
        match coord.field {
            ParamField::MuX => k.mu.x,
            ParamField::MuY => k.mu.y,
            ParamField::L11 => k.chol.l11,
            ParamField::L21 => k.chol.l21,
            ParamField::L22 => k.chol.l22,
            ParamField::LogPi => k.log_pi,
            ParamField::M(c) => k.m[c],
        }
    }

    pub fn set_param(&mut self, coord: ParamCoord, value: f64) {
        let k = &mut self.kernels[coord.kernel];
        match coord.field {
            ParamField::MuX => k.mu.x = value,
            ParamField::MuY => k.mu.y = value,
            ParamField::L11 => k.chol.l11 = value,
            ParamField::L21 => k.chol.l21 = value,
            ParamField::L22 => k.chol.l22 = value,
            ParamField::LogPi => k.log_pi = value,
            ParamField::M(c) => k.m[c] = value,
        }
    }

    /// All addressable coordinates in flat parameter order.
    pub fn param_coords(&self) -> Vec<ParamCoord> {
        let mut coords = Vec::with_capacity(self.param_count());
        for kernel in 0..self.len() {
            for field in ParamField::all(self.channels) {
                coords.push(ParamCoord { kernel, field });
            }
        }
        coords
    }
}

/// Addresses one scalar parameter inside a [`KernelSet`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParamCoord {
    pub kernel: usize,
    pub field: ParamField,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ParamField {
    MuX,
    MuY,
    L11,
    L21,
    L22,
    LogPi,
    M(usize),
}

impl ParamField {
    pub fn all(channels: usize) -> Vec<ParamField> {
        let mut fields = vec![
            ParamField::MuX,
            ParamField::MuY,
            ParamField::L11,
            ParamField::L21,
            ParamField::L22,
            ParamField::LogPi,
        ];
        for c in 0..channels {
            fields.push(ParamField::M(c));
        }
        fields
    }

    /// Offset of this field within a kernel's flat parameter record.
    pub fn offset(&self) -> usize {
        match self {
            ParamField::MuX => 0,
            ParamField::MuY => 1,
            ParamField::L11 => 2,
            ParamField::L21 => 3,
            ParamField::L22 => 4,
            ParamField::LogPi => 5,
            ParamField::M(c) => 6 + c,
        }
    }
}

/// One violated invariant found by [`validate_kernel_set`].
#[derive(Clone, Debug, PartialEq)]
pub struct Violation {
    /// Offending kernel index, or `None` for set-level problems.
    pub kernel: Option<usize>,
    pub message: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.kernel {
            Some(j) => write!(f, "kernel {}: {}", j, self.message),
            None => write!(f, "{}", self.message),
        }
    }
}

/// Diagnostic validation of a kernel set against an image: finiteness,
/// Cholesky clamp floors and channel-count agreement. Returns every violated
/// invariant; an empty report means the set is valid.
pub fn validate_kernel_set(ks: &KernelSet, img: &ImageBuffer) -> Vec<Violation> {
    let mut report = Vec::new();
    if ks.channels != img.channels {
        report.push(Violation {
            kernel: None,
            message: format!(
                "channel count mismatch: kernels have {}, image has {}",
                ks.channels, img.channels
            ),
        });
    }
    for (j, k) in ks.kernels.iter().enumerate() {
        if !k.mu.is_finite() {
            report.push(Violation {
                kernel: Some(j),
                message: format!("center not finite: ({}, {})", k.mu.x, k.mu.y),
            });
        }
        if !k.chol.is_valid() {
            report.push(Violation {
                kernel: Some(j),
                message: format!(
                    "cholesky factor invalid (diagonal below {} or non-finite): \
                     l11={} l21={} l22={}",
                    CHOL_FLOOR, k.chol.l11, k.chol.l21, k.chol.l22
                ),
            });
        }
        if !k.log_pi.is_finite() {
            report.push(Violation {
                kernel: Some(j),
                message: "gate log-weight not finite".to_string(),
            });
        }
        if k.m[..ks.channels].iter().any(|v| !v.is_finite()) {
            report.push(Violation {
                kernel: Some(j),
                message: "expert value not finite".to_string(),
            });
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn covariance_identity() {
        let sigma = Chol2::new(1.0, 0.0, 1.0).covariance();
        assert_eq!(sigma, [[1.0, 0.0], [0.0, 1.0]]);
    }

    #[test]
    fn covariance_hand_products() {
        // L = [[2,0],[0,1]] -> Σ = [[4,0],[0,1]]
        assert_eq!(Chol2::new(2.0, 0.0, 1.0).covariance(), [[4.0, 0.0], [0.0, 1.0]]);
        // L = [[1,0],[1,1]] -> Σ = [[1,1],[1,2]]
        assert_eq!(Chol2::new(1.0, 1.0, 1.0).covariance(), [[1.0, 1.0], [1.0, 2.0]]);
    }

    #[test]
    fn covariance_positive_determinant_for_clamped_factors() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..2000 {
            let chol = Chol2::new(
                rng.random_range(CHOL_FLOOR..20.0),
                rng.random_range(-20.0..20.0),
                rng.random_range(CHOL_FLOOR..20.0),
            );
            let s = chol.covariance();
            let det = s[0][0] * s[1][1] - s[0][1] * s[1][0];
            assert!(det > 0.0, "det = {det} for {chol:?}");
            assert_eq!(s[0][1], s[1][0]);
        }
    }

    #[test]
    fn precision_is_inverse_of_covariance() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..500 {
            let chol = Chol2::new(
                rng.random_range(0.01..10.0),
                rng.random_range(-10.0..10.0),
                rng.random_range(0.01..10.0),
            );
            let s = chol.covariance();
            let (p00, p01, p11) = chol.precision();
            // Σ·P should be the identity.
            let i00 = s[0][0] * p00 + s[0][1] * p01;
            let i01 = s[0][0] * p01 + s[0][1] * p11;
            let i11 = s[1][0] * p01 + s[1][1] * p11;
            assert!((i00 - 1.0).abs() < 1e-9);
            assert!(i01.abs() < 1e-9);
            assert!((i11 - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn validate_accepts_valid_set() {
        let img = ImageBuffer::new(8, 8, 3);
        let ks = KernelSet::new(
            vec![
                Kernel::isotropic(1.0, 1.0, 5.0, 0.5),
                Kernel::isotropic(4.0, 4.0, 5.0, 0.2),
                Kernel::isotropic(6.0, 2.0, 5.0, 0.9),
            ],
            3,
        );
        assert!(validate_kernel_set(&ks, &img).is_empty());
    }

    #[test]
    fn validate_reports_clamp_breach_with_kernel_index() {
        let img = ImageBuffer::new(8, 8, 1);
        let mut ks = KernelSet::new(
            vec![Kernel::isotropic(1.0, 1.0, 5.0, 0.5), Kernel::isotropic(2.0, 2.0, 5.0, 0.5)],
            1,
        );
        ks.kernels[1].chol.l11 = 0.0;
        let report = validate_kernel_set(&ks, &img);
        assert_eq!(report.len(), 1);
        assert_eq!(report[0].kernel, Some(1));
    }

    #[test]
    fn validate_reports_nan_center() {
        let img = ImageBuffer::new(8, 8, 1);
        let mut ks = KernelSet::new(vec![Kernel::isotropic(1.0, 1.0, 5.0, 0.5)], 1);
        ks.kernels[0].mu.x = f64::NAN;
        let report = validate_kernel_set(&ks, &img);
        assert_eq!(report.len(), 1);
        assert_eq!(report[0].kernel, Some(0));
    }

    #[test]
    fn param_coords_round_trip() {
        let mut ks = KernelSet::new(vec![Kernel::isotropic(1.0, 2.0, 5.0, 0.5)], 3);
        let coords = ks.param_coords();
        assert_eq!(coords.len(), 9);
        for (i, &c) in coords.iter().enumerate() {
            assert_eq!(c.field.offset(), i % ks.param_stride());
            ks.set_param(c, i as f64);
            assert_eq!(ks.get_param(c), i as f64);
        }
    }
}
