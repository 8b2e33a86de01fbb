//! PNG image I/O and the binary model file format.
//!
//! Model files are bit-exact: magic `RSMO`, a fixed little-endian header and
//! one IEEE-754 binary32 record per kernel, so saving a loaded file
//! reproduces it byte for byte.

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::image::ImageBuffer;
use crate::kernel::{Chol2, Kernel, KernelSet, Vec2, MAX_CHANNELS};
use crate::render::RegressionHead;

pub const MODEL_MAGIC: [u8; 4] = *b"RSMO";
pub const MODEL_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("failed to decode image: {0}")]
    Decode(String),
    #[error("unsupported image format: {0} (expected 8-bit RGB or grayscale)")]
    UnsupportedFormat(String),
    #[error("bad magic (not a model file)")]
    BadMagic,
    #[error("unsupported model version {found}")]
    VersionMismatch { found: u16 },
    #[error("model file truncated")]
    TruncatedFile,
    #[error("invalid model header: {0}")]
    InvalidHeader(String),
}

/// Loads an 8-bit RGB or grayscale PNG, mapping samples to `[0,1]` by `/255`.
pub fn load_png(path: impl AsRef<Path>) -> Result<ImageBuffer, IoError> {
    let dynamic = image::open(path.as_ref()).map_err(|e| match e {
        image::ImageError::IoError(io) => IoError::Io(io),
        other => IoError::Decode(other.to_string()),
    })?;
    match dynamic {
        image::DynamicImage::ImageLuma8(gray) => {
            let (w, h) = (gray.width() as usize, gray.height() as usize);
            let mut img = ImageBuffer::new(w, h, 1);
            for (i, p) in gray.pixels().enumerate() {
                img.data[i] = p.0[0] as f32 / 255.0;
            }
            Ok(img)
        }
        image::DynamicImage::ImageRgb8(rgb) => {
            let (w, h) = (rgb.width() as usize, rgb.height() as usize);
            let mut img = ImageBuffer::new(w, h, 3);
            let n = w * h;
            for (i, p) in rgb.pixels().enumerate() {
                for c in 0..3 {
                    img.data[c * n + i] = p.0[c] as f32 / 255.0;
                }
            }
            Ok(img)
        }
        other => Err(IoError::UnsupportedFormat(format!("{:?}", other.color()))),
    }
}

/// Saves as 8-bit PNG: samples are clamped to `[0,1]` and mapped by `·255`
/// with round-half-up.
pub fn save_png(img: &ImageBuffer, path: impl AsRef<Path>) -> Result<(), IoError> {
    let quantize = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let (w, h) = (img.width as u32, img.height as u32);
    match img.channels {
        1 => {
            let data: Vec<u8> = img.plane(0).iter().map(|&v| quantize(v)).collect();
            let buf = image::GrayImage::from_raw(w, h, data)
                .expect("buffer length matches dimensions");
            buf.save_with_format(path.as_ref(), image::ImageFormat::Png)
                .map_err(|e| IoError::Decode(e.to_string()))
        }
        3 => {
            let n = img.pixel_count();
            let mut data = Vec::with_capacity(n * 3);
            for i in 0..n {
                for c in 0..3 {
                    data.push(quantize(img.data[c * n + i]));
                }
            }
            let buf = image::RgbImage::from_raw(w, h, data)
                .expect("buffer length matches dimensions");
            buf.save_with_format(path.as_ref(), image::ImageFormat::Png)
                .map_err(|e| IoError::Decode(e.to_string()))
        }
        other => Err(IoError::UnsupportedFormat(format!("{other} channels"))),
    }
}

/// A deserialized model: trained kernels bound to the image dimensions and
/// regression head they were fitted with.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelFile {
    pub head: RegressionHead,
    pub width: u32,
    pub height: u32,
    pub kernels: KernelSet,
}

impl ModelFile {
    pub fn new(head: RegressionHead, width: u32, height: u32, kernels: KernelSet) -> Self {
        Self { head, width, height, kernels }
    }
}

/// Serializes a model. Layout (all little-endian):
/// magic `RSMO` · u16 version · u8 head (0 = RBF, 1 = SMoE) · u32 width ·
/// u32 height · u8 channels · u32 kernel count · per kernel
/// `[mu_x, mu_y, l11, l21, l22, log_pi, m_1..m_C]` as f32.
pub fn encode_model(model: &ModelFile) -> Vec<u8> {
    let ks = &model.kernels;
    let record = 6 + ks.channels;
    let mut out = Vec::with_capacity(20 + ks.len() * record * 4);
    out.extend_from_slice(&MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    out.push(match model.head {
        RegressionHead::Rbf => 0,
        RegressionHead::Smoe => 1,
    });
    out.extend_from_slice(&model.width.to_le_bytes());
    out.extend_from_slice(&model.height.to_le_bytes());
    out.push(ks.channels as u8);
    out.extend_from_slice(&(ks.len() as u32).to_le_bytes());
    for k in &ks.kernels {
        for v in [k.mu.x, k.mu.y, k.chol.l11, k.chol.l21, k.chol.l22, k.log_pi] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        for c in 0..ks.channels {
            out.extend_from_slice(&(k.m[c] as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_model(bytes: &[u8]) -> Result<ModelFile, IoError> {
    if bytes.len() < 4 {
        return Err(IoError::TruncatedFile);
    }
    if bytes[..4] != MODEL_MAGIC {
        return Err(IoError::BadMagic);
    }
    if bytes.len() < 20 {
        return Err(IoError::TruncatedFile);
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != MODEL_VERSION {
        return Err(IoError::VersionMismatch { found: version });
    }
    let head = match bytes[6] {
        0 => RegressionHead::Rbf,
        1 => RegressionHead::Smoe,
        other => return Err(IoError::InvalidHeader(format!("unknown head {other}"))),
    };
    let width = u32::from_le_bytes(bytes[7..11].try_into().unwrap());
    let height = u32::from_le_bytes(bytes[11..15].try_into().unwrap());
    let channels = bytes[15] as usize;
    if channels != 1 && channels != 3 {
        return Err(IoError::InvalidHeader(format!("{channels} channels")));
    }
    let count = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
    let record = (6 + channels) * 4;
    let expected = 20 + count * record;
    if bytes.len() < expected {
        return Err(IoError::TruncatedFile);
    }
    if bytes.len() > expected {
        return Err(IoError::InvalidHeader(format!(
            "{} trailing bytes",
            bytes.len() - expected
        )));
    }
    let mut kernels = Vec::with_capacity(count);
    let mut offset = 20;
    let read_f32 = |offset: &mut usize| {
        let v = f32::from_le_bytes(bytes[*offset..*offset + 4].try_into().unwrap());
        *offset += 4;
        v as f64
    };
    for _ in 0..count {
        let mu_x = read_f32(&mut offset);
        let mu_y = read_f32(&mut offset);
        let l11 = read_f32(&mut offset);
        let l21 = read_f32(&mut offset);
        let l22 = read_f32(&mut offset);
        let log_pi = read_f32(&mut offset);
        let mut m = [0.0; MAX_CHANNELS];
        for slot in m.iter_mut().take(channels) {
            *slot = read_f32(&mut offset);
        }
        kernels.push(Kernel {
            mu: Vec2::new(mu_x, mu_y),
            chol: Chol2::new(l11, l21, l22),
            log_pi,
            m,
        });
    }
    Ok(ModelFile {
        head,
        width,
        height,
        kernels: KernelSet::new(kernels, channels),
    })
}

pub fn save_model(model: &ModelFile, path: impl AsRef<Path>) -> Result<(), IoError> {
    let mut file = std::fs::File::create(path)?;
    file.write_all(&encode_model(model))?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelFile, IoError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_model(&bytes)
}
