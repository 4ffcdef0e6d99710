//! Grayscale patches on [0, 1] and a strict binary PGM (P5) codec.
//!
//! A [`Patch`] is the image currency of the crate: every degradation stage
//! consumes and produces one, and restoration quality is measured on them.
//! Pixels are `f64` in [0, 1]; the PGM codec quantises to 8-bit on write and
//! divides by 255 on read.

use thiserror::Error;

/// Largest side length the PGM decoder will accept.
const MAX_SIDE: usize = 4096;
/// Largest total pixel count the PGM decoder will allocate for.
const MAX_PIXELS: usize = 1 << 24;

#[derive(Debug, Error)]
pub enum PatchError {
    #[error("pixel buffer has {got} values for {h}x{w}")]
    SizeMismatch { h: usize, w: usize, got: usize },
    #[error("pixel {index} = {value} outside [0, 1]")]
    PixelOutOfRange { index: usize, value: f64 },
    #[error("patch dimensions must be nonzero")]
    EmptyPatch,
    #[error("pgm: {0}")]
    Pgm(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// A height × width grayscale patch, row-major, pixels in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl Patch {
    /// Builds a patch, validating shape and pixel range.
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self, PatchError> {
        if height == 0 || width == 0 {
            return Err(PatchError::EmptyPatch);
        }
        if pixels.len() != height * width {
            return Err(PatchError::SizeMismatch { h: height, w: width, got: pixels.len() });
        }
        for (index, &value) in pixels.iter().enumerate() {
            if !(0.0..=1.0).contains(&value) {
                return Err(PatchError::PixelOutOfRange { index, value });
            }
        }
        Ok(Self { height, width, pixels })
    }

    /// Builds a patch from a pixel function; values are clamped to [0, 1].
    /// Panics if the function produces NaN (a clamp cannot repair that).
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let pixels = (0..height * width)
            .map(|i| {
                let v = f(i / width, i % width);
                assert!(!v.is_nan(), "pixel function produced NaN at index {i}");
                v.clamp(0.0, 1.0)
            })
            .collect();
        Self { height, width, pixels }
    }

    /// A constant-valued patch.
    pub fn constant(height: usize, width: usize, value: f64) -> Self {
        Self::from_fn(height, width, |_, _| value)
    }

    /// Nearest-neighbor upsampling by an integer factor: each source pixel
    /// becomes a `factor`×`factor` block. The do-nothing restoration.
    pub fn upsample_nearest(&self, factor: usize) -> Self {
        assert!(factor >= 1, "upsample factor must be >= 1");
        Self::from_fn(self.height * factor, self.width * factor, |r, c| {
            self.get(r / factor, c / factor)
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    /// Flattened copy of the pixels (for use as a network input).
    pub fn to_vec(&self) -> Vec<f64> {
        self.pixels.clone()
    }

    /// Encodes as binary PGM (P5, maxval 255), quantising each pixel to
    /// round(p · 255).
    pub fn to_pgm_bytes(&self) -> Vec<u8> {
        let header = format!("P5\n{} {}\n255\n", self.width, self.height);
        let mut out = Vec::with_capacity(header.len() + self.pixels.len());
        out.extend_from_slice(header.as_bytes());
        out.extend(self.pixels.iter().map(|&p| (p * 255.0).round() as u8));
        out
    }

    /// Decodes a binary PGM (P5) buffer.
    ///
    /// Strict, total parser: P5 only, maxval 255 only, `#` comments allowed
    /// in the header, dimensions capped (side <= 4096, pixels <= 2^24), and
    /// the payload must hold exactly height × width bytes. Arbitrary input
    /// produces `Ok` or a structured error, never a panic.
    pub fn from_pgm_bytes(bytes: &[u8]) -> Result<Self, PatchError> {
        let mut pos = 0usize;
        if bytes.len() < 2 || &bytes[..2] != b"P5" {
            return Err(PatchError::Pgm("missing P5 magic".into()));
        }
        pos += 2;
        let width = read_header_int(bytes, &mut pos)?;
        let height = read_header_int(bytes, &mut pos)?;
        let maxval = read_header_int(bytes, &mut pos)?;
        if maxval != 255 {
            return Err(PatchError::Pgm(format!("unsupported maxval {maxval} (only 255)")));
        }
        if width == 0 || height == 0 {
            return Err(PatchError::Pgm("zero dimension".into()));
        }
        if width > MAX_SIDE || height > MAX_SIDE || width * height > MAX_PIXELS {
            return Err(PatchError::Pgm(format!("dimensions {width}x{height} exceed limits")));
        }
        // Exactly one whitespace byte separates the header from the payload.
        match bytes.get(pos) {
            Some(b) if b.is_ascii_whitespace() => pos += 1,
            _ => return Err(PatchError::Pgm("missing separator before payload".into())),
        }
        let payload = &bytes[pos..];
        let expected = width * height;
        if payload.len() != expected {
            return Err(PatchError::Pgm(format!(
                "payload has {} bytes, expected {expected}",
                payload.len()
            )));
        }
        let pixels = payload.iter().map(|&b| b as f64 / 255.0).collect();
        Ok(Self { height, width, pixels })
    }

    /// Writes the patch to `path` as binary PGM.
    pub fn write_pgm(&self, path: &std::path::Path) -> Result<(), PatchError> {
        std::fs::write(path, self.to_pgm_bytes())?;
        Ok(())
    }

    /// Reads a binary PGM from `path`.
    pub fn read_pgm(path: &std::path::Path) -> Result<Self, PatchError> {
        let bytes = std::fs::read(path)?;
        Self::from_pgm_bytes(&bytes)
    }
}

/// Reads one ASCII integer from a PGM header, skipping whitespace and `#`
/// comments before it. Capped at 8 digits so length math cannot overflow.
fn read_header_int(bytes: &[u8], pos: &mut usize) -> Result<usize, PatchError> {
    loop {
        match bytes.get(*pos) {
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(b'#') => {
                while let Some(&b) = bytes.get(*pos) {
                    *pos += 1;
                    if b == b'\n' {
                        break;
                    }
                }
            }
            Some(b) if b.is_ascii_digit() => break,
            Some(_) => return Err(PatchError::Pgm("unexpected byte in header".into())),
            None => return Err(PatchError::Pgm("truncated header".into())),
        }
    }
    let start = *pos;
    while let Some(b) = bytes.get(*pos) {
        if b.is_ascii_digit() {
            *pos += 1;
        } else {
            break;
        }
    }
    if *pos - start > 8 {
        return Err(PatchError::Pgm("header number too long".into()));
    }
    let text = std::str::from_utf8(&bytes[start..*pos]).expect("digits are ascii");
    text.parse::<usize>()
        .map_err(|_| PatchError::Pgm("unparseable header number".into()))
}
