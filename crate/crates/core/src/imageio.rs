//! 8-bit image loading/saving (PNG, binary PPM) and conversion to the unit
//! float tensors used by the network.

use std::fs;
use std::path::Path;

use image::{ImageFormat, ImageReader};

use crate::error::{Result, SimiError};
use crate::nn::{Real, Tensor};

const PNG_SIGNATURE: &[u8; 8] = b"\x89PNG\r\n\x1a\n";

/// Interleaved 8-bit image, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl RawImage {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(SimiError::ShapeMismatch(format!(
                "{width}x{height}x{channels} image needs {} bytes, got {}",
                width * height * channels,
                data.len()
            )));
        }
        Ok(Self { width, height, channels, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let data = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Self { width, height, channels: 3, data }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self { width, height, channels: 3, data }
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[u8] {
        let at = (y * self.width + x) * self.channels;
        &self.data[at..at + self.channels]
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub(crate) fn require_rgb(&self) -> Result<()> {
        if self.channels != 3 {
            return Err(SimiError::ChannelCountMismatch(self.channels));
        }
        Ok(())
    }

    /// Mean intensity on the `[0, 1]` scale.
    pub fn mean_brightness(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / (255.0 * self.data.len().max(1) as f64)
    }
}

/// Loads a PNG or binary PPM (P6) file as 3-channel RGB.
///
/// Grayscale inputs are replicated into three channels and alpha is dropped.
pub fn load_image(path: impl AsRef<Path>) -> Result<RawImage> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(SimiError::FileNotFound(path.to_path_buf()));
    }
    decode_image(&fs::read(path)?)
}

pub fn decode_image(bytes: &[u8]) -> Result<RawImage> {
    if bytes.starts_with(PNG_SIGNATURE) {
        let img = ImageReader::with_format(std::io::Cursor::new(bytes), ImageFormat::Png)
            .decode()
            .map_err(|e| SimiError::CorruptData(e.to_string()))?
            .to_rgb8();
        let (w, h) = img.dimensions();
        RawImage::new(w as usize, h as usize, 3, img.into_raw())
    } else if bytes.starts_with(b"P6") {
        decode_ppm(bytes)
    } else {
        Err(SimiError::UnsupportedFormat("expected a PNG or binary PPM (P6) file".into()))
    }
}

fn decode_ppm(bytes: &[u8]) -> Result<RawImage> {
    let mut at = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // whitespace and comments
        loop {
            match bytes.get(at) {
                Some(b) if b.is_ascii_whitespace() => at += 1,
                Some(b'#') => {
                    while bytes.get(at).is_some_and(|&b| b != b'\n') {
                        at += 1;
                    }
                }
                _ => break,
            }
        }
        let start = at;
        while bytes.get(at).is_some_and(u8::is_ascii_digit) {
            at += 1;
        }
        *field = std::str::from_utf8(&bytes[start..at])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| SimiError::CorruptData("malformed PPM header".into()))?;
    }
    if !bytes.get(at).is_some_and(u8::is_ascii_whitespace) {
        return Err(SimiError::CorruptData("malformed PPM header".into()));
    }
    at += 1;
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(SimiError::UnsupportedFormat(format!("PPM maxval {maxval}, only 255 is supported")));
    }
    let len = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| SimiError::CorruptData("PPM dimensions overflow".into()))?;
    let body = bytes
        .get(at..at + len)
        .ok_or_else(|| SimiError::CorruptData(format!("PPM body has {} of {len} bytes", bytes.len() - at)))?;
    RawImage::new(width, height, 3, body.to_vec())
}

pub fn encode_ppm(img: &RawImage) -> Result<Vec<u8>> {
    img.require_rgb()?;
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    Ok(out)
}

/// Saves by extension: `.png` (gray or RGB) or `.ppm` (RGB).
pub fn save_image(img: &RawImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
    match ext.as_deref() {
        Some("ppm") => Ok(fs::write(path, encode_ppm(img)?)?),
        Some("png") => {
            let color = match img.channels {
                1 => image::ExtendedColorType::L8,
                3 => image::ExtendedColorType::Rgb8,
                c => return Err(SimiError::ChannelCountMismatch(c)),
            };
            image::save_buffer_with_format(path, &img.data, img.width as u32, img.height as u32, color, ImageFormat::Png)
                .map_err(|e| match e {
                    image::ImageError::IoError(io) => SimiError::Io(io),
                    other => SimiError::CorruptData(other.to_string()),
                })
        }
        _ => Err(SimiError::UnsupportedFormat(format!("cannot save {}", path.display()))),
    }
}

/// `(1, 3, H, W)` tensor holding `intensity / 255`.
pub fn to_unit_tensor<T: Real>(img: &RawImage) -> Result<Tensor<T>> {
    img.require_rgb()?;
    let hw = img.width * img.height;
    let data = (0..3 * hw)
        .map(|k| T::of(img.data[(k % hw) * 3 + k / hw] as f64) / T::of(255.0))
        .collect();
    Tensor::new(&[1, 3, img.height, img.width], data)
}

/// Inverse of [`to_unit_tensor`]: clamps to `[0, 1]` and rounds half up.
pub fn from_unit_tensor<T: Real>(t: &Tensor<T>) -> Result<RawImage> {
    let (n, c, h, w) = t.dims4()?;
    if n != 1 || c != 3 {
        return Err(SimiError::ShapeMismatch(format!("expected (1, 3, H, W), got {:?}", t.shape())));
    }
    let hw = h * w;
    let mut data = vec![0u8; 3 * hw];
    for (k, &v) in t.data().iter().enumerate() {
        data[(k % hw) * 3 + k / hw] = unit_to_byte(v.as_f64());
    }
    RawImage::new(w, h, 3, data)
}

/// Single-channel `(H, W)` map in `[0, 1]` as a gray 8-bit image.
pub fn gray_from_unit(values: &[f64], width: usize, height: usize) -> Result<RawImage> {
    RawImage::new(width, height, 1, values.iter().map(|&v| unit_to_byte(v)).collect())
}

pub fn unit_to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}
