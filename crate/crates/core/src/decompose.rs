//! Self-information representations of an 8-bit RGB image.
//!
//! Every mode emits eight maps per colour channel, stacked channel-major as
//! `(1, 24, H, W)`: map `c * 8 + k` is the `k`-th map of channel `c`.
//!
//! * bit planes: map `k` holds bit `k` (LSB first),
//! * log thresholds: map `k` is `1[I >= 2^k]`,
//! * uniform quantizers: map `k` is `I` quantized to `levels[k]` levels.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimiError};
use crate::imageio::{from_unit_tensor, RawImage};
use crate::nn::{Real, Tensor};

pub const PLANES_PER_CHANNEL: usize = 8;
pub const STACK_CHANNELS: usize = 3 * PLANES_PER_CHANNEL;
pub const DEFAULT_QUANT_LEVELS: [u32; PLANES_PER_CHANNEL] = [2, 3, 4, 5, 9, 17, 33, 65];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecompositionMode {
    BitPlane,
    LogThreshold,
    QuantThreshold(Vec<u32>),
}

impl Default for DecompositionMode {
    fn default() -> Self {
        Self::BitPlane
    }
}

impl DecompositionMode {
    pub fn quant_default() -> Self {
        Self::QuantThreshold(DEFAULT_QUANT_LEVELS.to_vec())
    }

    /// Checks the mode yields exactly eight maps per channel.
    pub fn validate(&self) -> Result<()> {
        if let Self::QuantThreshold(levels) = self {
            if levels.len() != PLANES_PER_CHANNEL {
                return Err(SimiError::InvalidConfig(format!(
                    "quantizer list needs {PLANES_PER_CHANNEL} entries, got {}",
                    levels.len()
                )));
            }
            check_levels(levels)?;
        }
        Ok(())
    }

    pub fn label(&self) -> &'static str {
        match self {
            Self::BitPlane => "bitplane",
            Self::LogThreshold => "log",
            Self::QuantThreshold(_) => "quant",
        }
    }
}

impl fmt::Display for DecompositionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for DecompositionMode {
    type Err = SimiError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bitplane" => Ok(Self::BitPlane),
            "log" => Ok(Self::LogThreshold),
            "quant" => Ok(Self::quant_default()),
            other => Err(SimiError::InvalidConfig(format!("unknown decomposition mode `{other}`"))),
        }
    }
}

/// Stack of per-channel maps shaped `(1, 3 * maps, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PlaneStack<T = f32> {
    planes: Tensor<T>,
}

impl<T: Real> PlaneStack<T> {
    pub fn from_tensor(planes: Tensor<T>) -> Result<Self> {
        let (n, c, _, _) = planes.dims4()?;
        if n != 1 || c % 3 != 0 {
            return Err(SimiError::ShapeMismatch(format!("plane stack shape {:?}", planes.shape())));
        }
        Ok(Self { planes })
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.planes
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.planes
    }

    pub fn maps_per_channel(&self) -> usize {
        self.planes.shape()[1] / 3
    }

    /// Map `index` of colour channel `channel` as a row-major `H × W` slice.
    pub fn map(&self, channel: usize, index: usize) -> &[T] {
        let (_, _, h, w) = self.planes.dims4().expect("rank 4");
        let plane = channel * self.maps_per_channel() + index;
        &self.planes.data()[plane * h * w..(plane + 1) * h * w]
    }

    pub fn dims(&self) -> (usize, usize) {
        let (_, _, h, w) = self.planes.dims4().expect("rank 4");
        (w, h)
    }
}

fn build<T: Real>(img: &RawImage, maps: usize, f: impl Fn(u8, usize) -> T) -> Result<PlaneStack<T>> {
    img.require_rgb()?;
    let hw = img.width * img.height;
    let mut data = Vec::with_capacity(3 * maps * hw);
    for c in 0..3 {
        for k in 0..maps {
            data.extend((0..hw).map(|p| f(img.data[p * 3 + c], k)));
        }
    }
    PlaneStack::from_tensor(Tensor::new(&[1, 3 * maps, img.height, img.width], data)?)
}

pub fn bitplane_decompose<T: Real>(img: &RawImage) -> Result<PlaneStack<T>> {
    build(img, PLANES_PER_CHANNEL, |v, k| if (v >> k) & 1 == 1 { T::one() } else { T::zero() })
}

/// Inverse of [`bitplane_decompose`]: `Σ_k plane_k · 2^k` per channel.
pub fn bitplane_reconstruct<T: Real>(stack: &PlaneStack<T>) -> Result<RawImage> {
    if stack.maps_per_channel() != PLANES_PER_CHANNEL {
        return Err(SimiError::ShapeMismatch(format!(
            "expected {STACK_CHANNELS} planes, got {}",
            stack.planes.shape()[1]
        )));
    }
    let (w, h) = stack.dims();
    let mut data = vec![0u8; w * h * 3];
    for c in 0..3 {
        for k in 0..PLANES_PER_CHANNEL {
            for (p, &bit) in stack.map(c, k).iter().enumerate() {
                if bit == T::one() {
                    data[p * 3 + c] |= 1 << k;
                } else if bit != T::zero() {
                    return Err(SimiError::NonBinaryValue(bit.as_f64()));
                }
            }
        }
    }
    RawImage::new(w, h, 3, data)
}

/// Threshold `2^k` maps, thresholds ascending.
pub fn log_threshold_decompose<T: Real>(img: &RawImage) -> Result<PlaneStack<T>> {
    build(img, PLANES_PER_CHANNEL, |v, k| if u32::from(v) >= 1 << k { T::one() } else { T::zero() })
}

fn check_levels(levels: &[u32]) -> Result<()> {
    match levels.iter().find(|&&t| t < 2) {
        Some(&t) => Err(SimiError::InvalidLevelCount(t)),
        None => Ok(()),
    }
}

/// Quantization level `floor(I · (t − 1) / 255)` of the rational intensity
/// `numerator / denominator`.
pub fn quant_level(numerator: u64, denominator: u64, levels: u32) -> u64 {
    numerator * u64::from(levels - 1) / (255 * denominator)
}

/// Uniform quantization maps, one per entry of `levels`, scaled to `[0, 1]`.
pub fn quant_threshold_decompose<T: Real>(img: &RawImage, levels: &[u32]) -> Result<PlaneStack<T>> {
    check_levels(levels)?;
    build(img, levels.len(), |v, k| {
        let t = levels[k];
        T::of(quant_level(u64::from(v), 1, t) as f64 / f64::from(t - 1))
    })
}

pub fn decompose<T: Real>(img: &RawImage, mode: &DecompositionMode) -> Result<PlaneStack<T>> {
    match mode {
        DecompositionMode::BitPlane => bitplane_decompose(img),
        DecompositionMode::LogThreshold => log_threshold_decompose(img),
        DecompositionMode::QuantThreshold(levels) => quant_threshold_decompose(img, levels),
    }
}

/// Decomposes every item of a `(N, 3, H, W)` unit tensor after requantizing
/// it to 8 bits, returning `(N, 3 * maps, H, W)`.
pub fn decompose_batch<T: Real>(images: &Tensor<T>, mode: &DecompositionMode) -> Result<Tensor<T>> {
    let (n, _, _, _) = images.dims4()?;
    let stacks = (0..n)
        .map(|i| {
            let img = from_unit_tensor(&images.batch_item(i)?)?;
            Ok(decompose::<T>(&img, mode)?.into_tensor())
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack_batch(&stacks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn single(v: u8) -> RawImage {
        RawImage::filled(1, 1, [v, v, v])
    }

    fn bits(stack: &PlaneStack<f64>, c: usize) -> Vec<f64> {
        (0..stack.maps_per_channel()).map(|k| stack.map(c, k)[0]).collect()
    }

    #[test]
    fn bitplane_examples() {
        let s = bitplane_decompose::<f64>(&single(170)).unwrap();
        assert_eq!(s.tensor().shape(), &[1, 24, 1, 1]);
        assert_eq!(bits(&s, 1), vec![0., 1., 0., 1., 0., 1., 0., 1.]);
        assert_eq!(bits(&bitplane_decompose(&single(255)).unwrap(), 0), vec![1.0; 8]);
        assert_eq!(bits(&bitplane_decompose(&single(0)).unwrap(), 2), vec![0.0; 8]);
    }

    #[test]
    fn reconstruct_examples() {
        let mut planes = Tensor::<f64>::zeros(&[1, 24, 1, 1]);
        planes.data_mut()[7] = 1.0;
        planes.data_mut()[8] = 1.0;
        planes.data_mut()[9] = 1.0;
        let img = bitplane_reconstruct(&PlaneStack::from_tensor(planes.clone()).unwrap()).unwrap();
        assert_eq!(img.data, vec![128, 3, 0]);
        planes.data_mut()[0] = 0.5;
        assert!(matches!(
            bitplane_reconstruct(&PlaneStack::from_tensor(planes).unwrap()),
            Err(SimiError::NonBinaryValue(_))
        ));
    }

    #[test]
    fn reconstruct_4x4_fixture() {
        let values = [0u8, 1, 85, 170, 255];
        let img = RawImage::from_fn(4, 4, |x, y| {
            let i = y * 4 + x;
            [values[i % 5], values[(i + 2) % 5], values[(i + 4) % 5]]
        });
        let s = bitplane_decompose::<f32>(&img).unwrap();
        assert_eq!(bitplane_reconstruct(&s).unwrap(), img);
    }

    #[test]
    fn log_threshold_examples() {
        let s = log_threshold_decompose::<f64>(&single(100)).unwrap();
        assert_eq!(bits(&s, 0), vec![1., 1., 1., 1., 1., 1., 1., 0.]);
        assert_eq!(bits(&log_threshold_decompose(&single(0)).unwrap(), 0), vec![0.0; 8]);
        assert_eq!(bits(&log_threshold_decompose(&single(255)).unwrap(), 0), vec![1.0; 8]);
    }

    #[test]
    fn quant_examples() {
        let q = |v, t| quant_threshold_decompose::<f64>(&single(v), &[t]).unwrap().map(0, 0)[0];
        assert_eq!(q(255, 2), 1.0);
        assert_eq!(q(0, 7), 0.0);
        assert_eq!(q(100, 4), 85.0 / 255.0);
        assert!(matches!(
            quant_threshold_decompose::<f64>(&single(1), &[4, 1]),
            Err(SimiError::InvalidLevelCount(1))
        ));
    }

    #[test]
    fn all_modes_share_shape() {
        let img = RawImage::from_fn(5, 3, |x, y| [(x * 50) as u8, (y * 90) as u8, 3]);
        for mode in [DecompositionMode::BitPlane, DecompositionMode::LogThreshold, DecompositionMode::quant_default()] {
            mode.validate().unwrap();
            assert_eq!(decompose::<f32>(&img, &mode).unwrap().tensor().shape(), &[1, 24, 3, 5]);
        }
        assert!(DecompositionMode::QuantThreshold(vec![2, 3]).validate().is_err());
    }

    #[test]
    fn channel_count_checked() {
        let gray = RawImage::new(1, 1, 1, vec![3]).unwrap();
        assert!(matches!(bitplane_decompose::<f32>(&gray), Err(SimiError::ChannelCountMismatch(1))));
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("log".parse::<DecompositionMode>().unwrap(), DecompositionMode::LogThreshold);
        assert!("gray".parse::<DecompositionMode>().is_err());
        let json = serde_json::to_string(&DecompositionMode::quant_default()).unwrap();
        assert_eq!(serde_json::from_str::<DecompositionMode>(&json).unwrap(), DecompositionMode::quant_default());
    }

    proptest! {
        #[test]
        fn log_maps_monotone(v in any::<u8>()) {
            let s = log_threshold_decompose::<f64>(&single(v)).unwrap();
            let m = bits(&s, 0);
            for k in 0..7 {
                prop_assert!(m[k] >= m[k + 1]);
            }
        }

        #[test]
        fn quant_idempotent(v in any::<u8>(), t in 2u32..=65) {
            let q = quant_level(u64::from(v), 1, t);
            // re-feed q · 255 / (t − 1) exactly as a rational intensity
            prop_assert_eq!(quant_level(q * 255, u64::from(t - 1), t), q);
        }

        #[test]
        fn batch_decomposition_matches_single(v in any::<[u8; 3]>()) {
            let img = RawImage::filled(2, 2, v);
            let t = crate::imageio::to_unit_tensor::<f32>(&img).unwrap();
            let batch = Tensor::stack_batch(&[t.clone(), t]).unwrap();
            let out = decompose_batch(&batch, &DecompositionMode::BitPlane).unwrap();
            let single = bitplane_decompose::<f32>(&img).unwrap().into_tensor();
            prop_assert_eq!(out.batch_item(1).unwrap(), single);
        }
    }
}
