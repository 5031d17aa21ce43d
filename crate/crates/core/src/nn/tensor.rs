//! Dense row-major tensors of rank at most four.
//!
//! Images use the `(batch, channels, height, width)` layout. Binary
//! elementwise ops broadcast numpy-style after left-padding both shapes to
//! rank four.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::LinalgScalar;
use num_traits::{Float, FromPrimitive};

use crate::error::{Result, SimiError};

pub const MAX_RANK: usize = 4;

/// Floating-point element type of a tensor.
pub trait Real:
    Float + FromPrimitive + LinalgScalar + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Tag written into checkpoints.
    const DTYPE: u8;
    const BYTES: usize;

    fn of(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("finite conversion")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Real for f32 {
    const DTYPE: u8 = 1;
    const BYTES: usize = 4;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Real for f64 {
    const DTYPE: u8 = 2;
    const BYTES: usize = 8;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

/// Image-valued tensor in `[0, 1]`, shaped `(N, 3, H, W)`.
pub type ImageTensor<T = f32> = Tensor<T>;

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.len() > MAX_RANK {
            return Err(SimiError::ShapeMismatch(format!("rank {} > {MAX_RANK}", shape.len())));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(SimiError::ShapeMismatch(format!(
                "shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        assert!(shape.len() <= MAX_RANK, "rank {} > {MAX_RANK}", shape.len());
        Self { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: Vec::new(), data: vec![value] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: (0..numel).map(&mut f).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on a tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// `(N, C, H, W)` of a rank-4 tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(SimiError::ShapeMismatch(format!("expected rank 4, got {:?}", self.shape))),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_same(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        debug_assert_eq!(self.shape, other.shape);
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::of(self.data.len() as f64)
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() || shape.len() > MAX_RANK {
            return Err(SimiError::ShapeMismatch(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Item `n` of a batched rank-4 tensor, keeping a batch axis of one.
    pub fn batch_item(&self, n: usize) -> Result<Self> {
        let (batch, c, h, w) = self.dims4()?;
        if n >= batch {
            return Err(SimiError::ShapeMismatch(format!("batch index {n} out of {batch}")));
        }
        let len = c * h * w;
        Ok(Self { shape: vec![1, c, h, w], data: self.data[n * len..(n + 1) * len].to_vec() })
    }

    /// Stacks rank-4 tensors with identical `(C, H, W)` along the batch axis.
    pub fn stack_batch(items: &[Self]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| SimiError::ShapeMismatch("empty batch".into()))?;
        let (_, c, h, w) = first.dims4()?;
        let mut data = Vec::with_capacity(items.len() * c * h * w);
        let mut n = 0;
        for t in items {
            let (tn, tc, th, tw) = t.dims4()?;
            if (tc, th, tw) != (c, h, w) {
                return Err(SimiError::ShapeMismatch(format!(
                    "cannot stack {:?} with {:?}",
                    t.shape, first.shape
                )));
            }
            n += tn;
            data.extend_from_slice(&t.data);
        }
        Ok(Self { shape: vec![n, c, h, w], data })
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| U::of(v.as_f64())).collect() }
    }
}

/// Left-pads `shape` with ones up to rank four.
pub(crate) fn pad4(shape: &[usize]) -> [usize; 4] {
    let mut out = [1; 4];
    out[MAX_RANK - shape.len()..].copy_from_slice(shape);
    out
}

fn strides4(dims: &[usize; 4]) -> [usize; 4] {
    [dims[1] * dims[2] * dims[3], dims[2] * dims[3], dims[3], 1]
}

/// Strides of `dims` when read against a broadcast output; broadcast axes get 0.
fn broadcast_strides(dims: &[usize; 4]) -> [usize; 4] {
    let mut s = strides4(dims);
    for (st, &d) in s.iter_mut().zip(dims) {
        if d == 1 {
            *st = 0;
        }
    }
    s
}

/// Broadcast result shape of `a` and `b`.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let (pa, pb) = (pad4(a), pad4(b));
    let mut out = Vec::with_capacity(rank);
    for axis in MAX_RANK - rank..MAX_RANK {
        let (x, y) = (pa[axis], pb[axis]);
        out.push(match (x, y) {
            _ if x == y => x,
            (1, _) => y,
            (_, 1) => x,
            _ => {
                return Err(SimiError::ShapeMismatch(format!("cannot broadcast {a:?} with {b:?}")))
            }
        });
    }
    Ok(out)
}

/// Elementwise `f(a, b)` under broadcasting.
pub fn broadcast_zip<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
    if a.shape == b.shape {
        return Ok(a.zip_same(b, f));
    }
    if b.numel() == 1 && broadcast_shape(&a.shape, &b.shape)? == a.shape {
        let s = b.data[0];
        return Ok(a.map(|v| f(v, s)));
    }
    let shape = broadcast_shape(&a.shape, &b.shape)?;
    let out_dims = pad4(&shape);
    let sa = broadcast_strides(&pad4(&a.shape));
    let sb = broadcast_strides(&pad4(&b.shape));
    let mut data = Vec::with_capacity(out_dims.iter().product());
    for i0 in 0..out_dims[0] {
        for i1 in 0..out_dims[1] {
            for i2 in 0..out_dims[2] {
                let oa = i0 * sa[0] + i1 * sa[1] + i2 * sa[2];
                let ob = i0 * sb[0] + i1 * sb[1] + i2 * sb[2];
                for i3 in 0..out_dims[3] {
                    data.push(f(a.data[oa + i3 * sa[3]], b.data[ob + i3 * sb[3]]));
                }
            }
        }
    }
    Ok(Tensor { shape, data })
}

/// Sums `grad` (shaped like a broadcast output) down to `target` shape.
pub fn reduce_to<T: Real>(grad: &Tensor<T>, target: &[usize]) -> Tensor<T> {
    if grad.shape == target {
        return grad.clone();
    }
    let numel: usize = target.iter().product();
    if numel == 1 {
        return Tensor { shape: target.to_vec(), data: vec![grad.sum()] };
    }
    let dims = pad4(&grad.shape);
    let st = broadcast_strides(&pad4(target));
    let mut data = vec![T::zero(); numel];
    let mut k = 0;
    for i0 in 0..dims[0] {
        for i1 in 0..dims[1] {
            for i2 in 0..dims[2] {
                let o = i0 * st[0] + i1 * st[1] + i2 * st[2];
                for i3 in 0..dims[3] {
                    data[o + i3 * st[3]] = data[o + i3 * st[3]] + grad.data[k];
                    k += 1;
                }
            }
        }
    }
    Tensor { shape: target.to_vec(), data }
}
