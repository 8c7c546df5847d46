//! Dense channel-last grids: feature maps and displacement fields.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Scalar type used by every numeric kernel. Production paths run in `f32`,
/// gradient checks in `f64`.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + 'static
{
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal out of range")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// An `H x W x C` grid of reals in row-major, channel-last order.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T = f32> {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<T>,
}

impl<T: Real> FeatureMap<T> {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        let expected = height
            .checked_mul(width)
            .and_then(|n| n.checked_mul(channels))
            .ok_or_else(|| Error::dim("FeatureMap::new", "addressable size", "overflow"))?;
        if data.len() != expected {
            return Err(Error::dim("FeatureMap::new", expected, data.len()));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, T::zero())
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: T) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.height, self.width, self.channels)
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        debug_assert!(y < self.height && x < self.width && c < self.channels);
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> T {
        self.data[self.index(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, value: T) {
        let i = self.index(y, x, c);
        self.data[i] = value;
    }

    /// All channels of one pixel.
    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[T] {
        let start = (y * self.width + x) * self.channels;
        &self.data[start..start + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [T] {
        let start = (y * self.width + x) * self.channels;
        &mut self.data[start..start + self.channels]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.shape() == other.shape()
    }

    pub(crate) fn check_same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::dim(
                op,
                format!("{:?}", self.shape()),
                format!("{:?}", other.shape()),
            ))
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |acc, v| if v.abs() > acc { v.abs() } else { acc })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.check_same_shape(other, op)?;
        Ok(Self {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, factor: T) -> Self {
        self.map(|v| v * factor)
    }

    /// `(1 - t) * self + t * other`.
    pub fn lerp(&self, other: &Self, t: T) -> Result<Self> {
        let s = T::one() - t;
        self.zip_map(other, "lerp", |a, b| s * a + t * b)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_same_shape(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Arithmetic mean of equally shaped maps.
    pub fn mean_of(maps: &[&Self]) -> Result<Self> {
        let first = maps
            .first()
            .ok_or_else(|| Error::dim("mean_of", "at least one map", 0))?;
        let mut acc = (*first).clone();
        for m in &maps[1..] {
            acc.add_assign(m)?;
        }
        let inv = T::one() / T::from_usize(maps.len()).expect("map count");
        Ok(acc.scale(inv))
    }

    pub fn cast<U: Real>(&self) -> FeatureMap<U> {
        FeatureMap {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.as_f64()).expect("cast"))
                .collect(),
        }
    }

    /// Selects a contiguous channel range `[start, end)`.
    pub fn channel_slice(&self, start: usize, end: usize) -> FeatureMap<T> {
        assert!(start <= end && end <= self.channels);
        FeatureMap::from_fn(self.height, self.width, end - start, |y, x, c| {
            self.get(y, x, start + c)
        })
    }

    /// Stacks the channels of two maps with identical spatial extent.
    pub fn concat_channels(&self, other: &Self) -> Result<Self> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::dim(
                "concat_channels",
                format!("{}x{}", self.height, self.width),
                format!("{}x{}", other.height, other.width),
            ));
        }
        let c = self.channels + other.channels;
        Ok(FeatureMap::from_fn(self.height, self.width, c, |y, x, k| {
            if k < self.channels {
                self.get(y, x, k)
            } else {
                other.get(y, x, k - self.channels)
            }
        }))
    }

    /// Box-filter downsampling by an integer factor.
    pub fn avg_pool(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.height % factor != 0 || self.width % factor != 0 {
            return Err(Error::dim(
                "avg_pool",
                format!("dims divisible by {factor}"),
                format!("{}x{}", self.height, self.width),
            ));
        }
        let (h, w) = (self.height / factor, self.width / factor);
        let norm = T::one() / T::from_usize(factor * factor).unwrap();
        let mut out = FeatureMap::zeros(h, w, self.channels);
        for y in 0..self.height {
            for x in 0..self.width {
                let src = self.pixel(y, x);
                let dst = out.pixel_mut(y / factor, x / factor);
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += s * norm;
                }
            }
        }
        Ok(out)
    }

    /// Mean over channels, producing a single-channel map.
    pub fn channel_mean(&self) -> Self {
        let inv = T::one() / T::from_usize(self.channels.max(1)).unwrap();
        FeatureMap::from_fn(self.height, self.width, 1, |y, x, _| {
            self.pixel(y, x).iter().copied().sum::<T>() * inv
        })
    }
}

/// Per-pixel `(dx, dy)` offsets in grid units; output pixel `p` of a warp
/// reads its source at `p + D(p)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementField<T = f32>(FeatureMap<T>);

impl<T: Real> DisplacementField<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        Ok(Self(FeatureMap::new(height, width, 2, data)?))
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self(FeatureMap::zeros(height, width, 2))
    }

    pub fn constant(height: usize, width: usize, dx: T, dy: T) -> Self {
        Self::from_fn(height, width, |_, _| (dx, dy))
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> (T, T)) -> Self {
        let mut data = Vec::with_capacity(height * width * 2);
        for y in 0..height {
            for x in 0..width {
                let (dx, dy) = f(y, x);
                data.push(dx);
                data.push(dy);
            }
        }
        Self(FeatureMap {
            height,
            width,
            channels: 2,
            data,
        })
    }

    pub fn from_map(map: FeatureMap<T>) -> Result<Self> {
        if map.channels != 2 {
            return Err(Error::dim("DisplacementField::from_map", 2, map.channels));
        }
        Ok(Self(map))
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.0.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.0.width
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> (T, T) {
        let p = self.0.pixel(y, x);
        (p[0], p[1])
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, dx: T, dy: T) {
        let p = self.0.pixel_mut(y, x);
        p[0] = dx;
        p[1] = dy;
    }

    pub fn as_map(&self) -> &FeatureMap<T> {
        &self.0
    }

    pub fn into_map(self) -> FeatureMap<T> {
        self.0
    }

    pub fn scale(&self, factor: T) -> Self {
        Self(self.0.scale(factor))
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        Ok(Self(self.0.add(&other.0)?))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        Ok(Self(self.0.sub(&other.0)?))
    }

    pub fn is_zero(&self) -> bool {
        self.0.data.iter().all(|v| v.is_zero())
    }

    pub fn cast<U: Real>(&self) -> DisplacementField<U> {
        DisplacementField(self.0.cast())
    }

    /// Mean `(dx, dy)` over the whole grid.
    pub fn mean(&self) -> (T, T) {
        let n = T::from_usize((self.height() * self.width()).max(1)).unwrap();
        let (mut sx, mut sy) = (T::zero(), T::zero());
        for p in self.0.data.chunks_exact(2) {
            sx += p[0];
            sy += p[1];
        }
        (sx / n, sy / n)
    }

    pub(crate) fn check_grid(&self, height: usize, width: usize, op: &'static str) -> Result<()> {
        if (self.height(), self.width()) == (height, width) {
            Ok(())
        } else {
            Err(Error::dim(
                op,
                format!("{height}x{width}"),
                format!("{}x{}", self.height(), self.width()),
            ))
        }
    }
}

impl<T: Real> From<DisplacementField<T>> for FeatureMap<T> {
    fn from(field: DisplacementField<T>) -> Self {
        field.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize, c: usize) -> FeatureMap<f64> {
        FeatureMap::from_fn(h, w, c, |y, x, k| (y * 100 + x * 10 + k) as f64)
    }

    #[test]
    fn length_must_match_dims() {
        assert!(FeatureMap::<f32>::new(2, 2, 3, vec![0.0; 12]).is_ok());
        assert!(matches!(
            FeatureMap::<f32>::new(2, 2, 3, vec![0.0; 11]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn lerp_identities() {
        let a = ramp(3, 4, 2);
        let b = a.map(|v| v * -2.0 + 1.0);
        assert_eq!(a.lerp(&a, 0.7).unwrap().data().len(), a.data().len());
        for (x, y) in a.lerp(&a, 0.7).unwrap().data().iter().zip(a.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        let avg = FeatureMap::mean_of(&[&a, &b]).unwrap();
        assert_eq!(a.lerp(&b, 0.5).unwrap(), avg);
        assert_eq!(a.add(&b).unwrap().scale(0.5), a.lerp(&b, 0.5).unwrap());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = ramp(2, 2, 1);
        let b = ramp(2, 3, 1);
        assert!(a.add(&b).is_err());
        assert!(a.lerp(&b, 0.5).is_err());
    }

    #[test]
    fn avg_pool_requires_divisible_dims() {
        let a = ramp(8, 8, 3);
        let p = a.avg_pool(4).unwrap();
        assert_eq!(p.shape(), (2, 2, 3));
        assert!(ramp(6, 8, 1).avg_pool(4).is_err());
        // mean of rows 0..4, cols 0..4 of channel 0
        assert!((p.get(0, 0, 0) - (150.0 + 15.0)).abs() < 1e-9);
    }

    #[test]
    fn field_requires_two_channels() {
        assert!(DisplacementField::from_map(ramp(2, 2, 3)).is_err());
        let f = DisplacementField::<f64>::constant(3, 3, 1.5, -2.0);
        assert_eq!(f.get(2, 1), (1.5, -2.0));
        assert_eq!(f.mean(), (1.5, -2.0));
    }
}
