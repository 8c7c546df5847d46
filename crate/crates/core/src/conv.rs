//! Direct 2-D convolution over channel-last maps.
//!
//! Weights are laid out `[out][ky][kx][in]`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{he_normal, ParamId, ParamStore};
use crate::tensor::{FeatureMap, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

/// How a freshly registered layer is initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    He,
    Zero,
    /// He weights with a constant bias.
    HeBias(f64),
}

impl ConvLayer {
    /// Registers `{name}.weight` and `{name}.bias` in `store`.
    #[allow(clippy::too_many_arguments)]
    pub fn register<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        init: Init,
    ) -> Result<Self> {
        let n = out_channels * kernel * kernel * in_channels;
        let fan_in = kernel * kernel * in_channels;
        let (w, b) = match init {
            Init::He => (he_normal(rng, n, fan_in), vec![T::zero(); out_channels]),
            Init::Zero => (vec![T::zero(); n], vec![T::zero(); out_channels]),
            Init::HeBias(b) => (he_normal(rng, n, fan_in), vec![T::lit(b); out_channels]),
        };
        let weight = store.register(
            &format!("{name}.weight"),
            &[out_channels, kernel, kernel, in_channels],
            w,
        )?;
        let bias = store.register(&format!("{name}.bias"), &[out_channels], b)?;
        Ok(Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        })
    }

    pub fn output_size(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        let span = |n: usize| -> Option<usize> {
            let padded = n + 2 * self.padding;
            if padded < self.kernel {
                return None;
            }
            let span = padded - self.kernel;
            (span % self.stride == 0).then_some(span / self.stride + 1)
        };
        match (span(height), span(width)) {
            (Some(h), Some(w)) => Ok((h, w)),
            _ => Err(Error::dim(
                "conv",
                format!(
                    "input tiling kernel {} stride {} padding {}",
                    self.kernel, self.stride, self.padding
                ),
                format!("{height}x{width}"),
            )),
        }
    }

    fn check_input<T: Real>(&self, input: &FeatureMap<T>) -> Result<(usize, usize)> {
        if input.channels() != self.in_channels {
            return Err(Error::dim("conv", self.in_channels, input.channels()));
        }
        self.output_size(input.height(), input.width())
    }

    /// Visits every (output pixel, kernel tap, input pixel) triple inside the
    /// grid.
    #[inline]
    fn for_each_tap(
        &self,
        in_h: usize,
        in_w: usize,
        out_h: usize,
        out_w: usize,
        mut f: impl FnMut(usize, usize, usize, usize),
    ) {
        let k = self.kernel;
        for oy in 0..out_h {
            for ox in 0..out_w {
                for ky in 0..k {
                    let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                    if iy < 0 || iy as usize >= in_h {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                        if ix < 0 || ix as usize >= in_w {
                            continue;
                        }
                        let o = oy * out_w + ox;
                        let i = iy as usize * in_w + ix as usize;
                        f(o, i, ky, kx);
                    }
                }
            }
        }
    }

    pub fn forward<T: Real>(
        &self,
        input: &FeatureMap<T>,
        params: &ParamStore<T>,
    ) -> Result<FeatureMap<T>> {
        let (out_h, out_w) = self.check_input(input)?;
        let weight = params.get(self.weight);
        let bias = params.get(self.bias);
        let (cin, cout, k) = (self.in_channels, self.out_channels, self.kernel);
        let mut out = FeatureMap::zeros(out_h, out_w, cout);
        {
            let dst = out.data_mut();
            for o in 0..out_h * out_w {
                dst[o * cout..(o + 1) * cout].copy_from_slice(bias);
            }
        }
        let src = input.data();
        let (in_h, in_w) = (input.height(), input.width());
        let dst = out.data_mut();
        self.for_each_tap(in_h, in_w, out_h, out_w, |o, i, ky, kx| {
            let x = &src[i * cin..(i + 1) * cin];
            let acc = &mut dst[o * cout..(o + 1) * cout];
            for (oc, a) in acc.iter_mut().enumerate() {
                let w0 = ((oc * k + ky) * k + kx) * cin;
                let w = &weight[w0..w0 + cin];
                let mut s = T::zero();
                for (&wi, &xi) in w.iter().zip(x) {
                    s += wi * xi;
                }
                *a += s;
            }
        });
        Ok(out)
    }

    /// Returns the input gradient and accumulates weight/bias gradients into
    /// `grads`.
    pub fn backward<T: Real>(
        &self,
        input: &FeatureMap<T>,
        upstream: &FeatureMap<T>,
        params: &ParamStore<T>,
        grads: &mut ParamStore<T>,
    ) -> Result<FeatureMap<T>> {
        let (out_h, out_w) = self.check_input(input)?;
        if upstream.shape() != (out_h, out_w, self.out_channels) {
            return Err(Error::dim(
                "conv backward",
                format!("{:?}", (out_h, out_w, self.out_channels)),
                format!("{:?}", upstream.shape()),
            ));
        }
        let weight = params.get(self.weight);
        let (cin, cout, k) = (self.in_channels, self.out_channels, self.kernel);
        let g = upstream.data();
        {
            let db = grads.get_mut(self.bias);
            for o in 0..out_h * out_w {
                for (d, &v) in db.iter_mut().zip(&g[o * cout..(o + 1) * cout]) {
                    *d += v;
                }
            }
        }
        let mut d_input = input.zeros_like();
        let src = input.data();
        let (in_h, in_w) = (input.height(), input.width());
        let dw = grads.get_mut(self.weight);
        let di = d_input.data_mut();
        self.for_each_tap(in_h, in_w, out_h, out_w, |o, i, ky, kx| {
            let x = &src[i * cin..(i + 1) * cin];
            let gx = &mut di[i * cin..(i + 1) * cin];
            for (oc, &go) in g[o * cout..(o + 1) * cout].iter().enumerate() {
                if go.is_zero() {
                    continue;
                }
                let w0 = ((oc * k + ky) * k + kx) * cin;
                let w = &weight[w0..w0 + cin];
                let dwo = &mut dw[w0..w0 + cin];
                for c in 0..cin {
                    dwo[c] += go * x[c];
                    gx[c] += go * w[c];
                }
            }
        });
        Ok(d_input)
    }
}

pub fn relu<T: Real>(x: &FeatureMap<T>) -> FeatureMap<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient of [`relu`] given its input and the upstream gradient.
pub fn relu_backward<T: Real>(input: &FeatureMap<T>, upstream: &FeatureMap<T>) -> Result<FeatureMap<T>> {
    input.zip_map(upstream, "relu_backward", |x, g| if x > T::zero() { g } else { T::zero() })
}
