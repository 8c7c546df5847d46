//! Differentiable bilinear warping of feature maps by displacement fields.
//!
//! Output pixel `p` reads the source at `p + D(p)` with `D = (dx, dy)` and
//! `x` the column. Feature maps are sampled with zero padding: corners that
//! fall outside the grid contribute nothing. Displacement fields themselves
//! are resampled with edge clamping (see [`Padding::Border`]) when they are
//! composed or aligned, so spatially uniform motion stays uniform at the
//! borders.

use crate::error::{Error, Result};
use crate::tensor::{DisplacementField, FeatureMap, Real};

/// How samples outside the grid are treated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Out-of-bounds corners read zero.
    Zeros,
    /// Sampling coordinates are clamped into `[0, W-1] x [0, H-1]`.
    Border,
}

/// Gradients of a warp with respect to both of its inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct WarpGradients<T = f32> {
    pub d_source: FeatureMap<T>,
    pub d_field: DisplacementField<T>,
}

/// One bilinear tap: the grid location it reads and its interpolation weight.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tap<T> {
    pub y: usize,
    pub x: usize,
    pub weight: T,
}

#[derive(Clone, Copy)]
struct Sample<T> {
    x0: i64,
    y0: i64,
    fx: T,
    fy: T,
    // d(sample coord)/d(displacement); zero where clamping is active
    gx: T,
    gy: T,
}

// Outside this margin every corner is out of bounds, so the exact location
// does not matter and we avoid casting huge floats.
fn locate<T: Real>(coord: T, extent: usize, padding: Padding) -> Option<(i64, T, T)> {
    let max = T::from_usize(extent - 1).unwrap();
    match padding {
        Padding::Zeros => {
            if !(coord > -T::lit(2.0) && coord < max + T::lit(2.0)) {
                return None;
            }
            let fl = coord.floor();
            Some((fl.to_i64().unwrap(), coord - fl, T::one()))
        }
        Padding::Border => {
            let (c, g) = if coord < T::zero() {
                (T::zero(), T::zero())
            } else if coord > max {
                (max, T::zero())
            } else {
                (coord, T::one())
            };
            let fl = c.floor();
            Some((fl.to_i64().unwrap(), c - fl, g))
        }
    }
}

#[inline]
fn sample_point<T: Real>(
    sx: T,
    sy: T,
    height: usize,
    width: usize,
    padding: Padding,
) -> Option<Sample<T>> {
    let (x0, fx, gx) = locate(sx, width, padding)?;
    let (y0, fy, gy) = locate(sy, height, padding)?;
    Some(Sample {
        x0,
        y0,
        fx,
        fy,
        gx,
        gy,
    })
}

#[inline]
fn in_grid(y: i64, x: i64, height: usize, width: usize) -> bool {
    y >= 0 && x >= 0 && (y as usize) < height && (x as usize) < width
}

/// The (up to four) in-bounds taps used to read `(sx, sy)` under zero
/// padding. Their weights sum to one when every corner is inside the grid.
pub fn bilinear_taps<T: Real>(sx: T, sy: T, height: usize, width: usize) -> Vec<Tap<T>> {
    let Some(s) = sample_point(sx, sy, height, width, Padding::Zeros) else {
        return Vec::new();
    };
    corners(&s)
        .into_iter()
        .filter(|&(y, x, _)| in_grid(y, x, height, width))
        .map(|(y, x, weight)| Tap {
            y: y as usize,
            x: x as usize,
            weight,
        })
        .collect()
}

#[inline]
fn corners<T: Real>(s: &Sample<T>) -> [(i64, i64, T); 4] {
    let one = T::one();
    [
        (s.y0, s.x0, (one - s.fx) * (one - s.fy)),
        (s.y0, s.x0 + 1, s.fx * (one - s.fy)),
        (s.y0 + 1, s.x0, (one - s.fx) * s.fy),
        (s.y0 + 1, s.x0 + 1, s.fx * s.fy),
    ]
}

/// Bilinearly samples `source` at `(p + D(p))` for every grid location `p`.
pub fn warp<T: Real>(source: &FeatureMap<T>, field: &DisplacementField<T>) -> Result<FeatureMap<T>> {
    warp_padded(source, field, Padding::Zeros)
}

pub fn warp_padded<T: Real>(
    source: &FeatureMap<T>,
    field: &DisplacementField<T>,
    padding: Padding,
) -> Result<FeatureMap<T>> {
    let (h, w, c) = source.shape();
    field.check_grid(h, w, "warp")?;
    let mut out = FeatureMap::zeros(h, w, c);
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = field.get(y, x);
            let sx = T::from_usize(x).unwrap() + dx;
            let sy = T::from_usize(y).unwrap() + dy;
            let Some(s) = sample_point(sx, sy, h, w, padding) else {
                continue;
            };
            let dst = out.pixel_mut(y, x);
            for (cy, cx, wgt) in corners(&s) {
                if wgt.is_zero() || !in_grid(cy, cx, h, w) {
                    continue;
                }
                let src = source.pixel(cy as usize, cx as usize);
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d += wgt * v;
                }
            }
        }
    }
    Ok(out)
}

/// Exact gradients of [`warp`] given the upstream gradient of its output.
///
/// At integer sampling coordinates the field gradient uses the bilinear
/// weight expressions as written, i.e. the one-sided derivative toward the
/// `floor + 1` corner.
pub fn warp_backward<T: Real>(
    source: &FeatureMap<T>,
    field: &DisplacementField<T>,
    upstream: &FeatureMap<T>,
) -> Result<WarpGradients<T>> {
    warp_backward_padded(source, field, upstream, Padding::Zeros)
}

pub fn warp_backward_padded<T: Real>(
    source: &FeatureMap<T>,
    field: &DisplacementField<T>,
    upstream: &FeatureMap<T>,
    padding: Padding,
) -> Result<WarpGradients<T>> {
    let (h, w, c) = source.shape();
    field.check_grid(h, w, "warp_backward")?;
    source.check_same_shape(upstream, "warp_backward")?;
    let mut d_source = FeatureMap::zeros(h, w, c);
    let mut d_field = DisplacementField::zeros(h, w);
    let one = T::one();
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = field.get(y, x);
            let sx = T::from_usize(x).unwrap() + dx;
            let sy = T::from_usize(y).unwrap() + dy;
            let Some(s) = sample_point(sx, sy, h, w, padding) else {
                continue;
            };
            let g = upstream.pixel(y, x);
            let value = |cy: i64, cx: i64, k: usize| -> T {
                if in_grid(cy, cx, h, w) {
                    source.get(cy as usize, cx as usize, k)
                } else {
                    T::zero()
                }
            };
            for (cy, cx, wgt) in corners(&s) {
                if wgt.is_zero() || !in_grid(cy, cx, h, w) {
                    continue;
                }
                let dst = d_source.pixel_mut(cy as usize, cx as usize);
                for (d, &gk) in dst.iter_mut().zip(g) {
                    *d += wgt * gk;
                }
            }
            let (mut gdx, mut gdy) = (T::zero(), T::zero());
            for (k, &gk) in g.iter().enumerate() {
                if gk.is_zero() {
                    continue;
                }
                let v00 = value(s.y0, s.x0, k);
                let v01 = value(s.y0, s.x0 + 1, k);
                let v10 = value(s.y0 + 1, s.x0, k);
                let v11 = value(s.y0 + 1, s.x0 + 1, k);
                gdx += gk * ((one - s.fy) * (v01 - v00) + s.fy * (v11 - v10));
                gdy += gk * ((one - s.fx) * (v10 - v00) + s.fx * (v11 - v01));
            }
            d_field.set(y, x, gdx * s.gx, gdy * s.gy);
        }
    }
    Ok(WarpGradients { d_source, d_field })
}

/// Field whose single warp approximates warping by `first` and then by
/// `second`: `composed(p) = second(p) + first(p + second(p))`.
pub fn compose_fields<T: Real>(
    first: &DisplacementField<T>,
    second: &DisplacementField<T>,
) -> Result<DisplacementField<T>> {
    if (first.height(), first.width()) != (second.height(), second.width()) {
        return Err(Error::dim(
            "compose_fields",
            format!("{}x{}", first.height(), first.width()),
            format!("{}x{}", second.height(), second.width()),
        ));
    }
    let aligned = warp_padded(first.as_map(), second, Padding::Border)?;
    DisplacementField::from_map(aligned.add(second.as_map())?)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent scalar oracle: four-corner bilinear read with zero fill.
    fn oracle(src: &FeatureMap<f64>, sx: f64, sy: f64, c: usize) -> f64 {
        let (h, w, _) = src.shape();
        let read = |yy: f64, xx: f64| -> f64 {
            if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
                0.0
            } else {
                src.get(yy as usize, xx as usize, c)
            }
        };
        let x0 = sx.floor();
        let y0 = sy.floor();
        let ax = sx - x0;
        let ay = sy - y0;
        read(y0, x0) * (1.0 - ax) * (1.0 - ay)
            + read(y0, x0 + 1.0) * ax * (1.0 - ay)
            + read(y0 + 1.0, x0) * (1.0 - ax) * ay
            + read(y0 + 1.0, x0 + 1.0) * ax * ay
    }

    fn square() -> FeatureMap<f64> {
        FeatureMap::new(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap()
    }

    #[test]
    fn zero_field_is_identity() {
        let src = square();
        let out = warp(&src, &DisplacementField::zeros(2, 2)).unwrap();
        assert_eq!(out, src);
    }

    #[test]
    fn half_pixel_shift_matches_oracle() {
        let src = square();
        let out = warp(&src, &DisplacementField::constant(2, 2, 0.5, 0.5)).unwrap();
        let expected = oracle(&src, 0.5, 0.5, 0);
        assert!((expected - 2.5).abs() < 1e-12);
        assert!((out.get(0, 0, 0) - expected).abs() < 1e-12);
    }

    #[test]
    fn fully_out_of_bounds_reads_zero() {
        let src = square();
        let out = warp(&src, &DisplacementField::constant(2, 2, 2.0, 2.0)).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
        let g = warp_backward(
            &src,
            &DisplacementField::constant(2, 2, 2.0, 2.0),
            &FeatureMap::filled(2, 2, 1, 1.0),
        )
        .unwrap();
        assert!(g.d_source.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn huge_displacements_do_not_panic() {
        let src = square();
        let out = warp(&src, &DisplacementField::constant(2, 2, 1e30, -1e30)).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
        let out = warp_padded(&src, &DisplacementField::constant(2, 2, 1e30, -1e30), Padding::Border)
            .unwrap();
        assert_eq!(out.get(0, 0, 0), 2.0);
    }

    #[test]
    fn shape_mismatch_is_a_dimension_error() {
        let src = square();
        let field = DisplacementField::zeros(3, 2);
        assert!(matches!(warp(&src, &field), Err(Error::Dimension { .. })));
        assert!(warp_backward(&src, &field, &src).is_err());
        assert!(compose_fields(&field, &DisplacementField::zeros(2, 2)).is_err());
    }

    #[test]
    fn identity_backward_passes_gradient_through() {
        let src = square();
        let g = warp_backward(
            &src,
            &DisplacementField::zeros(2, 2),
            &FeatureMap::filled(2, 2, 1, 1.0),
        )
        .unwrap();
        assert!(g.d_source.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn integer_translation_with_zero_fill() {
        let src = FeatureMap::<f64>::from_fn(4, 5, 2, |y, x, c| (y * 10 + x) as f64 + c as f64 * 0.5);
        let out = warp(&src, &DisplacementField::constant(4, 5, 2.0, -1.0)).unwrap();
        for y in 0..4 {
            for x in 0..5 {
                for c in 0..2 {
                    let (sy, sx) = (y as i64 - 1, x as i64 + 2);
                    let expected = if in_grid(sy, sx, 4, 5) {
                        src.get(sy as usize, sx as usize, c)
                    } else {
                        0.0
                    };
                    assert_eq!(out.get(y, x, c), expected);
                }
            }
        }
    }

    #[test]
    fn tap_weights_sum_to_in_bounds_fraction() {
        let taps = bilinear_taps(1.25f64, 0.5, 3, 3);
        let sum: f64 = taps.iter().map(|t| t.weight).sum();
        assert!((sum - 1.0).abs() < 1e-12);
        // half the corners sit in column 3, which is outside a width-3 grid
        let taps = bilinear_taps(2.5f64, 1.0, 3, 3);
        let sum: f64 = taps.iter().map(|t| t.weight).sum();
        assert!((sum - 0.5).abs() < 1e-12);
    }

    #[test]
    fn compose_constants_add() {
        let z = DisplacementField::<f64>::zeros(5, 6);
        assert!(compose_fields(&z, &z).unwrap().is_zero());
        let u = DisplacementField::constant(5, 6, 0.75f64, -1.5);
        let v = DisplacementField::constant(5, 6, 2.0, 0.25);
        let c = compose_fields(&u, &v).unwrap();
        for y in 0..5 {
            for x in 0..6 {
                let (dx, dy) = c.get(y, x);
                assert!((dx - 2.75).abs() < 1e-12 && (dy + 1.25).abs() < 1e-12);
            }
        }
    }
}
