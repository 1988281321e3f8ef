//! Separable bilinear resampling with half-pixel centers.
//!
//! Destination index `d` samples source coordinate `(d + 0.5) * src / dst - 0.5`,
//! clamped to `[0, src - 1]`. Interpolation uses `a + f * (b - a)`, which is
//! exact on constant input.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
#[error("cannot upsample {src_h}x{src_w} to smaller target {dst_h}x{dst_w}")]
pub struct TargetTooSmall {
    pub src_h: usize,
    pub src_w: usize,
    pub dst_h: usize,
    pub dst_w: usize,
}

/// Per-axis source taps for one destination length.
#[derive(Debug, Clone)]
pub struct AxisTaps {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<f64>,
}

impl AxisTaps {
    pub fn new(src: usize, dst: usize) -> Self {
        assert!(src >= 1 && dst >= 1, "axis lengths must be positive");
        let scale = src as f64 / dst as f64;
        let max = (src - 1) as f64;
        let mut lo = Vec::with_capacity(dst);
        let mut hi = Vec::with_capacity(dst);
        let mut frac = Vec::with_capacity(dst);
        for d in 0..dst {
            let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, max);
            let l = s.floor() as usize;
            lo.push(l);
            hi.push((l + 1).min(src - 1));
            frac.push(s - l as f64);
        }
        Self { lo, hi, frac }
    }

    pub fn len(&self) -> usize {
        self.lo.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lo.is_empty()
    }
}

/// Reusable resampler between fixed source and destination shapes.
#[derive(Debug, Clone)]
pub struct Resampler {
    src_h: usize,
    src_w: usize,
    rows: AxisTaps,
    cols: AxisTaps,
    scratch: Vec<f64>,
}

impl Resampler {
    pub fn new(src_h: usize, src_w: usize, dst_h: usize, dst_w: usize) -> Self {
        Self {
            src_h,
            src_w,
            rows: AxisTaps::new(src_h, dst_h),
            cols: AxisTaps::new(src_w, dst_w),
            scratch: vec![0.0; src_h * dst_w],
        }
    }

    pub fn dst_shape(&self) -> (usize, usize) {
        (self.rows.len(), self.cols.len())
    }

    /// Resamples `src` (row-major `src_h * src_w`) into `out` (`dst_h * dst_w`).
    pub fn resample_into<T: Copy + Into<f64>>(&mut self, src: &[T], out: &mut [f64]) {
        let (dst_h, dst_w) = self.dst_shape();
        debug_assert_eq!(src.len(), self.src_h * self.src_w);
        debug_assert_eq!(out.len(), dst_h * dst_w);

        for r in 0..self.src_h {
            let row = &src[r * self.src_w..(r + 1) * self.src_w];
            let tmp = &mut self.scratch[r * dst_w..(r + 1) * dst_w];
            for (x, t) in tmp.iter_mut().enumerate() {
                let a: f64 = row[self.cols.lo[x]].into();
                let b: f64 = row[self.cols.hi[x]].into();
                *t = a + self.cols.frac[x] * (b - a);
            }
        }
        for y in 0..dst_h {
            let top = &self.scratch[self.rows.lo[y] * dst_w..(self.rows.lo[y] + 1) * dst_w];
            let bottom = &self.scratch[self.rows.hi[y] * dst_w..(self.rows.hi[y] + 1) * dst_w];
            let f = self.rows.frac[y];
            let dst = &mut out[y * dst_w..(y + 1) * dst_w];
            for x in 0..dst_w {
                dst[x] = top[x] + f * (bottom[x] - top[x]);
            }
        }
    }
}

/// Resamples a `h * w` map to `out_h * out_w`, in either direction.
pub fn resize_bilinear<T: Copy + Into<f64>>(
    map: &[T],
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; out_h * out_w];
    Resampler::new(h, w, out_h, out_w).resample_into(map, &mut out);
    out
}

/// Upsamples a `h * w` map to a square `target * target` grid. Not renormalized.
pub fn upsample_bilinear<T: Copy + Into<f64>>(
    map: &[T],
    h: usize,
    w: usize,
    target: usize,
) -> Result<Vec<f64>, TargetTooSmall> {
    if target < h || target < w {
        return Err(TargetTooSmall {
            src_h: h,
            src_w: w,
            dst_h: target,
            dst_w: target,
        });
    }
    Ok(resize_bilinear(map, h, w, target, target))
}

/// Resizes an interleaved 8-bit raster with `channels` channels.
pub fn resize_u8(
    pixels: &[u8],
    h: usize,
    w: usize,
    channels: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<u8> {
    let mut resampler = Resampler::new(h, w, out_h, out_w);
    let mut plane = vec![0.0f64; h * w];
    let mut resized = vec![0.0f64; out_h * out_w];
    let mut out = vec![0u8; out_h * out_w * channels];
    for c in 0..channels {
        for (p, v) in plane.iter_mut().enumerate() {
            *v = f64::from(pixels[p * channels + c]);
        }
        resampler.resample_into(&plane, &mut resized);
        for (p, v) in resized.iter().enumerate() {
            out[p * channels + c] = v.round().clamp(0.0, 255.0) as u8;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn corner_impulse_two_to_four() {
        let out = upsample_bilinear(&[1.0f64, 0.0, 0.0, 0.0], 2, 2, 4).unwrap();
        let axis = [1.0, 0.75, 0.25, 0.0];
        for y in 0..4 {
            for x in 0..4 {
                assert!((out[y * 4 + x] - axis[y] * axis[x]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn same_size_is_identity() {
        let src: Vec<f64> = (0..9).map(|v| v as f64 * 0.1).collect();
        assert_eq!(upsample_bilinear(&src, 3, 3, 3).unwrap(), src);
    }

    #[test]
    fn single_cell_is_constant() {
        let out = upsample_bilinear(&[0.37f32], 1, 1, 8).unwrap();
        assert!(out.iter().all(|&v| v == f64::from(0.37f32)));
    }

    #[test]
    fn smaller_target_rejected() {
        assert!(upsample_bilinear(&[0.0f64; 16], 4, 4, 2).is_err());
    }

    #[test]
    fn non_square_resize() {
        let out = resize_bilinear(&[0.0f64, 1.0], 1, 2, 3, 4);
        assert_eq!(out.len(), 12);
        assert_eq!(&out[..4], &[0.0, 0.25, 0.75, 1.0]);
        assert_eq!(&out[4..8], &out[..4]);
    }

    #[test]
    fn u8_resize_keeps_flat_color() {
        let px = [10u8, 20, 30].repeat(6);
        let out = resize_u8(&px, 2, 3, 3, 5, 4);
        assert!(out.chunks(3).all(|c| c == [10, 20, 30]));
    }

    proptest! {
        #[test]
        fn linearity(
            p in proptest::collection::vec(0.0f64..1.0, 9),
            q in proptest::collection::vec(0.0f64..1.0, 9),
            a in -2.0f64..2.0,
            b in -2.0f64..2.0,
            target in 3usize..9,
        ) {
            let mix: Vec<f64> = p.iter().zip(&q).map(|(x, y)| a * x + b * y).collect();
            let lhs = upsample_bilinear(&mix, 3, 3, target).unwrap();
            let up = upsample_bilinear(&p, 3, 3, target).unwrap();
            let uq = upsample_bilinear(&q, 3, 3, target).unwrap();
            for k in 0..lhs.len() {
                prop_assert!((lhs[k] - (a * up[k] + b * uq[k])).abs() < 1e-6);
            }
        }
    }
}
