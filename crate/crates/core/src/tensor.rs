//! Minimal dense tensors for feature maps and parameters.
//!
//! Feature maps are stored `(h, w, c)` row-major with the channel axis
//! contiguous, which keeps the inner convolution loops cache-friendly.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

/// A dense `h × w × c` feature map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor3<T> {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor3<T> {
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Self {
            h,
            w,
            c,
            data: vec![T::zero(); h * w * c],
        }
    }

    pub fn from_vec(h: usize, w: usize, c: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), h * w * c, "tensor data length mismatch");
        Self { h, w, c, data }
    }

    #[inline(always)]
    pub fn idx(&self, y: usize, x: usize, ch: usize) -> usize {
        (y * self.w + x) * self.c + ch
    }

    #[inline(always)]
    pub fn get(&self, y: usize, x: usize, ch: usize) -> T {
        self.data[self.idx(y, x, ch)]
    }

    #[inline(always)]
    pub fn set(&mut self, y: usize, x: usize, ch: usize, v: T) {
        let i = self.idx(y, x, ch);
        self.data[i] = v;
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.c)
    }

    /// Per-channel spatial mean (the GAP primitive).
    pub fn channel_means(&self) -> Vec<T> {
        let n = T::from_usize(self.h * self.w).unwrap();
        let mut out = vec![T::zero(); self.c];
        for px in self.data.chunks_exact(self.c) {
            for (acc, &v) in out.iter_mut().zip(px) {
                *acc += v;
            }
        }
        for acc in &mut out {
            *acc = *acc / n;
        }
        out
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(T) -> U) -> Tensor3<U> {
        Tensor3 {
            h: self.h,
            w: self.w,
            c: self.c,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Bilinear resampling of a single-channel matrix stored as `Tensor3` with `c = 1`
/// (also used on raw `(rows, cols)` slices).
///
/// Uses the align-corners-free convention: output pixel centers are mapped
/// uniformly into the input pixel grid.
pub fn bilinear_resize<T: Scalar>(
    src: &[T],
    src_h: usize,
    src_w: usize,
    dst_h: usize,
    dst_w: usize,
) -> Vec<T> {
    assert_eq!(src.len(), src_h * src_w);
    assert!(src_h > 0 && src_w > 0 && dst_h > 0 && dst_w > 0);
    let mut out = Vec::with_capacity(dst_h * dst_w);
    let sy = src_h as f64 / dst_h as f64;
    let sx = src_w as f64 / dst_w as f64;
    for oy in 0..dst_h {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (src_h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(src_h - 1);
        let wy = T::from_f64_lossy(fy - y0 as f64);
        for ox in 0..dst_w {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (src_w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(src_w - 1);
            let wx = T::from_f64_lossy(fx - x0 as f64);
            let one = T::one();
            let v00 = src[y0 * src_w + x0];
            let v01 = src[y0 * src_w + x1];
            let v10 = src[y1 * src_w + x0];
            let v11 = src[y1 * src_w + x1];
            let top = v00 * (one - wx) + v01 * wx;
            let bot = v10 * (one - wx) + v11 * wx;
            out.push(top * (one - wy) + bot * wy);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn channel_means_are_spatial_means() {
        let mut t = Tensor3::<f64>::zeros(2, 2, 2);
        // channel 0 constant 3, channel 1 ramp 0..=3
        for (i, (y, x)) in [(0, 0), (0, 1), (1, 0), (1, 1)].iter().enumerate() {
            t.set(*y, *x, 0, 3.0);
            t.set(*y, *x, 1, i as f64);
        }
        assert_eq!(t.channel_means(), vec![3.0, 1.5]);
    }

    #[test]
    fn bilinear_identity() {
        let src = vec![1.0f64, 2.0, 3.0, 4.0];
        let out = bilinear_resize(&src, 2, 2, 2, 2);
        assert_eq!(out, src);
    }

    #[test]
    fn bilinear_constant_preserved() {
        let src = vec![0.25f32; 100 * 100];
        let out = bilinear_resize(&src, 100, 100, 248, 384);
        assert_eq!(out.len(), 248 * 384);
        for v in out {
            assert!((v - 0.25).abs() < 1e-6);
        }
    }
}
