//! Forward and backward kernels for the layer graph.
//!
//! Feature maps are `(h, w, c)` with contiguous channels; convolution
//! weights are laid out `(kh, kw, c_in, c_out)` with `c_out` contiguous so
//! the innermost loops stream over memory.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::tensor::Tensor3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Linear,
    Relu,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kh: usize,
    pub kw: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub activation: Activation,
}

impl ConvSpec {
    pub fn out_hw(&self, in_h: usize, in_w: usize) -> (usize, usize) {
        let oh = (in_h + 2 * self.pad_h - self.kh) / self.stride_h + 1;
        let ow = (in_w + 2 * self.pad_w - self.kw) / self.stride_w + 1;
        (oh, ow)
    }

    pub fn weight_len(&self) -> usize {
        self.kh * self.kw * self.in_ch * self.out_ch
    }
}

#[inline]
fn apply_activation<T: Scalar>(act: Activation, data: &mut [T]) {
    match act {
        Activation::Linear => {}
        Activation::Relu => {
            for v in data {
                if *v < T::zero() {
                    *v = T::zero();
                }
            }
        }
        Activation::Sigmoid => {
            for v in data {
                *v = T::one() / (T::one() + (-*v).exp());
            }
        }
    }
}

/// d(activation)/d(pre-activation) expressed through the post-activation
/// output, applied in place onto the incoming gradient.
#[inline]
fn activation_grad<T: Scalar>(act: Activation, output: &[T], d_out: &mut [T]) {
    match act {
        Activation::Linear => {}
        Activation::Relu => {
            for (g, &y) in d_out.iter_mut().zip(output) {
                if y <= T::zero() {
                    *g = T::zero();
                }
            }
        }
        Activation::Sigmoid => {
            for (g, &y) in d_out.iter_mut().zip(output) {
                *g = *g * y * (T::one() - y);
            }
        }
    }
}

pub fn conv_forward<T: Scalar>(
    input: &Tensor3<T>,
    spec: &ConvSpec,
    weights: &[T],
    bias: &[T],
) -> Tensor3<T> {
    debug_assert_eq!(input.c, spec.in_ch);
    debug_assert_eq!(weights.len(), spec.weight_len());
    let (oh, ow) = spec.out_hw(input.h, input.w);
    let mut out = Tensor3::zeros(oh, ow, spec.out_ch);
    let co = spec.out_ch;
    // seed every output pixel with the bias
    for px in out.data.chunks_exact_mut(co) {
        px.copy_from_slice(bias);
    }
    for oy in 0..oh {
        for ox in 0..ow {
            let out_base = (oy * ow + ox) * co;
            for ky in 0..spec.kh {
                let iy = (oy * spec.stride_h + ky) as isize - spec.pad_h as isize;
                if iy < 0 || iy >= input.h as isize {
                    continue;
                }
                for kx in 0..spec.kw {
                    let ix = (ox * spec.stride_w + kx) as isize - spec.pad_w as isize;
                    if ix < 0 || ix >= input.w as isize {
                        continue;
                    }
                    let in_base = (iy as usize * input.w + ix as usize) * spec.in_ch;
                    let w_base = (ky * spec.kw + kx) * spec.in_ch * co;
                    for ci in 0..spec.in_ch {
                        let v = input.data[in_base + ci];
                        if v == T::zero() {
                            continue;
                        }
                        let w_row = &weights[w_base + ci * co..w_base + (ci + 1) * co];
                        let out_row = &mut out.data[out_base..out_base + co];
                        for (o, &w) in out_row.iter_mut().zip(w_row) {
                            *o += v * w;
                        }
                    }
                }
            }
        }
    }
    apply_activation(spec.activation, &mut out.data);
    out
}

pub struct ConvGrads<T> {
    pub d_weights: Vec<T>,
    pub d_bias: Vec<T>,
    pub d_input: Option<Tensor3<T>>,
}

pub fn conv_backward<T: Scalar>(
    input: &Tensor3<T>,
    output: &Tensor3<T>,
    spec: &ConvSpec,
    weights: &[T],
    d_output: &Tensor3<T>,
    want_d_input: bool,
) -> ConvGrads<T> {
    let mut d_pre = d_output.data.clone();
    activation_grad(spec.activation, &output.data, &mut d_pre);

    let co = spec.out_ch;
    let (oh, ow) = (output.h, output.w);
    let mut d_weights = vec![T::zero(); weights.len()];
    let mut d_bias = vec![T::zero(); co];
    let mut d_input = if want_d_input {
        Some(Tensor3::zeros(input.h, input.w, input.c))
    } else {
        None
    };

    for px in d_pre.chunks_exact(co) {
        for (b, &g) in d_bias.iter_mut().zip(px) {
            *b += g;
        }
    }

    for oy in 0..oh {
        for ox in 0..ow {
            let out_base = (oy * ow + ox) * co;
            let g_row = &d_pre[out_base..out_base + co];
            for ky in 0..spec.kh {
                let iy = (oy * spec.stride_h + ky) as isize - spec.pad_h as isize;
                if iy < 0 || iy >= input.h as isize {
                    continue;
                }
                for kx in 0..spec.kw {
                    let ix = (ox * spec.stride_w + kx) as isize - spec.pad_w as isize;
                    if ix < 0 || ix >= input.w as isize {
                        continue;
                    }
                    let in_base = (iy as usize * input.w + ix as usize) * spec.in_ch;
                    let w_base = (ky * spec.kw + kx) * spec.in_ch * co;
                    for ci in 0..spec.in_ch {
                        let v = input.data[in_base + ci];
                        let w_row = &weights[w_base + ci * co..w_base + (ci + 1) * co];
                        let dw_row = &mut d_weights[w_base + ci * co..w_base + (ci + 1) * co];
                        let mut d_in_acc = T::zero();
                        for k in 0..co {
                            let g = g_row[k];
                            dw_row[k] += v * g;
                            d_in_acc += w_row[k] * g;
                        }
                        if let Some(d_in) = d_input.as_mut() {
                            d_in.data[in_base + ci] += d_in_acc;
                        }
                    }
                }
            }
        }
    }
    ConvGrads {
        d_weights,
        d_bias,
        d_input,
    }
}

pub fn maxpool_forward<T: Scalar>(
    input: &Tensor3<T>,
    size: usize,
    stride: usize,
) -> (Tensor3<T>, Vec<u32>) {
    let oh = (input.h - size) / stride + 1;
    let ow = (input.w - size) / stride + 1;
    let mut out = Tensor3::zeros(oh, ow, input.c);
    let mut argmax = vec![0u32; oh * ow * input.c];
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..input.c {
                let mut best = T::neg_infinity();
                let mut best_idx = 0u32;
                for ky in 0..size {
                    for kx in 0..size {
                        let idx = input.idx(oy * stride + ky, ox * stride + kx, ch);
                        let v = input.data[idx];
                        if v > best {
                            best = v;
                            best_idx = idx as u32;
                        }
                    }
                }
                let o = out.idx(oy, ox, ch);
                out.data[o] = best;
                argmax[o] = best_idx;
            }
        }
    }
    (out, argmax)
}

pub fn maxpool_backward<T: Scalar>(
    input_shape: (usize, usize, usize),
    argmax: &[u32],
    d_output: &Tensor3<T>,
) -> Tensor3<T> {
    let mut d_input = Tensor3::zeros(input_shape.0, input_shape.1, input_shape.2);
    for (&idx, &g) in argmax.iter().zip(&d_output.data) {
        d_input.data[idx as usize] += g;
    }
    d_input
}

/// Dense layer: `out[j] = b[j] + sum_i in[i] * w[i * out_dim + j]`.
pub fn dense_forward<T: Scalar>(input: &[T], weights: &[T], bias: &[T], out_dim: usize) -> Vec<T> {
    let mut out = bias.to_vec();
    for (i, &v) in input.iter().enumerate() {
        let row = &weights[i * out_dim..(i + 1) * out_dim];
        for (o, &w) in out.iter_mut().zip(row) {
            *o += v * w;
        }
    }
    out
}

pub fn dense_backward<T: Scalar>(
    input: &[T],
    weights: &[T],
    d_output: &[T],
    out_dim: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut d_weights = vec![T::zero(); weights.len()];
    let d_bias = d_output.to_vec();
    let mut d_input = vec![T::zero(); input.len()];
    for (i, &v) in input.iter().enumerate() {
        let w_row = &weights[i * out_dim..(i + 1) * out_dim];
        let dw_row = &mut d_weights[i * out_dim..(i + 1) * out_dim];
        let mut acc = T::zero();
        for j in 0..out_dim {
            dw_row[j] += v * d_output[j];
            acc += w_row[j] * d_output[j];
        }
        d_input[i] = acc;
    }
    (d_weights, d_bias, d_input)
}

pub fn concat_channels<T: Scalar>(a: &Tensor3<T>, b: &Tensor3<T>) -> Tensor3<T> {
    assert_eq!((a.h, a.w), (b.h, b.w), "concat spatial mismatch");
    let c = a.c + b.c;
    let mut out = Tensor3::zeros(a.h, a.w, c);
    for i in 0..a.h * a.w {
        out.data[i * c..i * c + a.c].copy_from_slice(&a.data[i * a.c..(i + 1) * a.c]);
        out.data[i * c + a.c..(i + 1) * c].copy_from_slice(&b.data[i * b.c..(i + 1) * b.c]);
    }
    out
}

pub fn concat_backward<T: Scalar>(
    d_out: &Tensor3<T>,
    c_a: usize,
    c_b: usize,
) -> (Tensor3<T>, Tensor3<T>) {
    let c = c_a + c_b;
    debug_assert_eq!(d_out.c, c);
    let mut d_a = Tensor3::zeros(d_out.h, d_out.w, c_a);
    let mut d_b = Tensor3::zeros(d_out.h, d_out.w, c_b);
    for i in 0..d_out.h * d_out.w {
        d_a.data[i * c_a..(i + 1) * c_a].copy_from_slice(&d_out.data[i * c..i * c + c_a]);
        d_b.data[i * c_b..(i + 1) * c_b].copy_from_slice(&d_out.data[i * c + c_a..(i + 1) * c]);
    }
    (d_a, d_b)
}

pub fn mul_forward<T: Scalar>(a: &Tensor3<T>, b: &Tensor3<T>) -> Tensor3<T> {
    assert_eq!(a.shape(), b.shape(), "elementwise mul shape mismatch");
    let mut out = a.clone();
    for (o, &v) in out.data.iter_mut().zip(&b.data) {
        *o = *o * v;
    }
    out
}

pub fn gap_backward<T: Scalar>(shape: (usize, usize, usize), d_z: &[T]) -> Tensor3<T> {
    let (h, w, c) = shape;
    let inv = T::one() / T::from_usize(h * w).unwrap();
    let mut d_in = Tensor3::zeros(h, w, c);
    for px in d_in.data.chunks_exact_mut(c) {
        for (o, &g) in px.iter_mut().zip(d_z) {
            *o = g * inv;
        }
    }
    d_in
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_identity_kernel() {
        // 1x1 conv with identity weights reproduces the input
        let input = Tensor3::from_vec(2, 2, 2, vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let spec = ConvSpec {
            kh: 1,
            kw: 1,
            stride_h: 1,
            stride_w: 1,
            pad_h: 0,
            pad_w: 0,
            in_ch: 2,
            out_ch: 2,
            activation: Activation::Linear,
        };
        let weights = vec![1.0, 0.0, 0.0, 1.0]; // (ci, co) identity
        let out = conv_forward(&input, &spec, &weights, &[0.0, 0.0]);
        assert_eq!(out.data, input.data);
    }

    #[test]
    fn conv_3x3_padded_hand_case() {
        // single channel 3x3 averaging-ish kernel on a 2x2 input, pad 1
        let input = Tensor3::from_vec(2, 2, 1, vec![1.0f64, 2.0, 3.0, 4.0]);
        let spec = ConvSpec {
            kh: 3,
            kw: 3,
            stride_h: 1,
            stride_w: 1,
            pad_h: 1,
            pad_w: 1,
            in_ch: 1,
            out_ch: 1,
            activation: Activation::Linear,
        };
        let weights = vec![1.0f64; 9];
        let out = conv_forward(&input, &spec, &weights, &[0.0]);
        // every output = sum of in-bounds neighbors = 10 (full coverage)
        assert_eq!(out.data, vec![10.0, 10.0, 10.0, 10.0]);
    }

    #[test]
    fn maxpool_and_backward_routing() {
        let input = Tensor3::from_vec(2, 2, 1, vec![1.0f64, 5.0, 2.0, 3.0]);
        let (out, argmax) = maxpool_forward(&input, 2, 2);
        assert_eq!(out.data, vec![5.0]);
        let d = maxpool_backward((2, 2, 1), &argmax, &Tensor3::from_vec(1, 1, 1, vec![7.0]));
        assert_eq!(d.data, vec![0.0, 7.0, 0.0, 0.0]);
    }

    #[test]
    fn dense_matches_hand_computation() {
        let out = dense_forward(&[1.0f64, 2.0], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[0.5, 0.5, 0.5], 3);
        assert_eq!(out, vec![1.0 * 1.0 + 2.0 * 4.0 + 0.5, 1.0 * 2.0 + 2.0 * 5.0 + 0.5, 1.0 * 3.0 + 2.0 * 6.0 + 0.5]);
    }

    #[test]
    fn concat_round_trip() {
        let a = Tensor3::from_vec(1, 2, 2, vec![1.0f64, 2.0, 3.0, 4.0]);
        let b = Tensor3::from_vec(1, 2, 1, vec![9.0, 8.0]);
        let cat = concat_channels(&a, &b);
        assert_eq!(cat.data, vec![1.0, 2.0, 9.0, 3.0, 4.0, 8.0]);
        let (da, db) = concat_backward(&cat, 2, 1);
        assert_eq!(da.data, a.data);
        assert_eq!(db.data, b.data);
    }

    #[test]
    fn gap_backward_spreads_uniformly() {
        let d = gap_backward((2, 2, 1), &[8.0f64]);
        assert_eq!(d.data, vec![2.0; 4]);
    }

    /// Finite-difference check of a single conv layer, all three activations.
    #[test]
    fn conv_backward_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for act in [Activation::Linear, Activation::Relu, Activation::Sigmoid] {
            let spec = ConvSpec {
                kh: 3,
                kw: 1,
                stride_h: 2,
                stride_w: 2,
                pad_h: 1,
                pad_w: 0,
                in_ch: 2,
                out_ch: 3,
                activation: act,
            };
            let input = Tensor3::from_vec(
                5,
                4,
                2,
                (0..40).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>(),
            );
            let weights: Vec<f64> = (0..spec.weight_len()).map(|_| rng.gen_range(-0.5..0.5)).collect();
            let bias: Vec<f64> = (0..3).map(|_| rng.gen_range(-0.1..0.1)).collect();
            let out = conv_forward(&input, &spec, &weights, &bias);
            // scalar objective: weighted sum of outputs
            let obj_w: Vec<f64> = (0..out.data.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let d_out = Tensor3::from_vec(out.h, out.w, out.c, obj_w.clone());
            let grads = conv_backward(&input, &out, &spec, &weights, &d_out, true);

            let objective = |ws: &[f64], inp: &Tensor3<f64>| -> f64 {
                let o = conv_forward(inp, &spec, ws, &bias);
                o.data.iter().zip(&obj_w).map(|(a, b)| a * b).sum()
            };
            let h = 1e-6;
            for i in (0..weights.len()).step_by(3) {
                let mut wp = weights.clone();
                wp[i] += h;
                let mut wm = weights.clone();
                wm[i] -= h;
                let fd = (objective(&wp, &input) - objective(&wm, &input)) / (2.0 * h);
                assert!(
                    (fd - grads.d_weights[i]).abs() < 1e-5 * (1.0 + fd.abs()),
                    "{act:?} dW[{i}]: fd {fd}, analytic {}",
                    grads.d_weights[i]
                );
            }
            let d_in = grads.d_input.unwrap();
            for i in (0..input.data.len()).step_by(7) {
                let mut ip = input.clone();
                ip.data[i] += h;
                let mut im = input.clone();
                im.data[i] -= h;
                let fd = (objective(&weights, &ip) - objective(&weights, &im)) / (2.0 * h);
                assert!(
                    (fd - d_in.data[i]).abs() < 1e-5 * (1.0 + fd.abs()),
                    "{act:?} dIn[{i}]: fd {fd}, analytic {}",
                    d_in.data[i]
                );
            }
        }
    }
}
