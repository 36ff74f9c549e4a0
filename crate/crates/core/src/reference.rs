//! Brute-force reference implementations.
//!
//! Written for clarity, one output element at a time, sharing no code with
//! the optimized kernels in [`crate::ops`]. Used by the self-test suite and
//! the equivalence tests.

use crate::tensor::Tensor;

pub fn conv2d_naive(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Tensor {
    let (n, cin, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2], input.shape()[3]);
    let (cout, kh, kw) = (weight.shape()[0], weight.shape()[2], weight.shape()[3]);
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (w + 2 * padding - kw) / stride + 1;
    let mut out = Vec::with_capacity(n * cout * oh * ow);
    for b in 0..n {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.map_or(0.0, |b| b.data()[co]);
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let wv = weight.data()[((co * cin + ci) * kh + ky) * kw + kx];
                                acc += wv * input.at4(b, ci, iy as usize, ix as usize);
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    Tensor::from_parts(vec![n, cout, oh, ow], out)
}

fn src_coord(d: usize, in_len: usize, out_len: usize) -> f64 {
    (d as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5
}

/// Bilinear sample of one plane at continuous coordinates, border-clamped.
pub fn bilinear_sample(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let y = y.max(0.0).min((h - 1) as f64);
    let x = x.max(0.0).min((w - 1) as f64);
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = y - y0 as f64;
    let fx = x - x0 as f64;
    let at = |yy: usize, xx: usize| plane[yy * w + xx];
    (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1))
        + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1))
}

pub fn bilinear_resize_naive(input: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let (n, c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2], input.shape()[3]);
    let mut out = Vec::with_capacity(n * c * out_h * out_w);
    for p in 0..n * c {
        let plane = &input.data()[p * h * w..(p + 1) * h * w];
        for oy in 0..out_h {
            for ox in 0..out_w {
                out.push(bilinear_sample(
                    plane,
                    h,
                    w,
                    src_coord(oy, h, out_h),
                    src_coord(ox, w, out_w),
                ));
            }
        }
    }
    Tensor::from_parts(vec![n, c, out_h, out_w], out)
}

fn keys_cubic(t: f64) -> f64 {
    // Keys cubic convolution with a = -0.5 written out term by term.
    let t = t.abs();
    if t < 1.0 {
        1.5 * t * t * t - 2.5 * t * t + 1.0
    } else if t < 2.0 {
        -0.5 * t * t * t + 2.5 * t * t - 4.0 * t + 2.0
    } else {
        0.0
    }
}

pub fn bicubic_resize_naive(input: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let (n, c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2], input.shape()[3]);
    let mut out = Vec::with_capacity(n * c * out_h * out_w);
    for p in 0..n * c {
        let plane = &input.data()[p * h * w..(p + 1) * h * w];
        for oy in 0..out_h {
            for ox in 0..out_w {
                let sy = src_coord(oy, h, out_h);
                let sx = src_coord(ox, w, out_w);
                let (fy, fx) = (sy.floor(), sx.floor());
                let mut acc = 0.0;
                for ty in -1..=2_i64 {
                    for tx in -1..=2_i64 {
                        let yy = fy as i64 + ty;
                        let xx = fx as i64 + tx;
                        let wy = keys_cubic(sy - yy as f64);
                        let wx = keys_cubic(sx - xx as f64);
                        let yc = yy.clamp(0, h as i64 - 1) as usize;
                        let xc = xx.clamp(0, w as i64 - 1) as usize;
                        acc += wy * wx * plane[yc * w + xc];
                    }
                }
                out.push(acc);
            }
        }
    }
    Tensor::from_parts(vec![n, c, out_h, out_w], out)
}

pub fn avg_pool2d_naive(input: &Tensor, k: usize) -> Tensor {
    let (n, c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2], input.shape()[3]);
    let (oh, ow) = (h / k, w / k);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for b in 0..n {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for y in oy * k..(oy + 1) * k {
                        for x in ox * k..(ox + 1) * k {
                            acc += input.at4(b, ch, y, x);
                        }
                    }
                    out.push(acc / (k * k) as f64);
                }
            }
        }
    }
    Tensor::from_parts(vec![n, c, oh, ow], out)
}

pub fn softmax_naive(x: &[f64]) -> Vec<f64> {
    let exps: Vec<f64> = x.iter().map(|v| v.exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| e / total).collect()
}
