//! Direct 2-d cross-correlation.
//!
//! Each output element accumulates bias first, then input channels, kernel
//! rows and kernel columns in that order. The order is the same on every run
//! and for every thread count.

use rayon::prelude::*;

use crate::autodiff::{Backward, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kh: usize,
    pub kw: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(
        input: &[usize],
        weight: &[usize],
        bias: Option<&[usize]>,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let &[n, cin, h, w] = input else {
            return Err(Error::shape(format!(
                "conv2d input must be N×C×H×W, got {input:?}"
            )));
        };
        let &[cout, wcin, kh, kw] = weight else {
            return Err(Error::shape(format!(
                "conv2d weight must be Cout×Cin×kh×kw, got {weight:?}"
            )));
        };
        if wcin != cin {
            return Err(Error::shape(format!(
                "conv2d input channels: input has {cin}, weight expects {wcin}"
            )));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::shape(format!(
                "conv2d kernel must have odd extents, got {kh}×{kw}"
            )));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d stride must be ≥ 1"));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::shape(format!(
                "conv2d kernel height/width {kh}×{kw} exceeds padded input {}×{}",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        if let Some(b) = bias {
            if b != [cout] {
                return Err(Error::shape(format!(
                    "conv2d bias must have shape [{cout}] (output channels), got {b:?}"
                )));
            }
        }
        Ok(ConvGeometry {
            batch: n,
            in_channels: cin,
            out_channels: cout,
            in_h: h,
            in_w: w,
            kh,
            kw,
            out_h: (h + 2 * padding - kh) / stride + 1,
            out_w: (w + 2 * padding - kw) / stride + 1,
            stride,
            padding,
        })
    }

    /// Multiply-accumulate count of one forward pass.
    pub fn macs(&self) -> u64 {
        (self.batch * self.out_channels * self.out_h * self.out_w) as u64
            * (self.in_channels * self.kh * self.kw) as u64
    }

    /// Output columns `ox` for which `ox*stride + k - padding` lands inside
    /// `[0, len)`, as a half-open range.
    fn valid_range(&self, k: usize, len: usize, out_len: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = k as isize - self.padding as isize;
        // smallest o with o*s + off >= 0
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        // largest o with o*s + off <= len-1
        let hi_num = len as isize - 1 - off;
        let hi = if hi_num < 0 { -1 } else { hi_num / s };
        let hi = hi.min(out_len as isize - 1);
        if hi < lo {
            (0, 0)
        } else {
            (lo as usize, hi as usize + 1)
        }
    }
}

/// Cross-correlation of `input` (N×Cin×H×W) with `weight` (Cout×Cin×kh×kw).
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let g = ConvGeometry::new(
        input.shape(),
        weight.shape(),
        bias.map(|b| b.shape()),
        stride,
        padding,
    )?;
    let plane_out = g.out_h * g.out_w;
    let plane_in = g.in_h * g.in_w;
    let x = input.data();
    let wt = weight.data();
    let mut out = vec![0.0; g.batch * g.out_channels * plane_out];
    out.par_chunks_mut(plane_out)
        .enumerate()
        .for_each(|(plane_idx, dst)| {
            let n = plane_idx / g.out_channels;
            let co = plane_idx % g.out_channels;
            if let Some(b) = bias {
                dst.fill(b.data()[co]);
            }
            for ci in 0..g.in_channels {
                let src = &x[(n * g.in_channels + ci) * plane_in..][..plane_in];
                for ky in 0..g.kh {
                    let (oy0, oy1) = g.valid_range(ky, g.in_h, g.out_h);
                    for kx in 0..g.kw {
                        let wv = wt[((co * g.in_channels + ci) * g.kh + ky) * g.kw + kx];
                        let (ox0, ox1) = g.valid_range(kx, g.in_w, g.out_w);
                        if ox0 >= ox1 {
                            continue;
                        }
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride + ky - g.padding;
                            let row = &src[iy * g.in_w..][..g.in_w];
                            let drow = &mut dst[oy * g.out_w..][..g.out_w];
                            if g.stride == 1 {
                                let ix0 = ox0 + kx - g.padding;
                                let srow = &row[ix0..ix0 + (ox1 - ox0)];
                                for (d, s) in drow[ox0..ox1].iter_mut().zip(srow) {
                                    *d += wv * s;
                                }
                            } else {
                                for ox in ox0..ox1 {
                                    drow[ox] += wv * row[ox * g.stride + kx - g.padding];
                                }
                            }
                        }
                    }
                }
            }
        });
    Ok(Tensor::from_parts(
        vec![g.batch, g.out_channels, g.out_h, g.out_w],
        out,
    ))
}

fn conv2d_grad_input(g: &ConvGeometry, weight: &[f64], grad: &[f64]) -> Vec<f64> {
    let plane_out = g.out_h * g.out_w;
    let plane_in = g.in_h * g.in_w;
    let mut gin = vec![0.0; g.batch * g.in_channels * plane_in];
    gin.par_chunks_mut(plane_in)
        .enumerate()
        .for_each(|(plane_idx, dst)| {
            let n = plane_idx / g.in_channels;
            let ci = plane_idx % g.in_channels;
            for co in 0..g.out_channels {
                let gout = &grad[(n * g.out_channels + co) * plane_out..][..plane_out];
                for ky in 0..g.kh {
                    let (oy0, oy1) = g.valid_range(ky, g.in_h, g.out_h);
                    for kx in 0..g.kw {
                        let wv = weight[((co * g.in_channels + ci) * g.kh + ky) * g.kw + kx];
                        let (ox0, ox1) = g.valid_range(kx, g.in_w, g.out_w);
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride + ky - g.padding;
                            let grow = &gout[oy * g.out_w..][..g.out_w];
                            let drow = &mut dst[iy * g.in_w..][..g.in_w];
                            for ox in ox0..ox1 {
                                drow[ox * g.stride + kx - g.padding] += wv * grow[ox];
                            }
                        }
                    }
                }
            }
        });
    gin
}

fn conv2d_grad_weight(g: &ConvGeometry, input: &[f64], grad: &[f64]) -> Vec<f64> {
    let plane_out = g.out_h * g.out_w;
    let plane_in = g.in_h * g.in_w;
    let per_out = g.in_channels * g.kh * g.kw;
    let mut gw = vec![0.0; g.out_channels * per_out];
    gw.par_chunks_mut(per_out).enumerate().for_each(|(co, dst)| {
        for ci in 0..g.in_channels {
            for ky in 0..g.kh {
                let (oy0, oy1) = g.valid_range(ky, g.in_h, g.out_h);
                for kx in 0..g.kw {
                    let (ox0, ox1) = g.valid_range(kx, g.in_w, g.out_w);
                    let mut acc = 0.0;
                    for n in 0..g.batch {
                        let src = &input[(n * g.in_channels + ci) * plane_in..][..plane_in];
                        let gout = &grad[(n * g.out_channels + co) * plane_out..][..plane_out];
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride + ky - g.padding;
                            let grow = &gout[oy * g.out_w..][..g.out_w];
                            let srow = &src[iy * g.in_w..][..g.in_w];
                            for ox in ox0..ox1 {
                                acc += grow[ox] * srow[ox * g.stride + kx - g.padding];
                            }
                        }
                    }
                    dst[(ci * g.kh + ky) * g.kw + kx] = acc;
                }
            }
        }
    });
    gw
}

fn conv2d_grad_bias(g: &ConvGeometry, grad: &[f64]) -> Vec<f64> {
    let plane_out = g.out_h * g.out_w;
    (0..g.out_channels)
        .map(|co| {
            (0..g.batch)
                .map(|n| {
                    grad[(n * g.out_channels + co) * plane_out..][..plane_out]
                        .iter()
                        .sum::<f64>()
                })
                .sum()
        })
        .collect()
}

struct Conv2dBackward {
    geom: ConvGeometry,
    has_bias: bool,
}

impl Backward for Conv2dBackward {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(&self, _: &Tensor, grad: &Tensor, parents: &[Var]) -> Result<Vec<Option<Tensor>>> {
        let g = &self.geom;
        let (x, w) = (&parents[0], &parents[1]);
        let gx = x.requires_grad().then(|| {
            Tensor::from_parts(
                x.shape().to_vec(),
                conv2d_grad_input(g, w.value().data(), grad.data()),
            )
        });
        let gw = w.requires_grad().then(|| {
            Tensor::from_parts(
                w.shape().to_vec(),
                conv2d_grad_weight(g, x.value().data(), grad.data()),
            )
        });
        let mut out = vec![gx, gw];
        if self.has_bias {
            out.push(
                parents[2]
                    .requires_grad()
                    .then(|| Tensor::from_parts(vec![g.out_channels], conv2d_grad_bias(g, grad.data()))),
            );
        }
        Ok(out)
    }
}

impl Var {
    /// Differentiable [`conv2d`].
    pub fn conv2d(
        &self,
        weight: &Var,
        bias: Option<&Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let geom = ConvGeometry::new(
            self.shape(),
            weight.shape(),
            bias.map(|b| b.shape()),
            stride,
            padding,
        )?;
        let value = conv2d(
            self.value(),
            weight.value(),
            bias.map(|b| b.value()),
            stride,
            padding,
        )?;
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        Ok(Var::from_op(
            value,
            parents,
            Conv2dBackward {
                geom,
                has_bias: bias.is_some(),
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_input_gives_zero_output() {
        let x = Tensor::zeros(&[1, 1, 3, 3]);
        let w = Tensor::from_fn(&[2, 1, 3, 3], |i| i as f64 - 4.0);
        let b = Tensor::zeros(&[2]);
        let y = conv2d(&x, &w, Some(&b), 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 2, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let x = Tensor::from_fn(&[1, 1, 3, 3], |i| i as f64 * 1.5 - 2.0);
        let w = Tensor::full(&[1, 1, 1, 1], 1.0);
        let y = conv2d(&x, &w, None, 1, 0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn output_size_formula() {
        let x = Tensor::zeros(&[1, 2, 7, 6]);
        let w = Tensor::zeros(&[3, 2, 3, 3]);
        let y = conv2d(&x, &w, None, 2, 1).unwrap();
        assert_eq!(y.shape(), &[1, 3, 4, 3]);
        let y = conv2d(&x, &w, None, 3, 0).unwrap();
        assert_eq!(y.shape(), &[1, 3, 2, 2]);
    }

    #[test]
    fn shape_errors_name_the_dimension() {
        let x = Tensor::zeros(&[1, 2, 5, 5]);
        let w = Tensor::zeros(&[3, 4, 3, 3]);
        let err = conv2d(&x, &w, None, 1, 1).unwrap_err().to_string();
        assert!(err.contains("input channels"), "{err}");
        let w = Tensor::zeros(&[3, 2, 2, 2]);
        let err = conv2d(&x, &w, None, 1, 1).unwrap_err().to_string();
        assert!(err.contains("odd"), "{err}");
        let w = Tensor::zeros(&[3, 2, 3, 3]);
        let err = conv2d(&x, &w, Some(&Tensor::zeros(&[2])), 1, 1)
            .unwrap_err()
            .to_string();
        assert!(err.contains("bias"), "{err}");
        let x = Tensor::zeros(&[1, 2, 2, 2]);
        let w = Tensor::zeros(&[1, 2, 5, 5]);
        let err = conv2d(&x, &w, None, 1, 1).unwrap_err().to_string();
        assert!(err.contains("kernel height"), "{err}");
    }

    #[test]
    fn valid_range_matches_brute_force() {
        for stride in 1..4 {
            for padding in 0..3 {
                for len in 3..9 {
                    let g = ConvGeometry::new(&[1, 1, len, len], &[1, 1, 3, 3], None, stride, padding)
                        .unwrap();
                    for k in 0..3 {
                        let expect: Vec<usize> = (0..g.out_w)
                            .filter(|&o| {
                                let i = (o * stride + k) as isize - padding as isize;
                                i >= 0 && (i as usize) < len
                            })
                            .collect();
                        let (lo, hi) = g.valid_range(k, len, g.out_w);
                        assert_eq!((lo..hi).collect::<Vec<_>>(), expect);
                    }
                }
            }
        }
    }
}
