//! Separable bilinear and bicubic resampling.
//!
//! Both use the half-pixel convention: output index `d` samples source
//! coordinate `(d + 0.5) * in / out - 0.5`, with out-of-range taps clamped to
//! the border.

use crate::autodiff::{Backward, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Cubic convolution coefficient of the Catmull-Rom kernel.
pub const CATMULL_ROM_A: f64 = -0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interpolation {
    Bilinear,
    Bicubic,
}

/// Source coordinate sampled by output index `dst`.
pub fn source_coord(dst: usize, in_len: usize, out_len: usize) -> f64 {
    (dst as f64 + 0.5) * (in_len as f64 / out_len as f64) - 0.5
}

pub fn cubic_weight(x: f64) -> f64 {
    let a = CATMULL_ROM_A;
    let x = x.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

/// Per-output-index taps `(source index, weight)` of a 1-d resampler.
#[derive(Debug, Clone)]
struct Taps {
    in_len: usize,
    taps: Vec<Vec<(usize, f64)>>,
}

impl Taps {
    fn new(kind: Interpolation, in_len: usize, out_len: usize) -> Self {
        if in_len == out_len {
            return Taps {
                in_len,
                taps: (0..out_len).map(|i| vec![(i, 1.0)]).collect(),
            };
        }
        let last = in_len as isize - 1;
        let clamp = |i: isize| i.clamp(0, last) as usize;
        let taps = (0..out_len)
            .map(|d| {
                let s = source_coord(d, in_len, out_len);
                match kind {
                    Interpolation::Bilinear => {
                        let s = s.clamp(0.0, last as f64);
                        let i0 = s.floor() as isize;
                        let t = s - i0 as f64;
                        let mut v = vec![(clamp(i0), 1.0 - t)];
                        if t > 0.0 {
                            v.push((clamp(i0 + 1), t));
                        }
                        v
                    }
                    Interpolation::Bicubic => {
                        let i0 = s.floor() as isize;
                        let t = s - i0 as f64;
                        vec![
                            (clamp(i0 - 1), cubic_weight(t + 1.0)),
                            (clamp(i0), cubic_weight(t)),
                            (clamp(i0 + 1), cubic_weight(1.0 - t)),
                            (clamp(i0 + 2), cubic_weight(2.0 - t)),
                        ]
                    }
                }
            })
            .collect();
        Taps { in_len, taps }
    }

    fn out_len(&self) -> usize {
        self.taps.len()
    }
}

/// Applies row taps then column taps to every N×C plane.
fn resample(input: &[f64], planes: usize, rows: &Taps, cols: &Taps) -> Vec<f64> {
    let (ih, iw) = (rows.in_len, cols.in_len);
    let (oh, ow) = (rows.out_len(), cols.out_len());
    let mut out = vec![0.0; planes * oh * ow];
    let mut tmp = vec![0.0; ih * ow];
    for p in 0..planes {
        let src = &input[p * ih * iw..][..ih * iw];
        for y in 0..ih {
            let srow = &src[y * iw..][..iw];
            for (x, taps) in cols.taps.iter().enumerate() {
                tmp[y * ow + x] = taps.iter().fold(0.0, |acc, &(i, w)| acc + w * srow[i]);
            }
        }
        let dst = &mut out[p * oh * ow..][..oh * ow];
        for (y, taps) in rows.taps.iter().enumerate() {
            let drow = &mut dst[y * ow..][..ow];
            for &(i, w) in taps {
                let trow = &tmp[i * ow..][..ow];
                for (d, t) in drow.iter_mut().zip(trow) {
                    *d += w * t;
                }
            }
        }
    }
    out
}

/// Adjoint of [`resample`].
fn resample_transpose(grad: &[f64], planes: usize, rows: &Taps, cols: &Taps) -> Vec<f64> {
    let (ih, iw) = (rows.in_len, cols.in_len);
    let (oh, ow) = (rows.out_len(), cols.out_len());
    let mut out = vec![0.0; planes * ih * iw];
    let mut tmp = vec![0.0; ih * ow];
    for p in 0..planes {
        tmp.fill(0.0);
        let g = &grad[p * oh * ow..][..oh * ow];
        for (y, taps) in rows.taps.iter().enumerate() {
            let grow = &g[y * ow..][..ow];
            for &(i, w) in taps {
                let trow = &mut tmp[i * ow..][..ow];
                for (t, gv) in trow.iter_mut().zip(grow) {
                    *t += w * gv;
                }
            }
        }
        let dst = &mut out[p * ih * iw..][..ih * iw];
        for y in 0..ih {
            let drow = &mut dst[y * iw..][..iw];
            for (x, taps) in cols.taps.iter().enumerate() {
                let t = tmp[y * ow + x];
                for &(i, w) in taps {
                    drow[i] += w * t;
                }
            }
        }
    }
    out
}

fn check(input: &[usize], kind: Interpolation, out_h: usize, out_w: usize) -> Result<[usize; 4]> {
    let &[n, c, h, w] = input else {
        return Err(Error::shape(format!("resize input must be N×C×H×W, got {input:?}")));
    };
    if out_h == 0 || out_w == 0 {
        return Err(Error::shape(format!("resize target {out_h}×{out_w} must be ≥ 1")));
    }
    if kind == Interpolation::Bicubic && (h < 2 || w < 2) {
        return Err(Error::shape(format!(
            "bicubic resize needs at least 2×2 input, got {h}×{w}"
        )));
    }
    Ok([n, c, h, w])
}

pub fn resize(input: &Tensor, kind: Interpolation, out_h: usize, out_w: usize) -> Result<Tensor> {
    let [n, c, h, w] = check(input.shape(), kind, out_h, out_w)?;
    if (h, w) == (out_h, out_w) {
        return Ok(input.clone());
    }
    let rows = Taps::new(kind, h, out_h);
    let cols = Taps::new(kind, w, out_w);
    Ok(Tensor::from_parts(
        vec![n, c, out_h, out_w],
        resample(input.data(), n * c, &rows, &cols),
    ))
}

pub fn bilinear_resize(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    resize(input, Interpolation::Bilinear, out_h, out_w)
}

pub fn bicubic_resize(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    resize(input, Interpolation::Bicubic, out_h, out_w)
}

struct ResizeBackward {
    rows: Taps,
    cols: Taps,
    planes: usize,
}

impl Backward for ResizeBackward {
    fn name(&self) -> &'static str {
        "resize"
    }

    fn backward(&self, _: &Tensor, grad: &Tensor, parents: &[Var]) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(Tensor::from_parts(
            parents[0].shape().to_vec(),
            resample_transpose(grad.data(), self.planes, &self.rows, &self.cols),
        ))])
    }
}

impl Var {
    pub fn resize(&self, kind: Interpolation, out_h: usize, out_w: usize) -> Result<Var> {
        let [n, c, h, w] = check(self.shape(), kind, out_h, out_w)?;
        let rows = Taps::new(kind, h, out_h);
        let cols = Taps::new(kind, w, out_w);
        let value = resize(self.value(), kind, out_h, out_w)?;
        Ok(Var::from_op(
            value,
            vec![self.clone()],
            ResizeBackward {
                rows,
                cols,
                planes: n * c,
            },
        ))
    }

    pub fn bilinear_resize(&self, out_h: usize, out_w: usize) -> Result<Var> {
        self.resize(Interpolation::Bilinear, out_h, out_w)
    }

    pub fn bicubic_resize(&self, out_h: usize, out_w: usize) -> Result<Var> {
        self.resize(Interpolation::Bicubic, out_h, out_w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constants_are_preserved() {
        let x = Tensor::full(&[1, 2, 3, 5], 0.75);
        for kind in [Interpolation::Bilinear, Interpolation::Bicubic] {
            for (oh, ow) in [(7, 4), (2, 2), (12, 20), (1, 9)] {
                if kind == Interpolation::Bicubic && oh < 1 {
                    continue;
                }
                let y = resize(&x, kind, oh, ow).unwrap();
                assert!(y.data().iter().all(|&v| (v - 0.75).abs() < 1e-15), "{kind:?}");
            }
        }
    }

    #[test]
    fn identity_size_is_exact() {
        let x = Tensor::from_fn(&[1, 1, 4, 3], |i| (i as f64).cos());
        assert_eq!(bilinear_resize(&x, 4, 3).unwrap(), x);
        assert_eq!(bicubic_resize(&x, 4, 3).unwrap(), x);
    }

    #[test]
    fn catmull_rom_kernel_partition_of_unity() {
        for k in 0..50 {
            let t = k as f64 / 50.0;
            let s = cubic_weight(t + 1.0) + cubic_weight(t) + cubic_weight(1.0 - t) + cubic_weight(2.0 - t);
            assert!((s - 1.0).abs() < 1e-15);
        }
        assert_eq!(cubic_weight(0.0), 1.0);
        assert_eq!(cubic_weight(1.0), 0.0);
        assert_eq!(cubic_weight(2.0), 0.0);
    }

    #[test]
    fn bicubic_rejects_single_pixel() {
        let x = Tensor::zeros(&[1, 1, 1, 4]);
        assert!(bicubic_resize(&x, 2, 2).is_err());
        assert!(bilinear_resize(&x, 2, 2).is_ok());
        assert!(bilinear_resize(&x, 0, 2).is_err());
    }
}
