use crate::autodiff::{Backward, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn check(shape: &[usize], k: usize) -> Result<[usize; 4]> {
    let &[n, c, h, w] = shape else {
        return Err(Error::shape(format!("avg_pool2d input must be N×C×H×W, got {shape:?}")));
    };
    if k == 0 || h % k != 0 || w % k != 0 {
        return Err(Error::shape(format!(
            "avg_pool2d kernel {k} must divide spatial size {h}×{w} exactly"
        )));
    }
    Ok([n, c, h, w])
}

/// Mean over non-overlapping k×k blocks of each plane.
pub fn avg_pool2d(input: &Tensor, k: usize) -> Result<Tensor> {
    let [n, c, h, w] = check(input.shape(), k)?;
    let (oh, ow) = (h / k, w / k);
    let area = (k * k) as f64;
    let x = input.data();
    let mut out = vec![0.0; n * c * oh * ow];
    for p in 0..n * c {
        let src = &x[p * h * w..][..h * w];
        let dst = &mut out[p * oh * ow..][..oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for dy in 0..k {
                    let row = &src[(oy * k + dy) * w + ox * k..][..k];
                    for v in row {
                        acc += v;
                    }
                }
                dst[oy * ow + ox] = acc / area;
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c, oh, ow], out))
}

struct AvgPoolBackward {
    k: usize,
}

impl Backward for AvgPoolBackward {
    fn name(&self) -> &'static str {
        "avg_pool2d"
    }

    fn backward(&self, _: &Tensor, grad: &Tensor, parents: &[Var]) -> Result<Vec<Option<Tensor>>> {
        let [n, c, h, w] = check(parents[0].shape(), self.k)?;
        let k = self.k;
        let (oh, ow) = (h / k, w / k);
        let area = (k * k) as f64;
        let g = grad.data();
        let mut out = vec![0.0; n * c * h * w];
        for p in 0..n * c {
            let gp = &g[p * oh * ow..][..oh * ow];
            let dst = &mut out[p * h * w..][..h * w];
            for y in 0..h {
                for x in 0..w {
                    dst[y * w + x] = gp[(y / k) * ow + x / k] / area;
                }
            }
        }
        Ok(vec![Some(Tensor::from_parts(vec![n, c, h, w], out))])
    }
}

impl Var {
    pub fn avg_pool2d(&self, k: usize) -> Result<Var> {
        let value = avg_pool2d(self.value(), k)?;
        Ok(Var::from_op(value, vec![self.clone()], AvgPoolBackward { k }))
    }
}
