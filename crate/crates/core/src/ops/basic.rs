//! Elementwise arithmetic, activations, reductions, softmax and concatenation.

use crate::autodiff::{Backward, Var};
use crate::error::{Error, Result};
use crate::tensor::{same_shape, Tensor};

/// Joins two N×C×H×W tensors along the channel axis, `a` first.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [n, ca, h, w] = a.dims4()?;
    let [nb, cb, hb, wb] = b.dims4()?;
    if (n, h, w) != (nb, hb, wb) {
        return Err(Error::shape(format!(
            "concat_channels: N×H×W mismatch ({n}×{h}×{w} vs {nb}×{hb}×{wb})"
        )));
    }
    let plane = h * w;
    let mut data = Vec::with_capacity(n * (ca + cb) * plane);
    for i in 0..n {
        data.extend_from_slice(&a.data()[i * ca * plane..][..ca * plane]);
        data.extend_from_slice(&b.data()[i * cb * plane..][..cb * plane]);
    }
    Ok(Tensor::from_parts(vec![n, ca + cb, h, w], data))
}

fn axis_layout(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::shape(format!(
            "softmax axis {axis} out of range for shape {shape:?}"
        )));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Max-subtracted softmax along `axis`.
pub fn softmax(input: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, len, inner) = axis_layout(input.shape(), axis)?;
    let x = input.data();
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            let m = (0..len).map(|k| x[at(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for k in 0..len {
                let e = (x[at(k)] - m).exp();
                out[at(k)] = e;
                total += e;
            }
            for k in 0..len {
                out[at(k)] /= total;
            }
        }
    }
    Ok(Tensor::from_parts(input.shape().to_vec(), out))
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b, "mse_loss")?;
    let total: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(total / a.numel() as f64)
}

// Backward rules --------------------------------------------------------

struct AddBackward;
impl Backward for AddBackward {
    fn name(&self) -> &'static str {
        "add"
    }
    fn backward(&self, _: &Tensor, g: &Tensor, _: &[Var]) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(g.clone()), Some(g.clone())])
    }
}

struct SubBackward;
impl Backward for SubBackward {
    fn name(&self) -> &'static str {
        "sub"
    }
    fn backward(&self, _: &Tensor, g: &Tensor, _: &[Var]) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(g.clone()), Some(g.map(|v| -v))])
    }
}

struct MulBackward;
impl Backward for MulBackward {
    fn name(&self) -> &'static str {
        "mul"
    }
    fn backward(&self, _: &Tensor, g: &Tensor, p: &[Var]) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![
            Some(g.zip_map(p[1].value(), |g, b| g * b)?),
            Some(g.zip_map(p[0].value(), |g, a| g * a)?),
        ])
    }
}

struct ScaleBackward(f64);
impl Backward for ScaleBackward {
    fn name(&self) -> &'static str {
        "scale"
    }
    fn backward(&self, _: &Tensor, g: &Tensor, _: &[Var]) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(g.map(|v| v * self.0))])
    }
}

struct ReluBackward;
impl Backward for ReluBackward {
    fn name(&self) -> &'static str {
        "relu"
    }
    fn backward(&self, _: &Tensor, g: &Tensor, p: &[Var]) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(
            g.zip_map(p[0].value(), |g, x| if x > 0.0 { g } else { 0.0 })?,
        )])
    }
}

struct TanhBackward;
impl Backward for TanhBackward {
    fn name(&self) -> &'static str {
        "tanh"
    }
    fn backward(&self, out: &Tensor, g: &Tensor, _: &[Var]) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(g.zip_map(out, |g, y| g * (1.0 - y * y))?)])
    }
}

struct SumBackward;
impl Backward for SumBackward {
    fn name(&self) -> &'static str {
        "sum"
    }
    fn backward(&self, _: &Tensor, g: &Tensor, p: &[Var]) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(Tensor::full(p[0].shape(), g.data()[0]))])
    }
}

struct MseBackward;
impl Backward for MseBackward {
    fn name(&self) -> &'static str {
        "mse_loss"
    }
    fn backward(&self, _: &Tensor, g: &Tensor, p: &[Var]) -> Result<Vec<Option<Tensor>>> {
        let scale = 2.0 * g.data()[0] / p[0].value().numel() as f64;
        let diff = p[0].value().zip_map(p[1].value(), |a, b| (a - b) * scale)?;
        let neg = p[1].requires_grad().then(|| diff.map(|v| -v));
        Ok(vec![Some(diff), neg])
    }
}

struct SoftmaxBackward {
    axis: usize,
}
impl Backward for SoftmaxBackward {
    fn name(&self) -> &'static str {
        "softmax"
    }
    fn backward(&self, out: &Tensor, g: &Tensor, _: &[Var]) -> Result<Vec<Option<Tensor>>> {
        let (outer, len, inner) = axis_layout(out.shape(), self.axis)?;
        let (y, gd) = (out.data(), g.data());
        let mut gin = vec![0.0; y.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let dot: f64 = (0..len).map(|k| y[at(k)] * gd[at(k)]).sum();
                for k in 0..len {
                    gin[at(k)] = y[at(k)] * (gd[at(k)] - dot);
                }
            }
        }
        Ok(vec![Some(Tensor::from_parts(out.shape().to_vec(), gin))])
    }
}

struct ReshapeBackward;
impl Backward for ReshapeBackward {
    fn name(&self) -> &'static str {
        "reshape"
    }
    fn backward(&self, _: &Tensor, g: &Tensor, p: &[Var]) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(g.reshape(p[0].shape())?)])
    }
}

struct ConcatBackward {
    ca: usize,
}
impl Backward for ConcatBackward {
    fn name(&self) -> &'static str {
        "concat_channels"
    }
    fn backward(&self, _: &Tensor, g: &Tensor, _: &[Var]) -> Result<Vec<Option<Tensor>>> {
        let [_, c, _, _] = g.dims4()?;
        Ok(vec![
            Some(g.slice_channels(0, self.ca)?),
            Some(g.slice_channels(self.ca, c)?),
        ])
    }
}

impl Var {
    pub fn add(&self, other: &Var) -> Result<Var> {
        let v = self.value().zip_map(other.value(), |a, b| a + b)?;
        Ok(Var::from_op(v, vec![self.clone(), other.clone()], AddBackward))
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        let v = self.value().zip_map(other.value(), |a, b| a - b)?;
        Ok(Var::from_op(v, vec![self.clone(), other.clone()], SubBackward))
    }

    pub fn mul(&self, other: &Var) -> Result<Var> {
        let v = self.value().zip_map(other.value(), |a, b| a * b)?;
        Ok(Var::from_op(v, vec![self.clone(), other.clone()], MulBackward))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var> {
        let v = self.value().reshape(shape)?;
        Ok(Var::from_op(v, vec![self.clone()], ReshapeBackward))
    }

    /// Multiplies by a constant.
    pub fn scale(&self, s: f64) -> Var {
        Var::from_op(self.value().map(|v| v * s), vec![self.clone()], ScaleBackward(s))
    }

    pub fn relu(&self) -> Var {
        Var::from_op(self.value().map(|v| v.max(0.0)), vec![self.clone()], ReluBackward)
    }

    pub fn tanh(&self) -> Var {
        Var::from_op(self.value().map(f64::tanh), vec![self.clone()], TanhBackward)
    }

    pub fn sum(&self) -> Var {
        Var::from_op(Tensor::scalar(self.value().sum()), vec![self.clone()], SumBackward)
    }

    /// Mean squared difference, reduced to a scalar.
    pub fn mse_loss(&self, target: &Var) -> Result<Var> {
        let v = mse(self.value(), target.value())?;
        Ok(Var::from_op(
            Tensor::scalar(v),
            vec![self.clone(), target.clone()],
            MseBackward,
        ))
    }

    pub fn softmax(&self, axis: usize) -> Result<Var> {
        let v = softmax(self.value(), axis)?;
        Ok(Var::from_op(v, vec![self.clone()], SoftmaxBackward { axis }))
    }

    pub fn concat_channels(&self, other: &Var) -> Result<Var> {
        let v = concat_channels(self.value(), other.value())?;
        let [_, ca, _, _] = self.value().dims4()?;
        Ok(Var::from_op(
            v,
            vec![self.clone(), other.clone()],
            ConcatBackward { ca },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_uniform_and_analytic() {
        let x = Tensor::full(&[5], 2.5);
        let y = softmax(&x, 0).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
        let x = Tensor::new(&[2], vec![0.0, 3f64.ln()]).unwrap();
        let y = softmax(&x, 0).unwrap();
        assert!((y.data()[0] - 0.25).abs() < 1e-15);
        assert!((y.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_is_stable_for_large_inputs() {
        let x = Tensor::new(&[3], vec![1000.0, 1001.0, 999.0]).unwrap();
        let y = softmax(&x, 0).unwrap();
        assert!(y.is_finite());
        assert!((y.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_bad_axis() {
        assert!(softmax(&Tensor::zeros(&[2, 2]), 2).is_err());
    }

    #[test]
    fn concat_small_and_mismatch() {
        let a = Tensor::full(&[1, 1, 1, 1], 1.0);
        let b = Tensor::full(&[1, 1, 1, 1], 2.0);
        let c = concat_channels(&a, &b).unwrap();
        assert_eq!(c.shape(), &[1, 2, 1, 1]);
        assert_eq!(c.data(), &[1.0, 2.0]);
        assert!(concat_channels(&a, &Tensor::zeros(&[1, 1, 2, 1])).is_err());
    }

    #[test]
    fn concat_then_slice_round_trips() {
        let a = Tensor::from_fn(&[2, 3, 2, 2], |i| i as f64 * 0.3);
        let b = Tensor::from_fn(&[2, 1, 2, 2], |i| -(i as f64));
        let c = concat_channels(&a, &b).unwrap();
        assert_eq!(c.slice_channels(0, 3).unwrap(), a);
        assert_eq!(c.slice_channels(3, 4).unwrap(), b);
    }

    #[test]
    fn mse_of_known_values() {
        let a = Tensor::new(&[2], vec![1.0, 3.0]).unwrap();
        let b = Tensor::new(&[2], vec![0.0, 1.0]).unwrap();
        assert_eq!(mse(&a, &b).unwrap(), 2.5);
    }
}
