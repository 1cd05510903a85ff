//! Dense row-major `f32` arrays used throughout the crate.
//!
//! Image-like data is laid out NCHW (or CHW for a single sample).

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::InvalidRange(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(shape, &self.shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Returns `(n, c, h, w)` for a 4-d tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::InvalidRange(format!(
                "expected a 4-d tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    /// Returns `(c, h, w)` for a 3-d tensor.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::InvalidRange(format!(
                "expected a 3-d tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn ensure_shape(&self, expected: &[usize]) -> Result<()> {
        if self.shape != expected {
            return Err(Error::shape(expected, &self.shape));
        }
        Ok(())
    }

    pub fn ensure_same_shape(&self, other: &Tensor) -> Result<()> {
        other.ensure_shape(&self.shape)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        self.ensure_same_shape(other)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&self, s: f32) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len().max(1) as f64
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    /// Sub-tensor along the leading axis.
    pub fn index0(&self, i: usize) -> Tensor {
        let inner: usize = self.shape[1..].iter().product();
        Tensor {
            shape: self.shape[1..].to_vec(),
            data: self.data[i * inner..(i + 1) * inner].to_vec(),
        }
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::InvalidRange("cannot stack zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            first.ensure_same_shape(t)?;
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor { shape, data })
    }

    /// Concatenates two NCHW (or CHW) tensors along the channel axis.
    pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (a4, b4) = (a.as_nchw()?, b.as_nchw()?);
        let (n, ca, h, w) = a4;
        let (nb, cb, hb, wb) = b4;
        if n != nb || h != hb || w != wb {
            return Err(Error::shape(a.shape(), b.shape()));
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(n * (ca + cb) * hw);
        for i in 0..n {
            data.extend_from_slice(&a.data[i * ca * hw..(i + 1) * ca * hw]);
            data.extend_from_slice(&b.data[i * cb * hw..(i + 1) * cb * hw]);
        }
        let shape = if a.ndim() == 3 {
            vec![ca + cb, h, w]
        } else {
            vec![n, ca + cb, h, w]
        };
        Ok(Tensor { shape, data })
    }

    fn as_nchw(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((1, c, h, w)),
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::InvalidRange(format!(
                "expected CHW or NCHW, got {:?}",
                self.shape
            ))),
        }
    }
}

/// Softmax over the channel axis of a CHW or NCHW tensor.
pub fn softmax_channels(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.as_nchw()?;
    let hw = h * w;
    let mut out = x.clone();
    let d = out.data_mut();
    for b in 0..n {
        let base = b * c * hw;
        for p in 0..hw {
            let mut m = f32::NEG_INFINITY;
            for k in 0..c {
                m = m.max(d[base + k * hw + p]);
            }
            let mut s = 0.0f32;
            for k in 0..c {
                let e = (d[base + k * hw + p] - m).exp();
                d[base + k * hw + p] = e;
                s += e;
            }
            for k in 0..c {
                d[base + k * hw + p] /= s;
            }
        }
    }
    Ok(out)
}

/// Argmax over the channel axis of a CHW tensor; ties resolve to the lowest index.
pub fn argmax_channels(x: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = x.dims3()?;
    let hw = h * w;
    let d = x.data();
    Ok((0..hw)
        .map(|p| {
            let mut best = 0;
            for k in 1..c {
                if d[k * hw + p] > d[best * hw + p] {
                    best = k;
                }
            }
            best as u8
        })
        .collect())
}

/// One-hot CHW encoding of a label map.
pub fn one_hot(labels: &[u8], classes: usize, h: usize, w: usize) -> Result<Tensor> {
    if labels.len() != h * w {
        return Err(Error::shape(&[h * w], &[labels.len()]));
    }
    let hw = h * w;
    let mut t = Tensor::zeros(&[classes, h, w]);
    for (p, &l) in labels.iter().enumerate() {
        let l = l as usize;
        if l >= classes {
            return Err(Error::UnknownLabel(l as i64));
        }
        t.data[l * hw + p] = 1.0;
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_sums_to_one() {
        let x = Tensor::new(&[3, 1, 2], vec![1.0, -2.0, 0.5, 3.0, 0.0, 0.0]).unwrap();
        let p = softmax_channels(&x).unwrap();
        for px in 0..2 {
            let s: f32 = (0..3).map(|k| p.data()[k * 2 + px]).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn one_hot_argmax_roundtrip() {
        let labels = vec![0u8, 3, 2, 1, 1, 0];
        let t = one_hot(&labels, 4, 2, 3).unwrap();
        assert_eq!(argmax_channels(&t).unwrap(), labels);
    }

    #[test]
    fn one_hot_rejects_out_of_range() {
        assert!(one_hot(&[5], 4, 1, 1).is_err());
    }

    #[test]
    fn concat_keeps_channel_blocks() {
        let a = Tensor::new(&[2, 1, 1, 1], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(&[2, 2, 1, 1], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let c = Tensor::concat_channels(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 3, 1, 1]);
        assert_eq!(c.data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
    }
}
