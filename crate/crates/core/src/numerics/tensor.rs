use rand::Rng;
use rand_distr::StandardNormal;

use super::{Real, ShapeError};

/// Dense row-major array with value semantics.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F = f32> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<F>) -> Result<Self, ShapeError> {
        let shape = shape.into();
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(ShapeError::new("tensor", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, F::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: F) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: F) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> F) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// Entries drawn i.i.d. from `N(0, std²)`.
    pub fn randn(shape: impl Into<Vec<usize>>, std: f64, rng: &mut impl Rng) -> Self {
        Self::from_fn(shape, |_| {
            let z: f64 = rng.sample(StandardNormal);
            F::lit(z * std)
        })
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor<F>]) -> Result<Self, ShapeError> {
        let Some(first) = items.first() else {
            return Err(ShapeError::new("stack", &[], &[]));
        };
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(ShapeError::new("stack", &first.shape, &t.shape));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self, ShapeError> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(ShapeError::new("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Length of the last axis (1 for a 0-d shape).
    pub fn row_len(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Number of rows when viewed as `[len / row_len, row_len]`.
    pub fn rows(&self) -> usize {
        self.data.len().checked_div(self.row_len()).unwrap_or(0)
    }

    /// Row `i` of the last-axis view.
    pub fn row(&self, i: usize) -> &[F] {
        let r = self.row_len();
        &self.data[i * r..(i + 1) * r]
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|x| G::from_f64(x.to_f64().unwrap_or(f64::NAN)).unwrap_or(G::nan()))
                .collect(),
        }
    }

    pub fn norm(&self) -> F {
        self.data.iter().map(|&x| x * x).sum::<F>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Tensor<F>) -> F {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(F::zero(), F::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Dot product of two equally sized tensors, viewed as flat vectors.
    pub fn dot(&self, other: &Tensor<F>) -> F {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a * b)
            .sum()
    }

    /// Copy with every last-axis row scaled to unit L2 norm.
    pub fn l2_normalized_rows(&self) -> Tensor<F> {
        let mut out = self.clone();
        let r = self.row_len();
        if r == 0 {
            return out;
        }
        let eps = F::lit(super::NORM_EPS);
        for row in out.data.chunks_mut(r) {
            let n = row.iter().map(|&x| x * x).sum::<F>().sqrt().max(eps);
            row.iter_mut().for_each(|x| *x = *x / n);
        }
        out
    }

    /// Mean over the leading axis: `[n, ...] → [...]`.
    pub fn mean_rows(&self) -> Tensor<F> {
        let n = self.shape.first().copied().unwrap_or(1).max(1);
        let inner = self.data.len() / n;
        let mut out = vec![F::zero(); inner];
        for chunk in self.data.chunks(inner.max(1)) {
            for (o, &x) in out.iter_mut().zip(chunk) {
                *o = *o + x;
            }
        }
        let scale = F::one() / F::from_usize(n).unwrap();
        out.iter_mut().for_each(|x| *x = *x * scale);
        Tensor {
            shape: self.shape[1..].to_vec(),
            data: out,
        }
    }
}

impl Tensor<f32> {
    /// Bitwise comparison (distinguishes `-0.0`/`0.0` and NaN payloads).
    pub fn bit_eq(&self, other: &Tensor<f32>) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_length_mismatch() {
        let err = Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert_eq!(err.lhs, vec![2, 3]);
    }

    #[test]
    fn row_view_and_normalize() {
        let t = Tensor::<f64>::new(vec![2, 2], vec![3.0, 4.0, 0.0, 2.0]).unwrap();
        assert_eq!(t.row(1), &[0.0, 2.0]);
        let n = t.l2_normalized_rows();
        assert!((n.row(0)[0] - 0.6).abs() < 1e-12);
        assert_eq!(n.row(1), &[0.0, 1.0]);
    }

    #[test]
    fn mean_rows_averages_leading_axis() {
        let t = Tensor::<f64>::new(vec![2, 3], vec![1.0, 2.0, 3.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(t.mean_rows().data(), &[2.0, 3.0, 4.0]);
    }
}
