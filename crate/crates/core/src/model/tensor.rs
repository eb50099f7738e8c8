use ndarray::{Array2, ArrayView2, ArrayView3};

use crate::{Error, Result};

/// Dense row-major tensor of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::param(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("tensor contains non-finite entries"));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![value; n] }
    }

    pub fn from_array2(a: Array2<f64>) -> Self {
        let shape = a.shape().to_vec();
        let data = if a.is_standard_layout() {
            a.into_raw_vec_and_offset().0
        } else {
            a.iter().copied().collect()
        };
        Self { shape, data }
    }

    /// Stack equally shaped `[T, C]` matrices into `[B, T, C]`.
    pub fn stack(items: &[Array2<f64>]) -> Result<Self> {
        let first = items.first().ok_or_else(|| Error::param("cannot stack zero items"))?;
        let (t, c) = first.dim();
        let mut data = Vec::with_capacity(items.len() * t * c);
        for a in items {
            if a.dim() != (t, c) {
                return Err(Error::param("stacked items differ in shape"));
            }
            data.extend(a.iter().copied());
        }
        Ok(Self { shape: vec![items.len(), t, c], data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn view2(&self) -> Result<ArrayView2<'_, f64>> {
        match self.shape[..] {
            [r, c] => Ok(ArrayView2::from_shape((r, c), &self.data).expect("shape checked")),
            _ => Err(Error::param(format!("expected rank 2, got shape {:?}", self.shape))),
        }
    }

    pub fn view3(&self) -> Result<ArrayView3<'_, f64>> {
        match self.shape[..] {
            [a, b, c] => Ok(ArrayView3::from_shape((a, b, c), &self.data).expect("shape checked")),
            _ => Err(Error::param(format!("expected rank 3, got shape {:?}", self.shape))),
        }
    }

    /// Item `b` of a rank-3 tensor as an owned matrix.
    pub fn item(&self, b: usize) -> Result<Array2<f64>> {
        Ok(self.view3()?.index_axis(ndarray::Axis(0), b).to_owned())
    }
}
