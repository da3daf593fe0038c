use alloc::vec;
use alloc::vec::Vec;

use crate::image::ImageBuffer;

/// Dense row-major tensor. Feature maps are `[channels, height, width]`,
/// conv kernels `[out, in, k, k]`, vectors `[n]`, scalars `[1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(dims.iter().product::<usize>(), data.len(), "dims {dims:?}");
        Self { dims, data }
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self {
            dims: dims.to_vec(),
            data: vec![0.0; dims.iter().product()],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self::new(vec![1], vec![v])
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.dims)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(c, h, w)` of a feature map.
    pub fn chw(&self) -> (usize, usize, usize) {
        assert_eq!(self.dims.len(), 3, "not a feature map: {:?}", self.dims);
        (self.dims[0], self.dims[1], self.dims[2])
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.dims, other.dims);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, k: f64) {
        self.data.iter_mut().for_each(|v| *v *= k);
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(libm::fabs(*v)))
    }
}

impl From<&ImageBuffer> for Tensor {
    fn from(img: &ImageBuffer) -> Self {
        Tensor::new(
            vec![img.channels(), img.height(), img.width()],
            img.data().to_vec(),
        )
    }
}

impl Tensor {
    /// Feature map back to an image; only valid for 1 or 3 channels.
    pub fn to_image(&self) -> crate::Result<ImageBuffer> {
        let (c, h, w) = self.chw();
        ImageBuffer::new(h, w, c, self.data.clone())
    }
}
