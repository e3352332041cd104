use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::imgcore::{ImageTensor, SegMap, ValueRange};
use crate::scalar::Scalar;

/// Dense `N x C x H x W` feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    shape: [usize; 4],
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Tensor {
            shape,
            data: vec![S::zero(); shape.iter().product()],
        }
    }

    pub fn full(shape: [usize; 4], v: S) -> Self {
        Tensor {
            shape,
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<S>) -> Result<Self> {
        let want: usize = shape.iter().product();
        if data.len() != want {
            return Err(Error::shape("Tensor::from_vec", want, data.len()));
        }
        Ok(Tensor { shape, data })
    }

    pub fn randn<R: Rng + ?Sized>(shape: [usize; 4], std: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                S::lit(z * std)
            })
            .collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn n(&self) -> usize {
        self.shape[0]
    }

    pub fn c(&self) -> usize {
        self.shape[1]
    }

    pub fn h(&self) -> usize {
        self.shape[2]
    }

    pub fn w(&self) -> usize {
        self.shape[3]
    }

    /// Elements per batch item.
    pub fn item_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn item(&self, i: usize) -> &[S] {
        let l = self.item_len();
        &self.data[i * l..(i + 1) * l]
    }

    pub fn item_mut(&mut self, i: usize) -> &mut [S] {
        let l = self.item_len();
        &mut self.data[i * l..(i + 1) * l]
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> S {
        let [_, cc, h, w] = self.shape;
        self.data[((n * cc + c) * h + y) * w + x]
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor<S>, f: impl Fn(S, S) -> S) -> Result<Self> {
        self.expect_shape(other.shape, "zip_map")?;
        Ok(Tensor {
            shape: self.shape,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Tensor<S>) -> Result<()> {
        self.expect_shape(other.shape, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, k: S) {
        for v in &mut self.data {
            *v *= k;
        }
    }

    pub fn sum(&self) -> S {
        self.data.iter().copied().sum()
    }

    pub fn expect_shape(&self, shape: [usize; 4], context: &str) -> Result<()> {
        if self.shape != shape {
            return Err(Error::shape(context, format!("{shape:?}"), format!("{:?}", self.shape)));
        }
        Ok(())
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| T::lit(v.as_f64())).collect(),
        }
    }

    /// Concatenates along the batch axis.
    pub fn stack(items: &[Tensor<S>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::InvalidParam("cannot stack zero tensors".into()))?;
        let [_, c, h, w] = first.shape;
        let mut data = Vec::with_capacity(items.iter().map(|t| t.len()).sum());
        let mut n = 0;
        for t in items {
            let [tn, tc, th, tw] = t.shape;
            if (tc, th, tw) != (c, h, w) {
                return Err(Error::shape("Tensor::stack", format!("[_, {c}, {h}, {w}]"), format!("{:?}", t.shape)));
            }
            n += tn;
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor { shape: [n, c, h, w], data })
    }

    /// Batch item `i` as its own single-item tensor.
    pub fn slice_item(&self, i: usize) -> Self {
        Tensor {
            shape: [1, self.shape[1], self.shape[2], self.shape[3]],
            data: self.item(i).to_vec(),
        }
    }

    /// Planar `[N, C, H, W]` copy of a batch of equally sized images.
    pub fn from_images<T: Scalar>(images: &[&ImageTensor<T>]) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::InvalidParam("empty image batch".into()))?;
        let (h, w, c) = first.shape();
        let mut data = Vec::with_capacity(images.len() * h * w * c);
        for img in images {
            if img.shape() != (h, w, c) {
                return Err(Error::shape("Tensor::from_images", format!("{:?}", (h, w, c)), format!("{:?}", img.shape())));
            }
            let src = img.data();
            for ch in 0..c {
                data.extend((0..h * w).map(|p| S::lit(src[p * c + ch].as_f64())));
            }
        }
        Tensor::from_vec([images.len(), c, h, w], data)
    }

    /// `[N, 1, H, W]` copy of a batch of segmentation maps.
    pub fn from_segmaps<T: Scalar>(maps: &[&SegMap<T>]) -> Result<Self> {
        let first = maps
            .first()
            .ok_or_else(|| Error::InvalidParam("empty segmentation batch".into()))?;
        let (h, w) = (first.height(), first.width());
        let mut data = Vec::with_capacity(maps.len() * h * w);
        for m in maps {
            if (m.height(), m.width()) != (h, w) {
                return Err(Error::shape("Tensor::from_segmaps", format!("{h}x{w}"), format!("{}x{}", m.height(), m.width())));
            }
            data.extend(m.values().iter().map(|v| S::lit(v.as_f64())));
        }
        Tensor::from_vec([maps.len(), 1, h, w], data)
    }

    /// Batch item `i` as an interleaved image, clamped into `range`.
    pub fn to_image<T: Scalar>(&self, i: usize, range: ValueRange) -> Result<ImageTensor<T>> {
        let [_, c, h, w] = self.shape;
        let src = self.item(i);
        let mut data = Vec::with_capacity(c * h * w);
        for p in 0..h * w {
            data.extend((0..c).map(|ch| T::lit(src[ch * h * w + p].as_f64())));
        }
        ImageTensor::from_clamped(h, w, c, range, data)
    }

    /// Single-channel batch item `i` as a segmentation map, clamped to [0, 1].
    pub fn to_segmap<T: Scalar>(&self, i: usize) -> Result<SegMap<T>> {
        let [_, c, h, w] = self.shape;
        if c != 1 {
            return Err(Error::shape("Tensor::to_segmap", 1, c));
        }
        let values = self.item(i).iter().map(|v| T::lit(v.as_f64().clamp(0.0, 1.0))).collect();
        SegMap::new(h, w, values)
    }
}
