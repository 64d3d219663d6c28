//! Dense NCHW `f32` tensors and the raster conversions feeding the networks.

use crate::error::{Error, Result};
use crate::imaging::{ColorSpace, Raster};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Tensor {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::mismatch(
                format!("{n} values for {shape:?}"),
                data.len(),
            ));
        }
        Ok(Tensor { shape, data })
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

    /// Elements per sample.
    pub fn sample_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
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

    pub fn sample(&self, i: usize) -> &[f32] {
        let len = self.sample_len();
        &self.data[i * len..(i + 1) * len]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [f32] {
        let len = self.sample_len();
        &mut self.data[i * len..(i + 1) * len]
    }

    /// Copies sample `i` into a batch of one.
    pub fn select(&self, i: usize) -> Tensor {
        Tensor {
            shape: [1, self.shape[1], self.shape[2], self.shape[3]],
            data: self.sample(i).to_vec(),
        }
    }

    pub fn reshape(self, shape: [usize; 4]) -> Result<Tensor> {
        Tensor::from_vec(shape, self.data)
    }

    /// Stacks equally shaped single-sample tensors into one batch.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::Argument("cannot stack zero tensors".into()))?;
        let [_, c, h, w] = first.shape;
        let mut data = Vec::with_capacity(items.len() * c * h * w);
        for t in items {
            if t.shape[1..] != first.shape[1..] {
                return Err(Error::mismatch(
                    format!("{:?}", first.shape),
                    format!("{:?}", t.shape),
                ));
            }
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor {
            shape: [data.len() / (c * h * w), c, h, w],
            data,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Converts an interleaved raster into a `1 x C x H x W` tensor.
    pub fn from_raster(r: &Raster) -> Tensor {
        let (h, w, ch) = (r.height(), r.width(), r.channels());
        let src = r.pixels();
        let mut data = vec![0.0; h * w * ch];
        for c in 0..ch {
            let plane = &mut data[c * h * w..(c + 1) * h * w];
            for (i, v) in plane.iter_mut().enumerate() {
                *v = src[i * ch + c];
            }
        }
        Tensor {
            shape: [1, ch, h, w],
            data,
        }
    }

    pub fn from_rasters(rs: &[Raster]) -> Result<Tensor> {
        Tensor::stack(&rs.iter().map(Tensor::from_raster).collect::<Vec<_>>())
    }

    /// Converts sample `i` back to a raster, clamping into `[0, 1]`.
    pub fn to_raster(&self, i: usize) -> Result<Raster> {
        let [_, ch, h, w] = self.shape;
        let color_space = match ch {
            1 => ColorSpace::Gray,
            3 => ColorSpace::Rgb,
            other => {
                return Err(Error::Shape(format!(
                    "{other} channels cannot form a raster"
                )))
            }
        };
        let src = self.sample(i);
        let mut pixels = vec![0.0; h * w * ch];
        for c in 0..ch {
            for p in 0..h * w {
                pixels[p * ch + c] = src[c * h * w + p];
            }
        }
        Raster::from_clamped(h, w, color_space, pixels)
    }
}
