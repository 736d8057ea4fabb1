//! Planar float images in channel-major layout.

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

/// A `channels x height x width` float image, stored channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePlane {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImagePlane {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::InvalidInput(format!(
                "plane {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
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

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// One channel as a new single-channel plane.
    pub fn channel(&self, c: usize) -> ImagePlane {
        let n = self.height * self.width;
        ImagePlane {
            channels: 1,
            height: self.height,
            width: self.width,
            data: self.data[c * n..(c + 1) * n].to_vec(),
        }
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> ImagePlane {
        ImagePlane {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len().max(1) as f64
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_same_shape(&self, other: &ImagePlane, context: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(context, &self.shape(), &other.shape()));
        }
        Ok(())
    }

    /// Rec.709 luminance for RGB planes; identity for single-channel planes.
    pub fn luminance(&self) -> ImagePlane {
        if self.channels == 1 {
            return self.clone();
        }
        ImagePlane::from_fn(1, self.height, self.width, |_, y, x| {
            LUMA_709
                .iter()
                .enumerate()
                .map(|(c, w)| w * self.get(c.min(self.channels - 1), y, x))
                .sum()
        })
    }

    /// `(1, C, H, W)` tensor.
    pub fn to_tensor(&self, device: &Device, dtype: DType) -> Result<Tensor> {
        let t = Tensor::from_slice(
            &self.data,
            (1, self.channels, self.height, self.width),
            device,
        )?;
        Ok(t.to_dtype(dtype)?)
    }

    /// Stack same-shaped planes into a `(N, C, H, W)` tensor.
    pub fn stack(planes: &[&ImagePlane], device: &Device, dtype: DType) -> Result<Tensor> {
        let first = planes
            .first()
            .ok_or_else(|| Error::InvalidInput("cannot stack zero planes".into()))?;
        let mut data = Vec::with_capacity(planes.len() * first.data.len());
        for p in planes {
            first.ensure_same_shape(p, "stack")?;
            data.extend_from_slice(&p.data);
        }
        let t = Tensor::from_vec(
            data,
            (planes.len(), first.channels, first.height, first.width),
            device,
        )?;
        Ok(t.to_dtype(dtype)?)
    }

    /// Accepts `(C, H, W)` or `(1, C, H, W)`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let t = match t.rank() {
            3 => t.clone(),
            4 if t.dim(0)? == 1 => t.squeeze(0)?,
            _ => {
                return Err(Error::InvalidInput(format!(
                    "expected a single image tensor, got shape {:?}",
                    t.dims()
                )))
            }
        };
        let (c, h, w) = t.dims3()?;
        let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Self::new(c, h, w, data)
    }

    /// Split a `(N, C, H, W)` tensor into planes.
    pub fn unstack(t: &Tensor) -> Result<Vec<Self>> {
        let n = t.dim(0)?;
        (0..n).map(|i| Self::from_tensor(&t.get(i)?)).collect()
    }
}

/// Rec.709 luma weights.
pub const LUMA_709: [f32; 3] = [0.2126, 0.7152, 0.0722];
