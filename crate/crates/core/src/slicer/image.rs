use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Row-major `H x W x C` raster with samples in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Precondition(format!(
                "image must be non-empty, got {height}x{width}"
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::Precondition(format!(
                "images have 1 or 3 channels, got {channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::shape(
                "image",
                format!("{height}x{width}x{channels} with {} samples", data.len()),
            ));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Precondition(format!("sample {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        assert!((0.0..=1.0).contains(&value) && height > 0 && width > 0);
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let o = (y * self.width + x) * self.channels;
        &self.data[o..o + self.channels]
    }

    /// Sets one pixel; values are clamped into `[0, 1]`.
    pub fn put_pixel(&mut self, y: usize, x: usize, value: &[f64]) {
        let o = (y * self.width + x) * self.channels;
        for (d, v) in self.data[o..o + self.channels].iter_mut().zip(value) {
            *d = v.clamp(0.0, 1.0);
        }
    }

    /// Copies `src` with its top-left corner at `(top, left)`; `src` must fit.
    pub fn blit(&mut self, src: &ImageBuffer, top: usize, left: usize) -> Result<()> {
        if src.channels != self.channels
            || top + src.height > self.height
            || left + src.width > self.width
        {
            return Err(Error::Precondition(format!(
                "cannot place {}x{}x{} at ({top}, {left}) on {}x{}x{}",
                src.height, src.width, src.channels, self.height, self.width, self.channels
            )));
        }
        let row = src.width * self.channels;
        for y in 0..src.height {
            let d = ((top + y) * self.width + left) * self.channels;
            self.data[d..d + row].copy_from_slice(&src.data[y * row..(y + 1) * row]);
        }
        Ok(())
    }

    pub fn crop(
        &self,
        top: usize,
        left: usize,
        height: usize,
        width: usize,
    ) -> Result<ImageBuffer> {
        if height == 0 || width == 0 || top + height > self.height || left + width > self.width {
            return Err(Error::Precondition(format!(
                "crop {height}x{width} at ({top}, {left}) outside {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(height * width * self.channels);
        for y in top..top + height {
            let s = (y * self.width + left) * self.channels;
            data.extend_from_slice(&self.data[s..s + width * self.channels]);
        }
        Ok(Self {
            height,
            width,
            channels: self.channels,
            data,
        })
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.height, self.width, self.channels], self.data.clone())
            .expect("consistent image")
    }

    /// Inverse of [`to_tensor`](Self::to_tensor); samples are clamped into `[0, 1]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (h, w, c) = t.dims3("image")?;
        Self::new(
            h,
            w,
            c,
            t.data().iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        )
    }
}
