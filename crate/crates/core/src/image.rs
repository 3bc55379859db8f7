use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Linear (gamma 1.0) image, row-major with interleaved channels.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer {
    pub width: u32,
    pub height: u32,
    pub channels: u32,
    pub data: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(width: u32, height: u32, channels: u32) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: u32, height: u32, channels: u32, value: f64) -> Self {
        ImageBuffer { width, height, channels, data: vec![value; (width * height * channels) as usize] }
    }

    pub fn from_data(width: u32, height: u32, channels: u32, data: Vec<f64>) -> Result<Self> {
        let want = (width * height * channels) as usize;
        if data.len() != want {
            return Err(Error::shape(want, data.len()));
        }
        Ok(ImageBuffer { width, height, channels, data })
    }

    #[inline]
    pub fn index(&self, x: u32, y: u32, c: u32) -> usize {
        ((y * self.width + x) * self.channels + c) as usize
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32, c: u32) -> f64 {
        self.data[self.index(x, y, c)]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, c: u32, v: f64) {
        let i = self.index(x, y, c);
        self.data[i] = v;
    }

    pub fn pixel(&self, x: u32, y: u32) -> &[f64] {
        let i = self.index(x, y, 0);
        &self.data[i..i + self.channels as usize]
    }

    pub fn pixel_mut(&mut self, x: u32, y: u32) -> &mut [f64] {
        let i = self.index(x, y, 0);
        let c = self.channels as usize;
        &mut self.data[i..i + c]
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn same_shape(&self, other: &ImageBuffer) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn check_same_shape(&self, other: &ImageBuffer) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::shape(
                alloc::format!("{}x{}x{}", self.width, self.height, self.channels),
                alloc::format!("{}x{}x{}", other.width, other.height, other.channels),
            ))
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn scaled(&self, s: f64) -> ImageBuffer {
        ImageBuffer { data: self.data.iter().map(|v| v * s).collect(), ..self.clone() }
    }

    /// One channel as a single-channel image.
    pub fn channel(&self, c: u32) -> ImageBuffer {
        let data = self.data.iter().skip(c as usize).step_by(self.channels as usize).copied().collect();
        ImageBuffer { width: self.width, height: self.height, channels: 1, data }
    }

    /// Values clamped to `[0, 1]`.
    pub fn clamped(&self) -> ImageBuffer {
        ImageBuffer { data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(), ..self.clone() }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len().max(1) as f64
    }

    /// RGB8 bytes of `clamp(v, 0, 1) * 255` rounded; single-channel images are replicated.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0 + 0.5) as u8;
        let mut out = Vec::with_capacity((self.width * self.height * 3) as usize);
        for px in self.data.chunks_exact(self.channels as usize) {
            match self.channels {
                1 => out.extend_from_slice(&[q(px[0]); 3]),
                _ => out.extend(px.iter().take(3).map(|&v| q(v))),
            }
        }
        out
    }
}
