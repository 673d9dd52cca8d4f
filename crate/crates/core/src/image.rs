//! RGB float images, 8-bit PNG export and the raw float container.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{ensure, Error, Result};

pub const IMAGE_MAGIC: &[u8; 7] = b"LAVIMG1";

/// Row-major `height × width × 3` image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn zeros(height: usize, width: usize) -> Self {
        Image { height, width, data: vec![0.0; height * width * 3] }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), height * width * 3, "image buffer length");
        Image { height, width, data }
    }

    pub fn channels(&self) -> usize {
        3
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = 3 * (y * self.width + x);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn clamp01(&mut self) {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }

    /// Left-right mirror.
    pub fn flipped_horizontally(&self) -> Image {
        let mut out = Image::zeros(self.height, self.width);
        for y in 0..self.height {
            for x in 0..self.width {
                out.set_pixel(y, self.width - 1 - x, self.pixel(y, x));
            }
        }
        out
    }

    /// 8-bit values, `round(255·clamp(v))` with halves rounded up.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize(v)).collect()
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.to_rgb8())
            .ok_or_else(|| Error::validation("image buffer does not match its dimensions"))?;
        buf.save_with_format(path.as_ref(), image::ImageFormat::Png).map_err(|e| match e {
            image::ImageError::IoError(io) => Error::Io(io),
            other => Error::Format(other.to_string()),
        })
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Image> {
        let img = image::open(path.as_ref())
            .map_err(|e| match e {
                image::ImageError::IoError(io) => Error::Io(io),
                other => Error::Format(other.to_string()),
            })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
        Ok(Image::from_vec(h as usize, w as usize, data))
    }

    /// Writes magic, `u32` height, width and channels, then `f32` values, little-endian.
    pub fn write_raw<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(IMAGE_MAGIC)?;
        for v in [self.height as u32, self.width as u32, 3u32] {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_raw<R: Read>(mut r: R) -> Result<Image> {
        let mut magic = [0u8; 7];
        r.read_exact(&mut magic)?;
        ensure!(&magic == IMAGE_MAGIC, Format, "not a raw image file (bad magic)");
        let mut u = [0u8; 4];
        let mut dims = [0usize; 3];
        for d in &mut dims {
            r.read_exact(&mut u)?;
            *d = u32::from_le_bytes(u) as usize;
        }
        ensure!(dims[2] == 3, Format, "raw image has {} channels, expected 3", dims[2]);
        let mut bytes = vec![0u8; dims[0] * dims[1] * 3 * 4];
        r.read_exact(&mut bytes)?;
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(Image::from_vec(dims[0], dims[1], data))
    }

    pub fn save_raw(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_raw(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load_raw(path: impl AsRef<Path>) -> Result<Image> {
        Self::read_raw(BufReader::new(File::open(path)?))
    }
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) as f64 * 255.0 + 0.5).floor() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantize_rounds_half_up() {
        assert_eq!(quantize(0.0), 0);
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(-3.0), 0);
        assert_eq!(quantize(2.0), 255);
        assert_eq!(quantize((0.5 / 255.0) as f32 + 1e-7), 1);
        assert_eq!(quantize(0.5), 128);
    }

    #[test]
    fn raw_container_roundtrips() {
        let img = Image::from_vec(2, 3, (0..18).map(|i| i as f32 * 0.1 - 0.4).collect());
        let mut buf = Vec::new();
        img.write_raw(&mut buf).unwrap();
        assert_eq!(buf.len(), 7 + 12 + 18 * 4);
        assert_eq!(&buf[..7], b"LAVIMG1");
        assert_eq!(Image::read_raw(&buf[..]).unwrap(), img);
        buf[0] = b'X';
        assert!(matches!(Image::read_raw(&buf[..]), Err(Error::Format(_))));
    }

    #[test]
    fn png_roundtrips_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let img = Image::from_vec(2, 2, (0..12).map(|i| i as f32 / 11.0).collect());
        img.save_png(&path).unwrap();
        let back = Image::load_png(&path).unwrap();
        assert_eq!(back.to_rgb8(), img.to_rgb8());
    }

    #[test]
    fn mirror_is_an_involution() {
        let img = Image::from_vec(2, 3, (0..18).map(|i| i as f32).collect());
        assert_eq!(img.flipped_horizontally().pixel(0, 0), img.pixel(0, 2));
        assert_eq!(img.flipped_horizontally().flipped_horizontally(), img);
    }
}
