//! Dense float images and PNG IO.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major, channel-interleaved image with `f64` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

/// Sample depth used when writing PNG files.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_data(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::shape(
                "image data",
                width * height * channels,
                data.len(),
            ));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[self.index(x, y, c)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        let i = self.index(x, y, c);
        self.data[i] = v;
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn check_shape(&self, other: &Image, what: &'static str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape {
                what,
                expected: format!("{}x{}x{}", self.width, self.height, self.channels),
                got: format!("{}x{}x{}", other.width, other.height, other.channels),
            })
        }
    }

    /// Single channel `c` as a one-channel image.
    pub fn channel(&self, c: usize) -> Image {
        let data = self
            .data
            .iter()
            .skip(c)
            .step_by(self.channels)
            .copied()
            .collect();
        Image {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }

    /// Pixelwise product with a one-channel image.
    pub fn masked(&self, mask: &Image) -> Result<Image> {
        if mask.channels != 1 || mask.width != self.width || mask.height != self.height {
            return Err(Error::shape("mask", self.pixel_count(), mask.data.len()));
        }
        let mut out = self.clone();
        for (p, m) in mask.data.iter().enumerate() {
            for c in 0..self.channels {
                out.data[p * self.channels + c] *= m;
            }
        }
        Ok(out)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }

    /// Rounds every sample to the nearest value representable at `depth`.
    pub fn quantized(&self, depth: BitDepth) -> Image {
        let max = depth.max_value();
        self.map(|v| (v.clamp(0.0, 1.0) * max).round() / max)
    }

    pub fn write_png(&self, path: &Path, depth: BitDepth) -> Result<()> {
        let color = match self.channels {
            1 => png::ColorType::Grayscale,
            3 => png::ColorType::Rgb,
            4 => png::ColorType::Rgba,
            n => return Err(Error::format(path, format!("cannot write {n}-channel PNG"))),
        };
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc =
            png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(color);
        let max = depth.max_value();
        let bytes: Vec<u8> = match depth {
            BitDepth::Eight => {
                enc.set_depth(png::BitDepth::Eight);
                self.data
                    .iter()
                    .map(|v| (v.clamp(0.0, 1.0) * max).round() as u8)
                    .collect()
            }
            BitDepth::Sixteen => {
                enc.set_depth(png::BitDepth::Sixteen);
                self.data
                    .iter()
                    .flat_map(|v| ((v.clamp(0.0, 1.0) * max).round() as u16).to_be_bytes())
                    .collect()
            }
        };
        let mut w = enc
            .write_header()
            .map_err(|e| Error::format(path, e.to_string()))?;
        w.write_image_data(&bytes)
            .map_err(|e| Error::format(path, e.to_string()))?;
        w.finish().map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn read_png(path: &Path) -> Result<Image> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let dec = png::Decoder::new(BufReader::new(file));
        let mut reader = dec
            .read_info()
            .map_err(|e| Error::format(path, e.to_string()))?;
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| Error::format(path, "image too large"))?;
        let mut buf = vec![0; size];
        let info = reader
            .next_frame(&mut buf)
            .map_err(|e| Error::format(path, e.to_string()))?;
        let channels = match info.color_type {
            png::ColorType::Grayscale => 1,
            png::ColorType::Rgb => 3,
            png::ColorType::Rgba => 4,
            other => {
                return Err(Error::format(
                    path,
                    format!("unsupported color type {other:?}"),
                ))
            }
        };
        let buf = &buf[..info.buffer_size()];
        let data: Vec<f64> = match info.bit_depth {
            png::BitDepth::Eight => buf.iter().map(|&b| b as f64 / 255.0).collect(),
            png::BitDepth::Sixteen => buf
                .chunks_exact(2)
                .map(|b| u16::from_be_bytes([b[0], b[1]]) as f64 / 65535.0)
                .collect(),
            other => {
                return Err(Error::format(
                    path,
                    format!("unsupported bit depth {other:?}"),
                ))
            }
        };
        Image::from_data(info.width as usize, info.height as usize, channels, data)
    }
}

impl BitDepth {
    pub fn max_value(self) -> f64 {
        match self {
            BitDepth::Eight => 255.0,
            BitDepth::Sixteen => 65535.0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_on_grid_values() {
        let dir = tempfile::tempdir().unwrap();
        for (depth, channels) in [
            (BitDepth::Eight, 3),
            (BitDepth::Eight, 1),
            (BitDepth::Sixteen, 3),
        ] {
            let max = depth.max_value();
            let data = (0..5 * 4 * channels)
                .map(|i| ((i * 37) % 256) as f64 / 255.0 * (max / max))
                .collect();
            let img = Image::from_data(5, 4, channels, data)
                .unwrap()
                .quantized(depth);
            let p = dir.path().join("x.png");
            img.write_png(&p, depth).unwrap();
            let back = Image::read_png(&p).unwrap();
            assert_eq!(back, img);
        }
    }

    #[test]
    fn channel_and_mask() {
        let img = Image::from_data(2, 1, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(img.channel(1).data, vec![2.0, 5.0]);
        let m = Image::from_data(2, 1, 1, vec![0.0, 0.5]).unwrap();
        assert_eq!(
            img.masked(&m).unwrap().data,
            vec![0.0, 0.0, 0.0, 2.0, 2.5, 3.0]
        );
    }

    #[test]
    fn missing_file_names_path() {
        let err = Image::read_png(Path::new("/nonexistent/a.png")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/a.png"));
    }
}
