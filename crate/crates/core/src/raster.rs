//! Row-major image grids and their PNG encodings.

use std::path::Path;

use image::{DynamicImage, GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Affine pixel-to-world transform carried along untouched.
pub type GeoTransform = [f64; 6];

/// H×W×C grid stored row-major with interleaved channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Raster<T> {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<T>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geotransform: Option<GeoTransform>,
}

/// Binary mask with values in {0, 1}.
pub type Mask = Raster<u8>;

impl<T: Copy + Default> Raster<T> {
    pub fn new(height: usize, width: usize, channels: usize) -> Result<Self> {
        Self::filled(height, width, channels, T::default())
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: T) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::invalid(format!(
                "raster extents must be positive, got {height}×{width}×{channels}"
            )));
        }
        Ok(Raster {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
            geotransform: None,
        })
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::invalid(format!(
                "raster extents must be positive, got {height}×{width}×{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::invalid(format!(
                "{height}×{width}×{channels} raster needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Raster {
            height,
            width,
            channels,
            data,
            geotransform: None,
        })
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

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn get(&self, row: usize, col: usize, channel: usize) -> T {
        self.data[(row * self.width + col) * self.channels + channel]
    }

    pub fn set(&mut self, row: usize, col: usize, channel: usize, value: T) {
        self.data[(row * self.width + col) * self.channels + channel] = value;
    }

    /// All channels of one pixel.
    pub fn pixel(&self, row: usize, col: usize) -> &[T] {
        let i = (row * self.width + col) * self.channels;
        &self.data[i..i + self.channels]
    }

    /// `height`×`width` window whose top-left sits at (`row`, `col`) in this
    /// raster's coordinates; pixels outside the raster are `T::default()`.
    pub fn window(&self, row: isize, col: isize, height: usize, width: usize) -> Result<Self> {
        let mut out = Raster::new(height, width, self.channels)?;
        for r in 0..height {
            let sr = row + r as isize;
            if sr < 0 || sr >= self.height as isize {
                continue;
            }
            let c_lo = (-col).clamp(0, width as isize) as usize;
            let c_hi = (self.width as isize - col).clamp(0, width as isize) as usize;
            if c_lo >= c_hi {
                continue;
            }
            let src = ((sr as usize) * self.width + (col + c_lo as isize) as usize) * self.channels;
            let dst = (r * width + c_lo) * self.channels;
            let n = (c_hi - c_lo) * self.channels;
            out.data[dst..dst + n].copy_from_slice(&self.data[src..src + n]);
        }
        Ok(out)
    }

    /// Copies `src` into this raster with its top-left at (`row`, `col`),
    /// clipping whatever falls outside.
    pub fn paste(&mut self, src: &Raster<T>, row: usize, col: usize) -> Result<()> {
        if src.channels != self.channels {
            return Err(Error::invalid("paste between rasters with different channel counts"));
        }
        let rows = src.height.min(self.height.saturating_sub(row));
        let cols = src.width.min(self.width.saturating_sub(col));
        for r in 0..rows {
            let s = r * src.width * src.channels;
            let d = ((row + r) * self.width + col) * self.channels;
            let n = cols * self.channels;
            self.data[d..d + n].copy_from_slice(&src.data[s..s + n]);
        }
        Ok(())
    }

    pub fn map<U: Copy + Default>(&self, f: impl Fn(T) -> U) -> Raster<U> {
        Raster {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
            geotransform: self.geotransform,
        }
    }
}

impl Mask {
    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v <= 1)
    }
}

fn image_err(path: &Path, source: image::ImageError) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

/// Reads an 8-bit PNG as a 1- or 3-channel raster (alpha is dropped).
pub fn read_png(path: &Path) -> Result<Raster<u8>> {
    let img = image::open(path).map_err(|e| image_err(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img {
        DynamicImage::ImageLuma8(g) => Raster::from_vec(h, w, 1, g.into_raw()),
        DynamicImage::ImageLumaA8(_) => Raster::from_vec(h, w, 1, img.to_luma8().into_raw()),
        _ => Raster::from_vec(h, w, 3, img.to_rgb8().into_raw()),
    }
}

pub fn write_png(path: &Path, raster: &Raster<u8>) -> Result<()> {
    let (w, h) = (raster.width as u32, raster.height as u32);
    let result = match raster.channels {
        1 => GrayImage::from_raw(w, h, raster.data.clone())
            .map(|img: ImageBuffer<Luma<u8>, _>| img.save(path)),
        3 => RgbImage::from_raw(w, h, raster.data.clone()).map(|img: ImageBuffer<Rgb<u8>, _>| img.save(path)),
        c => {
            return Err(Error::invalid(format!("cannot encode a {c}-channel raster as PNG")));
        }
    };
    result
        .expect("buffer size matches extents")
        .map_err(|e| image_err(path, e))
}

/// Mask PNGs store foreground as 255.
pub fn write_mask_png(path: &Path, mask: &Mask) -> Result<()> {
    write_png(path, &mask.map(|v| if v != 0 { 255 } else { 0 }))
}

pub fn read_mask_png(path: &Path) -> Result<Mask> {
    let r = read_png(path)?;
    if r.channels != 1 {
        return Err(Error::Data(format!("{} is not a single-channel mask", path.display())));
    }
    Ok(r.map(|v| (v >= 128) as u8))
}

/// Probabilities quantized to 8 bits (`round(255·p)`).
pub fn write_prob_png(path: &Path, prob: &Raster<f64>) -> Result<()> {
    write_png(path, &prob.map(|p| (p.clamp(0.0, 1.0) * 255.0).round() as u8))
}

pub fn read_prob_png(path: &Path) -> Result<Raster<f64>> {
    let r = read_png(path)?;
    if r.channels != 1 {
        return Err(Error::Data(format!(
            "{} is not a single-channel probability map",
            path.display()
        )));
    }
    Ok(r.map(|v| v as f64 / 255.0))
}
