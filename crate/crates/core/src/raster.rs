//! Planar RGB images with values in `[0, 1]`.
//!
//! Pixel `(x, y)` has its center at normalized coordinates
//! `((x + 0.5) / width, (y + 0.5) / height)`.

use std::path::Path;

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    /// Channel-major: `data[(c * height + y) * width + x]`.
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; CHANNELS * width * height],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut img = Self::new(width, height);
        for (c, value) in rgb.iter().enumerate() {
            img.channel_mut(c).fill(*value);
        }
        img
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != CHANNELS * width * height {
            return Err(Error::shape(format!(
                "image buffer has {} values, expected {}",
                data.len(),
                CHANNELS * width * height
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.width * self.height;
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, x: usize, y: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, x: usize, y: usize, value: f32) {
        self.data[(c * self.height + y) * self.width + x] = value;
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        [self.get(0, x, y), self.get(1, x, y), self.get(2, x, y)]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        for (c, value) in rgb.iter().enumerate() {
            self.set(c, x, y, *value);
        }
    }

    /// Bilinear sample at pixel-space coordinates (pixel centers at integers),
    /// clamping out-of-range positions to the border.
    pub fn sample_bilinear(&self, c: usize, x: f64, y: f64) -> f32 {
        let max_x = (self.width - 1) as f64;
        let max_y = (self.height - 1) as f64;
        let x = x.clamp(0.0, max_x);
        let y = y.clamp(0.0, max_y);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = (x - x0 as f64) as f32;
        let fy = (y - y0 as f64) as f32;
        let top = self.get(c, x0, y0) * (1.0 - fx) + self.get(c, x1, y0) * fx;
        let bottom = self.get(c, x0, y1) * (1.0 - fx) + self.get(c, x1, y1) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    /// Bilinear sample at normalized `[0,1]²` coordinates.
    pub fn sample_normalized(&self, c: usize, u: f64, v: f64) -> f32 {
        self.sample_bilinear(
            c,
            u * self.width as f64 - 0.5,
            v * self.height as f64 - 0.5,
        )
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = Self::new(self.width, self.height);
        for c in 0..CHANNELS {
            for y in 0..self.height {
                for x in 0..self.width {
                    out.set(c, self.width - 1 - x, y, self.get(c, x, y));
                }
            }
        }
        out
    }

    /// Brightness offset and contrast gain around the image mean, clamped to `[0, 1]`.
    pub fn adjust(&self, brightness: f32, contrast: f32) -> Self {
        let mean = self.data.iter().sum::<f32>() / self.data.len().max(1) as f32;
        let data = self
            .data
            .iter()
            .map(|&p| ((p - mean) * contrast + mean + brightness).clamp(0.0, 1.0))
            .collect();
        Self {
            width: self.width,
            height: self.height,
            data,
        }
    }

    /// Pads to a square canvas (centered, edge color taken from the border
    /// mean) and resamples to `size × size`.
    pub fn pad_resize_square(&self, size: usize) -> Self {
        if self.width == size && self.height == size {
            return self.clone();
        }
        let side = self.width.max(self.height);
        let fill = self.border_mean();
        let off_x = (side - self.width) as f64 / 2.0;
        let off_y = (side - self.height) as f64 / 2.0;
        let scale = side as f64 / size as f64;
        let mut out = Self::new(size, size);
        for y in 0..size {
            for x in 0..size {
                // Position in the padded canvas, then in the source.
                let cx = (x as f64 + 0.5) * scale - 0.5 - off_x;
                let cy = (y as f64 + 0.5) * scale - 0.5 - off_y;
                let inside = cx >= -0.5
                    && cy >= -0.5
                    && cx <= self.width as f64 - 0.5
                    && cy <= self.height as f64 - 0.5;
                for c in 0..CHANNELS {
                    let value = if inside {
                        self.sample_bilinear(c, cx, cy)
                    } else {
                        fill[c]
                    };
                    out.set(c, x, y, value);
                }
            }
        }
        out
    }

    fn border_mean(&self) -> [f32; 3] {
        let mut acc = [0.0f32; 3];
        let mut n = 0.0f32;
        for y in 0..self.height {
            for x in 0..self.width {
                if x == 0 || y == 0 || x + 1 == self.width || y + 1 == self.height {
                    for (c, a) in acc.iter_mut().enumerate() {
                        *a += self.get(c, x, y);
                    }
                    n += 1.0;
                }
            }
        }
        acc.map(|a| a / n.max(1.0))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let decoded = image::open(path).map_err(|e| Error::ImageRead {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let rgb = decoded.to_rgb8();
        let (w, h) = rgb.dimensions();
        let (w, h) = (w as usize, h as usize);
        let mut img = Self::new(w, h);
        for (x, y, px) in rgb.enumerate_pixels() {
            for c in 0..CHANNELS {
                img.set(c, x as usize, y as usize, px[c] as f32 / 255.0);
            }
        }
        Ok(img)
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let px = self.pixel(x as usize, y as usize);
            image::Rgb(px.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8()
            .save(path)
            .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
    }

    /// Quantizes through 8-bit, as a PNG roundtrip would.
    pub fn quantized(&self) -> Self {
        let data = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
            .collect();
        Self {
            width: self.width,
            height: self.height,
            data,
        }
    }

    pub fn draw_disc(&mut self, cx: f64, cy: f64, radius: f64, rgb: [f32; 3]) {
        let x0 = (cx - radius).floor().max(0.0) as usize;
        let y0 = (cy - radius).floor().max(0.0) as usize;
        let x1 = ((cx + radius).ceil() as usize).min(self.width.saturating_sub(1));
        let y1 = ((cy + radius).ceil() as usize).min(self.height.saturating_sub(1));
        for y in y0..=y1 {
            for x in x0..=x1 {
                let dx = x as f64 - cx;
                let dy = y as f64 - cy;
                if dx * dx + dy * dy <= radius * radius {
                    self.set_pixel(x, y, rgb);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_hits_pixels_exactly() {
        let mut img = Image::new(4, 3);
        img.set(1, 2, 1, 0.75);
        assert_eq!(img.sample_bilinear(1, 2.0, 1.0), 0.75);
        assert_eq!(img.sample_normalized(1, 2.5 / 4.0, 1.5 / 3.0), 0.75);
        assert!((img.sample_bilinear(1, 1.5, 1.0) - 0.375).abs() < 1e-7);
    }

    #[test]
    fn sampling_clamps_to_border() {
        let mut img = Image::new(2, 2);
        img.set(0, 0, 0, 1.0);
        assert_eq!(img.sample_bilinear(0, -5.0, -3.0), 1.0);
    }

    #[test]
    fn flip_is_involution() {
        let data: Vec<f32> = (0..3 * 5 * 4).map(|i| i as f32 / 60.0).collect();
        let img = Image::from_data(5, 4, data).unwrap();
        assert_eq!(img.flip_horizontal().flip_horizontal(), img);
        assert_eq!(img.flip_horizontal().get(2, 0, 1), img.get(2, 4, 1));
    }

    #[test]
    fn pad_resize_keeps_square_unchanged() {
        let img = Image::filled(8, 8, [0.2, 0.4, 0.6]);
        assert_eq!(img.pad_resize_square(8), img);
        let wide = Image::filled(16, 8, [0.2, 0.4, 0.6]);
        let sq = wide.pad_resize_square(8);
        assert_eq!((sq.width(), sq.height()), (8, 8));
        assert!((sq.get(1, 4, 4) - 0.4).abs() < 1e-6);
    }

    #[test]
    fn png_roundtrip_is_quantized_identity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let data: Vec<f32> = (0..3 * 6 * 5).map(|i| (i % 17) as f32 / 16.0).collect();
        let img = Image::from_data(6, 5, data).unwrap();
        img.save_png(&path).unwrap();
        let back = Image::load_png(&path).unwrap();
        assert_eq!(back, img.quantized());
    }
}
