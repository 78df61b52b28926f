use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Interleaved RGB image with channel values in `[0, 1]`, row-major (HWC).
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::Shape(format!(
                "{} values for a {width}x{height} RGB image",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let o = (y * self.width + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let o = (y * self.width + x) * 3;
        self.data[o..o + 3].copy_from_slice(&rgb);
    }

    /// Rounds every channel to the nearest 8-bit level.
    pub fn quantize(&mut self) {
        for v in &mut self.data {
            *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        Self::from_data(width, height, bytes.iter().map(|&b| f32::from(b) / 255.0).collect())
    }

    /// Bilinear resample of the window `(x0, y0, w, h)` to `out_w x out_h`.
    pub fn resample(&self, x0: usize, y0: usize, w: usize, h: usize, out_w: usize, out_h: usize) -> Image {
        if x0 == 0 && y0 == 0 && w == self.width && h == self.height && out_w == w && out_h == h {
            return self.clone();
        }
        let mut out = Image::new(out_w, out_h);
        let sx = w as f32 / out_w as f32;
        let sy = h as f32 / out_h as f32;
        let max_x = (x0 + w - 1) as f32;
        let max_y = (y0 + h - 1) as f32;
        for oy in 0..out_h {
            let fy = (y0 as f32 + (oy as f32 + 0.5) * sy - 0.5).clamp(y0 as f32, max_y);
            let y_lo = fy.floor() as usize;
            let y_hi = (y_lo + 1).min(y0 + h - 1);
            let ty = fy - y_lo as f32;
            for ox in 0..out_w {
                let fx = (x0 as f32 + (ox as f32 + 0.5) * sx - 0.5).clamp(x0 as f32, max_x);
                let x_lo = fx.floor() as usize;
                let x_hi = (x_lo + 1).min(x0 + w - 1);
                let tx = fx - x_lo as f32;
                let a = self.pixel(x_lo, y_lo);
                let b = self.pixel(x_hi, y_lo);
                let c = self.pixel(x_lo, y_hi);
                let d = self.pixel(x_hi, y_hi);
                let mut px = [0.0; 3];
                for ch in 0..3 {
                    let top = a[ch] + (b[ch] - a[ch]) * tx;
                    let bottom = c[ch] + (d[ch] - c[ch]) * tx;
                    px[ch] = top + (bottom - top) * ty;
                }
                out.set_pixel(ox, oy, px);
            }
        }
        out
    }

    pub fn resize(&self, out_w: usize, out_h: usize) -> Image {
        self.resample(0, 0, self.width, self.height, out_w, out_h)
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut buf, self.width as u32, self.height as u32);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut w = enc.write_header().map_err(|e| Error::Image(e.to_string()))?;
            w.write_image_data(&self.to_rgb8())
                .map_err(|e| Error::Image(e.to_string()))?;
        }
        Ok(buf)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes = self.encode_png()?;
        let mut f = BufWriter::new(File::create(path)?);
        f.write_all(&bytes)?;
        Ok(())
    }

    /// Decodes any 8/16-bit gray, gray-alpha, RGB or RGBA PNG.
    pub fn load_png(path: &Path) -> Result<Image> {
        let file = File::open(path)?;
        let mut decoder = png::Decoder::new(BufReader::new(file));
        decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = decoder
            .read_info()
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| Error::Image(format!("{}: image too large", path.display())))?;
        let mut buf = vec![0; size];
        let info = reader
            .next_frame(&mut buf)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
        let (w, h) = (info.width as usize, info.height as usize);
        let bytes = &buf[..info.buffer_size()];
        let rgb: Vec<u8> = match info.color_type {
            png::ColorType::Rgb => bytes.to_vec(),
            png::ColorType::Rgba => bytes
                .chunks_exact(4)
                .flat_map(|p| [p[0], p[1], p[2]])
                .collect(),
            png::ColorType::Grayscale => bytes.iter().flat_map(|&g| [g, g, g]).collect(),
            png::ColorType::GrayscaleAlpha => bytes
                .chunks_exact(2)
                .flat_map(|p| [p[0], p[0], p[0]])
                .collect(),
            png::ColorType::Indexed => {
                return Err(Error::Image(format!("{}: unexpanded palette image", path.display())))
            }
        };
        Image::from_rgb8(w, h, &rgb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_lossless_for_quantized_images() {
        let mut img = Image::new(5, 3);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = (i % 7) as f32 / 6.0;
        }
        img.quantize();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        img.save_png(&path).unwrap();
        assert_eq!(Image::load_png(&path).unwrap(), img);
    }

    #[test]
    fn same_size_resample_is_identity() {
        let mut img = Image::new(4, 4);
        img.data.iter_mut().enumerate().for_each(|(i, v)| *v = i as f32 / 48.0);
        assert_eq!(img.resize(4, 4), img);
    }

    #[test]
    fn constant_image_resamples_to_constant() {
        let img = Image::from_data(3, 3, vec![0.25; 27]).unwrap();
        let out = img.resample(1, 0, 2, 3, 7, 5);
        assert!(out.data.iter().all(|&v| (v - 0.25).abs() < 1e-6));
    }
}
