//! RGB images with values in `[0, 1]` and binary PPM / PNG persistence.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{ensure, Error, Result};

/// Row-major `H x W x 3` image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        ensure!(height > 0 && width > 0, "image must be non-empty, got {height}x{width}");
        ensure!(
            data.len() == height * width * 3,
            "image data length {} != {height}x{width}x3",
            data.len()
        );
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::Validation(format!("pixel value {v} outside [0,1]")));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn black(height: usize, width: usize) -> Self {
        Self::filled(height, width, [0.0; 3])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> [f32; 3] {
        let o = (row * self.width + col) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [f32; 3]) {
        let o = (row * self.width + col) * 3;
        for (c, v) in rgb.iter().enumerate() {
            self.data[o + c] = v.clamp(0.0, 1.0);
        }
    }

    /// Copies the `size x size` window whose top-left corner is `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Image> {
        ensure!(
            top + height <= self.height && left + width <= self.width,
            "crop {height}x{width}@({top},{left}) exceeds {}x{}",
            self.height,
            self.width
        );
        let mut data = Vec::with_capacity(height * width * 3);
        for r in top..top + height {
            let o = (r * self.width + left) * 3;
            data.extend_from_slice(&self.data[o..o + width * 3]);
        }
        Ok(Image {
            height,
            width,
            data,
        })
    }

    pub fn mirror_horizontal(&self) -> Image {
        let mut out = self.clone();
        for r in 0..self.height {
            for c in 0..self.width {
                out.set_pixel(r, c, self.pixel(r, self.width - 1 - c));
            }
        }
        out
    }

    /// Mean squared error over all channels.
    pub fn mse(&self, other: &Image) -> Result<f64> {
        ensure!(
            self.height == other.height && self.width == other.width,
            "mse shape mismatch"
        );
        let s: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| {
                let d = (*a - *b) as f64;
                d * d
            })
            .sum();
        Ok(s / self.data.len() as f64)
    }

    fn to_bytes(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    fn from_bytes(height: usize, width: usize, bytes: &[u8]) -> Image {
        Image {
            height,
            width,
            data: bytes.iter().map(|b| *b as f32 / 255.0).collect(),
        }
    }

    /// Binary PPM (P6, maxval 255).
    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut buf = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        buf.extend(self.to_bytes());
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn read_ppm(path: &Path) -> Result<Image> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::parse_ppm(&bytes)
    }

    pub fn parse_ppm(bytes: &[u8]) -> Result<Image> {
        let mut fields = Vec::with_capacity(4);
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Truncated("ppm header".into()));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        ensure!(fields[0] == "P6", "not a binary PPM (magic {})", fields[0]);
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::Validation(format!("bad ppm header field {s:?}")))
        };
        let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
        ensure!(maxval == 255, "only maxval 255 is supported, got {maxval}");
        ensure!(w > 0 && h > 0, "empty ppm");
        let body = &bytes[pos + 1..];
        if body.len() < w * h * 3 {
            return Err(Error::Truncated(format!(
                "ppm body has {} bytes, need {}",
                body.len(),
                w * h * 3
            )));
        }
        Ok(Self::from_bytes(h, w, &body[..w * h * 3]))
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let png_err = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
        let mut writer = enc.write_header().map_err(png_err)?;
        writer.write_image_data(&self.to_bytes()).map_err(png_err)?;
        writer.finish().map_err(png_err)?;
        Ok(())
    }

    pub fn read_png(path: &Path) -> Result<Image> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut dec = png::Decoder::new(std::io::BufReader::new(file));
        dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = dec
            .read_info()
            .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
        let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
        let info = reader
            .next_frame(&mut buf)
            .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
        let (w, h) = (info.width as usize, info.height as usize);
        let bytes = &buf[..info.buffer_size()];
        let rgb: Vec<u8> = match info.color_type {
            png::ColorType::Rgb => bytes.to_vec(),
            png::ColorType::Rgba => bytes
                .chunks(4)
                .flat_map(|p| [p[0], p[1], p[2]])
                .collect(),
            png::ColorType::Grayscale => bytes.iter().flat_map(|&g| [g, g, g]).collect(),
            png::ColorType::GrayscaleAlpha => {
                bytes.chunks(2).flat_map(|p| [p[0], p[0], p[0]]).collect()
            }
            png::ColorType::Indexed => {
                return Err(Error::Validation("indexed png not expanded".into()))
            }
        };
        Ok(Self::from_bytes(h, w, &rgb))
    }

    /// Dispatches on extension (`.png`, otherwise PPM).
    pub fn save(&self, path: &Path) -> Result<()> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("png") => self.write_png(path),
            _ => self.write_ppm(path),
        }
    }

    pub fn load(path: &Path) -> Result<Image> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("png") => Self::read_png(path),
            _ => Self::read_ppm(path),
        }
    }

    /// Tiles equally sized images into a grid with `cols` columns.
    pub fn montage(images: &[Image], cols: usize) -> Result<Image> {
        ensure!(!images.is_empty() && cols > 0, "montage needs at least one image");
        let (h, w) = (images[0].height, images[0].width);
        ensure!(
            images.iter().all(|i| i.height == h && i.width == w),
            "montage images differ in size"
        );
        let rows = images.len().div_ceil(cols);
        let mut out = Image::black(rows * h, cols * w);
        for (i, img) in images.iter().enumerate() {
            let (gr, gc) = (i / cols, i % cols);
            for r in 0..h {
                for c in 0..w {
                    out.set_pixel(gr * h + r, gc * w + c, img.pixel(r, c));
                }
            }
        }
        Ok(out)
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient(h: usize, w: usize) -> Image {
        let mut img = Image::black(h, w);
        for r in 0..h {
            for c in 0..w {
                img.set_pixel(r, c, [r as f32 / h as f32, c as f32 / w as f32, 0.5]);
            }
        }
        img
    }

    #[test]
    fn rejects_out_of_range_values() {
        assert!(Image::new(1, 1, vec![0.0, 1.5, 0.0]).is_err());
        assert!(Image::new(1, 1, vec![0.0, f32::NAN, 0.0]).is_err());
        assert!(Image::new(0, 1, vec![]).is_err());
    }

    #[test]
    fn ppm_and_png_round_trip_at_8_bits() {
        let dir = tempfile::tempdir().unwrap();
        let img = gradient(6, 5);
        for name in ["a.ppm", "a.png"] {
            let p = dir.path().join(name);
            img.save(&p).unwrap();
            let back = Image::load(&p).unwrap();
            assert_eq!(back.height(), 6);
            assert_eq!(back.width(), 5);
            assert!(img.mse(&back).unwrap() < 1e-5);
        }
    }

    #[test]
    fn truncated_ppm_is_reported() {
        let err = Image::parse_ppm(b"P6\n2 2\n255\n\x00\x00").unwrap_err();
        assert!(matches!(err, Error::Truncated(_)));
    }

    #[test]
    fn mirror_twice_is_identity() {
        let img = gradient(4, 7);
        assert_eq!(img.mirror_horizontal().mirror_horizontal(), img);
    }
}
