//! RGB image buffer in [0,1] with PNG/PPM round-tripping.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// Row-major (y * width + x) * 3 layout.
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Image {
        Image { width, height, data: vec![0.0; width * height * 3] }
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Image {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Image { width, height, data }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_u8(width: usize, height: usize, bytes: &[u8]) -> Image {
        assert_eq!(bytes.len(), width * height * 3);
        Image {
            width,
            height,
            data: bytes.iter().map(|b| *b as f64 / 255.0).collect(),
        }
    }

    /// Save as PNG or PPM depending on the file extension.
    pub fn save(&self, path: &Path) -> Result<()> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("ppm") => self.save_ppm(path),
            _ => self.save_png(path),
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.to_u8())
            .expect("buffer size matches dimensions");
        buf.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    pub fn save_ppm(&self, path: &Path) -> Result<()> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.to_u8());
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Image> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("ppm") => Image::load_ppm(path),
            _ => Image::load_png(path),
        }
    }

    pub fn load_png(path: &Path) -> Result<Image> {
        let img = image::open(path)?.to_rgb8();
        Ok(Image::from_u8(
            img.width() as usize,
            img.height() as usize,
            img.as_raw(),
        ))
    }

    pub fn load_ppm(path: &Path) -> Result<Image> {
        let bytes = std::fs::read(path)?;
        let header_err = || Error::Format(format!("bad ppm header in {}", path.display()));
        // P6 <w> <h> <max>\n followed by binary samples.
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 && pos < bytes.len() {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            fields.push(&bytes[start..pos]);
        }
        if fields.len() < 4 || fields[0] != b"P6" {
            return Err(header_err());
        }
        let parse = |b: &[u8]| -> Result<usize> {
            std::str::from_utf8(b)
                .ok()
                .and_then(|s| s.parse().ok())
                .ok_or_else(header_err)
        };
        let (w, h, maxv) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
        if maxv != 255 {
            return Err(Error::Format("ppm max value must be 255".into()));
        }
        pos += 1; // single whitespace after header
        let need = w * h * 3;
        if bytes.len() < pos + need {
            return Err(Error::Format("ppm payload truncated".into()));
        }
        Ok(Image::from_u8(w, h, &bytes[pos..pos + need]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient_image() -> Image {
        let mut img = Image::new(9, 5);
        for y in 0..5 {
            for x in 0..9 {
                img.set_pixel(x, y, [x as f64 / 8.0, y as f64 / 4.0, 0.5]);
            }
        }
        img
    }

    #[test]
    fn png_roundtrip_preserves_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let img = gradient_image();
        img.save(&path).unwrap();
        let back = Image::load(&path).unwrap();
        assert_eq!(img.to_u8(), back.to_u8());
    }

    #[test]
    fn ppm_roundtrip_preserves_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ppm");
        let img = gradient_image();
        img.save(&path).unwrap();
        let back = Image::load(&path).unwrap();
        assert_eq!(img.to_u8(), back.to_u8());
    }
}
