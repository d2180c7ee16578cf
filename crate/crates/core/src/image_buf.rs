//! RGB image container used for UV textures, renders, and reference portraits.
//!
//! Pixels are `f64` in `[0,1]`, row-major, origin at the top-left. PNG files
//! are 8-bit RGB; quantization is `round(x * 255)` so identical buffers always
//! produce identical bytes.

use std::path::Path;

use ndarray::Array3;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuf {
    /// (height, width, 3), values in [0,1].
    pub pixels: Array3<f64>,
}

/// UV textures share the image representation; the type name marks intent.
pub type UvTexture = ImageBuf;

impl ImageBuf {
    pub fn new(pixels: Array3<f64>) -> Result<Self> {
        if pixels.shape()[2] != 3 {
            return Err(Error::shape("ImageBuf::new", "(_, _, 3)", format!("{:?}", pixels.shape())));
        }
        if pixels.shape()[0] == 0 || pixels.shape()[1] == 0 {
            return Err(Error::invalid("pixels", "image must be at least 1x1"));
        }
        if !pixels.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
            return Err(Error::invalid("pixels", "values must be finite and within [0,1]"));
        }
        Ok(Self { pixels })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let mut pixels = Array3::zeros((height, width, 3));
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    pixels[[y, x, c]] = rgb[c];
                }
            }
        }
        Self { pixels }
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn get(&self, y: usize, x: usize) -> [f64; 3] {
        [self.pixels[[y, x, 0]], self.pixels[[y, x, 1]], self.pixels[[y, x, 2]]]
    }

    pub fn set(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        for c in 0..3 {
            self.pixels[[y, x, c]] = rgb[c];
        }
    }

    /// Nearest-neighbor resize.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Self {
        let (h, w) = (self.height(), self.width());
        let mut out = Array3::zeros((height, width, 3));
        for y in 0..height {
            // pixel-center mapping, clamped to the source grid
            let sy = (((y as f64 + 0.5) * h as f64 / height as f64).floor() as usize).min(h - 1);
            for x in 0..width {
                let sx = (((x as f64 + 0.5) * w as f64 / width as f64).floor() as usize).min(w - 1);
                for c in 0..3 {
                    out[[y, x, c]] = self.pixels[[sy, sx, c]];
                }
            }
        }
        Self { pixels: out }
    }

    /// Box-average downsample to exactly (height, width). Source dimensions
    /// must be integer multiples of the target.
    pub fn downsample_avg(&self, height: usize, width: usize) -> Result<Self> {
        let (h, w) = (self.height(), self.width());
        if h % height != 0 || w % width != 0 {
            return Err(Error::invalid(
                "target size",
                format!("{h}x{w} is not an integer multiple of {height}x{width}"),
            ));
        }
        let (fy, fx) = (h / height, w / width);
        let norm = (fy * fx) as f64;
        let mut out = Array3::zeros((height, width, 3));
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    let mut acc = 0.0;
                    for dy in 0..fy {
                        for dx in 0..fx {
                            acc += self.pixels[[y * fy + dy, x * fx + dx, c]];
                        }
                    }
                    out[[y, x, c]] = acc / norm;
                }
            }
        }
        Ok(Self { pixels: out })
    }

    /// Pixel-exact crop of rows [y0, y1) and columns [x0, x1).
    pub fn crop(&self, y0: usize, y1: usize, x0: usize, x1: usize) -> Result<Self> {
        if y1 <= y0 || x1 <= x0 || y1 > self.height() || x1 > self.width() {
            return Err(Error::invalid(
                "crop rectangle",
                format!("[{y0},{y1})x[{x0},{x1}) outside {}x{}", self.height(), self.width()),
            ));
        }
        let mut out = Array3::zeros((y1 - y0, x1 - x0, 3));
        for y in y0..y1 {
            for x in x0..x1 {
                for c in 0..3 {
                    out[[y - y0, x - x0, c]] = self.pixels[[y, x, c]];
                }
            }
        }
        Ok(Self { pixels: out })
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != height * width * 3 {
            return Err(Error::shape(
                "ImageBuf::from_rgb8",
                format!("{} bytes", height * width * 3),
                format!("{} bytes", bytes.len()),
            ));
        }
        let pixels = Array3::from_shape_vec(
            (height, width, 3),
            bytes.iter().map(|&b| b as f64 / 255.0).collect(),
        )
        .expect("length checked above");
        Ok(Self { pixels })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let img = image::RgbImage::from_raw(self.width() as u32, self.height() as u32, self.to_rgb8())
            .expect("buffer sized to dimensions");
        img.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::ImageReader::open(path)
            .map_err(|e| Error::io(format!("open {}", path.display()), e))?
            .decode()?
            .into_rgb8();
        Self::from_rgb8(img.height() as usize, img.width() as usize, img.as_raw())
    }

    /// Binary PPM (P6), used for golden-file tests.
    pub fn save_ppm(&self, path: &Path) -> Result<()> {
        let mut data = format!("P6\n{} {}\n255\n", self.width(), self.height()).into_bytes();
        data.extend_from_slice(&self.to_rgb8());
        std::fs::write(path, data).map_err(|e| Error::io(format!("write {}", path.display()), e))
    }

    pub fn load_ppm(path: &Path) -> Result<Self> {
        let data = std::fs::read(path).map_err(|e| Error::io(format!("read {}", path.display()), e))?;
        parse_ppm(&data)
    }
}

fn parse_ppm(data: &[u8]) -> Result<ImageBuf> {
    let err = |msg: &str| Error::Parse { line: 0, message: format!("PPM: {msg}") };
    // header: magic, width, height, maxval, single whitespace, then raster
    let mut pos = 0usize;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < data.len() && data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < data.len() && data[pos] == b'#' {
            while pos < data.len() && data[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < data.len() && !data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(err("truncated header"));
        }
        fields.push(std::str::from_utf8(&data[start..pos]).map_err(|_| err("non-ascii header"))?);
    }
    if fields[0] != "P6" {
        return Err(err("not a P6 file"));
    }
    let width: usize = fields[1].parse().map_err(|_| err("bad width"))?;
    let height: usize = fields[2].parse().map_err(|_| err("bad height"))?;
    if fields[3] != "255" {
        return Err(err("only maxval 255 supported"));
    }
    pos += 1; // single whitespace after maxval
    let need = height * width * 3;
    if data.len() < pos + need {
        return Err(err("truncated raster"));
    }
    ImageBuf::from_rgb8(height, width, &data[pos..pos + need])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constructor_rejects_out_of_range() {
        let mut px = Array3::zeros((2, 2, 3));
        px[[0, 0, 0]] = 1.5;
        assert!(ImageBuf::new(px).is_err());
    }

    #[test]
    fn ppm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ppm");
        let mut img = ImageBuf::filled(3, 2, [0.0, 0.5, 1.0]);
        img.set(1, 1, [0.25, 0.75, 0.125]);
        img.save_ppm(&path).unwrap();
        let back = ImageBuf::load_ppm(&path).unwrap();
        assert_eq!(back.to_rgb8(), img.to_rgb8());
    }

    #[test]
    fn png_round_trip_is_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.png");
        let p2 = dir.path().join("b.png");
        let img = ImageBuf::filled(4, 5, [0.2, 0.4, 0.9]);
        img.save_png(&p1).unwrap();
        img.save_png(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        let back = ImageBuf::load_png(&p1).unwrap();
        assert_eq!(back.to_rgb8(), img.to_rgb8());
    }

    #[test]
    fn downsample_avg_exact_on_constant_blocks() {
        let mut img = ImageBuf::filled(4, 4, [0.0; 3]);
        for y in 0..2 {
            for x in 0..2 {
                img.set(y, x, [1.0, 1.0, 1.0]);
            }
        }
        let down = img.downsample_avg(2, 2).unwrap();
        assert_eq!(down.get(0, 0), [1.0, 1.0, 1.0]);
        assert_eq!(down.get(1, 1), [0.0, 0.0, 0.0]);
    }

    #[test]
    fn crop_is_pixel_exact() {
        let mut img = ImageBuf::filled(4, 4, [0.0; 3]);
        img.set(2, 3, [1.0, 0.5, 0.25]);
        let crop = img.crop(2, 4, 2, 4).unwrap();
        assert_eq!(crop.get(0, 1), [1.0, 0.5, 0.25]);
        assert!(img.crop(2, 2, 0, 1).is_err());
    }
}
