//! RGB float images and binary PPM (P6) IO.

use std::io::{BufRead, Read, Write};

use crate::error::{ensure, Error, Result};

/// Row-major interleaved RGB image with channel values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        ensure!(
            data.len() == width * height * 3,
            "image {width}x{height} needs {} values, got {}",
            width * height * 3,
            data.len()
        );
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Planar `[3, H, W]` copy, the layout the convolutional networks take.
    pub fn to_chw(&self) -> Vec<f32> {
        let plane = self.width * self.height;
        let mut out = vec![0.0; 3 * plane];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * plane + i] = px[c];
            }
        }
        out
    }

    pub fn from_chw(width: usize, height: usize, chw: &[f32]) -> Result<Self> {
        let plane = width * height;
        ensure!(chw.len() == 3 * plane, "planar buffer has wrong length");
        let data = (0..plane)
            .flat_map(|i| [chw[i], chw[plane + i], chw[2 * plane + i]])
            .collect();
        Self::new(width, height, data)
    }

    /// Quantizes to 8 bits per channel (round to nearest, clamped).
    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_u8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(width, height, bytes.iter().map(|&b| b as f32 / 255.0).collect())
    }

    /// Bilinear downscale/upscale with corner-aligned pixel centres.
    pub fn resized(&self, width: usize, height: usize) -> RgbImage {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let map = |o: usize, n_out: usize, n_in: usize| -> f64 {
            if n_out <= 1 {
                (n_in as f64 - 1.0) / 2.0
            } else {
                o as f64 * (n_in as f64 - 1.0) / (n_out as f64 - 1.0)
            }
        };
        let mut out = RgbImage::filled(width, height, [0.0; 3]);
        for y in 0..height {
            for x in 0..width {
                let px = self.sample_bilinear(map(x, width, self.width), map(y, height, self.height));
                out.set_pixel(x, y, px);
            }
        }
        out
    }

    /// Bilinear sample at continuous pixel coordinates; integer coordinates
    /// hit pixel centres. Coordinates are clamped to the image.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> [f32; 3] {
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let y = y.clamp(0.0, (self.height - 1) as f64);
        let (x0, y0) = (x.floor() as usize, y.floor() as usize);
        let (fx, fy) = (x - x0 as f64, y - y0 as f64);
        if fx == 0.0 && fy == 0.0 {
            return self.pixel(x0, y0);
        }
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let (p00, p10, p01, p11) = (
            self.pixel(x0, y0),
            self.pixel(x1, y0),
            self.pixel(x0, y1),
            self.pixel(x1, y1),
        );
        let mut out = [0.0f32; 3];
        for c in 0..3 {
            let top = p00[c] as f64 * (1.0 - fx) + p10[c] as f64 * fx;
            let bottom = p01[c] as f64 * (1.0 - fx) + p11[c] as f64 * fx;
            out[c] = (top * (1.0 - fy) + bottom * fy) as f32;
        }
        out
    }
}

pub fn write_ppm(image: &RgbImage, mut w: impl Write) -> std::io::Result<()> {
    write!(w, "P6\n{} {}\n255\n", image.width, image.height)?;
    w.write_all(&image.to_u8())
}

pub fn encode_ppm(image: &RgbImage) -> Vec<u8> {
    let mut buf = Vec::with_capacity(image.data.len() + 32);
    write_ppm(image, &mut buf).expect("writing to a Vec cannot fail");
    buf
}

fn ppm_token(r: &mut impl BufRead) -> Result<String> {
    let mut tok = Vec::new();
    loop {
        let mut byte = [0u8];
        if r.read(&mut byte).map_err(|e| Error::Format(e.to_string()))? == 0 {
            break;
        }
        match byte[0] {
            b'#' if tok.is_empty() => {
                let mut line = String::new();
                r.read_line(&mut line).map_err(|e| Error::Format(e.to_string()))?;
            }
            c if c.is_ascii_whitespace() => {
                if !tok.is_empty() {
                    break;
                }
            }
            c => tok.push(c),
        }
    }
    ensure!(!tok.is_empty(), "ppm: truncated header");
    String::from_utf8(tok).map_err(|_| Error::Format("ppm: non-ascii header".into()))
}

/// Decodes a binary P6 image with maxval 255.
pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage> {
    let mut r = std::io::BufReader::new(bytes);
    let magic = ppm_token(&mut r)?;
    if magic != "P6" {
        return Err(Error::Format(format!("ppm: expected magic P6, got {magic}")));
    }
    let mut num = |what: &str| -> Result<usize> {
        let t = ppm_token(&mut r)?;
        t.parse()
            .map_err(|_| Error::Format(format!("ppm: bad {what} {t:?}")))
    };
    let (width, height, maxval) = (num("width")?, num("height")?, num("maxval")?);
    if maxval != 255 {
        return Err(Error::Format(format!("ppm: maxval {maxval} unsupported")));
    }
    let mut data = Vec::new();
    r.read_to_end(&mut data)
        .map_err(|e| Error::Format(e.to_string()))?;
    if data.len() != width * height * 3 {
        return Err(Error::Format(format!(
            "ppm: expected {} bytes of pixels, found {}",
            width * height * 3,
            data.len()
        )));
    }
    RgbImage::from_u8(width, height, &data)
}
