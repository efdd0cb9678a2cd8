//! RGB images in [0,1] and binary PPM (P6) encoding.

use crate::error::{config, Result};

pub type Color = [f64; 3];

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<Color>,
}

impl Image {
    pub fn filled(height: usize, width: usize, color: Color) -> Self {
        Self { height, width, pixels: vec![color; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, row: usize, col: usize) -> Color {
        self.pixels[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, color: Color) {
        self.pixels[row * self.width + col] = color.map(|v| v.clamp(0.0, 1.0));
    }

    pub fn pixels(&self) -> &[Color] {
        &self.pixels
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.reserve(self.pixels.len() * 3);
        for px in &self.pixels {
            for v in px {
                out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
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
                return config("truncated PPM header");
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        pos += 1;
        if fields[0] != "P6" || fields[3] != "255" {
            return config("only binary 8-bit PPM (P6, maxval 255) is supported");
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|_| crate::IsacError::Config(format!("bad PPM size '{s}'")));
        let (width, height) = (parse(&fields[1])?, parse(&fields[2])?);
        let data = bytes.get(pos..pos + width * height * 3).ok_or_else(|| crate::IsacError::Config("truncated PPM data".into()))?;
        let pixels = data.chunks_exact(3).map(|c| [c[0], c[1], c[2]].map(|v| v as f64 / 255.0)).collect();
        Ok(Self { height, width, pixels })
    }

    /// The image as it reads back after an 8-bit round trip.
    pub fn quantized(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            pixels: self
                .pixels
                .iter()
                .map(|px| px.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0))
                .collect(),
        }
    }
}

pub fn color_distance(a: Color, b: Color) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip() {
        let mut img = Image::filled(2, 3, [0.1, 0.2, 0.3]);
        img.set(1, 2, [1.0, 0.0, 0.5]);
        let back = Image::from_ppm(&img.to_ppm()).unwrap();
        assert_eq!(back, img.quantized());
        assert_eq!(&img.to_ppm()[..11], b"P6\n3 2\n255\n");
        assert!(Image::from_ppm(b"P3\n1 1\n255\n").is_err());
    }
}
