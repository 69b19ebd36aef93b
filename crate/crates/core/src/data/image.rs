use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A height × width × channels image with values in `[0, 1]`, row-major with
/// channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width * channels || pixels.is_empty() {
            return Err(Error::shape(
                "image",
                format!("{height}x{width}x{channels} needs {} values, got {}", height * width * channels, pixels.len()),
            ));
        }
        Ok(Image {
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn blank(side: usize) -> Self {
        Image {
            height: side,
            width: side,
            channels: 1,
            pixels: vec![0.0; side * side],
        }
    }

    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.pixels[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.pixels.clone(), &[self.height, self.width, self.channels]).expect("validated on construction")
    }

    pub fn l2_distance(&self, other: &Image) -> f64 {
        self.pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// Binary 16-bit grayscale PGM (`P5`, maxval 65535). Only one-channel
    /// images are supported.
    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        if self.channels != 1 {
            return Err(Error::Data("PGM output needs a single channel".into()));
        }
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        write!(out, "P5\n{} {}\n65535\n", self.width, self.height)?;
        for &v in &self.pixels {
            let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
            out.write_all(&q.to_be_bytes())?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_pgm(path: &Path) -> Result<Image> {
        let mut reader = BufReader::new(std::fs::File::open(path)?);
        let mut header = Vec::new();
        // magic, width, height, maxval; '#' comments allowed between them
        while header.len() < 4 {
            let mut line = String::new();
            if reader.read_line(&mut line)? == 0 {
                return Err(Error::Data(format!("{}: truncated PGM header", path.display())));
            }
            let line = line.split('#').next().unwrap_or("");
            header.extend(line.split_whitespace().map(str::to_string));
        }
        if header[0] != "P5" {
            return Err(Error::Data(format!("{}: not a binary PGM", path.display())));
        }
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::Data(format!("{}: bad PGM header field `{s}`", path.display())))
        };
        let (width, height, maxval) = (parse(&header[1])?, parse(&header[2])?, parse(&header[3])?);
        if maxval == 0 || maxval > 65535 {
            return Err(Error::Data(format!("{}: bad maxval {maxval}", path.display())));
        }
        let wide = maxval > 255;
        let mut raw = vec![0u8; width * height * if wide { 2 } else { 1 }];
        reader.read_exact(&mut raw)?;
        let pixels = if wide {
            raw.chunks(2)
                .map(|b| u16::from_be_bytes([b[0], b[1]]) as f64 / maxval as f64)
                .collect()
        } else {
            raw.iter().map(|&b| b as f64 / maxval as f64).collect()
        };
        Image::new(height, width, 1, pixels)
    }
}
