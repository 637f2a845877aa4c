//! Per-pixel class labels and their on-disk image formats.
//!
//! A [`LabelGrid`] stores one `u8` class id per pixel: `0` means unlabeled,
//! `1..=K` are classes. Grids serialize as binary (P5) PGM with the class id
//! as the gray value and `maxval` at least the class count, and colorized
//! maps export as binary (P6) PPM through a fixed palette.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Fixed palette for colorized class maps; class `k` uses entry `k - 1`
/// (cycling past the end), class 0 renders black.
pub const PALETTE: [(u8, u8, u8); 12] = [
    (230, 25, 75),
    (60, 180, 75),
    (0, 130, 200),
    (255, 225, 25),
    (245, 130, 48),
    (145, 30, 180),
    (70, 240, 240),
    (240, 50, 230),
    (210, 245, 60),
    (250, 190, 190),
    (0, 128, 128),
    (128, 128, 0),
];

/// Rectangular grid of class ids, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelGrid {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelGrid {
    /// Fully unlabeled grid.
    pub fn unlabeled(height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!("label grid {height}x{width} is empty")));
        }
        Ok(Self { height, width, data: vec![0; height * width] })
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::Shape(format!(
                "label grid {height}x{width} does not match {} pixels",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.data[i * self.width + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: u8) {
        self.data[i * self.width + j] = v;
    }

    /// Largest class id present (0 when fully unlabeled).
    pub fn max_label(&self) -> u8 {
        self.data.iter().copied().max().unwrap_or(0)
    }

    /// Number of labeled (non-zero) pixels.
    pub fn labeled_count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// Pixel count per class id `1..=k`.
    pub fn class_counts(&self, k: usize) -> Vec<usize> {
        let mut counts = vec![0usize; k];
        for &v in &self.data {
            if v != 0 && (v as usize) <= k {
                counts[v as usize - 1] += 1;
            }
        }
        counts
    }

    /// Mirror left-right.
    pub fn hflip(&self) -> Self {
        let mut out = self.clone();
        for i in 0..self.height {
            for j in 0..self.width {
                out.data[i * self.width + j] = self.data[i * self.width + (self.width - 1 - j)];
            }
        }
        out
    }

    /// Mirror top-bottom.
    pub fn vflip(&self) -> Self {
        let mut out = self.clone();
        for i in 0..self.height {
            let src = (self.height - 1 - i) * self.width;
            let dst = i * self.width;
            out.data[dst..dst + self.width].copy_from_slice(&self.data[src..src + self.width]);
        }
        out
    }

    /// Rectangular window `[top, top+height) x [left, left+width)`.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 || top + height > self.height || left + width > self.width {
            return Err(Error::Shape(format!(
                "crop [{top}+{height}, {left}+{width}] exceeds grid {}x{}",
                self.height, self.width
            )));
        }
        let mut out = Self::unlabeled(height, width)?;
        for i in 0..height {
            let src = (top + i) * self.width + left;
            out.data[i * width..(i + 1) * width].copy_from_slice(&self.data[src..src + width]);
        }
        Ok(out)
    }

    /// Write as binary PGM with the given `maxval` (must cover every pixel).
    pub fn save_pgm<P: AsRef<Path>>(&self, path: P, maxval: u8) -> Result<()> {
        if maxval == 0 {
            return Err(Error::Format("PGM maxval must be positive".into()));
        }
        if self.max_label() > maxval {
            return Err(Error::Format(format!(
                "PGM maxval {maxval} is below the largest class id {}",
                self.max_label()
            )));
        }
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        write!(f, "P5\n{} {}\n{}\n", self.width, self.height, maxval)?;
        f.write_all(&self.data)?;
        f.flush()?;
        Ok(())
    }

    /// Read a binary PGM class map. Returns the grid and its `maxval`.
    pub fn load_pgm<P: AsRef<Path>>(path: P) -> Result<(Self, u8)> {
        let bytes = std::fs::read(path)?;
        Self::parse_pgm(&bytes)
    }

    /// Parse binary PGM bytes (P5, whitespace and `#` comments in the header).
    pub fn parse_pgm(bytes: &[u8]) -> Result<(Self, u8)> {
        let mut pos = 0usize;
        let mut token = |bytes: &[u8]| -> Result<String> {
            // Skip whitespace and comment lines between header tokens.
            loop {
                while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                    pos += 1;
                }
                if pos < bytes.len() && bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                    continue;
                }
                break;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Format("PGM header truncated".into()));
            }
            Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
        };

        if token(bytes)? != "P5" {
            return Err(Error::Format("not a binary PGM (P5) file".into()));
        }
        let width: usize = token(bytes)?
            .parse()
            .map_err(|_| Error::Format("PGM width is not a number".into()))?;
        let height: usize = token(bytes)?
            .parse()
            .map_err(|_| Error::Format("PGM height is not a number".into()))?;
        let maxval: u32 = token(bytes)?
            .parse()
            .map_err(|_| Error::Format("PGM maxval is not a number".into()))?;
        if !(1..=255).contains(&maxval) {
            return Err(Error::Format(format!(
                "PGM maxval {maxval} unsupported; class maps are single-byte"
            )));
        }
        // Exactly one whitespace byte separates the header from the raster.
        if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
            return Err(Error::Format("PGM raster missing".into()));
        }
        pos += 1;
        let need = height
            .checked_mul(width)
            .ok_or_else(|| Error::Format("PGM dimensions overflow".into()))?;
        if height == 0 || width == 0 {
            return Err(Error::Format("PGM with zero dimension".into()));
        }
        let raster = &bytes[pos..];
        if raster.len() != need {
            return Err(Error::Format(format!(
                "PGM raster has {} bytes, expected {need}",
                raster.len()
            )));
        }
        let maxval = maxval as u8;
        if let Some(&v) = raster.iter().find(|&&v| v > maxval) {
            return Err(Error::Format(format!("PGM pixel {v} exceeds maxval {maxval}")));
        }
        Ok((Self { height, width, data: raster.to_vec() }, maxval))
    }

    /// Write a colorized class map as binary PPM using [`PALETTE`].
    pub fn save_ppm<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        write!(f, "P6\n{} {}\n255\n", self.width, self.height)?;
        let mut row = Vec::with_capacity(self.width * 3);
        for i in 0..self.height {
            row.clear();
            for j in 0..self.width {
                let v = self.get(i, j);
                let (r, g, b) = if v == 0 {
                    (0, 0, 0)
                } else {
                    PALETTE[(v as usize - 1) % PALETTE.len()]
                };
                row.extend_from_slice(&[r, g, b]);
            }
            f.write_all(&row)?;
        }
        f.flush()?;
        Ok(())
    }
}
