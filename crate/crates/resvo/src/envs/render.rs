//! RGB frames and binary PPM (P6) output.

use std::io::{self, Write};
use std::path::Path;

/// Width x height RGB pixel grid, one pixel per map cell.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

impl Frame {
    pub fn new(width: usize, height: usize) -> Self {
        Frame { width, height, rgb: vec![0; 3 * width * height] }
    }

    pub fn set(&mut self, x: usize, y: usize, color: [u8; 3]) {
        let i = 3 * (y * self.width + x);
        self.rgb[i..i + 3].copy_from_slice(&color);
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    /// Serializes as binary portable pixmap.
    pub fn write_ppm<W: Write>(&self, mut w: W) -> io::Result<()> {
        write!(w, "P6\n{} {}\n255\n", self.width, self.height)?;
        w.write_all(&self.rgb)
    }

    pub fn save_ppm(&self, path: &Path) -> io::Result<()> {
        let mut buf = Vec::with_capacity(self.rgb.len() + 32);
        self.write_ppm(&mut buf)?;
        crate::metrics::write_atomic(path, &buf)
    }
}
