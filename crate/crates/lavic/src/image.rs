//! Square RGB rasters, binary PPM (P6) I/O, area-average resampling, and the
//! 1-global + 4-quadrant sub-image split.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Square 8-bit RGB raster. Pixels are row-major `[r, g, b]` triples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub side: usize,
    pub pixels: Vec<u8>,
}

impl Raster {
    pub fn filled(side: usize, rgb: [u8; 3]) -> Self {
        let mut pixels = Vec::with_capacity(side * side * 3);
        for _ in 0..side * side {
            pixels.extend_from_slice(&rgb);
        }
        Raster { side, pixels }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.side + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.side + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Number of pixel positions where two same-sized rasters differ.
    pub fn diff_pixels(&self, other: &Raster) -> usize {
        assert_eq!(self.side, other.side);
        (0..self.side * self.side)
            .filter(|&i| self.pixels[i * 3..i * 3 + 3] != other.pixels[i * 3..i * 3 + 3])
            .count()
    }

    /// Normalized channel values in `[0,1]`, flattened row-major as r,g,b.
    pub fn to_unit_floats(&self) -> Vec<f64> {
        self.pixels.iter().map(|&p| p as f64 / 255.0).collect()
    }

    pub fn load_ppm(path: &Path) -> Result<Raster> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        parse_ppm(&bytes).map_err(|msg| Error::Schema(format!("{}: {msg}", path.display())))
    }

    pub fn save_ppm(&self, path: &Path) -> Result<()> {
        let mut out = Vec::with_capacity(self.pixels.len() + 32);
        write!(out, "P6\n{} {}\n255\n", self.side, self.side).unwrap();
        out.extend_from_slice(&self.pixels);
        crate::cli::write_atomic(path, &out)
    }

    /// Area-average resample to `target` side. Exact fractional pixel overlap,
    /// so any source/target combination is supported.
    pub fn resample(&self, target: usize) -> Raster {
        if target == self.side {
            return self.clone();
        }
        let scale = self.side as f64 / target as f64;
        let mut out = Raster::filled(target, [0, 0, 0]);
        for ty in 0..target {
            for tx in 0..target {
                let x0 = tx as f64 * scale;
                let x1 = (tx + 1) as f64 * scale;
                let y0 = ty as f64 * scale;
                let y1 = (ty + 1) as f64 * scale;
                let mut acc = [0.0f64; 3];
                let mut area = 0.0;
                for sy in y0.floor() as usize..(y1.ceil() as usize).min(self.side) {
                    let hy = (y1.min((sy + 1) as f64) - y0.max(sy as f64)).max(0.0);
                    for sx in x0.floor() as usize..(x1.ceil() as usize).min(self.side) {
                        let wx = (x1.min((sx + 1) as f64) - x0.max(sx as f64)).max(0.0);
                        let w = wx * hy;
                        let p = self.get(sx, sy);
                        for c in 0..3 {
                            acc[c] += w * p[c] as f64;
                        }
                        area += w;
                    }
                }
                let rgb = [
                    (acc[0] / area).round() as u8,
                    (acc[1] / area).round() as u8,
                    (acc[2] / area).round() as u8,
                ];
                out.set(tx, ty, rgb);
            }
        }
        out
    }

    fn crop(&self, x0: usize, y0: usize, side: usize) -> Raster {
        let mut out = Raster::filled(side, [0, 0, 0]);
        for y in 0..side {
            for x in 0..side {
                out.set(x, y, self.get(x0 + x, y0 + y));
            }
        }
        out
    }
}

fn parse_ppm(bytes: &[u8]) -> std::result::Result<Raster, String> {
    let mut pos = 0;
    let mut token = |bytes: &[u8]| -> std::result::Result<String, String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token(bytes)? != "P6" {
        return Err("not a P6 ppm".into());
    }
    let w: usize = token(bytes)?.parse().map_err(|_| "bad width")?;
    let h: usize = token(bytes)?.parse().map_err(|_| "bad height")?;
    let maxv: usize = token(bytes)?.parse().map_err(|_| "bad maxval")?;
    if w != h {
        return Err(format!("image must be square, got {w}x{h}"));
    }
    if maxv != 255 {
        return Err("only 8-bit ppm supported".into());
    }
    pos += 1; // single whitespace after maxval
    let need = w * h * 3;
    if bytes.len() < pos + need {
        return Err("truncated pixel data".into());
    }
    Ok(Raster {
        side: w,
        pixels: bytes[pos..pos + need].to_vec(),
    })
}

/// Exactly 5 square rasters: global resample then TL, TR, BL, BR quadrants.
#[derive(Debug, Clone)]
pub struct SubImageSet {
    pub sub_images: [Raster; 5],
}

/// Split into 1 global + 4 quadrant sub-images, each resampled to `vision_side`.
pub fn split_sub_images(image: &Raster, vision_side: usize) -> Result<SubImageSet> {
    if image.side % 2 != 0 {
        return Err(Error::Schema(format!(
            "sub-image split needs an even side, got {}",
            image.side
        )));
    }
    let half = image.side / 2;
    let sub_images = [
        image.resample(vision_side),
        image.crop(0, 0, half).resample(vision_side),
        image.crop(half, 0, half).resample(vision_side),
        image.crop(0, half, half).resample(vision_side),
        image.crop(half, half, half).resample(vision_side),
    ];
    Ok(SubImageSet { sub_images })
}
