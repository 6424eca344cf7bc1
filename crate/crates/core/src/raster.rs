//! 8-bit grayscale images and binary PGM (P5) encoding.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        Self {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        encode_pgm(self.width, self.height, &self.pixels)
    }

    /// Pixels scaled to `[0, 1]`, row-major.
    pub fn to_unit_f64(&self) -> Vec<f64> {
        self.pixels.iter().map(|&p| p as f64 / 255.0).collect()
    }

    /// Blends `value` into pixel `(x, y)` with coverage `alpha ∈ [0,1]`.
    pub fn blend(&mut self, x: i64, y: i64, value: f64, alpha: f64) {
        if x < 0 || y < 0 || x as usize >= self.width || y as usize >= self.height || alpha <= 0.0 {
            return;
        }
        let i = y as usize * self.width + x as usize;
        let a = alpha.min(1.0);
        let cur = self.pixels[i] as f64;
        self.pixels[i] = (cur * (1.0 - a) + value * a).round().clamp(0.0, 255.0) as u8;
    }

    /// Anti-aliased thick line segment in pixel coordinates.
    pub fn draw_segment(&mut self, a: [f64; 2], b: [f64; 2], thickness: f64, value: f64) {
        let r = thickness / 2.0;
        let x0 = (a[0].min(b[0]) - r - 1.0).floor() as i64;
        let x1 = (a[0].max(b[0]) + r + 1.0).ceil() as i64;
        let y0 = (a[1].min(b[1]) - r - 1.0).floor() as i64;
        let y1 = (a[1].max(b[1]) + r + 1.0).ceil() as i64;
        for y in y0..=y1 {
            for x in x0..=x1 {
                let p = [x as f64 + 0.5, y as f64 + 0.5];
                let d = point_segment_distance(p, a, b);
                let coverage = (r + 0.5 - d).clamp(0.0, 1.0);
                self.blend(x, y, value, coverage);
            }
        }
    }
}

pub fn point_segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ap = [p[0] - a[0], p[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 > 0.0 {
        ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let q = [a[0] + t * ab[0] - p[0], a[1] + t * ab[1] - p[1]];
    (q[0] * q[0] + q[1] * q[1]).sqrt()
}

pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height, "pgm: pixel count mismatch");
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

pub fn decode_pgm(bytes: &[u8], origin: &std::path::Path) -> Result<GrayImage> {
    let bad = |line: usize, message: &str| Error::Parse {
        path: origin.to_path_buf(),
        line,
        message: message.to_string(),
    };
    // Header: magic, width, height, maxval separated by whitespace, then one byte.
    let mut fields = Vec::new();
    let mut pos = 0;
    let mut line = 1;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            if bytes[pos] == b'\n' {
                line += 1;
            }
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
            return Err(bad(line, "truncated PGM header"));
        }
        fields.push(
            std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad(line, "non-ascii header"))?,
        );
    }
    if fields[0] != "P5" {
        return Err(bad(1, "not a binary PGM (P5)"));
    }
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| bad(line, "bad PGM dimension"))
    };
    let (width, height, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
    if maxval != 255 {
        return Err(bad(line, "only 8-bit PGM is supported"));
    }
    pos += 1;
    let pixels = bytes
        .get(pos..pos + width * height)
        .ok_or_else(|| bad(line, "truncated PGM data"))?;
    Ok(GrayImage {
        width,
        height,
        pixels: pixels.to_vec(),
    })
}
