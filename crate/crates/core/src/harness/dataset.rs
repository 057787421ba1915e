//! `DGS1` image files and the procedural toy dataset.
//!
//! Layout: magic `DGS1`, little-endian u32 count, height, width, channels,
//! then `count * H * W * C` bytes, channel-last row-major per image.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DGS1";
pub const HEADER_LEN: usize = 20;

pub fn byte_to_float(v: u8) -> f64 {
    v as f64 / 127.5 - 1.0
}

pub fn float_to_byte(x: f64) -> u8 {
    (x.clamp(-1.0, 1.0) * 127.5 + 127.5).round() as u8
}

/// Encodes `(N, C, H, W)` images in [-1, 1].
pub fn encode_dataset(images: &Tensor) -> Result<Vec<u8>> {
    let s = images.shape();
    if s.len() != 4 || s[1..].contains(&0) {
        return Err(Error::Dataset(format!("expected (N, C, H, W) with positive C, H, W, got {s:?}")));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let mut out = Vec::with_capacity(HEADER_LEN + n * c * h * w);
    out.extend_from_slice(MAGIC);
    for v in [n, h, w, c] {
        let v = u32::try_from(v).map_err(|_| Error::Dataset(format!("extent {v} exceeds u32")))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    let d = images.data();
    for i in 0..n {
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    out.push(float_to_byte(d[((i * c + ch) * h + y) * w + x]));
                }
            }
        }
    }
    Ok(out)
}

/// Raw header fields `(count, height, width, channels)` after validation.
pub fn decode_header(bytes: &[u8]) -> Result<(usize, usize, usize, usize)> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Dataset(format!(
            "header needs {HEADER_LEN} bytes, file has {}",
            bytes.len()
        )));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Dataset(format!("bad magic {:?}, expected DGS1", &bytes[..4])));
    }
    let field = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (n, h, w, c) = (field(0), field(1), field(2), field(3));
    if n == 0 || h == 0 || w == 0 || c == 0 {
        return Err(Error::Dataset(format!(
            "zero dimension in header (count {n}, height {h}, width {w}, channels {c})"
        )));
    }
    let expected = (n as u128) * (h as u128) * (w as u128) * (c as u128) + HEADER_LEN as u128;
    if bytes.len() as u128 != expected {
        return Err(Error::Dataset(format!(
            "expected {expected} bytes for {n} images of {h}x{w}x{c}, file has {}",
            bytes.len()
        )));
    }
    Ok((n, h, w, c))
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Tensor> {
    let (n, h, w, c) = decode_header(bytes)?;
    let px = &bytes[HEADER_LEN..];
    let mut data = vec![0.0; n * c * h * w];
    let mut k = 0;
    for i in 0..n {
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    data[((i * c + ch) * h + y) * w + x] = byte_to_float(px[k]);
                    k += 1;
                }
            }
        }
    }
    Ok(Tensor::from_vec(&[n, c, h, w], data))
}

pub fn read_dataset(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dataset(&bytes).map_err(|e| match e {
        Error::Dataset(m) => Error::Dataset(format!("{}: {m}", path.display())),
        e => e,
    })
}

pub fn write_dataset(path: &Path, images: &Tensor) -> Result<()> {
    let bytes = encode_dataset(images)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn lerp(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

fn rand_color<R: Rng>(rng: &mut R) -> [f64; 3] {
    [rng.gen(), rng.gen(), rng.gen()]
}

enum Shape {
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64 },
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Ellipse { cx, cy, rx, ry } => {
                let (dx, dy) = ((x - cx) / rx, (y - cy) / ry);
                dx * dx + dy * dy <= 1.0
            }
            Shape::Rect { x0, y0, x1, y1 } => x >= x0 && x <= x1 && y >= y0 && y <= y1,
        }
    }
}

const SUPERSAMPLE: usize = 4;

/// Renders `count` RGB images of side `size`: a linear colour gradient
/// with one to three filled ellipses or rectangles, anti-aliased by 4x4
/// supersampling. Values are in [-1, 1] and already quantized to bytes.
pub fn render_toy(count: usize, size: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = vec![0.0; count * 3 * size * size];
    let s = size as f64;
    for i in 0..count {
        let (c0, c1) = (rand_color(&mut rng), rand_color(&mut rng));
        let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let (gx, gy) = (angle.cos(), angle.sin());
        let nshapes = rng.gen_range(1..=3);
        let shapes: Vec<(Shape, [f64; 3])> = (0..nshapes)
            .map(|_| {
                let color = rand_color(&mut rng);
                let shape = if rng.gen_bool(0.5) {
                    Shape::Ellipse {
                        cx: rng.gen_range(0.2..0.8) * s,
                        cy: rng.gen_range(0.2..0.8) * s,
                        rx: rng.gen_range(0.1..0.35) * s,
                        ry: rng.gen_range(0.1..0.35) * s,
                    }
                } else {
                    let (x0, y0) = (rng.gen_range(0.0..0.6) * s, rng.gen_range(0.0..0.6) * s);
                    Shape::Rect {
                        x0,
                        y0,
                        x1: x0 + rng.gen_range(0.2..0.4) * s,
                        y1: y0 + rng.gen_range(0.2..0.4) * s,
                    }
                };
                (shape, color)
            })
            .collect();
        for y in 0..size {
            for x in 0..size {
                let mut acc = [0.0; 3];
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let px = x as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64;
                        let py = y as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64;
                        let t = ((px / s - 0.5) * gx + (py / s - 0.5) * gy) * std::f64::consts::FRAC_1_SQRT_2 + 0.5;
                        let mut col = lerp(c0, c1, t.clamp(0.0, 1.0));
                        for (shape, sc) in &shapes {
                            if shape.contains(px, py) {
                                col = *sc;
                            }
                        }
                        for k in 0..3 {
                            acc[k] += col[k];
                        }
                    }
                }
                let norm = (SUPERSAMPLE * SUPERSAMPLE) as f64;
                for (k, a) in acc.iter().enumerate() {
                    let v = (a / norm * 255.0).round().clamp(0.0, 255.0) as u8;
                    data[((i * 3 + k) * size + y) * size + x] = byte_to_float(v);
                }
            }
        }
    }
    Tensor::from_vec(&[count, 3, size, size], data)
}

pub fn gen_toy_dataset(count: usize, size: usize, seed: u64, path: &Path) -> Result<()> {
    if count == 0 || size == 0 {
        return Err(Error::Dataset("count and size must be positive".into()));
    }
    write_dataset(path, &render_toy(count, size, seed))
}
