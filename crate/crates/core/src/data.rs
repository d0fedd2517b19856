//! Synthetic segmentation data and on-disk formats.
//!
//! Every sample carries a background, a large disk (easy class), a thin
//! annulus (thin structure) and a small square that is present with
//! probability 0.7, so absent-class cases occur naturally. Images are
//! per-class base colors plus a random linear shading gradient and pixel
//! noise, clamped to [0,1]. Generation is fully determined by the seed.
//!
//! Binary formats (little-endian):
//! - image: magic `SIMG`, u32 version, u32 dtype (1 = f32), u32 channels,
//!   u32 height, u32 width, then C*H*W f32 values row-major;
//! - mask: magic `SMSK`, u32 version, u32 dtype (2 = u8), u32 height,
//!   u32 width, then H*W class ids.
//!
//! Text converters to portable pixmap/graymap (P3/P2) are provided for
//! eyeballing samples with stock viewers.

use crate::error::{Result, SacError};
use crate::tensor::{Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

pub const IMAGE_MAGIC: &[u8; 4] = b"SIMG";
pub const MASK_MAGIC: &[u8; 4] = b"SMSK";
pub const FORMAT_VERSION: u32 = 1;

/// One synthetic sample: a (3,S,S) image in [0,1] and per-pixel class ids.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub size: usize,
    /// Row-major (3,S,S) values.
    pub image: Vec<f64>,
    /// Row-major (S,S) class ids, all `< classes`.
    pub mask: Vec<u8>,
}

impl SyntheticSample {
    pub fn image_tensor<F: Scalar>(&self) -> Tensor<F> {
        Tensor::new(
            vec![1, 3, self.size, self.size],
            self.image.iter().map(|&v| F::from_real(v)).collect(),
        )
        .expect("image buffer sized by construction")
    }
}

/// Base colors; classes beyond the table reuse the last entry.
const CLASS_COLORS: [[f64; 3]; 4] = [
    [0.20, 0.25, 0.30], // background
    [0.70, 0.45, 0.30], // disk
    [0.35, 0.70, 0.50], // annulus
    [0.85, 0.75, 0.30], // square
];

/// Deterministic synthetic dataset. `classes` in 2..=4 controls how many of
/// the three foreground shapes are painted (disk, then annulus, then square).
pub fn gen_synthetic(
    seed: u64,
    count: usize,
    size: usize,
    classes: usize,
) -> Result<Vec<SyntheticSample>> {
    if classes < 2 || classes > 4 {
        return Err(SacError::InvalidArgument {
            op: "gen_synthetic",
            reason: format!("classes {classes} outside 2..=4"),
        });
    }
    if size < 16 {
        return Err(SacError::InvalidArgument {
            op: "gen_synthetic",
            reason: format!("size {size} below the 16-pixel minimum"),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let mut mask = vec![0u8; size * size];

        // large disk, class 1
        let dcx = rng.gen_range(0.30..0.70) * s;
        let dcy = rng.gen_range(0.30..0.70) * s;
        let dr = rng.gen_range(0.20..0.30) * s;
        paint(&mut mask, size, 1, |y, x| {
            let (dy, dx) = (y - dcy, x - dcx);
            dy * dy + dx * dx <= dr * dr
        });

        // thin annulus, class 2
        if classes >= 3 {
            let acx = rng.gen_range(0.35..0.65) * s;
            let acy = rng.gen_range(0.35..0.65) * s;
            let ar = rng.gen_range(0.28..0.40) * s;
            let at = rng.gen_range(0.9..1.5);
            paint(&mut mask, size, 2, |y, x| {
                let (dy, dx) = (y - acy, x - acx);
                ((dy * dy + dx * dx).sqrt() - ar).abs() <= at
            });
        }

        // small square, class 3, present with probability 0.7
        if classes >= 4 {
            let present: f64 = rng.gen();
            let side = rng.gen_range(0.12..0.20) * s;
            let sx = rng.gen_range(0.1..(0.9 - side / s)) * s;
            let sy = rng.gen_range(0.1..(0.9 - side / s)) * s;
            if present < 0.7 {
                paint(&mut mask, size, 3, |y, x| {
                    y >= sy && y < sy + side && x >= sx && x < sx + side
                });
            }
        }

        // shading gradient + per-class jitter + pixel noise
        let gx: f64 = rng.gen_range(-0.12..0.12);
        let gy: f64 = rng.gen_range(-0.12..0.12);
        let mut jitter = [[0.0f64; 3]; 4];
        for row in jitter.iter_mut().take(classes) {
            for ch in row.iter_mut() {
                *ch = rng.gen_range(-0.05..0.05);
            }
        }
        let mut image = vec![0.0f64; 3 * size * size];
        for y in 0..size {
            for x in 0..size {
                let c = mask[y * size + x] as usize;
                let shade = gx * (x as f64 / s) + gy * (y as f64 / s);
                for ch in 0..3 {
                    let noise: f64 = rng.gen_range(-0.05..0.05);
                    let v = CLASS_COLORS[c][ch] + jitter[c][ch] + shade + noise;
                    image[(ch * size + y) * size + x] = v.clamp(0.0, 1.0);
                }
            }
        }
        samples.push(SyntheticSample { size, image, mask });
    }
    Ok(samples)
}

fn paint(mask: &mut [u8], size: usize, class: u8, inside: impl Fn(f64, f64) -> bool) {
    for y in 0..size {
        for x in 0..size {
            if inside(y as f64 + 0.5, x as f64 + 0.5) {
                mask[y * size + x] = class;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// binary files

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> SacError + '_ {
    move |e| SacError::io(path.display().to_string(), e)
}

fn format_err(path: &Path, reason: impl Into<String>) -> SacError {
    SacError::Format {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

pub fn write_image_file(path: &Path, image: &[f64], size: usize) -> Result<()> {
    let mut buf = Vec::with_capacity(24 + image.len() * 4);
    buf.extend_from_slice(IMAGE_MAGIC);
    for v in [FORMAT_VERSION, 1, 3, size as u32, size as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for &v in image {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    std::fs::write(path, buf).map_err(io_err(path))
}

pub fn read_image_file(path: &Path) -> Result<(Vec<f64>, usize)> {
    let mut f = std::fs::File::open(path).map_err(io_err(path))?;
    let mut head = [0u8; 24];
    f.read_exact(&mut head).map_err(io_err(path))?;
    if &head[0..4] != IMAGE_MAGIC {
        return Err(format_err(path, "bad magic, not an image file"));
    }
    let word = |i: usize| u32::from_le_bytes(head[i..i + 4].try_into().unwrap());
    if word(4) != FORMAT_VERSION {
        return Err(format_err(path, format!("unsupported version {}", word(4))));
    }
    if word(8) != 1 {
        return Err(format_err(path, "expected f32 payload"));
    }
    let (c, h, w) = (word(12) as usize, word(16) as usize, word(20) as usize);
    if c != 3 || h != w {
        return Err(format_err(path, format!("expected square 3-channel image, got {c}x{h}x{w}")));
    }
    let mut raw = Vec::new();
    f.read_to_end(&mut raw).map_err(io_err(path))?;
    if raw.len() != c * h * w * 4 {
        return Err(format_err(path, "truncated payload"));
    }
    let image = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    Ok((image, h))
}

pub fn write_mask_file(path: &Path, mask: &[u8], size: usize) -> Result<()> {
    let mut buf = Vec::with_capacity(20 + mask.len());
    buf.extend_from_slice(MASK_MAGIC);
    for v in [FORMAT_VERSION, 2, size as u32, size as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(mask);
    std::fs::write(path, buf).map_err(io_err(path))
}

pub fn read_mask_file(path: &Path) -> Result<(Vec<u8>, usize)> {
    let mut f = std::fs::File::open(path).map_err(io_err(path))?;
    let mut head = [0u8; 20];
    f.read_exact(&mut head).map_err(io_err(path))?;
    if &head[0..4] != MASK_MAGIC {
        return Err(format_err(path, "bad magic, not a mask file"));
    }
    let word = |i: usize| u32::from_le_bytes(head[i..i + 4].try_into().unwrap());
    if word(4) != FORMAT_VERSION || word(8) != 2 {
        return Err(format_err(path, "unsupported version or dtype"));
    }
    let (h, w) = (word(12) as usize, word(16) as usize);
    if h != w {
        return Err(format_err(path, "expected a square mask"));
    }
    let mut mask = Vec::new();
    f.read_to_end(&mut mask).map_err(io_err(path))?;
    if mask.len() != h * w {
        return Err(format_err(path, "truncated payload"));
    }
    Ok((mask, h))
}

// ---------------------------------------------------------------------------
// dataset directories

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetMeta {
    pub count: usize,
    pub size: usize,
    pub classes: usize,
    pub seed: u64,
}

pub fn sample_paths(dir: &Path, index: usize) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("sample_{index:05}.img")),
        dir.join(format!("sample_{index:05}.msk")),
    )
}

pub fn write_dataset(dir: &Path, samples: &[SyntheticSample], meta: &DatasetMeta) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    for (i, s) in samples.iter().enumerate() {
        let (img, msk) = sample_paths(dir, i);
        write_image_file(&img, &s.image, s.size)?;
        write_mask_file(&msk, &s.mask, s.size)?;
    }
    let manifest = format!(
        "count = {}\nsize = {}\nclasses = {}\nseed = {}\n",
        meta.count, meta.size, meta.classes, meta.seed
    );
    let p = dir.join("manifest.txt");
    let mut f = std::fs::File::create(&p).map_err(io_err(&p))?;
    f.write_all(manifest.as_bytes()).map_err(io_err(&p))?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<(Vec<SyntheticSample>, DatasetMeta)> {
    let p = dir.join("manifest.txt");
    let text = std::fs::read_to_string(&p).map_err(io_err(&p))?;
    let mut meta = DatasetMeta {
        count: 0,
        size: 0,
        classes: 0,
        seed: 0,
    };
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format_err(&p, format!("bad manifest line: {line}")))?;
        let v = v.trim();
        match k.trim() {
            "count" => meta.count = v.parse().map_err(|_| format_err(&p, "bad count"))?,
            "size" => meta.size = v.parse().map_err(|_| format_err(&p, "bad size"))?,
            "classes" => meta.classes = v.parse().map_err(|_| format_err(&p, "bad classes"))?,
            "seed" => meta.seed = v.parse().map_err(|_| format_err(&p, "bad seed"))?,
            other => return Err(format_err(&p, format!("unknown manifest key {other}"))),
        }
    }
    let mut samples = Vec::with_capacity(meta.count);
    for i in 0..meta.count {
        let (img_path, msk_path) = sample_paths(dir, i);
        let (image, size) = read_image_file(&img_path)?;
        let (mask, msize) = read_mask_file(&msk_path)?;
        if size != meta.size || msize != meta.size {
            return Err(format_err(&img_path, "sample size disagrees with manifest"));
        }
        samples.push(SyntheticSample { size, image, mask });
    }
    Ok((samples, meta))
}

// ---------------------------------------------------------------------------
// portable pixmap/graymap text converters

pub fn write_ppm(path: &Path, image: &[f64], size: usize) -> Result<()> {
    let mut out = format!("P3\n{size} {size}\n255\n");
    for y in 0..size {
        for x in 0..size {
            for ch in 0..3 {
                let v = (image[(ch * size + y) * size + x].clamp(0.0, 1.0) * 255.0).round() as u8;
                out.push_str(&v.to_string());
                out.push(' ');
            }
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(io_err(path))
}

pub fn read_ppm(path: &Path) -> Result<(Vec<f64>, usize)> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut tokens = text
        .lines()
        .filter(|l| !l.starts_with('#'))
        .flat_map(|l| l.split_whitespace());
    if tokens.next() != Some("P3") {
        return Err(format_err(path, "expected a P3 pixmap"));
    }
    let mut next_num = |what: &str| -> Result<usize> {
        tokens
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| format_err(path, format!("missing {what}")))
    };
    let w = next_num("width")?;
    let h = next_num("height")?;
    let maxv = next_num("maxval")? as f64;
    if w != h {
        return Err(format_err(path, "expected a square image"));
    }
    let mut image = vec![0.0f64; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                image[(ch * h + y) * w + x] = next_num("pixel value")? as f64 / maxv;
            }
        }
    }
    Ok((image, h))
}

/// Masks as a graymap with class ids spread over the gray range.
pub fn write_pgm(path: &Path, mask: &[u8], size: usize, classes: usize) -> Result<()> {
    let scale = if classes > 1 { 255 / (classes - 1) } else { 255 };
    let mut out = format!("P2\n{size} {size}\n255\n");
    for y in 0..size {
        for x in 0..size {
            out.push_str(&((mask[y * size + x] as usize * scale).min(255).to_string()));
            out.push(' ');
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(io_err(path))
}
