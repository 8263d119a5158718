//! Synthetic labelled images and the shared crop augmentation.
//!
//! Every sample is a pure function of its seed: one class-determined shape
//! at a random position and scale over a noise background, with a dense
//! mask marking the shape's pixels.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::kernels::bilinear_taps;
use crate::numerics::Tensor;

/// Shape families, cycled by class id.
pub const SHAPE_FAMILIES: [&str; 8] = ["disk", "square", "triangle", "ring", "cross", "stripes", "diamond", "bar"];

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    /// `[3, H, W]`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    pub class_id: usize,
    /// Row-major `H x W` labels: 0 is background, `class_id + 1` marks the shape.
    pub mask: Vec<u32>,
    pub seed: u64,
}

impl SyntheticSample {
    pub fn height(&self) -> usize {
        self.image.dim(1)
    }

    pub fn width(&self) -> usize {
        self.image.dim(2)
    }
}

fn inside(family: usize, dx: f64, dy: f64) -> bool {
    let (ax, ay) = (dx.abs(), dy.abs());
    match family % SHAPE_FAMILIES.len() {
        0 => dx * dx + dy * dy <= 1.0,
        1 => ax <= 0.8 && ay <= 0.8,
        // upward triangle with apex at dy = -1
        2 => (-1.0..=0.8).contains(&dy) && ax <= (dy + 1.0) * 0.55,
        3 => {
            let r2 = dx * dx + dy * dy;
            (0.36..=1.0).contains(&r2)
        }
        4 => (ax <= 0.3 && ay <= 1.0) || (ay <= 0.3 && ax <= 1.0),
        5 => ax <= 0.85 && ay <= 0.85 && ((dx + 1.0) * 2.5).floor() as i64 % 2 == 0,
        6 => ax + ay <= 1.0,
        _ => ax <= 1.0 && ay <= 0.35,
    }
}

/// Per-channel pixel statistics of the corpus, used by the teachers' input normalization.
pub const PIXEL_MEAN: f64 = 0.25;
pub const PIXEL_STD: f64 = 0.21;

/// Draws the sample for `seed`. The class is `seed % num_classes`, so any
/// run of consecutive seeds is class-balanced.
pub fn generate_sample(seed: u64, num_classes: usize, resolution: usize) -> Result<SyntheticSample> {
    if num_classes < 2 {
        return Err(Error::invalid("generate_sample", "need at least 2 classes"));
    }
    if resolution < 16 {
        return Err(Error::invalid("generate_sample", "resolution must be at least 16"));
    }
    let class_id = (seed % num_classes as u64) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_da7a);
    let res = resolution as f64;
    let radius = rng.gen_range(0.18..0.32) * res;
    let cy = rng.gen_range(radius..res - radius);
    let cx = rng.gen_range(radius..res - radius);
    let color: [f64; 3] = [rng.gen_range(0.55..1.0), rng.gen_range(0.55..1.0), rng.gen_range(0.55..1.0)];

    let plane = resolution * resolution;
    let mut image = vec![0f32; 3 * plane];
    let mut mask = vec![0u32; plane];
    for y in 0..resolution {
        for x in 0..resolution {
            let dy = (y as f64 + 0.5 - cy) / radius;
            let dx = (x as f64 + 0.5 - cx) / radius;
            let on = inside(class_id, dx, dy);
            let p = y * resolution + x;
            if on {
                mask[p] = class_id as u32 + 1;
            }
            for (c, &col) in color.iter().enumerate() {
                let noise: f64 = rng.gen_range(0.0..0.35);
                image[c * plane + p] = if on { (col - 0.5 * noise).clamp(0.0, 1.0) as f32 } else { noise as f32 };
            }
        }
    }
    if mask.iter().all(|&m| m == 0) {
        let p = (cy as usize).min(resolution - 1) * resolution + (cx as usize).min(resolution - 1);
        mask[p] = class_id as u32 + 1;
        for (c, &col) in color.iter().enumerate() {
            image[c * plane + p] = col as f32;
        }
    }
    Ok(SyntheticSample { image: Tensor::new([3, resolution, resolution], image)?, class_id, mask, seed })
}

/// Crop parameters for the shared student/teacher view.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropParams {
    pub scale: (f64, f64),
    pub ratio: (f64, f64),
}

impl Default for CropParams {
    fn default() -> Self {
        Self { scale: (0.5, 1.0), ratio: (3.0 / 4.0, 4.0 / 3.0) }
    }
}

/// Pixel window `[top, top+height) x [left, left+width)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropWindow {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// Samples a crop window: up to 10 attempts, then the full image.
pub fn sample_crop_window(height: usize, width: usize, seed: u64, params: &CropParams) -> Result<CropWindow> {
    let (s0, s1) = params.scale;
    if !(s0 > 0.0 && s0 <= s1 && s1 <= 1.0) {
        return Err(Error::invalid("random_resized_crop", format!("scale range {:?} not within (0,1]", params.scale)));
    }
    let (r0, r1) = params.ratio;
    if !(r0 > 0.0 && r0 <= r1) {
        return Err(Error::invalid("random_resized_crop", format!("bad aspect range {:?}", params.ratio)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc40b_5eed);
    let area = (height * width) as f64;
    for _ in 0..10 {
        let target = area * if s0 == s1 { s0 } else { rng.gen_range(s0..=s1) };
        let aspect = if r0 == r1 { r0 } else { rng.gen_range(r0.ln()..=r1.ln()).exp() };
        let w = (target * aspect).sqrt().round() as usize;
        let h = (target / aspect).sqrt().round() as usize;
        if w > 0 && h > 0 && w <= width && h <= height {
            let top = rng.gen_range(0..=height - h);
            let left = rng.gen_range(0..=width - w);
            return Ok(CropWindow { top, left, height: h, width: w });
        }
    }
    Ok(CropWindow { top: 0, left: 0, height, width })
}

/// Bilinear crop-and-resize of a `[C,H,W]` image (half-pixel centers).
pub fn crop_image(image: &Tensor<f32>, win: &CropWindow, out_res: usize) -> Result<Tensor<f32>> {
    let (c, h, w) = (image.dim(0), image.dim(1), image.dim(2));
    let ty = bilinear_taps(h, win.top as f64 / h as f64, win.height as f64 / h as f64, out_res);
    let tx = bilinear_taps(w, win.left as f64 / w as f64, win.width as f64 / w as f64, out_res);
    let mut out = Vec::with_capacity(c * out_res * out_res);
    for plane in image.data().chunks(h * w) {
        for a in &ty {
            for b in &tx {
                let v = |y: usize, x: usize| plane[y * w + x] as f64;
                let top = v(a.i0, b.i0) * (1.0 - b.frac) + v(a.i0, b.i1) * b.frac;
                let bot = v(a.i1, b.i0) * (1.0 - b.frac) + v(a.i1, b.i1) * b.frac;
                out.push((top * (1.0 - a.frac) + bot * a.frac) as f32);
            }
        }
    }
    Tensor::new([c, out_res, out_res], out)
}

/// Nearest-neighbour crop-and-resize of a label grid with the same window.
pub fn crop_mask(mask: &[u32], height: usize, width: usize, win: &CropWindow, out_res: usize) -> Vec<u32> {
    let nearest = |i: usize, start: usize, len: usize, limit: usize| {
        let src = start as f64 + (i as f64 + 0.5) * len as f64 / out_res as f64;
        (src.floor() as usize).min(limit - 1)
    };
    let mut out = Vec::with_capacity(out_res * out_res);
    for i in 0..out_res {
        let y = nearest(i, win.top, win.height, height);
        for j in 0..out_res {
            let x = nearest(j, win.left, win.width, width);
            out.push(mask[y * width + x]);
        }
    }
    out
}

/// Crops one window (drawn from `seed`) out of `sample` and resizes image
/// and mask to `out_res`. Student and teachers are all fed this one view.
pub fn random_resized_crop(sample: &SyntheticSample, seed: u64, params: &CropParams, out_res: usize) -> Result<SyntheticSample> {
    if out_res == 0 {
        return Err(Error::invalid("random_resized_crop", "output resolution must be positive"));
    }
    let (h, w) = (sample.height(), sample.width());
    let win = sample_crop_window(h, w, seed, params)?;
    Ok(SyntheticSample {
        image: crop_image(&sample.image, &win, out_res)?,
        class_id: sample.class_id,
        mask: crop_mask(&sample.mask, h, w, &win, out_res),
        seed: sample.seed,
    })
}

/// Resizes the whole image (no crop) to `out_res`.
pub fn resize_sample(sample: &SyntheticSample, out_res: usize) -> Result<SyntheticSample> {
    let (h, w) = (sample.height(), sample.width());
    if h == out_res && w == out_res {
        return Ok(sample.clone());
    }
    let win = CropWindow { top: 0, left: 0, height: h, width: w };
    Ok(SyntheticSample {
        image: crop_image(&sample.image, &win, out_res)?,
        class_id: sample.class_id,
        mask: crop_mask(&sample.mask, h, w, &win, out_res),
        seed: sample.seed,
    })
}

/// Writes `<seed>.smp` files: little-endian f32 image, then u32 mask.
pub fn dump_corpus(dir: &Path, seeds: impl IntoIterator<Item = u64>, num_classes: usize, resolution: usize) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for seed in seeds {
        let s = generate_sample(seed, num_classes, resolution)?;
        let path = dir.join(format!("{seed}.smp"));
        let mut f = std::io::BufWriter::new(fs::File::create(&path)?);
        for &v in s.image.data() {
            f.write_all(&v.to_le_bytes())?;
        }
        for &m in &s.mask {
            f.write_all(&m.to_le_bytes())?;
        }
        f.flush()?;
        written.push(path);
    }
    Ok(written)
}

/// Reads a `.smp` file back into `(image [3,R,R], mask)`.
pub fn read_corpus_file(path: &Path) -> Result<(Tensor<f32>, Vec<u32>)> {
    let bytes = fs::read(path)?;
    // 3 f32 planes + 1 u32 plane, 4 bytes each
    let plane = bytes.len() / 16;
    let res = (plane as f64).sqrt().round() as usize;
    if res * res * 16 != bytes.len() {
        return Err(Error::invalid("read_corpus_file", format!("{} bytes is not a square sample", bytes.len())));
    }
    let words: Vec<[u8; 4]> = bytes.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]).collect();
    let image = words[..3 * plane].iter().map(|&b| f32::from_le_bytes(b)).collect();
    let mask = words[3 * plane..].iter().map(|&b| u32::from_le_bytes(b)).collect();
    Ok((Tensor::new([3, res, res], image)?, mask))
}
