//! Labeled image sets: a procedural ten-class shapes generator and a
//! loader for directories of raster images (one subdirectory per class).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const SHAPE_CLASSES: [&str; 10] =
    ["square", "frame", "disk", "ring", "plus", "cross", "hbar", "vbar", "triangle", "dots"];

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub channels: usize,
    pub size: usize,
    pub classes: usize,
    /// `[n, channels, size, size]`, row-major.
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn pixels(&self) -> usize {
        self.channels * self.size * self.size
    }

    /// Images and labels of the given samples.
    pub fn batch<T: Scalar>(&self, idx: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let px = self.pixels();
        let mut data = Vec::with_capacity(idx.len() * px);
        for &i in idx {
            data.extend(self.images[i * px..(i + 1) * px].iter().map(|&v| T::lit(v as f64)));
        }
        let t = Tensor::new(vec![idx.len(), self.channels, self.size, self.size], data).expect("consistent batch");
        (t, idx.iter().map(|&i| self.labels[i]).collect())
    }

    /// `n` grayscale images of ten shape classes, balanced, with random
    /// placement, scale, intensity and pixel noise.
    pub fn shapes10(n: usize, size: usize, seed: u64) -> Self {
        let mut rng = RngState::new(seed);
        let mut images = Vec::with_capacity(n * size * size);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = i % SHAPE_CLASSES.len();
            images.extend(render(class, size, &mut rng));
            labels.push(class);
        }
        // interleave classes in a seed-dependent order
        let perm = rng.permutation(n);
        let px = size * size;
        let mut shuffled = vec![0.0; images.len()];
        let mut sl = vec![0; n];
        for (dst, &src) in perm.iter().enumerate() {
            shuffled[dst * px..(dst + 1) * px].copy_from_slice(&images[src * px..(src + 1) * px]);
            sl[dst] = labels[src];
        }
        Self { channels: 1, size, classes: SHAPE_CLASSES.len(), images: shuffled, labels: sl }
    }

    /// Reads `root/<class>/<image>`; classes are the sorted subdirectory
    /// names. Images are converted to grayscale and resized to `size`.
    pub fn load_dir(root: &Path, size: usize) -> Result<Self> {
        let mut classes: Vec<_> = fs::read_dir(root)
            .map_err(|e| Error::io(root, e))?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_dir())
            .map(|e| e.path())
            .collect();
        classes.sort();
        if classes.is_empty() {
            return Err(Error::Config(format!("{}: no class subdirectories", root.display())));
        }
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for (label, dir) in classes.iter().enumerate() {
            let mut files: Vec<_> = fs::read_dir(dir)
                .map_err(|e| Error::io(dir, e))?
                .filter_map(|e| e.ok())
                .map(|e| e.path())
                .filter(|p| p.is_file())
                .collect();
            files.sort();
            for f in files {
                let img = image::open(&f).map_err(|e| Error::Format(format!("{}: {e}", f.display())))?;
                let img = if img.width() as usize == size && img.height() as usize == size {
                    img.to_luma8()
                } else {
                    img.resize_exact(size as u32, size as u32, image::imageops::FilterType::Triangle).to_luma8()
                };
                images.extend(img.pixels().map(|p| p.0[0] as f32 / 255.0));
                labels.push(label);
            }
        }
        Ok(Self { channels: 1, size, classes: classes.len(), images, labels })
    }

    /// Writes every image as 8-bit PGM under `root/<class>/<index>.pgm`.
    pub fn save_dir(&self, root: &Path, names: &[&str]) -> Result<()> {
        if self.channels != 1 {
            return Err(Error::Config("only grayscale sets can be written".into()));
        }
        let px = self.pixels();
        for (i, &label) in self.labels.iter().enumerate() {
            let dir = root.join(names.get(label).map_or_else(|| format!("{label:02}"), |s| format!("{label:02}-{s}")));
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let bytes: Vec<u8> =
                self.images[i * px..(i + 1) * px].iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
            let img = image::GrayImage::from_raw(self.size as u32, self.size as u32, bytes).expect("buffer size");
            let path = dir.join(format!("{i:06}.pgm"));
            img.save_with_format(&path, image::ImageFormat::Pnm)
                .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        }
        Ok(())
    }
}

fn render(class: usize, size: usize, rng: &mut RngState) -> Vec<f32> {
    let s = size as f64;
    let r = s * (0.18 + 0.14 * rng.uniform());
    let margin = r + 1.0;
    let cx = margin + (s - 2.0 * margin).max(0.0) * rng.uniform();
    let cy = margin + (s - 2.0 * margin).max(0.0) * rng.uniform();
    let ink = 0.6 + 0.4 * rng.uniform();
    let w = (s / 10.0).max(1.0);
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            let on = match class {
                0 => dx.abs() <= r && dy.abs() <= r,
                1 => dx.abs().max(dy.abs()) <= r && dx.abs().max(dy.abs()) >= r - w,
                2 => dx.hypot(dy) <= r,
                3 => (dx.hypot(dy) - r * 0.8).abs() <= w * 0.75,
                4 => (dx.abs() <= w * 0.6 && dy.abs() <= r) || (dy.abs() <= w * 0.6 && dx.abs() <= r),
                5 => ((dx - dy).abs() <= w * 0.85 || (dx + dy).abs() <= w * 0.85) && dx.abs() <= r && dy.abs() <= r,
                6 => dy.abs() <= w * 0.75 && dx.abs() <= r * 1.2,
                7 => dx.abs() <= w * 0.75 && dy.abs() <= r * 1.2,
                8 => dy <= r * 0.8 && dy >= -r && dx.abs() <= (dy + r) * 0.55,
                _ => (dx - r * 0.6).hypot(dy).min((dx + r * 0.6).hypot(dy)) <= r * 0.4,
            };
            let noise = 0.08 * rng.normal();
            out.push(((if on { ink } else { 0.0 }) + noise) as f32);
        }
    }
    out
}
