//! Patch k-means image quantizer.
//!
//! Grayscale images are cut into `patch_size x patch_size` tiles, each tile
//! flattened row-major into a vector of pixel values scaled to `[0, 1]`.
//! A codebook of `K` centroids is fit with Lloyd iterations from a seeded
//! k-means++ start; an image encodes to the row-major grid of its tiles'
//! nearest centroid indices.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{invalid_config, Error, Result};
use crate::seed::rng_from_seed;

/// 8-bit grayscale image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::Shape {
                expected: width * height,
                found: pixels.len(),
            });
        }
        Ok(Self { width, height, pixels })
    }

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

    pub fn grid_dims(&self, patch_size: usize) -> Result<(usize, usize)> {
        if patch_size == 0 {
            return Err(invalid_config("patch_size must be >= 1"));
        }
        if !self.width.is_multiple_of(patch_size)
            || !self.height.is_multiple_of(patch_size)
            || self.width == 0
            || self.height == 0
        {
            return Err(Error::Shape {
                expected: patch_size,
                found: if !self.width.is_multiple_of(patch_size) {
                    self.width
                } else {
                    self.height
                },
            });
        }
        Ok((self.height / patch_size, self.width / patch_size))
    }

    /// Row-major tiles, each flattened row-major and scaled to `[0, 1]`.
    pub fn patches(&self, patch_size: usize) -> Result<Vec<Vec<f64>>> {
        let (rows, cols) = self.grid_dims(patch_size)?;
        let mut out = Vec::with_capacity(rows * cols);
        for gy in 0..rows {
            for gx in 0..cols {
                let mut p = Vec::with_capacity(patch_size * patch_size);
                for dy in 0..patch_size {
                    for dx in 0..patch_size {
                        let px = self.get(gx * patch_size + dx, gy * patch_size + dy);
                        p.push(px as f64 / 255.0);
                    }
                }
                out.push(p);
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    patch_size: usize,
    seed: u32,
    /// `K` centroids of `patch_size^2` values each.
    centroids: Vec<Vec<f32>>,
}

impl Codebook {
    pub fn new(patch_size: usize, seed: u32, centroids: Vec<Vec<f32>>) -> Result<Self> {
        if centroids.is_empty() {
            return Err(invalid_config("codebook needs K >= 1 centroids"));
        }
        if patch_size == 0 {
            return Err(invalid_config("patch_size must be >= 1"));
        }
        let dim = patch_size * patch_size;
        for c in &centroids {
            if c.len() != dim {
                return Err(Error::Shape {
                    expected: dim,
                    found: c.len(),
                });
            }
            if c.iter().any(|x| !x.is_finite()) {
                return Err(invalid_config("codebook centroid is not finite"));
            }
        }
        Ok(Self {
            patch_size,
            seed,
            centroids,
        })
    }

    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn seed(&self) -> u32 {
        self.seed
    }

    pub fn centroids(&self) -> &[Vec<f32>] {
        &self.centroids
    }

    /// Index of the nearest centroid by squared Euclidean distance; ties go low.
    pub fn nearest(&self, patch: &[f64]) -> (usize, f64) {
        nearest_of(patch, self.centroids.iter().map(|c| c.iter().map(|&x| x as f64)))
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest_of<I, C>(patch: &[f64], centroids: I) -> (usize, f64)
where
    I: IntoIterator<Item = C>,
    C: IntoIterator<Item = f64>,
{
    let mut best = (0usize, f64::INFINITY);
    for (j, c) in centroids.into_iter().enumerate() {
        let d: f64 = patch.iter().zip(c).map(|(x, y)| (x - y) * (x - y)).sum();
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Codebook plus the mean squared quantization error after each assignment step.
#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub codebook: Codebook,
    pub errors: Vec<f64>,
    pub reseeded: usize,
}

pub fn fit_codebook(images: &[GrayImage], k: usize, patch_size: usize, iters: usize, seed: u32) -> Result<Codebook> {
    fit_codebook_traced(images, k, patch_size, iters, seed).map(|f| f.codebook)
}

pub fn fit_codebook_traced(
    images: &[GrayImage],
    k: usize,
    patch_size: usize,
    iters: usize,
    seed: u32,
) -> Result<KMeansFit> {
    if k < 1 {
        return Err(invalid_config("K must be >= 1"));
    }
    if patch_size == 0 {
        return Err(invalid_config("patch_size must be >= 1"));
    }
    let mut data = Vec::new();
    if let Some(first) = images.first() {
        for img in images {
            if img.width != first.width || img.height != first.height {
                return Err(Error::Shape {
                    expected: first.width * first.height,
                    found: img.width * img.height,
                });
            }
            data.extend(img.patches(patch_size)?);
        }
    }
    fit_patches(&data, k, patch_size, iters, seed)
}

/// Lloyd's k-means over pre-extracted patch vectors.
pub fn fit_patches(data: &[Vec<f64>], k: usize, patch_size: usize, iters: usize, seed: u32) -> Result<KMeansFit> {
    if k < 1 {
        return Err(invalid_config("K must be >= 1"));
    }
    if data.is_empty() {
        return Err(Error::EmptyInput("no patches to fit".into()));
    }
    let dim = patch_size * patch_size;
    if let Some(p) = data.iter().find(|p| p.len() != dim) {
        return Err(Error::Shape {
            expected: dim,
            found: p.len(),
        });
    }
    let mut rng = rng_from_seed(seed as u64);
    let mut centroids = kmeans_plus_plus(data, k, &mut rng);
    let n = data.len();
    let denom = (n * dim) as f64;
    let mut assign = vec![0usize; n];
    let mut dist = vec![0f64; n];
    let mut errors = Vec::with_capacity(iters + 1);
    let mut reseeded = 0;

    for it in 0..=iters {
        let mut sse = 0.0;
        for (i, p) in data.iter().enumerate() {
            let (j, d) = nearest_of(p, centroids.iter().map(|c| c.iter().copied()));
            assign[i] = j;
            dist[i] = d;
            sse += d;
        }
        errors.push(sse / denom);
        if it == iters {
            break;
        }

        let mut sums = vec![vec![0f64; dim]; k];
        let mut counts = vec![0usize; k];
        for (i, p) in data.iter().enumerate() {
            counts[assign[i]] += 1;
            for (s, x) in sums[assign[i]].iter_mut().zip(p) {
                *s += x;
            }
        }
        let mut taken = vec![false; n];
        for j in 0..k {
            if counts[j] > 0 {
                let c = counts[j] as f64;
                for (dst, s) in centroids[j].iter_mut().zip(&sums[j]) {
                    *dst = s / c;
                }
            } else {
                // Empty cluster: move it onto the patch worst served by its centroid.
                let far = (0..n)
                    .filter(|&i| !taken[i])
                    .fold(None::<usize>, |best, i| match best {
                        Some(b) if dist[b] >= dist[i] => Some(b),
                        _ => Some(i),
                    })
                    .unwrap_or(0);
                taken[far] = true;
                centroids[j] = data[far].clone();
                reseeded += 1;
            }
        }
    }

    let centroids32 = centroids
        .into_iter()
        .map(|c| c.into_iter().map(|x| x as f32).collect())
        .collect();
    Ok(KMeansFit {
        codebook: Codebook::new(patch_size, seed, centroids32)?,
        errors,
        reseeded,
    })
}

fn kmeans_plus_plus<R: Rng + ?Sized>(data: &[Vec<f64>], k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let n = data.len();
    let mut centroids = Vec::with_capacity(k);
    centroids.push(data[rng.gen_range(0..n)].clone());
    let mut d2: Vec<f64> = data.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if acc > target && d > 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            // Every patch already coincides with a centroid.
            rng.gen_range(0..n)
        };
        let c = data[pick].clone();
        for (d, p) in d2.iter_mut().zip(data) {
            let nd = sq_dist(p, &c);
            if nd < *d {
                *d = nd;
            }
        }
        centroids.push(c);
    }
    centroids
}

/// Row-major grid of nearest-centroid indices.
pub fn encode_image(image: &GrayImage, codebook: &Codebook) -> Result<Vec<u32>> {
    let patches = image.patches(codebook.patch_size())?;
    Ok(patches.iter().map(|p| codebook.nearest(p).0 as u32).collect())
}

/// Tiles centroids back into an image of `grid_rows x grid_cols` patches.
pub fn decode_tokens(tokens: &[u32], codebook: &Codebook, grid_dims: (usize, usize)) -> Result<GrayImage> {
    let (rows, cols) = grid_dims;
    if tokens.len() != rows * cols {
        return Err(Error::Shape {
            expected: rows * cols,
            found: tokens.len(),
        });
    }
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= codebook.k()) {
        return Err(Error::OutOfRange {
            token: t,
            limit: codebook.k() as u32,
        });
    }
    let ps = codebook.patch_size();
    let width = cols * ps;
    let mut pixels = vec![0u8; width * rows * ps];
    for (idx, &t) in tokens.iter().enumerate() {
        let (gy, gx) = (idx / cols, idx % cols);
        let c = &codebook.centroids()[t as usize];
        for dy in 0..ps {
            for dx in 0..ps {
                let v = libm::round(c[dy * ps + dx] as f64 * 255.0).clamp(0.0, 255.0);
                pixels[(gy * ps + dy) * width + gx * ps + dx] = v as u8;
            }
        }
    }
    GrayImage::new(width, rows * ps, pixels)
}

/// Mean squared error of an image against its quantized reconstruction in `[0,1]` units.
pub fn quantization_error(image: &GrayImage, codebook: &Codebook) -> Result<f64> {
    let patches = image.patches(codebook.patch_size())?;
    let dim = (codebook.patch_size() * codebook.patch_size()) as f64;
    let sse: f64 = patches.iter().map(|p| codebook.nearest(p).1).sum();
    Ok(sse / (patches.len() as f64 * dim))
}
