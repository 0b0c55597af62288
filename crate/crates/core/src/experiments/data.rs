//! Datasets: synthetic generators and IDX (MNIST-format) ingestion.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::geometry;
use crate::rng::{self, SplitMix64};
use crate::tensor::{Scalar, Tensor};
use crate::transform::TransformMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Images stored as `f32` in `(N, C, H, W)` order with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Vec<f32>,
    channels: usize,
    height: usize,
    width: usize,
    labels: Vec<usize>,
    num_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(
        images: Vec<f32>,
        (channels, height, width): (usize, usize, usize),
        labels: Vec<usize>,
        num_classes: usize,
        split: Split,
    ) -> Result<Self> {
        if images.len() != labels.len() * channels * height * width {
            return Err(shape_err!(
                "{} pixels for {} images of {channels}x{height}x{width}",
                images.len(),
                labels.len()
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidArgument(format!("label {bad} out of range for {num_classes} classes")));
        }
        Ok(Self { images, channels, height, width, labels, num_classes, split })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// `(C, H, W)` of every image.
    pub fn image_dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn pixels(&self) -> &[f32] {
        &self.images
    }

    fn per_image(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.per_image();
        &self.images[i * n..(i + 1) * n]
    }

    /// Batch tensor of the given samples.
    pub fn batch_images<T: Scalar>(&self, indices: &[usize]) -> Result<Tensor<T>> {
        let mut data = Vec::with_capacity(indices.len() * self.per_image());
        for &i in indices {
            if i >= self.len() {
                return Err(shape_err!("sample {i} out of range {}", self.len()));
            }
            data.extend(self.image(i).iter().map(|&v| T::of(v as f64)));
        }
        Tensor::from_vec(&[indices.len(), self.channels, self.height, self.width], data)
    }

    pub fn images_tensor(&self) -> Result<Tensor<f32>> {
        Tensor::from_vec(&[self.len(), self.channels, self.height, self.width], self.images.clone())
    }

    pub fn subset(&self, indices: &[usize], split: Split) -> Dataset {
        let mut images = Vec::with_capacity(indices.len() * self.per_image());
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        Dataset {
            images,
            channels: self.channels,
            height: self.height,
            width: self.width,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            split,
        }
    }

    /// Shuffled split into two disjoint halves (first half gets the extra sample).
    pub fn split_half(&self, seed: u64, first: Split, second: Split) -> (Dataset, Dataset) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut rng::stream(seed, rng::stream_id("data.split"), 0));
        let cut = self.len().div_ceil(2);
        (self.subset(&idx[..cut], first), self.subset(&idx[cut..], second))
    }

    /// Applies `f` to every `H×W` plane.
    pub fn map_planes(&self, mut f: impl FnMut(usize, &[f32]) -> Vec<f32>) -> Dataset {
        let plane = self.height * self.width;
        let mut images = Vec::with_capacity(self.images.len());
        for (i, p) in self.images.chunks_exact(plane).enumerate() {
            images.extend(f(i / self.channels, p));
        }
        Dataset { images, ..self.clone() }
    }

    /// Largest class frequency.
    pub fn max_class_prior(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        let mut counts = vec![0usize; self.num_classes];
        self.labels.iter().for_each(|&l| counts[l] += 1);
        *counts.iter().max().unwrap() as f64 / self.len() as f64
    }

    /// Writes images and labels as two ORBT tensors.
    pub fn save_orbt(&self, images: &Path, labels: &Path) -> Result<()> {
        let img = self.images_tensor()?;
        img.write_orbt(std::io::BufWriter::new(std::fs::File::create(images)?))?;
        let lab = Tensor::<f32>::from_vec(&[self.len()], self.labels.iter().map(|&l| l as f32).collect())?;
        lab.write_orbt(std::io::BufWriter::new(std::fs::File::create(labels)?))?;
        Ok(())
    }

    pub fn load_orbt(images: &Path, labels: &Path, split: Split) -> Result<Dataset> {
        let img = Tensor::<f32>::read_orbt(std::io::BufReader::new(std::fs::File::open(images)?))?;
        let lab = Tensor::<f32>::read_orbt(std::io::BufReader::new(std::fs::File::open(labels)?))?;
        let (n, c, h, w) = img.nchw()?;
        if lab.len() != n {
            return Err(Error::Format(format!("{n} images but {} labels", lab.len())));
        }
        let labels: Vec<usize> = lab.data().iter().map(|&v| v as usize).collect();
        let classes = labels.iter().max().map_or(0, |m| m + 1);
        Dataset::new(img.into_data(), (c, h, w), labels, classes, split)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SyntheticKind {
    /// Class 0: annulus, class 1: axis-aligned plus sign.
    RingVsCross,
    /// Class 0: horizontal bar, class 1: vertical bar.
    OrientedBars,
    /// Labels decided by the peak response to a fixed 5×5 circular ring filter.
    PlantedCircular,
}

impl std::str::FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "ringvscross" => Ok(SyntheticKind::RingVsCross),
            "orientedbars" => Ok(SyntheticKind::OrientedBars),
            "plantedcircular" => Ok(SyntheticKind::PlantedCircular),
            other => Err(Error::Config(format!("unknown dataset kind `{other}`"))),
        }
    }
}

fn noise(img: &mut [f32], amp: f64, rng: &mut SplitMix64) {
    for v in img.iter_mut() {
        *v += rng.gen_range(-amp..amp) as f32;
    }
}

fn clamp01(img: &mut [f32]) {
    img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
}

fn draw_annulus(img: &mut [f32], size: usize, cx: f64, cy: f64, radius: f64, width: f64) {
    for r in 0..size {
        for c in 0..size {
            let d = ((r as f64 - cy).powi(2) + (c as f64 - cx).powi(2)).sqrt();
            let t = (d - radius) / width;
            img[r * size + c] += (-0.5 * t * t).exp() as f32;
        }
    }
}

fn draw_segment(img: &mut [f32], size: usize, (x0, y0): (f64, f64), (x1, y1): (f64, f64), width: f64) {
    let (dx, dy) = (x1 - x0, y1 - y0);
    let len2 = dx * dx + dy * dy;
    for r in 0..size {
        for c in 0..size {
            let (px, py) = (c as f64 - x0, r as f64 - y0);
            let t = ((px * dx + py * dy) / len2).clamp(0.0, 1.0);
            let d = ((px - t * dx).powi(2) + (py - t * dy).powi(2)).sqrt() / width;
            let v = (-0.5 * d * d).exp() as f32;
            let cell = &mut img[r * size + c];
            *cell = cell.max(v);
        }
    }
}

/// Effective 5×5 kernel of the circular ring filter: unit weights on the 16
/// radius-2 circular samples, re-parameterized onto the grid.
pub fn ring_filter() -> Vec<f64> {
    let pts = geometry::circular_points(5, 1).expect("valid size");
    let w: Vec<f64> = pts.rings().iter().map(|&r| if r == 2 { 1.0 } else { 0.0 }).collect();
    TransformMatrix::circular(5, 1).expect("valid size").apply_transpose(&w).expect("25 slots")
}

/// Peak response of `filter` (5×5) over the valid positions of a square image.
pub fn peak_response(img: &[f32], size: usize, filter: &[f64]) -> f64 {
    let mut best = f64::NEG_INFINITY;
    for r in 0..=size - 5 {
        for c in 0..=size - 5 {
            let mut acc = 0.0;
            for kr in 0..5 {
                for kc in 0..5 {
                    acc += filter[kr * 5 + kc] * img[(r + kr) * size + c + kc] as f64;
                }
            }
            best = best.max(acc);
        }
    }
    best
}

/// Ring stamp with unit peak.
fn planted_ring() -> Vec<f64> {
    let ring = ring_filter();
    let peak = ring.iter().fold(0.0f64, |m, v| m.max(*v));
    ring.iter().map(|v| v / peak).collect()
}

/// The ring stamp with its 25 values shuffled: same sum and norm, different
/// arrangement.
fn planted_distractor(rng: &mut SplitMix64) -> Vec<f64> {
    let mut d = planted_ring();
    d.shuffle(rng);
    d
}

/// Decision threshold on the ring-filter peak: midway between the response to
/// a clean ring stamp and the mean response to a shuffled one.
pub fn planted_threshold() -> f64 {
    let (filter, ring) = (ring_filter(), planted_ring());
    let on: f64 = ring.iter().zip(&filter).map(|(x, y)| x * y).sum();
    let shuffled = ring.iter().sum::<f64>() * filter.iter().sum::<f64>() / 25.0;
    0.5 * (on + shuffled)
}

fn stamp(img: &mut [f32], size: usize, pattern: &[f64], r0: usize, c0: usize) {
    for kr in 0..5 {
        for kc in 0..5 {
            img[(r0 + kr) * size + c0 + kc] += pattern[kr * 5 + kc] as f32;
        }
    }
}

/// Deterministic synthetic dataset with `n_per_class` samples of each of the
/// two classes, interleaved by class.
pub fn gen_synthetic(kind: SyntheticKind, n_per_class: usize, size: usize, seed: u64) -> Result<Dataset> {
    if size < 8 {
        return Err(Error::InvalidArgument(format!("synthetic images need size >= 8, got {size}")));
    }
    let mut rng = rng::stream(seed, rng::stream_id("data.synthetic"), kind as u64);
    let s = size as f64;
    let mut images = Vec::with_capacity(2 * n_per_class * size * size);
    let mut labels = Vec::with_capacity(2 * n_per_class);

    match kind {
        SyntheticKind::RingVsCross | SyntheticKind::OrientedBars => {
            for _ in 0..n_per_class {
                for class in 0..2 {
                    let mut img = vec![0.0f32; size * size];
                    let scale = rng.gen_range(0.2..0.32) * s;
                    let margin = scale + 1.5;
                    let cx = rng.gen_range(margin.min(s / 2.0)..(s - 1.0 - margin).max(s / 2.0));
                    let cy = rng.gen_range(margin.min(s / 2.0)..(s - 1.0 - margin).max(s / 2.0));
                    let width = rng.gen_range(0.7..1.1);
                    match (kind, class) {
                        (SyntheticKind::RingVsCross, 0) => draw_annulus(&mut img, size, cx, cy, scale, width),
                        (SyntheticKind::RingVsCross, _) => {
                            draw_segment(&mut img, size, (cx - scale, cy), (cx + scale, cy), width);
                            draw_segment(&mut img, size, (cx, cy - scale), (cx, cy + scale), width);
                        }
                        (_, 0) => draw_segment(&mut img, size, (cx - scale, cy), (cx + scale, cy), width),
                        _ => draw_segment(&mut img, size, (cx, cy - scale), (cx, cy + scale), width),
                    }
                    noise(&mut img, 0.1, &mut rng);
                    clamp01(&mut img);
                    images.extend(img);
                    labels.push(class);
                }
            }
        }
        SyntheticKind::PlantedCircular => {
            let ring = planted_ring();
            let filter = ring_filter();
            let tau = planted_threshold();
            let mut pools: [Vec<Vec<f32>>; 2] = [Vec::new(), Vec::new()];
            let mut attempts = 0usize;
            while pools.iter().any(|p| p.len() < n_per_class) {
                attempts += 1;
                if attempts > 100 * (n_per_class + 1) {
                    return Err(Error::Numerical("planted dataset generation did not balance".into()));
                }
                let mut img = vec![0.0f32; size * size];
                noise(&mut img, 0.1, &mut rng);
                let pattern = if rng.gen_bool(0.5) { ring.clone() } else { planted_distractor(&mut rng) };
                let r0 = rng.gen_range(0..=size - 5);
                let c0 = rng.gen_range(0..=size - 5);
                stamp(&mut img, size, &pattern, r0, c0);
                let label = usize::from(peak_response(&img, size, &filter) > tau);
                if pools[label].len() < n_per_class {
                    pools[label].push(img);
                }
            }
            for i in 0..n_per_class {
                for (class, pool) in pools.iter().enumerate() {
                    images.extend_from_slice(&pool[i]);
                    labels.push(class);
                }
            }
        }
    }
    Dataset::new(images, (1, size, size), labels, 2, Split::Train)
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Format(format!("{what}: file truncated in header")))
}

/// Parses an IDX image file (magic `0x00000803`) into `(N, H, W, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = be_u32(bytes, 0, "images")?;
    if magic != 0x0000_0803 {
        return Err(Error::Format(format!("image file magic {magic:#010x}, expected 0x00000803")));
    }
    let n = be_u32(bytes, 4, "images")? as usize;
    let h = be_u32(bytes, 8, "images")? as usize;
    let w = be_u32(bytes, 12, "images")? as usize;
    let payload = &bytes[16..];
    if payload.len() != n * h * w {
        return Err(Error::Format(format!("image payload has {} bytes, expected {}", payload.len(), n * h * w)));
    }
    Ok((n, h, w, payload.to_vec()))
}

/// Parses an IDX label file (magic `0x00000801`).
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, "labels")?;
    if magic != 0x0000_0801 {
        return Err(Error::Format(format!("label file magic {magic:#010x}, expected 0x00000801")));
    }
    let n = be_u32(bytes, 4, "labels")? as usize;
    let payload = &bytes[8..];
    if payload.len() != n {
        return Err(Error::Format(format!("label payload has {} bytes, expected {n}", payload.len())));
    }
    Ok(payload.to_vec())
}

/// Loads an IDX image/label pair, scaling pixels to `[0, 1]`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let (n, h, w, pixels) = parse_idx_images(&std::fs::read(images_path)?)?;
    let labels = parse_idx_labels(&std::fs::read(labels_path)?)?;
    if labels.len() != n {
        return Err(Error::Format(format!("{n} images but {} labels", labels.len())));
    }
    let labels: Vec<usize> = labels.into_iter().map(usize::from).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(pixels.into_iter().map(|p| p as f32 / 255.0).collect(), (1, h, w), labels, classes, Split::Train)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_and_balanced() {
        let d = gen_synthetic(SyntheticKind::RingVsCross, 0, 16, 1).unwrap();
        assert!(d.is_empty());
        for kind in [SyntheticKind::RingVsCross, SyntheticKind::OrientedBars, SyntheticKind::PlantedCircular] {
            let d = gen_synthetic(kind, 7, 16, 3).unwrap();
            assert_eq!(d.len(), 14);
            assert_eq!(d.labels().iter().filter(|&&l| l == 1).count(), 7);
            assert!(d.pixels().iter().all(|v| v.is_finite()));
        }
        assert!(gen_synthetic(SyntheticKind::RingVsCross, 1, 7, 0).is_err());
    }

    #[test]
    fn deterministic_per_seed() {
        let a = gen_synthetic(SyntheticKind::PlantedCircular, 5, 12, 9).unwrap();
        let b = gen_synthetic(SyntheticKind::PlantedCircular, 5, 12, 9).unwrap();
        let c = gen_synthetic(SyntheticKind::PlantedCircular, 5, 12, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn planted_labels_follow_ring_response() {
        let d = gen_synthetic(SyntheticKind::PlantedCircular, 10, 12, 4).unwrap();
        let f = ring_filter();
        let tau = planted_threshold();
        for i in 0..d.len() {
            assert_eq!(usize::from(peak_response(d.image(i), 12, &f) > tau), d.labels()[i]);
        }
    }

    #[test]
    fn ring_filter_is_symmetric() {
        let f = ring_filter();
        for r in 0..5 {
            for c in 0..5 {
                assert!((f[r * 5 + c] - f[c * 5 + r]).abs() < 1e-12);
                assert!((f[r * 5 + c] - f[(4 - r) * 5 + c]).abs() < 1e-12);
            }
        }
        assert!((f.iter().sum::<f64>() - 16.0).abs() < 1e-12);
    }

    #[test]
    fn idx_errors() {
        assert!(parse_idx_images(&[]).is_err());
        let labels = [0u8, 0, 8, 1, 0, 0, 0, 2, 3, 4];
        assert_eq!(parse_idx_labels(&labels).unwrap(), vec![3, 4]);
        assert!(parse_idx_images(&labels).is_err());
        assert!(parse_idx_labels(&labels[..9]).is_err());
    }

    #[test]
    fn split_is_disjoint_and_complete() {
        let d = gen_synthetic(SyntheticKind::OrientedBars, 5, 10, 2).unwrap();
        let (a, b) = d.split_half(0, Split::Train, Split::Val);
        assert_eq!(a.len() + b.len(), 10);
        assert_eq!(a.len(), 5);
    }
}
