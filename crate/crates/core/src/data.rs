//! Synthetic class-conditional texture images.
//!
//! Class `k` draws an oriented sinusoidal grating inside a patch at a
//! class-specific cell of a 3×3 layout. Phase is random per image, so the mean
//! pixel pattern of every class is flat: telling classes apart needs texture
//! detection (local path) and where it happens (global path).

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::io::{self, Stored};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const NOISE_STD: f64 = 0.25;
pub const PERIOD: f64 = 4.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    /// `n×S×S×3`.
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub seed: u64,
    pub classes: usize,
    pub side: usize,
}

/// Cell (row, col) of the 3×3 layout and grating angle for class `k`.
pub fn class_pattern(k: usize, classes: usize) -> ((usize, usize), f64) {
    let cell = k % 9;
    ((cell / 3, cell % 3), PI * k as f64 / classes as f64)
}

pub fn gen_synthetic(seed: u64, n: usize, classes: usize, side: usize) -> Result<SyntheticDataset> {
    if classes < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {classes}")));
    }
    if n == 0 || side == 0 || !side.is_multiple_of(8) {
        return Err(Error::Config(format!("need n > 0 and side divisible by 8, got n={n} side={side}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, NOISE_STD).expect("valid std");
    let patch = side * 3 / 8;
    let cell = side / 3;
    let mut data = Vec::with_capacity(n * side * side * 3);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % classes;
        labels.push(k);
        let ((cr, cc), theta) = class_pattern(k, classes);
        let phase = rng.random_range(0.0..2.0 * PI);
        let slack = cell.saturating_sub(patch).max(1);
        let y0 = (cr * cell + rng.random_range(0..slack)).min(side - patch);
        let x0 = (cc * cell + rng.random_range(0..slack)).min(side - patch);
        let (s, c) = theta.sin_cos();
        for y in 0..side {
            for x in 0..side {
                let inside = (y0..y0 + patch).contains(&y) && (x0..x0 + patch).contains(&x);
                let signal = if inside {
                    (2.0 * PI / PERIOD * (x as f64 * c + y as f64 * s) + phase).sin()
                } else {
                    0.0
                };
                for _ in 0..3 {
                    data.push((signal + noise.sample(&mut rng)) as f32);
                }
            }
        }
    }
    Ok(SyntheticDataset {
        images: Tensor::new(vec![n, side, side, 3], data)?,
        labels,
        seed,
        classes,
        side,
    })
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image<T: Scalar>(&self, i: usize) -> Result<Tensor<T>> {
        if i >= self.len() {
            return Err(Error::OutOfRange { index: i, len: self.len() });
        }
        let per = self.side * self.side * 3;
        let pixels = &self.images.data()[i * per..(i + 1) * per];
        Tensor::new(
            vec![self.side, self.side, 3],
            pixels.iter().map(|&v| T::from_f64_lossy(v as f64)).collect(),
        )
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        self.labels.iter().for_each(|&l| h[l] += 1);
        h
    }

    /// Samples reordered by `order`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let per = self.side * self.side * 3;
        let mut data = Vec::with_capacity(self.images.len());
        let mut labels = Vec::with_capacity(order.len());
        for &i in order {
            if i >= self.len() {
                return Err(Error::OutOfRange { index: i, len: self.len() });
            }
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        Ok(SyntheticDataset {
            images: Tensor::new(vec![order.len(), self.side, self.side, 3], data)?,
            labels,
            ..self.clone()
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = vec![self.seed as u32, (self.seed >> 32) as u32, self.classes as u32];
        io::write_file(
            path,
            &[
                ("images".into(), Stored::F32(self.images.clone())),
                (
                    "labels".into(),
                    Stored::U32 {
                        shape: vec![self.len()],
                        data: self.labels.iter().map(|&l| l as u32).collect(),
                    },
                ),
                ("meta".into(), Stored::U32 { shape: vec![3], data: meta }),
            ],
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let entries = io::read_file(path)?;
        let get = |name: &str| {
            entries
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, s)| s)
                .ok_or_else(|| Error::Format(format!("dataset cache lacks `{name}`")))
        };
        let images: Tensor<f32> = get("images")?.to_tensor("images")?;
        let labels: Vec<usize> = get("labels")?.as_u32("labels")?.iter().map(|&l| l as usize).collect();
        let meta = get("meta")?.as_u32("meta")?;
        let (n, side) = match *images.shape() {
            [n, h, w, 3] if h == w => (n, h),
            ref s => return Err(Error::Format(format!("images have shape {s:?}, expected n×S×S×3"))),
        };
        if labels.len() != n || meta.len() != 3 {
            return Err(Error::Format("labels or meta do not match images".into()));
        }
        let classes = meta[2] as usize;
        if labels.iter().any(|&l| l >= classes) {
            return Err(Error::Format("label outside class range".into()));
        }
        Ok(SyntheticDataset {
            images,
            labels,
            seed: meta[0] as u64 | (meta[1] as u64) << 32,
            classes,
            side,
        })
    }
}

/// `−log softmax(logits)[label]`, computed stably.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, label: usize) -> Result<f64> {
    let z = logits.to_f64_vec();
    if label >= z.len() {
        return Err(Error::OutOfRange { index: label, len: z.len() });
    }
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    Ok(lse - z[label])
}

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax<T: Scalar>(logits: &Tensor<T>) -> usize {
    let mut best = 0;
    for (i, &v) in logits.data().iter().enumerate() {
        if v > logits.data()[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_balanced() {
        let a = gen_synthetic(3, 80, 8, 32).unwrap();
        let b = gen_synthetic(3, 80, 8, 32).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.class_histogram(), vec![10; 8]);
        let c = gen_synthetic(4, 80, 8, 32).unwrap();
        assert_ne!(a.images, c.images);
    }

    #[test]
    fn invalid_sizes() {
        assert!(gen_synthetic(0, 10, 1, 32).is_err());
        assert!(gen_synthetic(0, 10, 8, 30).is_err());
        assert!(gen_synthetic(0, 0, 8, 32).is_err());
    }

    #[test]
    fn cache_round_trip() {
        let d = gen_synthetic(u64::MAX - 5, 16, 4, 16).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.bin");
        d.save(&p).unwrap();
        assert_eq!(SyntheticDataset::load(&p).unwrap(), d);
    }

    #[test]
    fn cross_entropy_values() {
        let uniform = Tensor::<f64>::zeros(vec![8]);
        assert!((cross_entropy(&uniform, 3).unwrap() - 8f64.ln()).abs() < 1e-12);
        let mut peaked = vec![0.0; 8];
        peaked[0] = 20.0;
        let peaked = Tensor::new(vec![8], peaked).unwrap();
        assert!(cross_entropy(&peaked, 0).unwrap() < 1e-7);
        assert!(cross_entropy(&peaked, 8).is_err());
    }

    #[test]
    fn argmax_ties_to_lowest() {
        let t = Tensor::new(vec![4], vec![1.0f32, 3.0, 3.0, 0.0]).unwrap();
        assert_eq!(argmax(&t), 1);
        assert_eq!(argmax(&Tensor::<f32>::zeros(vec![5])), 0);
    }
}
