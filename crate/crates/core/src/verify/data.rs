//! Seeded synthetic two-class data.

use super::matrix::Matrix;
use super::net::Batch;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// `samples` points in `dims` dimensions from two unit-variance Gaussian
/// blobs centred at `∓separation/2` on every axis. Labels alternate 0, 1.
pub fn two_blobs(samples: usize, dims: usize, separation: f64, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let labels: Vec<usize> = (0..samples).map(|i| i % 2).collect();
    let mut x = Matrix::zeros(samples, dims);
    for (r, &label) in labels.iter().enumerate() {
        let centre = if label == 1 {
            separation / 2.0
        } else {
            -separation / 2.0
        };
        for c in 0..dims {
            x.set(r, c, centre + noise.sample(&mut rng));
        }
    }
    Batch { x, labels }
}

/// Cuts a dataset into consecutive batches of `size` samples, dropping a
/// short tail.
pub fn batches(data: &Batch, size: usize) -> Vec<Batch> {
    if size == 0 {
        return Vec::new();
    }
    (0..data.len() / size)
        .map(|k| data.slice(k * size..(k + 1) * size))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_and_balanced() {
        let a = two_blobs(10, 3, 4.0, 7);
        assert_eq!(a, two_blobs(10, 3, 4.0, 7));
        assert_ne!(a, two_blobs(10, 3, 4.0, 8));
        assert_eq!(a.labels.iter().filter(|&&l| l == 1).count(), 5);
        assert_eq!(batches(&a, 4).len(), 2);
    }
}
