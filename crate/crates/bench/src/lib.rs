//! Seeded fixtures shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rili_core::train::Example;
use rili_core::volume::{InputImage, InputMode, Volume};
use rili_core::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: impl Into<Vec<usize>>, seed: u64) -> Tensor<f32> {
    let shape = shape.into();
    let mut r = rng(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).expect("shape matches data")
}

/// Scores with roughly 30% ties and balanced labels.
pub fn scores_and_labels(n: usize, seed: u64) -> (Vec<f64>, Vec<u8>) {
    let mut r = rng(seed);
    let labels: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
    let scores = labels.iter().map(|&l| (f64::from(l) * 0.5 + r.random::<f64>() * 10.0).round() / 10.0).collect();
    (scores, labels)
}

pub fn phantom_volume(shape: [usize; 3], seed: u64) -> Volume {
    let mut r = rng(seed);
    let n = shape.iter().product();
    let voxels = (0..n).map(|_| r.random_range(-1000.0..200.0)).collect();
    let spacing = [0.7, 0.7, 2.5];
    let centre = [0, 1, 2].map(|a| (shape[a] - 1) as f64 * spacing[a] / 2.0);
    Volume::new(shape, spacing, [0.0; 3], centre, voxels).expect("valid volume")
}

pub fn examples(n: usize, resolution: usize, seed: u64) -> Vec<Example> {
    let mut r = rng(seed);
    (0..n)
        .map(|i| Example {
            scan_id: format!("s{i}"),
            label: (i % 2) as u8,
            image: InputImage {
                resolution,
                values: (0..3 * resolution * resolution).map(|_| r.random::<f32>()).collect(),
                provenance: InputMode::Orthogonal,
            },
        })
        .collect()
}
