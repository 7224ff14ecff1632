//! Fixtures shared by the criterion benches.

use zskd_core::impressions::noise_images;
use zskd_core::rng::rng_from_seed;
use zskd_core::Tensor;

/// `count` seeded noise images at LeNet input size.
pub fn noise_batch(count: usize, seed: u64) -> Tensor {
    noise_images(count, [32, 32, 1], &mut rng_from_seed(seed))
}

/// Sharp softmax targets cycling through the 10 classes.
pub fn cyclic_targets(count: usize) -> Tensor {
    let mut data = vec![0.01; count * 10];
    for i in 0..count {
        data[i * 10 + i % 10] = 0.91;
    }
    Tensor::new([count, 10], data).expect("shape matches length")
}
