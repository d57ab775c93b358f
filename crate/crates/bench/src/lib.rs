//! Fixtures shared by the benchmarks.

use lesionpaint::nn::Tensor;
use lesionpaint::{generate_phantom, ImageGrid, Mask, PhantomSpec};

/// Deterministic pseudo-random tensor with values in `[-1, 1)`.
pub fn tensor(shape: &[usize], seed: u32) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    let mut s = seed.wrapping_mul(2_654_435_761).max(1);
    let data = (0..n)
        .map(|_| {
            s ^= s << 13;
            s ^= s >> 17;
            s ^= s << 5;
            (s as f32 / u32::MAX as f32) * 2.0 - 1.0
        })
        .collect();
    Tensor::new(shape.to_vec(), data)
}

/// A lesioned phantom in model space and its lesion mask.
pub fn phantom(size: usize) -> (ImageGrid, Mask) {
    let spec = PhantomSpec { size, ..PhantomSpec::default() };
    let p = generate_phantom(7, &spec).expect("default phantom spec is valid");
    (p.lesioned.to_model_space(), p.lesion_mask)
}
