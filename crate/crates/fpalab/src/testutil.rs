//! Small fixtures shared across unit tests: a linearly separable two-class
//! image task and a two-block CNN that learns it in a few seconds.

use crate::data::Dataset;
use crate::seeds::rng_from_seed;
use crate::tensor::Tensor;
use crate::zoo::arch::{ArchSpec, ConvBlock, ConvNetSpec, ImageDims};
use rand::Rng;

/// Tiny two-class dataset: class 0 = bright left half, class 1 = bright
/// right half, plus noise — linearly separable and fast to learn.
pub(crate) fn halves_dataset(n: usize, seed: u64) -> Dataset {
    let mut rng = rng_from_seed(seed);
    let (h, w) = (8usize, 8usize);
    let mut data = vec![0.0f32; n * h * w];
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = (i % 2) as u8;
        labels.push(label);
        let img = &mut data[i * h * w..(i + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let bright = if label == 0 { x < w / 2 } else { x >= w / 2 };
                let base: f32 = if bright { 0.8 } else { 0.1 };
                img[y * w + x] = (base + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0);
            }
        }
    }
    Dataset::new(Tensor::new(vec![n, 1, h, w], data).unwrap(), labels, 2).unwrap()
}

pub(crate) fn tiny_cnn_spec() -> ArchSpec {
    ArchSpec::ConvNet(ConvNetSpec {
        name: "tiny".to_string(),
        input: ImageDims {
            channels: 1,
            height: 8,
            width: 8,
        },
        num_classes: 2,
        blocks: vec![
            ConvBlock {
                channels: 4,
                stride: 1,
                residual: false,
            },
            ConvBlock {
                channels: 8,
                stride: 2,
                residual: false,
            },
        ],
    })
}
