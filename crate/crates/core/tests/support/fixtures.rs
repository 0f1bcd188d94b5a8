//! Small deterministic models and records for property and acceptance tests.

#![allow(dead_code)]

use std::sync::Arc;

use cloakbench::attacks::{AdvRecord, Method};
use cloakbench::models::{build_model, ArchitectureDescriptor, Classifier, LayerSpec};
use cloakbench::pipeline::{ContrastDetector, Detector, PassThrough, TransformChain};
use cloakbench::raster::Image;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// One conv block on `side x side` input.
pub fn tiny_descriptor(name: &str, side: usize, classes: usize) -> ArchitectureDescriptor {
    let pooled = side / 2;
    ArchitectureDescriptor {
        name: name.to_string(),
        input_size: side,
        layers: vec![
            LayerSpec::Conv2d {
                in_channels: 3,
                out_channels: 4,
                kernel: 3,
                stride: 1,
                padding: 1,
            },
            LayerSpec::Relu,
            LayerSpec::MaxPool { kernel: 2, stride: 2 },
            LayerSpec::Flatten,
            LayerSpec::Dense {
                in_features: 4 * pooled * pooled,
                out_features: classes,
            },
        ],
        num_classes: classes,
    }
}

pub fn tiny_model(name: &str, side: usize, classes: usize, seed: u64) -> Classifier {
    build_model(&tiny_descriptor(name, side, classes), seed).unwrap()
}

pub fn random_image(rng: &mut ChaCha8Rng, side: usize) -> Image {
    Image::new(
        side,
        side,
        (0..side * side * 3).map(|_| rng.gen_range(0.0f32..=255.0)).collect(),
    )
    .unwrap()
}

/// A record whose adversarial image is `x` plus bounded noise.
pub fn fake_record(rng: &mut ChaCha8Rng, index: usize, side: usize, classes: usize, epsilon: f32) -> AdvRecord {
    let x = random_image(rng, side);
    let mut x_adv = x.clone();
    for v in x_adv.data_mut() {
        *v = (*v + rng.gen_range(-epsilon..=epsilon)).clamp(0.0, 255.0);
    }
    AdvRecord {
        index,
        source: "src".into(),
        method: Method::Bim,
        epsilon,
        n_iter_used: 1,
        y_true: rng.gen_range(0..classes),
        y_target: None,
        max_deviation: x_adv.max_abs_diff(&x),
        x,
        x_adv,
        losses: None,
    }
}

/// A randomized transform chain: optional JPEG, optional resize and either
/// detector.
pub fn random_chain(rng: &mut ChaCha8Rng, source_side: usize, target_side: usize) -> TransformChain {
    let quality = if rng.gen_bool(0.5) {
        Some(rng.gen_range(30..=100u8))
    } else {
        None
    };
    let detector: Arc<dyn Detector> = if rng.gen_bool(0.5) {
        Arc::new(PassThrough)
    } else {
        Arc::new(ContrastDetector {
            min_std: rng.gen_range(0.0..80.0),
        })
    };
    TransformChain::cross_model(quality, source_side, target_side, detector)
}
