//! Fixtures shared by the benchmarks.

use dualmotion::data_io::{generate_moving_shapes, LoadedSequence, SceneSampler};
use dualmotion::training::{samples_from, Sample};
use dualmotion::{FrameSequence, ModelConfig};

/// The small network used by the end-to-end checks.
pub fn desk_model() -> ModelConfig {
    ModelConfig {
        conv_widths: [8, 16, 16],
        latent_channels: 16,
        lstm_kernel: 4,
        critic_base: 8,
    }
}

pub fn sequence(size: usize, frames: usize, seed: u64) -> LoadedSequence {
    let sampler = SceneSampler {
        canvas: [size, size],
        num_frames: frames,
        direction: Some(seed as usize % 8),
        ..Default::default()
    };
    let spec = sampler.sample(seed).expect("scene fits");
    let (frames, flows) = generate_moving_shapes(&spec).expect("scene renders");
    LoadedSequence {
        frames,
        flows: Some(flows),
        label: Some(seed as usize % 8),
    }
}

/// First `window` frames of a synthetic sequence.
pub fn window(size: usize, window: usize, seed: u64) -> FrameSequence {
    sequence(size, window + 1, seed)
        .frames
        .slice(0, window)
        .expect("long enough")
}

pub fn samples(n: usize, size: usize, window: usize) -> Vec<Sample> {
    (0..n as u64)
        .flat_map(|i| samples_from(&sequence(size, window + 2, i), window))
        .collect()
}
