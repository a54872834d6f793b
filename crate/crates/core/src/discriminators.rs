//! Wasserstein critics over frames and flows.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::data_io::FlowField;
use crate::error::{Error, Result};
use crate::kernels::Padding;
use crate::nn::{Bound, Builder, Conv, Norm, ParamSet};
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.2;

/// Smallest input side. Four stride-2 convolutions leave `side / 16` pixels
/// per axis, and instance norm over a single pixel outputs its bias whatever
/// the input, which would make the score constant.
pub const MIN_SIDE: usize = 32;

/// Layer kinds in forward order; used by structural audits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CriticLayer {
    Conv,
    InstanceNorm,
    LeakyRelu,
    GlobalAvgPool,
    Linear,
}

/// Four stride-2 4x4 convolutions (`base, 2 base, 4 base, 8 base` channels)
/// with LeakyReLU and instance norm on all but the first, global average
/// pooling, and a linear map to a single unbounded score.
#[derive(Clone, Debug, PartialEq)]
pub struct Critic {
    pub params: ParamSet,
    convs: [Conv; 4],
    norms: [Norm; 3],
    head: Conv,
    in_channels: usize,
}

impl Critic {
    pub fn new<R: Rng + ?Sized>(prefix: &str, in_channels: usize, base: usize, rng: &mut R) -> Self {
        let mut b = Builder::new(rng);
        let widths = [in_channels, base, 2 * base, 4 * base, 8 * base];
        let convs = std::array::from_fn(|i| {
            b.conv(
                &format!("{prefix}.conv{}", i + 1),
                widths[i],
                widths[i + 1],
                4,
                2,
                Padding::same(1),
            )
        });
        let norms = std::array::from_fn(|i| b.norm(&format!("{prefix}.norm{}", i + 2), widths[i + 2]));
        let head = b.conv(&format!("{prefix}.linear"), 8 * base, 1, 1, 1, Padding::default());
        Self {
            params: b.finish(),
            convs,
            norms,
            head,
            in_channels,
        }
    }

    pub fn frame(base: usize, rng: &mut (impl Rng + ?Sized)) -> Self {
        Self::new("frame_critic", 3, base, rng)
    }

    pub fn flow(base: usize, rng: &mut (impl Rng + ?Sized)) -> Self {
        Self::new("flow_critic", 2, base, rng)
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn layers(&self) -> Vec<CriticLayer> {
        let mut out = Vec::new();
        for i in 0..self.convs.len() {
            out.push(CriticLayer::Conv);
            if i > 0 {
                out.push(CriticLayer::InstanceNorm);
            }
            out.push(CriticLayer::LeakyRelu);
        }
        out.push(CriticLayer::GlobalAvgPool);
        out.push(CriticLayer::Linear);
        out
    }

    /// Scalar score `[1, 1, 1]` on the tape.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let (c, h, w) = tape.value(x).chw();
        if c != self.in_channels || h < MIN_SIDE || w < MIN_SIDE {
            return Err(Error::Structural(format!(
                "critic expects {}xHxW with H, W >= {MIN_SIDE}, got {c}x{h}x{w}",
                self.in_channels
            )));
        }
        let mut x = x;
        for (i, conv) in self.convs.iter().enumerate() {
            x = conv.forward(tape, p, x)?;
            if i > 0 {
                x = self.norms[i - 1].forward(tape, p, x)?;
            }
            x = tape.leaky_relu(x, LEAKY_SLOPE);
        }
        let pooled = tape.global_avg_pool(x);
        self.head.forward(tape, p, pooled)
    }

    pub fn score(&self, input: &Tensor) -> Result<f64> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let x = tape.constant(input.clone());
        let s = self.forward(&mut tape, &p, x)?;
        Ok(tape.scalar(s))
    }

    /// Scores each element on its own; the critic has no cross-sample state.
    pub fn score_batch(&self, inputs: &[Tensor]) -> Result<Vec<f64>> {
        inputs.iter().map(|x| self.score(x)).collect()
    }

    pub fn clip(&mut self, bound: f64) {
        self.params.clamp(bound);
    }
}

pub fn discriminate_frame(image: &Tensor, critic: &Critic) -> Result<f64> {
    if critic.in_channels != 3 {
        return Err(Error::Structural("frame scoring needs a 3-channel critic".into()));
    }
    critic.score(image)
}

pub fn discriminate_flow(flow: &FlowField, critic: &Critic) -> Result<f64> {
    if critic.in_channels != 2 {
        return Err(Error::Structural("flow scoring needs a 2-channel critic".into()));
    }
    critic.score(flow.tensor())
}

/// Clamps every parameter (weights, biases, norm affines) to `[-c, c]`.
pub fn clip_weights(params: &ParamSet, bound: f64) -> ParamSet {
    let mut out = params.clone();
    out.clamp(bound);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weights_score_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut critic = Critic::frame(4, &mut rng);
        critic.params.fill(0.0);
        let x = Tensor::uniform(&[3, 32, 32], 1.0, &mut rng);
        assert_eq!(discriminate_frame(&x, &critic).unwrap(), 0.0);
    }

    #[test]
    fn score_depends_on_the_input_at_the_smallest_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let critic = Critic::frame(2, &mut rng);
        let a = Tensor::uniform(&[3, MIN_SIDE, MIN_SIDE], 1.0, &mut rng);
        let b = Tensor::uniform(&[3, MIN_SIDE, MIN_SIDE], 1.0, &mut rng);
        assert_ne!(critic.score(&a).unwrap(), critic.score(&b).unwrap());
    }

    #[test]
    fn no_terminal_squashing() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let critic = Critic::flow(4, &mut rng);
        assert_eq!(critic.layers().last(), Some(&CriticLayer::Linear));
        assert_eq!(critic.layers().iter().filter(|l| **l == CriticLayer::Conv).count(), 4);
    }

    #[test]
    fn clip_examples() {
        let mut p = ParamSet::new();
        p.push("w", Tensor::from_vec(&[3], vec![0.5, -0.003, -2.0]).unwrap());
        let c = clip_weights(&p, 0.01);
        assert_eq!(c.get(0).data(), [0.01, -0.003, -0.01]);
        assert_eq!(clip_weights(&c, 0.01), c);
    }

    #[test]
    fn rejects_wrong_channels_and_tiny_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let critic = Critic::frame(4, &mut rng);
        assert!(critic.score(&Tensor::zeros(&[2, 32, 32])).is_err());
        assert!(critic.score(&Tensor::zeros(&[3, 16, 16])).is_err());
        let flow_critic = Critic::flow(4, &mut rng);
        assert!(discriminate_frame(&Tensor::zeros(&[3, 32, 32]), &flow_critic).is_err());
    }
}
