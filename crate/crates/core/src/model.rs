//! The full network: encoder, both decoders, estimator, fusion and critics.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::config::ModelConfig;
use crate::data_io::{FlowField, FrameSequence};
use crate::discriminators::Critic;
use crate::error::{Error, Result};
use crate::generators::{Decoder, FlowEstimator, Fusion};
use crate::motion_encoder::{reparameterize, LatentDistribution, LatentVars, MotionEncoder};
use crate::nn::{Bound, ParamSet};
use crate::tensor::Tensor;

/// The five outputs of one forward pass; images in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionBundle {
    pub frame_pred: Tensor,
    pub flow_pred: FlowField,
    pub warped_frame: Tensor,
    pub estimated_flow: FlowField,
    pub fused_frame: Tensor,
}

/// Which decoder branches a forward pass evaluates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Branches {
    pub frame: bool,
    pub flow: bool,
}

impl Branches {
    pub const BOTH: Self = Self {
        frame: true,
        flow: true,
    };
}

#[derive(Clone, Copy, Debug)]
pub struct BundleVars {
    pub latent: LatentVars,
    pub z: Var,
    pub frame_pred: Option<Var>,
    pub flow_pred: Option<Var>,
    pub warped: Option<Var>,
    pub estimated: Option<Var>,
    /// Fusion output over detached copies of both predictions, so its loss
    /// only ever reaches the fusion weights.
    pub fused: Option<Var>,
}

pub struct GeneratorBinding {
    pub encoder: Bound,
    pub frame: Bound,
    pub flow: Bound,
    pub estimator: Bound,
    pub fusion: Bound,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DualMotionGan {
    pub config: ModelConfig,
    pub encoder: MotionEncoder,
    pub frame_generator: Decoder,
    pub flow_generator: Decoder,
    pub estimator: FlowEstimator,
    pub fusion: Fusion,
    pub frame_critic: Critic,
    pub flow_critic: Critic,
}

pub const GROUP_NAMES: [&str; 7] = [
    "encoder",
    "frame_generator",
    "flow_generator",
    "estimator",
    "fusion",
    "frame_critic",
    "flow_critic",
];

impl DualMotionGan {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            config: config.clone(),
            encoder: MotionEncoder::new(config, &mut rng),
            frame_generator: Decoder::frame(config, &mut rng),
            flow_generator: Decoder::flow(config, &mut rng),
            estimator: FlowEstimator::new(config, &mut rng),
            fusion: Fusion::new(&mut rng),
            frame_critic: Critic::frame(config.critic_base, &mut rng),
            flow_critic: Critic::flow(config.critic_base, &mut rng),
        })
    }

    pub fn groups(&self) -> [(&'static str, &ParamSet); 7] {
        [
            (GROUP_NAMES[0], &self.encoder.params),
            (GROUP_NAMES[1], &self.frame_generator.params),
            (GROUP_NAMES[2], &self.flow_generator.params),
            (GROUP_NAMES[3], &self.estimator.params),
            (GROUP_NAMES[4], &self.fusion.params),
            (GROUP_NAMES[5], &self.frame_critic.params),
            (GROUP_NAMES[6], &self.flow_critic.params),
        ]
    }

    pub fn groups_mut(&mut self) -> [(&'static str, &mut ParamSet); 7] {
        [
            (GROUP_NAMES[0], &mut self.encoder.params),
            (GROUP_NAMES[1], &mut self.frame_generator.params),
            (GROUP_NAMES[2], &mut self.flow_generator.params),
            (GROUP_NAMES[3], &mut self.estimator.params),
            (GROUP_NAMES[4], &mut self.fusion.params),
            (GROUP_NAMES[5], &mut self.frame_critic.params),
            (GROUP_NAMES[6], &mut self.flow_critic.params),
        ]
    }

    /// Checksum over encoder, decoders, estimator and fusion.
    pub fn generator_checksum(&self) -> u64 {
        combine(self.groups()[..5].iter().map(|(_, p)| p.checksum()))
    }

    pub fn critic_checksum(&self) -> u64 {
        combine(self.groups()[5..].iter().map(|(_, p)| p.checksum()))
    }

    pub fn num_scalars(&self) -> usize {
        self.groups().iter().map(|(_, p)| p.num_scalars()).sum()
    }

    /// Sets every parameter of every group to zero.
    pub fn zero_all(&mut self) {
        for (_, p) in self.groups_mut() {
            p.fill(0.0);
        }
    }

    pub fn bind_generators(&self, tape: &mut Tape, trainable: bool) -> GeneratorBinding {
        GeneratorBinding {
            encoder: self.encoder.params.bind(tape, trainable),
            frame: self.frame_generator.params.bind(tape, trainable),
            flow: self.flow_generator.params.bind(tape, trainable),
            estimator: self.estimator.params.bind(tape, trainable),
            fusion: self.fusion.params.bind(tape, trainable),
        }
    }

    /// Encoder, reparameterized sample (or the mean when `noise` is `None`),
    /// the enabled decoders and their coupling operators.
    pub fn forward_vars(
        &self,
        tape: &mut Tape,
        b: &GeneratorBinding,
        frames: &[Var],
        noise: Option<Tensor>,
        branches: Branches,
    ) -> Result<BundleVars> {
        let last = *frames
            .last()
            .ok_or_else(|| Error::Structural("empty input window".into()))?;
        let latent = self.encoder.forward(tape, &b.encoder, frames)?;
        let z = match noise {
            Some(eps) => reparameterize(tape, latent, eps)?,
            None => latent.mean,
        };
        let mut out = BundleVars {
            latent,
            z,
            frame_pred: None,
            flow_pred: None,
            warped: None,
            estimated: None,
            fused: None,
        };
        if branches.frame {
            let frame = self.frame_generator.forward(tape, &b.frame, z)?;
            out.estimated = Some(self.estimator.forward(tape, &b.estimator, last, frame)?);
            out.frame_pred = Some(frame);
        }
        if branches.flow {
            let flow = self.flow_generator.forward(tape, &b.flow, z)?;
            out.warped = Some(tape.warp(last, flow)?);
            out.flow_pred = Some(flow);
        }
        if let (Some(frame), Some(warped)) = (out.frame_pred, out.warped) {
            let a = tape.constant(tape.value(frame).clone());
            let w = tape.constant(tape.value(warped).clone());
            out.fused = Some(self.fusion.forward(tape, &b.fusion, a, w)?);
        }
        Ok(out)
    }

    pub fn forward_bundle(&self, sequence: &FrameSequence, noise: Option<&Tensor>) -> Result<PredictionBundle> {
        Ok(self.forward_with_latent(sequence, noise)?.0)
    }

    /// Forward pass that also returns the encoded distribution.
    pub fn forward_with_latent(
        &self,
        sequence: &FrameSequence,
        noise: Option<&Tensor>,
    ) -> Result<(PredictionBundle, LatentDistribution)> {
        let mut tape = Tape::new();
        let b = self.bind_generators(&mut tape, false);
        let frames: Vec<Var> = sequence.frames().iter().map(|f| tape.constant(f.clone())).collect();
        let v = self.forward_vars(&mut tape, &b, &frames, noise.cloned(), Branches::BOTH)?;
        let get = |x: Option<Var>| tape.value(x.expect("both branches evaluated")).clone();
        let bundle = PredictionBundle {
            frame_pred: get(v.frame_pred),
            flow_pred: FlowField::new(get(v.flow_pred))?,
            warped_frame: get(v.warped),
            estimated_flow: FlowField::new(get(v.estimated))?,
            fused_frame: get(v.fused),
        };
        let dist = LatentDistribution {
            mean: tape.value(v.latent.mean).clone(),
            log_variance: tape.value(v.latent.log_var).clone(),
        };
        Ok((bundle, dist))
    }

    /// Posterior mean of the latent code, pooled over space: one feature per
    /// latent channel.
    pub fn pooled_features(&self, sequence: &FrameSequence) -> Result<Vec<f64>> {
        let dist = self.encoder.encode(sequence)?;
        let (d, _, _) = dist.mean.chw();
        Ok((0..d)
            .map(|c| {
                let ch = dist.mean.channel(c);
                ch.iter().sum::<f64>() / ch.len() as f64
            })
            .collect())
    }
}

fn combine(parts: impl Iterator<Item = u64>) -> u64 {
    parts.fold(0xcbf2_9ce4_8422_2325, |acc, p| (acc ^ p).wrapping_mul(0x0100_0000_01b3))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            conv_widths: [4, 4, 4],
            latent_channels: 4,
            lstm_kernel: 4,
            critic_base: 2,
        }
    }

    fn sequence(seed: u64) -> FrameSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames = (0..3).map(|_| Tensor::uniform(&[3, 16, 16], 1.0, &mut rng)).collect();
        FrameSequence::window(frames, "test").unwrap()
    }

    #[test]
    fn zero_model_passes_last_frame_through_the_warp() {
        let mut model = DualMotionGan::new(&cfg(), 0).unwrap();
        model.zero_all();
        let seq = sequence(1);
        let noise = Tensor::full(&[4, 2, 2], 0.7);
        let b = model.forward_bundle(&seq, Some(&noise)).unwrap();
        assert_eq!(b.frame_pred.max_abs(), 0.0);
        assert_eq!(b.flow_pred.max_magnitude(), 0.0);
        assert_eq!(b.estimated_flow.max_magnitude(), 0.0);
        assert!(b.warped_frame.max_abs_diff(seq.last()) < 1e-12);
        assert_eq!(b.fused_frame.max_abs(), 0.0);
    }

    #[test]
    fn bundle_shapes_and_determinism() {
        let model = DualMotionGan::new(&cfg(), 3).unwrap();
        let seq = sequence(2);
        let a = model.forward_bundle(&seq, None).unwrap();
        assert_eq!(a.frame_pred.dims(), [3, 16, 16]);
        assert_eq!(a.flow_pred.tensor().dims(), [2, 16, 16]);
        assert_eq!(a.warped_frame.dims(), [3, 16, 16]);
        assert_eq!(a.estimated_flow.tensor().dims(), [2, 16, 16]);
        assert_eq!(a.fused_frame.dims(), [3, 16, 16]);
        assert_eq!(model.forward_bundle(&seq, None).unwrap(), a);
    }

    #[test]
    fn checksums_separate_generator_and_critic_groups() {
        let mut model = DualMotionGan::new(&cfg(), 3).unwrap();
        let (g, c) = (model.generator_checksum(), model.critic_checksum());
        model.frame_critic.params.tensors_mut()[0].data_mut()[0] += 1.0;
        assert_eq!(model.generator_checksum(), g);
        assert_ne!(model.critic_checksum(), c);
    }
}
