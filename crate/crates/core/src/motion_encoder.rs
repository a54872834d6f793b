//! Recurrent probabilistic motion encoder.
//!
//! Each frame goes through three stride-2 convolutions and one stride-1
//! convolution (total downsampling x8), then a ConvLSTM accumulates the
//! sequence. Two ConvLSTM heads run alongside it on its hidden state; their
//! last outputs, read out by 1x1 convolutions, are the mean and log-variance
//! maps of a diagonal Gaussian over the latent motion code.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::config::ModelConfig;
use crate::data_io::{FrameSequence, SPATIAL_MULTIPLE};
use crate::error::{Error, Result};
use crate::kernels::Padding;
use crate::nn::{Bound, Builder, Conv, ConvLstm, LstmState, Norm, ParamSet};
use crate::tensor::Tensor;
use crate::util::rng_for;

/// Spatial mean and log-variance maps `[D, H/8, W/8]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentDistribution {
    pub mean: Tensor,
    pub log_variance: Tensor,
}

/// A draw `z` together with the standard-normal noise that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode {
    pub z: Tensor,
    pub source_noise: Tensor,
}

/// Tape handles of an encoded distribution.
#[derive(Clone, Copy, Debug)]
pub struct LatentVars {
    pub mean: Var,
    pub log_var: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MotionEncoder {
    pub params: ParamSet,
    convs: [Conv; 4],
    norms: [Norm; 4],
    lstm: ConvLstm,
    mean_head: ConvLstm,
    var_head: ConvLstm,
    mean_out: Conv,
    var_out: Conv,
    latent: usize,
}

impl MotionEncoder {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let [w1, w2, w3] = cfg.conv_widths;
        let d = cfg.latent_channels;
        let k = cfg.lstm_kernel;
        let mut b = Builder::new(rng);
        let down = Padding::same(1);
        let convs = [
            b.conv("enc.conv1", 3, w1, 4, 2, down),
            b.conv("enc.conv2", w1, w2, 4, 2, down),
            b.conv("enc.conv3", w2, w3, 4, 2, down),
            b.conv("enc.conv4", w3, d, 3, 1, Padding::same(1)),
        ];
        let norms = [
            b.norm("enc.norm1", w1),
            b.norm("enc.norm2", w2),
            b.norm("enc.norm3", w3),
            b.norm("enc.norm4", d),
        ];
        let lstm = b.conv_lstm("enc.lstm", d, d, k);
        let mean_head = b.conv_lstm("enc.mean_lstm", d, d, k);
        let var_head = b.conv_lstm("enc.var_lstm", d, d, k);
        let mean_out = b.conv("enc.mean_out", d, d, 1, 1, Padding::default());
        let var_out = b.conv("enc.var_out", d, d, 1, 1, Padding::default());
        Self {
            params: b.finish(),
            convs,
            norms,
            lstm,
            mean_head,
            var_head,
            mean_out,
            var_out,
            latent: d,
        }
    }

    pub fn latent_channels(&self) -> usize {
        self.latent
    }

    /// Per-frame feature extractor.
    pub fn features(&self, tape: &mut Tape, p: &Bound, frame: Var) -> Result<Var> {
        let mut x = frame;
        for (conv, norm) in self.convs.iter().zip(&self.norms) {
            x = conv.forward(tape, p, x)?;
            x = norm.forward(tape, p, x)?;
            x = tape.relu(x);
        }
        Ok(x)
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, frames: &[Var]) -> Result<LatentVars> {
        let first = frames
            .first()
            .ok_or_else(|| Error::Structural("encoder needs at least one frame".into()))?;
        let (c, h, w) = tape.value(*first).chw();
        if c != 3 || h % SPATIAL_MULTIPLE != 0 || w % SPATIAL_MULTIPLE != 0 || h == 0 || w == 0 {
            return Err(Error::Structural(format!(
                "encoder input {c}x{h}x{w} must be 3 x (multiple of {SPATIAL_MULTIPLE})^2"
            )));
        }
        let (lh, lw) = (h / SPATIAL_MULTIPLE, w / SPATIAL_MULTIPLE);
        let mut state = self.lstm.zero_state(tape, lh, lw);
        let mut mean_state = self.mean_head.zero_state(tape, lh, lw);
        let mut var_state = self.var_head.zero_state(tape, lh, lw);
        for &frame in frames {
            if tape.value(frame).dims() != [c, h, w] {
                return Err(Error::Structural("frames in a window differ in shape".into()));
            }
            let feat = self.features(tape, p, frame)?;
            state = self.lstm.step(tape, p, feat, state)?;
            mean_state = self.mean_head.step(tape, p, state.hidden, mean_state)?;
            var_state = self.var_head.step(tape, p, state.hidden, var_state)?;
        }
        let (mean_h, var_h) = (mean_state.hidden, var_state.hidden);
        Ok(LatentVars {
            mean: self.mean_out.forward(tape, p, mean_h)?,
            log_var: self.var_out.forward(tape, p, var_h)?,
        })
    }

    /// Deterministic encoding of a sequence.
    pub fn encode(&self, sequence: &FrameSequence) -> Result<LatentDistribution> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let frames: Vec<Var> = sequence.frames().iter().map(|f| tape.constant(f.clone())).collect();
        let out = self.forward(&mut tape, &p, &frames)?;
        Ok(LatentDistribution {
            mean: tape.value(out.mean).clone(),
            log_variance: tape.value(out.log_var).clone(),
        })
    }

    /// The temporal ConvLSTM cell, for driving a single step directly.
    pub fn temporal_cell(&self) -> ConvLstm {
        self.lstm
    }
}

/// One ConvLSTM update outside a full encoder pass.
pub fn conv_lstm_step(
    cell: &ConvLstm,
    params: &ParamSet,
    input: &Tensor,
    hidden: &Tensor,
    memory: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false);
    let x = tape.constant(input.clone());
    let state = LstmState {
        hidden: tape.constant(hidden.clone()),
        cell: tape.constant(memory.clone()),
    };
    let next = cell.step(&mut tape, &p, x, state)?;
    Ok((tape.value(next.hidden).clone(), tape.value(next.cell).clone()))
}

/// `z = mean + exp(log_var / 2) * noise` on the tape.
pub fn reparameterize(tape: &mut Tape, latent: LatentVars, noise: Tensor) -> Result<Var> {
    let eps = tape.constant(noise);
    let half = tape.scale(latent.log_var, 0.5);
    let std = tape.exp(half);
    let spread = tape.mul(std, eps)?;
    tape.add(latent.mean, spread)
}

pub fn sample(dist: &LatentDistribution, noise: &Tensor) -> Result<LatentCode> {
    dist.mean.expect_same_dims(&dist.log_variance)?;
    dist.mean.expect_same_dims(noise)?;
    let data = dist
        .mean
        .data()
        .iter()
        .zip(dist.log_variance.data())
        .zip(noise.data())
        .map(|((m, l), e)| m + (0.5 * l).exp() * e)
        .collect();
    Ok(LatentCode {
        z: Tensor::from_vec(dist.mean.dims(), data)?,
        source_noise: noise.clone(),
    })
}

/// Draws standard-normal noise from `seed` and reparameterizes.
pub fn sample_seeded(dist: &LatentDistribution, seed: u64) -> Result<LatentCode> {
    let mut rng = rng_for(seed, 0);
    let noise = Tensor::standard_normal(dist.mean.dims(), &mut rng);
    sample(dist, &noise)
}

/// Closed-form `KL(N(mean, exp(log_var)) || N(0, I))`, summed over elements.
pub fn kl_divergence(dist: &LatentDistribution) -> f64 {
    dist.mean
        .data()
        .iter()
        .zip(dist.log_variance.data())
        .map(|(&m, &l)| 0.5 * (m * m + l.exp() - l - 1.0))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> ModelConfig {
        ModelConfig {
            conv_widths: [4, 4, 4],
            latent_channels: 3,
            lstm_kernel: 4,
            critic_base: 4,
        }
    }

    #[test]
    fn zero_cell_stays_at_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut enc = MotionEncoder::new(&small(), &mut rng);
        enc.params.fill(0.0);
        let z = Tensor::zeros(&[3, 4, 4]);
        let (h, c) = conv_lstm_step(&enc.temporal_cell(), &enc.params, &z, &z, &z).unwrap();
        assert_eq!(h.max_abs(), 0.0);
        assert_eq!(c.max_abs(), 0.0);
    }

    #[test]
    fn rejects_sizes_not_divisible_by_eight() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = MotionEncoder::new(&small(), &mut rng);
        let mut tape = Tape::new();
        let p = enc.params.bind(&mut tape, false);
        let f = tape.constant(Tensor::zeros(&[3, 12, 16]));
        assert!(matches!(enc.forward(&mut tape, &p, &[f]), Err(Error::Structural(_))));
    }

    #[test]
    fn vanishing_variance_returns_mean() {
        let mean = Tensor::from_vec(&[1, 1, 2], vec![0.3, -2.0]).unwrap();
        let dist = LatentDistribution {
            mean: mean.clone(),
            log_variance: Tensor::full(&[1, 1, 2], -40.0),
        };
        let code = sample(&dist, &Tensor::full(&[1, 1, 2], 3.0)).unwrap();
        assert!(code.z.max_abs_diff(&mean) < 1e-8);
        let code = sample(&dist, &Tensor::zeros(&[1, 1, 2])).unwrap();
        assert_eq!(code.z, mean);
    }

    #[test]
    fn kl_closed_form_anchors() {
        let prior = LatentDistribution {
            mean: Tensor::zeros(&[2, 2, 2]),
            log_variance: Tensor::zeros(&[2, 2, 2]),
        };
        assert_eq!(kl_divergence(&prior), 0.0);
        let one = LatentDistribution {
            mean: Tensor::full(&[1, 1, 1], 1.0),
            log_variance: Tensor::zeros(&[1, 1, 1]),
        };
        assert_eq!(kl_divergence(&one), 0.5);
    }
}
