//! Frame and flow decoders, the flow estimator, the warping layer and the
//! 1x1 fusion.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::config::ModelConfig;
use crate::data_io::FlowField;
use crate::error::{Error, Result};
use crate::kernels::Padding;
use crate::nn::{Bound, Builder, Conv, Deconv, Norm, ParamSet};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputActivation {
    Tanh,
    Linear,
}

/// Five 3x3 transposed convolutions: three stride-2 layers (x8 upsampling)
/// followed by two stride-1 refinements.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    pub params: ParamSet,
    deconvs: [Deconv; 5],
    norms: [Norm; 4],
    latent: usize,
    out_channels: usize,
    activation: OutputActivation,
}

impl Decoder {
    pub fn new<R: Rng + ?Sized>(
        prefix: &str,
        cfg: &ModelConfig,
        out_channels: usize,
        activation: OutputActivation,
        rng: &mut R,
    ) -> Self {
        let [w1, w2, w3] = cfg.conv_widths;
        let d = cfg.latent_channels;
        let mut b = Builder::new(rng);
        let widths = [d, w3, w2, w1, w1, out_channels];
        let strides = [2, 2, 2, 1, 1];
        let deconvs = std::array::from_fn(|i| {
            b.deconv(
                &format!("{prefix}.deconv{}", i + 1),
                widths[i],
                widths[i + 1],
                3,
                strides[i],
            )
        });
        let norms = std::array::from_fn(|i| b.norm(&format!("{prefix}.norm{}", i + 1), widths[i + 1]));
        Self {
            params: b.finish(),
            deconvs,
            norms,
            latent: d,
            out_channels,
            activation,
        }
    }

    pub fn frame(cfg: &ModelConfig, rng: &mut (impl Rng + ?Sized)) -> Self {
        Self::new("frame_gen", cfg, 3, OutputActivation::Tanh, rng)
    }

    pub fn flow(cfg: &ModelConfig, rng: &mut (impl Rng + ?Sized)) -> Self {
        Self::new("flow_gen", cfg, 2, OutputActivation::Linear, rng)
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn activation(&self) -> OutputActivation {
        self.activation
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, z: Var) -> Result<Var> {
        let c = tape.value(z).chw().0;
        if c != self.latent {
            return Err(Error::Structural(format!(
                "decoder expects {} latent channels, got {c}",
                self.latent
            )));
        }
        let mut x = z;
        for (i, deconv) in self.deconvs.iter().enumerate() {
            x = deconv.forward(tape, p, x)?;
            if let Some(norm) = self.norms.get(i) {
                x = norm.forward(tape, p, x)?;
                x = tape.relu(x);
            }
        }
        Ok(match self.activation {
            OutputActivation::Tanh => tape.tanh(x),
            OutputActivation::Linear => x,
        })
    }

    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let z = tape.constant(z.clone());
        let out = self.forward(&mut tape, &p, z)?;
        Ok(tape.value(out).clone())
    }
}

/// Four convolutions down (x8) and four transposed convolutions back up,
/// over the channel concatenation of the previous and candidate frames.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowEstimator {
    pub params: ParamSet,
    convs: [Conv; 4],
    deconvs: [Deconv; 4],
    norms: [Norm; 7],
}

impl FlowEstimator {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let [w1, w2, w3] = cfg.conv_widths;
        let mut b = Builder::new(rng);
        let down = Padding::same(1);
        let convs = [
            b.conv("estimator.conv1", 6, w1, 4, 2, down),
            b.conv("estimator.conv2", w1, w2, 4, 2, down),
            b.conv("estimator.conv3", w2, w3, 4, 2, down),
            b.conv("estimator.conv4", w3, w3, 3, 1, Padding::same(1)),
        ];
        let deconvs = [
            b.deconv("estimator.deconv1", w3, w2, 3, 2),
            b.deconv("estimator.deconv2", w2, w1, 3, 2),
            b.deconv("estimator.deconv3", w1, w1, 3, 2),
            b.deconv("estimator.deconv4", w1, 2, 3, 1),
        ];
        let norm_widths = [w1, w2, w3, w3, w2, w1, w1];
        let norms = std::array::from_fn(|i| b.norm(&format!("estimator.norm{}", i + 1), norm_widths[i]));
        Self {
            params: b.finish(),
            convs,
            deconvs,
            norms,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, prev: Var, candidate: Var) -> Result<Var> {
        let (a, b) = (tape.value(prev), tape.value(candidate));
        if a.dims() != b.dims() || a.chw().0 != 3 {
            return Err(Error::Structural(format!(
                "estimator frames must both be 3xHxW, got {:?} and {:?}",
                a.dims(),
                b.dims()
            )));
        }
        let mut x = tape.concat_channels(&[prev, candidate])?;
        let mut norms = self.norms.iter();
        for conv in &self.convs {
            x = conv.forward(tape, p, x)?;
            x = norms.next().expect("norm per layer").forward(tape, p, x)?;
            x = tape.relu(x);
        }
        for deconv in &self.deconvs {
            x = deconv.forward(tape, p, x)?;
            if let Some(norm) = norms.next() {
                x = norm.forward(tape, p, x)?;
                x = tape.relu(x);
            }
        }
        Ok(x)
    }
}

/// 1x1 convolution from the 6 stacked channels of the two frame predictions
/// to 3 channels, then tanh. Starts as the plain average of both inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Fusion {
    pub params: ParamSet,
    conv: Conv,
}

impl Fusion {
    pub fn new<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut b = Builder::new(rng);
        let conv = b.conv("fusion.conv", 6, 3, 1, 1, Padding::default());
        let mut params = b.finish();
        let w = params.tensors_mut()[conv.weight].data_mut();
        w.fill(0.0);
        for o in 0..3 {
            w[o * 6 + o] = 0.5;
            w[o * 6 + o + 3] = 0.5;
        }
        Self { params, conv }
    }

    /// Index of the `[3, 6, 1, 1]` weight in `params`.
    pub fn weight_index(&self) -> usize {
        self.conv.weight
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, frame_pred: Var, warped: Var) -> Result<Var> {
        let (a, b) = (tape.value(frame_pred), tape.value(warped));
        if a.dims() != b.dims() || a.chw().0 != 3 {
            return Err(Error::Structural(format!(
                "fusion inputs must both be 3xHxW, got {:?} and {:?}",
                a.dims(),
                b.dims()
            )));
        }
        let x = tape.concat_channels(&[frame_pred, warped])?;
        let y = self.conv.forward(tape, p, x)?;
        Ok(tape.tanh(y))
    }
}

fn check_latent(z: &Tensor) -> Result<()> {
    if z.dims().len() != 3 {
        return Err(Error::Structural(format!(
            "latent code must be [D, h, w], got {:?}",
            z.dims()
        )));
    }
    Ok(())
}

pub fn generate_frame(z: &Tensor, decoder: &Decoder) -> Result<Tensor> {
    check_latent(z)?;
    decoder.decode(z)
}

pub fn generate_flow(z: &Tensor, decoder: &Decoder) -> Result<FlowField> {
    check_latent(z)?;
    FlowField::new(decoder.decode(z)?)
}

pub fn estimate_flow(prev: &Tensor, candidate: &Tensor, estimator: &FlowEstimator) -> Result<FlowField> {
    let mut tape = Tape::new();
    let p = estimator.params.bind(&mut tape, false);
    let a = tape.constant(prev.clone());
    let b = tape.constant(candidate.clone());
    let out = estimator.forward(&mut tape, &p, a, b)?;
    FlowField::new(tape.value(out).clone())
}

/// Backward bilinear warp: `out(x, y) = source(x + u, y + v)` with border
/// replication.
pub fn warp(source: &Tensor, flow: &FlowField) -> Result<Tensor> {
    let mut tape = Tape::new();
    let s = tape.constant(source.clone());
    let f = tape.constant(flow.tensor().clone());
    let out = tape.warp(s, f)?;
    Ok(tape.value(out).clone())
}

pub fn fuse(frame_pred: &Tensor, warped: &Tensor, fusion: &Fusion) -> Result<Tensor> {
    let mut tape = Tape::new();
    let p = fusion.params.bind(&mut tape, false);
    let a = tape.constant(frame_pred.clone());
    let b = tape.constant(warped.clone());
    let out = fusion.forward(&mut tape, &p, a, b)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> ModelConfig {
        ModelConfig {
            conv_widths: [4, 6, 8],
            latent_channels: 5,
            lstm_kernel: 4,
            critic_base: 4,
        }
    }

    #[test]
    fn decoders_upsample_by_eight() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = Tensor::standard_normal(&[5, 2, 3], &mut rng);
        let frame = generate_frame(&z, &Decoder::frame(&cfg(), &mut rng)).unwrap();
        assert_eq!(frame.dims(), [3, 16, 24]);
        assert!(frame.data().iter().all(|v| v.abs() <= 1.0));
        let flow = generate_flow(&z, &Decoder::flow(&cfg(), &mut rng)).unwrap();
        assert_eq!((flow.height(), flow.width()), (16, 24));
    }

    #[test]
    fn wrong_latent_width_is_structural() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dec = Decoder::frame(&cfg(), &mut rng);
        let z = Tensor::zeros(&[4, 2, 2]);
        assert!(matches!(generate_frame(&z, &dec), Err(Error::Structural(_))));
    }

    #[test]
    fn estimator_keeps_resolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let est = FlowEstimator::new(&cfg(), &mut rng);
        let a = Tensor::uniform(&[3, 16, 16], 1.0, &mut rng);
        let b = Tensor::uniform(&[3, 16, 16], 1.0, &mut rng);
        let flow = estimate_flow(&a, &b, &est).unwrap();
        assert_eq!((flow.height(), flow.width()), (16, 16));
        assert!(estimate_flow(&a, &Tensor::zeros(&[3, 8, 16]), &est).is_err());
    }

    #[test]
    fn fusion_starts_as_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let fusion = Fusion::new(&mut rng);
        let a = Tensor::uniform(&[3, 4, 4], 0.9, &mut rng);
        let b = Tensor::uniform(&[3, 4, 4], 0.9, &mut rng);
        let out = fuse(&a, &b, &fusion).unwrap();
        let want = a.zip_map(&b, |x, y| (0.5 * (x + y)).tanh()).unwrap();
        assert!(out.max_abs_diff(&want) < 1e-12);
    }
}
