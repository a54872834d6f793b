//! Distances, the variational bound, the dual adversarial objectives and
//! their combination.

use std::fmt;
use std::str::FromStr;

use crate::autograd::{Tape, Var};
use crate::data_io::FlowField;
use crate::discriminators::Critic;
use crate::error::{Error, Result};
use crate::model::PredictionBundle;
use crate::motion_encoder::{kl_divergence, LatentDistribution};
use crate::nn::Bound;
use crate::tensor::Tensor;

/// Mean absolute difference over all elements.
pub fn l1_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.expect_same_dims(b)?;
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum();
    Ok(s / a.len() as f64)
}

/// Average endpoint error over pixels.
pub fn epe(f: &FlowField, g: &FlowField) -> Result<f64> {
    f.tensor().expect_same_dims(g.tensor())?;
    let s: f64 = f
        .u()
        .iter()
        .zip(f.v())
        .zip(g.u().iter().zip(g.v()))
        .map(|((fu, fv), (gu, gv))| (fu - gu).hypot(fv - gv))
        .sum();
    Ok(s / f.u().len() as f64)
}

/// Every logged objective term of one generator update.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub l1_frame: f64,
    pub l1_warp: f64,
    pub epe_flow_pred: f64,
    pub epe_flow_est: f64,
    pub kl: f64,
    pub gan_frame: f64,
    pub gan_flow: f64,
    pub lambda: f64,
    pub kl_weight: f64,
    /// Reconstruction error of the fused frame; trains only the fusion
    /// weights and is not part of `total`.
    pub l1_fused: f64,
    pub total: f64,
}

const FIELDS: [&str; 11] = [
    "l1_frame",
    "l1_warp",
    "epe_flow_pred",
    "epe_flow_est",
    "kl",
    "gan_frame",
    "gan_flow",
    "lambda",
    "kl_weight",
    "l1_fused",
    "total",
];

impl LossBreakdown {
    pub fn vae(&self) -> f64 {
        self.l1_frame + self.l1_warp + self.epe_flow_pred + self.epe_flow_est + self.kl_weight * self.kl
    }

    /// Recomputes `total` from the parts.
    pub fn with_total(mut self) -> Self {
        self.total = self.vae() + self.lambda * (self.gan_frame + self.gan_flow);
        self
    }

    fn values(&self) -> [f64; 11] {
        [
            self.l1_frame,
            self.l1_warp,
            self.epe_flow_pred,
            self.epe_flow_est,
            self.kl,
            self.gan_frame,
            self.gan_flow,
            self.lambda,
            self.kl_weight,
            self.l1_fused,
            self.total,
        ]
    }

    /// First non-finite term, if any.
    pub fn non_finite(&self) -> Option<(&'static str, f64)> {
        FIELDS.into_iter().zip(self.values()).find(|(_, v)| !v.is_finite())
    }
}

/// `key=value` pairs separated by spaces; floats use the shortest
/// representation that parses back to the same bits.
impl fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (k, v)) in FIELDS.into_iter().zip(self.values()).enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{k}={v:?}")?;
        }
        Ok(())
    }
}

impl FromStr for LossBreakdown {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut values = [None; 11];
        for pair in s.split_whitespace() {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("malformed log field `{pair}`")))?;
            let Some(i) = FIELDS.iter().position(|f| *f == k) else {
                continue;
            };
            values[i] = Some(
                v.parse::<f64>()
                    .map_err(|e| Error::Config(format!("field `{k}`: {e}")))?,
            );
        }
        let mut out = [0.0; 11];
        for (i, v) in values.into_iter().enumerate() {
            out[i] = v.ok_or_else(|| Error::Config(format!("log line lacks `{}`", FIELDS[i])))?;
        }
        Ok(Self {
            l1_frame: out[0],
            l1_warp: out[1],
            epe_flow_pred: out[2],
            epe_flow_est: out[3],
            kl: out[4],
            gan_frame: out[5],
            gan_flow: out[6],
            lambda: out[7],
            kl_weight: out[8],
            l1_fused: out[9],
            total: out[10],
        })
    }
}

/// Variational terms of a bundle; adversarial fields are zero and `total`
/// is the bound itself.
pub fn vae_loss(
    bundle: &PredictionBundle,
    true_frame: &Tensor,
    true_flow: &FlowField,
    dist: &LatentDistribution,
) -> Result<LossBreakdown> {
    Ok(LossBreakdown {
        l1_frame: l1_distance(true_frame, &bundle.frame_pred)?,
        l1_warp: l1_distance(true_frame, &bundle.warped_frame)?,
        epe_flow_pred: epe(true_flow, &bundle.flow_pred)?,
        epe_flow_est: epe(true_flow, &bundle.estimated_flow)?,
        kl: kl_divergence(dist),
        kl_weight: 1.0,
        l1_fused: l1_distance(true_frame, &bundle.fused_frame)?,
        ..Default::default()
    }
    .with_total())
}

/// `D(real) - mean_k D(fake_k)`. With two fakes this is the half-and-half
/// mixture of the dual objective; with one fake it is the plain WGAN value.
pub fn critic_objective(critic: &Critic, real: &Tensor, fakes: &[&Tensor]) -> Result<f64> {
    if fakes.is_empty() {
        return Err(Error::Structural("critic objective needs at least one fake".into()));
    }
    let mut value = critic.score(real)?;
    for fake in fakes {
        value -= critic.score(fake)? / fakes.len() as f64;
    }
    Ok(value)
}

pub fn gan_frame_objective(
    real_frame: &Tensor,
    frame_pred: &Tensor,
    warped_frame: &Tensor,
    critic: &Critic,
) -> Result<f64> {
    if critic.in_channels() != 3 {
        return Err(Error::Structural("frame objective needs the frame critic".into()));
    }
    critic_objective(critic, real_frame, &[frame_pred, warped_frame])
}

pub fn gan_flow_objective(
    real_flow: &FlowField,
    flow_pred: &FlowField,
    estimated_flow: &FlowField,
    critic: &Critic,
) -> Result<f64> {
    if critic.in_channels() != 2 {
        return Err(Error::Structural("flow objective needs the flow critic".into()));
    }
    critic_objective(
        critic,
        real_flow.tensor(),
        &[flow_pred.tensor(), estimated_flow.tensor()],
    )
}

/// Tape version of [`critic_objective`].
pub fn critic_objective_var(tape: &mut Tape, critic: &Critic, p: &Bound, real: Var, fakes: &[Var]) -> Result<Var> {
    if fakes.is_empty() {
        return Err(Error::Structural("critic objective needs at least one fake".into()));
    }
    let mut value = critic.forward(tape, p, real)?;
    let w = -1.0 / fakes.len() as f64;
    for &fake in fakes {
        let s = critic.forward(tape, p, fake)?;
        let s = tape.scale(s, w);
        value = tape.add(value, s)?;
    }
    Ok(value)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Objectives {
    /// Minimized by encoder, decoders and estimator; critics held fixed.
    pub generator: f64,
    /// Minimized by the frame critic (the negated frame objective).
    pub critic_frame: f64,
    pub critic_flow: f64,
}

pub fn total_objective(parts: &LossBreakdown, lambda: f64) -> Objectives {
    Objectives {
        generator: parts.vae() + lambda * (parts.gan_frame + parts.gan_flow),
        critic_frame: -parts.gan_frame,
        critic_flow: -parts.gan_flow,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn anchors() {
        let a = Tensor::zeros(&[3, 2, 2]);
        let b = Tensor::full(&[3, 2, 2], 0.1);
        assert_eq!(l1_distance(&a, &a).unwrap(), 0.0);
        assert!((l1_distance(&a, &b).unwrap() - 0.1).abs() < 1e-15);
        let f = FlowField::constant(4, 5, 3.0, 4.0);
        assert_eq!(epe(&f, &FlowField::zeros(4, 5)).unwrap(), 5.0);
        assert_eq!(epe(&f, &f).unwrap(), 0.0);
        assert!(l1_distance(&a, &Tensor::zeros(&[3, 2, 3])).is_err());
    }

    #[test]
    fn log_line_round_trips_bits() {
        let b = LossBreakdown {
            l1_frame: 0.1 + 0.2,
            l1_warp: 1e-300,
            epe_flow_pred: 3.0,
            epe_flow_est: 1.0 / 3.0,
            kl: 12.5,
            gan_frame: -0.000123,
            gan_flow: 7e10,
            lambda: 0.001,
            kl_weight: 1.0,
            l1_fused: 0.25,
            total: 0.0,
        }
        .with_total();
        let parsed: LossBreakdown = b.to_string().parse().unwrap();
        assert_eq!(parsed, b);
        assert!("l1_frame=1".parse::<LossBreakdown>().is_err());
    }

    #[test]
    fn objectives_decouple_at_zero_lambda() {
        let parts = LossBreakdown {
            l1_frame: 1.0,
            kl: 2.0,
            kl_weight: 1.0,
            gan_frame: 5.0,
            gan_flow: -1.0,
            ..Default::default()
        };
        let o = total_objective(&parts, 0.0);
        assert_eq!(o.generator, parts.vae());
        assert_eq!(o.critic_frame + parts.gan_frame, 0.0);
    }
}
