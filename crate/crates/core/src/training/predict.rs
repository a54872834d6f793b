use std::fmt;
use std::str::FromStr;

use crate::config::Ablation;
use crate::data_io::{FlowField, FrameSequence};
use crate::error::{Error, Result};
use crate::model::{DualMotionGan, PredictionBundle};
use crate::tensor::Tensor;

/// Which bundle output is reported as the next frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PredictionMode {
    Fused,
    /// The frame generator's direct output.
    FrameOnly,
    /// The last input frame warped by the predicted flow.
    FlowOnly,
}

impl PredictionMode {
    /// The output a model trained under `ablation` actually learned.
    pub fn default_for(ablation: &Ablation) -> Self {
        match (ablation.frame_branch_on, ablation.flow_branch_on) {
            (true, false) => Self::FrameOnly,
            (false, true) => Self::FlowOnly,
            _ => Self::Fused,
        }
    }

    pub fn select<'a>(&self, bundle: &'a PredictionBundle) -> &'a Tensor {
        match self {
            Self::Fused => &bundle.fused_frame,
            Self::FrameOnly => &bundle.frame_pred,
            Self::FlowOnly => &bundle.warped_frame,
        }
    }

    pub const ALL: [Self; 3] = [Self::Fused, Self::FrameOnly, Self::FlowOnly];
}

impl fmt::Display for PredictionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Fused => "fused",
            Self::FrameOnly => "frame_only",
            Self::FlowOnly => "flow_only",
        })
    }
}

impl FromStr for PredictionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fused" => Ok(Self::Fused),
            "frame_only" | "frame" => Ok(Self::FrameOnly),
            "flow_only" | "flow" => Ok(Self::FlowOnly),
            other => Err(Error::Config(format!(
                "unknown prediction mode `{other}` (fused, frame_only, flow_only)"
            ))),
        }
    }
}

/// Test-time forward pass at the posterior mean (zero latent noise).
pub fn predict_next(model: &DualMotionGan, sequence: &FrameSequence) -> Result<PredictionBundle> {
    model.forward_bundle(sequence, None)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiStepPrediction {
    pub frames: Vec<Tensor>,
    pub flows: Vec<FlowField>,
}

/// Predicts `k` frames by sliding the input window over its own
/// predictions (the frame picked by `mode` is fed back).
pub fn predict_multi(
    model: &DualMotionGan,
    sequence: &FrameSequence,
    k: usize,
    mode: PredictionMode,
) -> Result<MultiStepPrediction> {
    if k == 0 {
        return Err(Error::Config("prediction horizon must be at least 1".into()));
    }
    let mut window: Vec<Tensor> = sequence.frames().to_vec();
    let mut out = MultiStepPrediction {
        frames: Vec::with_capacity(k),
        flows: Vec::with_capacity(k),
    };
    for _ in 0..k {
        let seq = FrameSequence::window(window.clone(), sequence.source_id.clone())?;
        let bundle = predict_next(model, &seq)?;
        let next = mode.select(&bundle).clone();
        window.remove(0);
        window.push(next.clone());
        out.frames.push(next);
        out.flows.push(bundle.flow_pred);
    }
    Ok(out)
}
