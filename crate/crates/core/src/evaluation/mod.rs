//! Frame metrics, flow endpoint errors, the copy-last baseline, multi-step
//! curves and the linear representation probe.

pub mod metrics;
pub mod probe;

use std::fmt::{self, Write as _};
use std::path::Path;

use serde::Serialize;

use crate::data_io::{FlowField, FrameSequence, LoadedSequence};
use crate::error::{Error, Result};
use crate::generators::estimate_flow;
use crate::losses::epe;
use crate::model::DualMotionGan;
use crate::tensor::Tensor;
use crate::training::{predict_multi, PredictionMode};

pub use metrics::{
    frame_scores, gaussian_taps, grayscale, mse, psnr, psnr_from_mse, ssim, to_unit_range, FrameScores, PSNR_CAP_DB,
    SSIM_SIGMA, SSIM_WINDOW,
};
pub use probe::{fit_softmax, representation_probe, LinearProbe, ProbeReport, ProbeSettings};

/// The last observed frame, used as the prediction at every horizon.
pub fn copy_last_baseline(sequence: &FrameSequence) -> Tensor {
    sequence.last().clone()
}

/// A row of the report: a model output or the baseline.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Model(PredictionMode),
    CopyLast,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Model(m) => m.fmt(f),
            Self::CopyLast => f.write_str("copy_last"),
        }
    }
}

impl Serialize for Method {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MethodMetrics {
    pub method: Method,
    /// Mean over sequences, indexed like `MetricsReport::horizons`.
    pub per_horizon: Vec<FrameScores>,
    /// `[sequence][horizon]`.
    pub per_sequence: Vec<Vec<FrameScores>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct FlowMetrics {
    /// Predicted next flow against ground truth.
    pub epe_prediction: f64,
    /// Estimator on the true frame pair against ground truth.
    pub epe_estimation: f64,
    /// The all-zero flow against ground truth.
    pub epe_zero_flow: f64,
    pub per_sequence: Vec<[f64; 3]>,
}

/// Lower is better for `mse` and `epe_*`; higher is better for `psnr` and `ssim`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub horizons: Vec<usize>,
    pub window: usize,
    pub sequences: Vec<String>,
    pub methods: Vec<MethodMetrics>,
    pub flow: Option<FlowMetrics>,
}

impl MetricsReport {
    pub fn method(&self, method: Method) -> Option<&MethodMetrics> {
        self.methods.iter().find(|m| m.method == method)
    }

    /// Mean scores at the first horizon.
    pub fn next_frame(&self, method: Method) -> Option<FrameScores> {
        self.method(method).and_then(|m| m.per_horizon.first().copied())
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{} sequences, window {}, orientation: mse/epe lower is better, psnr/ssim higher is better",
            self.sequences.len(),
            self.window
        );
        let _ = writeln!(
            s,
            "{:<12} {:>7} {:>12} {:>9} {:>8}",
            "method", "horizon", "mse", "psnr_db", "ssim"
        );
        for m in &self.methods {
            for (h, sc) in self.horizons.iter().zip(&m.per_horizon) {
                let _ = writeln!(
                    s,
                    "{:<12} {:>7} {:>12.6} {:>9.3} {:>8.4}",
                    m.method.to_string(),
                    h,
                    sc.mse,
                    sc.psnr,
                    sc.ssim
                );
            }
        }
        if let Some(f) = &self.flow {
            let _ = writeln!(s, "epe_prediction {:.4}", f.epe_prediction);
            let _ = writeln!(s, "epe_estimation {:.4}", f.epe_estimation);
            let _ = writeln!(s, "epe_zero_flow  {:.4}", f.epe_zero_flow);
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Columnar text for one metric: a `horizon` column, then one column per method.
    pub fn curve(&self, metric: &str) -> Result<String> {
        let pick = |sc: &FrameScores| match metric {
            "mse" => Ok(sc.mse),
            "psnr" => Ok(sc.psnr),
            "ssim" => Ok(sc.ssim),
            other => Err(Error::Config(format!("unknown metric `{other}`"))),
        };
        let mut s = String::from("horizon");
        for m in &self.methods {
            let _ = write!(s, "\t{}", m.method);
        }
        s.push('\n');
        for (i, h) in self.horizons.iter().enumerate() {
            let _ = write!(s, "{h}");
            for m in &self.methods {
                let _ = write!(s, "\t{:?}", pick(&m.per_horizon[i])?);
            }
            s.push('\n');
        }
        Ok(s)
    }

    /// Writes `metrics.txt`, `metrics.json` and `curve_{mse,psnr,ssim}.tsv`.
    pub fn write_files(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("metrics.txt"), self.to_table())?;
        std::fs::write(dir.join("metrics.json"), self.to_json())?;
        for metric in ["mse", "psnr", "ssim"] {
            std::fs::write(dir.join(format!("curve_{metric}.tsv")), self.curve(metric)?)?;
        }
        Ok(())
    }
}

/// Evaluates the first `window` frames of every sequence as input and the
/// following `max(horizons)` frames as targets.
pub fn evaluate_dataset(
    model: &DualMotionGan,
    sequences: &[LoadedSequence],
    window: usize,
    horizons: &[usize],
    modes: &[PredictionMode],
) -> Result<MetricsReport> {
    if sequences.is_empty() {
        return Err(Error::Dataset("evaluation split is empty".into()));
    }
    if horizons.is_empty() || horizons.contains(&0) {
        return Err(Error::Config(
            "horizons must be a non-empty list of positive integers".into(),
        ));
    }
    let max_h = *horizons.iter().max().expect("non-empty");
    let mut methods: Vec<MethodMetrics> = modes
        .iter()
        .map(|&m| Method::Model(m))
        .chain([Method::CopyLast])
        .map(|method| MethodMetrics {
            method,
            per_horizon: Vec::new(),
            per_sequence: Vec::new(),
        })
        .collect();
    let with_flow = sequences.iter().all(|s| s.flows.is_some());
    let mut flow = with_flow.then(FlowMetrics::default);
    let mut ids = Vec::new();
    for seq in sequences {
        let frames = seq.frames.frames();
        if frames.len() < window + max_h {
            return Err(Error::Dataset(format!(
                "sequence `{}` has {} frames; window {window} + horizon {max_h} needed",
                seq.frames.source_id,
                frames.len()
            )));
        }
        ids.push(seq.frames.source_id.clone());
        let input = seq.frames.slice(0, window)?;
        let targets = &frames[window..window + max_h];
        let mut first_flow = None;
        for m in &mut methods {
            let preds: Vec<Tensor> = match m.method {
                Method::Model(mode) => {
                    let out = predict_multi(model, &input, max_h, mode)?;
                    first_flow.get_or_insert(out.flows[0].clone());
                    out.frames
                }
                Method::CopyLast => vec![copy_last_baseline(&input); max_h],
            };
            let scores = horizons
                .iter()
                .map(|&h| frame_scores(&preds[h - 1], &targets[h - 1]))
                .collect::<Result<Vec<_>>>()?;
            m.per_sequence.push(scores);
        }
        if let (Some(acc), Some(gt)) = (flow.as_mut(), seq.flows.as_ref()) {
            let truth = &gt[window - 1];
            let predicted = match first_flow {
                Some(f) => f,
                None => model.forward_bundle(&input, None)?.flow_pred,
            };
            let estimated = estimate_flow(&frames[window - 1], &frames[window], &model.estimator)?;
            let zero = FlowField::zeros(truth.height(), truth.width());
            acc.per_sequence
                .push([epe(truth, &predicted)?, epe(truth, &estimated)?, epe(truth, &zero)?]);
        }
    }
    let n = sequences.len() as f64;
    for m in &mut methods {
        m.per_horizon = (0..horizons.len())
            .map(|i| {
                let mut acc = FrameScores::default();
                for s in &m.per_sequence {
                    acc.mse += s[i].mse / n;
                    acc.psnr += s[i].psnr / n;
                    acc.ssim += s[i].ssim / n;
                }
                acc
            })
            .collect();
    }
    if let Some(f) = flow.as_mut() {
        f.epe_prediction = f.per_sequence.iter().map(|e| e[0]).sum::<f64>() / n;
        f.epe_estimation = f.per_sequence.iter().map(|e| e[1]).sum::<f64>() / n;
        f.epe_zero_flow = f.per_sequence.iter().map(|e| e[2]).sum::<f64>() / n;
    }
    Ok(MetricsReport {
        horizons: horizons.to_vec(),
        window,
        sequences: ids,
        methods,
        flow,
    })
}
