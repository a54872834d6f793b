//! Frozen-encoder linear probe: softmax regression on spatially pooled
//! posterior-mean features.

use serde::Serialize;

use crate::data_io::{FrameSequence, LoadedSequence};
use crate::error::{Error, Result};
use crate::model::DualMotionGan;

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeSettings {
    pub window: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub l2: f64,
    /// Seed of the randomly initialized reference encoder.
    pub random_seed: u64,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        Self {
            window: 4,
            iterations: 500,
            learning_rate: 0.5,
            l2: 1e-3,
            random_seed: 0x5eed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeReport {
    pub classes: usize,
    pub train_examples: usize,
    pub test_examples: usize,
    /// Held-out accuracy with the given encoder.
    pub accuracy: f64,
    /// Same probe on a randomly initialized encoder of the same shape.
    pub random_init_accuracy: f64,
}

/// Multinomial logistic regression with standardized inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// `[class][feature]`, bias last.
    weights: Vec<Vec<f64>>,
}

impl LinearProbe {
    fn standardized(&self, x: &[f64]) -> Vec<f64> {
        let mut z: Vec<f64> = x
            .iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect();
        z.push(1.0);
        z
    }

    fn logits(&self, z: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .map(|w| w.iter().zip(z).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let l = self.logits(&self.standardized(x));
        let mut best = 0;
        for (k, v) in l.iter().enumerate() {
            if *v > l[best] {
                best = k;
            }
        }
        best
    }

    pub fn accuracy(&self, xs: &[Vec<f64>], ys: &[usize]) -> f64 {
        let hits = xs.iter().zip(ys).filter(|(x, y)| self.predict(x) == **y).count();
        hits as f64 / xs.len().max(1) as f64
    }
}

fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        s += *x;
    }
    for x in v.iter_mut() {
        *x /= s;
    }
}

/// Full-batch gradient descent from zero weights; deterministic.
pub fn fit_softmax(xs: &[Vec<f64>], ys: &[usize], classes: usize, settings: &ProbeSettings) -> Result<LinearProbe> {
    if classes < 2 {
        return Err(Error::Probe(format!("need at least 2 classes, got {classes}")));
    }
    let n = xs.len();
    let d = xs.first().map_or(0, |x| x.len());
    if n == 0 || d == 0 || ys.len() != n || ys.iter().any(|&y| y >= classes) {
        return Err(Error::Probe("empty feature set or labels out of range".into()));
    }
    let mean: Vec<f64> = (0..d)
        .map(|j| xs.iter().map(|x| x[j]).sum::<f64>() / n as f64)
        .collect();
    let scale: Vec<f64> = (0..d)
        .map(|j| {
            let var = xs.iter().map(|x| (x[j] - mean[j]).powi(2)).sum::<f64>() / n as f64;
            if var > 1e-24 {
                var.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let mut probe = LinearProbe {
        mean,
        scale,
        weights: vec![vec![0.0; d + 1]; classes],
    };
    let zs: Vec<Vec<f64>> = xs.iter().map(|x| probe.standardized(x)).collect();
    for _ in 0..settings.iterations {
        let mut grad = vec![vec![0.0; d + 1]; classes];
        for (z, &y) in zs.iter().zip(ys) {
            let mut p = probe.logits(z);
            softmax_in_place(&mut p);
            p[y] -= 1.0;
            for (g, pk) in grad.iter_mut().zip(&p) {
                for (gj, zj) in g.iter_mut().zip(z) {
                    *gj += pk * zj / n as f64;
                }
            }
        }
        for (w, g) in probe.weights.iter_mut().zip(&grad) {
            for (j, (wj, gj)) in w.iter_mut().zip(g).enumerate() {
                let decay = if j < d { settings.l2 * *wj } else { 0.0 };
                *wj -= settings.learning_rate * (gj + decay);
            }
        }
    }
    Ok(probe)
}

/// Every input window of every labeled sequence.
fn features(model: &DualMotionGan, seqs: &[LoadedSequence], window: usize) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for s in seqs {
        let label = s
            .label
            .ok_or_else(|| Error::Probe(format!("sequence `{}` has no label", s.frames.source_id)))?;
        let frames = s.frames.frames();
        if frames.len() < window {
            return Err(Error::Probe(format!(
                "sequence `{}` shorter than the window",
                s.frames.source_id
            )));
        }
        for start in 0..=frames.len() - window {
            let w = FrameSequence::window(frames[start..start + window].to_vec(), s.frames.source_id.clone())?;
            xs.push(model.pooled_features(&w)?);
            ys.push(label);
        }
    }
    Ok((xs, ys))
}

/// Trains the probe on `train` and reports accuracy on `test`, for `model`'s
/// encoder and for a fresh random encoder of the same shape.
pub fn representation_probe(
    model: &DualMotionGan,
    train: &[LoadedSequence],
    test: &[LoadedSequence],
    settings: &ProbeSettings,
) -> Result<ProbeReport> {
    let (xs, ys) = features(model, train, settings.window)?;
    let (tx, ty) = features(model, test, settings.window)?;
    let classes = ys.iter().chain(&ty).max().map_or(0, |m| m + 1);
    let distinct = {
        let mut l = ys.clone();
        l.sort_unstable();
        l.dedup();
        l.len()
    };
    if distinct < 2 {
        return Err(Error::Probe(format!(
            "training labels span {distinct} class(es); need at least 2"
        )));
    }
    let accuracy = fit_softmax(&xs, &ys, classes, settings)?.accuracy(&tx, &ty);
    let random = DualMotionGan::new(&model.config, settings.random_seed)?;
    let (rx, ry) = features(&random, train, settings.window)?;
    let (rtx, rty) = features(&random, test, settings.window)?;
    let random_init_accuracy = fit_softmax(&rx, &ry, classes, settings)?.accuracy(&rtx, &rty);
    Ok(ProbeReport {
        classes,
        train_examples: xs.len(),
        test_examples: tx.len(),
        accuracy,
        random_init_accuracy,
    })
}
