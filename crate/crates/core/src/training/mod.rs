//! Alternating critic/generator optimization, checkpoints and test-time
//! prediction.

mod checkpoint;
mod predict;

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, RngExt};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::config::{Ablation, TrainingConfig};
use crate::data_io::{FlowField, LoadedSequence};
use crate::discriminators::Critic;
use crate::error::{Error, Result};
use crate::losses::{critic_objective_var, LossBreakdown};
use crate::model::{Branches, DualMotionGan};
use crate::nn::RmsProp;
use crate::tensor::Tensor;
use crate::util::rng_for;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use predict::{predict_multi, predict_next, MultiStepPrediction, PredictionMode};

/// One supervised example: an input window, the next frame and the flow
/// that warps the window's last frame onto it.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub window: Vec<Tensor>,
    pub target: Tensor,
    pub flow: Option<FlowField>,
}

/// Every window of `window` consecutive frames that has a successor.
pub fn samples_from(seq: &LoadedSequence, window: usize) -> Vec<Sample> {
    let frames = seq.frames.frames();
    if window == 0 || frames.len() <= window {
        return Vec::new();
    }
    (window..frames.len())
        .map(|t| Sample {
            window: frames[t - window..t].to_vec(),
            target: frames[t].clone(),
            flow: seq.flows.as_ref().map(|f| f[t - 1].clone()),
        })
        .collect()
}

/// Optimizer state for every parameter group, in model group order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub groups: Vec<RmsProp>,
}

impl OptimizerState {
    pub fn new(model: &DualMotionGan) -> Self {
        Self {
            groups: model.groups().iter().map(|(_, p)| RmsProp::new(p)).collect(),
        }
    }
}

/// Critic objectives measured during a critic update (`None`: critic off).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CriticScores {
    pub frame: Option<f64>,
    pub flow: Option<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct UpdateCounts {
    pub frame_critic: u64,
    pub flow_critic: u64,
    /// Critic optimizer steps (one step updates every active critic).
    pub critic: u64,
    pub generator: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub losses: LossBreakdown,
    pub critic: Vec<CriticScores>,
}

impl StepRecord {
    /// One plain-text log line.
    pub fn log_line(&self) -> String {
        format!("step={} {}", self.step, self.losses)
    }
}

pub fn parse_log_line(line: &str) -> Result<(u64, LossBreakdown)> {
    let rest = line
        .strip_prefix("step=")
        .ok_or_else(|| Error::Config(format!("log line does not start with step=: `{line}`")))?;
    let (step, rest) = rest.split_once(' ').unwrap_or((rest, ""));
    let step = step
        .parse()
        .map_err(|e| Error::Config(format!("bad step in log line: {e}")))?;
    Ok((step, rest.parse()?))
}

const TRAIN_SEED_SALT: u64 = 0x0074_7261_696e;

pub struct Trainer {
    pub config: TrainingConfig,
    pub model: DualMotionGan,
    pub optimizer: OptimizerState,
    /// Completed generator updates.
    pub step: u64,
    pub counts: UpdateCounts,
    samples: Vec<Sample>,
}

impl Trainer {
    pub fn new(config: TrainingConfig, samples: Vec<Sample>) -> Result<Self> {
        config.validate()?;
        let model = DualMotionGan::new(&config.model, config.seed)?;
        Self::with_model(config, model, samples)
    }

    pub fn with_model(config: TrainingConfig, model: DualMotionGan, samples: Vec<Sample>) -> Result<Self> {
        config.validate()?;
        if samples.is_empty() {
            return Err(Error::Dataset(
                "no training windows (sequences shorter than window + 1?)".into(),
            ));
        }
        if model.config != config.model {
            return Err(Error::Config("model layout differs from the training config".into()));
        }
        let ab = config.ablation;
        if ab.frame_gan_on || ab.flow_gan_on {
            let min = crate::discriminators::MIN_SIDE;
            if let Some(s) = samples
                .iter()
                .find(|s| s.target.chw().1 < min || s.target.chw().2 < min)
            {
                let (_, h, w) = s.target.chw();
                return Err(Error::Dataset(format!(
                    "frames are {h}x{w}; the critics need at least {min}x{min} (or disable both adversarial terms)"
                )));
            }
        }
        let optimizer = OptimizerState::new(&model);
        Ok(Self {
            config,
            model,
            optimizer,
            step: 0,
            counts: UpdateCounts::default(),
            samples,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint, samples: Vec<Sample>) -> Result<Self> {
        let mut t = Self::with_model(ckpt.config, ckpt.model, samples)?;
        t.optimizer = ckpt.optimizer;
        t.step = ckpt.step;
        t.counts = ckpt.counts;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            model: self.model.clone(),
            optimizer: self.optimizer.clone(),
            step: self.step,
            counts: self.counts,
        }
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    /// The random stream of generator update `step`; it depends only on the
    /// seed and the step, so a resumed run replays it exactly.
    pub fn step_rng(&self, step: u64) -> ChaCha8Rng {
        rng_for(self.config.seed ^ TRAIN_SEED_SALT, step)
    }

    fn draw_batch<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<usize> {
        (0..self.config.batch_size)
            .map(|_| rng.random_range(0..self.samples.len()))
            .collect()
    }

    fn draw_noise<R: Rng + ?Sized>(&self, rng: &mut R, sample: &Sample) -> Option<Tensor> {
        let (_, h, w) = sample.target.chw();
        let dims = [self.model.config.latent_channels, h / 8, w / 8];
        let eps = Tensor::standard_normal(&dims, rng);
        self.config.ablation.encoder_probabilistic_on.then_some(eps)
    }

    /// Five critic updates followed by one generator update.
    pub fn train_step(&mut self) -> Result<StepRecord> {
        let mut rng = self.step_rng(self.step);
        let mut critic = Vec::with_capacity(self.config.critic_steps_per_gen_step);
        for _ in 0..self.config.critic_steps_per_gen_step {
            let batch = self.draw_batch(&mut rng);
            let noise: Vec<_> = batch
                .iter()
                .map(|&i| self.draw_noise(&mut rng, &self.samples[i]))
                .collect();
            critic.push(self.critic_step(&batch, &noise)?);
        }
        let batch = self.draw_batch(&mut rng);
        let noise: Vec<_> = batch
            .iter()
            .map(|&i| self.draw_noise(&mut rng, &self.samples[i]))
            .collect();
        let losses = self.generator_step(&batch, &noise)?;
        self.step += 1;
        Ok(StepRecord {
            step: self.step,
            losses,
            critic,
        })
    }

    /// One RMSprop update of the active critics on a fresh forward pass,
    /// followed by clipping. Generator weights enter as constants.
    pub fn critic_step(&mut self, batch: &[usize], noise: &[Option<Tensor>]) -> Result<CriticScores> {
        let ab = self.config.ablation;
        let frame_on = ab.frame_gan_on;
        let flow_on = ab.flow_gan_on && batch.iter().all(|&i| self.samples[i].flow.is_some());
        if !frame_on && !flow_on {
            return Ok(CriticScores::default());
        }
        let mut grads_frame: Option<Vec<Tensor>> = None;
        let mut grads_flow: Option<Vec<Tensor>> = None;
        let mut scores = CriticScores {
            frame: frame_on.then_some(0.0),
            flow: flow_on.then_some(0.0),
        };
        let inv = 1.0 / batch.len() as f64;
        for (&i, eps) in batch.iter().zip(noise) {
            let sample = &self.samples[i];
            let mut tape = Tape::new();
            let gb = self.model.bind_generators(&mut tape, false);
            let frames: Vec<Var> = sample.window.iter().map(|f| tape.constant(f.clone())).collect();
            let v = self
                .model
                .forward_vars(&mut tape, &gb, &frames, eps.clone(), branches(&ab))?;
            if frame_on {
                let fakes: Vec<Var> = [v.frame_pred, v.warped].into_iter().flatten().collect();
                let real = tape.constant(sample.target.clone());
                let (g, s) = critic_update_grads(&mut tape, &self.model.frame_critic, real, &fakes)?;
                accumulate(&mut grads_frame, g, inv);
                scores.frame = scores.frame.map(|x| x + inv * s);
            }
            if flow_on {
                let fakes: Vec<Var> = [v.flow_pred, v.estimated].into_iter().flatten().collect();
                let flow = sample.flow.as_ref().expect("checked above");
                let real = tape.constant(flow.tensor().clone());
                let (g, s) = critic_update_grads(&mut tape, &self.model.flow_critic, real, &fakes)?;
                accumulate(&mut grads_flow, g, inv);
                scores.flow = scores.flow.map(|x| x + inv * s);
            }
        }
        for (name, value) in [
            ("critic frame objective", scores.frame),
            ("critic flow objective", scores.flow),
        ] {
            if let Some(v) = value.filter(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    step: self.step,
                    detail: format!("{name} = {v}"),
                });
            }
        }
        let c = &self.config;
        let clip = c.clip_bound;
        let mut bound: f64 = 0.0;
        if let Some(g) = grads_frame {
            self.optimizer.groups[5].update(
                &mut self.model.frame_critic.params,
                &g,
                c.learning_rate,
                c.rms_decay,
                c.rms_eps,
            );
            self.model.frame_critic.clip(clip);
            self.counts.frame_critic += 1;
            bound = bound.max(self.model.frame_critic.params.max_abs());
        }
        if let Some(g) = grads_flow {
            self.optimizer.groups[6].update(
                &mut self.model.flow_critic.params,
                &g,
                c.learning_rate,
                c.rms_decay,
                c.rms_eps,
            );
            self.model.flow_critic.clip(clip);
            self.counts.flow_critic += 1;
            bound = bound.max(self.model.flow_critic.params.max_abs());
        }
        // a frozen critic keeps its initial weights and is not audited
        if bound > clip {
            return Err(Error::Structural(format!(
                "critic weight {bound} exceeds clip bound {clip}"
            )));
        }
        self.counts.critic += 1;
        Ok(scores)
    }

    /// One RMSprop update of the encoder, decoders, estimator and fusion.
    /// Critic weights enter as constants.
    pub fn generator_step(&mut self, batch: &[usize], noise: &[Option<Tensor>]) -> Result<LossBreakdown> {
        let ab = self.config.ablation;
        let c = self.config.clone();
        let inv = 1.0 / batch.len() as f64;
        let mut grads: Vec<Option<Vec<Tensor>>> = vec![None; 5];
        let mut parts = LossBreakdown {
            lambda: c.lambda,
            kl_weight: c.kl_weight,
            ..Default::default()
        };
        for (&i, eps) in batch.iter().zip(noise) {
            let sample = &self.samples[i];
            let mut tape = Tape::new();
            let gb = self.model.bind_generators(&mut tape, true);
            let frames: Vec<Var> = sample.window.iter().map(|f| tape.constant(f.clone())).collect();
            let v = self
                .model
                .forward_vars(&mut tape, &gb, &frames, eps.clone(), branches(&ab))?;
            let target = tape.constant(sample.target.clone());
            let flow = sample.flow.as_ref().map(|f| tape.constant(f.tensor().clone()));
            let mut terms: Vec<Var> = Vec::new();
            let mut add = |tape: &mut Tape, slot: &mut f64, var: Var, weight: f64| {
                *slot += inv * tape.scalar(var);
                terms.push(if weight == 1.0 { var } else { tape.scale(var, weight) });
            };
            if let Some(fp) = v.frame_pred {
                let l = tape.mean_abs_diff(target, fp)?;
                add(&mut tape, &mut parts.l1_frame, l, 1.0);
            }
            if let Some(w) = v.warped {
                let l = tape.mean_abs_diff(target, w)?;
                add(&mut tape, &mut parts.l1_warp, l, 1.0);
            }
            if let (Some(gt), Some(fp)) = (flow, v.flow_pred) {
                let l = tape.mean_endpoint_error(gt, fp)?;
                add(&mut tape, &mut parts.epe_flow_pred, l, 1.0);
            }
            if let (Some(gt), Some(est)) = (flow, v.estimated) {
                let l = tape.mean_endpoint_error(gt, est)?;
                add(&mut tape, &mut parts.epe_flow_est, l, 1.0);
            }
            if ab.encoder_probabilistic_on {
                let l = tape.gaussian_kl(v.latent.mean, v.latent.log_var)?;
                add(&mut tape, &mut parts.kl, l, c.kl_weight);
            }
            if ab.frame_gan_on {
                let fakes: Vec<Var> = [v.frame_pred, v.warped].into_iter().flatten().collect();
                let cb = self.model.frame_critic.params.bind(&mut tape, false);
                let l = critic_objective_var(&mut tape, &self.model.frame_critic, &cb, target, &fakes)?;
                add(&mut tape, &mut parts.gan_frame, l, c.lambda);
            }
            if let (true, Some(gt)) = (ab.flow_gan_on, flow) {
                let fakes: Vec<Var> = [v.flow_pred, v.estimated].into_iter().flatten().collect();
                let cb = self.model.flow_critic.params.bind(&mut tape, false);
                let l = critic_objective_var(&mut tape, &self.model.flow_critic, &cb, gt, &fakes)?;
                add(&mut tape, &mut parts.gan_flow, l, c.lambda);
            }
            if let Some(fused) = v.fused {
                let l = tape.mean_abs_diff(target, fused)?;
                add(&mut tape, &mut parts.l1_fused, l, 1.0);
            }
            let Some(&first) = terms.first() else {
                continue;
            };
            let mut total = first;
            for &t in &terms[1..] {
                total = tape.add(total, t)?;
            }
            let g = tape.backward(total);
            let bounds = [&gb.encoder, &gb.frame, &gb.flow, &gb.estimator, &gb.fusion];
            for (slot, bound) in grads.iter_mut().zip(bounds) {
                accumulate(slot, bound.grads(&tape, &g), inv);
            }
        }
        let parts = parts.with_total();
        if let Some((name, value)) = parts.non_finite() {
            return Err(Error::NonFinite {
                step: self.step,
                detail: format!("{name} = {value} ({parts})"),
            });
        }
        let active = [
            true,
            ab.frame_branch_on,
            ab.flow_branch_on,
            ab.frame_branch_on,
            ab.both_branches(),
        ];
        let mut groups = self.model.groups_mut();
        for (k, ((_, params), g)) in groups.iter_mut().take(5).zip(grads).enumerate() {
            if let (true, Some(g)) = (active[k], g) {
                self.optimizer.groups[k].update(params, &g, c.learning_rate, c.rms_decay, c.rms_eps);
            }
        }
        self.counts.generator += 1;
        Ok(parts)
    }

    /// Runs until `config.steps` generator updates are done, appending one
    /// line per step to `log` and checkpointing every
    /// `checkpoint_interval` steps (and at the end) when `out_dir` is set.
    pub fn run(&mut self, log: &mut dyn Write, out_dir: Option<&Path>) -> Result<Vec<StepRecord>> {
        let mut records = Vec::new();
        while self.step < self.config.steps {
            let rec = self.train_step()?;
            writeln!(log, "{}", rec.log_line())?;
            if let Some(dir) = out_dir {
                let every = self.config.checkpoint_interval;
                if every > 0 && self.step.is_multiple_of(every) {
                    self.checkpoint().save(&checkpoint_path(dir, self.step))?;
                }
            }
            records.push(rec);
        }
        log.flush()?;
        if let Some(dir) = out_dir {
            self.checkpoint().save(&dir.join("final.ckpt"))?;
        }
        Ok(records)
    }
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("step_{step:07}.ckpt"))
}

pub fn branches(ab: &Ablation) -> Branches {
    Branches {
        frame: ab.frame_branch_on,
        flow: ab.flow_branch_on,
    }
}

/// Gradient of the negated objective w.r.t. the critic's own weights.
fn critic_update_grads(tape: &mut Tape, critic: &Critic, real: Var, fakes: &[Var]) -> Result<(Vec<Tensor>, f64)> {
    let p = critic.params.bind(tape, true);
    let objective = critic_objective_var(tape, critic, &p, real, fakes)?;
    let loss = tape.scale(objective, -1.0);
    let g = tape.backward(loss);
    Ok((p.grads(tape, &g), tape.scalar(objective)))
}

fn accumulate(slot: &mut Option<Vec<Tensor>>, grads: Vec<Tensor>, weight: f64) {
    let scaled = grads.into_iter().map(|g| g.map(|x| weight * x));
    match slot {
        None => *slot = Some(scaled.collect()),
        Some(acc) => {
            for (a, g) in acc.iter_mut().zip(scaled) {
                a.add_assign(&g);
            }
        }
    }
}

/// Convenience: train from scratch on `samples` without writing files.
pub fn train(config: TrainingConfig, samples: Vec<Sample>) -> Result<(Trainer, Vec<StepRecord>)> {
    let mut trainer = Trainer::new(config, samples)?;
    let records = trainer.run(&mut std::io::sink(), None)?;
    Ok((trainer, records))
}
