//! Central finite-difference verification of tape gradients.
//!
//! The numerical side only evaluates the forward pass on perturbed copies of
//! the input, so it shares no code with the backward rules it checks.

use rand::{Rng, RngExt};

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Probe {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub probes: Vec<Probe>,
    /// Coordinates redrawn because they straddle a kink.
    pub kinks: usize,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.probes.iter().fold(0.0, |m, p| m.max(p.rel_error))
    }

    /// Largest analytic gradient magnitude among the probes; zero means the
    /// check compared nothing but zeros.
    pub fn max_abs_gradient(&self) -> f64 {
        self.probes.iter().fold(0.0, |m, p| m.max(p.analytic.abs()))
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error() < tol
    }
}

/// Denominator floor for the relative error, so coordinates whose true
/// gradient vanishes compare on an absolute scale.
pub const REL_FLOOR: f64 = 1e-7;

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Forward and backward differences disagreeing by more than this mark a
/// coordinate within one step of a nondifferentiable point.
pub const KINK_TOL: f64 = 1e-3;

/// Redraw budget per requested probe when coordinates land on kinks.
const REDRAWS: usize = 4;

/// Step shrink factors tried before a coordinate is declared a kink.
const SHRINK: [f64; 3] = [1.0, 0.1, 0.01];

/// Checks d f / d input at `probes` random coordinates (or all of them when
/// the input is smaller). `f` must build a scalar from the input variable.
/// Where the forward and backward differences disagree the step straddles a
/// kink, so smaller steps are tried. A coordinate that never settles has no
/// derivative and is skipped, with random probes replaced by fresh draws.
pub fn check<F, R>(input: &Tensor, probes: usize, step: f64, rng: &mut R, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
    R: Rng + ?Sized,
{
    let mut tape = Tape::new();
    let x = tape.leaf(input.clone(), true);
    let y = f(&mut tape, x)?;
    let grads = tape.backward(y);
    let analytic = grads.get(x).cloned().unwrap_or_else(|| Tensor::zeros(input.dims()));

    let eval = |t: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.constant(t);
        let y = f(&mut tape, x)?;
        Ok(tape.scalar(y))
    };

    let exhaustive = input.len() <= probes;
    let mut candidates: Vec<usize> = if exhaustive {
        (0..input.len()).collect()
    } else {
        (0..probes * REDRAWS)
            .map(|_| rng.random_range(0..input.len()))
            .collect()
    };
    candidates.reverse();
    let centre = eval(input.clone())?;
    // (backward, forward, central) differences at step h
    let differences = |index: usize, h: f64| -> Result<(f64, f64, f64)> {
        let mut plus = input.clone();
        plus.data_mut()[index] += h;
        let mut minus = input.clone();
        minus.data_mut()[index] -= h;
        let (up, down) = (eval(plus)?, eval(minus)?);
        Ok(((centre - down) / h, (up - centre) / h, (up - down) / (2.0 * h)))
    };
    let wanted = candidates.len().min(probes);
    let mut out = Vec::with_capacity(wanted);
    let mut kinks = 0;
    while out.len() < wanted {
        let Some(index) = candidates.pop() else { break };
        let mut settled = None;
        for f in SHRINK {
            let (back, fwd, n) = differences(index, step * f)?;
            if relative_error(back, fwd) <= KINK_TOL {
                settled = Some(n);
                break;
            }
        }
        let Some(numeric) = settled else {
            kinks += 1;
            continue;
        };
        let a = analytic.data()[index];
        out.push(Probe {
            index,
            analytic: a,
            numeric,
            rel_error: relative_error(a, numeric),
        });
    }
    Ok(GradCheckReport { probes: out, kinks })
}

/// One named check of the standard suite.
#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub report: GradCheckReport,
}

/// Central-difference checks of every differentiable block of the network
/// and every loss term, each at `probes` random coordinates of a small
/// random model.
pub fn standard_suite(probes: usize, seed: u64) -> Result<Vec<SuiteEntry>> {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::config::ModelConfig;
    use crate::losses::critic_objective_var;
    use crate::model::DualMotionGan;

    const STEP: f64 = 1e-5;
    let cfg = ModelConfig {
        conv_widths: [3, 4, 5],
        latent_channels: 3,
        lstm_kernel: 4,
        critic_base: 2,
    };
    let m = DualMotionGan::new(&cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6772_6164);
    let mut img = |c: usize, h: usize, w: usize| Tensor::uniform(&[c, h, w], 0.9, &mut rng);
    let (frames, target, gt_flow) = (
        [img(3, 32, 32), img(3, 32, 32), img(3, 32, 32)],
        img(3, 32, 32),
        img(2, 32, 32),
    );
    let (proj3, proj2, z0) = (img(3, 32, 32), img(2, 32, 32), img(3, 4, 4));
    let (mean0, logv0) = (img(3, 4, 4), img(3, 4, 4));
    let other3 = img(3, 32, 32);
    let other2 = img(2, 32, 32);
    // flows with fractional parts in (0.2, 0.8) keep bilinear taps away from cell edges
    let mut flow0 = img(2, 32, 32);
    for v in flow0.data_mut() {
        *v = v.abs() * 0.6 / 0.9 + 0.2 + if *v > 0.0 { 1.0 } else { -3.0 };
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut run = |name: &'static str, input: &Tensor, f: &dyn Fn(&mut Tape, Var) -> Result<Var>| -> Result<()> {
        let report = check(input, probes, STEP, &mut rng, f)?;
        out.push(SuiteEntry { name, report });
        Ok(())
    };

    run("warp wrt flow", &flow0, &|t, f| {
        let s = t.constant(frames[2].clone());
        let w = t.warp(s, f)?;
        t.dot_const(w, proj3.clone())
    })?;
    run("warp wrt source", &frames[2], &|t, s| {
        let f = t.constant(flow0.clone());
        let w = t.warp(s, f)?;
        t.dot_const(w, proj3.clone())
    })?;
    let encode = |t: &mut Tape, first: Var| {
        let p = m.encoder.params.bind(t, false);
        let rest: Vec<Var> = frames[1..].iter().map(|f| t.constant(f.clone())).collect();
        let mut all = vec![first];
        all.extend(rest);
        m.encoder.forward(t, &p, &all)
    };
    run("encoder mean", &frames[0], &|t, x| {
        let l = encode(t, x)?;
        Ok(t.sum(l.mean))
    })?;
    run("encoder log-variance", &frames[0], &|t, x| {
        let l = encode(t, x)?;
        t.dot_const(l.log_var, z0.clone())
    })?;
    run("frame generator", &z0, &|t, z| {
        let p = m.frame_generator.params.bind(t, false);
        let y = m.frame_generator.forward(t, &p, z)?;
        t.dot_const(y, proj3.clone())
    })?;
    run("flow generator", &z0, &|t, z| {
        let p = m.flow_generator.params.bind(t, false);
        let y = m.flow_generator.forward(t, &p, z)?;
        t.dot_const(y, proj2.clone())
    })?;
    run("flow estimator", &target, &|t, x| {
        let p = m.estimator.params.bind(t, false);
        let prev = t.constant(frames[2].clone());
        let y = m.estimator.forward(t, &p, prev, x)?;
        t.dot_const(y, proj2.clone())
    })?;
    run("fusion", &target, &|t, x| {
        let p = m.fusion.params.bind(t, false);
        let w = t.constant(other3.clone());
        let y = m.fusion.forward(t, &p, x, w)?;
        t.dot_const(y, proj3.clone())
    })?;
    run("frame critic", &target, &|t, x| {
        let p = m.frame_critic.params.bind(t, false);
        m.frame_critic.forward(t, &p, x)
    })?;
    run("flow critic", &gt_flow, &|t, x| {
        let p = m.flow_critic.params.bind(t, false);
        m.flow_critic.forward(t, &p, x)
    })?;
    run("loss l1_frame", &other3, &|t, x| {
        let y = t.constant(target.clone());
        t.mean_abs_diff(y, x)
    })?;
    run("loss l1_warp", &frames[2], &|t, s| {
        let f = t.constant(flow0.clone());
        let w = t.warp(s, f)?;
        let y = t.constant(target.clone());
        t.mean_abs_diff(y, w)
    })?;
    run("loss epe_flow_pred", &other2, &|t, x| {
        let y = t.constant(gt_flow.clone());
        t.mean_endpoint_error(y, x)
    })?;
    run("loss epe_flow_est", &target, &|t, x| {
        let p = m.estimator.params.bind(t, false);
        let prev = t.constant(frames[2].clone());
        let e = m.estimator.forward(t, &p, prev, x)?;
        let y = t.constant(gt_flow.clone());
        t.mean_endpoint_error(y, e)
    })?;
    run("loss kl (mean)", &mean0, &|t, x| {
        let l = t.constant(logv0.clone());
        t.gaussian_kl(x, l)
    })?;
    run("loss kl (log-variance)", &logv0, &|t, x| {
        let mu = t.constant(mean0.clone());
        t.gaussian_kl(mu, x)
    })?;
    run("loss gan_frame", &other3, &|t, x| {
        let p = m.frame_critic.params.bind(t, false);
        let real = t.constant(target.clone());
        let warped = t.constant(frames[2].clone());
        critic_objective_var(t, &m.frame_critic, &p, real, &[x, warped])
    })?;
    run("loss gan_flow", &other2, &|t, x| {
        let p = m.flow_critic.params.bind(t, false);
        let real = t.constant(gt_flow.clone());
        let est = t.constant(flow0.clone());
        critic_objective_var(t, &m.flow_critic, &p, real, &[x, est])
    })?;
    run("sampled latent", &mean0, &|t, x| {
        let l = t.constant(logv0.clone());
        let z = crate::motion_encoder::reparameterize(
            t,
            crate::motion_encoder::LatentVars { mean: x, log_var: l },
            z0.clone(),
        )?;
        t.dot_const(z, mean0.clone())
    })?;
    Ok(out)
}
