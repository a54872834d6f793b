//! Acceptance checks. Prints one pass/fail line per criterion and exits
//! nonzero if any fails. Numeric arguments select criteria, e.g.
//! `cargo test --test acceptance -- 1 3`.

use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use dualmotion::config::{Ablation, ModelConfig, TrainingConfig};
use dualmotion::data_io::{
    decode_flo, encode_flo, generate_moving_shapes, read_flo, write_flo, LoadedSequence, SceneSampler,
};
use dualmotion::evaluation::{
    evaluate_dataset, psnr_from_mse, representation_probe, ssim, Method, MetricsReport, ProbeSettings,
};
use dualmotion::generators::warp;
use dualmotion::gradcheck::standard_suite;
use dualmotion::losses::{epe, gan_flow_objective, gan_frame_objective, total_objective, vae_loss, LossBreakdown};
use dualmotion::motion_encoder::{kl_divergence, sample, LatentDistribution};
use dualmotion::training::{samples_from, Checkpoint, PredictionMode, Sample, Trainer};
use dualmotion::{FlowField, FrameSequence, Tensor};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

/// Fails unless `cond` holds; a comparison with a NaN never holds.
macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if $cond {
        } else {
            return Err(format!($($msg)+));
        }
    };
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `n` synthetic 64x64 sequences of 10 frames; sequence `i` moves in direction `i % 8`.
fn sequences(n: usize, base: u64) -> Vec<LoadedSequence> {
    (0..n)
        .map(|i| {
            let d = i % 8;
            let sampler = SceneSampler {
                direction: Some(d),
                ..Default::default()
            };
            let spec = sampler.sample(base + i as u64).expect("valid scene");
            let (frames, flows) = generate_moving_shapes(&spec).expect("renders");
            LoadedSequence {
                frames,
                flows: Some(flows),
                label: Some(d),
            }
        })
        .collect()
}

const WINDOW: usize = 4;
const STEPS: u64 = 2000;
const RUNS: u64 = 3;

fn desk_config(seed: u64, ablation: &str) -> TrainingConfig {
    TrainingConfig {
        steps: STEPS,
        seed,
        window: WINDOW,
        learning_rate: 1e-3,
        kl_weight: 1e-6,
        ablation: Ablation::preset(ablation).expect("known preset"),
        model: ModelConfig {
            conv_widths: [8, 16, 16],
            latent_channels: 16,
            lstm_kernel: 4,
            critic_base: 8,
        },
        ..Default::default()
    }
}

fn train_samples() -> Vec<Sample> {
    sequences(8, 100).iter().flat_map(|s| samples_from(s, WINDOW)).collect()
}

fn test_split() -> &'static [LoadedSequence] {
    static TEST: OnceLock<Vec<LoadedSequence>> = OnceLock::new();
    TEST.get_or_init(|| sequences(20, 5000))
}

fn train(cfg: TrainingConfig) -> Trainer {
    let mut t = Trainer::new(cfg, train_samples()).expect("trainer");
    for _ in 0..t.config.steps {
        t.train_step().expect("training step");
    }
    t
}

/// A trained model scored on the test split at horizons 1 to 5.
struct Scored {
    report: MetricsReport,
    trainer: Trainer,
}

impl Scored {
    fn mse(&self, mode: PredictionMode) -> f64 {
        self.report.next_frame(Method::Model(mode)).expect("mode evaluated").mse
    }
}

fn train_and_score(seed: u64, ablation: &str) -> Scored {
    let started = Instant::now();
    let trainer = train(desk_config(seed, ablation));
    let modes = [
        PredictionMode::Fused,
        PredictionMode::FrameOnly,
        PredictionMode::FlowOnly,
    ];
    let report = evaluate_dataset(&trainer.model, test_split(), WINDOW, &[1, 2, 3, 4, 5], &modes).expect("evaluates");
    eprintln!("  trained {ablation} seed {seed} in {:.0?}", started.elapsed());
    Scored { report, trainer }
}

/// Full-model runs are shared by several criteria and trained on first use.
fn full_run(seed: u64) -> &'static Scored {
    static RUNS_CACHE: [OnceLock<Scored>; RUNS as usize] = [OnceLock::new(), OnceLock::new(), OnceLock::new()];
    RUNS_CACHE[seed as usize].get_or_init(|| train_and_score(seed, "full"))
}

/// Runs `trial` for seeds 0, 1, 2 and stops once the majority is decided.
fn majority(mut trial: impl FnMut(u64) -> (bool, String)) -> Outcome {
    let (mut passed, mut failed) = (0, 0);
    let mut notes = Vec::new();
    for seed in 0..RUNS {
        let (ok, note) = trial(seed);
        notes.push(format!("run {seed} {}: {note}", if ok { "pass" } else { "fail" }));
        if ok {
            passed += 1;
        } else {
            failed += 1;
        }
        if 2 * passed > RUNS || 2 * failed > RUNS {
            break;
        }
    }
    let detail = format!("{passed} of {} runs pass; {}", passed + failed, notes.join("; "));
    if 2 * passed > RUNS {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn warp_correctness() -> Outcome {
    let src = Tensor::uniform(&[3, 64, 64], 1.0, &mut rng(1));
    let identity = warp(&src, &FlowField::zeros(64, 64)).map_err(|e| e.to_string())?;
    let id_err = identity.max_abs_diff(&src);
    ensure!(id_err <= 1e-6, "zero flow changed the frame by {id_err}");

    let shifted = warp(&src, &FlowField::constant(64, 64, 1.0, 0.0)).map_err(|e| e.to_string())?;
    let mut shift_err: f64 = 0.0;
    for c in 0..3 {
        for y in 1..63 {
            for x in 1..63 {
                shift_err = shift_err.max((shifted.at(c, y, x) - src.at(c, y, x + 1)).abs());
            }
        }
    }
    ensure!(
        shift_err <= 1e-12,
        "unit flow differs from a one-column shift by {shift_err}"
    );

    let mut gt_err: f64 = 0.0;
    let mut pairs = 0;
    for seq in sequences(16, 300) {
        let frames = seq.frames.frames();
        for (t, flow) in seq.flows.as_ref().expect("synthetic flow").iter().enumerate() {
            let w = warp(&frames[t], flow).map_err(|e| e.to_string())?;
            gt_err = gt_err.max(w.max_abs_diff(&frames[t + 1]));
            pairs += 1;
        }
    }
    ensure!(gt_err <= 1e-5, "ground-truth flow warp error {gt_err}");
    Ok(format!(
        "identity {id_err:.1e}, shift {shift_err:.1e}, ground truth {gt_err:.1e} over {pairs} pairs"
    ))
}

fn gradient_suite() -> Outcome {
    let started = Instant::now();
    let mut checks = 0;
    let mut worst: f64 = 0.0;
    for seed in 0..3 {
        let suite = standard_suite(12, seed).map_err(|e| e.to_string())?;
        for e in suite {
            ensure!(
                e.report.probes.len() >= 10,
                "{} has {} probes",
                e.name,
                e.report.probes.len()
            );
            ensure!(
                e.report.max_abs_gradient() > 0.0,
                "{} probed only zero gradients",
                e.name
            );
            let err = e.report.max_rel_error();
            ensure!(err < 1e-3, "{} (model {seed}) relative error {err}", e.name);
            worst = worst.max(err);
            checks += 1;
        }
    }
    let elapsed = started.elapsed();
    ensure!(elapsed < Duration::from_secs(120), "suite took {elapsed:.0?}");
    Ok(format!(
        "{checks} checks, max relative error {worst:.1e}, {elapsed:.1?}"
    ))
}

fn closed_form_anchors() -> Outcome {
    let single = |m: f64, l: f64| LatentDistribution {
        mean: Tensor::from_vec(&[1, 1, 1], vec![m]).unwrap(),
        log_variance: Tensor::from_vec(&[1, 1, 1], vec![l]).unwrap(),
    };
    let kl = kl_divergence(&single(1.0, 0.0));
    ensure!(kl == 0.5, "KL(1, 1) = {kl}");

    let mut r = rng(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let d = LatentDistribution {
            mean: Tensor::uniform(&[1, 2, 2], 1.5, &mut r),
            log_variance: Tensor::uniform(&[1, 2, 2], 1.0, &mut r),
        };
        let exact = kl_divergence(&d);
        let n = 100_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let z = sample(&d, &Tensor::standard_normal(&[1, 2, 2], &mut r)).unwrap().z;
            for i in 0..4 {
                let (m, l, zi) = (d.mean.data()[i], d.log_variance.data()[i], z.data()[i]);
                acc += -0.5 * (l + (zi - m).powi(2) / l.exp()) + 0.5 * zi * zi;
            }
        }
        let rel = (acc / n as f64 - exact).abs() / exact;
        worst = worst.max(rel);
        ensure!(rel < 0.02, "Monte Carlo KL off by {:.2}%", 100.0 * rel);
    }

    let e = epe(&FlowField::constant(1, 1, 3.0, 4.0), &FlowField::zeros(1, 1)).map_err(|e| e.to_string())?;
    ensure!(e == 5.0, "EPE((3,4), 0) = {e}");
    let p = psnr_from_mse(0.01, 1.0);
    ensure!(p == 20.0, "PSNR(0.01) = {p}");
    let x = Tensor::uniform(&[3, 64, 64], 0.5, &mut rng(3)).map(|v| v + 0.5);
    let s = ssim(&x, &x).map_err(|e| e.to_string())?;
    ensure!((s - 1.0).abs() < 1e-9, "SSIM(x, x) = {s}");
    Ok(format!(
        "KL 0.5, Monte Carlo within {:.2}%, EPE 5, PSNR 20 dB, SSIM {s}",
        100.0 * worst
    ))
}

fn tiny_config(steps: u64) -> TrainingConfig {
    TrainingConfig {
        steps,
        seed: 5,
        window: 3,
        learning_rate: 1e-3,
        kl_weight: 1e-3,
        model: ModelConfig {
            conv_widths: [4, 4, 4],
            latent_channels: 4,
            lstm_kernel: 4,
            critic_base: 2,
        },
        ..Default::default()
    }
}

fn tiny_samples() -> Vec<Sample> {
    (0..4)
        .flat_map(|i| {
            let sampler = SceneSampler {
                canvas: [32, 32],
                num_frames: 5,
                num_shapes: 1,
                size_range: (5, 9),
                speed: 1,
                direction: Some(i % 8),
                ..Default::default()
            };
            let (frames, flows) = generate_moving_shapes(&sampler.sample(7 + i as u64).unwrap()).unwrap();
            samples_from(
                &LoadedSequence {
                    frames,
                    flows: Some(flows),
                    label: Some(i % 8),
                },
                3,
            )
        })
        .collect()
}

fn wgan_mechanics() -> Outcome {
    let steps = 200;
    // explicit schedule so the clip bound is audited after every critic update
    let mut t = Trainer::new(tiny_config(steps), tiny_samples()).map_err(|e| e.to_string())?;
    let clip = t.config.clip_bound;
    let n = t.samples().len();
    let mut r = rng(17);
    let mut worst: f64 = 0.0;
    let mut critic_updates = 0;
    // a saturated critic can be clipped straight back to its previous weights
    let mut critic_moves = 0;
    for step in 0..steps {
        for _ in 0..5 {
            let i = r.random_range(0..n);
            let noise = vec![Some(Tensor::standard_normal(&[4, 4, 4], &mut r))];
            let (g0, c0) = (t.model.generator_checksum(), t.model.critic_checksum());
            t.critic_step(&[i], &noise).map_err(|e| e.to_string())?;
            critic_updates += 1;
            ensure!(
                t.model.generator_checksum() == g0,
                "critic step {step} moved generator weights"
            );
            critic_moves += usize::from(t.model.critic_checksum() != c0);
            let bound = t
                .model
                .frame_critic
                .params
                .max_abs()
                .max(t.model.flow_critic.params.max_abs());
            worst = worst.max(bound);
            ensure!(
                bound <= clip,
                "critic weight {bound} after critic update {critic_updates}"
            );
        }
        let i = r.random_range(0..n);
        let noise = vec![Some(Tensor::standard_normal(&[4, 4, 4], &mut r))];
        let (g0, c0) = (t.model.generator_checksum(), t.model.critic_checksum());
        t.generator_step(&[i], &noise).map_err(|e| e.to_string())?;
        ensure!(
            t.model.critic_checksum() == c0,
            "generator step {step} moved critic weights"
        );
        ensure!(
            t.model.generator_checksum() != g0,
            "generator step {step} left the generators unchanged"
        );
    }

    ensure!(critic_moves > 0, "critic updates never changed the critics");

    // the built-in schedule
    let mut t = Trainer::new(tiny_config(steps), tiny_samples()).map_err(|e| e.to_string())?;
    for k in 1..=steps {
        let rec = t.train_step().map_err(|e| e.to_string())?;
        let c = t.counts;
        ensure!(
            rec.critic.len() == 5
                && c.critic == 5 * k
                && c.generator == k
                && c.frame_critic == 5 * k
                && c.flow_critic == 5 * k,
            "after {k} steps counts are {c:?}"
        );
        let bound = t
            .model
            .frame_critic
            .params
            .max_abs()
            .max(t.model.flow_critic.params.max_abs());
        ensure!(bound <= clip, "critic weight {bound} at step {k}");
    }
    Ok(format!(
        "{critic_updates} critic updates ({critic_moves} moved weights), max |w| {worst} <= {clip}, schedule 5:1 over {steps} steps, checksums isolated"
    ))
}

fn objective_wiring() -> Outcome {
    let mut r = rng(3);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let p = LossBreakdown {
            l1_frame: r.random_range(0.0..2.0),
            l1_warp: r.random_range(0.0..2.0),
            epe_flow_pred: r.random_range(0.0..5.0),
            epe_flow_est: r.random_range(0.0..5.0),
            kl: r.random_range(0.0..100.0),
            gan_frame: r.random_range(-1.0..1.0),
            gan_flow: r.random_range(-1.0..1.0),
            lambda: r.random_range(0.0..2.0),
            kl_weight: r.random_range(0.0..1.0),
            ..Default::default()
        };
        let o = total_objective(&p, p.lambda);
        worst = worst.max((o.generator - p.vae() - p.lambda * (p.gan_frame + p.gan_flow)).abs());
    }
    ensure!(worst < 1e-6, "objective formula off by {worst}");

    // real forward passes through a model
    let mut bundle_err: f64 = 0.0;
    for (k, lambda) in [0.0, 0.3, 1.0, 2.5].into_iter().enumerate() {
        let mut cfg = tiny_config(1);
        cfg.kl_weight = 1.0;
        cfg.lambda = lambda;
        cfg.seed = k as u64;
        let mut t = Trainer::new(cfg, tiny_samples()).map_err(|e| e.to_string())?;
        let s = t.samples()[k].clone();
        let noise = Tensor::standard_normal(&[4, 4, 4], &mut r);
        let window = FrameSequence::window(s.window.clone(), "w").unwrap();
        let (bundle, dist) = t
            .model
            .forward_with_latent(&window, Some(&noise))
            .map_err(|e| e.to_string())?;
        let flow = s.flow.clone().unwrap();
        let vae = vae_loss(&bundle, &s.target, &flow, &dist).map_err(|e| e.to_string())?;
        let gf = gan_frame_objective(
            &s.target,
            &bundle.frame_pred,
            &bundle.warped_frame,
            &t.model.frame_critic,
        )
        .map_err(|e| e.to_string())?;
        let gw = gan_flow_objective(&flow, &bundle.flow_pred, &bundle.estimated_flow, &t.model.flow_critic)
            .map_err(|e| e.to_string())?;
        let parts = t.generator_step(&[k], &[Some(noise)]).map_err(|e| e.to_string())?;
        bundle_err = bundle_err.max((parts.total - vae.total - lambda * (gf + gw)).abs());
    }
    ensure!(bundle_err < 1e-6, "generator loss on model bundles off by {bundle_err}");

    let mut cfg = tiny_config(30);
    cfg.lambda = 0.0;
    let mut a = Trainer::new(cfg.clone(), tiny_samples()).map_err(|e| e.to_string())?;
    let mut model = a.model.clone();
    model.frame_critic.params.fill(0.004);
    model.flow_critic.params.fill(-0.007);
    let mut b = Trainer::with_model(cfg, model, tiny_samples()).map_err(|e| e.to_string())?;
    for step in 1..=30 {
        a.train_step().map_err(|e| e.to_string())?;
        b.train_step().map_err(|e| e.to_string())?;
        ensure!(
            a.model.generator_checksum() == b.model.generator_checksum(),
            "lambda 0 generators diverge at step {step}"
        );
    }
    ensure!(
        a.model.critic_checksum() != b.model.critic_checksum(),
        "critics should differ"
    );
    Ok(format!(
        "formula error {worst:.1e}, bundle error {bundle_err:.1e}, lambda 0 trajectory identical over 30 steps"
    ))
}

fn end_to_end() -> Outcome {
    majority(|seed| {
        let full = full_run(seed);
        let frame_model = train_and_score(seed, "flow_off");
        let flow_model = train_and_score(seed, "frame_off");
        let fused = full.mse(PredictionMode::Fused);
        let copy = full.report.next_frame(Method::CopyLast).unwrap().mse;
        let frame_only = frame_model.mse(PredictionMode::FrameOnly);
        let flow_only = flow_model.mse(PredictionMode::FlowOnly);
        let ok = fused < copy && fused < frame_only && fused < flow_only;
        (
            ok,
            format!("fused {fused:.6}, frame-only {frame_only:.6}, flow-only {flow_only:.6}, copy-last {copy:.6}"),
        )
    })
}

fn flow_trend() -> Outcome {
    let f = full_run(0).report.flow.clone().ok_or("test split has no flow")?;
    let detail = format!(
        "prediction {:.4}, estimation {:.4}, zero flow {:.4}",
        f.epe_prediction, f.epe_estimation, f.epe_zero_flow
    );
    ensure!(
        f.epe_prediction < f.epe_zero_flow,
        "prediction does not beat zero flow: {detail}"
    );
    ensure!(
        f.epe_estimation <= f.epe_prediction,
        "estimation worse than prediction: {detail}"
    );
    Ok(detail)
}

fn multi_step_degradation() -> Outcome {
    let report = &full_run(0).report;
    ensure!(
        report.sequences.len() >= 20,
        "only {} test sequences",
        report.sequences.len()
    );
    let curve: Vec<f64> = report
        .method(Method::Model(PredictionMode::Fused))
        .unwrap()
        .per_horizon
        .iter()
        .map(|s| s.mse)
        .collect();
    let shown = curve.iter().map(|m| format!("{m:.5}")).collect::<Vec<_>>().join(", ");
    ensure!(curve.windows(2).all(|w| w[0] <= w[1]), "fused MSE by horizon: {shown}");
    Ok(format!(
        "fused MSE by horizon over {} sequences: {shown}",
        report.sequences.len()
    ))
}

fn representation() -> Outcome {
    let fit = sequences(24, 9000);
    let score = sequences(24, 9500);
    majority(|seed| {
        let p = representation_probe(&full_run(seed).trainer.model, &fit, &score, &ProbeSettings::default())
            .expect("probe runs");
        let gain = p.accuracy - p.random_init_accuracy;
        (
            gain >= 0.10,
            format!("trained {:.3} vs random {:.3}", p.accuracy, p.random_init_accuracy),
        )
    })
}

fn infrastructure() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut r = rng(10);
    for i in 0..100 {
        let (h, w) = (r.random_range(1..40), r.random_range(1..40));
        let data: Vec<f64> = (0..2 * h * w)
            .map(|_| r.random_range(-100.0..100.0f64) as f32 as f64)
            .collect();
        let f = FlowField::new(Tensor::from_vec(&[2, h, w], data).unwrap()).unwrap();
        let bytes = encode_flo(&f).map_err(|e| e.to_string())?;
        let back = decode_flo(&bytes).map_err(|e| e.to_string())?;
        let same = back
            .tensor()
            .data()
            .iter()
            .zip(f.tensor().data())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        ensure!(
            same && back.tensor().dims() == f.tensor().dims(),
            "field {i} changed in memory"
        );
        let path = dir.path().join(format!("{i}.flo"));
        write_flo(&f, &path).map_err(|e| e.to_string())?;
        ensure!(std::fs::read(&path).unwrap() == bytes, "field {i} file bytes differ");
        ensure!(
            read_flo(&path).map_err(|e| e.to_string())? == f,
            "field {i} changed on disk"
        );
    }

    let logs = || -> Vec<String> {
        let mut t = Trainer::new(desk_config(0, "full"), train_samples()).expect("trainer");
        (0..100).map(|_| t.train_step().expect("step").log_line()).collect()
    };
    let (a, b) = (logs(), logs());
    ensure!(a == b, "100-step logs differ between runs");

    let mut cfg = desk_config(1, "full");
    cfg.steps = 30;
    let mut straight = Trainer::new(cfg.clone(), train_samples()).map_err(|e| e.to_string())?;
    let full: Vec<String> = (0..30).map(|_| straight.train_step().unwrap().log_line()).collect();
    let mut first = Trainer::new(cfg, train_samples()).map_err(|e| e.to_string())?;
    let mut resumed_logs: Vec<String> = (0..12).map(|_| first.train_step().unwrap().log_line()).collect();
    let path = dir.path().join("mid.ckpt");
    first.checkpoint().save(&path).map_err(|e| e.to_string())?;
    drop(first);
    let mut resumed = Trainer::from_checkpoint(Checkpoint::load(&path).map_err(|e| e.to_string())?, train_samples())
        .map_err(|e| e.to_string())?;
    resumed_logs.extend((0..18).map(|_| resumed.train_step().unwrap().log_line()));
    ensure!(resumed_logs == full, "resumed logs differ from the uninterrupted run");
    let (x, y) = (resumed.checkpoint().to_bytes(), straight.checkpoint().to_bytes());
    ensure!(
        x.map_err(|e| e.to_string())? == y.map_err(|e| e.to_string())?,
        "resumed checkpoint differs"
    );
    Ok("100 .flo fields bit-exact, 100-step logs identical, resume at step 12 of 30 identical".into())
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("warp correctness", warp_correctness),
        ("gradient suite", gradient_suite),
        ("closed-form anchors", closed_form_anchors),
        ("wgan mechanics", wgan_mechanics),
        ("objective wiring", objective_wiring),
        ("end-to-end ordering", end_to_end),
        ("flow trend", flow_trend),
        ("multi-step degradation", multi_step_degradation),
        ("representation probe", representation),
        ("infrastructure", infrastructure),
    ];
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failures = 0;
    for (i, (name, check)) in criteria.into_iter().enumerate() {
        let n = i + 1;
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let started = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n:>2} {name}: PASS ({detail}) [{secs:.1}s]"),
            Err(detail) => {
                failures += 1;
                println!("criterion {n:>2} {name}: FAIL ({detail}) [{secs:.1}s]");
            }
        }
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
