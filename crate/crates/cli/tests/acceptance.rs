//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero when any criterion fails.
//!
//! The training criteria dominate the runtime (tens of minutes on one core).

use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use fmdiff::attack::{Attack, FmdiffAttack, FmdiffSettings};
use fmdiff::bench::{run_bench, BenchSpec, PsnrRef, ReportRow};
use fmdiff::cli::training_pairs;
use fmdiff::corpus::Corpus;
use fmdiff::io::write_checkpoint;
use fmdiff_core::attacks::{apply_attack, jpeg_quant_table, mean_filter, AttackSpec, JPEG_LUMA_BASE};
use fmdiff_core::codecs::{embed, extract, CodecConfig, Scheme, WatermarkBits};
use fmdiff_core::diffusion::{timestep_grid, NoiseSchedule};
use fmdiff_core::gradcheck::run_all;
use fmdiff_core::metrics::{ber, psnr};
use fmdiff_core::nn::{Arch, DenoiserParams};
use fmdiff_core::sampler::{build_grid, sample, sample_whole, OracleEstimator, SampleOptions};
use fmdiff_core::spectral::{decompose, dft2, fwm_fuse, idft2, recompose, FreqMask, SpectralDecomp};
use fmdiff_core::synth::synth_image;
use fmdiff_core::training::{
    draw_batch, moving_average, stage2_unroll, PatchPair, RefineSetup, Stage, TrainConfig, Trainer,
};
use fmdiff_core::{ImageBuffer, PatchRect, SeededRng};

use anyhow::Result;

const T_MAX: usize = 1000;

/// Desk-scale training run shared by criteria 8 to 10.
const STAGE1_ITERS: usize = 6000;
const STAGE2_ITERS: usize = 300;
const MA_WINDOW: usize = 100;
const LREF_SAMPLES: usize = 32;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn random_image(rng: &mut SeededRng, h: usize, w: usize, c: usize) -> ImageBuffer {
    ImageBuffer::from_fn(h, w, c, |_, _, _| rng.uniform())
}

fn spectral_roundtrips() -> Result<Outcome> {
    let start = Instant::now();
    let mut rng = SeededRng::new(1);
    let (mut inv, mut polar, mut parseval) = (0.0f64, 0.0f64, 0.0f64);
    for i in 0..200 {
        let img = random_image(&mut rng, 64, 64, if i % 2 == 0 { 1 } else { 3 });
        for c in 0..img.channels() {
            let x = img.plane(c);
            let spec = dft2(x, 64, 64)?;
            let back = idft2(&spec)?;
            inv = x.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(inv, f64::max);
            let again = recompose(&decompose(&spec));
            polar = spec
                .real
                .iter()
                .zip(&again.real)
                .chain(spec.imag.iter().zip(&again.imag))
                .map(|(a, b)| (a - b).abs())
                .fold(polar, f64::max);
            let energy: f64 = x.iter().map(|v| v * v).sum();
            parseval = parseval.max((spec.energy() - energy).abs() / energy);
        }
    }
    let elapsed = start.elapsed();
    Ok(outcome(
        inv <= 1e-9 && polar <= 1e-9 && parseval <= 1e-8 && elapsed < Duration::from_secs(10),
        format!("idft err {inv:.2e}, polar err {polar:.2e}, parseval {parseval:.2e}, {elapsed:.2?}"),
    ))
}

/// Builds the fused image directly from its definition: masked bins take the
/// reverse amplitude, everything else (and all phase) comes from forward.
fn assemble(forward: &ImageBuffer, reverse: &ImageBuffer, mask: &FreqMask) -> Result<ImageBuffer> {
    let (h, w, c) = forward.shape();
    let mut out = ImageBuffer::zeros(h, w, c);
    for ch in 0..c {
        let f = dft2(forward.plane(ch), h, w)?;
        let r = dft2(reverse.plane(ch), h, w)?;
        let mut amplitude = Vec::with_capacity(h * w);
        let mut phase = Vec::with_capacity(h * w);
        for k in 0..h * w {
            let af = f.real[k].hypot(f.imag[k]);
            let ar = r.real[k].hypot(r.imag[k]);
            amplitude.push(if mask.values[k] == 1.0 { ar } else { af });
            phase.push(f.imag[k].atan2(f.real[k]));
        }
        let d = SpectralDecomp {
            height: h,
            width: w,
            amplitude,
            phase,
        };
        out.plane_mut(ch).copy_from_slice(&idft2(&recompose(&d))?);
    }
    Ok(out)
}

fn fwm_degenerate_cases() -> Result<Outcome> {
    let mut rng = SeededRng::new(2);
    let (h, w) = (32, 32);
    let a = random_image(&mut rng, h, w, 3);
    let b = random_image(&mut rng, h, w, 3);
    let zero = fwm_fuse(&a, &b, &FreqMask::zeros(h, w))?.max_abs_diff(&a);
    let fixed = fwm_fuse(&a, &a, &FreqMask::new(h, w, 0.6)?)?.max_abs_diff(&a);
    let flat = ImageBuffer::filled(h, w, 3, 0.5);
    let ones = FreqMask::ones(h, w);
    let full = fwm_fuse(&flat, &b, &ones)?.max_abs_diff(&assemble(&flat, &b, &ones)?);
    let half = FreqMask::new(h, w, 0.6)?;
    let partial = fwm_fuse(&a, &b, &half)?.max_abs_diff(&assemble(&a, &b, &half)?);
    let worst = zero.max(fixed).max(full).max(partial);
    Ok(outcome(
        worst <= 1e-9,
        format!("zero mask {zero:.2e}, fixed point {fixed:.2e}, beta=1 oracle {full:.2e}, beta=0.6 oracle {partial:.2e}"),
    ))
}

fn schedule_and_transport() -> Result<Outcome> {
    let sched = NoiseSchedule::default_linear(T_MAX)?;
    let decreasing = (1..=T_MAX).all(|t| sched.alpha_bar(t) < sched.alpha_bar(t - 1));
    let sigma = (1..=T_MAX)
        .map(|t| {
            let ab: f64 = (1..=t).map(|i| 1.0 - sched.beta(i)).product();
            let ab_prev: f64 = (1..t).map(|i| 1.0 - sched.beta(i)).product();
            let want = (1.0 - ab_prev) / (1.0 - ab) * sched.beta(t);
            (sched.sigma_sq(t) - want).abs()
        })
        .fold(0.0, f64::max);
    let mut rng = SeededRng::new(3);
    let target = random_image(&mut rng, 16, 16, 3);
    let grid = build_grid(16, 16, 16, 16)?;
    let mut transport = 0.0f64;
    for s in [2, 5, 10] {
        let oracle = OracleEstimator {
            target: &target,
            sched: &sched,
        };
        let out = sample(&target, &oracle, &sched, &grid, &timestep_grid(s, T_MAX)?, &SampleOptions::default(), &mut rng.fork(s as u64))?;
        transport = transport.max(out.max_abs_diff(&target));
    }
    Ok(outcome(
        decreasing && sigma <= 1e-12 && transport <= 1e-9,
        format!("alpha_bar decreasing {decreasing}, sigma^2 err {sigma:.2e}, oracle transport {transport:.2e}"),
    ))
}

fn patch_aggregation() -> Result<Outcome> {
    let mut rng = SeededRng::new(4);
    let mut covered = true;
    for _ in 0..50 {
        let h = rng.range_inclusive(8, 96);
        let w = rng.range_inclusive(8, 96);
        let p = rng.range_inclusive(1, h.min(w));
        let r = rng.range_inclusive(1, p);
        covered &= build_grid(h, w, p, r)?.coverage().iter().all(|&k| k >= 1);
    }

    // Two 4x4 patches at columns 0 and 2 of a 4x6 frame. Each returns the
    // constant `left + 1`, so the overlap averages (1 + 3) / 2.
    let frame = ImageBuffer::from_fn(4, 6, 1, |_, _, x| x as f64);
    let grid = build_grid(4, 6, 4, 2)?;
    let mut hand_ok = grid.rects == [PatchRect::new(0, 0, 4), PatchRect::new(0, 2, 4)];
    let marker = |noisy: &ImageBuffer, _: &ImageBuffer, _: usize| -> fmdiff_core::Result<ImageBuffer> {
        Ok(ImageBuffer::filled(4, 4, 1, noisy.get(0, 0, 0) + 1.0))
    };
    let agg = fmdiff_core::sampler::aggregate_noise(&frame, &frame, &grid, 1, &marker)?;
    let expected = [1.0, 1.0, 2.0, 2.0, 3.0, 3.0];
    for y in 0..4 {
        for (x, &e) in expected.iter().enumerate() {
            hand_ok &= agg.get(0, y, x) == e;
        }
    }

    let sched = NoiseSchedule::default_linear(T_MAX)?;
    let arch = Arch {
        levels: 2,
        base_width: 8,
        time_dim: 16,
        image_channels: 3,
        ..Arch::default()
    };
    let den = DenoiserParams::init(arch, &mut SeededRng::new(5))?;
    let cond = synth_image(&mut SeededRng::new(6), 16, 16, 3);
    let ts = timestep_grid(5, T_MAX)?;
    let opts = SampleOptions::default();
    let patched = sample(&cond, &den, &sched, &build_grid(16, 16, 16, 8)?, &ts, &opts, &mut SeededRng::new(7))?;
    let whole = sample_whole(&cond, &den, &sched, &ts, &opts, &mut SeededRng::new(7))?;
    let bit_exact = patched.data().iter().zip(whole.data()).all(|(a, b)| a.to_bits() == b.to_bits());
    Ok(outcome(
        covered && hand_ok && bit_exact,
        format!("coverage {covered}, two-patch hand value {hand_ok}, single patch bit-exact {bit_exact}"),
    ))
}

fn gradient_correctness() -> Result<Outcome> {
    let start = Instant::now();
    let checks = run_all(9)?;
    let elapsed = start.elapsed();
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed()).map(|c| c.name.as_str()).collect();
    let worst = checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    let composite = checks.iter().any(|c| c.name == "l1+ms_ssim" && c.passed());
    Ok(outcome(
        failed.is_empty() && composite && elapsed < Duration::from_secs(60),
        format!("{} checks, worst rel err {worst:.2e}, failed {failed:?}, {elapsed:.2?}", checks.len()),
    ))
}

fn codec_roundtrips() -> Result<Outcome> {
    let mut detail = Vec::new();
    let mut pass = true;
    for scheme in Scheme::ALL {
        let cfg = CodecConfig::new(scheme);
        let floor = if scheme == Scheme::Lsb { 48.13 } else { 40.0 };
        let (mut worst_ber, mut worst_psnr) = (0.0f64, f64::INFINITY);
        for i in 0..100u64 {
            let mut rng = SeededRng::new(1000 + i);
            let img = synth_image(&mut rng, 128, 128, if i % 2 == 0 { 1 } else { 3 }).quantized();
            let wm = WatermarkBits::random(&mut rng);
            let marked = embed(&img, &wm, &cfg)?;
            worst_ber = worst_ber.max(ber(&wm, &extract(&marked, &cfg)?));
            worst_psnr = worst_psnr.min(psnr(&img, &marked)?);
        }
        pass &= worst_ber == 0.0 && worst_psnr >= floor;
        detail.push(format!("{scheme} max BER {worst_ber} min PSNR {worst_psnr:.2} dB (floor {floor})"));
    }
    Ok(outcome(pass, detail.join("; ")))
}

fn toy_corpus() -> Result<Corpus> {
    Ok(Corpus::synth(17, 20, 128, 3)?)
}

fn classical_attacks() -> Result<Outcome> {
    let spec = BenchSpec {
        corpus: toy_corpus()?,
        codecs: vec![CodecConfig::new(Scheme::Lsb)],
        attacks: vec![Attack::Classical("gaussian:0.002".parse()?)],
        watermark: WatermarkBits::random(&mut SeededRng::new(18)),
        seed: 19,
        psnr_ref: PsnrRef::Watermarked,
        on_bytes: false,
    };
    let noisy_ber = run_bench(&spec, |_| {})?[0].ber_mean;

    let mut rng = SeededRng::new(20);
    let mut flat_ok = true;
    for v in [0.0, 0.25, 0.5, 1.0] {
        let flat = ImageBuffer::filled(24, 24, 3, v);
        for k in [3, 5, 7] {
            flat_ok &= mean_filter(&flat, k).max_abs_diff(&flat) <= 1e-12;
        }
        let spec: AttackSpec = "meanfilter:3".parse()?;
        flat_ok &= apply_attack(&flat, &spec, &mut rng)?.max_abs_diff(&flat) <= 1e-12;
    }
    let table_ok = jpeg_quant_table(50)? == JPEG_LUMA_BASE;
    Ok(outcome(
        noisy_ber > 0.2 && flat_ok && table_ok,
        format!("LSB BER under gaussian(0.002) {noisy_ber:.4}, mean filter fixes constants {flat_ok}, Q50 table exact {table_ok}"),
    ))
}

// ---- desk-scale training and attack ----

fn train_arch() -> Arch {
    Arch {
        image_channels: 3,
        levels: 2,
        ..Arch::default()
    }
}

fn train_config() -> TrainConfig {
    TrainConfig {
        transition_iter: STAGE1_ITERS,
        total_iters: STAGE1_ITERS + STAGE2_ITERS,
        batch: 2,
        patches_per_image: 4,
        patch_size: 32,
        lr: 1e-3,
        lr_final: Some(2e-5),
        refine_lr: Some(2e-5),
        ema_decay: 0.99,
        full_unroll: true,
        seed: 21,
        ..TrainConfig::default()
    }
}

fn attack_settings() -> FmdiffSettings {
    FmdiffSettings {
        patch: 32,
        stride: Some(8),
        fwm_inference: true,
        ..FmdiffSettings::default()
    }
}

/// Mean refinement loss over a fixed set of patch draws and sampler seeds.
fn fixed_lref(params: &DenoiserParams, pairs: &[PatchPair], cfg: &TrainConfig, sched: &NoiseSchedule) -> Result<f64> {
    let setup = RefineSetup::new(cfg, sched)?;
    let single = TrainConfig {
        batch: 1,
        patches_per_image: 1,
        ..cfg.clone()
    };
    let mut rng = SeededRng::new(22);
    let mut total = 0.0;
    for k in 0..LREF_SAMPLES {
        let batch = draw_batch(pairs, &single, &mut rng)?;
        total += stage2_unroll(&batch[0], params, params, sched, &setup, &mut rng.fork(k as u64))?.loss;
    }
    Ok(total / LREF_SAMPLES as f64)
}

struct Trained {
    checkpoint: std::path::PathBuf,
    outcome: Outcome,
}

fn desk_training(dir: &Path) -> Result<Trained> {
    let start = Instant::now();
    let images = Corpus::synth(23, 16, 64, 3)?.load_all()?;
    let wm = WatermarkBits::random(&mut SeededRng::new(24));
    let pairs = training_pairs(&images, &wm, &CodecConfig::new(Scheme::Lsb))?;
    let cfg = train_config();
    let sched = NoiseSchedule::default_linear(T_MAX)?;
    let params = DenoiserParams::init(train_arch(), &mut SeededRng::new(cfg.seed).fork(u64::MAX - 1))?;
    let mut trainer = Trainer::new(cfg.clone(), sched.clone(), params)?;
    let mut stage1 = Vec::with_capacity(STAGE1_ITERS);
    let mut lref_before = (0.0, 0.0);
    while !trainer.finished() {
        if stage1.len() == STAGE1_ITERS && lref_before == (0.0, 0.0) {
            lref_before = (
                fixed_lref(&trainer.state.ema_params(), &pairs, &cfg, &sched)?,
                fixed_lref(&trainer.state.params, &pairs, &cfg, &sched)?,
            );
        }
        let report = trainer.step(&pairs)?;
        if report.stage == Stage::Noise {
            stage1.push(report.loss);
        }
    }
    let lref_after = (
        fixed_lref(&trainer.state.ema_params(), &pairs, &cfg, &sched)?,
        fixed_lref(&trainer.state.params, &pairs, &cfg, &sched)?,
    );
    let ma = moving_average(&stage1, MA_WINDOW);
    let (first, last) = (ma[MA_WINDOW - 1], ma[ma.len() - 1]);
    let elapsed = start.elapsed();
    let checkpoint = dir.join("desk.fmdw");
    write_checkpoint(&checkpoint, &trainer.state.checkpoint())?;
    let reduced = last <= 0.5 * first;
    let refined = lref_after.0 <= lref_before.0;
    Ok(Trained {
        checkpoint,
        outcome: outcome(
            reduced && refined && elapsed <= Duration::from_secs(2 * 3600),
            format!(
                "stage-1 MA{MA_WINDOW} loss {first:.4} -> {last:.4} ({:.1}% of initial); L_ref (EMA) {:.4} -> {:.4}, raw {:.4} -> {:.4}; {elapsed:.0?}",
                100.0 * last / first,
                lref_before.0,
                lref_after.0,
                lref_before.1,
                lref_after.1
            ),
        ),
    })
}

fn fmdiff_row(checkpoint: &Path) -> Result<ReportRow> {
    let attack = FmdiffAttack::from_checkpoint(checkpoint, attack_settings())?;
    let spec = BenchSpec {
        corpus: toy_corpus()?,
        codecs: vec![CodecConfig::new(Scheme::Lsb)],
        attacks: vec![Attack::Fmdiff(Box::new(attack))],
        watermark: WatermarkBits::random(&mut SeededRng::new(25)),
        seed: 26,
        psnr_ref: PsnrRef::Watermarked,
        on_bytes: false,
    };
    Ok(run_bench(&spec, |_| {})?.remove(0))
}

fn attack_behaviour(checkpoint: &Path) -> Result<Outcome> {
    let row = fmdiff_row(checkpoint)?;
    Ok(outcome(
        row.ber_mean >= 0.2 && row.psnr_mean >= 25.0,
        format!("fmdiff on {} LSB images: BER {:.4}, PSNR {:.2} dB", row.n, row.ber_mean, row.psnr_mean),
    ))
}

fn determinism(dir: &Path, checkpoint: &Path) -> Outcome {
    let run = |name: &str| -> Option<Vec<u8>> {
        let out = dir.join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_fmdiff"))
            .args(["bench", "--synth", "2", "--size", "128", "--seed", "27", "--checkpoint"])
            .arg(checkpoint)
            .args(["--patch", "32", "--stride", "8", "--fwm-inference", "--attacks", "identity,gaussian:0.002,speckle:0.005,saltpepper:0.005,meanfilter:3,jpeg:30,fmdiff", "--out"])
            .arg(&out)
            .output()
            .ok()?;
        status.status.success().then(|| fs::read(&out).ok()).flatten()
    };
    match (run("first.csv"), run("second.csv")) {
        (Some(a), Some(b)) => {
            let text = String::from_utf8_lossy(&a);
            let fmdiff_rows = text.lines().filter(|l| l.contains(",fmdiff,")).count();
            outcome(
                a == b && fmdiff_rows == 3,
                format!("{} bytes, identical {}, fmdiff rows {fmdiff_rows}", a.len(), a == b),
            )
        }
        _ => outcome(false, "bench invocation failed".into()),
    }
}

fn report(n: usize, name: &str, result: Result<Outcome>) -> bool {
    let o = result.unwrap_or_else(|e| outcome(false, format!("error: {e:#}")));
    println!("{} criterion {n:>2} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    o.pass
}

fn main() -> ExitCode {
    let mut all = true;
    all &= report(1, "spectral roundtrips", spectral_roundtrips());
    all &= report(2, "fwm degenerate cases", fwm_degenerate_cases());
    all &= report(3, "schedule and transport", schedule_and_transport());
    all &= report(4, "patch aggregation", patch_aggregation());
    all &= report(5, "gradient correctness", gradient_correctness());
    all &= report(6, "codec roundtrips", codec_roundtrips());
    all &= report(7, "classical attacks", classical_attacks());

    let dir = tempfile::tempdir().expect("temp dir");
    match desk_training(dir.path()) {
        Ok(trained) => {
            all &= report(8, "desk-scale training", Ok(trained.outcome));
            all &= report(9, "desk-scale attack", attack_behaviour(&trained.checkpoint));
            all &= report(10, "bench determinism", Ok(determinism(dir.path(), &trained.checkpoint)));
        }
        Err(e) => {
            for (n, name) in [(8, "desk-scale training"), (9, "desk-scale attack"), (10, "bench determinism")] {
                all &= report(n, name, Err(anyhow::anyhow!("training failed: {e:#}")));
            }
        }
    }
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
