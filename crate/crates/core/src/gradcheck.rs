//! Finite-difference verification of every differentiable primitive, the
//! refinement loss and the full noise estimator.
//!
//! Each check reduces the output to a scalar with fixed random weights,
//! differentiates it on the tape, and compares sampled entries against
//! central differences.

use alloc::boxed::Box;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::Result;
use crate::image::ImageBuffer;
use crate::losses;
use crate::metrics::SsimConfig;
use crate::nn::{Arch, DenoiserParams, NodeId, Tape, Tensor};
use crate::rng::SeededRng;
use crate::spectral::{make_freq_mask, FreqMask};

pub const FD_STEP: f64 = 1e-4;
pub const GRAD_TOL: f64 = 1e-4;
/// Entries compared per checked tensor.
pub const SAMPLES: usize = 20;

/// `|analytic − numeric| / (|analytic| + 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    libm::fabs(analytic - numeric) / (libm::fabs(analytic) + 1e-8)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_err < GRAD_TOL
    }
}

type Builder = dyn Fn(&mut Tape<'_>, &[NodeId]) -> Result<NodeId>;

fn weighted_sum(out: &Tensor, weights: &[f64]) -> f64 {
    out.data.iter().zip(weights).map(|(a, b)| a * b).sum()
}

fn eval(build: &Builder, inputs: &[Tensor]) -> Result<Tensor> {
    let mut tape = Tape::detached();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let out = build(&mut tape, &ids)?;
    Ok(tape.value(out).clone())
}

/// Checks `build` with respect to every input tensor.
pub fn check_op(
    name: &str,
    inputs: Vec<Tensor>,
    rng: &mut SeededRng,
    build: &Builder,
) -> Result<GradCheck> {
    let mut tape = Tape::detached();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let out = build(&mut tape, &ids)?;
    let weights: Vec<f64> = (0..tape.value(out).len()).map(|_| rng.normal()).collect();
    let seed = Tensor::new(tape.value(out).dims.clone(), weights.clone());
    let grads = tape.backward(out, &seed)?;

    let mut report = GradCheck {
        name: name.to_string(),
        checked: 0,
        max_rel_err: 0.0,
    };
    for (k, id) in ids.iter().enumerate() {
        let analytic = grads.of(*id).cloned().unwrap_or_else(|| inputs[k].zeros_like());
        for j in sample_indices(rng, inputs[k].len()) {
            let mut plus = inputs.clone();
            plus[k].data[j] += FD_STEP;
            let mut minus = inputs.clone();
            minus[k].data[j] -= FD_STEP;
            let numeric = (weighted_sum(&eval(build, &plus)?, &weights)
                - weighted_sum(&eval(build, &minus)?, &weights))
                / (2.0 * FD_STEP);
            report.max_rel_err = report.max_rel_err.max(relative_error(analytic.data[j], numeric));
            report.checked += 1;
        }
    }
    Ok(report)
}

fn sample_indices(rng: &mut SeededRng, len: usize) -> Vec<usize> {
    if len <= SAMPLES {
        return (0..len).collect();
    }
    (0..SAMPLES).map(|_| rng.below(len)).collect()
}

fn uniform(rng: &mut SeededRng, dims: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = dims.iter().product();
    Tensor::new(dims.to_vec(), (0..n).map(|_| lo + (hi - lo) * rng.uniform()).collect())
}

fn normal(rng: &mut SeededRng, dims: &[usize]) -> Tensor {
    let n = dims.iter().product();
    Tensor::new(dims.to_vec(), (0..n).map(|_| rng.normal()).collect())
}

/// Values with magnitude in `[0.1, 1]` and random sign, away from the kink
/// of `abs`.
fn signed_away_from_zero(rng: &mut SeededRng, dims: &[usize]) -> Tensor {
    let mut t = uniform(rng, dims, 0.1, 1.0);
    t.data.iter_mut().for_each(|v| {
        if rng.coin() {
            *v = -*v
        }
    });
    t
}

/// Small configuration that fits 8×8 inputs.
pub fn small_ssim() -> SsimConfig {
    SsimConfig {
        scales: 2,
        window: 3,
        ..SsimConfig::default()
    }
}

/// Checks the noise estimator with respect to [`SAMPLES`] randomly chosen
/// scalar parameters.
pub fn check_denoiser(rng: &mut SeededRng) -> Result<GradCheck> {
    let arch = Arch {
        levels: 2,
        base_width: 4,
        kernel: 3,
        image_channels: 1,
        time_dim: 8,
        groups: 2,
        zero_init_output: false,
    };
    let mut params = DenoiserParams::init(arch, rng)?;
    // Nonzero biases so their gradients are exercised on a generic point.
    for (name, t) in params.names.iter().zip(params.tensors.iter_mut()) {
        if name.ends_with(".bias") || name.ends_with(".offset") {
            t.data.iter_mut().for_each(|v| *v = 0.1 * rng.normal());
        }
    }
    let noisy = ImageBuffer::from_fn(8, 8, 1, |_, _, _| rng.normal());
    let cond = ImageBuffer::from_fn(8, 8, 1, |_, _, _| rng.uniform());
    let t = 1 + rng.below(1000);

    let run = |p: &DenoiserParams| -> Result<Tensor> {
        let out = p.predict(&noisy, &cond, t)?;
        Ok(Tensor::from(&out))
    };
    let base = run(&params)?;
    let weights: Vec<f64> = (0..base.len()).map(|_| rng.normal()).collect();

    let mut tape = Tape::new(&params.tensors);
    let x = tape.constant(Tensor::from(&noisy));
    let c = tape.constant(Tensor::from(&cond));
    let out = params.forward(&mut tape, x, c, t)?;
    let seed = Tensor::new(tape.value(out).dims.clone(), weights.clone());
    let grads = tape.backward(out, &seed)?.params(&tape);
    drop(tape);

    let mut report = GradCheck {
        name: "denoiser".to_string(),
        checked: 0,
        max_rel_err: 0.0,
    };
    for _ in 0..SAMPLES {
        let k = rng.below(params.tensors.len());
        let j = rng.below(params.tensors[k].len());
        let orig = params.tensors[k].data[j];
        params.tensors[k].data[j] = orig + FD_STEP;
        let plus = weighted_sum(&run(&params)?, &weights);
        params.tensors[k].data[j] = orig - FD_STEP;
        let minus = weighted_sum(&run(&params)?, &weights);
        params.tensors[k].data[j] = orig;
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        report.max_rel_err = report.max_rel_err.max(relative_error(grads[k].data[j], numeric));
        report.checked += 1;
    }
    Ok(report)
}

/// Runs every check. Order and inputs are fixed by `seed`.
pub fn run_all(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = SeededRng::new(seed);
    let r = &mut rng;
    let mut out = Vec::new();

    let x = normal(r, &[2, 5, 6]);
    let w = normal(r, &[3, 2, 3, 3]);
    let b = normal(r, &[3]);
    out.push(check_op("conv2d", vec![x, w, b], r, &|t, i| t.conv2d(i[0], i[1], Some(i[2])))?);

    let x = normal(r, &[4, 3, 3]);
    let g = uniform(r, &[4], 0.5, 1.5);
    let b = normal(r, &[4]);
    out.push(check_op("group_norm", vec![x, g, b], r, &|t, i| t.group_norm(i[0], i[1], i[2], 2))?);

    let x = normal(r, &[2, 4, 4]);
    out.push(check_op("silu", vec![x], r, &|t, i| t.silu(i[0]))?);
    let x = normal(r, &[2, 4, 6]);
    out.push(check_op("avg_pool2", vec![x], r, &|t, i| t.avg_pool2(i[0]))?);
    let x = normal(r, &[2, 3, 2]);
    out.push(check_op("upsample2", vec![x], r, &|t, i| t.upsample2(i[0]))?);

    let (a, b) = (normal(r, &[1, 3, 3]), normal(r, &[2, 3, 3]));
    out.push(check_op("concat", vec![a, b], r, &|t, i| t.concat(i[0], i[1]))?);
    for (name, op) in [
        ("add", 0usize),
        ("sub", 1),
        ("mul", 2),
        ("div", 3),
        ("axpby", 4),
    ] {
        let a = normal(r, &[2, 3, 3]);
        let b = if op == 3 {
            uniform(r, &[2, 3, 3], 0.5, 2.0)
        } else {
            normal(r, &[2, 3, 3])
        };
        let build: Box<Builder> = match op {
            0 => Box::new(|t, i| t.add(i[0], i[1])),
            1 => Box::new(|t, i| t.sub(i[0], i[1])),
            2 => Box::new(|t, i| t.mul(i[0], i[1])),
            3 => Box::new(|t, i| t.div(i[0], i[1])),
            _ => Box::new(|t, i| t.axpby(i[0], 0.7, i[1], -1.3)),
        };
        out.push(check_op(name, vec![a, b], r, &*build)?);
    }

    let (x, v) = (normal(r, &[3, 2, 4]), normal(r, &[3]));
    out.push(check_op("add_channel", vec![x, v], r, &|t, i| t.add_channel(i[0], i[1]))?);
    let (x, w, b) = (normal(r, &[5]), normal(r, &[4, 5]), normal(r, &[4]));
    out.push(check_op("linear", vec![x, w, b], r, &|t, i| t.linear(i[0], i[1], i[2]))?);
    let x = normal(r, &[2, 3, 3]);
    out.push(check_op("scale", vec![x.clone()], r, &|t, i| t.scale(i[0], -2.5))?);
    out.push(check_op("offset", vec![x.clone()], r, &|t, i| t.offset(i[0], 0.3))?);
    out.push(check_op("mean", vec![x], r, &|t, i| t.mean(i[0]))?);
    let x = signed_away_from_zero(r, &[2, 3, 3]);
    out.push(check_op("abs", vec![x], r, &|t, i| t.abs(i[0]))?);
    // Values on both sides of each bound, none near a kink.
    let mut x = signed_away_from_zero(r, &[2, 3, 3]);
    x.data.iter_mut().filter(|v| (v.abs() - 0.5).abs() < 0.05).for_each(|v| *v *= 0.8);
    out.push(check_op("clamp", vec![x], r, &|t, i| t.clamp(i[0], -0.5, 0.5))?);
    let x = normal(r, &[2, 7, 6]);
    let kernel = crate::metrics::gaussian_kernel(3, 1.5);
    out.push(check_op("filter", vec![x], r, &move |t, i| t.filter(i[0], kernel.clone()))?);

    let forward = ImageBuffer::from_fn(8, 8, 3, |_, _, _| r.uniform());
    let reverse = uniform(r, &[3, 8, 8], 0.0, 1.0);
    let mask: FreqMask = make_freq_mask(8, 8, 0.5)?;
    out.push(check_op("fwm", vec![reverse], r, &move |t, i| {
        t.fwm(i[0], forward.clone(), mask.clone())
    })?);

    let cfg = small_ssim();
    let (a, b) = (uniform(r, &[3, 8, 8], 0.0, 1.0), uniform(r, &[3, 8, 8], 0.0, 1.0));
    out.push(check_op("l1", vec![a.clone(), b.clone()], r, &|t, i| losses::l1_node(t, i[0], i[1]))?);
    out.push(check_op("mse", vec![a.clone(), b.clone()], r, &|t, i| losses::mse_node(t, i[0], i[1]))?);
    out.push(check_op("ms_ssim", vec![a.clone(), b.clone()], r, &move |t, i| {
        losses::ms_ssim_node(t, i[0], i[1], &cfg)
    })?);
    out.push(check_op("l1+ms_ssim", vec![a, b], r, &move |t, i| {
        Ok(losses::refinement_node(t, i[0], i[1], &cfg)?.0)
    })?);

    out.push(check_denoiser(r)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_check_passes() {
        let report = run_all(3).unwrap();
        assert!(report.len() >= 20);
        for c in &report {
            assert!(c.passed(), "{} failed: {:e}", c.name, c.max_rel_err);
        }
    }

    #[test]
    fn detects_a_hidden_dependency() {
        // x·stopgrad(x): the tape sees d/dx = x, the true derivative is 2x.
        let mut rng = SeededRng::new(1);
        let x = signed_away_from_zero(&mut rng, &[6]);
        let c = check_op("hidden", vec![x], &mut rng, &|t, i| {
            let k = t.constant(t.value(i[0]).clone());
            t.mul(i[0], k)
        })
        .unwrap();
        assert!(!c.passed());
        assert!(c.max_rel_err > 0.5);
    }

    #[test]
    fn report_magnitudes() {
        for c in run_all(11).unwrap() {
            std::println!("{:<12} n={:<3} max_rel={:.2e}", c.name, c.checked, c.max_rel_err);
            assert!(c.passed());
        }
    }
}
