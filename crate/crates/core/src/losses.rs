//! Training objectives: noise-estimation MSE, L1, MS-SSIM and their sum.
//!
//! Each loss exists twice: a plain evaluation on images and a builder that
//! records it on a [`Tape`] so it can be differentiated.

use crate::error::{bail, Result};
use crate::image::ImageBuffer;
use crate::metrics::{self, gaussian_kernel, SsimConfig};
use crate::nn::{NodeId, Tape};

/// Mean absolute difference.
pub fn l1_loss(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    a.ensure_same_shape(b)?;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| libm::fabs(x - y)).sum::<f64>() / a.len() as f64)
}

/// Mean squared difference.
pub fn mse_loss(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    a.ensure_same_shape(b)?;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

/// `1 − Π_j mean(luminance_j · contrast-structure_j)`; both factors at every
/// scale.
pub fn ms_ssim_loss(a: &ImageBuffer, b: &ImageBuffer, cfg: &SsimConfig) -> Result<f64> {
    Ok(1.0 - metrics::ms_ssim(a, b, cfg)?)
}

/// `L1 + MS-SSIM`.
pub fn refinement_loss(a: &ImageBuffer, b: &ImageBuffer, cfg: &SsimConfig) -> Result<f64> {
    Ok(l1_loss(a, b)? + ms_ssim_loss(a, b, cfg)?)
}

pub fn l1_node(tape: &mut Tape<'_>, a: NodeId, b: NodeId) -> Result<NodeId> {
    let d = tape.sub(a, b)?;
    let d = tape.abs(d)?;
    tape.mean(d)
}

pub fn mse_node(tape: &mut Tape<'_>, a: NodeId, b: NodeId) -> Result<NodeId> {
    let d = tape.sub(a, b)?;
    let sq = tape.mul(d, d)?;
    tape.mean(sq)
}

pub fn ms_ssim_node(tape: &mut Tape<'_>, a: NodeId, b: NodeId, cfg: &SsimConfig) -> Result<NodeId> {
    let (_, h, w) = tape.value(a).chw();
    if tape.value(b).dims != tape.value(a).dims {
        bail!(Shape, "{:?} vs {:?}", tape.value(a).dims, tape.value(b).dims);
    }
    cfg.check(h, w)?;
    let kernel = gaussian_kernel(cfg.window, cfg.sigma);
    let (mut a, mut b) = (a, b);
    let mut prod: Option<NodeId> = None;
    for j in 0..cfg.scales {
        if j > 0 {
            a = tape.avg_pool2(a)?;
            b = tape.avg_pool2(b)?;
        }
        let mu_a = tape.filter(a, kernel.clone())?;
        let mu_b = tape.filter(b, kernel.clone())?;
        let aa = tape.mul(a, a)?;
        let bb = tape.mul(b, b)?;
        let ab = tape.mul(a, b)?;
        let e_aa = tape.filter(aa, kernel.clone())?;
        let e_bb = tape.filter(bb, kernel.clone())?;
        let e_ab = tape.filter(ab, kernel.clone())?;
        let mu_aa = tape.mul(mu_a, mu_a)?;
        let mu_bb = tape.mul(mu_b, mu_b)?;
        let mu_ab = tape.mul(mu_a, mu_b)?;
        let var_a = tape.sub(e_aa, mu_aa)?;
        let var_b = tape.sub(e_bb, mu_bb)?;
        let cov = tape.sub(e_ab, mu_ab)?;

        let lum_num = tape.scale(mu_ab, 2.0)?;
        let lum_num = tape.offset(lum_num, cfg.c1)?;
        let lum_den = tape.add(mu_aa, mu_bb)?;
        let lum_den = tape.offset(lum_den, cfg.c1)?;
        let lum = tape.div(lum_num, lum_den)?;

        let cs_num = tape.scale(cov, 2.0)?;
        let cs_num = tape.offset(cs_num, cfg.c2)?;
        let cs_den = tape.add(var_a, var_b)?;
        let cs_den = tape.offset(cs_den, cfg.c2)?;
        let cs = tape.div(cs_num, cs_den)?;

        let both = tape.mul(lum, cs)?;
        let factor = tape.mean(both)?;
        prod = Some(match prod {
            None => factor,
            Some(p) => tape.mul(p, factor)?,
        });
    }
    let prod = prod.expect("at least one scale");
    let neg = tape.scale(prod, -1.0)?;
    tape.offset(neg, 1.0)
}

/// Records `L1 + MS-SSIM`, returning `(total, l1, ms_ssim)` nodes.
pub fn refinement_node(
    tape: &mut Tape<'_>,
    a: NodeId,
    b: NodeId,
    cfg: &SsimConfig,
) -> Result<(NodeId, NodeId, NodeId)> {
    let l1 = l1_node(tape, a, b)?;
    let ms = ms_ssim_node(tape, a, b, cfg)?;
    Ok((tape.add(l1, ms)?, l1, ms))
}
