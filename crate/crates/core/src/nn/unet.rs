//! The conditional noise estimator `ε_θ(noisy, cond, t)`: a small U-Net with
//! residual blocks, group normalization, SiLU and a sinusoidal time embedding
//! projected into every block.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::tape::{NodeId, Tape};
use super::tensor::Tensor;
use crate::error::{bail, Result};
use crate::image::ImageBuffer;
use crate::rng::SeededRng;

/// Shape descriptor of the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Arch {
    /// Resolution levels; the bottom level runs at `1/2^(levels-1)` scale.
    pub levels: usize,
    pub base_width: usize,
    pub kernel: usize,
    /// Image channels `C`; the network sees `2C` (noisy ‖ condition).
    pub image_channels: usize,
    pub time_dim: usize,
    pub groups: usize,
    /// Zero the output convolution at init, making `ε̂ ≡ 0`.
    pub zero_init_output: bool,
}

impl Default for Arch {
    fn default() -> Self {
        Self {
            levels: 3,
            base_width: 16,
            kernel: 3,
            image_channels: 3,
            time_dim: 64,
            groups: 4,
            zero_init_output: false,
        }
    }
}

impl Arch {
    pub fn in_channels(&self) -> usize {
        2 * self.image_channels
    }

    pub fn out_channels(&self) -> usize {
        self.image_channels
    }

    pub fn width(&self, level: usize) -> usize {
        self.base_width << level
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.levels > 6 {
            bail!(InvalidArgument, "levels {} not in 1..=6", self.levels);
        }
        if self.kernel % 2 == 0 || self.kernel == 0 {
            bail!(InvalidArgument, "kernel size {} must be odd", self.kernel);
        }
        if self.image_channels != 1 && self.image_channels != 3 {
            bail!(InvalidArgument, "image channels {} not in {{1, 3}}", self.image_channels);
        }
        if self.groups == 0 || self.base_width % self.groups != 0 {
            bail!(
                InvalidArgument,
                "base width {} not divisible by {} groups",
                self.base_width,
                self.groups
            );
        }
        if self.time_dim < 2 || self.time_dim % 2 != 0 {
            bail!(InvalidArgument, "time embedding size {} must be even", self.time_dim);
        }
        Ok(())
    }

    /// Smallest side length multiple the network accepts.
    pub fn size_multiple(&self) -> usize {
        1 << (self.levels - 1)
    }

    pub(crate) fn to_values(self) -> Vec<f64> {
        [
            self.levels,
            self.base_width,
            self.kernel,
            self.image_channels,
            self.time_dim,
            self.groups,
            self.zero_init_output as usize,
        ]
        .iter()
        .map(|&v| v as f64)
        .collect()
    }

    pub(crate) fn from_values(v: &[f64]) -> Result<Self> {
        if v.len() != 7 || v.iter().any(|x| *x < 0.0 || libm::trunc(*x) != *x) {
            bail!(Format, "malformed architecture descriptor");
        }
        let arch = Self {
            levels: v[0] as usize,
            base_width: v[1] as usize,
            kernel: v[2] as usize,
            image_channels: v[3] as usize,
            time_dim: v[4] as usize,
            groups: v[5] as usize,
            zero_init_output: v[6] != 0.0,
        };
        arch.validate()?;
        Ok(arch)
    }
}

/// Named parameter tensors in a fixed order determined by the descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    pub arch: Arch,
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

struct ResBlockIds {
    norm1: (usize, usize),
    conv1: (usize, usize),
    temb: (usize, usize),
    norm2: (usize, usize),
    conv2: (usize, usize),
    skip: Option<(usize, usize)>,
}

/// Parameter indices of each layer, in the order they were registered.
struct Layout {
    conv_in: (usize, usize),
    down: Vec<ResBlockIds>,
    up: Vec<ResBlockIds>,
    norm_out: (usize, usize),
    conv_out: (usize, usize),
}

struct Builder {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    kind: Vec<Init>,
}

#[derive(Clone, Copy)]
enum Init {
    /// Normal with standard deviation `sqrt(2 / fan_in)`.
    Kaiming(usize),
    Zeros,
    Ones,
}

impl Builder {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.names.push(name);
        self.shapes.push(shape);
        self.kind.push(init);
        self.names.len() - 1
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, zero: bool) -> (usize, usize) {
        let init = if zero { Init::Zeros } else { Init::Kaiming(cin * k * k) };
        let w = self.add(format!("{name}.weight"), vec![cout, cin, k, k], init);
        let b = self.add(format!("{name}.bias"), vec![cout], Init::Zeros);
        (w, b)
    }

    fn norm(&mut self, name: &str, c: usize) -> (usize, usize) {
        let g = self.add(format!("{name}.scale"), vec![c], Init::Ones);
        let b = self.add(format!("{name}.offset"), vec![c], Init::Zeros);
        (g, b)
    }

    fn linear(&mut self, name: &str, cin: usize, cout: usize) -> (usize, usize) {
        let w = self.add(format!("{name}.weight"), vec![cout, cin], Init::Kaiming(cin));
        let b = self.add(format!("{name}.bias"), vec![cout], Init::Zeros);
        (w, b)
    }

    fn res_block(&mut self, name: &str, cin: usize, cout: usize, arch: &Arch) -> ResBlockIds {
        let k = arch.kernel;
        ResBlockIds {
            norm1: self.norm(&format!("{name}.norm1"), cin),
            conv1: self.conv(&format!("{name}.conv1"), cin, cout, k, false),
            temb: self.linear(&format!("{name}.time"), arch.time_dim, cout),
            norm2: self.norm(&format!("{name}.norm2"), cout),
            conv2: self.conv(&format!("{name}.conv2"), cout, cout, k, false),
            skip: (cin != cout).then(|| self.conv(&format!("{name}.skip"), cin, cout, 1, false)),
        }
    }
}

fn layout(arch: &Arch) -> (Layout, Builder) {
    let mut b = Builder {
        names: Vec::new(),
        shapes: Vec::new(),
        kind: Vec::new(),
    };
    let conv_in = b.conv("in", arch.in_channels(), arch.base_width, arch.kernel, false);
    let mut down = Vec::new();
    let mut cin = arch.base_width;
    for level in 0..arch.levels {
        let cout = arch.width(level);
        down.push(b.res_block(&format!("down{level}"), cin, cout, arch));
        cin = cout;
    }
    let mut up = Vec::new();
    for level in (0..arch.levels - 1).rev() {
        let cout = arch.width(level);
        up.push(b.res_block(&format!("up{level}"), cin + cout, cout, arch));
        cin = cout;
    }
    let norm_out = b.norm("out.norm", arch.base_width);
    let conv_out = b.conv(
        "out",
        arch.base_width,
        arch.out_channels(),
        arch.kernel,
        arch.zero_init_output,
    );
    (
        Layout {
            conv_in,
            down,
            up,
            norm_out,
            conv_out,
        },
        b,
    )
}

impl DenoiserParams {
    /// Kaiming-normal kernels, zero biases, unit norm scales.
    pub fn init(arch: Arch, rng: &mut SeededRng) -> Result<Self> {
        arch.validate()?;
        let (_, b) = layout(&arch);
        let tensors = b
            .shapes
            .iter()
            .zip(&b.kind)
            .map(|(shape, init)| {
                let mut t = Tensor::zeros(shape);
                match *init {
                    Init::Zeros => {}
                    Init::Ones => t.data.iter_mut().for_each(|v| *v = 1.0),
                    Init::Kaiming(fan_in) => {
                        let std = libm::sqrt(2.0 / fan_in as f64);
                        t.data.iter_mut().for_each(|v| *v = std * rng.normal());
                    }
                }
                t
            })
            .collect();
        Ok(Self {
            arch,
            names: b.names,
            tensors,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Checks that tensor names and shapes agree with the descriptor.
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        let (_, b) = layout(&self.arch);
        if b.names != self.names
            || b.shapes.len() != self.tensors.len()
            || b.shapes.iter().zip(&self.tensors).any(|(s, t)| *s != t.dims)
        {
            bail!(Format, "parameter tensors do not match the architecture descriptor");
        }
        if self.tensors.iter().any(|t| t.data.iter().any(|v| !v.is_finite())) {
            bail!(InvalidArgument, "non-finite parameter");
        }
        Ok(())
    }

    /// `ε̂ = ε_θ(noisy, cond, t)` evaluated without keeping the tape.
    pub fn predict(&self, noisy: &ImageBuffer, cond: &ImageBuffer, t: usize) -> Result<ImageBuffer> {
        let mut tape = Tape::new(&self.tensors);
        let x = tape.constant(Tensor::from(noisy));
        let c = tape.constant(Tensor::from(cond));
        let out = self.forward(&mut tape, x, c, t)?;
        tape.value(out).to_image()
    }

    /// Records the network on `tape`, which must have been created over
    /// `self.tensors`.
    pub fn forward(&self, tape: &mut Tape<'_>, noisy: NodeId, cond: NodeId, t: usize) -> Result<NodeId> {
        let arch = &self.arch;
        let (c, h, w) = tape.value(noisy).chw();
        if tape.value(cond).chw() != (c, h, w) {
            bail!(Shape, "noisy {:?} vs condition {:?}", tape.value(noisy).dims, tape.value(cond).dims);
        }
        if c != arch.image_channels {
            bail!(Shape, "{c} channels for a {}-channel network", arch.image_channels);
        }
        let m = arch.size_multiple();
        if h % m != 0 || w % m != 0 {
            bail!(Shape, "{h}x{w} not divisible by {m}");
        }
        let (lay, _) = layout(arch);
        let emb = tape.constant(time_embedding(t, arch.time_dim));

        let x = tape.concat(noisy, cond)?;
        let (wi, bi) = (tape.param(lay.conv_in.0), tape.param(lay.conv_in.1));
        let mut hcur = tape.conv2d(x, wi, Some(bi))?;
        let mut skips = Vec::new();
        for (level, block) in lay.down.iter().enumerate() {
            hcur = res_block(tape, block, hcur, emb, arch.groups)?;
            if level + 1 < arch.levels {
                skips.push(hcur);
                hcur = tape.avg_pool2(hcur)?;
            }
        }
        for block in &lay.up {
            let skip = skips.pop().expect("one skip per upsampling level");
            let upsampled = tape.upsample2(hcur)?;
            let joined = tape.concat(upsampled, skip)?;
            hcur = res_block(tape, block, joined, emb, arch.groups)?;
        }
        let (g, b) = (tape.param(lay.norm_out.0), tape.param(lay.norm_out.1));
        let n = tape.group_norm(hcur, g, b, arch.groups)?;
        let a = tape.silu(n)?;
        let (wo, bo) = (tape.param(lay.conv_out.0), tape.param(lay.conv_out.1));
        tape.conv2d(a, wo, Some(bo))
    }
}

fn res_block(tape: &mut Tape<'_>, ids: &ResBlockIds, x: NodeId, emb: NodeId, groups: usize) -> Result<NodeId> {
    let (g1, b1) = (tape.param(ids.norm1.0), tape.param(ids.norm1.1));
    let h = tape.group_norm(x, g1, b1, groups)?;
    let h = tape.silu(h)?;
    let (w1, c1) = (tape.param(ids.conv1.0), tape.param(ids.conv1.1));
    let h = tape.conv2d(h, w1, Some(c1))?;
    let (tw, tb) = (tape.param(ids.temb.0), tape.param(ids.temb.1));
    let proj = tape.linear(emb, tw, tb)?;
    let h = tape.add_channel(h, proj)?;
    let (g2, b2) = (tape.param(ids.norm2.0), tape.param(ids.norm2.1));
    let h = tape.group_norm(h, g2, b2, groups)?;
    let h = tape.silu(h)?;
    let (w2, c2) = (tape.param(ids.conv2.0), tape.param(ids.conv2.1));
    let h = tape.conv2d(h, w2, Some(c2))?;
    let skip = match ids.skip {
        Some((sw, sb)) => {
            let (sw, sb) = (tape.param(sw), tape.param(sb));
            tape.conv2d(x, sw, Some(sb))?
        }
        None => x,
    };
    tape.add(skip, h)
}

/// `[sin(t·f_0..f_{d/2}), cos(t·f_0..f_{d/2})]` with `f_i = 10000^(−i/(d/2))`.
pub fn time_embedding(t: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut v = vec![0.0; dim];
    for i in 0..half {
        let freq = libm::exp(-libm::log(10_000.0) * i as f64 / half as f64);
        let arg = t as f64 * freq;
        v[i] = libm::sin(arg);
        v[half + i] = libm::cos(arg);
    }
    Tensor::new(vec![dim], v)
}
