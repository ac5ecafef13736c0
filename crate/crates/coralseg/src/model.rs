//! A small dual-branch segmentation network: two independently initialized
//! encoder stacks (two 3x3 convolutions with ramp nonlinearities), each with
//! a 1x1 class head and a 1x1 projection head, plus exact reverse-mode
//! gradients and SGD with momentum and weight decay.
//!
//! The two branches never share parameter storage. Backward treats
//! pseudo-labels and anchor embeddings as constants; the only gradient inputs
//! are per-pixel logit gradients and per-pixel projection gradients.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Grid;
use crate::numerics::Matrix;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"CRN1";
const KERNEL: usize = 3;

/// Initialization gain for the projection heads. The consistency loss
/// softmaxes raw CORAL distances, whose scale is `||z||^4 / (4 c'^2 (c'-1)^2)`;
/// embeddings initialized at unit scale would leave every similarity
/// distribution indistinguishable from uniform, so the projections start
/// large enough for anchor distances to spread over O(1).
const PROJ_INIT_GAIN: f64 = 6.0;

fn proj_init_gain() -> f64 {
    std::env::var("CORALSEG_PROJ_GAIN")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(PROJ_INIT_GAIN)
}

/// Architecture hyperparameters shared by both branches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Arch {
    pub in_channels: usize,
    pub hidden: usize,
    pub classes: usize,
    pub proj_dim: usize,
}

impl Arch {
    pub fn new(hidden: usize, classes: usize, proj_dim: usize) -> Self {
        Self {
            in_channels: 1,
            hidden,
            classes,
            proj_dim,
        }
    }

    fn conv1_w(&self) -> usize {
        self.hidden * self.in_channels * KERNEL * KERNEL
    }

    fn conv2_w(&self) -> usize {
        self.hidden * self.hidden * KERNEL * KERNEL
    }

    fn head_w(&self) -> usize {
        self.classes * self.hidden
    }

    fn proj_w(&self) -> usize {
        self.proj_dim * self.hidden
    }

    /// Parameters per branch.
    pub fn param_count(&self) -> usize {
        self.conv1_w()
            + self.hidden
            + self.conv2_w()
            + self.hidden
            + self.head_w()
            + self.classes
            + self.proj_w()
            + self.proj_dim
    }

    /// Offsets of each tensor in the flat parameter vector:
    /// (conv1_w, conv1_b, conv2_w, conv2_b, head_w, head_b, proj_w, proj_b).
    fn offsets(&self) -> [usize; 8] {
        let mut off = [0usize; 8];
        let sizes = [
            self.conv1_w(),
            self.hidden,
            self.conv2_w(),
            self.hidden,
            self.head_w(),
            self.classes,
            self.proj_w(),
            self.proj_dim,
        ];
        let mut acc = 0;
        for (i, s) in sizes.iter().enumerate() {
            off[i] = acc;
            acc += s;
        }
        off
    }
}

/// Parameters, momentum buffers, and a version counter for cache staleness.
#[derive(Debug, Clone)]
pub struct DualModelState {
    pub arch: Arch,
    pub params_main: Vec<f64>,
    pub params_aux: Vec<f64>,
    vel_main: Vec<f64>,
    vel_aux: Vec<f64>,
    version: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BranchId {
    Main,
    Aux,
}

/// Initializes both branches from disjoint seeds with per-layer scaled
/// uniform draws (bound `1/sqrt(fan_in)`).
pub fn init_model(arch: Arch, seed_main: u64, seed_aux: u64) -> Result<DualModelState> {
    if seed_main == seed_aux {
        return Err(Error::EqualSeeds);
    }
    Ok(DualModelState {
        arch,
        params_main: init_branch(&arch, seed_main),
        params_aux: init_branch(&arch, seed_aux),
        vel_main: vec![0.0; arch.param_count()],
        vel_aux: vec![0.0; arch.param_count()],
        version: 0,
    })
}

fn init_branch(arch: &Arch, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::with_capacity(arch.param_count());
    let fan_ins = [
        arch.in_channels * KERNEL * KERNEL, // conv1 w + b
        arch.hidden * KERNEL * KERNEL,      // conv2 w + b
        arch.hidden,                        // head w + b
        arch.hidden,                        // proj w + b
    ];
    let sizes = [
        (arch.conv1_w(), arch.hidden, 1.0),
        (arch.conv2_w(), arch.hidden, 1.0),
        (arch.head_w(), arch.classes, 1.0),
        (arch.proj_w(), arch.proj_dim, proj_init_gain()),
    ];
    for ((w_count, b_count, gain), fan_in) in sizes.iter().zip(fan_ins.iter()) {
        let bound = gain / (*fan_in as f64).sqrt();
        for _ in 0..w_count + b_count {
            params.push(rng.gen_range(-bound..bound));
        }
    }
    params
}

impl DualModelState {
    /// All-zero parameters; handy for symmetry checks.
    pub fn zeroed(arch: Arch) -> Self {
        let n = arch.param_count();
        DualModelState {
            arch,
            params_main: vec![0.0; n],
            params_aux: vec![0.0; n],
            vel_main: vec![0.0; n],
            vel_aux: vec![0.0; n],
            version: 0,
        }
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn params(&self, which: BranchId) -> &[f64] {
        match which {
            BranchId::Main => &self.params_main,
            BranchId::Aux => &self.params_aux,
        }
    }

    pub fn params_mut(&mut self, which: BranchId) -> &mut [f64] {
        match which {
            BranchId::Main => &mut self.params_main,
            BranchId::Aux => &mut self.params_aux,
        }
    }

    /// Runs both branches on one image.
    pub fn forward(&self, image: &Grid) -> Result<ForwardOutput> {
        if image.data.len() != image.h * image.w || image.h == 0 || image.w == 0 {
            return Err(Error::ShapeMismatch("bad image grid".into()));
        }
        Ok(ForwardOutput {
            main: forward_branch(&self.arch, &self.params_main, image),
            aux: forward_branch(&self.arch, &self.params_aux, image),
            version: self.version,
        })
    }

    /// Gradient of a scalar loss with respect to one branch's parameters,
    /// given per-pixel gradients on that branch's logits and projections.
    pub fn backward(
        &self,
        which: BranchId,
        output: &ForwardOutput,
        d_logits: &Matrix,
        d_z: &Matrix,
    ) -> Result<Vec<f64>> {
        if output.version != self.version {
            return Err(Error::StaleCache);
        }
        let branch = match which {
            BranchId::Main => &output.main,
            BranchId::Aux => &output.aux,
        };
        let s = branch.cache.h * branch.cache.w;
        if d_logits.rows() != s
            || d_logits.cols() != self.arch.classes
            || d_z.rows() != s
            || d_z.cols() != self.arch.proj_dim
        {
            return Err(Error::ShapeMismatch(
                "gradient shapes do not match forward output".into(),
            ));
        }
        Ok(backward_branch(
            &self.arch,
            self.params(which),
            branch,
            d_logits,
            d_z,
        ))
    }

    /// One SGD step: `v <- momentum * v + g + weight_decay * theta;
    /// theta <- theta - lr * v` per branch.
    pub fn sgd_step(
        &mut self,
        g_main: &[f64],
        g_aux: &[f64],
        lr: f64,
        momentum: f64,
        weight_decay: f64,
    ) -> Result<()> {
        let n = self.arch.param_count();
        if g_main.len() != n || g_aux.len() != n {
            return Err(Error::ShapeMismatch("gradient length".into()));
        }
        if g_main.iter().chain(g_aux).any(|g| !g.is_finite()) {
            return Err(Error::Diverged("gradient".into()));
        }
        for ((theta, v), g) in self
            .params_main
            .iter_mut()
            .zip(&mut self.vel_main)
            .zip(g_main)
        {
            *v = momentum * *v + g + weight_decay * *theta;
            *theta -= lr * *v;
        }
        for ((theta, v), g) in self
            .params_aux
            .iter_mut()
            .zip(&mut self.vel_aux)
            .zip(g_aux)
        {
            *v = momentum * *v + g + weight_decay * *theta;
            *theta -= lr * *v;
        }
        if self
            .params_main
            .iter()
            .chain(&self.params_aux)
            .any(|p| !p.is_finite())
        {
            return Err(Error::Diverged("parameters".into()));
        }
        self.version += 1;
        Ok(())
    }

    /// Writes a versioned binary checkpoint: magic "CRN1", architecture
    /// header, then little-endian double parameters for both branches.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path)?;
        let mut out = BufWriter::new(file);
        out.write_all(MAGIC)?;
        for v in [
            self.arch.in_channels as u64,
            self.arch.hidden as u64,
            self.arch.classes as u64,
            self.arch.proj_dim as u64,
        ] {
            out.write_all(&v.to_le_bytes())?;
        }
        for p in self.params_main.iter().chain(&self.params_aux) {
            out.write_all(&p.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut raw = Vec::new();
        fs::File::open(path)?.read_to_end(&mut raw)?;
        if raw.len() < 4 + 32 || &raw[..4] != MAGIC {
            return Err(Error::BadFormat("bad checkpoint header".into()));
        }
        let u = |i: usize| -> usize {
            u64::from_le_bytes(raw[4 + i * 8..12 + i * 8].try_into().unwrap()) as usize
        };
        let arch = Arch {
            in_channels: u(0),
            hidden: u(1),
            classes: u(2),
            proj_dim: u(3),
        };
        let n = arch.param_count();
        let body = &raw[4 + 32..];
        if body.len() != 2 * n * 8 {
            return Err(Error::BadFormat(format!(
                "checkpoint body {} bytes, expected {}",
                body.len(),
                2 * n * 8
            )));
        }
        let read_params = |chunk: &[u8]| -> Vec<f64> {
            chunk
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect()
        };
        Ok(DualModelState {
            arch,
            params_main: read_params(&body[..n * 8]),
            params_aux: read_params(&body[n * 8..]),
            vel_main: vec![0.0; n],
            vel_aux: vec![0.0; n],
            version: 0,
        })
    }
}

/// Per-branch activations cached for backward.
#[derive(Debug, Clone)]
pub struct BranchCache {
    h: usize,
    w: usize,
    input: Vec<f64>,
    act1: Vec<f64>,
    act2: Vec<f64>,
}

/// One branch's outputs: per-pixel class probabilities (S x C) and
/// projections (S x c'), plus the cache.
#[derive(Debug, Clone)]
pub struct BranchOutput {
    pub p: Matrix,
    pub z: Matrix,
    cache: BranchCache,
}

/// Outputs of both branches for one image.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub main: BranchOutput,
    pub aux: BranchOutput,
    version: u64,
}

fn conv3x3(
    input: &[f64],
    in_ch: usize,
    h: usize,
    w: usize,
    weights: &[f64],
    bias: &[f64],
    out_ch: usize,
) -> Vec<f64> {
    let hw = h * w;
    let mut out = vec![0.0; out_ch * hw];
    for o in 0..out_ch {
        for y in 0..h {
            for x in 0..w {
                let mut acc = bias[o];
                for i in 0..in_ch {
                    let w_base = ((o * in_ch + i) * KERNEL) * KERNEL;
                    for ky in 0..KERNEL {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for kx in 0..KERNEL {
                            let sx = x as isize + kx as isize - 1;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            acc += weights[w_base + ky * KERNEL + kx]
                                * input[i * hw + sy as usize * w + sx as usize];
                        }
                    }
                }
                out[o * hw + y * w + x] = acc;
            }
        }
    }
    out
}

/// Scatter-form backward of [`conv3x3`]; accumulates into `d_w`, `d_b`, and
/// (when present) `d_in`.
#[allow(clippy::too_many_arguments)]
fn conv3x3_backward(
    input: &[f64],
    in_ch: usize,
    h: usize,
    w: usize,
    weights: &[f64],
    out_ch: usize,
    d_out: &[f64],
    d_w: &mut [f64],
    d_b: &mut [f64],
    mut d_in: Option<&mut [f64]>,
) {
    let hw = h * w;
    for o in 0..out_ch {
        for y in 0..h {
            for x in 0..w {
                let g = d_out[o * hw + y * w + x];
                if g == 0.0 {
                    continue;
                }
                d_b[o] += g;
                for i in 0..in_ch {
                    let w_base = ((o * in_ch + i) * KERNEL) * KERNEL;
                    for ky in 0..KERNEL {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for kx in 0..KERNEL {
                            let sx = x as isize + kx as isize - 1;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            let src = i * hw + sy as usize * w + sx as usize;
                            d_w[w_base + ky * KERNEL + kx] += g * input[src];
                            if let Some(d_in) = d_in.as_deref_mut() {
                                d_in[src] += g * weights[w_base + ky * KERNEL + kx];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv1x1(
    input: &[f64],
    in_ch: usize,
    hw: usize,
    weights: &[f64],
    bias: &[f64],
    out_ch: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; out_ch * hw];
    for o in 0..out_ch {
        for px in 0..hw {
            let mut acc = bias[o];
            for i in 0..in_ch {
                acc += weights[o * in_ch + i] * input[i * hw + px];
            }
            out[o * hw + px] = acc;
        }
    }
    out
}

fn forward_branch(arch: &Arch, params: &[f64], image: &Grid) -> BranchOutput {
    let off = arch.offsets();
    let (h, w) = (image.h, image.w);
    let hw = h * w;
    let pre1 = conv3x3(
        &image.data,
        arch.in_channels,
        h,
        w,
        &params[off[0]..off[1]],
        &params[off[1]..off[2]],
        arch.hidden,
    );
    let act1: Vec<f64> = pre1.iter().map(|v| v.max(0.0)).collect();
    let pre2 = conv3x3(
        &act1,
        arch.hidden,
        h,
        w,
        &params[off[2]..off[3]],
        &params[off[3]..off[4]],
        arch.hidden,
    );
    let act2: Vec<f64> = pre2.iter().map(|v| v.max(0.0)).collect();
    let logits = conv1x1(
        &act2,
        arch.hidden,
        hw,
        &params[off[4]..off[5]],
        &params[off[5]..off[6]],
        arch.classes,
    );
    let z_raw = conv1x1(
        &act2,
        arch.hidden,
        hw,
        &params[off[6]..off[7]],
        &params[off[7]..],
        arch.proj_dim,
    );

    // Per-pixel softmax over classes.
    let mut p = Matrix::zeros(hw, arch.classes);
    for px in 0..hw {
        let max = (0..arch.classes)
            .map(|c| logits[c * hw + px])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for c in 0..arch.classes {
            let e = (logits[c * hw + px] - max).exp();
            p.set(px, c, e);
            sum += e;
        }
        for c in 0..arch.classes {
            p.set(px, c, p.get(px, c) / sum);
        }
    }
    let mut z = Matrix::zeros(hw, arch.proj_dim);
    for px in 0..hw {
        for k in 0..arch.proj_dim {
            z.set(px, k, z_raw[k * hw + px]);
        }
    }
    BranchOutput {
        p,
        z,
        cache: BranchCache {
            h,
            w,
            input: image.data.clone(),
            act1,
            act2,
        },
    }
}

fn backward_branch(
    arch: &Arch,
    params: &[f64],
    branch: &BranchOutput,
    d_logits: &Matrix,
    d_z: &Matrix,
) -> Vec<f64> {
    let off = arch.offsets();
    let cache = &branch.cache;
    let (h, w) = (cache.h, cache.w);
    let hw = h * w;
    let mut grads = vec![0.0; arch.param_count()];

    // 1x1 heads: gradients and the combined gradient on act2.
    let mut d_act2 = vec![0.0; arch.hidden * hw];
    {
        let head_w = &params[off[4]..off[5]];
        let proj_w = &params[off[6]..off[7]];
        let (before, after) = grads.split_at_mut(off[6]);
        let g_head_w = &mut before[off[4]..]; // head weights then biases
        let g_head_b_start = off[5] - off[4];
        for px in 0..hw {
            for c in 0..arch.classes {
                let g = d_logits.get(px, c);
                if g == 0.0 {
                    continue;
                }
                for i in 0..arch.hidden {
                    g_head_w[c * arch.hidden + i] += g * cache.act2[i * hw + px];
                    d_act2[i * hw + px] += g * head_w[c * arch.hidden + i];
                }
                g_head_w[g_head_b_start + c] += g;
            }
        }
        let g_proj = after; // proj weights then biases
        let g_proj_b_start = off[7] - off[6];
        for px in 0..hw {
            for k in 0..arch.proj_dim {
                let g = d_z.get(px, k);
                if g == 0.0 {
                    continue;
                }
                for i in 0..arch.hidden {
                    g_proj[k * arch.hidden + i] += g * cache.act2[i * hw + px];
                    d_act2[i * hw + px] += g * proj_w[k * arch.hidden + i];
                }
                g_proj[g_proj_b_start + k] += g;
            }
        }
    }

    // Ramp mask: derivative is 0 at and below zero.
    let d_pre2: Vec<f64> = d_act2
        .iter()
        .zip(&cache.act2)
        .map(|(g, a)| if *a > 0.0 { *g } else { 0.0 })
        .collect();

    let mut d_act1 = vec![0.0; arch.hidden * hw];
    {
        let (before, after) = grads.split_at_mut(off[3]);
        conv3x3_backward(
            &cache.act1,
            arch.hidden,
            h,
            w,
            &params[off[2]..off[3]],
            arch.hidden,
            &d_pre2,
            &mut before[off[2]..off[3]],
            &mut after[..arch.hidden],
            Some(&mut d_act1),
        );
    }

    let d_pre1: Vec<f64> = d_act1
        .iter()
        .zip(&cache.act1)
        .map(|(g, a)| if *a > 0.0 { *g } else { 0.0 })
        .collect();

    {
        let (before, after) = grads.split_at_mut(off[1]);
        conv3x3_backward(
            &cache.input,
            arch.in_channels,
            h,
            w,
            &params[off[0]..off[1]],
            arch.hidden,
            &d_pre1,
            &mut before[off[0]..off[1]],
            &mut after[..arch.hidden],
            None,
        );
    }
    grads
}
