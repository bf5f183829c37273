//! Bidirectional translators between the synthetic and real haze domains
//! and the patch discriminators that drive their adversarial training.
//!
//! The synthetic-to-real generator is a ResNet-style encoder/decoder whose
//! last upsampled feature map is modulated by a spatial feature transform
//! predicted from scene depth. The real-to-synthetic generator is the same
//! network without the modulation.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{ensure, Error, Result};
use crate::layers::{check_input, conv, norm, upconv};
use crate::params::{Bound, ParamBuilder, ParamSet};
use crate::physics::DepthMap;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const SFT_SLOPE: f64 = 0.1;
const DISC_SLOPE: f64 = 0.2;
const SKIP_HEAD_STD: f64 = 0.01;
const SKIP_EPS: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    /// Channels after the input convolution.
    pub base_width: usize,
    pub n_res_blocks: usize,
    /// Kernel size of the input and output convolutions.
    pub io_kernel: usize,
    /// Number of stride-2 down (and matching up) stages.
    pub n_sampling: usize,
    /// Adds the input to the output head in pre-tanh space, with a
    /// small-initialized head, so training starts near the identity map.
    /// Adds no parameters.
    #[serde(default)]
    pub input_skip: bool,
}

impl GeneratorConfig {
    /// The full-size layer table: 64 base channels, nine residual blocks.
    pub const FULL_SIZE: Self = Self {
        base_width: 64,
        n_res_blocks: 9,
        io_kernel: 7,
        n_sampling: 2,
        input_skip: false,
    };

    pub fn with_width(base_width: usize, n_res_blocks: usize) -> Self {
        Self {
            base_width,
            n_res_blocks,
            ..Self::FULL_SIZE
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.base_width >= 4, Config, "generator base_width must be >= 4, got {}", self.base_width);
        ensure!(self.n_res_blocks >= 1, Config, "generator needs at least one residual block");
        ensure!(
            self.io_kernel % 2 == 1,
            Config,
            "generator io_kernel must be odd, got {}",
            self.io_kernel
        );
        ensure!(self.n_sampling >= 1, Config, "generator needs at least one sampling stage");
        Ok(())
    }

    fn bottleneck_width(&self) -> usize {
        self.base_width << self.n_sampling
    }
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self::FULL_SIZE
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GeneratorKind {
    /// Synthetic → real, depth conditioned.
    SynToReal,
    /// Real → synthetic.
    RealToSyn,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generator<T> {
    pub kind: GeneratorKind,
    pub config: GeneratorConfig,
    pub params: ParamSet<T>,
}

/// Parameters of the synthetic-to-real generator.
pub fn build_s2r_generator<T: Scalar>(config: GeneratorConfig, seed: u64) -> Result<Generator<T>> {
    build_generator(GeneratorKind::SynToReal, config, seed)
}

/// Parameters of the real-to-synthetic generator.
pub fn build_r2s_generator<T: Scalar>(config: GeneratorConfig, seed: u64) -> Result<Generator<T>> {
    build_generator(GeneratorKind::RealToSyn, config, seed)
}

fn build_generator<T: Scalar>(kind: GeneratorKind, config: GeneratorConfig, seed: u64) -> Result<Generator<T>> {
    config.validate()?;
    let mut b = ParamBuilder::new(seed);
    let w = config.base_width;
    b.conv("conv_in", 3, w, config.io_kernel);
    for i in 1..=config.n_sampling {
        b.conv(&format!("down{i}"), w << (i - 1), w << i, 3);
    }
    let wide = config.bottleneck_width();
    for i in 1..=config.n_res_blocks {
        b.conv(&format!("res{i}.a"), wide, wide, 3);
        b.conv(&format!("res{i}.b"), wide, wide, 3);
    }
    for i in 1..=config.n_sampling {
        let c_in = wide >> (i - 1);
        b.conv_transpose(&format!("up{i}"), c_in, c_in / 2, 3);
    }
    if kind == GeneratorKind::SynToReal {
        b.conv("sft.cond1", 1, w, 3);
        b.conv("sft.cond2", w, w, 3);
        b.conv("sft.cond3", w, w, 3);
        // γ starts near one and β near zero so the modulation starts close to identity.
        b.conv_scaled("sft.gamma", w, w, 3, 0.02, 1.0);
        b.conv_scaled("sft.beta", w, w, 3, 0.02, 0.0);
    }
    if config.input_skip {
        b.conv_scaled("conv_out", w, 3, config.io_kernel, SKIP_HEAD_STD, 0.0);
    } else {
        b.conv("conv_out", w, 3, config.io_kernel);
    }
    Ok(Generator {
        kind,
        config,
        params: b.finish(),
    })
}

/// `γ ⊙ F + β`
pub fn sft_apply<'g, T: Scalar>(features: Var<'g, T>, gamma: Var<'g, T>, beta: Var<'g, T>) -> Result<Var<'g, T>> {
    ensure!(
        features.shape() == gamma.shape() && features.shape() == beta.shape(),
        Dimension,
        "SFT operands differ in shape: F {:?}, gamma {:?}, beta {:?}",
        features.shape(),
        gamma.shape(),
        beta.shape()
    );
    gamma.mul(features)?.add(beta)
}

/// Evaluates [`sft_apply`] on plain tensors.
pub fn sft_apply_tensor<T: Scalar>(features: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<Tensor<T>> {
    let g = Graph::no_grad();
    let out = sft_apply(g.constant(features.clone()), g.constant(gamma.clone()), g.constant(beta.clone()))?;
    Ok((*out.value()).clone())
}

/// Conditional maps from depth, then the `(γ, β)` heads.
pub fn sft_condition_var<'g, T: Scalar>(p: &Bound<'g, T>, depth: Var<'g, T>) -> Result<(Var<'g, T>, Var<'g, T>)> {
    let slope = T::of(SFT_SLOPE);
    let mut phi = depth;
    for i in 1..=3 {
        phi = conv(p, &format!("sft.cond{i}"), phi, 1, 1)?.leaky_relu(slope);
    }
    Ok((conv(p, "sft.gamma", phi, 1, 1)?, conv(p, "sft.beta", phi, 1, 1)?))
}

/// `(γ, β)` for a depth map already at the modulated feature resolution.
pub fn sft_condition<T: Scalar>(depth: &DepthMap<T>, generator: &Generator<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    ensure!(
        generator.kind == GeneratorKind::SynToReal,
        Config,
        "only the synthetic-to-real generator carries SFT parameters"
    );
    let g = Graph::no_grad();
    let p = generator.params.bind(&g, false);
    let (gamma, beta) = sft_condition_var(&p, g.constant(depth.as_tensor().clone()))?;
    Ok(((*gamma.value()).clone(), (*beta.value()).clone()))
}

impl<T: Scalar> Generator<T> {
    /// Differentiable forward pass. `depth` is required for the
    /// synthetic-to-real generator and ignored otherwise; it is resized to
    /// the modulated feature resolution.
    pub fn forward<'g>(&self, p: &Bound<'g, T>, x: Var<'g, T>, depth: Option<&Tensor<T>>) -> Result<Var<'g, T>> {
        let (_, c, h, w) = x.value().expect_rank4("generator input")?;
        ensure!(c == 3, Dimension, "generator input must have 3 channels, got {c}");
        let factor = 1usize << self.config.n_sampling;
        ensure!(
            h % factor == 0 && w % factor == 0 && h > 0 && w > 0,
            Dimension,
            "generator input {h}x{w} must be divisible by {factor}"
        );
        let graph = x.graph();
        let pad = self.config.io_kernel / 2;
        let mut hid = norm(conv(p, "conv_in", x, 1, pad)?)?.relu();
        for i in 1..=self.config.n_sampling {
            hid = norm(conv(p, &format!("down{i}"), hid, 2, 1)?)?.relu();
        }
        for i in 1..=self.config.n_res_blocks {
            let r = norm(conv(p, &format!("res{i}.a"), hid, 1, 1)?)?.relu();
            let r = norm(conv(p, &format!("res{i}.b"), r, 1, 1)?)?;
            hid = hid.add(r)?;
        }
        for i in 1..=self.config.n_sampling {
            hid = norm(upconv(p, &format!("up{i}"), hid)?)?.relu();
        }
        if self.kind == GeneratorKind::SynToReal {
            let depth = depth.ok_or_else(|| Error::Config("synthetic-to-real translation needs a depth map".into()))?;
            let (dn, dc, _, _) = depth.expect_rank4("depth")?;
            ensure!(
                dc == 1 && dn == x.value().dims4().0,
                Dimension,
                "depth {:?} does not match input {:?}",
                depth.shape(),
                x.value().shape()
            );
            let (_, _, fh, fw) = hid.value().dims4();
            let cond = graph.constant(depth.resize_bilinear(fh, fw));
            let (gamma, beta) = sft_condition_var(p, cond)?;
            hid = sft_apply(hid, gamma, beta)?;
        }
        let head = conv(p, "conv_out", hid, 1, pad)?;
        if self.config.input_skip {
            Ok(head.add(x.atanh_clamped(T::of(SKIP_EPS)))?.tanh())
        } else {
            Ok(head.tanh())
        }
    }

    fn run(&self, x: &Tensor<T>, depth: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        check_input(x, "translator input")?;
        let g = Graph::no_grad();
        let p = self.params.bind(&g, false);
        let out = self.forward(&p, g.constant(x.clone()), depth)?;
        Ok((*out.value()).clone())
    }
}

/// `G_{S→R}(x_s, d_s)` on network-space images.
pub fn translate_s2r<T: Scalar>(x_s: &Tensor<T>, d_s: &DepthMap<T>, generator: &Generator<T>) -> Result<Tensor<T>> {
    ensure!(
        generator.kind == GeneratorKind::SynToReal,
        Config,
        "translate_s2r needs the synthetic-to-real generator"
    );
    generator.run(x_s, Some(d_s.as_tensor()))
}

/// `G_{R→S}(x_r)` on network-space images.
pub fn translate_r2s<T: Scalar>(x_r: &Tensor<T>, generator: &Generator<T>) -> Result<Tensor<T>> {
    ensure!(
        generator.kind == GeneratorKind::RealToSyn,
        Config,
        "translate_r2s needs the real-to-synthetic generator"
    );
    generator.run(x_r, None)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub base_width: usize,
    /// Number of stride-2 stages; each halves the score map.
    pub n_stages: usize,
}

impl DiscriminatorConfig {
    pub const FULL_SIZE: Self = Self {
        base_width: 64,
        n_stages: 3,
    };

    pub fn validate(&self) -> Result<()> {
        ensure!(self.base_width >= 1, Config, "discriminator base_width must be positive");
        ensure!(self.n_stages >= 1, Config, "discriminator needs at least one stage");
        Ok(())
    }
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self::FULL_SIZE
    }
}

/// Least-squares patch discriminator.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator<T> {
    pub config: DiscriminatorConfig,
    pub params: ParamSet<T>,
}

pub fn build_discriminator<T: Scalar>(config: DiscriminatorConfig, seed: u64) -> Result<Discriminator<T>> {
    config.validate()?;
    let mut b = ParamBuilder::new(seed);
    let mut c_in = 3;
    for i in 1..=config.n_stages {
        let c_out = config.base_width << (i - 1);
        b.conv(&format!("stage{i}"), c_in, c_out, 4);
        c_in = c_out;
    }
    b.conv("head", c_in, 1, 3);
    Ok(Discriminator {
        config,
        params: b.finish(),
    })
}

impl<T: Scalar> Discriminator<T> {
    pub fn forward<'g>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let slope = T::of(DISC_SLOPE);
        let mut h = x;
        for i in 1..=self.config.n_stages {
            h = conv(p, &format!("stage{i}"), h, 2, 1)?;
            if i > 1 {
                h = norm(h)?;
            }
            h = h.leaky_relu(slope);
        }
        conv(p, "head", h, 1, 1)
    }

    pub fn scores(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        check_input(x, "discriminator input")?;
        let g = Graph::no_grad();
        let p = self.params.bind(&g, false);
        let out = self.forward(&p, g.constant(x.clone()))?;
        Ok((*out.value()).clone())
    }
}

/// Patch score map of an image-level discriminator.
pub fn discriminate_image<T: Scalar>(x: &Tensor<T>, d: &Discriminator<T>) -> Result<Tensor<T>> {
    d.scores(x)
}

/// Patch score map of a feature-level discriminator applied to dehazed output.
pub fn discriminate_feature<T: Scalar>(dehazed: &Tensor<T>, d: &Discriminator<T>) -> Result<Tensor<T>> {
    d.scores(dehazed)
}
