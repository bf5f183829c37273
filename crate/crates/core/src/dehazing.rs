//! Per-domain dehazing networks: a U-shaped encoder/decoder with skip
//! concatenation at every resolution and tanh side outputs on the coarser
//! decoder levels.
//!
//! Channel layout for `n_stages = S`, `c_l = base_width · 2^l`:
//!
//! ```text
//! enc0        3        -> c_0   3x3 s1
//! enc{l}      c_{l-1}  -> c_l   3x3 s2            l = 1..S
//! bottleneck  c_S      -> c_S   3x3 s1
//! dec{l}      c_{l+1} + c_l -> c_l   3x3 s1       l = S-1..0 (after 2x nearest upsample)
//! side{l}     c_l      -> 3     3x3 s1, tanh      l = S-1..1
//! out         c_0      -> 3     3x3 s1, residual: tanh(atanh(x) + out)
//! ```
//!
//! The final head is a residual on the input in pre-tanh space and starts
//! with small weights, so an untrained network is close to the identity.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{ensure, Result};
use crate::layers::{check_input, conv};
use crate::params::{Bound, ParamBuilder, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const SLOPE: f64 = 0.2;
const HEAD_STD: f64 = 0.01;
/// Input clamp margin before `atanh`.
const RESIDUAL_EPS: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DehazerConfig {
    pub base_width: usize,
    /// Number of stride-2 encoder stages, mirrored by the decoder.
    pub n_stages: usize,
}

impl DehazerConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.base_width >= 1, Config, "dehazer base_width must be positive");
        ensure!(self.n_stages >= 1, Config, "dehazer needs at least one encoder stage");
        Ok(())
    }

    fn width(&self, level: usize) -> usize {
        self.base_width << level
    }

    /// Spatial scales (as divisors of the input size) of the side outputs.
    pub fn side_output_scales(&self) -> Vec<usize> {
        (1..self.n_stages).map(|l| 1 << l).collect()
    }
}

impl Default for DehazerConfig {
    fn default() -> Self {
        Self {
            base_width: 8,
            n_stages: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dehazer<T> {
    pub config: DehazerConfig,
    pub params: ParamSet<T>,
}

/// Output of a dehazer forward pass.
pub struct DehazeOutput<'g, T: Scalar> {
    pub clear: Var<'g, T>,
    /// Ordered from the finest (`1/2`) to the coarsest decoder scale.
    pub side_outputs: Vec<Var<'g, T>>,
}

pub fn build_dehazer<T: Scalar>(config: DehazerConfig, seed: u64) -> Result<Dehazer<T>> {
    config.validate()?;
    let mut b = ParamBuilder::new(seed);
    let s = config.n_stages;
    b.conv("enc0", 3, config.width(0), 3);
    for l in 1..=s {
        b.conv(&format!("enc{l}"), config.width(l - 1), config.width(l), 3);
    }
    b.conv("bottleneck", config.width(s), config.width(s), 3);
    for l in (0..s).rev() {
        b.conv(&format!("dec{l}"), config.width(l + 1) + config.width(l), config.width(l), 3);
    }
    for l in 1..s {
        b.conv(&format!("side{l}"), config.width(l), 3, 3);
    }
    b.conv_scaled("out", config.width(0), 3, 3, HEAD_STD, 0.0);
    Ok(Dehazer {
        config,
        params: b.finish(),
    })
}

impl<T: Scalar> Dehazer<T> {
    pub fn forward<'g>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Result<DehazeOutput<'g, T>> {
        self.forward_probe(p, x, false, false)
    }

    /// Forward pass with optional zeroing of the deepest latent or of every skip
    /// branch, used to probe how information flows through the network.
    pub(crate) fn forward_probe<'g>(
        &self,
        p: &Bound<'g, T>,
        x: Var<'g, T>,
        zero_latent: bool,
        zero_skips: bool,
    ) -> Result<DehazeOutput<'g, T>> {
        let (_, c, h, w) = x.value().expect_rank4("dehazer input")?;
        ensure!(c == 3, Dimension, "dehazer input must have 3 channels, got {c}");
        let s = self.config.n_stages;
        let factor = 1usize << s;
        ensure!(
            h % factor == 0 && w % factor == 0 && h > 0 && w > 0,
            Dimension,
            "dehazer input {h}x{w} must be divisible by {factor}"
        );
        let slope = T::of(SLOPE);
        let graph = x.graph();
        let zero_like = |v: Var<'g, T>| graph.constant(Tensor::zeros(v.value().shape()));

        let mut skips = vec![conv(p, "enc0", x, 1, 1)?.leaky_relu(slope)];
        for l in 1..=s {
            let prev = *skips.last().expect("non-empty");
            skips.push(conv(p, &format!("enc{l}"), prev, 2, 1)?.leaky_relu(slope));
        }
        let mut d = conv(p, "bottleneck", skips[s], 1, 1)?.leaky_relu(slope);
        if zero_latent {
            d = zero_like(d);
        }
        let mut side_outputs = Vec::with_capacity(s.saturating_sub(1));
        for l in (0..s).rev() {
            let skip = if zero_skips { zero_like(skips[l]) } else { skips[l] };
            let up = d.upsample_nearest2x()?;
            d = conv(p, &format!("dec{l}"), up.concat_channels(skip)?, 1, 1)?.leaky_relu(slope);
            if l > 0 {
                side_outputs.push(conv(p, &format!("side{l}"), d, 1, 1)?.tanh());
            }
        }
        side_outputs.reverse();
        let base = x.atanh_clamped(T::of(RESIDUAL_EPS));
        let clear = conv(p, "out", d, 1, 1)?.add(base)?.tanh();
        Ok(DehazeOutput { clear, side_outputs })
    }
}

/// Predicted clear image and side outputs for a network-space hazy batch.
pub fn dehaze<T: Scalar>(x: &Tensor<T>, dehazer: &Dehazer<T>) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
    check_input(x, "dehazer input")?;
    let g = Graph::no_grad();
    let p = dehazer.params.bind(&g, false);
    let out = dehazer.forward(&p, g.constant(x.clone()))?;
    Ok((
        (*out.clear.value()).clone(),
        out.side_outputs.iter().map(|v| (*v.value()).clone()).collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn image(seed: u64, h: usize, w: usize) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn4([1, 3, h, w], |_, _, _, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn shape_algebra_width8_three_stages() {
        let d = build_dehazer::<f32>(DehazerConfig { base_width: 8, n_stages: 3 }, 0).unwrap();
        let shape = |n: &str| d.params.get(n).unwrap().shape().to_vec();
        assert_eq!(shape("enc0.weight"), vec![8, 3, 3, 3]);
        assert_eq!(shape("enc1.weight"), vec![16, 8, 3, 3]);
        assert_eq!(shape("enc2.weight"), vec![32, 16, 3, 3]);
        assert_eq!(shape("enc3.weight"), vec![64, 32, 3, 3]);
        assert_eq!(shape("bottleneck.weight"), vec![64, 64, 3, 3]);
        assert_eq!(shape("dec2.weight"), vec![32, 96, 3, 3]);
        assert_eq!(shape("dec1.weight"), vec![16, 48, 3, 3]);
        assert_eq!(shape("dec0.weight"), vec![8, 24, 3, 3]);
        assert_eq!(shape("side2.weight"), vec![3, 32, 3, 3]);
        assert_eq!(shape("side1.weight"), vec![3, 16, 3, 3]);
        assert_eq!(shape("out.weight"), vec![3, 8, 3, 3]);
        let weights = 8 * 3 * 9 + 16 * 8 * 9 + 32 * 16 * 9 + 64 * 32 * 9 + 64 * 64 * 9
            + 32 * 96 * 9 + 16 * 48 * 9 + 8 * 24 * 9 + 3 * 32 * 9 + 3 * 16 * 9 + 3 * 8 * 9;
        let biases = 8 + 16 + 32 + 64 + 64 + 32 + 16 + 8 + 3 + 3 + 3;
        assert_eq!(d.params.count(), weights + biases);
    }

    #[test]
    fn seeds_control_initialization() {
        let cfg = DehazerConfig::default();
        assert_eq!(build_dehazer::<f32>(cfg, 1).unwrap(), build_dehazer::<f32>(cfg, 1).unwrap());
        assert_ne!(build_dehazer::<f32>(cfg, 1).unwrap().params, build_dehazer::<f32>(cfg, 2).unwrap().params);
        assert!(build_dehazer::<f32>(DehazerConfig { base_width: 8, n_stages: 0 }, 1).is_err());
    }

    #[test]
    fn output_scales() {
        let d = build_dehazer::<f64>(DehazerConfig { base_width: 4, n_stages: 3 }, 3).unwrap();
        let x = image(1, 64, 64);
        let (j, sides) = dehaze(&x, &d).unwrap();
        assert_eq!(j.shape(), &[1, 3, 64, 64]);
        assert_eq!(sides.len(), 2);
        assert_eq!(sides[0].shape(), &[1, 3, 32, 32]);
        assert_eq!(sides[1].shape(), &[1, 3, 16, 16]);
        for t in std::iter::once(&j).chain(&sides) {
            assert!(t.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
        assert_eq!(dehaze(&x, &d).unwrap().0, j);
        assert!(matches!(dehaze(&image(1, 60, 64), &d), Err(Error::Dimension(_))));
    }

    #[test]
    fn skips_carry_more_than_the_latent() {
        for seed in 0..3 {
            let d = build_dehazer::<f64>(DehazerConfig { base_width: 4, n_stages: 3 }, seed).unwrap();
            let g = Graph::no_grad();
            let p = d.params.bind(&g, false);
            let x = g.constant(image(seed + 10, 32, 32));
            let full = d.forward_probe(&p, x, false, false).unwrap().clear.value();
            let no_latent = d.forward_probe(&p, x, true, false).unwrap().clear.value();
            let no_skips = d.forward_probe(&p, x, false, true).unwrap().clear.value();
            let diff = |a: &Tensor<f64>, b: &Tensor<f64>| a.zip_map(b, |u, v| (u - v).abs()).unwrap().mean();
            assert!(diff(&full, &no_latent) < diff(&full, &no_skips));
        }
    }
}
