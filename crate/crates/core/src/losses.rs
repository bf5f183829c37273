//! Training objectives of the translation and dehazing networks.
//!
//! Every reduction is a mean over elements. Dark-channel and total-variation
//! terms act on images remapped from network space `[-1, 1]` to `[0, 1]`.
//! Each objective comes as a differentiable `*_var` form used by training and
//! a plain form on tensors used for evaluation and as a reference.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autodiff::{weighted_sum, Var};
use crate::error::{ensure, Result};
use crate::physics::dark_channel;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Soft-min sharpness used by the training-time dark channel.
pub const DC_SHARPNESS: f64 = 200.0;

/// Dark-channel patch at the full 256-pixel training resolution.
pub const DC_PATCH_AT_256: usize = 35;

/// Odd dark-channel patch scaled to an image height.
pub fn dc_patch_for(height: usize) -> usize {
    let p = ((DC_PATCH_AT_256 * height) as f64 / 256.0).round() as usize;
    if p % 2 == 0 {
        p + 1
    } else {
        p
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdversarialRole {
    Generator,
    Discriminator,
}

/// How the dark channel's minimum is evaluated.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DarkChannelMode {
    /// Exact minimum.
    Hard,
    /// Negative log-sum-exp with the given sharpness.
    Soft(f64),
}

/// Trade-off weights of the translation and overall objectives.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub tran: f64,
    pub mse: f64,
    pub dark: f64,
    pub tv: f64,
    pub consistency: f64,
    pub cycle: f64,
    pub identity: f64,
}

impl LossWeights {
    pub const DEFAULT: Self = Self {
        tran: 1.0,
        mse: 10.0,
        dark: 1e-2,
        tv: 1e-3,
        consistency: 1e-1,
        cycle: 10.0,
        identity: 5.0,
    };

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_tran", self.tran),
            ("lambda_m", self.mse),
            ("lambda_d", self.dark),
            ("lambda_t", self.tv),
            ("lambda_c", self.consistency),
            ("lambda_1", self.cycle),
            ("lambda_2", self.identity),
        ] {
            ensure!(v.is_finite() && v >= 0.0, Config, "{name} must be finite and >= 0, got {v}");
        }
        Ok(())
    }

    /// Weight of `term` inside the translation objective alone.
    pub fn translation_weight(&self, term: LossTerm) -> f64 {
        use LossTerm::*;
        match term {
            AdvImgReal | AdvFeatReal | AdvImgSyn | AdvFeatSyn => 1.0,
            Cycle => self.cycle,
            Identity => self.identity,
            _ => 0.0,
        }
    }

    /// Weight of `term` inside the overall objective.
    pub fn overall_weight(&self, term: LossTerm) -> f64 {
        use LossTerm::*;
        match term {
            AdvImgReal | AdvFeatReal | AdvImgSyn | AdvFeatSyn | Cycle | Identity => {
                self.tran * self.translation_weight(term)
            }
            RealMse | SynMse => self.mse,
            RealDark | SynDark => self.dark,
            RealTv | SynTv => self.tv,
            Consistency => self.consistency,
        }
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::DEFAULT
    }
}

/// Individual terms of the overall objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LossTerm {
    /// Image-level adversarial term of the synthetic-to-real translator.
    AdvImgReal,
    /// Feature-level adversarial term through the real-domain dehazer.
    AdvFeatReal,
    AdvImgSyn,
    AdvFeatSyn,
    Cycle,
    Identity,
    RealMse,
    SynMse,
    RealDark,
    SynDark,
    RealTv,
    SynTv,
    Consistency,
}

impl LossTerm {
    pub const ALL: [LossTerm; 13] = [
        LossTerm::AdvImgReal,
        LossTerm::AdvFeatReal,
        LossTerm::AdvImgSyn,
        LossTerm::AdvFeatSyn,
        LossTerm::Cycle,
        LossTerm::Identity,
        LossTerm::RealMse,
        LossTerm::SynMse,
        LossTerm::RealDark,
        LossTerm::SynDark,
        LossTerm::RealTv,
        LossTerm::SynTv,
        LossTerm::Consistency,
    ];

    /// Log key of the term.
    pub fn key(self) -> &'static str {
        use LossTerm::*;
        match self {
            AdvImgReal => "L_gan_img_r",
            AdvFeatReal => "L_gan_feat_r",
            AdvImgSyn => "L_gan_img_s",
            AdvFeatSyn => "L_gan_feat_s",
            Cycle => "L_cyc",
            Identity => "L_idt",
            RealMse => "L_rm",
            SynMse => "L_sm",
            RealDark => "L_rd",
            SynDark => "L_sd",
            RealTv => "L_rt",
            SynTv => "L_st",
            Consistency => "L_consis",
        }
    }

    pub fn from_key(key: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.key() == key)
    }

    pub fn is_translation(self) -> bool {
        use LossTerm::*;
        matches!(self, AdvImgReal | AdvFeatReal | AdvImgSyn | AdvFeatSyn | Cycle | Identity)
    }
}

impl fmt::Display for LossTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

/// Itemized values of the active terms plus their weighted total.
#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub terms: Vec<(LossTerm, f64)>,
    /// Translation objective over the translation terms present.
    pub translation: f64,
    pub total: f64,
}

impl LossReport {
    pub fn get(&self, term: LossTerm) -> Option<f64> {
        self.terms.iter().find(|(t, _)| *t == term).map(|&(_, v)| v)
    }

    /// `key=value` pairs of every term, the translation subtotal when any
    /// translation term is present, and the total.
    pub fn fields(&self) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> = self.terms.iter().map(|(t, v)| (t.key().to_string(), *v)).collect();
        if self.terms.iter().any(|(t, _)| t.is_translation()) {
            out.push(("L_tran".into(), self.translation));
        }
        out.push(("total".into(), self.total));
        out
    }
}

/// Translation objective `Σ adversarial + λ₁·cycle + λ₂·identity`.
pub fn translation_total_loss(parts: &[(LossTerm, f64)], weights: &LossWeights) -> f64 {
    parts
        .iter()
        .filter(|(t, _)| t.is_translation())
        .map(|&(t, v)| weights.translation_weight(t) * v)
        .sum()
}

/// Overall objective over whichever terms are present.
pub fn overall_loss(parts: &[(LossTerm, f64)], weights: &LossWeights) -> LossReport {
    let total = parts.iter().map(|&(t, v)| weights.overall_weight(t) * v).sum();
    LossReport {
        terms: parts.to_vec(),
        translation: translation_total_loss(parts, weights),
        total,
    }
}

/// Differentiable overall objective over the given terms.
pub fn overall_loss_var<'g, T: Scalar>(parts: &[(LossTerm, Var<'g, T>)], weights: &LossWeights) -> Result<Var<'g, T>> {
    let weighted: Vec<_> = parts
        .iter()
        .map(|&(t, v)| (v, T::of(weights.overall_weight(t))))
        .collect();
    weighted_sum(&weighted)
}

fn check_finite<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<()> {
    ensure!(t.all_finite(), Domain, "{what} contains non-finite values");
    Ok(())
}

/// Least-squares adversarial objective. The discriminator pushes real
/// scores to 1 and fake scores to 0; the generator pushes fake scores to 1.
pub fn adversarial_loss<T: Scalar>(scores_real: &Tensor<T>, scores_fake: &Tensor<T>, role: AdversarialRole) -> Result<T> {
    check_finite(scores_real, "real scores")?;
    check_finite(scores_fake, "fake scores")?;
    let one = T::one();
    Ok(match role {
        AdversarialRole::Generator => scores_fake.map(|v| (v - one) * (v - one)).mean(),
        AdversarialRole::Discriminator => {
            scores_real.map(|v| (v - one) * (v - one)).mean() + scores_fake.map(|v| v * v).mean()
        }
    })
}

/// Discriminator side of [`adversarial_loss`].
pub fn adversarial_discriminator_var<'g, T: Scalar>(scores_real: Var<'g, T>, scores_fake: Var<'g, T>) -> Result<Var<'g, T>> {
    scores_real
        .add_scalar(-T::one())
        .square()
        .mean()
        .add(scores_fake.square().mean())
}

/// Generator side of [`adversarial_loss`].
pub fn adversarial_generator_var<'g, T: Scalar>(scores_fake: Var<'g, T>) -> Var<'g, T> {
    scores_fake.add_scalar(-T::one()).square().mean()
}

/// Mean absolute difference.
pub fn l1_var<'g, T: Scalar>(a: Var<'g, T>, b: Var<'g, T>) -> Result<Var<'g, T>> {
    Ok(a.sub(b)?.mean_abs())
}

fn l1<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<T> {
    Ok(a.zip_map(b, |u, v| (u - v).abs())?.mean())
}

/// `mean|G_{R→S}(G_{S→R}(x_s, d_s)) − x_s| + mean|G_{S→R}(G_{R→S}(x_r), d_r) − x_r|`
pub fn cycle_consistency_loss<T: Scalar>(
    x_s: &Tensor<T>,
    d_s: &Tensor<T>,
    x_r: &Tensor<T>,
    d_r: &Tensor<T>,
    s2r: impl Fn(&Tensor<T>, &Tensor<T>) -> Result<Tensor<T>>,
    r2s: impl Fn(&Tensor<T>) -> Result<Tensor<T>>,
) -> Result<T> {
    let rec_s = r2s(&s2r(x_s, d_s)?)?;
    let rec_r = s2r(&r2s(x_r)?, d_r)?;
    Ok(l1(&rec_s, x_s)? + l1(&rec_r, x_r)?)
}

/// Differentiable cycle loss from the two reconstructions.
pub fn cycle_consistency_var<'g, T: Scalar>(
    x_s: Var<'g, T>,
    rec_s: Var<'g, T>,
    x_r: Var<'g, T>,
    rec_r: Var<'g, T>,
) -> Result<Var<'g, T>> {
    l1_var(rec_s, x_s)?.add(l1_var(rec_r, x_r)?)
}

/// `mean|G_{R→S}(x_s) − x_s| + mean|G_{S→R}(x_r, d_r) − x_r|`
pub fn identity_loss<T: Scalar>(
    x_s: &Tensor<T>,
    x_r: &Tensor<T>,
    d_r: &Tensor<T>,
    s2r: impl Fn(&Tensor<T>, &Tensor<T>) -> Result<Tensor<T>>,
    r2s: impl Fn(&Tensor<T>) -> Result<Tensor<T>>,
) -> Result<T> {
    Ok(l1(&r2s(x_s)?, x_s)? + l1(&s2r(x_r, d_r)?, x_r)?)
}

/// Differentiable identity loss from the two same-domain translations.
pub fn identity_var<'g, T: Scalar>(
    x_s: Var<'g, T>,
    r2s_of_s: Var<'g, T>,
    x_r: Var<'g, T>,
    s2r_of_r: Var<'g, T>,
) -> Result<Var<'g, T>> {
    l1_var(r2s_of_s, x_s)?.add(l1_var(s2r_of_r, x_r)?)
}

pub fn supervised_mse<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    Ok(pred.zip_map(target, |a, b| (a - b) * (a - b))?.mean())
}

pub fn supervised_mse_var<'g, T: Scalar>(pred: Var<'g, T>, target: Var<'g, T>) -> Result<Var<'g, T>> {
    Ok(pred.sub(target)?.square().mean())
}

/// `mean|∂ₕJ| + mean|∂ᵥJ|` with forward differences.
pub fn total_variation_loss<T: Scalar>(image: &Tensor<T>) -> Result<T> {
    let (n, c, h, w) = image.expect_rank4("image")?;
    ensure!(h >= 2 && w >= 2, Dimension, "total variation needs at least 2x2 pixels");
    let dh = Tensor::from_fn4([n, c, h, w - 1], |b, ch, y, x| (image.at(b, ch, y, x + 1) - image.at(b, ch, y, x)).abs());
    let dv = Tensor::from_fn4([n, c, h - 1, w], |b, ch, y, x| (image.at(b, ch, y + 1, x) - image.at(b, ch, y, x)).abs());
    Ok(dh.mean() + dv.mean())
}

pub fn total_variation_var<'g, T: Scalar>(image: Var<'g, T>) -> Result<Var<'g, T>> {
    image.diff_h()?.mean_abs().add(image.diff_v()?.mean_abs())
}

/// L1 norm (as a mean) of the dark channel of a `[0, 1]` image.
pub fn dark_channel_loss<T: Scalar>(image: &Tensor<T>, patch: usize, mode: DarkChannelMode) -> Result<T> {
    match mode {
        DarkChannelMode::Hard => Ok(dark_channel(image, patch)?.map(T::abs).mean()),
        DarkChannelMode::Soft(k) => {
            let g = crate::autodiff::Graph::no_grad();
            let v = dark_channel_var(g.constant(image.clone()), patch, T::of(k))?;
            let out = v.value().data()[0];
            Ok(out)
        }
    }
}

/// Soft-min dark-channel loss.
pub fn dark_channel_var<'g, T: Scalar>(image: Var<'g, T>, patch: usize, sharpness: T) -> Result<Var<'g, T>> {
    Ok(image.soft_dark_channel(patch, sharpness)?.mean_abs())
}

/// `mean|G_R(x_r) − G_S(G_{R→S}(x_r))|`
pub fn dehaze_consistency_loss<T: Scalar>(
    x_r: &Tensor<T>,
    r2s: impl Fn(&Tensor<T>) -> Result<Tensor<T>>,
    dehaze_real: impl Fn(&Tensor<T>) -> Result<Tensor<T>>,
    dehaze_syn: impl Fn(&Tensor<T>) -> Result<Tensor<T>>,
) -> Result<T> {
    l1(&dehaze_real(x_r)?, &dehaze_syn(&r2s(x_r)?)?)
}

/// Network space `[-1, 1]` to image space `[0, 1]`.
pub fn to_unit<'g, T: Scalar>(x: Var<'g, T>) -> Var<'g, T> {
    x.add_scalar(T::one()).mul_scalar(T::of(0.5))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(seed: u64, shape: [usize; 4], lo: f64, hi: f64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn4(shape, |_, _, _, _| rng.gen_range(lo..hi))
    }

    #[test]
    fn patch_scaling() {
        assert_eq!(dc_patch_for(256), 35);
        assert_eq!(dc_patch_for(64), 9);
        assert_eq!(dc_patch_for(128), 19);
        assert_eq!(dc_patch_for(8), 1);
        assert!(dc_patch_for(16) % 2 == 1);
    }

    #[test]
    fn adversarial_examples() {
        let ones = Tensor::full(&[1, 1, 4, 4], 1.0f64);
        let zeros = Tensor::zeros(&[1, 1, 4, 4]);
        assert_eq!(adversarial_loss(&ones, &zeros, AdversarialRole::Discriminator).unwrap(), 0.0);
        assert_eq!(adversarial_loss(&zeros, &ones, AdversarialRole::Generator).unwrap(), 0.0);
        let r = rand_tensor(1, [2, 1, 3, 3], -2.0, 2.0);
        let f = rand_tensor(2, [2, 1, 3, 3], -2.0, 2.0);
        let n = r.len() as f64;
        let d: f64 = r.data().iter().map(|v| (v - 1.0).powi(2)).sum::<f64>() / n
            + f.data().iter().map(|v| v * v).sum::<f64>() / n;
        let g: f64 = f.data().iter().map(|v| (v - 1.0).powi(2)).sum::<f64>() / n;
        assert!((adversarial_loss(&r, &f, AdversarialRole::Discriminator).unwrap() - d).abs() < 1e-7);
        assert!((adversarial_loss(&r, &f, AdversarialRole::Generator).unwrap() - g).abs() < 1e-7);
        let mut bad = f.clone();
        bad.data_mut()[3] = f64::INFINITY;
        assert!(adversarial_loss(&r, &bad, AdversarialRole::Generator).is_err());

        let graph = Graph::new();
        let dv = adversarial_discriminator_var(graph.constant(r.clone()), graph.constant(f.clone())).unwrap();
        assert!((dv.value().data()[0] - d).abs() < 1e-12);
        let gv = adversarial_generator_var(graph.constant(f));
        assert!((gv.value().data()[0] - g).abs() < 1e-12);
    }

    #[test]
    fn cycle_and_identity_examples() {
        let xs = rand_tensor(1, [1, 3, 4, 4], -1.0, 1.0);
        let xr = rand_tensor(2, [1, 3, 4, 4], -1.0, 1.0);
        let d = Tensor::zeros(&[1, 1, 4, 4]);
        let id_s2r = |x: &Tensor<f64>, _: &Tensor<f64>| Ok(x.clone());
        let id_r2s = |x: &Tensor<f64>| Ok(x.clone());
        assert_eq!(cycle_consistency_loss(&xs, &d, &xr, &d, id_s2r, id_r2s).unwrap(), 0.0);
        assert_eq!(identity_loss(&xs, &xr, &d, id_s2r, id_r2s).unwrap(), 0.0);

        // Each translator shifts by δ/2, so every round trip shifts by δ.
        let delta = 0.3;
        let s2r = |x: &Tensor<f64>, _: &Tensor<f64>| Ok(x.map(|v| v + delta / 2.0));
        let r2s = |x: &Tensor<f64>| Ok(x.map(|v| v + delta / 2.0));
        let c = cycle_consistency_loss(&xs, &d, &xr, &d, s2r, r2s).unwrap();
        assert!((c - 2.0 * delta).abs() < 1e-12);
        let s2r = |x: &Tensor<f64>, _: &Tensor<f64>| Ok(x.map(|v| v + delta));
        let r2s = |x: &Tensor<f64>| Ok(x.map(|v| v - delta));
        let i = identity_loss(&xs, &xr, &d, s2r, r2s).unwrap();
        assert!((i - 2.0 * delta).abs() < 1e-12);
    }

    #[test]
    fn mse_examples() {
        let y = rand_tensor(3, [1, 3, 4, 4], 0.0, 1.0);
        assert_eq!(supervised_mse(&y, &y).unwrap(), 0.0);
        let shifted = y.map(|v| v + 0.25);
        assert!((supervised_mse(&shifted, &y).unwrap() - 0.0625).abs() < 1e-12);
    }

    #[test]
    fn tv_examples() {
        assert_eq!(total_variation_loss(&Tensor::full(&[1, 3, 5, 5], 0.4f64)).unwrap(), 0.0);
        let ramp = Tensor::from_fn4([1, 3, 5, 6], |_, _, _, x| 0.1 * x as f64);
        assert!((total_variation_loss(&ramp).unwrap() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn dark_channel_loss_examples() {
        let c = Tensor::full(&[1, 3, 6, 6], 0.35f64);
        assert!((dark_channel_loss(&c, 3, DarkChannelMode::Hard).unwrap() - 0.35).abs() < 1e-12);
        let zero_blue = Tensor::from_fn4([1, 3, 6, 6], |_, ch, y, x| if ch == 2 { 0.0 } else { (y + x) as f64 / 12.0 });
        assert_eq!(dark_channel_loss(&zero_blue, 3, DarkChannelMode::Hard).unwrap(), 0.0);
    }

    #[test]
    fn consistency_examples() {
        let xr = rand_tensor(4, [1, 3, 4, 4], -1.0, 1.0);
        let id = |x: &Tensor<f64>| Ok(x.clone());
        assert_eq!(dehaze_consistency_loss(&xr, id, id, id).unwrap(), 0.0);
        let shift = |x: &Tensor<f64>| Ok(x.map(|v| v + 0.2));
        let c = dehaze_consistency_loss(&xr, id, shift, id).unwrap();
        assert!((c - 0.2).abs() < 1e-12);
    }

    #[test]
    fn overall_examples() {
        let w = LossWeights::DEFAULT;
        assert_eq!(overall_loss(&[], &w).total, 0.0);
        let r = overall_loss(&[(LossTerm::RealMse, 1.0), (LossTerm::SynMse, 1.0)], &w);
        assert_eq!(r.total, 20.0);
        let parts = [(LossTerm::AdvImgReal, 0.5), (LossTerm::Cycle, 0.1)];
        let no_reg = LossWeights { cycle: 0.0, identity: 0.0, ..w };
        assert_eq!(translation_total_loss(&parts, &no_reg), 0.5);
        assert!(LossWeights { tv: -1.0, ..w }.validate().is_err());
        assert_eq!(LossTerm::from_key("L_consis"), Some(LossTerm::Consistency));
    }
}
