//! Atmospheric scattering model, dark channel operator and the DCP-based
//! pseudo-depth pipeline used to condition real hazy images.
//!
//! Images are `[n, 3, h, w]` tensors in `[0, 1]`; depth and transmission
//! maps are `[n, 1, h, w]`.

use crate::error::{ensure, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Default fraction of haze removed by the DCP transmission estimate.
pub const DEFAULT_OMEGA: f64 = 0.95;
/// Lower clamp applied to DCP transmission estimates.
pub const TRANSMISSION_FLOOR: f64 = 0.05;

/// Non-negative scene depth, `[n, 1, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap<T>(Tensor<T>);

impl<T: Scalar> DepthMap<T> {
    pub fn new(depth: Tensor<T>) -> Result<Self> {
        let (_, c, _, _) = depth.expect_rank4("depth map")?;
        ensure!(c == 1, Dimension, "depth map must have one channel, got {c}");
        ensure!(
            depth.data().iter().all(|&v| v.is_finite() && v >= T::zero()),
            Domain,
            "depth must be finite and non-negative"
        );
        Ok(Self(depth))
    }

    pub fn as_tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.0
    }
}

/// Per-pixel transmission in `(0, 1]`, `[n, 1, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransmissionMap<T>(Tensor<T>);

impl<T: Scalar> TransmissionMap<T> {
    pub fn new(t: Tensor<T>) -> Result<Self> {
        let (_, c, _, _) = t.expect_rank4("transmission map")?;
        ensure!(c == 1, Dimension, "transmission map must have one channel, got {c}");
        ensure!(
            t.data().iter().all(|&v| v > T::zero() && v <= T::one()),
            Domain,
            "transmission must lie in (0, 1]"
        );
        Ok(Self(t))
    }

    /// Constant transmission of the given shape.
    pub fn uniform(n: usize, h: usize, w: usize, value: T) -> Result<Self> {
        Self::new(Tensor::full(&[n, 1, h, w], value))
    }

    pub fn as_tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.0
    }
}

/// Atmospheric light (per channel) and scattering coefficient.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HazeParams<T> {
    airlight: [T; 3],
    beta: T,
}

impl<T: Scalar> HazeParams<T> {
    pub fn new(airlight: [T; 3], beta: T) -> Result<Self> {
        ensure!(
            airlight.iter().all(|&a| a >= T::zero() && a <= T::one()),
            Domain,
            "atmospheric light channels must lie in [0, 1], got {:?}",
            airlight
        );
        ensure!(
            beta.is_finite() && beta >= T::zero(),
            Domain,
            "scattering coefficient must be finite and non-negative, got {beta}"
        );
        Ok(Self { airlight, beta })
    }

    /// Grey airlight broadcast to all channels.
    pub fn gray(airlight: T, beta: T) -> Result<Self> {
        Self::new([airlight; 3], beta)
    }

    pub fn airlight(&self) -> [T; 3] {
        self.airlight
    }

    pub fn beta(&self) -> T {
        self.beta
    }
}

fn check_beta<T: Scalar>(beta: T) -> Result<()> {
    ensure!(
        beta.is_finite() && beta >= T::zero(),
        Domain,
        "beta must be finite and non-negative, got {beta}"
    );
    Ok(())
}

/// `t = exp(−β·d)`, floored at the smallest positive value so it stays in `(0, 1]`.
pub fn transmission_from_depth<T: Scalar>(depth: &DepthMap<T>, beta: T) -> Result<TransmissionMap<T>> {
    check_beta(beta)?;
    let t = depth
        .as_tensor()
        .map(|d| (-beta * d).exp().max(T::min_positive_value()));
    Ok(TransmissionMap(t))
}

fn check_spatial<T: Scalar>(image: &Tensor<T>, t: &TransmissionMap<T>) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = image.expect_rank4("image")?;
    ensure!(c == 3, Dimension, "image must have 3 channels, got {c}");
    let (tn, _, th, tw) = t.as_tensor().dims4();
    ensure!(
        (tn, th, tw) == (n, h, w),
        Dimension,
        "transmission {:?} does not match image {:?}",
        t.as_tensor().shape(),
        image.shape()
    );
    Ok((n, h, w))
}

/// Hazy image `I = J·t + A·(1 − t)`, `t` broadcast over channels.
pub fn synthesize_haze<T: Scalar>(clear: &Tensor<T>, t: &TransmissionMap<T>, params: &HazeParams<T>) -> Result<Tensor<T>> {
    check_spatial(clear, t)?;
    let tt = t.as_tensor();
    Ok(Tensor::from_fn4(
        [clear.dims4().0, 3, clear.dims4().2, clear.dims4().3],
        |b, c, y, x| {
            let tv = tt.at(b, 0, y, x);
            clear.at(b, c, y, x) * tv + params.airlight[c] * (T::one() - tv)
        },
    ))
}

/// Algebraic inverse `J = (I − A·(1 − t')) / t'` with `t' = max(t, t_floor)`.
pub fn invert_haze<T: Scalar>(hazy: &Tensor<T>, t: &TransmissionMap<T>, params: &HazeParams<T>, t_floor: T) -> Result<Tensor<T>> {
    ensure!(
        t_floor > T::zero() && t_floor < T::one(),
        Domain,
        "t_floor must lie in (0, 1), got {t_floor}"
    );
    let (n, h, w) = check_spatial(hazy, t)?;
    let tt = t.as_tensor();
    Ok(Tensor::from_fn4([n, 3, h, w], |b, c, y, x| {
        let tv = tt.at(b, 0, y, x).max(t_floor);
        (hazy.at(b, c, y, x) - params.airlight[c] * (T::one() - tv)) / tv
    }))
}

fn check_patch(patch: usize) -> Result<()> {
    ensure!(patch % 2 == 1, Domain, "patch must be an odd positive integer, got {patch}");
    Ok(())
}

/// Hard dark channel: minimum over channels, then over a `patch × patch`
/// window with replicate padding. Output is `[n, 1, h, w]`.
pub fn dark_channel<T: Scalar>(image: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    check_patch(patch)?;
    let (n, c, h, w) = image.expect_rank4("image")?;
    ensure!(c >= 1, Dimension, "image has no channels");
    let r = patch / 2;
    let channel_min = Tensor::from_fn4([n, 1, h, w], |b, _, y, x| {
        (0..c).map(|ch| image.at(b, ch, y, x)).fold(T::infinity(), T::min)
    });
    // A square min filter under replicate padding is separable.
    let rows = Tensor::from_fn4([n, 1, h, w], |b, _, y, x| {
        (x.saturating_sub(r)..=(x + r).min(w - 1))
            .map(|xx| channel_min.at(b, 0, y, xx))
            .fold(T::infinity(), T::min)
    });
    Ok(Tensor::from_fn4([n, 1, h, w], |b, _, y, x| {
        (y.saturating_sub(r)..=(y + r).min(h - 1))
            .map(|yy| rows.at(b, 0, yy, x))
            .fold(T::infinity(), T::min)
    }))
}

/// DCP transmission estimate `1 − ω·dark_channel(I / A)`, clamped to `[0.05, 1]`.
pub fn estimate_transmission_dcp<T: Scalar>(
    hazy: &Tensor<T>,
    params: &HazeParams<T>,
    omega: T,
    patch: usize,
) -> Result<TransmissionMap<T>> {
    ensure!(
        params.airlight.iter().all(|&a| a > T::zero()),
        Domain,
        "atmospheric light must be strictly positive in every channel, got {:?}",
        params.airlight
    );
    ensure!(
        omega > T::zero() && omega <= T::one(),
        Domain,
        "omega must lie in (0, 1], got {omega}"
    );
    let (n, c, h, w) = hazy.expect_rank4("image")?;
    ensure!(c == 3, Dimension, "image must have 3 channels, got {c}");
    let scaled = Tensor::from_fn4([n, 3, h, w], |b, ch, y, x| hazy.at(b, ch, y, x) / params.airlight[ch]);
    let dark = dark_channel(&scaled, patch)?;
    let floor = T::of(TRANSMISSION_FLOOR);
    TransmissionMap::new(dark.map(|d| (T::one() - omega * d).max(floor).min(T::one())))
}

/// Depth recovered from transmission, `d = −ln(t) / β`.
pub fn pseudo_depth<T: Scalar>(t: &TransmissionMap<T>, beta: T) -> Result<DepthMap<T>> {
    ensure!(beta.is_finite() && beta > T::zero(), Domain, "beta must be positive, got {beta}");
    Ok(DepthMap(t.as_tensor().map(|v| (-v.ln() / beta).max(T::zero()))))
}

/// Scattering coefficient that maps the DCP transmission range `[0.05, 1]`
/// onto pseudo-depth `[0, 1]`.
pub fn normalizing_beta<T: Scalar>() -> T {
    T::of(-TRANSMISSION_FLOOR.ln())
}

/// Pseudo-depth of real hazy images, normalized to `[0, 1]`.
pub fn real_image_depth<T: Scalar>(hazy: &Tensor<T>, params: &HazeParams<T>, patch: usize) -> Result<DepthMap<T>> {
    let t = estimate_transmission_dcp(hazy, params, T::of(DEFAULT_OMEGA), patch)?;
    let d = pseudo_depth(&t, normalizing_beta())?;
    DepthMap::new(d.into_tensor().map(|v| v.min(T::one())))
        .map_err(|e| Error::Domain(format!("pseudo-depth: {e}")))
}
