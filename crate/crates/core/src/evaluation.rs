//! PSNR/SSIM, inference with domain routing, and the ablation harness.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::datasets::{denormalize, normalize, Dataset};
use crate::dehazing::{dehaze, Dehazer};
use crate::error::{ensure, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::training::{LogRecord, Mode, Networks, TrainConfig, Trainer, TrainingData};

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Full-scale reference scores (PSNR dB, SSIM) on the synthetic domain.
pub const REFERENCE_SCORES: [(&str, f64, f64); 4] = [
    ("SYN", 25.67, 0.8801),
    ("SYN+U", 25.75, 0.8699),
    ("R2S+U", 25.91, 0.8822),
    ("FULL", 27.76, 0.9284),
];

fn check_pair<T: Scalar>(pred: &Tensor<T>, reference: &Tensor<T>) -> Result<()> {
    pred.expect_rank4("prediction")?;
    pred.same_shape(reference, "metric")?;
    ensure!(!pred.is_empty(), Dimension, "metric of empty images");
    Ok(())
}

/// `10·log10(1/MSE)` for images in `[0,1]`, capped at [`PSNR_CAP`].
pub fn psnr<T: Scalar>(pred: &Tensor<T>, reference: &Tensor<T>) -> Result<f64> {
    check_pair(pred, reference)?;
    let mse = pred
        .data()
        .iter()
        .zip(reference.data())
        .map(|(&a, &b)| (a.to_f64_lossy() - b.to_f64_lossy()).powi(2))
        .sum::<f64>()
        / pred.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable weighted sum over every fully contained window.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean local SSIM with an 11×11 Gaussian window (σ = 1.5) over valid
/// positions, averaged over channels and batch items.
pub fn ssim<T: Scalar>(pred: &Tensor<T>, reference: &Tensor<T>) -> Result<f64> {
    check_pair(pred, reference)?;
    let (n, c, h, w) = pred.dims4();
    ensure!(
        h >= SSIM_WINDOW && w >= SSIM_WINDOW,
        Dimension,
        "SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
    );
    let k = gaussian_window();
    let mut total = 0.0;
    for b in 0..n {
        for ch in 0..c {
            let plane = |t: &Tensor<T>| -> Vec<f64> {
                let start = (b * c + ch) * h * w;
                t.data()[start..start + h * w].iter().map(|v| v.to_f64_lossy()).collect()
            };
            let (x, y) = (plane(pred), plane(reference));
            let prod = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(u, v)| u * v).collect() };
            let mx = filter_valid(&x, h, w, &k);
            let my = filter_valid(&y, h, w, &k);
            let exx = filter_valid(&prod(&x, &x), h, w, &k);
            let eyy = filter_valid(&prod(&y, &y), h, w, &k);
            let exy = filter_valid(&prod(&x, &y), h, w, &k);
            let sum: f64 = (0..mx.len())
                .map(|i| {
                    let (ux, uy) = (mx[i], my[i]);
                    let sxx = exx[i] - ux * ux;
                    let syy = eyy[i] - uy * uy;
                    let sxy = exy[i] - ux * uy;
                    ((2.0 * ux * uy + SSIM_C1) * (2.0 * sxy + SSIM_C2))
                        / ((ux * ux + uy * uy + SSIM_C1) * (sxx + syy + SSIM_C2))
                })
                .sum();
            total += sum / mx.len() as f64;
        }
    }
    Ok(total / (n * c) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Domain {
    Real,
    Synthetic,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::Real => "real",
            Domain::Synthetic => "synthetic",
        })
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "real" => Ok(Domain::Real),
            "synthetic" | "syn" => Ok(Domain::Synthetic),
            _ => Err(Error::Config(format!("unknown domain `{s}` (expected real or synthetic)"))),
        }
    }
}

/// The two dehazing networks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DehazerId {
    /// Real-domain dehazer.
    GR,
    /// Synthetic-domain dehazer.
    GS,
}

impl fmt::Display for DehazerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DehazerId::GR => "G_R",
            DehazerId::GS => "G_S",
        })
    }
}

/// The dehazer a mode is evaluated with: the one it trains, or for the
/// full model the one matching the input domain.
pub fn deployed_dehazer(mode: Mode, domain: Domain) -> DehazerId {
    match (mode, domain) {
        (Mode::S2r, _) | (Mode::Full, Domain::Real) => DehazerId::GR,
        _ => DehazerId::GS,
    }
}

impl<T: Scalar> Networks<T> {
    pub fn dehazer(&self, id: DehazerId) -> &Dehazer<T> {
        match id {
            DehazerId::GR => &self.dehaze_r,
            DehazerId::GS => &self.dehaze_s,
        }
    }
}

/// Dehazes a `[n,3,h,w]` image in `[0,1]` of any size. Inputs are
/// replicate-padded to the network's size multiple and cropped back.
pub fn dehaze_image<T: Scalar>(hazy: &Tensor<T>, dehazer: &Dehazer<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = hazy.expect_rank4("hazy image")?;
    ensure!(c == 3, Dimension, "expected 3 channels, got {c}");
    ensure!(h >= 1 && w >= 1, Dimension, "empty image");
    let m = 1usize << dehazer.config.n_stages;
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    let padded = Tensor::from_fn4([n, 3, ph, pw], |b, ch, y, x| hazy.at(b, ch, y.min(h - 1), x.min(w - 1)));
    let (out, _) = dehaze(&normalize(&padded), dehazer)?;
    let out = denormalize(&out);
    Ok(Tensor::from_fn4([n, 3, h, w], |b, ch, y, x| {
        out.at(b, ch, y, x).max(T::zero()).min(T::one())
    }))
}

/// Dehazes with the network matching `domain`; returns the image and the
/// network used.
pub fn run_inference<T: Scalar>(hazy: &Tensor<T>, networks: &Networks<T>, domain: Domain) -> Result<(Tensor<T>, DehazerId)> {
    let id = deployed_dehazer(Mode::Full, domain);
    log::info!("dehazing {domain} input with {id}");
    Ok((dehaze_image(hazy, networks.dehazer(id))?, id))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub psnr_mean: f64,
    pub ssim_mean: f64,
    pub count: usize,
}

/// Hazy inputs and ground truth of one evaluation domain, in `[0,1]`.
pub fn evaluation_pairs<T: Scalar>(data: &Dataset<T>, domain: Domain) -> Result<Vec<(Tensor<T>, Tensor<T>)>> {
    let pairs: Vec<_> = match domain {
        Domain::Synthetic => data.synthetic.iter().map(|s| (s.hazy.clone(), s.clear.clone())).collect(),
        Domain::Real => data
            .real
            .iter()
            .filter_map(|r| r.clear.as_ref().map(|c| (r.hazy.clone(), c.clone())))
            .collect(),
    };
    ensure!(!pairs.is_empty(), Config, "no {domain} samples with ground truth to evaluate on");
    Ok(pairs)
}

/// Mean PSNR/SSIM of `predict` over the pairs.
pub fn mean_metrics<T: Scalar>(
    pairs: &[(Tensor<T>, Tensor<T>)],
    mut predict: impl FnMut(&Tensor<T>) -> Result<Tensor<T>>,
) -> Result<Metrics> {
    ensure!(!pairs.is_empty(), Config, "no samples to evaluate");
    let (mut p, mut s) = (0.0, 0.0);
    for (hazy, clear) in pairs {
        let out = predict(hazy)?;
        p += psnr(&out, clear)?;
        s += ssim(&out, clear)?;
    }
    let n = pairs.len() as f64;
    Ok(Metrics {
        psnr_mean: p / n,
        ssim_mean: s / n,
        count: pairs.len(),
    })
}

/// Scores of the hazy inputs themselves.
pub fn hazy_baseline<T: Scalar>(pairs: &[(Tensor<T>, Tensor<T>)]) -> Result<Metrics> {
    mean_metrics(pairs, |h| Ok(h.clone()))
}

pub fn evaluate_networks<T: Scalar>(
    networks: &Networks<T>,
    mode: Mode,
    pairs: &[(Tensor<T>, Tensor<T>)],
    domain: Domain,
) -> Result<Metrics> {
    let d = networks.dehazer(deployed_dehazer(mode, domain));
    mean_metrics(pairs, |h| dehaze_image(h, d))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub mode: String,
    pub psnr_mean: f64,
    pub ssim_mean: f64,
    pub steps: u64,
    pub seed: u64,
}

pub const HAZY_ROW: &str = "HAZY";
pub const TABLE_HEADER: &str = "mode,psnr_mean,ssim_mean,steps,seed";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, mode: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.mode == mode)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{TABLE_HEADER}\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{},{}\n", r.mode, r.psnr_mean, r.ssim_mean, r.steps, r.seed));
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        ensure!(lines.next() == Some(TABLE_HEADER), Config, "table header must be `{TABLE_HEADER}`");
        let rows = lines
            .map(|l| {
                let bad = || Error::Config(format!("malformed table row `{l}`"));
                let f: Vec<&str> = l.split(',').collect();
                ensure!(f.len() == 5, Config, "table row `{l}` must have 5 fields");
                Ok(AblationRow {
                    mode: f[0].to_string(),
                    psnr_mean: f[1].parse().map_err(|_| bad())?,
                    ssim_mean: f[2].parse().map_err(|_| bad())?,
                    steps: f[3].parse().map_err(|_| bad())?,
                    seed: f[4].parse().map_err(|_| bad())?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { rows })
    }

    /// Full-scale reference values in the same format, for context.
    pub fn reference_csv() -> String {
        let mut s = "mode,psnr,ssim\n".to_string();
        for (m, p, q) in REFERENCE_SCORES {
            s.push_str(&format!("{m},{p},{q}\n"));
        }
        s
    }
}

/// Results of an ablation run: the table plus each mode's training log.
#[derive(Clone, Debug)]
pub struct AblationRun<T> {
    pub table: AblationTable,
    pub logs: BTreeMap<Mode, Vec<LogRecord>>,
    pub networks: BTreeMap<Mode, Networks<T>>,
}

/// Trains every mode from the same seed on `train`, evaluates on `val` in
/// `domain`, and appends the hazy-input baseline. Modes run sequentially;
/// with `log_dir` each mode's log goes to `train_<mode>.log` there.
pub fn run_ablation<T: Scalar>(
    train: &Dataset<T>,
    val: &Dataset<T>,
    modes: &[Mode],
    config: &TrainConfig,
    domain: Domain,
    log_dir: Option<&Path>,
) -> Result<AblationRun<T>> {
    ensure!(!modes.is_empty(), Config, "no ablation modes requested");
    let data = TrainingData::prepare(train, config.real_airlight)?;
    let pairs = evaluation_pairs(val, domain)?;
    let mut table = AblationTable::default();
    let mut logs = BTreeMap::new();
    let mut networks = BTreeMap::new();
    for &mode in modes {
        let cfg = TrainConfig { mode, ..config.clone() };
        let mut trainer = Trainer::new(cfg, &data)?;
        if let Some(dir) = log_dir {
            let file = dir.join(format!("train_{}.log", mode.name().replace('+', "_")));
            if file.exists() {
                std::fs::remove_file(&file).map_err(|e| Error::io(&file, e))?;
            }
            trainer.log_to(&file)?;
        }
        trainer.run_schedule()?;
        let m = evaluate_networks(trainer.networks(), mode, &pairs, domain)?;
        log::info!("{mode}: psnr {:.3} ssim {:.4}", m.psnr_mean, m.ssim_mean);
        table.rows.push(AblationRow {
            mode: mode.name().to_string(),
            psnr_mean: m.psnr_mean,
            ssim_mean: m.ssim_mean,
            steps: trainer.phase_steps().iter().sum(),
            seed: config.seed,
        });
        logs.insert(mode, trainer.records().to_vec());
        networks.insert(mode, trainer.networks().clone());
    }
    let base = hazy_baseline(&pairs)?;
    table.rows.push(AblationRow {
        mode: HAZY_ROW.to_string(),
        psnr_mean: base.psnr_mean,
        ssim_mean: base.ssim_mean,
        steps: 0,
        seed: config.seed,
    });
    Ok(AblationRun { table, logs, networks })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(seed: u64, shape: [usize; 4]) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn4(shape, |_, _, _, _| rng.gen())
    }

    #[test]
    fn psnr_closed_forms() {
        let a = random(1, [1, 3, 8, 8]);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        let b = a.map(|v| v + 0.1);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        assert!(matches!(psnr(&a, &random(1, [1, 3, 8, 9])), Err(Error::Dimension(_))));
    }

    #[test]
    fn ssim_constant_images() {
        let zero = Tensor::<f64>::zeros(&[1, 3, 16, 16]);
        let one = Tensor::<f64>::full(&[1, 3, 16, 16], 1.0);
        let want = SSIM_C1 / (1.0 + SSIM_C1);
        assert!((ssim(&zero, &one).unwrap() - want).abs() < 1e-12);
        let a = random(3, [1, 3, 16, 16]);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn routing_follows_mode_and_domain() {
        assert_eq!(deployed_dehazer(Mode::Full, Domain::Real), DehazerId::GR);
        assert_eq!(deployed_dehazer(Mode::Full, Domain::Synthetic), DehazerId::GS);
        assert_eq!(deployed_dehazer(Mode::S2r, Domain::Synthetic), DehazerId::GR);
        assert_eq!(deployed_dehazer(Mode::SynU, Domain::Real), DehazerId::GS);
    }

    #[test]
    fn table_csv_roundtrip() {
        let t = AblationTable {
            rows: vec![AblationRow {
                mode: "SYN+U".into(),
                psnr_mean: 21.5,
                ssim_mean: 0.75,
                steps: 80,
                seed: 3,
            }],
        };
        assert_eq!(AblationTable::from_csv(&t.to_csv()).unwrap(), t);
    }
}
