//! Three-phase schedule: translators, then dehazers with frozen translators,
//! then joint fine-tuning. Also checkpoints and the per-step log.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, Var};
use crate::container::Container;
use crate::datasets::{batches, crop_and_normalize, derive_seed, epoch_order, Dataset, TOML_INT_MAX};
use crate::dehazing::{build_dehazer, Dehazer, DehazerConfig};
use crate::error::{ensure, Error, Result};
use crate::losses::{
    adversarial_discriminator_var, adversarial_generator_var, cycle_consistency_var, dark_channel_var, dc_patch_for,
    identity_var, l1_var, overall_loss, overall_loss_var, supervised_mse_var, to_unit, total_variation_var,
    LossTerm, LossWeights, DC_SHARPNESS,
};
use crate::optim::{adam_step, clip_global_norm, AdamConfig, AdamState};
use crate::params::{Bound, ParamSet};
use crate::physics::{real_image_depth, HazeParams};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::translation::{
    build_discriminator, build_r2s_generator, build_s2r_generator, translate_r2s, translate_s2r, Discriminator,
    DiscriminatorConfig, Generator, GeneratorConfig,
};

/// Which networks and loss terms a run trains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Mode {
    /// Synthetic dehazer on synthetic pairs only.
    #[serde(rename = "SYN")]
    Syn,
    /// Adds unsupervised terms on raw real images.
    #[serde(rename = "SYN+U")]
    SynU,
    /// Adds unsupervised terms on real images translated to the synthetic domain.
    #[serde(rename = "R2S+U")]
    R2sU,
    /// Real-domain dehazer on translated synthetic pairs only.
    #[serde(rename = "S2R")]
    S2r,
    #[serde(rename = "FULL")]
    Full,
}

impl Mode {
    pub const ALL: [Mode; 5] = [Mode::Syn, Mode::SynU, Mode::R2sU, Mode::S2r, Mode::Full];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Syn => "SYN",
            Mode::SynU => "SYN+U",
            Mode::R2sU => "R2S+U",
            Mode::S2r => "S2R",
            Mode::Full => "FULL",
        }
    }

    pub fn phases(self) -> &'static [Phase] {
        match self {
            Mode::Syn | Mode::SynU => &[Phase::Dehazing],
            Mode::R2sU | Mode::S2r => &[Phase::Translation, Phase::Dehazing],
            Mode::Full => &[Phase::Translation, Phase::Dehazing, Phase::Joint],
        }
    }

    /// Loss terms logged in the dehazing phase.
    pub fn dehazing_terms(self) -> &'static [LossTerm] {
        use LossTerm::*;
        match self {
            Mode::Syn => &[SynMse],
            Mode::SynU | Mode::R2sU => &[SynMse, SynTv, SynDark],
            Mode::S2r => &[RealMse],
            Mode::Full => &[RealMse, RealTv, RealDark, SynMse, SynTv, SynDark, Consistency],
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Config(format!("unknown mode `{s}` (expected SYN, SYN+U, R2S+U, S2R or FULL)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Phase {
    Translation = 1,
    Dehazing = 2,
    Joint = 3,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::Translation, Phase::Dehazing, Phase::Joint];

    pub fn number(self) -> u8 {
        self as u8
    }

    pub fn from_number(n: u8) -> Result<Self> {
        Phase::ALL
            .into_iter()
            .find(|p| p.number() == n)
            .ok_or_else(|| Error::Config(format!("phase must be 1, 2 or 3, got {n}")))
    }

    fn index(self) -> usize {
        self as usize - 1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: Mode,
    pub seed: u64,
    pub batch_size: usize,
    /// Crop height and width.
    pub crop: [usize; 2],
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub dehazer: DehazerConfig,
    pub weights: LossWeights,
    /// Optimizer of the translation phase.
    pub translation_opt: AdamConfig,
    /// Optimizer of the dehazing phase, also used for every network in the
    /// joint phase.
    pub dehazer_opt: AdamConfig,
    /// Epochs of phases 1, 2, 3.
    pub epochs: [usize; 3],
    /// When non-zero, the phase runs exactly this many steps instead.
    pub step_limit: [usize; 3],
    pub clip_norm: f64,
    pub dc_sharpness: f64,
    /// Airlight assumed for real images when estimating their pseudo-depth.
    pub real_airlight: [f64; 3],
}

impl TrainConfig {
    /// Small networks for 64×64 images and 16+16 samples.
    pub fn desk() -> Self {
        Self {
            mode: Mode::Full,
            seed: 0,
            batch_size: 2,
            crop: [64, 64],
            generator: GeneratorConfig {
                base_width: 8,
                n_res_blocks: 3,
                io_kernel: 7,
                n_sampling: 2,
                input_skip: true,
            },
            discriminator: DiscriminatorConfig {
                base_width: 8,
                n_stages: 3,
            },
            dehazer: DehazerConfig::default(),
            weights: LossWeights::DEFAULT,
            translation_opt: AdamConfig::new(5e-5, 0.5, 0.999),
            dehazer_opt: AdamConfig::new(1e-4, 0.95, 0.999),
            epochs: [5, 5, 3],
            step_limit: [0; 3],
            clip_norm: 10.0,
            dc_sharpness: DC_SHARPNESS,
            real_airlight: [0.85, 0.8, 0.72],
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.batch_size >= 1, Config, "batch_size must be at least 1");
        ensure!(self.seed <= TOML_INT_MAX, Config, "seed must not exceed {TOML_INT_MAX}");
        ensure!(self.crop[0] >= 8 && self.crop[1] >= 8, Config, "crop must be at least 8x8, got {:?}", self.crop);
        self.generator.validate()?;
        self.discriminator.validate()?;
        self.dehazer.validate()?;
        self.weights.validate()?;
        self.translation_opt.validate()?;
        self.dehazer_opt.validate()?;
        ensure!(self.clip_norm > 0.0, Config, "clip_norm must be positive");
        ensure!(self.dc_sharpness > 0.0, Config, "dc_sharpness must be positive");
        HazeParams::new(self.real_airlight, 0.0)?;
        ensure!(
            self.real_airlight.iter().all(|&a| a > 0.0),
            Config,
            "real_airlight must be positive in every channel"
        );
        Ok(())
    }

    /// Flat `key → value` view; values are TOML literals.
    pub fn to_pairs(&self) -> Result<BTreeMap<String, String>> {
        let value = toml::Value::try_from(self).map_err(|e| Error::Config(format!("config snapshot: {e}")))?;
        let mut out = BTreeMap::new();
        flatten("", &value, &mut out);
        Ok(out)
    }

    pub fn from_pairs(pairs: &BTreeMap<String, String>) -> Result<Self> {
        let mut root = toml::Table::new();
        for (key, raw) in pairs {
            let literal: toml::Table = toml::from_str(&format!("v = {raw}"))
                .map_err(|e| Error::Config(format!("config entry `{key}`: {e}")))?;
            let mut table = &mut root;
            let mut parts: Vec<&str> = key.split('.').collect();
            let leaf = parts.pop().expect("split yields at least one part");
            for part in parts {
                table = table
                    .entry(part)
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                    .as_table_mut()
                    .ok_or_else(|| Error::Config(format!("config key `{key}` conflicts with a value")))?;
            }
            table.insert(leaf.to_string(), literal["v"].clone());
        }
        toml::Value::Table(root)
            .try_into()
            .map_err(|e| Error::Config(format!("config snapshot: {e}")))
    }

    /// Short digest of the flattened config.
    pub fn hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (k, v) in self.to_pairs()? {
            h.update(format!("{k}={v}\n"));
        }
        Ok(h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect())
    }

    fn same_architecture(&self, other: &Self) -> bool {
        self.generator == other.generator && self.discriminator == other.discriminator && self.dehazer == other.dehazer
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

fn flatten(prefix: &str, value: &toml::Value, out: &mut BTreeMap<String, String>) {
    match value {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.to_string());
        }
    }
}

// ---------------------------------------------------------------------------
// Networks

pub const NETWORK_NAMES: [&str; 8] = [
    "g_s2r", "g_r2s", "d_img_r", "d_img_s", "d_feat_r", "d_feat_s", "dehaze_r", "dehaze_s",
];

#[derive(Clone, Debug, PartialEq)]
pub struct Networks<T> {
    pub s2r: Generator<T>,
    pub r2s: Generator<T>,
    pub d_img_r: Discriminator<T>,
    pub d_img_s: Discriminator<T>,
    pub d_feat_r: Discriminator<T>,
    pub d_feat_s: Discriminator<T>,
    pub dehaze_r: Dehazer<T>,
    pub dehaze_s: Dehazer<T>,
}

impl<T: Scalar> Networks<T> {
    pub fn build(config: &TrainConfig) -> Result<Self> {
        let seed = |i: u64| derive_seed(config.seed, &[0x9e7, i]);
        Ok(Self {
            s2r: build_s2r_generator(config.generator, seed(0))?,
            r2s: build_r2s_generator(config.generator, seed(1))?,
            d_img_r: build_discriminator(config.discriminator, seed(2))?,
            d_img_s: build_discriminator(config.discriminator, seed(3))?,
            d_feat_r: build_discriminator(config.discriminator, seed(4))?,
            d_feat_s: build_discriminator(config.discriminator, seed(5))?,
            dehaze_r: build_dehazer(config.dehazer, seed(6))?,
            dehaze_s: build_dehazer(config.dehazer, seed(7))?,
        })
    }

    pub fn params(&self, name: &str) -> Result<&ParamSet<T>> {
        Ok(match name {
            "g_s2r" => &self.s2r.params,
            "g_r2s" => &self.r2s.params,
            "d_img_r" => &self.d_img_r.params,
            "d_img_s" => &self.d_img_s.params,
            "d_feat_r" => &self.d_feat_r.params,
            "d_feat_s" => &self.d_feat_s.params,
            "dehaze_r" => &self.dehaze_r.params,
            "dehaze_s" => &self.dehaze_s.params,
            _ => return Err(Error::Config(format!("unknown network `{name}`"))),
        })
    }

    pub fn params_mut(&mut self, name: &str) -> Result<&mut ParamSet<T>> {
        Ok(match name {
            "g_s2r" => &mut self.s2r.params,
            "g_r2s" => &mut self.r2s.params,
            "d_img_r" => &mut self.d_img_r.params,
            "d_img_s" => &mut self.d_img_s.params,
            "d_feat_r" => &mut self.d_feat_r.params,
            "d_feat_s" => &mut self.d_feat_s.params,
            "dehaze_r" => &mut self.dehaze_r.params,
            "dehaze_s" => &mut self.dehaze_s.params,
            _ => return Err(Error::Config(format!("unknown network `{name}`"))),
        })
    }
}

// ---------------------------------------------------------------------------
// Checkpoints

/// Everything needed to continue training exactly where it stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub config: TrainConfig,
    pub networks: Networks<T>,
    pub optim: BTreeMap<String, AdamState<T>>,
    /// Steps completed in each phase.
    pub phase_steps: [u64; 3],
}

impl<T: Scalar> Checkpoint<T> {
    pub fn global_step(&self) -> u64 {
        self.phase_steps.iter().sum()
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new();
        for (k, v) in self.config.to_pairs()? {
            c.set(format!("config.{k}"), v);
        }
        c.set("config_hash", self.config.hash()?);
        c.set("step", self.global_step());
        c.set(
            "phase_steps",
            self.phase_steps.iter().map(u64::to_string).collect::<Vec<_>>().join(","),
        );
        for name in NETWORK_NAMES {
            c.put_params(&format!("net/{name}"), self.networks.params(name)?);
        }
        for (name, state) in &self.optim {
            c.set(format!("adam.{name}.step"), state.step);
            c.put_params(&format!("adam/{name}/m"), &state.m);
            c.put_params(&format!("adam/{name}/v"), &state.v);
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let pairs: BTreeMap<String, String> = c
            .manifest
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("config.").map(|k| (k.to_string(), v.clone())))
            .collect();
        let config = TrainConfig::from_pairs(&pairs).map_err(|e| Error::Integrity(format!("checkpoint config: {e}")))?;
        let mut networks = Networks::build(&config)?;
        for name in NETWORK_NAMES {
            let stored: ParamSet<T> = c.take_params(&format!("net/{name}"))?;
            let slot = networks.params_mut(name)?;
            slot.check_compatible(&stored)
                .map_err(|e| Error::Integrity(format!("network {name}: {e}")))?;
            *slot = stored;
        }
        let mut optim = BTreeMap::new();
        for name in NETWORK_NAMES {
            let key = format!("adam.{name}.step");
            if c.manifest.contains_key(&key) {
                optim.insert(
                    name.to_string(),
                    AdamState {
                        step: c.parse(&key)?,
                        m: c.take_params(&format!("adam/{name}/m"))?,
                        v: c.take_params(&format!("adam/{name}/v"))?,
                    },
                );
            }
        }
        let raw = c.get("phase_steps")?;
        let steps: Vec<u64> = raw
            .split(',')
            .map(|s| s.parse().map_err(|_| Error::Integrity(format!("phase_steps `{raw}` is malformed"))))
            .collect::<Result<_>>()?;
        ensure!(steps.len() == 3, Integrity, "phase_steps must have 3 entries, got `{raw}`");
        Ok(Self {
            config,
            networks,
            optim,
            phase_steps: [steps[0], steps[1], steps[2]],
        })
    }
}

pub fn save_checkpoint<T: Scalar>(ckpt: &Checkpoint<T>, path: &Path) -> Result<()> {
    ckpt.to_container()?.save(path)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    Checkpoint::from_container(&Container::load(path)?)
}

// ---------------------------------------------------------------------------
// Log records

/// One training step: `step=.. phase=.. mode=.. <terms> total=.. wall=..`.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRecord {
    pub step: u64,
    pub phase: Phase,
    pub mode: Mode,
    pub fields: Vec<(String, f64)>,
    /// Seconds spent on the step.
    pub wall: f64,
}

impl LogRecord {
    pub fn get(&self, key: &str) -> Option<f64> {
        self.fields.iter().find(|(k, _)| k == key).map(|&(_, v)| v)
    }

    /// The line without the wall-clock field, for reproducibility checks.
    pub fn deterministic_line(&self) -> String {
        let mut s = format!("step={} phase={} mode={}", self.step, self.phase.number(), self.mode);
        for (k, v) in &self.fields {
            s.push_str(&format!(" {k}={v}"));
        }
        s
    }

    pub fn parse(line: &str) -> Result<Self> {
        let bad = |what: &str| Error::Config(format!("malformed log line ({what}): {line}"));
        let mut step = None;
        let mut phase = None;
        let mut mode = None;
        let mut wall = None;
        let mut fields = Vec::new();
        for tok in line.split_whitespace() {
            let (k, v) = tok.split_once('=').ok_or_else(|| bad(tok))?;
            match k {
                "step" => step = Some(v.parse().map_err(|_| bad("step"))?),
                "phase" => phase = Some(Phase::from_number(v.parse().map_err(|_| bad("phase"))?)?),
                "mode" => mode = Some(v.parse()?),
                "wall" => wall = Some(v.parse().map_err(|_| bad("wall"))?),
                _ => fields.push((k.to_string(), v.parse().map_err(|_| bad(k))?)),
            }
        }
        Ok(Self {
            step: step.ok_or_else(|| bad("no step"))?,
            phase: phase.ok_or_else(|| bad("no phase"))?,
            mode: mode.ok_or_else(|| bad("no mode"))?,
            fields,
            wall: wall.ok_or_else(|| bad("no wall"))?,
        })
    }
}

impl fmt::Display for LogRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} wall={:.4}", self.deterministic_line(), self.wall)
    }
}

pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines().filter(|l| !l.trim().is_empty()).map(LogRecord::parse).collect()
}

// ---------------------------------------------------------------------------
// Training data

/// A synthetic training sample in `[0,1]`.
#[derive(Clone, Debug)]
pub struct SynItem<T> {
    pub hazy: Tensor<T>,
    pub clear: Tensor<T>,
    pub depth: Tensor<T>,
}

/// A real training sample in `[0,1]` with its pseudo-depth.
#[derive(Clone, Debug)]
pub struct RealItem<T> {
    pub hazy: Tensor<T>,
    pub depth: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct TrainingData<T> {
    pub synthetic: Vec<SynItem<T>>,
    pub real: Vec<RealItem<T>>,
}

impl<T: Scalar> TrainingData<T> {
    /// Computes pseudo-depth of every real image once, under `real_airlight`.
    pub fn prepare(data: &Dataset<T>, real_airlight: [f64; 3]) -> Result<Self> {
        let params = HazeParams::new(real_airlight.map(T::of), T::zero())?;
        let synthetic = data
            .synthetic
            .iter()
            .map(|s| SynItem {
                hazy: s.hazy.clone(),
                clear: s.clear.clone(),
                depth: s.depth.as_tensor().clone(),
            })
            .collect();
        let real = data
            .real
            .iter()
            .map(|r| {
                let (_, _, h, _) = r.hazy.expect_rank4("real image")?;
                Ok(RealItem {
                    hazy: r.hazy.clone(),
                    depth: real_image_depth(&r.hazy, &params, dc_patch_for(h))?.into_tensor(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { synthetic, real })
    }
}

/// A network-space batch.
struct Batch<T> {
    x_s: Tensor<T>,
    y_s: Tensor<T>,
    d_s: Tensor<T>,
    x_r: Option<Tensor<T>>,
    d_r: Option<Tensor<T>>,
}

// ---------------------------------------------------------------------------
// Trainer

type Parts<'g, T> = Vec<(LossTerm, Var<'g, T>)>;

pub struct Trainer<'d, T: Scalar> {
    config: TrainConfig,
    data: &'d TrainingData<T>,
    networks: Networks<T>,
    optim: BTreeMap<String, AdamState<T>>,
    phase_steps: [u64; 3],
    records: Vec<LogRecord>,
    sink: Option<BufWriter<File>>,
}

impl<'d, T: Scalar> Trainer<'d, T> {
    pub fn new(config: TrainConfig, data: &'d TrainingData<T>) -> Result<Self> {
        config.validate()?;
        let networks = Networks::build(&config)?;
        Ok(Self {
            config,
            data,
            networks,
            optim: BTreeMap::new(),
            phase_steps: [0; 3],
            records: Vec::new(),
            sink: None,
        })
    }

    /// Continues from `ckpt`. Returns the trainer and any warnings; a
    /// config whose hash differs from the checkpoint's is reported, while a
    /// different network architecture is an error.
    pub fn resume(config: TrainConfig, data: &'d TrainingData<T>, ckpt: Checkpoint<T>) -> Result<(Self, Vec<String>)> {
        config.validate()?;
        ensure!(
            config.same_architecture(&ckpt.config),
            Config,
            "checkpoint network configuration differs from the requested one"
        );
        let mut warnings = Vec::new();
        let (stored, current) = (ckpt.config.hash()?, config.hash()?);
        if stored != current {
            let msg = format!("config hash {current} differs from checkpoint config hash {stored}");
            log::warn!("{msg}");
            warnings.push(msg);
        }
        Ok((
            Self {
                config,
                data,
                networks: ckpt.networks,
                optim: ckpt.optim,
                phase_steps: ckpt.phase_steps,
                records: Vec::new(),
                sink: None,
            },
            warnings,
        ))
    }

    /// Appends every subsequent log line to `path`.
    pub fn log_to(&mut self, path: &Path) -> Result<()> {
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        self.sink = Some(BufWriter::new(file));
        Ok(())
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn networks(&self) -> &Networks<T> {
        &self.networks
    }

    pub fn records(&self) -> &[LogRecord] {
        &self.records
    }

    pub fn phase_steps(&self) -> [u64; 3] {
        self.phase_steps
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            config: self.config.clone(),
            networks: self.networks.clone(),
            optim: self.optim.clone(),
            phase_steps: self.phase_steps,
        }
    }

    fn steps_per_epoch(&self) -> u64 {
        self.data.synthetic.len().div_ceil(self.config.batch_size).max(1) as u64
    }

    /// Number of steps `phase` runs for under the current mode.
    pub fn phase_length(&self, phase: Phase) -> u64 {
        let i = phase.index();
        if self.config.step_limit[i] > 0 {
            return self.config.step_limit[i] as u64;
        }
        let mut epochs = self.config.epochs[i];
        // Modes without a joint phase spend its epochs on the dehazers, so
        // every mode sees the same number of dehazer updates.
        if phase == Phase::Dehazing && !self.config.mode.phases().contains(&Phase::Joint) {
            epochs += self.config.epochs[Phase::Joint.index()];
        }
        epochs as u64 * self.steps_per_epoch()
    }

    /// Runs `phase` until its length is reached.
    pub fn run_phase(&mut self, phase: Phase) -> Result<()> {
        while self.phase_steps[phase.index()] < self.phase_length(phase) {
            self.step(phase)?;
        }
        self.flush()
    }

    /// Runs up to `n` more steps of `phase`, ignoring its nominal length.
    pub fn run_steps(&mut self, phase: Phase, n: u64) -> Result<()> {
        for _ in 0..n {
            self.step(phase)?;
        }
        self.flush()
    }

    /// Runs every phase of the configured mode.
    pub fn run_schedule(&mut self) -> Result<()> {
        for &phase in self.config.mode.phases() {
            self.run_phase(phase)?;
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        if let Some(s) = self.sink.as_mut() {
            s.flush().map_err(|e| Error::io("training log", e))?;
        }
        Ok(())
    }

    fn check_phase(&self, phase: Phase) -> Result<()> {
        let mode = self.config.mode;
        ensure!(
            mode.phases().contains(&phase),
            Config,
            "mode {mode} does not run phase {}",
            phase.number()
        );
        ensure!(!self.data.synthetic.is_empty(), Config, "training needs synthetic samples");
        let needs_real = phase != Phase::Dehazing || !matches!(mode, Mode::Syn | Mode::S2r);
        ensure!(
            !needs_real || !self.data.real.is_empty(),
            Config,
            "phase {} of mode {mode} needs real samples",
            phase.number()
        );
        Ok(())
    }

    fn batch(&self, phase: Phase, step: u64) -> Result<Batch<T>> {
        let spe = self.steps_per_epoch();
        let (epoch, within) = (step / spe, (step % spe) as usize);
        let seed = derive_seed(self.config.seed, &[phase.number() as u64]);
        let bs = self.config.batch_size;
        let crop = (self.config.crop[0], self.config.crop[1]);
        let syn_order = epoch_order(self.data.synthetic.len(), derive_seed(seed, &[0]), epoch);
        let positions = &batches(&syn_order, bs)?[within];
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        let mut ds = Vec::new();
        for &i in positions {
            let item = &self.data.synthetic[i];
            let s = crop_and_normalize(
                &item.hazy,
                Some(&item.clear),
                Some(&item.depth),
                crop,
                derive_seed(seed, &[1, epoch, i as u64]),
            )?;
            xs.push(s.hazy);
            ys.push(s.clear.expect("clear requested"));
            ds.push(s.depth.expect("depth requested"));
        }
        let (x_r, d_r) = if self.data.real.is_empty() {
            (None, None)
        } else {
            let n_real = self.data.real.len();
            let real_order = epoch_order(n_real, derive_seed(seed, &[2]), epoch);
            let mut xr = Vec::new();
            let mut dr = Vec::new();
            for k in 0..positions.len() {
                let i = real_order[(within * bs + k) % n_real];
                let item = &self.data.real[i];
                let s = crop_and_normalize(
                    &item.hazy,
                    None,
                    Some(&item.depth),
                    crop,
                    derive_seed(seed, &[3, epoch, i as u64]),
                )?;
                xr.push(s.hazy);
                dr.push(s.depth.expect("depth requested"));
            }
            (Some(Tensor::stack(&xr)?), Some(Tensor::stack(&dr)?))
        };
        Ok(Batch {
            x_s: Tensor::stack(&xs)?,
            y_s: Tensor::stack(&ys)?,
            d_s: Tensor::stack(&ds)?,
            x_r,
            d_r,
        })
    }

    /// One optimization step of `phase`; returns its log record.
    pub fn step(&mut self, phase: Phase) -> Result<LogRecord> {
        self.check_phase(phase)?;
        let started = Instant::now();
        let step_in_phase = self.phase_steps[phase.index()];
        let global = self.phase_steps.iter().sum::<u64>();
        if step_in_phase == 0 {
            // Each phase starts with fresh optimizer moments.
            for name in phase_networks(phase, self.config.mode) {
                self.optim.remove(*name);
            }
        }
        let batch = self.batch(phase, step_in_phase)?;
        let fields = match phase {
            Phase::Translation => self.translation_step(&batch, global)?,
            Phase::Dehazing => self.dehazing_step(&batch, global)?,
            Phase::Joint => self.joint_step(&batch, global)?,
        };
        self.phase_steps[phase.index()] += 1;
        let record = LogRecord {
            step: global,
            phase,
            mode: self.config.mode,
            fields,
            wall: started.elapsed().as_secs_f64(),
        };
        if let Some(s) = self.sink.as_mut() {
            writeln!(s, "{record}").map_err(|e| Error::io("training log", e))?;
        }
        self.records.push(record.clone());
        Ok(record)
    }

    /// Clips and applies gradients to one network, then checks the result.
    fn update(&mut self, name: &str, grads: ParamSet<T>, opt: AdamConfig, step: u64) -> Result<()> {
        let mut grads = grads;
        clip_global_norm(&mut grads, self.config.clip_norm).map_err(|_| Error::NonFinite {
            term: format!("gradient of {name}"),
            step,
        })?;
        let params = self.networks.params_mut(name)?;
        let state = self
            .optim
            .entry(name.to_string())
            .or_insert_with(|| AdamState::new(params));
        adam_step(params, &grads, state, &opt)?;
        if !params.all_finite() {
            return Err(Error::NonFinite {
                term: format!("parameters of {name}"),
                step,
            });
        }
        Ok(())
    }

    fn discriminator_step(
        &mut self,
        pairs: &[(&'static str, Tensor<T>, Tensor<T>)],
        opt: AdamConfig,
        step: u64,
    ) -> Result<Vec<(String, f64)>> {
        let g = Graph::new();
        let mut losses = Vec::new();
        let mut bound = Vec::new();
        for (name, real, fake) in pairs {
            let d = self.discriminator(name)?;
            let p = d.params.bind(&g, true);
            let sr = d.forward(&p, g.constant(real.clone()))?;
            let sf = d.forward(&p, g.constant(fake.clone()))?;
            let l = adversarial_discriminator_var(sr, sf)?;
            let v = l.value().data()[0].to_f64_lossy();
            let key = format!("D_{}", &name[2..]);
            if !v.is_finite() {
                return Err(Error::NonFinite { term: key, step });
            }
            losses.push((key, v));
            bound.push((*name, p, l));
        }
        let total = bound.iter().skip(1).try_fold(bound[0].2, |acc, (_, _, l)| acc.add(*l))?;
        let grads = g.backward(total)?;
        let updates: Vec<(&str, ParamSet<T>)> = bound.iter().map(|(n, p, _)| (*n, p.gradients(&grads))).collect();
        drop(bound);
        for (name, gr) in updates {
            self.update(name, gr, opt, step)?;
        }
        Ok(losses)
    }

    fn discriminator(&self, name: &str) -> Result<&Discriminator<T>> {
        Ok(match name {
            "d_img_r" => &self.networks.d_img_r,
            "d_img_s" => &self.networks.d_img_s,
            "d_feat_r" => &self.networks.d_feat_r,
            "d_feat_s" => &self.networks.d_feat_s,
            _ => return Err(Error::Config(format!("unknown discriminator `{name}`"))),
        })
    }

    /// Checks every term, evaluates the weighted total and returns log fields.
    fn report<'g>(&self, parts: &Parts<'g, T>, step: u64) -> Result<(Var<'g, T>, Vec<(String, f64)>)> {
        let mut values = Vec::with_capacity(parts.len());
        for (term, v) in parts {
            let x = v.value().data()[0].to_f64_lossy();
            if !x.is_finite() {
                return Err(Error::NonFinite {
                    term: term.key().to_string(),
                    step,
                });
            }
            values.push((*term, x));
        }
        let total = overall_loss_var(parts, &self.config.weights)?;
        let report = overall_loss(&values, &self.config.weights);
        let graph_total = total.value().data()[0].to_f64_lossy();
        if !graph_total.is_finite() {
            return Err(Error::NonFinite {
                term: "total".into(),
                step,
            });
        }
        ensure!(
            (graph_total - report.total).abs() <= 1e-4 * report.total.abs().max(1.0),
            Integrity,
            "step {step}: differentiable total {graph_total} disagrees with itemized total {}",
            report.total
        );
        Ok((total, report.fields()))
    }

    fn translation_step(&mut self, b: &Batch<T>, step: u64) -> Result<Vec<(String, f64)>> {
        let cfg = self.config.clone();
        let (x_r, d_r) = (b.x_r.as_ref().expect("checked"), b.d_r.as_ref().expect("checked"));
        let g = Graph::new();
        let ps2r = self.networks.s2r.params.bind(&g, true);
        let pr2s = self.networks.r2s.params.bind(&g, true);
        let xs = g.constant(b.x_s.clone());
        let xr = g.constant(x_r.clone());
        let (s2r, r2s) = (&self.networks.s2r, &self.networks.r2s);
        let x_sr = s2r.forward(&ps2r, xs, Some(&b.d_s))?;
        let x_rs = r2s.forward(&pr2s, xr, None)?;

        let mut fields = self.discriminator_step(
            &[
                ("d_img_r", x_r.clone(), (*x_sr.value()).clone()),
                ("d_img_s", b.x_s.clone(), (*x_rs.value()).clone()),
            ],
            cfg.translation_opt,
            step,
        )?;

        let (s2r, r2s) = (&self.networks.s2r, &self.networks.r2s);
        let rec_s = r2s.forward(&pr2s, x_sr, None)?;
        let rec_r = s2r.forward(&ps2r, x_rs, Some(d_r))?;
        let idt_s = r2s.forward(&pr2s, xs, None)?;
        let idt_r = s2r.forward(&ps2r, xr, Some(d_r))?;
        let adv_r = adv_generator(&g, &self.networks.d_img_r, x_sr)?;
        let adv_s = adv_generator(&g, &self.networks.d_img_s, x_rs)?;
        let parts: Parts<T> = vec![
            (LossTerm::AdvImgReal, adv_r),
            (LossTerm::AdvImgSyn, adv_s),
            (LossTerm::Cycle, cycle_consistency_var(xs, rec_s, xr, rec_r)?),
            (LossTerm::Identity, identity_var(xs, idt_s, xr, idt_r)?),
        ];
        let (total, report) = self.report(&parts, step)?;
        fields.extend(report);
        let grads = g.backward(total)?;
        let (gs2r, gr2s) = (ps2r.gradients(&grads), pr2s.gradients(&grads));
        drop(parts);
        self.update("g_s2r", gs2r, cfg.translation_opt, step)?;
        self.update("g_r2s", gr2s, cfg.translation_opt, step)?;
        Ok(fields)
    }

    fn dehazing_step(&mut self, b: &Batch<T>, step: u64) -> Result<Vec<(String, f64)>> {
        let cfg = self.config.clone();
        let mode = cfg.mode;
        let g = Graph::new();
        let pr = self.networks.dehaze_r.params.bind(&g, true);
        let ps = self.networks.dehaze_s.params.bind(&g, true);
        let patch = dc_patch_for(cfg.crop[0]);
        let k = T::of(cfg.dc_sharpness);
        let xs = g.constant(b.x_s.clone());
        let ys = g.constant(b.y_s.clone());
        let frozen_s2r = || -> Result<Var<'_, T>> {
            let d = crate::physics::DepthMap::new(b.d_s.clone())?;
            Ok(g.constant(translate_s2r(&b.x_s, &d, &self.networks.s2r)?))
        };
        let frozen_r2s = || -> Result<Var<'_, T>> {
            Ok(g.constant(translate_r2s(b.x_r.as_ref().expect("checked"), &self.networks.r2s)?))
        };
        let real = || g.constant(b.x_r.clone().expect("checked"));
        let dr = |x| self.networks.dehaze_r.forward(&pr, x).map(|o| o.clear);
        let ds = |x| self.networks.dehaze_s.forward(&ps, x).map(|o| o.clear);

        let mut parts: Parts<T> = Vec::new();
        let (update_r, update_s) = match mode {
            Mode::Syn => {
                parts.push((LossTerm::SynMse, supervised_mse_var(ds(xs)?, ys)?));
                (false, true)
            }
            Mode::SynU | Mode::R2sU => {
                parts.push((LossTerm::SynMse, supervised_mse_var(ds(xs)?, ys)?));
                let input = if mode == Mode::SynU { real() } else { frozen_r2s()? };
                push_unsupervised(&mut parts, [LossTerm::SynTv, LossTerm::SynDark], ds(input)?, patch, k)?;
                (false, true)
            }
            Mode::S2r => {
                parts.push((LossTerm::RealMse, supervised_mse_var(dr(frozen_s2r()?)?, ys)?));
                (true, false)
            }
            Mode::Full => {
                let j_r = dr(real())?;
                let j_rs = ds(frozen_r2s()?)?;
                parts.push((LossTerm::RealMse, supervised_mse_var(dr(frozen_s2r()?)?, ys)?));
                push_unsupervised(&mut parts, [LossTerm::RealTv, LossTerm::RealDark], j_r, patch, k)?;
                parts.push((LossTerm::SynMse, supervised_mse_var(ds(xs)?, ys)?));
                push_unsupervised(&mut parts, [LossTerm::SynTv, LossTerm::SynDark], j_rs, patch, k)?;
                parts.push((LossTerm::Consistency, l1_var(j_r, j_rs)?));
                (true, true)
            }
        };
        let (total, fields) = self.report(&parts, step)?;
        let grads = g.backward(total)?;
        let (gr, gs) = (pr.gradients(&grads), ps.gradients(&grads));
        drop(parts);
        if update_r {
            self.update("dehaze_r", gr, cfg.dehazer_opt, step)?;
        }
        if update_s {
            self.update("dehaze_s", gs, cfg.dehazer_opt, step)?;
        }
        Ok(fields)
    }

    fn joint_step(&mut self, b: &Batch<T>, step: u64) -> Result<Vec<(String, f64)>> {
        let cfg = self.config.clone();
        let opt = cfg.dehazer_opt;
        let (x_r, d_r) = (b.x_r.as_ref().expect("checked"), b.d_r.as_ref().expect("checked"));
        let patch = dc_patch_for(cfg.crop[0]);
        let k = T::of(cfg.dc_sharpness);
        let g = Graph::new();
        let ps2r = self.networks.s2r.params.bind(&g, true);
        let pr2s = self.networks.r2s.params.bind(&g, true);
        let pr = self.networks.dehaze_r.params.bind(&g, true);
        let ps = self.networks.dehaze_s.params.bind(&g, true);
        let xs = g.constant(b.x_s.clone());
        let ys = g.constant(b.y_s.clone());
        let xr = g.constant(x_r.clone());
        let nets = &self.networks;
        let x_sr = nets.s2r.forward(&ps2r, xs, Some(&b.d_s))?;
        let x_rs = nets.r2s.forward(&pr2s, xr, None)?;
        let j_sr = nets.dehaze_r.forward(&pr, x_sr)?.clear;
        let j_r = nets.dehaze_r.forward(&pr, xr)?.clear;
        let j_s = nets.dehaze_s.forward(&ps, xs)?.clear;
        let j_rs = nets.dehaze_s.forward(&ps, x_rs)?.clear;
        let val = |v: Var<'_, T>| (*v.value()).clone();

        let mut fields = self.discriminator_step(
            &[
                ("d_img_r", x_r.clone(), val(x_sr)),
                ("d_img_s", b.x_s.clone(), val(x_rs)),
                ("d_feat_r", val(j_r), val(j_sr)),
                ("d_feat_s", val(j_s), val(j_rs)),
            ],
            opt,
            step,
        )?;

        let nets = &self.networks;
        let rec_s = nets.r2s.forward(&pr2s, x_sr, None)?;
        let rec_r = nets.s2r.forward(&ps2r, x_rs, Some(d_r))?;
        let idt_s = nets.r2s.forward(&pr2s, xs, None)?;
        let idt_r = nets.s2r.forward(&ps2r, xr, Some(d_r))?;
        let unit_r = to_unit(j_r);
        let unit_rs = to_unit(j_rs);
        let parts: Parts<T> = vec![
            (LossTerm::AdvImgReal, adv_generator(&g, &nets.d_img_r, x_sr)?),
            (LossTerm::AdvFeatReal, adv_generator(&g, &nets.d_feat_r, j_sr)?),
            (LossTerm::AdvImgSyn, adv_generator(&g, &nets.d_img_s, x_rs)?),
            (LossTerm::AdvFeatSyn, adv_generator(&g, &nets.d_feat_s, j_rs)?),
            (LossTerm::Cycle, cycle_consistency_var(xs, rec_s, xr, rec_r)?),
            (LossTerm::Identity, identity_var(xs, idt_s, xr, idt_r)?),
            (LossTerm::RealMse, supervised_mse_var(j_sr, ys)?),
            (LossTerm::SynMse, supervised_mse_var(j_s, ys)?),
            (LossTerm::RealDark, dark_channel_var(unit_r, patch, k)?),
            (LossTerm::SynDark, dark_channel_var(unit_rs, patch, k)?),
            (LossTerm::RealTv, total_variation_var(unit_r)?),
            (LossTerm::SynTv, total_variation_var(unit_rs)?),
            (LossTerm::Consistency, l1_var(j_r, j_rs)?),
        ];
        let (total, report) = self.report(&parts, step)?;
        fields.extend(report);
        let grads = g.backward(total)?;
        let updates = [
            ("g_s2r", ps2r.gradients(&grads)),
            ("g_r2s", pr2s.gradients(&grads)),
            ("dehaze_r", pr.gradients(&grads)),
            ("dehaze_s", ps.gradients(&grads)),
        ];
        drop(parts);
        for (name, gr) in updates {
            self.update(name, gr, opt, step)?;
        }
        Ok(fields)
    }
}

/// TV and dark-channel terms of a dehazed network-space output.
fn push_unsupervised<'g, T: Scalar>(
    parts: &mut Parts<'g, T>,
    [tv, dark]: [LossTerm; 2],
    dehazed: Var<'g, T>,
    patch: usize,
    sharpness: T,
) -> Result<()> {
    let unit = to_unit(dehazed);
    parts.push((tv, total_variation_var(unit)?));
    parts.push((dark, dark_channel_var(unit, patch, sharpness)?));
    Ok(())
}

/// Generator side of the adversarial loss against a fixed discriminator.
fn adv_generator<'g, T: Scalar>(g: &'g Graph<T>, d: &Discriminator<T>, fake: Var<'g, T>) -> Result<Var<'g, T>> {
    let p: Bound<'g, T> = d.params.bind(g, false);
    Ok(adversarial_generator_var(d.forward(&p, fake)?))
}

/// Networks whose parameters `phase` updates under `mode`.
pub fn phase_networks(phase: Phase, mode: Mode) -> &'static [&'static str] {
    match (phase, mode) {
        (Phase::Translation, _) => &["d_img_r", "d_img_s", "g_s2r", "g_r2s"],
        (Phase::Dehazing, Mode::Full) => &["dehaze_r", "dehaze_s"],
        (Phase::Dehazing, Mode::S2r) => &["dehaze_r"],
        (Phase::Dehazing, _) => &["dehaze_s"],
        (Phase::Joint, _) => &NETWORK_NAMES,
    }
}

/// Checks that every dehazing-phase record of `mode` logs exactly the
/// mode's terms, and that joint-phase records log every term.
pub fn verify_mode_contract(mode: Mode, records: &[LogRecord]) -> Result<()> {
    for r in records {
        let logged: Vec<&str> = r
            .fields
            .iter()
            .map(|(k, _)| k.as_str())
            .filter(|k| LossTerm::from_key(k).is_some())
            .collect();
        let mut want: Vec<&str> = match r.phase {
            Phase::Translation => vec!["L_gan_img_r", "L_gan_img_s", "L_cyc", "L_idt"],
            Phase::Dehazing => mode.dehazing_terms().iter().map(|t| t.key()).collect(),
            Phase::Joint => LossTerm::ALL.iter().map(|t| t.key()).collect(),
        };
        let mut got = logged.clone();
        got.sort_unstable();
        want.sort_unstable();
        ensure!(
            got == want,
            Integrity,
            "step {} of mode {mode} logged {logged:?}, expected {want:?}",
            r.step
        );
        ensure!(
            mode.phases().contains(&r.phase),
            Integrity,
            "mode {mode} logged a phase {} step",
            r.phase.number()
        );
    }
    Ok(())
}

/// Trains the translators from scratch.
pub fn train_translation<T: Scalar>(data: &TrainingData<T>, config: &TrainConfig) -> Result<Checkpoint<T>> {
    let mut t = Trainer::new(config.clone(), data)?;
    t.run_phase(Phase::Translation)?;
    Ok(t.checkpoint())
}

/// Trains the dehazers with the translators of `translation` frozen.
pub fn train_dehazers<T: Scalar>(
    data: &TrainingData<T>,
    translation: &Checkpoint<T>,
    config: &TrainConfig,
) -> Result<Checkpoint<T>> {
    let (mut t, _) = Trainer::resume(config.clone(), data, translation.clone())?;
    t.run_phase(Phase::Dehazing)?;
    Ok(t.checkpoint())
}

/// Fine-tunes every network jointly from a checkpoint holding both
/// pre-trained translators and dehazers.
pub fn finetune_joint<T: Scalar>(data: &TrainingData<T>, prior: &Checkpoint<T>, config: &TrainConfig) -> Result<Checkpoint<T>> {
    ensure!(
        prior.phase_steps[0] > 0 && prior.phase_steps[1] > 0,
        Config,
        "joint fine-tuning needs pre-trained translators and dehazers"
    );
    let (mut t, _) = Trainer::resume(config.clone(), data, prior.clone())?;
    t.run_phase(Phase::Joint)?;
    Ok(t.checkpoint())
}
