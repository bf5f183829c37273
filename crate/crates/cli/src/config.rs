//! Flat run configuration. Every key has a default; a config file and
//! `--set key=value` flags override them in that order.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use hazebridge::datasets::ProceduralConfig;
use hazebridge::dehazing::DehazerConfig;
use hazebridge::evaluation::Domain;
use hazebridge::losses::LossWeights;
use hazebridge::optim::AdamConfig;
use hazebridge::training::{Mode, Phase, TrainConfig};
use hazebridge::translation::{DiscriminatorConfig, GeneratorConfig};
use serde::{Deserialize, Serialize};

pub const EFFECTIVE_CONFIG: &str = "effective_config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Training dataset root.
    pub data_dir: PathBuf,
    /// Held-out validation dataset root.
    pub val_dir: PathBuf,
    pub out_dir: PathBuf,

    pub height: usize,
    pub width: usize,
    pub n_synthetic: usize,
    pub n_real: usize,
    pub val_seed: u64,
    pub n_val_synthetic: usize,
    pub n_val_real: usize,

    pub crop_height: usize,
    pub crop_width: usize,
    pub batch_size: usize,
    pub gen_width: usize,
    pub gen_res_blocks: usize,
    pub gen_io_kernel: usize,
    pub gen_input_skip: bool,
    pub disc_width: usize,
    pub disc_stages: usize,
    pub dehazer_width: usize,
    pub dehazer_stages: usize,

    pub epochs_translation: usize,
    pub epochs_dehazing: usize,
    pub epochs_joint: usize,
    /// Non-zero values replace the epoch count of the phase with a step count.
    pub steps_translation: usize,
    pub steps_dehazing: usize,
    pub steps_joint: usize,
    pub lr_translation: f64,
    pub beta1_translation: f64,
    pub beta2_translation: f64,
    pub lr_dehazing: f64,
    pub beta1_dehazing: f64,
    pub beta2_dehazing: f64,
    pub clip_norm: f64,

    pub lambda_tran: f64,
    pub lambda_m: f64,
    pub lambda_d: f64,
    pub lambda_t: f64,
    pub lambda_c: f64,
    pub lambda_cycle: f64,
    pub lambda_identity: f64,
    pub dc_sharpness: f64,
    pub real_airlight: [f64; 3],

    /// Mode trained by `train`.
    pub mode: String,
    /// Comma-separated phases run by `train`.
    pub phases: String,
    /// Comma-separated modes run by `ablate`.
    pub modes: String,
    /// `synthetic`, `real` or `both`.
    pub eval_domain: String,
    /// Domain of the ablation validation images.
    pub ablation_domain: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::desk();
        Self {
            seed: 0,
            data_dir: "data/train".into(),
            val_dir: "data/val".into(),
            out_dir: "runs/default".into(),
            height: 64,
            width: 64,
            n_synthetic: 16,
            n_real: 16,
            val_seed: 1000,
            n_val_synthetic: 8,
            n_val_real: 8,
            crop_height: t.crop[0],
            crop_width: t.crop[1],
            batch_size: t.batch_size,
            gen_width: t.generator.base_width,
            gen_res_blocks: t.generator.n_res_blocks,
            gen_io_kernel: t.generator.io_kernel,
            gen_input_skip: t.generator.input_skip,
            disc_width: t.discriminator.base_width,
            disc_stages: t.discriminator.n_stages,
            dehazer_width: t.dehazer.base_width,
            dehazer_stages: t.dehazer.n_stages,
            epochs_translation: t.epochs[0],
            epochs_dehazing: t.epochs[1],
            epochs_joint: t.epochs[2],
            steps_translation: 0,
            steps_dehazing: 0,
            steps_joint: 0,
            lr_translation: t.translation_opt.lr,
            beta1_translation: t.translation_opt.beta1,
            beta2_translation: t.translation_opt.beta2,
            lr_dehazing: t.dehazer_opt.lr,
            beta1_dehazing: t.dehazer_opt.beta1,
            beta2_dehazing: t.dehazer_opt.beta2,
            clip_norm: t.clip_norm,
            lambda_tran: t.weights.tran,
            lambda_m: t.weights.mse,
            lambda_d: t.weights.dark,
            lambda_t: t.weights.tv,
            lambda_c: t.weights.consistency,
            lambda_cycle: t.weights.cycle,
            lambda_identity: t.weights.identity,
            dc_sharpness: t.dc_sharpness,
            real_airlight: t.real_airlight,
            mode: "FULL".into(),
            phases: "1,2,3".into(),
            modes: "SYN,SYN+U,R2S+U,S2R,FULL".into(),
            eval_domain: "both".into(),
            ablation_domain: "synthetic".into(),
        }
    }
}

/// Parses an override as a TOML literal, except that keys whose default is
/// a string (or path) always take the raw text, minus optional quotes.
fn literal(raw: &str, string_key: bool) -> toml::Value {
    if string_key {
        let unquoted = raw.strip_prefix('"').and_then(|r| r.strip_suffix('"')).unwrap_or(raw);
        return toml::Value::String(unquoted.to_string());
    }
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl RunConfig {
    /// Defaults, then the file (if any), then `key=value` overrides.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> anyhow::Result<Self> {
        let mut table = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
                toml::from_str::<toml::Table>(&text).with_context(|| format!("parsing config {}", path.display()))?
            }
            None => toml::Table::new(),
        };
        let defaults = toml::Table::try_from(RunConfig::default())?;
        for (k, v) in overrides {
            let string_key = matches!(defaults.get(k), Some(toml::Value::String(_)));
            table.insert(k.clone(), literal(v, string_key));
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| hazebridge::Error::Config(e.message().to_string()))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Writes the resolved configuration into the output directory.
    pub fn echo(&self) -> anyhow::Result<()> {
        std::fs::create_dir_all(&self.out_dir).with_context(|| format!("creating {}", self.out_dir.display()))?;
        let path = self.out_dir.join(EFFECTIVE_CONFIG);
        std::fs::write(&path, self.to_toml()?).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }

    pub fn procedural(&self) -> ProceduralConfig {
        ProceduralConfig {
            seed: self.seed,
            n_synthetic: self.n_synthetic,
            n_real: self.n_real,
            size: (self.height, self.width),
        }
    }

    pub fn procedural_val(&self) -> ProceduralConfig {
        ProceduralConfig {
            seed: self.val_seed,
            n_synthetic: self.n_val_synthetic,
            n_real: self.n_val_real,
            size: (self.height, self.width),
        }
    }

    pub fn mode(&self) -> anyhow::Result<Mode> {
        Ok(self.mode.parse()?)
    }

    pub fn train_config(&self) -> anyhow::Result<TrainConfig> {
        let cfg = TrainConfig {
            mode: self.mode()?,
            seed: self.seed,
            batch_size: self.batch_size,
            crop: [self.crop_height, self.crop_width],
            generator: GeneratorConfig {
                base_width: self.gen_width,
                n_res_blocks: self.gen_res_blocks,
                io_kernel: self.gen_io_kernel,
                n_sampling: 2,
                input_skip: self.gen_input_skip,
            },
            discriminator: DiscriminatorConfig {
                base_width: self.disc_width,
                n_stages: self.disc_stages,
            },
            dehazer: DehazerConfig {
                base_width: self.dehazer_width,
                n_stages: self.dehazer_stages,
            },
            weights: LossWeights {
                tran: self.lambda_tran,
                mse: self.lambda_m,
                dark: self.lambda_d,
                tv: self.lambda_t,
                consistency: self.lambda_c,
                cycle: self.lambda_cycle,
                identity: self.lambda_identity,
            },
            translation_opt: AdamConfig::new(self.lr_translation, self.beta1_translation, self.beta2_translation),
            dehazer_opt: AdamConfig::new(self.lr_dehazing, self.beta1_dehazing, self.beta2_dehazing),
            epochs: [self.epochs_translation, self.epochs_dehazing, self.epochs_joint],
            step_limit: [self.steps_translation, self.steps_dehazing, self.steps_joint],
            clip_norm: self.clip_norm,
            dc_sharpness: self.dc_sharpness,
            real_airlight: self.real_airlight,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn phases(&self) -> anyhow::Result<Vec<Phase>> {
        let phases = self
            .phases
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| {
                let n: u8 = s.trim().parse().map_err(|_| hazebridge::Error::Config(format!("bad phase `{s}`")))?;
                Ok(Phase::from_number(n)?)
            })
            .collect::<anyhow::Result<Vec<_>>>()?;
        if phases.is_empty() || phases.windows(2).any(|w| w[0] >= w[1]) {
            bail!(hazebridge::Error::Config(format!(
                "phases must be a non-empty increasing list, got `{}`",
                self.phases
            )));
        }
        Ok(phases)
    }

    pub fn modes(&self) -> anyhow::Result<Vec<Mode>> {
        let modes = self
            .modes
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| s.parse::<Mode>())
            .collect::<Result<Vec<_>, _>>()?;
        if modes.is_empty() {
            bail!(hazebridge::Error::Config("no modes requested".into()));
        }
        Ok(modes)
    }

    pub fn eval_domains(&self) -> anyhow::Result<Vec<Domain>> {
        if self.eval_domain.trim().eq_ignore_ascii_case("both") {
            return Ok(vec![Domain::Synthetic, Domain::Real]);
        }
        Ok(vec![self.eval_domain.parse()?])
    }

    pub fn ablation_domain(&self) -> anyhow::Result<Domain> {
        Ok(self.ablation_domain.parse()?)
    }
}
