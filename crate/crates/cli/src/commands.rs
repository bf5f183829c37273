use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use hazebridge::datasets::{
    generate_procedural, load_dataset, load_rgb, realize, save_rgb, write_dataset, DatasetHandle, DatasetManifest,
};
use hazebridge::evaluation::{
    dehaze_image, deployed_dehazer, psnr, run_ablation, ssim, AblationTable, DehazerId, Domain,
};
use hazebridge::training::{
    load_checkpoint, save_checkpoint, verify_mode_contract, Checkpoint, Phase, Trainer, TrainingData,
};
use hazebridge::{Error, Tensor32};
use log::{info, warn};

use crate::config::RunConfig;

pub const FINAL_CHECKPOINT: &str = "checkpoint.ckpt";
pub const EVAL_FILE: &str = "eval.csv";
pub const EVAL_HEADER: &str = "domain,stem,network,psnr_hazy,ssim_hazy,psnr,ssim";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const REFERENCE_FILE: &str = "ablation_reference.csv";

pub fn phase_checkpoint(out: &Path, phase: Phase) -> PathBuf {
    out.join(format!("phase{}.ckpt", phase.number()))
}

pub fn phase_log(out: &Path, phase: Phase) -> PathBuf {
    out.join(format!("phase{}.log", phase.number()))
}

/// Writes the training and validation sets, or regenerates one set from a
/// manifest into `dest`.
pub fn synth(cfg: &RunConfig, manifest: Option<&Path>, dest: Option<&Path>) -> anyhow::Result<()> {
    if let Some(path) = manifest {
        let m = DatasetManifest::load(path)?;
        let dest = dest.unwrap_or(&cfg.data_dir);
        let data = realize::<f32>(&m)?;
        write_dataset(dest, &data, Some(&m))?;
        info!("regenerated {} samples into {}", data.len(), dest.display());
        return Ok(());
    }
    if dest.is_some() {
        bail!(Error::Config("--dest requires --manifest".into()));
    }
    for (root, pc) in [(&cfg.data_dir, cfg.procedural()), (&cfg.val_dir, cfg.procedural_val())] {
        let (data, m) = generate_procedural::<f32>(&pc)?;
        write_dataset(root, &data, Some(&m))?;
        info!(
            "wrote {} synthetic and {} real samples to {}",
            data.synthetic.len(),
            data.real.len(),
            root.display()
        );
    }
    Ok(())
}

/// Runs the configured phases, writing a checkpoint and a log per phase.
pub fn train(cfg: &RunConfig, resume: Option<&Path>) -> anyhow::Result<Checkpoint<f32>> {
    let tc = cfg.train_config()?;
    let phases: Vec<Phase> = cfg.phases()?.into_iter().filter(|p| tc.mode.phases().contains(p)).collect();
    if phases.is_empty() {
        bail!(Error::Config(format!("mode {} runs none of phases {}", tc.mode, cfg.phases)));
    }
    let dataset = load_dataset(&cfg.data_dir)?.load_all::<f32>()?;
    let data = TrainingData::prepare(&dataset, tc.real_airlight)?;
    let mut trainer = match resume {
        Some(path) => {
            let ckpt = load_checkpoint::<f32>(path)?;
            info!("resuming from {} at step {}", path.display(), ckpt.global_step());
            let (t, warnings) = Trainer::resume(tc.clone(), &data, ckpt)?;
            for w in warnings {
                warn!("{w}");
            }
            t
        }
        None => Trainer::new(tc.clone(), &data)?,
    };
    for phase in phases {
        let log = phase_log(&cfg.out_dir, phase);
        if resume.is_none() && log.exists() {
            std::fs::remove_file(&log).with_context(|| format!("removing stale {}", log.display()))?;
        }
        trainer.log_to(&log)?;
        info!("phase {}: {} steps", phase.number(), trainer.phase_length(phase));
        trainer.run_phase(phase)?;
        save_checkpoint(&trainer.checkpoint(), &phase_checkpoint(&cfg.out_dir, phase))?;
    }
    verify_mode_contract(tc.mode, trainer.records())?;
    let ckpt = trainer.checkpoint();
    save_checkpoint(&ckpt, &cfg.out_dir.join(FINAL_CHECKPOINT))?;
    Ok(ckpt)
}

struct EvalItem {
    domain: Domain,
    stem: String,
    hazy: Tensor32,
    clear: Tensor32,
}

fn eval_items(handle: &DatasetHandle, domain: Domain) -> anyhow::Result<Vec<EvalItem>> {
    let mut items = Vec::new();
    match domain {
        Domain::Synthetic => {
            for (i, f) in handle.synthetic.iter().enumerate() {
                let s = handle.load_synthetic::<f32>(i)?;
                items.push(EvalItem {
                    domain,
                    stem: f.stem.clone(),
                    hazy: s.hazy,
                    clear: s.clear,
                });
            }
        }
        Domain::Real => {
            for (i, f) in handle.real.iter().enumerate() {
                let r = handle.load_real::<f32>(i)?;
                if let Some(clear) = r.clear {
                    items.push(EvalItem {
                        domain,
                        stem: f.stem.clone(),
                        hazy: r.hazy,
                        clear,
                    });
                }
            }
        }
    }
    if items.is_empty() {
        bail!(Error::Config(format!(
            "{} has no {domain} samples with ground truth",
            handle.root.display()
        )));
    }
    Ok(items)
}

/// Per-sample and mean scores of one domain.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainScores {
    pub domain: Domain,
    /// `G_R`/`G_S`, or `FILES` when scoring images from disk.
    pub network: String,
    pub count: usize,
    pub psnr_hazy: f64,
    pub ssim_hazy: f64,
    pub psnr: f64,
    pub ssim: f64,
}

/// What `eval` scores: a checkpoint's dehazers, or images already on disk
/// laid out as `<dir>/<domain>/<stem>.png`.
#[derive(Clone, Debug)]
pub enum EvalSource {
    Checkpoint(PathBuf),
    Files(PathBuf),
}

/// Network column of rows scored from files.
pub const FILES_COLUMN: &str = "FILES";

/// Scores the source on the validation set and writes `eval.csv`.
pub fn eval(cfg: &RunConfig, source: &EvalSource, predictions: Option<&Path>) -> anyhow::Result<Vec<DomainScores>> {
    let ckpt = match source {
        EvalSource::Checkpoint(path) => Some(load_checkpoint::<f32>(path)?),
        EvalSource::Files(_) => None,
    };
    let handle = load_dataset(&cfg.val_dir)?;
    let mut csv = format!("{EVAL_HEADER}\n");
    let mut scores = Vec::new();
    for domain in cfg.eval_domains()? {
        let network = match &ckpt {
            Some(c) => deployed_dehazer(c.config.mode, domain).to_string(),
            None => FILES_COLUMN.to_string(),
        };
        let items = eval_items(&handle, domain)?;
        let mut sums = [0.0f64; 4];
        for it in &items {
            let out = match (&ckpt, source) {
                (Some(c), _) => dehaze_image(&it.hazy, c.networks.dehazer(deployed_dehazer(c.config.mode, domain)))?,
                (None, EvalSource::Files(dir)) => {
                    let out = load_rgb::<f32>(&dir.join(domain.to_string()).join(format!("{}.png", it.stem)))?;
                    if out.shape() != it.clear.shape() {
                        bail!(Error::Dimension(format!(
                            "prediction {} is {:?}, ground truth is {:?}",
                            it.stem,
                            out.shape(),
                            it.clear.shape()
                        )));
                    }
                    out
                }
                (None, EvalSource::Checkpoint(_)) => unreachable!("checkpoint loaded above"),
            };
            let row = [
                psnr(&it.hazy, &it.clear)?,
                ssim(&it.hazy, &it.clear)?,
                psnr(&out, &it.clear)?,
                ssim(&out, &it.clear)?,
            ];
            for (s, v) in sums.iter_mut().zip(row) {
                *s += v;
            }
            writeln!(csv, "{},{},{network},{},{},{},{}", it.domain, it.stem, row[0], row[1], row[2], row[3])?;
            if let Some(dir) = predictions {
                let dir = dir.join(domain.to_string());
                std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
                save_rgb(&dir.join(format!("{}.png", it.stem)), &out)?;
            }
        }
        let n = items.len() as f64;
        let s = DomainScores {
            domain,
            network: network.clone(),
            count: items.len(),
            psnr_hazy: sums[0] / n,
            ssim_hazy: sums[1] / n,
            psnr: sums[2] / n,
            ssim: sums[3] / n,
        };
        writeln!(csv, "{domain},MEAN,{network},{},{},{},{}", s.psnr_hazy, s.ssim_hazy, s.psnr, s.ssim)?;
        info!(
            "{domain} ({} images, {network}): psnr {:.3} -> {:.3}, ssim {:.4} -> {:.4}",
            s.count, s.psnr_hazy, s.psnr, s.ssim_hazy, s.ssim
        );
        scores.push(s);
    }
    std::fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    let path = cfg.out_dir.join(EVAL_FILE);
    std::fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?;
    Ok(scores)
}

fn png_inputs(input: &Path) -> anyhow::Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    if !input.is_dir() {
        bail!(Error::Config(format!("input {} does not exist", input.display())));
    }
    let mut files = Vec::new();
    for entry in std::fs::read_dir(input).with_context(|| format!("listing {}", input.display()))? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Dehazes one PNG, or every PNG of a directory into `output`.
pub fn dehaze(checkpoint: &Path, input: &Path, output: &Path, domain: Domain) -> anyhow::Result<DehazerId> {
    let ckpt = load_checkpoint::<f32>(checkpoint)?;
    let id = deployed_dehazer(ckpt.config.mode, domain);
    let net = ckpt.networks.dehazer(id);
    let files = png_inputs(input)?;
    let single = input.is_file();
    if !single {
        std::fs::create_dir_all(output).with_context(|| format!("creating {}", output.display()))?;
    }
    for f in &files {
        let hazy = load_rgb::<f32>(f)?;
        let out = dehaze_image(&hazy, net)?;
        let dest = if single {
            output.to_path_buf()
        } else {
            output.join(f.file_name().expect("listed file has a name"))
        };
        save_rgb(&dest, &out)?;
    }
    info!("dehazed {} image(s) with {id}", files.len());
    Ok(id)
}

/// Trains and scores every requested mode; writes the table, the
/// reference values and one log per mode.
pub fn ablate(cfg: &RunConfig) -> anyhow::Result<AblationTable> {
    let tc = cfg.train_config()?;
    let modes = cfg.modes()?;
    let train = load_dataset(&cfg.data_dir)?.load_all::<f32>()?;
    let val = load_dataset(&cfg.val_dir)?.load_all::<f32>()?;
    std::fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    let run = run_ablation(&train, &val, &modes, &tc, cfg.ablation_domain()?, Some(&cfg.out_dir))?;
    for (mode, records) in &run.logs {
        verify_mode_contract(*mode, records)?;
    }
    let table_path = cfg.out_dir.join(ABLATION_FILE);
    std::fs::write(&table_path, run.table.to_csv()).with_context(|| format!("writing {}", table_path.display()))?;
    let ref_path = cfg.out_dir.join(REFERENCE_FILE);
    std::fs::write(&ref_path, AblationTable::reference_csv()).with_context(|| format!("writing {}", ref_path.display()))?;
    Ok(run.table)
}

/// Process exit code for an error chain.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    let Some(e) = err.chain().find_map(|c| c.downcast_ref::<Error>()) else {
        return if err.chain().any(|c| c.is::<std::io::Error>()) { 3 } else { 1 };
    };
    match e {
        Error::Config(_) | Error::Domain(_) | Error::Dimension(_) => 2,
        Error::Io { .. } | Error::Ingestion { .. } | Error::Integrity(_) => 3,
        Error::NonFinite { .. } => 4,
        #[allow(unreachable_patterns)]
        _ => 1,
    }
}
