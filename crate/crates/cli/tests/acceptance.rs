//! Acceptance suite: one pass/fail line per criterion.
//!
//! Runs as a plain binary (`harness = false`) so the lines show up in the
//! `cargo test` output. Training criteria share one desk-scale dataset
//! written by the real `synth` command.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use anyhow::{ensure, Context, Result};
use hazebridge::autodiff::{Graph, Var};
use hazebridge::datasets::{load_dataset, normalize, Dataset};
use hazebridge::dehazing::{build_dehazer, dehaze, DehazerConfig};
use hazebridge::evaluation::{dehaze_image, deployed_dehazer, evaluate_networks, evaluation_pairs, psnr, Domain};
use hazebridge::gradcheck::{check_input, check_params, GradCheckReport};
use hazebridge::losses::{
    cycle_consistency_var, dark_channel_var, dc_patch_for, identity_var, l1_var, overall_loss, supervised_mse,
    supervised_mse_var, total_variation_var, LossTerm, LossWeights, DC_SHARPNESS,
};
use hazebridge::physics::{
    dark_channel, invert_haze, pseudo_depth, synthesize_haze, transmission_from_depth, DepthMap, HazeParams,
    TransmissionMap,
};
use hazebridge::training::{
    load_checkpoint, read_log, save_checkpoint, Checkpoint, LogRecord, Mode, Phase, TrainConfig, Trainer, TrainingData,
};
use hazebridge::translation::{build_r2s_generator, build_s2r_generator, sft_apply, translate_s2r, GeneratorConfig};
use hazebridge::{Tensor, Tensor32, Tensor64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRAD_TOL: f64 = 1e-4;
const TOTAL_TOL: f64 = 1e-5;

struct Outcome {
    id: usize,
    name: &'static str,
    pass: bool,
    elapsed: Duration,
    detail: String,
}

fn run(id: usize, name: &'static str, budget: Option<Duration>, f: impl FnOnce() -> Result<String>) -> Outcome {
    let start = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f));
    let elapsed = start.elapsed();
    let (mut pass, mut detail) = match result {
        Ok(Ok(d)) => (true, d),
        Ok(Err(e)) => (false, format!("{e:#}")),
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            (false, format!("panicked: {msg}"))
        }
    };
    if let Some(b) = budget {
        if elapsed > b {
            pass = false;
            detail = format!("{detail}; over the {:.0} s budget", b.as_secs_f64());
        }
    }
    let o = Outcome {
        id,
        name,
        pass,
        elapsed,
        detail,
    };
    println!("{}", line(&o));
    o
}

fn line(o: &Outcome) -> String {
    format!(
        "[{}] criterion {} {} ({:.1} s): {}",
        if o.pass { "PASS" } else { "FAIL" },
        o.id,
        o.name,
        o.elapsed.as_secs_f64(),
        o.detail
    )
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: [usize; 4], lo: f64, hi: f64) -> Tensor64 {
    Tensor::from_fn4(shape, |_, _, _, _| rng.gen_range(lo..hi))
}

// ---------------------------------------------------------------------------
// 1. physics

fn brute_dark_channel(img: &Tensor64, patch: usize) -> Tensor64 {
    let (n, c, h, w) = img.dims4();
    let r = (patch / 2) as isize;
    Tensor::from_fn4([n, 1, h, w], |b, _, y, x| {
        let mut m = f64::INFINITY;
        for dy in -r..=r {
            for dx in -r..=r {
                let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                for ch in 0..c {
                    m = m.min(img.at(b, ch, yy, xx));
                }
            }
        }
        m
    })
}

fn physics_oracles() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for i in 0..100 {
        let img = rand_tensor(&mut rng, [1, 3, 16, 16], 0.0, 1.0);
        let patch = [1, 3, 5, 7, 9, 15][i % 6];
        let got = dark_channel(&img, patch)?;
        ensure!(got == brute_dark_channel(&img, patch), "dark channel differs on image {i} (patch {patch})");
    }

    let mut roundtrip = 0.0f64;
    for _ in 0..20 {
        let clear = rand_tensor(&mut rng, [2, 3, 16, 16], 0.0, 1.0);
        let t = TransmissionMap::new(rand_tensor(&mut rng, [2, 1, 16, 16], 0.1, 1.0))?;
        let a = [rng.gen_range(0.5..1.0), rng.gen_range(0.5..1.0), rng.gen_range(0.5..1.0)];
        let params = HazeParams::new(a, 1.0)?;
        let hazy = synthesize_haze(&clear, &t, &params)?;
        // Independent forward model.
        let oracle = Tensor::from_fn4([2, 3, 16, 16], |b, c, y, x| {
            let tv = t.as_tensor().at(b, 0, y, x);
            clear.at(b, c, y, x) * tv + a[c] * (1.0 - tv)
        });
        ensure!(hazy.max_abs_diff(&oracle) < 1e-12, "synthesized haze differs from I = J t + A (1 - t)");
        let back = invert_haze(&hazy, &t, &params, 0.05)?;
        roundtrip = roundtrip.max(back.max_abs_diff(&clear));
    }
    ensure!(roundtrip < 1e-6, "synthesize/invert roundtrip error {roundtrip:e}");

    let mut inverse = 0.0f64;
    for _ in 0..20 {
        let d = rand_tensor(&mut rng, [1, 1, 16, 16], 0.0, 5.0);
        let beta = rng.gen_range(0.2..2.0);
        let t = transmission_from_depth(&DepthMap::new(d.clone())?, beta)?;
        let oracle = d.map(|v| (-beta * v).exp());
        ensure!(t.as_tensor().max_abs_diff(&oracle) < 1e-15, "t differs from exp(-beta d)");
        let d2 = pseudo_depth(&t, beta)?;
        inverse = inverse.max(d2.as_tensor().max_abs_diff(&d));
        let t2 = transmission_from_depth(&d2, beta)?;
        inverse = inverse.max(t2.as_tensor().max_abs_diff(t.as_tensor()));
    }
    ensure!(inverse < 1e-9, "transmission/pseudo-depth inverse error {inverse:e}");
    Ok(format!(
        "dark channel exact on 100 images; roundtrip max err {roundtrip:.2e}; inverse pair max err {inverse:.2e}"
    ))
}

// ---------------------------------------------------------------------------
// 2. gradients

fn weighted_sum<'g>(g: &'g Graph<f64>, out: Var<'g, f64>, seed: u64) -> hazebridge::Result<Var<'g, f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = out.shape();
    let r = Tensor::new(&shape, (0..shape.iter().product()).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    Ok(out.mul(g.constant(r))?.sum())
}

fn gradient_suite() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut results: Vec<(&str, GradCheckReport)> = Vec::new();
    let img = |rng: &mut ChaCha8Rng| rand_tensor(rng, [1, 3, 8, 8], -0.9, 0.9);
    let unit = |rng: &mut ChaCha8Rng| rand_tensor(rng, [1, 3, 8, 8], 0.05, 0.95);

    let gamma = rand_tensor(&mut rng, [1, 4, 8, 8], 0.5, 1.5);
    let beta = rand_tensor(&mut rng, [1, 4, 8, 8], -0.5, 0.5);
    let feats = rand_tensor(&mut rng, [1, 4, 8, 8], -1.0, 1.0);
    results.push((
        "sft/features",
        check_input(&feats, |g, f| weighted_sum(g, sft_apply(f, g.constant(gamma.clone()), g.constant(beta.clone()))?, 1))?,
    ));
    results.push((
        "sft/gamma",
        check_input(&gamma, |g, gm| weighted_sum(g, sft_apply(g.constant(feats.clone()), gm, g.constant(beta.clone()))?, 2))?,
    ));
    results.push((
        "sft/beta",
        check_input(&beta, |g, bt| weighted_sum(g, sft_apply(g.constant(feats.clone()), g.constant(gamma.clone()), bt)?, 3))?,
    ));

    let x = unit(&mut rng);
    results.push(("tv", check_input(&x, |_, v| total_variation_var(v))?));
    results.push((
        "soft dark channel",
        check_input(&x, |_, v| dark_channel_var(v, dc_patch_for(8).max(3), DC_SHARPNESS))?,
    ));
    let target = unit(&mut rng);
    results.push(("mse", check_input(&x, |g, v| supervised_mse_var(v, g.constant(target.clone())))?));

    let gcfg = GeneratorConfig {
        base_width: 4,
        n_res_blocks: 1,
        io_kernel: 3,
        n_sampling: 1,
        input_skip: false,
    };
    let s2r = build_s2r_generator::<f64>(gcfg, 11)?;
    let r2s = build_r2s_generator::<f64>(gcfg, 12)?;
    let s2r_skip = build_s2r_generator::<f64>(GeneratorConfig { input_skip: true, ..gcfg }, 13)?;
    let dcfg = DehazerConfig {
        base_width: 2,
        n_stages: 2,
    };
    let dr = build_dehazer::<f64>(dcfg, 14)?;
    let ds = build_dehazer::<f64>(dcfg, 15)?;
    let (xs, xr) = (img(&mut rng), img(&mut rng));
    let (d_s, d_r) = (
        rand_tensor(&mut rng, [1, 1, 8, 8], 0.0, 1.0),
        rand_tensor(&mut rng, [1, 1, 8, 8], 0.0, 1.0),
    );
    const PER_TENSOR: usize = 6;

    results.push((
        "s2r forward/params",
        check_params(&s2r.params, PER_TENSOR, 1, |g, p| {
            weighted_sum(g, s2r.forward(p, g.constant(xs.clone()), Some(&d_s))?, 4)
        })?,
    ));
    results.push((
        "s2r forward/input",
        check_input(&xs, |g, v| {
            let p = s2r.params.bind(g, false);
            weighted_sum(g, s2r.forward(&p, v, Some(&d_s))?, 5)
        })?,
    ));
    results.push((
        "s2r+skip forward/params",
        check_params(&s2r_skip.params, PER_TENSOR, 2, |g, p| {
            weighted_sum(g, s2r_skip.forward(p, g.constant(xs.clone()), Some(&d_s))?, 6)
        })?,
    ));
    results.push((
        "r2s forward/params",
        check_params(&r2s.params, PER_TENSOR, 3, |g, p| {
            weighted_sum(g, r2s.forward(p, g.constant(xr.clone()), None)?, 7)
        })?,
    ));
    results.push((
        "dehazer forward/params",
        check_params(&dr.params, PER_TENSOR, 4, |g, p| {
            weighted_sum(g, dr.forward(p, g.constant(xr.clone()))?.clear, 8)
        })?,
    ));
    results.push((
        "dehazer forward/input",
        check_input(&xr, |g, v| {
            let p = dr.params.bind(g, false);
            weighted_sum(g, dr.forward(&p, v)?.clear, 9)
        })?,
    ));

    results.push((
        "cycle/s2r params",
        check_params(&s2r.params, PER_TENSOR, 5, |g, p| {
            let q = r2s.params.bind(g, false);
            let (vs, vr) = (g.constant(xs.clone()), g.constant(xr.clone()));
            let rec_s = r2s.forward(&q, s2r.forward(p, vs, Some(&d_s))?, None)?;
            let rec_r = s2r.forward(p, r2s.forward(&q, vr, None)?, Some(&d_r))?;
            cycle_consistency_var(vs, rec_s, vr, rec_r)
        })?,
    ));
    results.push((
        "cycle/r2s params",
        check_params(&r2s.params, PER_TENSOR, 6, |g, q| {
            let p = s2r.params.bind(g, false);
            let (vs, vr) = (g.constant(xs.clone()), g.constant(xr.clone()));
            let rec_s = r2s.forward(q, s2r.forward(&p, vs, Some(&d_s))?, None)?;
            let rec_r = s2r.forward(&p, r2s.forward(q, vr, None)?, Some(&d_r))?;
            cycle_consistency_var(vs, rec_s, vr, rec_r)
        })?,
    ));
    results.push((
        "identity/r2s params",
        check_params(&r2s.params, PER_TENSOR, 7, |g, q| {
            let p = s2r.params.bind(g, false);
            let (vs, vr) = (g.constant(xs.clone()), g.constant(xr.clone()));
            identity_var(vs, r2s.forward(q, vs, None)?, vr, s2r.forward(&p, vr, Some(&d_r))?)
        })?,
    ));
    results.push((
        "identity/s2r params",
        check_params(&s2r.params, PER_TENSOR, 8, |g, p| {
            let q = r2s.params.bind(g, false);
            let (vs, vr) = (g.constant(xs.clone()), g.constant(xr.clone()));
            identity_var(vs, r2s.forward(&q, vs, None)?, vr, s2r.forward(p, vr, Some(&d_r))?)
        })?,
    ));
    results.push((
        "consistency/dehazer params",
        check_params(&ds.params, PER_TENSOR, 9, |g, p| {
            let (pr, q) = (dr.params.bind(g, false), r2s.params.bind(g, false));
            let vr = g.constant(xr.clone());
            let j_r = dr.forward(&pr, vr)?.clear;
            let j_rs = ds.forward(p, r2s.forward(&q, vr, None)?)?.clear;
            l1_var(j_r, j_rs)
        })?,
    ));
    results.push((
        "consistency/input",
        check_input(&xr, |g, vr| {
            let (pr, ps, q) = (dr.params.bind(g, false), ds.params.bind(g, false), r2s.params.bind(g, false));
            let j_r = dr.forward(&pr, vr)?.clear;
            let j_rs = ds.forward(&ps, r2s.forward(&q, vr, None)?)?.clear;
            l1_var(j_r, j_rs)
        })?,
    ));

    let (worst_name, worst) = results
        .iter()
        .max_by(|a, b| a.1.max_rel_error.total_cmp(&b.1.max_rel_error))
        .expect("checks ran");
    let checked: usize = results.iter().map(|(_, r)| r.checked).sum();
    let failing: Vec<String> = results
        .iter()
        .filter(|(_, r)| !(r.max_rel_error < GRAD_TOL))
        .map(|(n, r)| format!("{n} {:.2e} at {:?}", r.max_rel_error, r.worst))
        .collect();
    ensure!(failing.is_empty(), "relative error above {GRAD_TOL:e}: {}", failing.join("; "));
    Ok(format!(
        "{} checks, {checked} coordinates, worst {worst_name} {:.2e}",
        results.len(),
        worst.max_rel_error
    ))
}

// ---------------------------------------------------------------------------
// shared desk-scale state

struct Desk {
    dir: PathBuf,
    train: Dataset<f32>,
    val: Dataset<f32>,
    config: TrainConfig,
}

fn hazebridge(dir: &Path, args: &[&str]) -> Result<String> {
    let out = Command::new(env!("CARGO_BIN_EXE_hazebridge"))
        .current_dir(dir)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .context("running hazebridge")?;
    ensure!(
        out.status.success(),
        "hazebridge {args:?} exited with {}: {}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    Ok(String::from_utf8(out.stdout)?)
}

fn desk(dir: &Path) -> Result<Desk> {
    hazebridge(dir, &["synth", "--out-dir", "synth"])?;
    let train = load_dataset(&dir.join("data/train"))?.load_all::<f32>()?;
    let val = load_dataset(&dir.join("data/val"))?.load_all::<f32>()?;
    ensure!(train.synthetic.len() == 16 && train.real.len() == 16, "desk dataset must be 16+16");
    let config = TrainConfig::desk();
    ensure!(config.generator.base_width == 8 && config.crop == [64, 64], "desk networks must be width 8 at 64x64");
    Ok(Desk {
        dir: dir.to_path_buf(),
        train,
        val,
        config,
    })
}

// ---------------------------------------------------------------------------
// 3. smoke training

/// `L_rm` on the whole held-out synthetic set: translated to the real
/// domain, dehazed by the real-domain network, compared with ground truth.
fn heldout_lrm(ckpt: &Checkpoint<f32>, val: &Dataset<f32>) -> Result<f64> {
    let x = Tensor::stack(&val.synthetic.iter().map(|s| normalize(&s.hazy)).collect::<Vec<_>>())?;
    let y = Tensor::stack(&val.synthetic.iter().map(|s| normalize(&s.clear)).collect::<Vec<_>>())?;
    let d = Tensor::stack(&val.synthetic.iter().map(|s| s.depth.as_tensor().clone()).collect::<Vec<_>>())?;
    let x_sr = translate_s2r(&x, &DepthMap::new(d)?, &ckpt.networks.s2r)?;
    let (j, _) = dehaze(&x_sr, &ckpt.networks.dehaze_r)?;
    Ok(supervised_mse(&j, &y)? as f64)
}

fn all_finite(records: &[LogRecord]) -> Result<()> {
    for r in records {
        for (k, v) in &r.fields {
            ensure!(v.is_finite(), "step {}: {k} = {v}", r.step);
        }
    }
    Ok(())
}

fn smoke_training(d: &Desk, phase1: &Checkpoint<f32>, data: &TrainingData<f32>) -> Result<(String, Vec<LogRecord>)> {
    let (mut t, _) = Trainer::resume(d.config.clone(), data, phase1.clone())?;
    t.run_steps(Phase::Dehazing, 10)?;
    let at10 = heldout_lrm(&t.checkpoint(), &d.val)?;
    t.run_steps(Phase::Dehazing, 290)?;
    ensure!(t.phase_steps()[1] == 300, "ran {} phase-2 steps", t.phase_steps()[1]);
    let at300 = heldout_lrm(&t.checkpoint(), &d.val)?;
    let records = t.records().to_vec();
    all_finite(&records)?;
    let logged = |range: std::ops::Range<usize>| {
        let v: Vec<f64> = records[range].iter().map(|r| r.get("L_rm").expect("L_rm logged")).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let (early, late) = (logged(5..15), logged(290..300));
    let ratio = at300 / at10;
    ensure!(
        ratio < 0.5,
        "held-out L_rm {at10:.5} at step 10 -> {at300:.5} at step 300 (ratio {ratio:.3})"
    );
    Ok((
        format!(
            "held-out L_rm {at10:.5} -> {at300:.5} (ratio {ratio:.3}); logged L_rm around step 10 {early:.5}, around step 300 {late:.5}; {} records finite",
            records.len()
        ),
        records,
    ))
}

// ---------------------------------------------------------------------------
// 4. end-to-end improvement

fn oracle_psnr(a: &Tensor32, b: &Tensor32) -> f64 {
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        100.0
    } else {
        (10.0 * (1.0 / mse).log10()).min(100.0)
    }
}

struct EndToEnd {
    detail: String,
    synthetic_psnr: f64,
    synthetic_ssim: f64,
}

fn end_to_end(d: &Desk, trainer: &mut Trainer<'_, f32>) -> Result<EndToEnd> {
    trainer.run_phase(Phase::Dehazing)?;
    trainer.run_phase(Phase::Joint)?;
    all_finite(trainer.records())?;
    let nets = trainer.networks();
    let (mut base, mut out, mut n) = (0.0, 0.0, 0usize);
    let mut per_domain = Vec::new();
    for domain in [Domain::Synthetic, Domain::Real] {
        let id = deployed_dehazer(Mode::Full, domain);
        let pairs = evaluation_pairs(&d.val, domain)?;
        let (mut b, mut o) = (0.0, 0.0);
        for (hazy, clear) in &pairs {
            let oracle = oracle_psnr(hazy, clear);
            let lib = psnr(hazy, clear)?;
            ensure!((oracle - lib).abs() < 1e-9, "psnr oracle {oracle} vs library {lib}");
            b += oracle;
            o += oracle_psnr(&dehaze_image(hazy, nets.dehazer(id))?, clear);
        }
        let k = pairs.len() as f64;
        per_domain.push(format!("{domain}/{id} {:.2} -> {:.2} dB", b / k, o / k));
        base += b;
        out += o;
        n += pairs.len();
    }
    let (base, out) = (base / n as f64, out / n as f64);
    let gain = out - base;
    let syn_pairs = evaluation_pairs(&d.val, Domain::Synthetic)?;
    let syn = evaluate_networks(nets, Mode::Full, &syn_pairs, Domain::Synthetic)?;
    let detail = format!(
        "FULL {out:.2} dB vs hazy {base:.2} dB over {n} held-out images (gain {gain:+.2} dB; {})",
        per_domain.join(", ")
    );
    ensure!(gain >= 2.0, "{detail}");
    Ok(EndToEnd {
        detail,
        synthetic_psnr: syn.psnr_mean,
        synthetic_ssim: syn.ssim_mean,
    })
}

// ---------------------------------------------------------------------------
// 5. ablation

fn expected_terms(mode: Mode, phase: Phase) -> BTreeSet<&'static str> {
    let keys: &[&str] = match (phase, mode) {
        (Phase::Translation, _) => &["L_gan_img_r", "L_gan_img_s", "L_cyc", "L_idt"],
        (Phase::Dehazing, Mode::Syn) => &["L_sm"],
        (Phase::Dehazing, Mode::SynU | Mode::R2sU) => &["L_sm", "L_st", "L_sd"],
        (Phase::Dehazing, Mode::S2r) => &["L_rm"],
        (Phase::Dehazing, Mode::Full) => &["L_rm", "L_rt", "L_rd", "L_sm", "L_st", "L_sd", "L_consis"],
        (Phase::Joint, _) => &[
            "L_gan_img_r", "L_gan_feat_r", "L_gan_img_s", "L_gan_feat_s", "L_cyc", "L_idt", "L_rm", "L_sm", "L_rd",
            "L_sd", "L_rt", "L_st", "L_consis",
        ],
    };
    keys.iter().copied().collect()
}

fn expected_phases(mode: Mode) -> &'static [Phase] {
    match mode {
        Mode::Syn | Mode::SynU => &[Phase::Dehazing],
        Mode::R2sU | Mode::S2r => &[Phase::Translation, Phase::Dehazing],
        Mode::Full => &[Phase::Translation, Phase::Dehazing, Phase::Joint],
    }
}

fn check_contract(mode: Mode, records: &[LogRecord]) -> Result<()> {
    ensure!(!records.is_empty(), "{mode}: empty log");
    let mut seen = Vec::new();
    for r in records {
        ensure!(r.mode == mode, "{mode}: record of mode {}", r.mode);
        ensure!(expected_phases(mode).contains(&r.phase), "{mode}: unexpected phase {}", r.phase.number());
        let got: BTreeSet<&str> = r
            .fields
            .iter()
            .map(|(k, _)| k.as_str())
            .filter(|k| k.starts_with("L_") && *k != "L_tran")
            .collect();
        ensure!(
            got == expected_terms(mode, r.phase),
            "{mode} step {}: logged {got:?}",
            r.step
        );
        if seen.last() != Some(&r.phase) {
            seen.push(r.phase);
        }
    }
    ensure!(seen == expected_phases(mode), "{mode}: phases ran in order {seen:?}");
    hazebridge::training::verify_mode_contract(mode, records)?;
    Ok(())
}

fn mode_log(dir: &Path, mode: Mode) -> PathBuf {
    dir.join(format!("train_{}.log", mode.name().replace('+', "_")))
}

struct Ablation {
    detail: String,
    full_log: Vec<LogRecord>,
    logs: Vec<(Mode, Vec<LogRecord>)>,
}

fn ablation(d: &Desk, e2e: Option<&EndToEnd>) -> Result<Ablation> {
    let stdout = hazebridge(&d.dir, &["ablate", "--out-dir", "ablation"])?;
    let out = d.dir.join("ablation");
    let table = std::fs::read_to_string(out.join("ablation.csv"))?;
    ensure!(stdout == table, "printed table differs from ablation.csv");
    let mut lines = table.lines();
    ensure!(lines.next() == Some("mode,psnr_mean,ssim_mean,steps,seed"), "table header");
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    let names: Vec<&str> = rows.iter().map(|r| r[0]).collect();
    ensure!(names == ["SYN", "SYN+U", "R2S+U", "S2R", "FULL", "HAZY"], "table rows {names:?}");
    for r in &rows {
        ensure!(r.len() == 5, "row {r:?}");
        let (p, s): (f64, f64) = (r[1].parse()?, r[2].parse()?);
        ensure!(p.is_finite() && s.is_finite(), "non-finite row {r:?}");
        ensure!(r[4] == "0", "row seed {}", r[4]);
    }

    let mut logs = Vec::new();
    for mode in Mode::ALL {
        let records = read_log(&mode_log(&out, mode))?;
        check_contract(mode, &records)?;
        all_finite(&records)?;
        logs.push((mode, records));
    }

    // Bit-exact rows: two fresh runs on a shortened schedule.
    let short = [
        "--set", "steps_translation=3", "--set", "steps_dehazing=3", "--set", "steps_joint=3",
    ];
    let mut tables = Vec::new();
    for name in ["short_a", "short_b"] {
        let mut args = vec!["ablate", "--out-dir", name];
        args.extend(short);
        tables.push(hazebridge(&d.dir, &args)?);
    }
    ensure!(tables[0] == tables[1], "shortened ablation tables differ:\n{}\n{}", tables[0], tables[1]);
    for mode in Mode::ALL {
        let a = std::fs::read_to_string(mode_log(&d.dir.join("short_a"), mode))?;
        let b = std::fs::read_to_string(mode_log(&d.dir.join("short_b"), mode))?;
        ensure!(deterministic(&a) == deterministic(&b), "{mode}: shortened logs differ");
    }

    // The FULL row must match an independent in-process run of the same schedule.
    let full = &rows[4];
    if let Some(e) = e2e {
        let (p, s): (f64, f64) = (full[1].parse()?, full[2].parse()?);
        ensure!(
            p == e.synthetic_psnr && s == e.synthetic_ssim,
            "FULL row {p}/{s} differs from the in-process run {}/{}",
            e.synthetic_psnr,
            e.synthetic_ssim
        );
    }
    let reference = std::fs::read_to_string(out.join("ablation_reference.csv"))?;
    println!("desk ablation (synthetic validation):\n{table}reference ordering (context only):\n{reference}");
    let full_log = logs.iter().find(|(m, _)| *m == Mode::Full).expect("FULL ran").1.clone();
    Ok(Ablation {
        detail: format!(
            "5 modes + HAZY row; contracts hold in {} log records; rows bit-identical across reruns",
            logs.iter().map(|(_, r)| r.len()).sum::<usize>()
        ),
        full_log,
        logs,
    })
}

fn deterministic(log: &str) -> Vec<String> {
    log.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| LogRecord::parse(l).map(|r| r.deterministic_line()).unwrap_or_else(|e| format!("unparsable: {e}")))
        .collect()
}

// ---------------------------------------------------------------------------
// 6. determinism and persistence

fn lines(records: &[LogRecord]) -> Vec<String> {
    records.iter().map(LogRecord::deterministic_line).collect()
}

fn determinism(
    d: &Desk,
    data: &TrainingData<f32>,
    phase1: &Checkpoint<f32>,
    uninterrupted: &[LogRecord],
    second_run: Option<&[LogRecord]>,
) -> Result<String> {
    let second = second_run.context("no second identically seeded run (ablation failed)")?;
    ensure!(
        lines(uninterrupted) == lines(second),
        "two identically seeded FULL runs logged different losses"
    );

    let p1 = d.dir.join("phase1.ckpt");
    save_checkpoint(phase1, &p1)?;
    let (mut a, _) = Trainer::resume(d.config.clone(), data, load_checkpoint(&p1)?)?;
    a.run_steps(Phase::Dehazing, 10)?;
    let mid = d.dir.join("mid.ckpt");
    save_checkpoint(&a.checkpoint(), &mid)?;
    let (mut b, warnings) = Trainer::resume(d.config.clone(), data, load_checkpoint(&mid)?)?;
    ensure!(warnings.is_empty(), "resume warnings: {warnings:?}");
    b.run_steps(Phase::Dehazing, 20)?;

    let phase2: Vec<&LogRecord> = uninterrupted.iter().filter(|r| r.phase == Phase::Dehazing).collect();
    let want: Vec<String> = phase2[10..30].iter().map(|r| r.deterministic_line()).collect();
    let first: Vec<String> = phase2[..10].iter().map(|r| r.deterministic_line()).collect();
    ensure!(lines(a.records()) == first, "steps before the checkpoint differ from the uninterrupted run");
    ensure!(lines(b.records()) == want, "resumed steps differ from the uninterrupted run");
    Ok(format!(
        "{} log lines identical across two runs; 20 resumed steps match exactly",
        uninterrupted.len()
    ))
}

// ---------------------------------------------------------------------------
// 7. loss algebra

fn overall_weight_of(key: &str) -> Option<f64> {
    Some(match key {
        "L_gan_img_r" | "L_gan_feat_r" | "L_gan_img_s" | "L_gan_feat_s" => 1.0,
        "L_cyc" => 10.0,
        "L_idt" => 5.0,
        "L_rm" | "L_sm" => 10.0,
        "L_rd" | "L_sd" => 1e-2,
        "L_rt" | "L_st" => 1e-3,
        "L_consis" => 1e-1,
        _ => return None,
    })
}

fn loss_algebra(runs: &[&[LogRecord]]) -> Result<String> {
    let unit = overall_loss(&[(LossTerm::RealMse, 1.0), (LossTerm::SynMse, 1.0)], &LossWeights::DEFAULT);
    ensure!(unit.total == 20.0, "unit MSE total {}", unit.total);

    let (mut steps, mut worst) = (0usize, 0.0f64);
    for records in runs {
        for r in *records {
            let total = r.get("total").context("total logged")?;
            let sum: f64 = r.fields.iter().filter_map(|(k, v)| overall_weight_of(k).map(|w| w * v)).sum();
            let err = (total - sum).abs();
            worst = worst.max(err);
            ensure!(err <= TOTAL_TOL, "step {} ({}): total {total} vs weighted sum {sum}", r.step, r.mode);
            if let Some(tran) = r.get("L_tran") {
                let parts: f64 = r
                    .fields
                    .iter()
                    .filter(|(k, _)| k.starts_with("L_gan") || k == "L_cyc" || k == "L_idt")
                    .map(|(k, v)| overall_weight_of(k).expect("weighted") * v)
                    .sum();
                ensure!((tran - parts).abs() <= TOTAL_TOL, "step {}: L_tran {tran} vs {parts}", r.step);
            }
            steps += 1;
        }
    }
    ensure!(steps > 0, "no logged steps to check");
    Ok(format!("unit MSE total = 20; {steps} logged steps, max |total - weighted sum| {worst:.2e}"))
}

// ---------------------------------------------------------------------------

fn main() {
    let started = Instant::now();
    let min = |m: u64| Some(Duration::from_secs(60 * m));
    let mut outcomes = vec![
        run(1, "physics oracles", Some(Duration::from_secs(30)), physics_oracles),
        run(2, "gradient checks", min(5), gradient_suite),
    ];

    let tmp = tempfile::tempdir().expect("temp dir");
    let setup = Instant::now();
    let desk = desk(tmp.path()).expect("desk dataset");
    let data = TrainingData::prepare(&desk.train, desk.config.real_airlight).expect("training data");
    let mut trainer = Trainer::new(desk.config.clone(), &data).expect("trainer");
    trainer.run_phase(Phase::Translation).expect("phase 1");
    let phase1 = trainer.checkpoint();
    let shared = setup.elapsed();
    println!("desk setup and phase 1: {:.1} s", shared.as_secs_f64());

    let mut smoke_records = Vec::new();
    let mut o = run(3, "smoke training", min(10).map(|b| b - shared), || {
        let (detail, records) = smoke_training(&desk, &phase1, &data)?;
        smoke_records = records;
        Ok(detail)
    });
    o.elapsed += shared;
    outcomes.push(o);

    let mut e2e = None;
    let mut o = run(4, "end-to-end improvement", min(30).map(|b| b - shared), || {
        let r = end_to_end(&desk, &mut trainer)?;
        let detail = r.detail.clone();
        e2e = Some(r);
        Ok(detail)
    });
    o.elapsed += shared;
    outcomes.push(o);
    let full_records = trainer.records().to_vec();

    let mut abl = None;
    outcomes.push(run(5, "ablation harness", None, || {
        let a = ablation(&desk, e2e.as_ref())?;
        let detail = a.detail.clone();
        abl = Some(a);
        Ok(detail)
    }));

    outcomes.push(run(6, "determinism and persistence", None, || {
        determinism(&desk, &data, &phase1, &full_records, abl.as_ref().map(|a| a.full_log.as_slice()))
    }));

    outcomes.push(run(7, "loss algebra", None, || {
        let mut runs: Vec<&[LogRecord]> = vec![&smoke_records, &full_records];
        if let Some(a) = &abl {
            runs.extend(a.logs.iter().map(|(_, r)| r.as_slice()));
        }
        loss_algebra(&runs)
    }));

    println!("\nacceptance summary ({:.0} s):", started.elapsed().as_secs_f64());
    for o in &outcomes {
        println!("{}", line(o));
    }
    let failed = outcomes.iter().filter(|o| !o.pass).count();
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
