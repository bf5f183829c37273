//! Procedural scenes, on-disk datasets, cropping and seeded batching.
//!
//! On-disk layout (files matched by stem):
//!
//! ```text
//! root/syn/hazy/*.png    8-bit RGB
//! root/syn/clear/*.png   8-bit RGB
//! root/syn/depth/*.png   16-bit grey, value / 65535 = normalized depth
//! root/real/hazy/*.png   8-bit RGB
//! root/real/clear/*.png  optional ground truth for procedural real images
//! root/manifest.toml     optional, present for procedural datasets
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, Rgb};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::physics::{synthesize_haze, transmission_from_depth, DepthMap, HazeParams};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MIN_SCENE_SIZE: usize = 16;
pub const MANIFEST_FILE: &str = "manifest.toml";

/// Seeds stored in manifests must fit a TOML integer.
pub(crate) const TOML_INT_MAX: u64 = i64::MAX as u64;

/// SplitMix64 finalizer over a base seed and a path of indices.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mix = |mut z: u64| {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    };
    parts.iter().fold(mix(base), |acc, &p| mix(acc ^ mix(p)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample<T> {
    pub hazy: Tensor<T>,
    pub clear: Tensor<T>,
    pub depth: DepthMap<T>,
    /// Known for generated samples and for file-backed ones with a manifest.
    pub params: Option<HazeParams<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RealSample<T> {
    pub hazy: Tensor<T>,
    /// Ground truth, available for procedural real images only.
    pub clear: Option<Tensor<T>>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset<T> {
    pub synthetic: Vec<SyntheticSample<T>>,
    pub real: Vec<RealSample<T>>,
}

impl<T: Scalar> Dataset<T> {
    pub fn len(&self) -> usize {
        self.synthetic.len() + self.real.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

// ---------------------------------------------------------------------------
// Scene generation

fn saturated_colour(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let mut c = [rng.gen_range(0.35..0.95), rng.gen_range(0.25..0.85), rng.gen_range(0.0..0.12)];
    c.shuffle(rng);
    c
}

#[derive(Clone, Copy)]
enum Shape {
    Rect { x0: f64, x1: f64, y0: f64, y1: f64 },
    Disc { cx: f64, cy: f64, r: f64 },
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Rect { x0, x1, y0, y1 } => x >= x0 && x < x1 && y >= y0 && y < y1,
            Shape::Disc { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) < r * r,
        }
    }
}

struct Object {
    shape: Shape,
    colour: [f64; 3],
    depth: f64,
    /// Depth change per unit of height above the base, for a slight tilt.
    tilt: f64,
    base: f64,
    freq: f64,
    phase: f64,
}

/// Deterministic clear image `[1,3,h,w]` and depth `[1,1,h,w]` in `[0,1]`.
///
/// Sky sits at depth 1, the ground recedes from the bottom edge to the
/// horizon, and objects stand on the ground at the depth of their base row.
pub fn generate_scene<T: Scalar>(seed: u64, size: (usize, usize)) -> Result<(Tensor<T>, DepthMap<T>)> {
    let (h, w) = size;
    ensure!(
        h >= MIN_SCENE_SIZE && w >= MIN_SCENE_SIZE,
        Domain,
        "scene size must be at least {MIN_SCENE_SIZE}x{MIN_SCENE_SIZE}, got {h}x{w}"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x5ce9e]));
    let horizon = rng.gen_range(0.3..0.5);
    let near = rng.gen_range(0.05..0.25);
    let ground_depth = |v: f64| {
        if v <= horizon {
            1.0
        } else {
            let s = (v - horizon) / (1.0 - horizon);
            0.95 + (near - 0.95) * s.sqrt()
        }
    };
    let sky_top = [rng.gen_range(0.45..0.7), rng.gen_range(0.6..0.8), rng.gen_range(0.8..1.0)];
    let sky_low = [rng.gen_range(0.75..0.95), rng.gen_range(0.78..0.95), rng.gen_range(0.85..1.0)];
    let ground = saturated_colour(&mut rng).map(|c| c * 0.7);
    let ground_freq = rng.gen_range(12.0..30.0);

    let n_objects = rng.gen_range(3..=6);
    let mut objects: Vec<Object> = (0..n_objects)
        .map(|_| {
            let base = rng.gen_range(horizon + 0.05..1.0);
            let height = rng.gen_range(0.12..0.45);
            let width = rng.gen_range(0.08..0.35);
            let cx = rng.gen_range(0.0..1.0);
            let shape = if rng.gen_bool(0.6) {
                Shape::Rect { x0: cx - width / 2.0, x1: cx + width / 2.0, y0: base - height, y1: base }
            } else {
                let r = width / 2.0;
                Shape::Disc { cx, cy: base - r, r }
            };
            Object {
                shape,
                colour: saturated_colour(&mut rng),
                depth: ground_depth(base),
                tilt: rng.gen_range(-0.1..0.1),
                base,
                freq: rng.gen_range(8.0..40.0),
                phase: rng.gen_range(0.0..std::f64::consts::TAU),
            }
        })
        .collect();
    // Painter's order: far objects first.
    objects.sort_by(|a, b| b.depth.total_cmp(&a.depth));

    let grain: Vec<f64> = (0..h * w).map(|_| rng.gen_range(-0.02..0.02)).collect();
    let mut clear = vec![0.0f64; 3 * h * w];
    let mut depth = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            let (u, v) = ((x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64);
            let (mut rgb, mut d);
            if v <= horizon {
                let s = v / horizon;
                rgb = [0, 1, 2].map(|c| sky_top[c] + (sky_low[c] - sky_top[c]) * s);
                d = 1.0;
            } else {
                let stripe = 0.08 * (ground_freq * (v - horizon) / (1.0 - horizon + 1e-9) * std::f64::consts::TAU).sin();
                rgb = ground.map(|c| c + stripe);
                d = ground_depth(v);
            }
            for o in &objects {
                if o.shape.contains(u, v) {
                    let tex = 0.1 * (o.freq * (u + v) + o.phase).sin() * (o.freq * 0.5 * (u - v)).cos();
                    rgb = o.colour.map(|c| c + tex);
                    d = (o.depth + o.tilt * (o.base - v)).clamp(0.0, 1.0);
                }
            }
            let g = grain[y * w + x];
            for (c, value) in rgb.iter().enumerate() {
                clear[c * h * w + y * w + x] = (value + g).clamp(0.0, 1.0);
            }
            depth[y * w + x] = d;
        }
    }
    let clear = Tensor::new(&[1, 3, h, w], clear.into_iter().map(T::of).collect())?;
    let depth = DepthMap::new(Tensor::new(&[1, 1, h, w], depth.into_iter().map(T::of).collect())?)?;
    Ok((clear, depth))
}

/// Applies the scattering model to a clear image and its depth.
pub fn make_synthetic_pair<T: Scalar>(clear: &Tensor<T>, depth: &DepthMap<T>, params: HazeParams<T>) -> Result<SyntheticSample<T>> {
    let t = transmission_from_depth(depth, params.beta())?;
    let hazy = synthesize_haze(clear, &t, &params)?;
    Ok(SyntheticSample {
        hazy,
        clear: clear.clone(),
        depth: depth.clone(),
        params: Some(params),
    })
}

/// Largest deviation of `hazy` from the scattering model under the recorded
/// parameters.
pub fn consistency_residual<T: Scalar>(sample: &SyntheticSample<T>) -> Result<f64> {
    let params = sample
        .params
        .ok_or_else(|| Error::Domain("sample has no recorded haze parameters".into()))?;
    let t = transmission_from_depth(&sample.depth, params.beta())?;
    let model = synthesize_haze(&sample.clear, &t, &params)?;
    Ok(model.max_abs_diff(&sample.hazy).to_f64_lossy())
}

// ---------------------------------------------------------------------------
// Procedural datasets and manifests

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticRecord {
    pub stem: String,
    pub scene_seed: u64,
    pub airlight: [f64; 3],
    pub beta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RealRecord {
    pub stem: String,
    pub scene_seed: u64,
    pub airlight: [f64; 3],
    pub beta: f64,
    /// Per-channel gain applied after hazing.
    pub gains: [f64; 3],
    pub noise_std: f64,
    pub noise_seed: u64,
}

/// Everything needed to regenerate a procedural dataset bit-exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub synthetic: Vec<SyntheticRecord>,
    pub real: Vec<RealRecord>,
}

impl DatasetManifest {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("manifest serialization: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("manifest: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::ingestion(path, e))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProceduralConfig {
    pub seed: u64,
    pub n_synthetic: usize,
    pub n_real: usize,
    pub size: (usize, usize),
}

impl Default for ProceduralConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_synthetic: 16,
            n_real: 16,
            size: (64, 64),
        }
    }
}

/// Draws scene seeds and haze parameters. Synthetic haze is grey and
/// moderate; the "real" domain is denser, warm-tinted, colour-shifted and
/// noisy.
pub fn plan_procedural(cfg: &ProceduralConfig) -> Result<DatasetManifest> {
    let (h, w) = cfg.size;
    ensure!(
        h >= MIN_SCENE_SIZE && w >= MIN_SCENE_SIZE,
        Domain,
        "image size must be at least {MIN_SCENE_SIZE}x{MIN_SCENE_SIZE}, got {h}x{w}"
    );
    ensure!(cfg.n_synthetic + cfg.n_real >= 1, Domain, "procedural dataset would be empty");
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0xda7a]));
    let synthetic = (0..cfg.n_synthetic)
        .map(|i| {
            let a = rng.gen_range(0.8..1.0);
            SyntheticRecord {
                stem: format!("s{i:04}"),
                scene_seed: rng.gen_range(0..=TOML_INT_MAX),
                airlight: [a; 3],
                beta: rng.gen_range(0.5..1.5),
            }
        })
        .collect();
    let real = (0..cfg.n_real)
        .map(|i| {
            let a: f64 = rng.gen_range(0.75..0.95);
            let tint = [1.0, rng.gen_range(0.93..0.99), rng.gen_range(0.82..0.92)];
            RealRecord {
                stem: format!("r{i:04}"),
                scene_seed: rng.gen_range(0..=TOML_INT_MAX),
                airlight: tint.map(|k| a * k),
                beta: rng.gen_range(1.0..2.0),
                gains: [rng.gen_range(1.0..1.06), 1.0, rng.gen_range(0.9..0.97)],
                noise_std: 0.01,
                noise_seed: rng.gen_range(0..=TOML_INT_MAX),
            }
        })
        .collect();
    Ok(DatasetManifest {
        seed: cfg.seed,
        height: h,
        width: w,
        synthetic,
        real,
    })
}

pub fn realize_synthetic<T: Scalar>(rec: &SyntheticRecord, size: (usize, usize)) -> Result<SyntheticSample<T>> {
    let (clear, depth) = generate_scene::<T>(rec.scene_seed, size)?;
    let params = HazeParams::new(rec.airlight.map(T::of), T::of(rec.beta))?;
    make_synthetic_pair(&clear, &depth, params)
}

pub fn realize_real<T: Scalar>(rec: &RealRecord, size: (usize, usize)) -> Result<RealSample<T>> {
    let (clear, depth) = generate_scene::<f64>(rec.scene_seed, size)?;
    let params = HazeParams::new(rec.airlight, rec.beta)?;
    let hazy = make_synthetic_pair(&clear, &depth, params)?.hazy;
    let noise = Normal::new(0.0, rec.noise_std).map_err(|e| Error::Config(format!("noise: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(rec.noise_seed);
    let (_, _, h, w) = hazy.dims4();
    let shifted = Tensor::from_fn4([1, 3, h, w], |_, c, y, x| {
        (hazy.at(0, c, y, x) * rec.gains[c] + noise.sample(&mut rng)).clamp(0.0, 1.0)
    });
    Ok(RealSample {
        hazy: shifted.cast(),
        clear: Some(clear.cast()),
    })
}

pub fn realize<T: Scalar>(manifest: &DatasetManifest) -> Result<Dataset<T>> {
    let size = (manifest.height, manifest.width);
    Ok(Dataset {
        synthetic: manifest.synthetic.iter().map(|r| realize_synthetic(r, size)).collect::<Result<_>>()?,
        real: manifest.real.iter().map(|r| realize_real(r, size)).collect::<Result<_>>()?,
    })
}

pub fn generate_procedural<T: Scalar>(cfg: &ProceduralConfig) -> Result<(Dataset<T>, DatasetManifest)> {
    let manifest = plan_procedural(cfg)?;
    Ok((realize(&manifest)?, manifest))
}

// ---------------------------------------------------------------------------
// Image files

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Loads an image as `[1,3,h,w]` in `[0,1]`.
pub fn load_rgb<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let img = image::open(path).map_err(|e| Error::ingestion(path, e))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Tensor::from_fn4([1, 3, h, w], |_, c, y, x| {
        T::of(img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0)
    }))
}

/// Writes item 0 of `[n,3,h,w]` as 8-bit RGB; the format follows the extension.
pub fn save_rgb<T: Scalar>(path: &Path, image: &Tensor<T>) -> Result<()> {
    let (_, c, h, w) = image.expect_rank4("image")?;
    ensure!(c == 3, Dimension, "expected 3 channels, got {c}");
    let buf = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Rgb([0, 1, 2].map(|ch| to_u8(image.at(0, ch, y as usize, x as usize).to_f64_lossy())))
    });
    buf.save(path).map_err(|e| Error::ingestion(path, e))
}

/// Loads a single-channel depth file as `[1,1,h,w]`, value / 65535.
pub fn load_depth16<T: Scalar>(path: &Path) -> Result<DepthMap<T>> {
    let img = image::open(path).map_err(|e| Error::ingestion(path, e))?.to_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let t = Tensor::from_fn4([1, 1, h, w], |_, _, y, x| {
        T::of(img.get_pixel(x as u32, y as u32)[0] as f64 / 65535.0)
    });
    DepthMap::new(t).map_err(|e| Error::ingestion(path, e))
}

pub fn save_depth16<T: Scalar>(path: &Path, depth: &DepthMap<T>) -> Result<()> {
    let d = depth.as_tensor();
    let (_, _, h, w) = d.dims4();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Luma([(d.at(0, 0, y as usize, x as usize).to_f64_lossy().clamp(0.0, 1.0) * 65535.0).round() as u16])
    });
    buf.save(path).map_err(|e| Error::ingestion(path, e))
}

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes a dataset in the documented layout, plus the manifest if given.
pub fn write_dataset<T: Scalar>(root: &Path, data: &Dataset<T>, manifest: Option<&DatasetManifest>) -> Result<()> {
    let stem_syn = |i: usize| manifest.map_or_else(|| format!("s{i:04}"), |m| m.synthetic[i].stem.clone());
    let stem_real = |i: usize| manifest.map_or_else(|| format!("r{i:04}"), |m| m.real[i].stem.clone());
    if !data.synthetic.is_empty() {
        for sub in ["hazy", "clear", "depth"] {
            ensure_dir(&root.join("syn").join(sub))?;
        }
    }
    for (i, s) in data.synthetic.iter().enumerate() {
        let name = format!("{}.png", stem_syn(i));
        save_rgb(&root.join("syn/hazy").join(&name), &s.hazy)?;
        save_rgb(&root.join("syn/clear").join(&name), &s.clear)?;
        save_depth16(&root.join("syn/depth").join(&name), &s.depth)?;
    }
    if !data.real.is_empty() {
        ensure_dir(&root.join("real/hazy"))?;
    }
    for (i, r) in data.real.iter().enumerate() {
        let name = format!("{}.png", stem_real(i));
        save_rgb(&root.join("real/hazy").join(&name), &r.hazy)?;
        if let Some(clear) = &r.clear {
            ensure_dir(&root.join("real/clear"))?;
            save_rgb(&root.join("real/clear").join(&name), clear)?;
        }
    }
    if let Some(m) = manifest {
        m.save(&root.join(MANIFEST_FILE))?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticFiles {
    pub stem: String,
    pub hazy: PathBuf,
    pub clear: PathBuf,
    pub depth: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RealFiles {
    pub stem: String,
    pub hazy: PathBuf,
    pub clear: Option<PathBuf>,
}

/// Indexed view of an on-disk dataset; images are decoded on access.
#[derive(Clone, Debug)]
pub struct DatasetHandle {
    pub root: PathBuf,
    pub synthetic: Vec<SyntheticFiles>,
    pub real: Vec<RealFiles>,
    pub manifest: Option<DatasetManifest>,
}

fn png_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if let (true, Some(stem)) = (is_png, path.file_stem().and_then(|s| s.to_str())) {
            out.insert(stem.to_string(), path.clone());
        }
    }
    Ok(out)
}

pub fn load_dataset(root: &Path) -> Result<DatasetHandle> {
    if !root.is_dir() {
        let e = std::io::Error::new(std::io::ErrorKind::NotFound, "dataset root is not a directory");
        return Err(Error::io(root, e));
    }
    let clear = png_stems(&root.join("syn/clear"))?;
    let depth = png_stems(&root.join("syn/depth"))?;
    let synthetic = png_stems(&root.join("syn/hazy"))?
        .into_iter()
        .map(|(stem, hazy)| {
            let expect = |map: &BTreeMap<String, PathBuf>, sub: &str| {
                map.get(&stem).cloned().ok_or_else(|| {
                    let missing = root.join("syn").join(sub).join(format!("{stem}.png"));
                    Error::ingestion(missing, format!("missing {sub} file for synthetic sample {}", hazy.display()))
                })
            };
            Ok(SyntheticFiles {
                clear: expect(&clear, "clear")?,
                depth: expect(&depth, "depth")?,
                stem,
                hazy,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let real_clear = png_stems(&root.join("real/clear"))?;
    let real: Vec<RealFiles> = png_stems(&root.join("real/hazy"))?
        .into_iter()
        .map(|(stem, hazy)| RealFiles {
            clear: real_clear.get(&stem).cloned(),
            stem,
            hazy,
        })
        .collect();
    ensure!(
        !synthetic.is_empty() || !real.is_empty(),
        Config,
        "dataset at {} contains no images",
        root.display()
    );
    let manifest_path = root.join(MANIFEST_FILE);
    let manifest = if manifest_path.is_file() {
        Some(DatasetManifest::load(&manifest_path)?)
    } else {
        None
    };
    Ok(DatasetHandle {
        root: root.to_path_buf(),
        synthetic,
        real,
        manifest,
    })
}

impl DatasetHandle {
    pub fn len(&self) -> usize {
        self.synthetic.len() + self.real.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn load_synthetic<T: Scalar>(&self, index: usize) -> Result<SyntheticSample<T>> {
        let files = self
            .synthetic
            .get(index)
            .ok_or_else(|| Error::Domain(format!("synthetic index {index} out of range")))?;
        let hazy = load_rgb(&files.hazy)?;
        let clear = load_rgb(&files.clear)?;
        let depth = load_depth16(&files.depth)?;
        let (hs, cs, ds) = (hazy.shape(), clear.shape(), depth.as_tensor().shape());
        if hs != cs || hs[2..] != ds[2..] {
            return Err(Error::ingestion(
                &files.hazy,
                format!("size mismatch: hazy {hs:?}, clear {cs:?}, depth {ds:?}"),
            ));
        }
        let params = self
            .manifest
            .as_ref()
            .and_then(|m| m.synthetic.iter().find(|r| r.stem == files.stem))
            .map(|r| HazeParams::new(r.airlight.map(T::of), T::of(r.beta)))
            .transpose()?;
        Ok(SyntheticSample {
            hazy,
            clear,
            depth,
            params,
        })
    }

    pub fn load_real<T: Scalar>(&self, index: usize) -> Result<RealSample<T>> {
        let files = self
            .real
            .get(index)
            .ok_or_else(|| Error::Domain(format!("real index {index} out of range")))?;
        Ok(RealSample {
            hazy: load_rgb(&files.hazy)?,
            clear: files.clear.as_deref().map(load_rgb).transpose()?,
        })
    }

    pub fn load_all<T: Scalar>(&self) -> Result<Dataset<T>> {
        Ok(Dataset {
            synthetic: (0..self.synthetic.len()).map(|i| self.load_synthetic(i)).collect::<Result<_>>()?,
            real: (0..self.real.len()).map(|i| self.load_real(i)).collect::<Result<_>>()?,
        })
    }
}

// ---------------------------------------------------------------------------
// Network-space samples and batching

pub fn normalize<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let two = T::of(2.0);
    x.map(|v| two * v - T::one())
}

pub fn denormalize<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let half = T::of(0.5);
    x.map(|v| (v + T::one()) * half)
}

/// One cropped sample: images in `[-1,1]`, depth left in `[0,1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct NetSample<T> {
    pub hazy: Tensor<T>,
    pub clear: Option<Tensor<T>>,
    pub depth: Option<Tensor<T>>,
}

/// Top-left corner of a `crop` window inside an image of `size`.
pub fn crop_window(size: (usize, usize), crop: (usize, usize), seed: u64) -> Result<(usize, usize)> {
    ensure!(
        crop.0 >= 1 && crop.1 >= 1 && crop.0 <= size.0 && crop.1 <= size.1,
        Domain,
        "crop {}x{} does not fit in image {}x{}",
        crop.0,
        crop.1,
        size.0,
        size.1
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((rng.gen_range(0..=size.0 - crop.0), rng.gen_range(0..=size.1 - crop.1)))
}

fn crop<T: Scalar>(t: &Tensor<T>, y0: usize, x0: usize, h: usize, w: usize) -> Tensor<T> {
    let (n, c, _, _) = t.dims4();
    Tensor::from_fn4([n, c, h, w], |b, ch, y, x| t.at(b, ch, y0 + y, x0 + x))
}

pub fn crop_and_normalize<T: Scalar>(
    hazy: &Tensor<T>,
    clear: Option<&Tensor<T>>,
    depth: Option<&Tensor<T>>,
    crop_size: (usize, usize),
    seed: u64,
) -> Result<NetSample<T>> {
    let (_, _, h, w) = hazy.expect_rank4("hazy image")?;
    for other in clear.into_iter().chain(depth) {
        let (_, _, oh, ow) = other.expect_rank4("paired map")?;
        ensure!((oh, ow) == (h, w), Dimension, "paired maps must share the hazy image size");
    }
    let (y0, x0) = crop_window((h, w), crop_size, seed)?;
    let (ch, cw) = crop_size;
    Ok(NetSample {
        hazy: normalize(&crop(hazy, y0, x0, ch, cw)),
        clear: clear.map(|c| normalize(&crop(c, y0, x0, ch, cw))),
        depth: depth.map(|d| crop(d, y0, x0, ch, cw)),
    })
}

/// Permutation of `0..n` for one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[epoch])));
    order
}

/// Consecutive batches of an epoch order; the last batch may be short.
pub fn batches(order: &[usize], batch_size: usize) -> Result<Vec<Vec<usize>>> {
    ensure!(batch_size >= 1, Config, "batch size must be at least 1");
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}
