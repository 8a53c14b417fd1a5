//! Additive rain model `I_rain = clamp(I_c + I_s)` with procedural streak
//! layers, procedural clean scenes, and paired dataset generation.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{decode_ppm, encode_ppm, read_image, write_image};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StreakParams {
    /// Expected streaks per 1000 pixels.
    pub density: f64,
    /// Mean orientation, degrees from vertical.
    pub angle_deg: f64,
    pub angle_jitter_deg: f64,
    pub length_px: f64,
    pub length_jitter_px: f64,
    /// Streak width; the Gaussian cross-profile has `σ = width / 2`.
    pub width_px: f64,
    pub intensity: f64,
    pub intensity_jitter: f64,
    pub seed: u64,
}

impl Default for StreakParams {
    fn default() -> Self {
        StreakParams {
            density: 8.0,
            angle_deg: 10.0,
            angle_jitter_deg: 5.0,
            length_px: 12.0,
            length_jitter_px: 4.0,
            width_px: 1.2,
            intensity: 0.5,
            intensity_jitter: 0.2,
            seed: 0,
        }
    }
}

impl StreakParams {
    pub fn validate(&self) -> Result<()> {
        let non_negative = [
            ("density", self.density),
            ("angle_jitter_deg", self.angle_jitter_deg),
            ("length_px", self.length_px),
            ("length_jitter_px", self.length_jitter_px),
            ("width_px", self.width_px),
            ("intensity", self.intensity),
            ("intensity_jitter", self.intensity_jitter),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("streaks.{name} must be non-negative, got {v}")));
            }
        }
        if self.intensity + self.intensity_jitter > 1.0 {
            return Err(Error::Config(
                "streaks.intensity + intensity_jitter must be <= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        StreakParams { seed, ..self.clone() }
    }
}

/// What an image represents in the degradation model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Clean,
    Streak,
    Rainy,
    Derained,
    GroundTruth,
}

/// A `3×H×W` image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub pixels: Tensor<f64>,
    pub role: Role,
}

impl Image {
    pub fn new(pixels: Tensor<f64>, role: Role) -> Result<Self> {
        if pixels.rank() != 3 || pixels.shape()[0] != 3 {
            return Err(Error::InvalidShape {
                shape: pixels.shape().to_vec(),
                reason: "image must be 3×H×W".into(),
            });
        }
        if let Some(i) = pixels.data().iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::OutOfRange {
                what: "image pixel".into(),
                index: i,
                value: pixels.data()[i],
            });
        }
        Ok(Image { pixels, role })
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }
}

/// SplitMix64 output function.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of image `index`: the `index+1`-th SplitMix64 draw from `root`.
pub fn derive_seed(root: u64, index: u64) -> u64 {
    splitmix64(root.wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15)))
}

fn jitter(rng: &mut ChaCha8Rng, mean: f64, spread: f64) -> f64 {
    if spread > 0.0 {
        mean + rng.random_range(-spread..=spread)
    } else {
        mean
    }
}

/// Streak layer: anti-aliased segments with a Gaussian cross-profile,
/// combined by maximum, replicated to three channels.
pub fn synth_streaks(h: usize, w: usize, p: &StreakParams) -> Result<Image> {
    p.validate()?;
    if h == 0 || w == 0 {
        return Err(Error::InvalidShape {
            shape: vec![3, h, w],
            reason: "streak layer needs positive extents".into(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let lambda = p.density * (h * w) as f64 / 1000.0;
    let count = if lambda > 0.0 {
        Poisson::new(lambda)
            .map_err(|e| Error::Config(format!("streak density: {e}")))?
            .sample(&mut rng) as usize
    } else {
        0
    };
    let mut plane = vec![0.0f64; h * w];
    let sigma = (p.width_px / 2.0).max(0.25);
    let reach = 3.0 * sigma;
    for _ in 0..count {
        let cx = rng.random_range(0.0..w as f64);
        let cy = rng.random_range(0.0..h as f64);
        let theta = jitter(&mut rng, p.angle_deg, p.angle_jitter_deg).to_radians();
        let len = jitter(&mut rng, p.length_px, p.length_jitter_px).max(1.0);
        let amp = jitter(&mut rng, p.intensity, p.intensity_jitter).clamp(0.0, 1.0);
        let (dx, dy) = (theta.sin(), theta.cos());
        let (x0, y0) = (cx - dx * len / 2.0, cy - dy * len / 2.0);
        let (x1, y1) = (cx + dx * len / 2.0, cy + dy * len / 2.0);
        let xmin = (x0.min(x1) - reach).floor().max(0.0) as usize;
        let xmax = ((x0.max(x1) + reach).ceil().max(0.0) as usize).min(w - 1);
        let ymin = (y0.min(y1) - reach).floor().max(0.0) as usize;
        let ymax = ((y0.max(y1) + reach).ceil().max(0.0) as usize).min(h - 1);
        for py in ymin..=ymax {
            for px in xmin..=xmax {
                let (qx, qy) = (px as f64 + 0.5, py as f64 + 0.5);
                let t = (((qx - x0) * dx + (qy - y0) * dy) / len).clamp(0.0, 1.0);
                let (ex, ey) = (qx - (x0 + t * dx * len), qy - (y0 + t * dy * len));
                let d2 = ex * ex + ey * ey;
                if d2 <= reach * reach {
                    let v = amp * (-d2 / (2.0 * sigma * sigma)).exp();
                    let cell = &mut plane[py * w + px];
                    *cell = cell.max(v);
                }
            }
        }
    }
    let pixels = Tensor::from_fn(&[3, h, w], |i| plane[i % (h * w)]);
    Image::new(pixels, Role::Streak)
}

/// `clamp(clean + streaks, 0, 1)`.
pub fn compose_rainy(clean: &Image, streaks: &Image) -> Result<Image> {
    let sum = clean
        .pixels
        .zip_map(&streaks.pixels, |c, s| (c + s).clamp(0.0, 1.0))
        .map_err(|_| Error::shape("compose_rainy", clean.pixels.shape(), streaks.pixels.shape()))?;
    Image::new(sum, Role::Rainy)
}

/// Smooth synthetic scene: a two-colour gradient, a few flat shapes and a
/// low-frequency texture.
pub fn procedural_clean(h: usize, w: usize, seed: u64) -> Result<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut color = || -> [f64; 3] { std::array::from_fn(|_| rng.random_range(0.1..0.8)) };
    let (top, bottom) = (color(), color());
    let mut px = vec![[0.0f64; 3]; h * w];
    for y in 0..h {
        let t = y as f64 / (h.max(2) - 1) as f64;
        for x in 0..w {
            px[y * w + x] = std::array::from_fn(|c| top[c] * (1.0 - t) + bottom[c] * t);
        }
    }
    let shapes = rng.random_range(3..7);
    for _ in 0..shapes {
        let col: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.05..0.85));
        let (cx, cy) = (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64));
        let (rx, ry) = (
            rng.random_range(0.1..0.35) * w as f64,
            rng.random_range(0.1..0.35) * h as f64,
        );
        let ellipse = rng.random_bool(0.5);
        for y in 0..h {
            for x in 0..w {
                let (u, v) = ((x as f64 + 0.5 - cx) / rx, (y as f64 + 0.5 - cy) / ry);
                let inside = if ellipse {
                    u * u + v * v <= 1.0
                } else {
                    u.abs() <= 1.0 && v.abs() <= 1.0
                };
                if inside {
                    px[y * w + x] = col;
                }
            }
        }
    }
    let (fx, fy, phase, amp) = (
        rng.random_range(0.5..3.0),
        rng.random_range(0.5..3.0),
        rng.random_range(0.0..std::f64::consts::TAU),
        rng.random_range(0.02..0.08),
    );
    let plane = h * w;
    let pixels = Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / plane, i % plane);
        let (y, x) = ((p / w) as f64 / h as f64, (p % w) as f64 / w as f64);
        let tex = amp * (std::f64::consts::TAU * (fx * x + fy * y) + phase).sin();
        (px[p][c] + tex).clamp(0.0, 1.0)
    });
    Image::new(pixels, Role::Clean)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairEntry {
    /// Paths relative to the dataset directory.
    pub rainy: String,
    pub clean: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub pairs: Vec<PairEntry>,
    pub params: StreakParams,
    pub root_seed: u64,
    pub created_at: String,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Manifest {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let s = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::from_json(&s)
    }

    /// Reads every `(rainy, clean)` pair.
    pub fn load_pairs(&self, dir: &Path) -> Result<Vec<(Tensor<f64>, Tensor<f64>)>> {
        self.pairs
            .par_iter()
            .map(|p| Ok((read_image(&dir.join(&p.rainy))?, read_image(&dir.join(&p.clean))?)))
            .collect()
    }
}

/// Timestamp from `SOURCE_DATE_EPOCH` (seconds), the Unix epoch otherwise,
/// so repeated runs produce identical manifests.
pub fn reproducible_timestamp() -> String {
    let secs = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.trim().parse::<i64>().ok())
        .unwrap_or(0);
    chrono::DateTime::from_timestamp(secs, 0)
        .unwrap_or_default()
        .to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

/// Source of clean images for [`make_dataset`].
#[derive(Clone, Debug)]
pub enum CleanSource {
    /// Every `.ppm`/`.pgm` file of a directory, in name order, reused
    /// cyclically.
    Directory(PathBuf),
    /// Procedural scenes of the given height and width.
    Procedural { height: usize, width: usize },
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for e in entries {
        let path = e.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|s| s.to_str()).map(str::to_ascii_lowercase);
        if matches!(ext.as_deref(), Some("ppm" | "pgm")) {
            files.push(path);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no .ppm or .pgm images"),
        ));
    }
    Ok(files)
}

fn pair_names(index: usize) -> (String, String) {
    (format!("rainy/{index:04}.ppm"), format!("clean/{index:04}.ppm"))
}

/// Writes `count` rainy/clean pairs and `manifest.json` into `out_dir`.
/// Image `i` uses seed `derive_seed(p.seed, i)` for its streaks (and, when
/// procedural, `splitmix64` of it for its scene).
pub fn make_dataset(source: &CleanSource, out_dir: &Path, p: &StreakParams, count: usize) -> Result<Manifest> {
    p.validate()?;
    let cleans = match source {
        CleanSource::Directory(dir) => {
            let files = list_images(dir)?;
            Some(files.iter().map(|f| read_image(f)).collect::<Result<Vec<_>>>()?)
        }
        CleanSource::Procedural { height, width } => {
            if *height == 0 || *width == 0 {
                return Err(Error::Config("procedural image extents must be positive".into()));
            }
            None
        }
    };
    if count > 0 {
        for sub in ["rainy", "clean"] {
            let d = out_dir.join(sub);
            std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
    } else {
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    }
    let pairs = (0..count)
        .into_par_iter()
        .map(|i| {
            let seed = derive_seed(p.seed, i as u64);
            let clean = match (&cleans, source) {
                (Some(c), _) => Image::new(c[i % c.len()].clone(), Role::Clean)?,
                (None, CleanSource::Procedural { height, width }) => {
                    // stored at 8 bits, so the rainy image is composed from exactly what is saved
                    let scene = procedural_clean(*height, *width, splitmix64(seed))?;
                    Image::new(decode_ppm(&encode_ppm(&scene.pixels)?)?, Role::Clean)?
                }
                (None, CleanSource::Directory(_)) => unreachable!(),
            };
            let streaks = synth_streaks(clean.height(), clean.width(), &p.with_seed(seed))?;
            let rainy = compose_rainy(&clean, &streaks)?;
            let (rn, cn) = pair_names(i);
            write_image(&out_dir.join(&rn), &rainy.pixels)?;
            write_image(&out_dir.join(&cn), &clean.pixels)?;
            Ok(PairEntry {
                rainy: rn,
                clean: cn,
                seed,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        pairs,
        params: p.clone(),
        root_seed: p.seed,
        created_at: reproducible_timestamp(),
    };
    let path = out_dir.join(MANIFEST_FILE);
    std::fs::write(&path, manifest.to_json()?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Re-renders every rainy image from its stored clean image and recorded
/// seed; returns the indices whose rainy file differs from the
/// re-rendering.
pub fn verify_dataset(manifest: &Manifest, dir: &Path) -> Result<Vec<usize>> {
    let mismatched = manifest
        .pairs
        .par_iter()
        .enumerate()
        .map(|(i, pair)| {
            let clean = Image::new(read_image(&dir.join(&pair.clean))?, Role::Clean)?;
            let streaks = synth_streaks(clean.height(), clean.width(), &manifest.params.with_seed(pair.seed))?;
            let rainy = compose_rainy(&clean, &streaks)?;
            let stored = std::fs::read(dir.join(&pair.rainy)).map_err(|e| Error::io(dir.join(&pair.rainy), e))?;
            Ok((encode_ppm(&rainy.pixels)? != stored).then_some(i))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(mismatched.into_iter().flatten().collect())
}
