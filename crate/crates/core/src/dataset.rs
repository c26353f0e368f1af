//! Clean synthetic scenes, degraded/clean training pairs, and JSON-lines
//! dataset manifests.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::degrade::{derive_seed, Degradation, DegradationKind, DegradationSpec, RainParams};
use crate::error::{Error, Result};
use crate::image::Image;

/// A procedurally generated clean scene: a two-colour gradient sky, a few
/// flat shapes and a mild texture. Values stay within [0.05, 0.95].
pub fn scene(height: usize, width: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let color = |rng: &mut ChaCha8Rng| [0; 3].map(|_| rng.random_range(0.1..0.9));
    let (top, bottom) = (color(&mut rng), color(&mut rng));
    enum Shape {
        Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
        Disc { cy: f64, cx: f64, r: f64 },
    }
    let shapes: Vec<(Shape, [f64; 3])> = (0..rng.random_range(3..7))
        .map(|_| {
            let (cy, cx) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
            let size = rng.random_range(0.08..0.35);
            let shape = if rng.random_bool(0.5) {
                Shape::Rect {
                    y0: cy - size,
                    x0: cx - size * rng.random_range(0.5..1.5),
                    y1: cy + size,
                    x1: cx + size,
                }
            } else {
                Shape::Disc { cy, cx, r: size }
            };
            (shape, color(&mut rng))
        })
        .collect();
    let freq = rng.random_range(4.0..12.0);
    Image::from_fn(height, width, |y, x, c| {
        let (v, u) = ((y as f64 + 0.5) / height as f64, (x as f64 + 0.5) / width as f64);
        let mut value = top[c] * (1.0 - v) + bottom[c] * v;
        for (shape, col) in &shapes {
            let inside = match *shape {
                Shape::Rect { y0, x0, y1, x1 } => v >= y0 && v <= y1 && u >= x0 && u <= x1,
                Shape::Disc { cy, cx, r } => (v - cy).powi(2) + (u - cx).powi(2) <= r * r,
            };
            if inside {
                value = col[c];
            }
        }
        value += 0.04 * (freq * u * std::f64::consts::TAU).sin() * (freq * v * std::f64::consts::PI).cos();
        value.clamp(0.05, 0.95)
    })
}

/// A clean image, its degraded counterpart, and what was applied.
#[derive(Clone, Debug)]
pub struct Pair {
    pub clean: Image,
    pub degraded: Image,
    pub spec: DegradationSpec,
}

/// `count` scene/degradation pairs; kinds cycle through `kinds`.
pub fn synthetic_pairs(count: usize, size: usize, kinds: &[DegradationKind], seed: u64) -> Result<Vec<Pair>> {
    if kinds.is_empty() {
        return Err(Error::Config("at least one degradation kind is required".into()));
    }
    (0..count)
        .into_par_iter()
        .map(|j| {
            let clean = scene(size, size, derive_seed(seed, 2 * j as u64));
            let spec = sample_spec(kinds[j % kinds.len()], derive_seed(seed, 2 * j as u64 + 1));
            let degraded = spec.apply(&clean)?;
            Ok(Pair { clean, degraded, spec })
        })
        .collect()
}

/// Draws the parameters of `kind` from a generator seeded by `seed`, which
/// also becomes the `DegradationSpec` seed.
pub fn sample_spec(kind: DegradationKind, seed: u64) -> DegradationSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DegradationSpec::new(kind.sample(&mut rng), seed)
}

/// Every clean scene degraded by every kind: `images × kinds` probes.
pub fn probe_set(images: usize, size: usize, kinds: &[DegradationKind], seed: u64) -> Result<Vec<(Image, DegradationKind)>> {
    let mut out = Vec::with_capacity(images * kinds.len());
    for j in 0..images {
        let clean = scene(size, size, derive_seed(seed, 2 * j as u64));
        for (k, &kind) in kinds.iter().enumerate() {
            let spec = sample_spec(kind, derive_seed(seed, (j * kinds.len() + k) as u64 * 2 + 1));
            out.push((spec.apply(&clean)?, kind));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub src: PathBuf,
    pub dst: PathBuf,
    #[serde(flatten)]
    pub spec: DegradationSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotation: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn degraded_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.spec.degradation != Degradation::None)
            .count()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(&e.dst) {
                return Err(Error::Input(format!("duplicate output path {}", e.dst.display())));
            }
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(reader: impl BufRead) -> Result<Self> {
        let mut entries = Vec::new();
        for line in reader.lines() {
            let line = line?;
            if !line.trim().is_empty() {
                entries.push(serde_json::from_str(&line)?);
            }
        }
        let m = Manifest { entries };
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(self.to_jsonl()?.as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = fs::File::open(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
        Self::from_jsonl(BufReader::new(f))
    }

    /// Writes every degraded image (in parallel; each entry is independent).
    pub fn materialize(&self, rain: &RainParams) -> Result<()> {
        self.entries.par_iter().try_for_each(|e| {
            let img = Image::load(&e.src)?;
            e.spec.apply_with(&img, rain)?.save(&e.dst)
        })
    }

    /// Loads (degraded, clean) pairs.
    pub fn load_pairs(&self) -> Result<Vec<Pair>> {
        self.entries
            .par_iter()
            .map(|e| {
                Ok(Pair {
                    clean: Image::load(&e.src)?,
                    degraded: Image::load(&e.dst)?,
                    spec: e.spec,
                })
            })
            .collect()
    }
}

/// PNG and PPM files directly inside `dir`, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = fs::read_dir(dir).map_err(|e| Error::Input(format!("{}: {e}", dir.display())))?;
    let mut files = Vec::new();
    for entry in rd {
        let path = entry?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if path.is_file() && matches!(ext.as_deref(), Some("png" | "ppm")) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Assigns specs to `sources`: `round(mix·N)` images (chosen by a seeded
/// shuffle) are degraded, cycling through `kinds`; the rest pass through.
pub fn plan_manifest(
    sources: &[PathBuf],
    out_dir: &Path,
    kinds: &[DegradationKind],
    mix: f64,
    seed: u64,
) -> Result<Manifest> {
    if sources.is_empty() {
        return Err(Error::Input("no source images".into()));
    }
    if !(0.0..=1.0).contains(&mix) {
        return Err(Error::Parameter(format!("mix {mix} outside [0, 1]")));
    }
    let degraded = (mix * sources.len() as f64).round() as usize;
    if degraded > 0 && kinds.is_empty() {
        return Err(Error::Config("at least one degradation kind is required".into()));
    }
    let mut order: Vec<usize> = (0..sources.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut assigned: Vec<Option<DegradationKind>> = vec![None; sources.len()];
    for (rank, &idx) in order.iter().take(degraded).enumerate() {
        assigned[idx] = Some(kinds[rank % kinds.len()]);
    }
    let entries = sources
        .iter()
        .zip(assigned)
        .enumerate()
        .map(|(i, (src, kind))| {
            let entry_seed = derive_seed(seed, i as u64);
            let spec = match kind {
                Some(k) => sample_spec(k, entry_seed),
                None => DegradationSpec::new(Degradation::None, entry_seed),
            };
            let stem = src.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
            let name = match kind {
                Some(k) => format!("{stem}_{k}.png"),
                None => format!("{stem}.png"),
            };
            ManifestEntry {
                src: src.clone(),
                dst: out_dir.join(name),
                spec,
                annotation: None,
            }
        })
        .collect();
    let m = Manifest { entries };
    m.validate()?;
    Ok(m)
}

/// [`plan_manifest`] over the images found in `src_dir`.
pub fn build_manifest(src_dir: &Path, out_dir: &Path, kinds: &[DegradationKind], mix: f64, seed: u64) -> Result<Manifest> {
    let sources = list_images(src_dir)?;
    if sources.is_empty() {
        return Err(Error::Input(format!("no PNG/PPM images in {}", src_dir.display())));
    }
    plan_manifest(&sources, out_dir, kinds, mix, seed)
}
