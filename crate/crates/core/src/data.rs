//! Multi-magnification data. The synthetic generator simulates objective
//! magnification the physical way: one procedural specimen field per sample,
//! a field-of-view crop whose side shrinks with magnification, then a resize
//! to the common output size. Class 0 is filled discs, class 1 is annuli with
//! the same outer radius and fill intensity, so the only reliable cue is
//! topology and it survives every scale.
//!
//! Also here: a magnification-tagged image-folder ingester, the stratified
//! 7:1:2 split, and bilinear resizing.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Mag {
    #[serde(rename = "40X")]
    X40,
    #[serde(rename = "100X")]
    X100,
    #[serde(rename = "200X")]
    X200,
    #[serde(rename = "400X")]
    X400,
}

impl Mag {
    pub const ALL: [Mag; 4] = [Mag::X40, Mag::X100, Mag::X200, Mag::X400];

    pub fn label(self) -> &'static str {
        match self {
            Mag::X40 => "40X",
            Mag::X100 => "100X",
            Mag::X200 => "200X",
            Mag::X400 => "400X",
        }
    }

    /// Field-of-view shrink factor relative to 40X.
    pub fn relative_scale(self) -> f64 {
        match self {
            Mag::X40 => 1.0,
            Mag::X100 => 2.5,
            Mag::X200 => 5.0,
            Mag::X400 => 10.0,
        }
    }

    pub fn index(self) -> usize {
        Mag::ALL.iter().position(|&m| m == self).unwrap()
    }

    pub fn parse(s: &str) -> Result<Mag> {
        let up = s.to_ascii_uppercase();
        Mag::ALL
            .into_iter()
            .find(|m| m.label() == up)
            .ok_or_else(|| Error::config("magnification", format!("unknown level '{s}' (expected 40X, 100X, 200X, 400X)")))
    }
}

impl std::fmt::Display for Mag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Clone, Debug)]
pub struct MagItem {
    /// [3, H, W], values in [0,1].
    pub image: Tensor<f32>,
    pub class_id: usize,
    pub mag: Mag,
    pub source_id: String,
}

#[derive(Clone, Debug)]
pub struct MagDataset {
    /// Always sorted by source_id, regardless of generation/load order.
    pub items: Vec<MagItem>,
    pub class_names: Vec<String>,
    pub image_size: (usize, usize),
}

impl MagDataset {
    /// Validates and sorts items into a dataset. Every image must share one
    /// shape and every class_id must index into class_names.
    pub fn assemble(mut items: Vec<MagItem>, class_names: Vec<String>) -> Result<MagDataset> {
        if items.is_empty() {
            return Err(Error::Empty { what: "dataset".into() });
        }
        items.sort_by(|a, b| a.source_id.cmp(&b.source_id));
        let shape = items[0].image.shape().to_vec();
        let image_size = (shape[1], shape[2]);
        for it in &items {
            let s = it.image.shape();
            if s != shape.as_slice() {
                return Err(Error::DataLayout {
                    detail: format!(
                        "image size mismatch: {} is {:?}, expected {:?}",
                        it.source_id, s, shape
                    ),
                });
            }
            if it.class_id >= class_names.len() {
                return Err(Error::DataLayout {
                    detail: format!("{}: class_id {} out of range", it.source_id, it.class_id),
                });
            }
        }
        Ok(MagDataset { items, class_names, image_size })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn filter_mag(&self, mag: Mag) -> MagDataset {
        MagDataset {
            items: self.items.iter().filter(|it| it.mag == mag).cloned().collect(),
            class_names: self.class_names.clone(),
            image_size: self.image_size,
        }
    }

    /// Stacks the given items into a batch tensor plus labels.
    pub fn stack(&self, indices: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        if indices.is_empty() {
            return Err(Error::Empty { what: "batch".into() });
        }
        let (h, w) = self.image_size;
        let per = 3 * h * w;
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let it = &self.items[i];
            data.extend_from_slice(it.image.data());
            labels.push(it.class_id);
        }
        Ok((Tensor::from_vec(&[indices.len(), 3, h, w], data)?, labels))
    }

    /// Content hash: class names, size, then every item's identity and pixels.
    /// Two runs may only be compared when their fingerprints agree.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for name in &self.class_names {
            h.update(name.as_bytes());
            h.update([0]);
        }
        h.update((self.image_size.0 as u64).to_le_bytes());
        h.update((self.image_size.1 as u64).to_le_bytes());
        for it in &self.items {
            h.update(it.source_id.as_bytes());
            h.update([0]);
            h.update((it.class_id as u64).to_le_bytes());
            h.update(it.mag.label().as_bytes());
            for &v in it.image.data() {
                h.update(v.to_le_bytes());
            }
        }
        crate::checkpoint::hex(&h.finalize())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GenConfig {
    pub seed: u64,
    pub per_class_per_mag: usize,
    pub out_size: usize,
    /// Class-1 count multiplier; 1.0 keeps the set balanced.
    pub imbalance: f64,
}

/// Specimen geometry, all in units of the output size so magnification
/// semantics hold for any `out_size` divisible by 4.
const FIELD_FACTOR: usize = 10;
const SHAPES_PER_AXIS: usize = 10;
const NOISE_SIGMA: f64 = crate::defaults::NOISE_SIGMA;
const RADIUS_JITTER: f64 = crate::defaults::RADIUS_JITTER;

pub fn generate_synthetic(seed: u64, per_class_per_mag: usize, out_size: usize) -> Result<MagDataset> {
    generate_with(&GenConfig { seed, per_class_per_mag, out_size, imbalance: 1.0 })
}

pub fn generate_with(cfg: &GenConfig) -> Result<MagDataset> {
    if cfg.out_size == 0 || cfg.out_size % 4 != 0 {
        return Err(Error::config("out_size", format!("{} is not divisible by 4", cfg.out_size)));
    }
    if cfg.per_class_per_mag == 0 {
        return Err(Error::config("per_class_per_mag", "must be >= 1"));
    }
    if !(cfg.imbalance > 0.0) {
        return Err(Error::config("imbalance", "must be positive"));
    }
    let class_names = vec!["discs".to_string(), "rings".to_string()];
    let count_for = |class_id: usize| -> usize {
        if class_id == 0 {
            cfg.per_class_per_mag
        } else {
            ((cfg.per_class_per_mag as f64 * cfg.imbalance).round() as usize).max(1)
        }
    };

    let mut jobs = Vec::new();
    for mag in Mag::ALL {
        for class_id in 0..2 {
            for idx in 0..count_for(class_id) {
                jobs.push((mag, class_id, idx));
            }
        }
    }
    let items: Vec<MagItem> = jobs
        .into_par_iter()
        .map(|(mag, class_id, idx)| {
            let image = render_sample(cfg, mag, class_id, idx);
            MagItem {
                image,
                class_id,
                mag,
                source_id: format!("{}/{}/{:05}.png", mag.label(), class_names[class_id], idx),
            }
        })
        .collect();
    MagDataset::assemble(items, class_names)
}

/// Stable per-sample seed; independent of generation order and thread count.
fn sample_seed(seed: u64, mag: Mag, class_id: usize, idx: usize) -> u64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for v in [mag.index() as u64 + 1, class_id as u64 + 1, idx as u64 + 1] {
        h ^= v.wrapping_mul(0xff51_afd7_ed55_8ccd);
        h = h.rotate_left(27).wrapping_mul(0xc4ce_b9fe_1a85_ec53);
        h ^= h >> 33;
    }
    h
}

struct Shape {
    cx: f32,
    cy: f32,
    r: f32,
    intensity: f32,
}

fn render_sample(cfg: &GenConfig, mag: Mag, class_id: usize, idx: usize) -> Tensor<f32> {
    let s = cfg.out_size;
    let field = (s * FIELD_FACTOR) as f32;
    let pitch = s as f32;
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, mag, class_id, idx));

    // Fixed draw order: background, tints, shapes, window, noise. Every draw
    // happens unconditionally so the stream never depends on the window.
    let a = rng.gen_range(0.1..0.4);
    let b = rng.gen_range(0.1..0.4);
    let (bg_lo, bg_hi) = if a <= b { (a, b) } else { (b, a) };
    let theta: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
    let bg_tint = [1.0f32, rng.gen_range(0.84..0.92), rng.gen_range(0.94..1.0)];
    let fg_tint = [1.0f32, rng.gen_range(0.70..0.80), rng.gen_range(0.86..0.94)];

    let base_r = 0.375 * pitch;
    let n = SHAPES_PER_AXIS;
    let mut shapes = Vec::with_capacity(n * n);
    for gy in 0..n {
        for gx in 0..n {
            let jx = rng.gen_range(-(3.0 * pitch / 32.0)..=(3.0 * pitch / 32.0));
            let jy = rng.gen_range(-(3.0 * pitch / 32.0)..=(3.0 * pitch / 32.0));
            let rf = rng.gen_range((1.0 - RADIUS_JITTER as f32)..=(1.0 + RADIUS_JITTER as f32));
            let intensity = rng.gen_range(0.6..0.9);
            shapes.push(Shape {
                cx: (gx as f32 + 0.5) * pitch + jx,
                cy: (gy as f32 + 0.5) * pitch + jy,
                r: base_r * rf,
                intensity,
            });
        }
    }

    // The window is centered near one shape so the class cue is always in
    // view even at the highest magnification.
    let win = ((s * FIELD_FACTOR) as f64 / mag.relative_scale()).round() as usize;
    let anchor = rng.gen_range(0..shapes.len());
    let jitter = win as f32 / 8.0;
    let wx = rng.gen_range(-jitter..=jitter) + shapes[anchor].cx;
    let wy = rng.gen_range(-jitter..=jitter) + shapes[anchor].cy;
    let x0 = (wx - win as f32 / 2.0).round().clamp(0.0, field - win as f32) as usize;
    let y0 = (wy - win as f32 / 2.0).round().clamp(0.0, field - win as f32) as usize;

    // Rasterize only the window. Background is a linear gradient over the
    // whole field, so high magnification sees a gentler slope.
    let mut img = vec![0.0f32; 3 * win * win];
    let (ct, st) = (theta.cos(), theta.sin());
    let corners = [
        0.0,
        ct * field,
        st * field,
        (ct + st) * field,
    ];
    let pmin = corners.iter().cloned().fold(f32::INFINITY, f32::min);
    let pmax = corners.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let span = (pmax - pmin).max(1e-6);
    for y in 0..win {
        for x in 0..win {
            let (ax, ay) = ((x0 + x) as f32 + 0.5, (y0 + y) as f32 + 0.5);
            let t = (ct * ax + st * ay - pmin) / span;
            let bg = bg_lo + (bg_hi - bg_lo) * t;
            for c in 0..3 {
                img[c * win * win + y * win + x] = bg * bg_tint[c];
            }
        }
    }
    let ring = class_id == 1;
    for sh in &shapes {
        let margin = sh.r + 1.5;
        if sh.cx + margin < x0 as f32
            || sh.cy + margin < y0 as f32
            || sh.cx - margin > (x0 + win) as f32
            || sh.cy - margin > (y0 + win) as f32
        {
            continue;
        }
        let r_in = 0.5 * sh.r;
        let xa = ((sh.cx - margin).floor().max(x0 as f32) as usize).saturating_sub(x0);
        let xb = (((sh.cx + margin).ceil() as usize).min(x0 + win)).saturating_sub(x0);
        let ya = ((sh.cy - margin).floor().max(y0 as f32) as usize).saturating_sub(y0);
        let yb = (((sh.cy + margin).ceil() as usize).min(y0 + win)).saturating_sub(y0);
        for y in ya..yb {
            for x in xa..xb {
                let (ax, ay) = ((x0 + x) as f32 + 0.5, (y0 + y) as f32 + 0.5);
                let d = ((ax - sh.cx).powi(2) + (ay - sh.cy).powi(2)).sqrt();
                let outer = (sh.r - d + 0.5).clamp(0.0, 1.0);
                let alpha = if ring { outer - (r_in - d + 0.5).clamp(0.0, 1.0) } else { outer };
                if alpha <= 0.0 {
                    continue;
                }
                for c in 0..3 {
                    let p = &mut img[c * win * win + y * win + x];
                    *p = *p * (1.0 - alpha) + sh.intensity * fg_tint[c] * alpha;
                }
            }
        }
    }

    let window = Tensor::from_vec(&[3, win, win], img).expect("window buffer");
    let mut out = resize(&window, s, s).expect("resize");
    for v in out.data_mut() {
        let eps: f64 = rng.sample(StandardNormal);
        *v = (*v + (NOISE_SIGMA * eps) as f32).clamp(0.0, 1.0);
    }
    out
}

/// Bilinear resize, channels independent, sample centers at
/// (i + 0.5) * scale - 0.5, coordinates clamped to the source extent.
/// Identity targets return the input bit-exactly.
pub fn resize(img: &Tensor<f32>, target_h: usize, target_w: usize) -> Result<Tensor<f32>> {
    let s = img.shape();
    if s.len() != 3 {
        return Err(Error::shape("resize", format!("need [C,H,W], got {s:?}")));
    }
    if target_h == 0 || target_w == 0 {
        return Err(Error::shape("resize", "target must be positive"));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    if (h, w) == (target_h, target_w) {
        return Ok(img.clone());
    }
    let sy = h as f32 / target_h as f32;
    let sx = w as f32 / target_w as f32;
    let mut out = vec![0.0f32; c * target_h * target_w];
    let src = img.data();
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * target_h * target_w..(ch + 1) * target_h * target_w];
        for oy in 0..target_h {
            let fy = ((oy as f32 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f32);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let wy = fy - y0 as f32;
            for ox in 0..target_w {
                let fx = ((ox as f32 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f32);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let wx = fx - x0 as f32;
                let top = plane[y0 * w + x0] * (1.0 - wx) + plane[y0 * w + x1] * wx;
                let bot = plane[y1 * w + x0] * (1.0 - wx) + plane[y1 * w + x1] * wx;
                dst[oy * target_w + ox] = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    Tensor::from_vec(&[c, target_h, target_w], out)
}

/// Resizes every image; used to deliver fixed-resolution families their
/// trained size when the stored data differs.
pub fn resize_dataset(ds: &MagDataset, target_h: usize, target_w: usize) -> Result<MagDataset> {
    if ds.image_size == (target_h, target_w) {
        return Ok(ds.clone());
    }
    let items = ds
        .items
        .iter()
        .map(|it| -> Result<MagItem> {
            Ok(MagItem { image: resize(&it.image, target_h, target_w)?, ..it.clone() })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MagDataset { items, class_names: ds.class_names.clone(), image_size: (target_h, target_w) })
}

#[derive(Clone, Copy, Debug)]
pub struct SplitSpec {
    pub seed: u64,
}

/// Stratified 7:1:2 split per (magnification, class). Each stratum is
/// shuffled by its own seeded generator, then cut with floor rounding and the
/// remainder assigned to train.
pub fn split(ds: &MagDataset, spec: SplitSpec) -> Result<(MagDataset, MagDataset, MagDataset)> {
    if ds.is_empty() {
        return Err(Error::Empty { what: "dataset to split".into() });
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    for mag in Mag::ALL {
        for class_id in 0..ds.class_names.len() {
            let mut stratum: Vec<&MagItem> = ds
                .items
                .iter()
                .filter(|it| it.mag == mag && it.class_id == class_id)
                .collect();
            if stratum.is_empty() {
                continue;
            }
            let n = stratum.len();
            if n < 5 {
                log::warn!(
                    "stratum {}/{} has only {n} items; test split may be empty",
                    mag.label(),
                    ds.class_names[class_id]
                );
            }
            let mut rng =
                ChaCha8Rng::seed_from_u64(sample_seed(spec.seed, mag, class_id, 0x5117));
            stratum.shuffle(&mut rng);
            let n_val = n / 10;
            let n_test = n / 5;
            let n_train = n - n_val - n_test;
            for (i, it) in stratum.into_iter().enumerate() {
                if i < n_train {
                    train.push(it.clone());
                } else if i < n_train + n_val {
                    val.push(it.clone());
                } else {
                    test.push(it.clone());
                }
            }
        }
    }
    let names = ds.class_names.clone();
    Ok((
        MagDataset::assemble(train, names.clone())?,
        if val.is_empty() {
            MagDataset { items: Vec::new(), class_names: names.clone(), image_size: ds.image_size }
        } else {
            MagDataset::assemble(val, names.clone())?
        },
        if test.is_empty() {
            MagDataset { items: Vec::new(), class_names: names.clone(), image_size: ds.image_size }
        } else {
            MagDataset::assemble(test, names)?
        },
    ))
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    class_names: Vec<String>,
    image_size: (usize, usize),
    counts: BTreeMap<String, BTreeMap<String, usize>>,
    magnifications: Vec<MagEntry>,
    #[serde(skip_serializing_if = "Option::is_none")]
    generator: Option<GenConfig>,
}

#[derive(Serialize, Deserialize)]
struct MagEntry {
    label: String,
    relative_scale: f64,
}

/// Writes `root/<MAG>/<class>/<name>.png` plus `root/manifest.json`.
/// Pixels quantize to 8 bits; identical datasets produce identical bytes.
pub fn save_dataset(root: impl AsRef<Path>, ds: &MagDataset, gen: Option<&GenConfig>) -> Result<()> {
    let root = root.as_ref();
    let mut counts: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
    for it in &ds.items {
        let dir = root.join(it.mag.label()).join(&ds.class_names[it.class_id]);
        fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        let (h, w) = (it.image.shape()[1], it.image.shape()[2]);
        let data = it.image.data();
        let mut buf = image::RgbImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let px = |c: usize| (data[c * h * w + y * w + x].clamp(0.0, 1.0) * 255.0).round() as u8;
                buf.put_pixel(x as u32, y as u32, image::Rgb([px(0), px(1), px(2)]));
            }
        }
        let name = Path::new(&it.source_id)
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("{}.png", counts.len()));
        let path = dir.join(name);
        buf.save(&path)
            .map_err(|e| Error::Image { path: path.display().to_string(), detail: e.to_string() })?;
        *counts
            .entry(it.mag.label().to_string())
            .or_default()
            .entry(ds.class_names[it.class_id].clone())
            .or_default() += 1;
    }
    let manifest = Manifest {
        class_names: ds.class_names.clone(),
        image_size: ds.image_size,
        counts,
        magnifications: Mag::ALL
            .into_iter()
            .map(|m| MagEntry { label: m.label().to_string(), relative_scale: m.relative_scale() })
            .collect(),
        generator: gen.cloned(),
    };
    let path = root.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Json { path: path.display().to_string(), source: e })?;
    fs::write(&path, json).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

/// Loads `root/<MAG>/<class_name>/<image>`. Class ids follow lexicographic
/// class-name order; regular files at the root (the manifest) are ignored,
/// but an unknown directory is an error, not a silent skip.
pub fn load_image_folder(root: impl AsRef<Path>) -> Result<MagDataset> {
    let root = root.as_ref();
    let rd = fs::read_dir(root).map_err(|e| Error::io(root.display().to_string(), e))?;
    let mut mag_dirs = Vec::new();
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(root.display().to_string(), e))?;
        let path = entry.path();
        if !path.is_dir() {
            continue;
        }
        let name = entry.file_name().to_string_lossy().into_owned();
        let mag = Mag::parse(&name).map_err(|_| Error::DataLayout {
            detail: format!("unknown magnification directory '{name}' under {}", root.display()),
        })?;
        mag_dirs.push((mag, path));
    }
    if mag_dirs.is_empty() {
        return Err(Error::DataLayout { detail: format!("no magnification directories in {}", root.display()) });
    }
    mag_dirs.sort_by_key(|(m, _)| m.index());

    let mut class_set = std::collections::BTreeSet::new();
    let mut files: Vec<(Mag, String, std::path::PathBuf)> = Vec::new();
    for (mag, dir) in &mag_dirs {
        let rd = fs::read_dir(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        for entry in rd {
            let entry = entry.map_err(|e| Error::io(dir.display().to_string(), e))?;
            let cpath = entry.path();
            if !cpath.is_dir() {
                continue;
            }
            let class = entry.file_name().to_string_lossy().into_owned();
            class_set.insert(class.clone());
            let mut any = false;
            let crd = fs::read_dir(&cpath).map_err(|e| Error::io(cpath.display().to_string(), e))?;
            let mut imgs: Vec<std::path::PathBuf> = Vec::new();
            for f in crd {
                let f = f.map_err(|e| Error::io(cpath.display().to_string(), e))?;
                if f.path().is_file() {
                    imgs.push(f.path());
                    any = true;
                }
            }
            if !any {
                return Err(Error::DataLayout {
                    detail: format!("class directory {} contains no images", cpath.display()),
                });
            }
            imgs.sort();
            for p in imgs {
                files.push((*mag, class.clone(), p));
            }
        }
    }
    let class_names: Vec<String> = class_set.into_iter().collect();
    if class_names.is_empty() {
        return Err(Error::DataLayout { detail: format!("no class directories in {}", root.display()) });
    }

    let items: Vec<MagItem> = files
        .into_par_iter()
        .map(|(mag, class, path)| -> Result<MagItem> {
            let img = image::open(&path)
                .map_err(|e| Error::Image { path: path.display().to_string(), detail: e.to_string() })?
                .to_rgb8();
            let (w, h) = (img.width() as usize, img.height() as usize);
            let mut data = vec![0.0f32; 3 * h * w];
            for y in 0..h {
                for x in 0..w {
                    let p = img.get_pixel(x as u32, y as u32);
                    for c in 0..3 {
                        data[c * h * w + y * w + x] = p.0[c] as f32 / 255.0;
                    }
                }
            }
            let class_id = class_names.binary_search(&class).expect("class in set");
            let rel = path
                .strip_prefix(root)
                .map(|p| p.to_string_lossy().replace('\\', "/"))
                .unwrap_or_else(|_| path.display().to_string());
            Ok(MagItem { image: Tensor::from_vec(&[3, h, w], data)?, class_id, mag, source_id: rel })
        })
        .collect::<Result<_>>()?;
    MagDataset::assemble(items, class_names)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mag_table_is_fixed_and_increasing() {
        assert_eq!(Mag::ALL.len(), 4);
        let labels: Vec<_> = Mag::ALL.iter().map(|m| m.label()).collect();
        assert_eq!(labels, ["40X", "100X", "200X", "400X"]);
        let scales: Vec<_> = Mag::ALL.iter().map(|m| m.relative_scale()).collect();
        assert_eq!(scales, [1.0, 2.5, 5.0, 10.0]);
        assert!(scales.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(Mag::parse("100x").unwrap(), Mag::X100);
        assert!(Mag::parse("50X").is_err());
    }

    #[test]
    fn resize_identity_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = Tensor::<f32>::from_fn(&[3, 7, 5], |_| rng.gen_range(0.0..1.0));
        let out = resize(&img, 7, 5).unwrap();
        assert_eq!(out.data(), img.data());
    }

    #[test]
    fn resize_of_constant_is_constant() {
        let img = Tensor::<f32>::full(&[3, 4, 4], 0.37);
        for (h, w) in [(2, 2), (8, 8), (5, 9)] {
            let out = resize(&img, h, w).unwrap();
            for &v in out.data() {
                assert!((v - 0.37).abs() < 1e-6);
            }
        }
    }

    // 2x upscale of a [[0,1],[0,1]] column pattern under the stated center
    // convention gives the profile [0, 0.25, 0.75, 1] in every output row.
    #[test]
    fn resize_matches_hand_evaluated_bilinear_profile() {
        let img = Tensor::<f32>::from_vec(&[1, 2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let mut rgb = Tensor::<f32>::zeros(&[3, 2, 2]);
        for c in 0..3 {
            rgb.data_mut()[c * 4..(c + 1) * 4].copy_from_slice(img.data());
        }
        let out = resize(&rgb, 4, 4).unwrap();
        for c in 0..3 {
            for y in 0..4 {
                let row = &out.data()[c * 16 + y * 4..c * 16 + y * 4 + 4];
                let want = [0.0, 0.25, 0.75, 1.0];
                for (a, b) in row.iter().zip(want) {
                    assert!((a - b).abs() < 1e-6, "row {row:?}");
                }
            }
        }
    }

    #[test]
    fn generation_is_deterministic_and_counts_match() {
        let a = generate_synthetic(7, 3, 32).unwrap();
        let b = generate_synthetic(7, 3, 32).unwrap();
        assert_eq!(a.len(), 3 * 2 * 4);
        assert_eq!(a.class_names, ["discs", "rings"]);
        for (x, y) in a.items.iter().zip(&b.items) {
            assert_eq!(x.source_id, y.source_id);
            assert_eq!(x.image.data(), y.image.data(), "{}", x.source_id);
        }
        let c = generate_synthetic(8, 3, 32).unwrap();
        assert!(a.items.iter().zip(&c.items).any(|(x, y)| x.image.data() != y.image.data()));
    }

    #[test]
    fn pixels_stay_in_unit_range() {
        let ds = generate_synthetic(3, 2, 32).unwrap();
        for it in &ds.items {
            assert_eq!(it.image.shape(), &[3, 32, 32]);
            for &v in it.image.data() {
                assert!((0.0..=1.0).contains(&v), "{}: {v}", it.source_id);
            }
        }
    }

    // The discriminative cue: at 400X the window is centered near a shape, so
    // discs are bright at center while rings show the dark hole. Compare the
    // center patch mean against the class average rather than per sample.
    #[test]
    fn class_cue_is_visible_at_every_magnification() {
        let ds = generate_synthetic(11, 12, 64).unwrap();
        for mag in [Mag::X400, Mag::X200] {
            let center_mean = |it: &MagItem| {
                let d = it.image.data();
                let (h, w) = (64, 64);
                let mut acc = 0.0f32;
                let mut n = 0;
                for y in h / 2 - 4..h / 2 + 4 {
                    for x in w / 2 - 4..w / 2 + 4 {
                        acc += d[y * w + x];
                        n += 1;
                    }
                }
                acc / n as f32
            };
            let part = ds.filter_mag(mag);
            let m0: f32 = part.items.iter().filter(|i| i.class_id == 0).map(center_mean).sum::<f32>() / 12.0;
            let m1: f32 = part.items.iter().filter(|i| i.class_id == 1).map(center_mean).sum::<f32>() / 12.0;
            assert!(
                m0 > m1 + 0.05,
                "{}: disc centers {m0} vs ring centers {m1}",
                mag.label()
            );
        }
    }

    #[test]
    fn imbalance_changes_only_class_one_counts() {
        let ds = generate_with(&GenConfig { seed: 1, per_class_per_mag: 10, out_size: 32, imbalance: 0.5 })
            .unwrap();
        for mag in Mag::ALL {
            let part = ds.filter_mag(mag);
            let c0 = part.items.iter().filter(|i| i.class_id == 0).count();
            let c1 = part.items.iter().filter(|i| i.class_id == 1).count();
            assert_eq!((c0, c1), (10, 5), "{}", mag.label());
        }
    }

    fn single_stratum(n: usize) -> MagDataset {
        let items = (0..n)
            .map(|i| MagItem {
                image: Tensor::full(&[3, 4, 4], 0.5),
                class_id: 0,
                mag: Mag::X40,
                source_id: format!("40X/a/{i:05}"),
            })
            .collect();
        MagDataset::assemble(items, vec!["a".into(), "b".into()]).unwrap()
    }

    #[test]
    fn split_ratios_follow_floor_rule_with_remainder_to_train() {
        for (n, want) in [(10usize, (7, 1, 2)), (9, (8, 0, 1)), (1000, (700, 100, 200)), (3, (3, 0, 0))] {
            let ds = single_stratum(n);
            let (tr, va, te) = split(&ds, SplitSpec { seed: 0 }).unwrap();
            assert_eq!((tr.len(), va.len(), te.len()), want, "n = {n}");
        }
    }

    #[test]
    fn split_partitions_and_stratifies() {
        let ds = generate_synthetic(5, 10, 32).unwrap();
        let (tr, va, te) = split(&ds, SplitSpec { seed: 9 }).unwrap();
        let mut ids: Vec<&str> = tr
            .items
            .iter()
            .chain(&va.items)
            .chain(&te.items)
            .map(|i| i.source_id.as_str())
            .collect();
        ids.sort();
        let mut all: Vec<&str> = ds.items.iter().map(|i| i.source_id.as_str()).collect();
        all.sort();
        assert_eq!(ids.len(), ds.len());
        assert_eq!(ids, all);
        for mag in Mag::ALL {
            for class in 0..2 {
                let count = |d: &MagDataset| {
                    d.items.iter().filter(|i| i.mag == mag && i.class_id == class).count()
                };
                assert_eq!((count(&tr), count(&va), count(&te)), (7, 1, 2), "{}", mag.label());
            }
        }
        let (tr2, _, _) = split(&ds, SplitSpec { seed: 9 }).unwrap();
        let a: Vec<_> = tr.items.iter().map(|i| &i.source_id).collect();
        let b: Vec<_> = tr2.items.iter().map(|i| &i.source_id).collect();
        assert_eq!(a, b, "same seed must split identically");
    }

    #[test]
    fn save_then_load_round_trips_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_synthetic(2, 2, 16).unwrap();
        save_dataset(dir.path(), &ds, None).unwrap();
        let loaded = load_image_folder(dir.path()).unwrap();
        assert_eq!(loaded.len(), ds.len());
        assert_eq!(loaded.class_names, ds.class_names);
        assert_eq!(loaded.image_size, ds.image_size);
        for (a, b) in ds.items.iter().zip(&loaded.items) {
            assert_eq!(a.source_id, b.source_id);
            assert_eq!(a.mag, b.mag);
            assert_eq!(a.class_id, b.class_id);
            for (x, y) in a.image.data().iter().zip(b.image.data()) {
                assert!((x - y).abs() <= 0.5 / 255.0 + 1e-6, "{}: {x} vs {y}", a.source_id);
            }
        }
    }

    #[test]
    fn saving_twice_is_byte_identical() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let gen = GenConfig { seed: 4, per_class_per_mag: 2, out_size: 16, imbalance: 1.0 };
        let ds = generate_with(&gen).unwrap();
        save_dataset(d1.path(), &ds, Some(&gen)).unwrap();
        save_dataset(d2.path(), &ds, Some(&gen)).unwrap();
        let h = |p: &Path| crate::checkpoint::file_sha256(p).unwrap();
        assert_eq!(h(&d1.path().join("manifest.json")), h(&d2.path().join("manifest.json")));
        assert_eq!(
            h(&d1.path().join("40X/discs/00000.png")),
            h(&d2.path().join("40X/discs/00000.png"))
        );
    }

    #[test]
    fn loader_rejects_layout_violations() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_synthetic(1, 1, 16).unwrap();
        save_dataset(dir.path(), &ds, None).unwrap();

        fs::create_dir(dir.path().join("50X")).unwrap();
        let err = load_image_folder(dir.path()).err().expect("junk dir must fail");
        assert!(err.to_string().contains("50X"), "{err}");
        fs::remove_dir(dir.path().join("50X")).unwrap();

        fs::create_dir(dir.path().join("40X/empty_class")).unwrap();
        assert!(load_image_folder(dir.path()).is_err());
        fs::remove_dir(dir.path().join("40X/empty_class")).unwrap();

        fs::write(dir.path().join("40X/discs/bad.png"), b"not a png").unwrap();
        let err = load_image_folder(dir.path()).err().expect("garbage image must fail");
        assert!(err.to_string().contains("bad.png"), "{err}");
    }

    #[test]
    fn loader_assigns_class_ids_lexicographically() {
        let dir = tempfile::tempdir().unwrap();
        let img = image::RgbImage::from_pixel(4, 4, image::Rgb([128, 128, 128]));
        for class in ["malignant", "benign"] {
            let d = dir.path().join("40X").join(class);
            fs::create_dir_all(&d).unwrap();
            img.save(d.join("x.png")).unwrap();
        }
        let ds = load_image_folder(dir.path()).unwrap();
        assert_eq!(ds.class_names, ["benign", "malignant"]);
        for it in &ds.items {
            let want = if it.source_id.contains("benign") { 0 } else { 1 };
            assert_eq!(it.class_id, want, "{}", it.source_id);
        }
        assert!((ds.items[0].image.data()[0] - 128.0 / 255.0).abs() < 1e-6);
    }

    #[test]
    fn fingerprint_tracks_content() {
        let a = generate_synthetic(1, 2, 16).unwrap();
        let b = generate_synthetic(1, 2, 16).unwrap();
        let c = generate_synthetic(2, 2, 16).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn invalid_generation_configs_are_rejected() {
        assert!(generate_synthetic(0, 1, 63).is_err());
        assert!(generate_synthetic(0, 0, 64).is_err());
        assert!(generate_with(&GenConfig { seed: 0, per_class_per_mag: 1, out_size: 64, imbalance: 0.0 }).is_err());
    }
}
