//! Synthetic blob scenes with edge, segmentation, distance-field and count
//! targets, plus a PNG/JSON manifest format for datasets on disk.
//!
//! The four targets need features of increasing depth: edges are a local
//! derivative, segmentation needs shape context, the distance field needs
//! object centers over a wide receptive field, and the count label needs a
//! global, nonlinear summary. Blob areas are scaled so the total painted area
//! does not depend on the count, which keeps the label out of reach of a
//! pooled linear filter.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlobKind {
    Disc,
    Rectangle,
}

impl BlobKind {
    pub fn class_id(self) -> usize {
        match self {
            BlobKind::Disc => 1,
            BlobKind::Rectangle => 2,
        }
    }
}

pub const SEGMENTATION_CLASSES: usize = 3;
pub const EDGE_THRESHOLD: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub size: usize,
    pub channels: usize,
    pub min_blobs: usize,
    pub max_blobs: usize,
    pub kinds: Vec<BlobKind>,
    /// Standard deviation of the additive Gaussian background noise.
    pub noise: f64,
    /// Label is 1 iff the blob count is at least this.
    pub class_threshold: usize,
    /// Expected painted area as a fraction of the image, split across blobs.
    pub area_fraction: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            size: 32,
            channels: 1,
            min_blobs: 1,
            max_blobs: 4,
            kinds: vec![BlobKind::Disc, BlobKind::Rectangle],
            noise: 0.05,
            class_threshold: 3,
            area_fraction: 0.15,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size < 8 {
            return Err(Error::InvalidArgument(format!(
                "scene size must be >= 8, got {}",
                self.size
            )));
        }
        if self.min_blobs > self.max_blobs {
            return Err(Error::InvalidArgument("blob count range is empty".into()));
        }
        if self.kinds.is_empty() || self.channels == 0 {
            return Err(Error::InvalidArgument(
                "scene needs at least one blob kind and one channel".into(),
            ));
        }
        if !(self.noise >= 0.0) || !(self.area_fraction > 0.0) {
            return Err(Error::InvalidArgument(
                "noise must be >= 0 and area_fraction > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Axis-aligned blob; for discs `half_h == half_w` is the radius.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub kind: BlobKind,
    pub cy: f64,
    pub cx: f64,
    pub half_h: f64,
    pub half_w: f64,
    pub intensity: f64,
}

impl Blob {
    /// Pixel `(y, x)` is covered iff its center lies inside the blob.
    pub fn covers(&self, y: usize, x: usize) -> bool {
        let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
        let (dy, dx) = (py - self.cy, px - self.cx);
        match self.kind {
            BlobKind::Disc => dy * dy + dx * dx <= self.half_h * self.half_h,
            BlobKind::Rectangle => dy.abs() <= self.half_h && dx.abs() <= self.half_w,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Which target of a sample a task reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetKey {
    Edge,
    Segmentation,
    Distance,
    #[serde(alias = "classification")]
    Label,
}

impl TargetKey {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "edge" => Ok(TargetKey::Edge),
            "segmentation" => Ok(TargetKey::Segmentation),
            "distance" => Ok(TargetKey::Distance),
            "label" | "classification" => Ok(TargetKey::Label),
            _ => Err(Error::UnknownTask(s.to_owned())),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TargetKey::Edge => "edge",
            TargetKey::Segmentation => "segmentation",
            TargetKey::Distance => "distance",
            TargetKey::Label => "classification",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[C, H, W]` in `[0, 1]`.
    pub image: Tensor,
    /// `[1, H, W]`, values in {0, 1}.
    pub edge: Option<Tensor>,
    /// `[H, W]` class ids.
    pub segmentation: Option<Tensor>,
    /// `[1, H, W]` in `[0, 1]`.
    pub distance: Option<Tensor>,
    pub label: Option<f64>,
}

impl Sample {
    pub fn has_target(&self, key: TargetKey) -> bool {
        match key {
            TargetKey::Edge => self.edge.is_some(),
            TargetKey::Segmentation => self.segmentation.is_some(),
            TargetKey::Distance => self.distance.is_some(),
            TargetKey::Label => self.label.is_some(),
        }
    }

    pub fn spatial(&self) -> (usize, usize) {
        let s = self.image.shape();
        (s[1], s[2])
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub splits: Vec<Split>,
    pub warnings: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.splits
            .iter()
            .enumerate()
            .filter(|(_, &s)| s == split)
            .map(|(i, _)| i)
            .collect()
    }
}

/// 80/10/10 split keyed on a hash of the sample index.
pub fn split_for_index(index: usize) -> Split {
    // splitmix64 finalizer
    let mut z = (index as u64).wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    match z % 10 {
        0..=7 => Split::Train,
        8 => Split::Val,
        _ => Split::Test,
    }
}

/// Draws the blob layout of one scene.
pub fn sample_blobs<R: Rng>(config: &SceneConfig, rng: &mut R) -> Vec<Blob> {
    let count = rng.gen_range(config.min_blobs..=config.max_blobs);
    let size = config.size as f64;
    let mut blobs = Vec::with_capacity(count);
    for _ in 0..count {
        let kind = config.kinds[rng.gen_range(0..config.kinds.len())];
        let area = config.area_fraction * size * size / count as f64 * rng.gen_range(0.8..1.2);
        let (half_h, half_w) = match kind {
            BlobKind::Disc => {
                let r = (area / std::f64::consts::PI).sqrt();
                (r, r)
            }
            BlobKind::Rectangle => {
                let aspect: f64 = rng.gen_range(0.6..1.6);
                let w = (area * aspect).sqrt();
                (area / w / 2.0, w / 2.0)
            }
        };
        let cy = rng.gen_range(1.0..size - 1.0);
        let cx = rng.gen_range(1.0..size - 1.0);
        let intensity = rng.gen_range(0.4..1.0);
        blobs.push(Blob {
            kind,
            cy,
            cx,
            half_h,
            half_w,
            intensity,
        });
    }
    blobs
}

/// Noise-free scene: clipped sum of blob intensities.
pub fn clean_scene(size: usize, blobs: &[Blob]) -> Vec<f64> {
    let mut scene = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let v: f64 = blobs.iter().filter(|b| b.covers(y, x)).map(|b| b.intensity).sum();
            scene[y * size + x] = v.min(1.0);
        }
    }
    scene
}

/// Central-difference gradient magnitude (replicated borders) above threshold.
pub fn edge_map(scene: &[f64], size: usize) -> Vec<f64> {
    let at = |y: isize, x: isize| {
        let cy = y.clamp(0, size as isize - 1) as usize;
        let cx = x.clamp(0, size as isize - 1) as usize;
        scene[cy * size + cx]
    };
    let mut out = vec![0.0; size * size];
    for y in 0..size as isize {
        for x in 0..size as isize {
            let gx = (at(y, x + 1) - at(y, x - 1)) / 2.0;
            let gy = (at(y + 1, x) - at(y - 1, x)) / 2.0;
            if (gx * gx + gy * gy).sqrt() > EDGE_THRESHOLD {
                out[y as usize * size + x as usize] = 1.0;
            }
        }
    }
    out
}

/// Renders targets for an explicit blob layout. `noise_rng` drives the
/// background noise; pass `None` for a clean image.
pub fn render_sample<R: Rng>(config: &SceneConfig, blobs: &[Blob], noise_rng: Option<&mut R>) -> Result<Sample> {
    let n = config.size;
    let scene = clean_scene(n, blobs);

    let mut image = Vec::with_capacity(config.channels * n * n);
    match noise_rng {
        Some(rng) => {
            for _ in 0..config.channels {
                for &v in &scene {
                    let eps: f64 = rng.sample(StandardNormal);
                    image.push((v + config.noise * eps).clamp(0.0, 1.0));
                }
            }
        }
        None => {
            for _ in 0..config.channels {
                image.extend_from_slice(&scene);
            }
        }
    }

    let mut seg = vec![0.0; n * n];
    for b in blobs {
        for y in 0..n {
            for x in 0..n {
                if b.covers(y, x) {
                    seg[y * n + x] = b.kind.class_id() as f64;
                }
            }
        }
    }

    let diag = ((n * n + n * n) as f64).sqrt();
    let mut dist = vec![0.0; n * n];
    if !blobs.is_empty() {
        for y in 0..n {
            for x in 0..n {
                let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
                let d = blobs
                    .iter()
                    .map(|b| ((py - b.cy).powi(2) + (px - b.cx).powi(2)).sqrt())
                    .fold(f64::INFINITY, f64::min);
                dist[y * n + x] = (1.0 - d / diag).clamp(0.0, 1.0);
            }
        }
    }

    Ok(Sample {
        image: Tensor::new(vec![config.channels, n, n], image)?,
        edge: Some(Tensor::new(vec![1, n, n], edge_map(&scene, n))?),
        segmentation: Some(Tensor::new(vec![n, n], seg)?),
        distance: Some(Tensor::new(vec![1, n, n], dist)?),
        label: Some(if blobs.len() >= config.class_threshold { 1.0 } else { 0.0 }),
    })
}

/// `n` samples, a pure function of `(config, seed, n)`. Sample `i` depends
/// only on `(config, seed, i)`, so smaller datasets are prefixes of larger ones.
pub fn generate_dataset(config: &SceneConfig, seed: u64, n: usize) -> Result<Dataset> {
    config.validate()?;
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let blobs = sample_blobs(config, &mut rng);
        samples.push(render_sample(config, &blobs, Some(&mut rng))?);
    }
    Ok(Dataset {
        samples,
        splits: (0..n).map(split_for_index).collect(),
        warnings: Vec::new(),
    })
}

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestTask {
    pub name: String,
    pub kind: String,
    pub target_suffix: String,
}

/// A target is either a file path or, for label tasks, an inline value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TargetRef {
    Path(String),
    Value(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestSample {
    pub image: String,
    pub targets: BTreeMap<String, TargetRef>,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub tasks: Vec<ManifestTask>,
    pub samples: Vec<ManifestSample>,
}

fn write_png_u8(path: &Path, w: usize, h: usize, data: Vec<u8>) -> Result<()> {
    let img: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(w as u32, h as u32, data).expect("buffer sized to image");
    img.save(path).map_err(|e| Error::Image {
        path: path.to_owned(),
        message: e.to_string(),
    })
}

fn write_png_u16(path: &Path, w: usize, h: usize, data: Vec<u16>) -> Result<()> {
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(w as u32, h as u32, data).expect("buffer sized to image");
    img.save(path).map_err(|e| Error::Image {
        path: path.to_owned(),
        message: e.to_string(),
    })
}

fn default_tasks() -> Vec<ManifestTask> {
    [
        (TargetKey::Edge, "_edge.png"),
        (TargetKey::Segmentation, "_seg.png"),
        (TargetKey::Distance, "_dist.png"),
        (TargetKey::Label, ""),
    ]
    .into_iter()
    .map(|(k, suffix)| ManifestTask {
        name: k.as_str().to_owned(),
        kind: k.as_str().to_owned(),
        target_suffix: suffix.to_owned(),
    })
    .collect()
}

/// Writes single-channel samples as PNGs plus `manifest.json` into `dir`.
/// Images, edges and segmentation ids are 8-bit; distance fields 16-bit.
pub fn export_dataset(dataset: &Dataset, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut samples = Vec::with_capacity(dataset.len());
    for (i, s) in dataset.samples.iter().enumerate() {
        if s.image.shape()[0] != 1 {
            return Err(Error::InvalidArgument(
                "only single-channel images can be exported".into(),
            ));
        }
        let (h, w) = s.spatial();
        let stem = format!("{i:06}");
        let image_name = format!("{stem}.png");
        let to_u8 = |t: &Tensor| t.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        write_png_u8(&dir.join(&image_name), w, h, to_u8(&s.image))?;

        let mut targets = BTreeMap::new();
        if let Some(e) = &s.edge {
            let name = format!("{stem}_edge.png");
            write_png_u8(&dir.join(&name), w, h, to_u8(e))?;
            targets.insert("edge".to_owned(), TargetRef::Path(name));
        }
        if let Some(seg) = &s.segmentation {
            let name = format!("{stem}_seg.png");
            write_png_u8(&dir.join(&name), w, h, seg.data().iter().map(|&v| v as u8).collect())?;
            targets.insert("segmentation".to_owned(), TargetRef::Path(name));
        }
        if let Some(d) = &s.distance {
            let name = format!("{stem}_dist.png");
            let data = d.data().iter().map(|v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16).collect();
            write_png_u16(&dir.join(&name), w, h, data)?;
            targets.insert("distance".to_owned(), TargetRef::Path(name));
        }
        if let Some(l) = s.label {
            targets.insert("classification".to_owned(), TargetRef::Value(l));
        }
        samples.push(ManifestSample {
            image: image_name,
            targets,
            split: dataset.splits.get(i).copied().unwrap_or_else(|| split_for_index(i)),
        });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        tasks: default_tasks(),
        samples,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_owned()));
    }
    image::open(path).map_err(|e| Error::Image {
        path: path.to_owned(),
        message: e.to_string(),
    })
}

fn check_dims(path: &Path, img: &image::DynamicImage, h: usize, w: usize) -> Result<()> {
    if img.height() as usize != h || img.width() as usize != w {
        return Err(Error::Shape(format!(
            "{} is {}x{} but the image is {h}x{w}",
            path.display(),
            img.height(),
            img.width()
        )));
    }
    Ok(())
}

/// Reads a dataset from a manifest; relative paths resolve against the
/// manifest's directory.
pub fn load_manifest(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::InvalidArgument(format!(
            "unsupported manifest version {}",
            manifest.version
        )));
    }
    let mut kinds: BTreeMap<&str, TargetKey> = BTreeMap::new();
    for t in &manifest.tasks {
        kinds.insert(t.name.as_str(), TargetKey::parse(&t.kind)?);
    }
    let root = path.parent().unwrap_or_else(|| Path::new("."));

    let mut dataset = Dataset::default();
    if manifest.samples.is_empty() {
        dataset.warnings.push(format!("{} lists no samples", path.display()));
    }
    for entry in &manifest.samples {
        let image_path = root.join(&entry.image);
        let img = open_image(&image_path)?.to_luma8();
        let (h, w) = (img.height() as usize, img.width() as usize);
        let image = Tensor::new(
            vec![1, h, w],
            img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
        )?;
        let mut sample = Sample {
            image,
            edge: None,
            segmentation: None,
            distance: None,
            label: None,
        };
        for (task, target) in &entry.targets {
            let key = *kinds
                .get(task.as_str())
                .ok_or_else(|| Error::UnknownTask(task.clone()))?;
            match (key, target) {
                (TargetKey::Label, TargetRef::Value(v)) => sample.label = Some(*v),
                (TargetKey::Label, TargetRef::Path(_)) | (_, TargetRef::Value(_)) => {
                    return Err(Error::InvalidArgument(format!(
                        "target `{task}` has the wrong form for a {} task",
                        key.as_str()
                    )))
                }
                (key, TargetRef::Path(p)) => {
                    let tp = root.join(p);
                    let dynimg = open_image(&tp)?;
                    check_dims(&tp, &dynimg, h, w)?;
                    match key {
                        TargetKey::Edge => {
                            let d = dynimg.to_luma8().into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
                            sample.edge = Some(Tensor::new(vec![1, h, w], d)?);
                        }
                        TargetKey::Segmentation => {
                            let d = dynimg.to_luma8().into_raw().into_iter().map(|v| v as f64).collect();
                            sample.segmentation = Some(Tensor::new(vec![h, w], d)?);
                        }
                        TargetKey::Distance => {
                            let d = dynimg.to_luma16().into_raw().into_iter().map(|v| v as f64 / 65535.0).collect();
                            sample.distance = Some(Tensor::new(vec![1, h, w], d)?);
                        }
                        TargetKey::Label => unreachable!(),
                    }
                }
            }
        }
        dataset.samples.push(sample);
        dataset.splits.push(entry.split);
    }
    Ok(dataset)
}
