//! Datasets and the image transforms that sit between crafting a cloak and
//! classifying it.

mod transform;

pub use transform::{
    detect_gate, jpeg_roundtrip, quantize_u8, resize, ChainOutput, ContrastDetector, Detector, GateOutcome,
    PassThrough, Transform, TransformChain,
};

use std::f32::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{Image, Sample, PIXEL_MAX};
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("no identity directories under {0}")]
    NoIdentities(PathBuf),
    #[error("{0}")]
    InvalidArgument(String),
    #[error("class {label} has {count} images; a train/eval split needs at least 2")]
    ClassTooSmall { label: usize, count: usize },
    #[error("codec: {0}")]
    Codec(String),
    #[error(transparent)]
    Image(TensorError),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub image: Image,
    pub label: usize,
    pub split: Option<Split>,
    /// File the image was read from, if any.
    pub source: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetProvenance {
    Directory {
        path: PathBuf,
    },
    Synthetic {
        num_classes: usize,
        per_class: usize,
        image_size: usize,
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub identities: Vec<String>,
    pub records: Vec<ImageRecord>,
    pub provenance: DatasetProvenance,
    /// Non-fatal problems met while loading (skipped files and such).
    pub warnings: Vec<String>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.identities.len()
    }

    pub fn id(&self) -> String {
        match &self.provenance {
            DatasetProvenance::Directory { path } => format!("dir:{}", path.display()),
            DatasetProvenance::Synthetic {
                num_classes,
                per_class,
                image_size,
                seed,
            } => format!("synth-c{num_classes}-n{per_class}-s{image_size}-seed{seed}"),
        }
    }

    pub fn samples(&self, split: Split) -> Vec<Sample> {
        self.records
            .iter()
            .filter(|r| r.split == Some(split))
            .map(|r| Sample {
                image: r.image.clone(),
                label: r.label,
            })
            .collect()
    }

    pub fn all_samples(&self) -> Vec<Sample> {
        self.records
            .iter()
            .map(|r| Sample {
                image: r.image.clone(),
                label: r.label,
            })
            .collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.records.iter().filter(|r| r.split == Some(split)).count()
    }
}

fn is_png(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(io_err(dir))?;
    entries.sort();
    Ok(entries)
}

/// Loads `<root>/<identity>/<image>.png`. Labels follow the sorted identity
/// directory names; unreadable images are skipped and listed in
/// `Dataset::warnings`.
pub fn ingest_directory(root: impl AsRef<Path>) -> Result<Dataset> {
    let root = root.as_ref();
    let mut identities = Vec::new();
    let mut records = Vec::new();
    let mut warnings = Vec::new();
    for dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
        let label = identities.len();
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let mut loaded = 0usize;
        for file in sorted_entries(&dir)?.into_iter().filter(|p| p.is_file() && is_png(p)) {
            match load_png(&file) {
                Ok(image) => {
                    loaded += 1;
                    records.push(ImageRecord {
                        image,
                        label,
                        split: None,
                        source: Some(file),
                    });
                }
                Err(e) => {
                    log::warn!("skipping {}: {e}", file.display());
                    warnings.push(format!("skipped {}: {e}", file.display()));
                }
            }
        }
        if loaded == 0 {
            warnings.push(format!("identity `{name}` has no readable images"));
        }
        identities.push(name);
    }
    if identities.is_empty() {
        return Err(PipelineError::NoIdentities(root.to_path_buf()));
    }
    Ok(Dataset {
        identities,
        records,
        provenance: DatasetProvenance::Directory {
            path: root.to_path_buf(),
        },
        warnings,
    })
}

/// Writes a dataset in the layout read by [`ingest_directory`].
pub fn write_directory(dataset: &Dataset, root: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let root = root.as_ref();
    let mut written = Vec::new();
    let mut counters = vec![0usize; dataset.num_classes()];
    for record in &dataset.records {
        let dir = root.join(&dataset.identities[record.label]);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let path = dir.join(format!("{:04}.png", counters[record.label]));
        counters[record.label] += 1;
        save_png(&record.image, &path)?;
        written.push(path);
    }
    Ok(written)
}

pub fn save_png(image: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (w, h) = (image.width() as u32, image.height() as u32);
    let buf = image::RgbImage::from_raw(w, h, image.to_rgb8())
        .ok_or_else(|| PipelineError::Codec("pixel buffer does not match dimensions".into()))?;
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| PipelineError::Codec(format!("{}: {e}", path.display())))
}

pub fn load_png(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    let decoded = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
        .map_err(|e| PipelineError::Codec(format!("{}: {e}", path.display())))?
        .to_rgb8();
    Ok(Image::from_rgb8(
        decoded.height() as usize,
        decoded.width() as usize,
        decoded.as_raw(),
    )?)
}

const IDENTITY_WAVE_AMP: f32 = 14.0;
const FEATURE_CONTRAST: f32 = 50.0;

struct Wave {
    channel: usize,
    amp: f32,
    fx: f32,
    fy: f32,
    phase: f32,
}

impl Wave {
    fn random(rng: &mut ChaCha8Rng, channel: usize, amp: f32) -> Self {
        Self {
            channel,
            amp: amp * rng.gen_range(0.5f32..1.0),
            fx: rng.gen_range(0.5f32..2.5) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 },
            fy: rng.gen_range(0.5f32..2.5),
            phase: rng.gen_range(0.0..2.0 * PI),
        }
    }

    fn at(&self, u: f32, v: f32) -> f32 {
        self.amp * (2.0 * PI * (self.fx * u + self.fy * v) + self.phase).sin()
    }
}

struct Blob {
    disk: bool,
    cx: f32,
    cy: f32,
    rx: f32,
    ry: f32,
    color: [f32; 3],
}

impl Blob {
    fn contains(&self, u: f32, v: f32) -> bool {
        let dx = (u - self.cx) / self.rx;
        let dy = (v - self.cy) / self.ry;
        if self.disk {
            dx * dx + dy * dy <= 1.0
        } else {
            dx.abs() <= 1.0 && dy.abs() <= 1.0
        }
    }
}

fn random_color(rng: &mut ChaCha8Rng, lo: f32, hi: f32) -> [f32; 3] {
    [rng.gen_range(lo..hi), rng.gen_range(lo..hi), rng.gen_range(lo..hi)]
}

/// Layout shared by every identity: a background field with a face-like
/// ellipse in the middle.
struct Template {
    background: [f32; 3],
    face: Blob,
    waves: Vec<Wave>,
}

impl Template {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        Self {
            background: random_color(rng, 40.0, 110.0),
            face: Blob {
                disk: true,
                cx: 0.5,
                cy: 0.5,
                rx: 0.34,
                ry: 0.42,
                color: random_color(rng, 130.0, 200.0),
            },
            waves: (0..3).map(|c| Wave::random(rng, c, 15.0)).collect(),
        }
    }
}

/// What makes one identity differ from the template: a faint colour
/// texture and a few small features placed inside the face.
struct Identity {
    waves: Vec<Wave>,
    features: Vec<Blob>,
}

impl Identity {
    fn random(rng: &mut ChaCha8Rng, template: &Template) -> Self {
        let waves = (0..6).map(|i| Wave::random(rng, i % 3, IDENTITY_WAVE_AMP)).collect();
        let features = (0..3)
            .map(|_| {
                let mut color = template.face.color;
                for c in color.iter_mut() {
                    *c += rng.gen_range(-FEATURE_CONTRAST..FEATURE_CONTRAST);
                }
                Blob {
                    disk: rng.gen_bool(0.5),
                    cx: rng.gen_range(0.3..0.7),
                    cy: rng.gen_range(0.3..0.7),
                    rx: rng.gen_range(0.05..0.12),
                    ry: rng.gen_range(0.05..0.12),
                    color,
                }
            })
            .collect();
        Self { waves, features }
    }

    /// Colour at normalised coordinates `(u, v)` in `[0, 1]`.
    fn sample(&self, template: &Template, u: f32, v: f32) -> [f32; 3] {
        let mut px = if template.face.contains(u, v) {
            template.face.color
        } else {
            template.background
        };
        for f in &self.features {
            if f.contains(u, v) {
                px = f.color;
            }
        }
        for w in template.waves.iter().chain(&self.waves) {
            px[w.channel] += w.at(u, v);
        }
        px
    }
}

/// Procedural identities. All classes share one seeded face-like template
/// and differ by a faint texture and a few small features; each image adds
/// a shift of up to 2 px, a brightness change and Gaussian noise (sigma 8).
/// Pixels are 8-bit.
pub fn synth_dataset(num_classes: usize, per_class: usize, image_size: usize, seed: u64) -> Result<Dataset> {
    if num_classes < 2 {
        return Err(PipelineError::InvalidArgument(format!(
            "synthetic dataset needs at least 2 classes, got {num_classes}"
        )));
    }
    if per_class == 0 || image_size < 4 {
        return Err(PipelineError::InvalidArgument(format!(
            "degenerate synthetic dataset: {per_class} images of side {image_size}"
        )));
    }
    let noise = Normal::new(0.0f32, 8.0).expect("valid sigma");
    let side = image_size as f32;
    let template = Template::random(&mut ChaCha8Rng::seed_from_u64(mix(seed, u64::MAX, 0)));
    let mut records = Vec::with_capacity(num_classes * per_class);
    for label in 0..num_classes {
        let identity = Identity::random(&mut ChaCha8Rng::seed_from_u64(mix(seed, label as u64, 0)), &template);
        for i in 0..per_class {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, label as u64, i as u64 + 1));
            let dx = rng.gen_range(-2i32..=2) as f32;
            let dy = rng.gen_range(-2i32..=2) as f32;
            let gain = rng.gen_range(0.9f32..1.1);
            let offset = rng.gen_range(-10.0f32..10.0);
            let mut img = Image::filled(image_size, image_size, 0.0);
            for y in 0..image_size {
                for x in 0..image_size {
                    let u = ((x as f32 - dx + 0.5) / side).clamp(0.0, 1.0);
                    let v = ((y as f32 - dy + 0.5) / side).clamp(0.0, 1.0);
                    let px = identity.sample(&template, u, v);
                    for (c, &val) in px.iter().enumerate() {
                        let jittered = val * gain + offset + noise.sample(&mut rng);
                        img.set(y, x, c, jittered.round().clamp(0.0, PIXEL_MAX));
                    }
                }
            }
            records.push(ImageRecord {
                image: img,
                label,
                split: None,
                source: None,
            });
        }
    }
    Ok(Dataset {
        identities: (0..num_classes).map(|c| format!("id{c:03}")).collect(),
        records,
        provenance: DatasetProvenance::Synthetic {
            num_classes,
            per_class,
            image_size,
            seed,
        },
        warnings: Vec::new(),
    })
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix64 finaliser over the combined words
    let mut z = seed
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stratified seeded split. Every class keeps at least one image on each
/// side; per-class train counts are `round(n * train_fraction)` clamped to
/// `1..=n-1`.
pub fn split(mut dataset: Dataset, train_fraction: f64, seed: u64) -> Result<Dataset> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(PipelineError::InvalidArgument(format!(
            "train fraction {train_fraction} must lie strictly between 0 and 1"
        )));
    }
    for label in 0..dataset.num_classes() {
        let mut members: Vec<usize> = dataset
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.label == label)
            .map(|(i, _)| i)
            .collect();
        if members.len() < 2 {
            return Err(PipelineError::ClassTooSmall {
                label,
                count: members.len(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, label as u64, 0x5157));
        members.shuffle(&mut rng);
        let n = members.len();
        let n_train = ((n as f64 * train_fraction).round() as usize).clamp(1, n - 1);
        for (rank, &idx) in members.iter().enumerate() {
            dataset.records[idx].split = Some(if rank < n_train { Split::Train } else { Split::Eval });
        }
    }
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synth_is_deterministic() {
        let a = synth_dataset(3, 4, 16, 5).unwrap();
        let b = synth_dataset(3, 4, 16, 5).unwrap();
        assert_eq!(a, b);
        let c = synth_dataset(3, 4, 16, 6).unwrap();
        assert_ne!(a.records[0].image, c.records[0].image);
        assert!(a.records.iter().all(|r| r.image.in_pixel_range()));
        assert!(a
            .records
            .iter()
            .all(|r| r.image.data().iter().all(|v| v.fract() == 0.0)));
    }

    #[test]
    fn synth_rejects_degenerate() {
        assert!(synth_dataset(1, 4, 16, 0).is_err());
        assert!(synth_dataset(2, 0, 16, 0).is_err());
        assert!(synth_dataset(2, 4, 2, 0).is_err());
    }

    #[test]
    fn single_image_classes_cannot_split() {
        let d = synth_dataset(2, 1, 8, 0).unwrap();
        assert!(matches!(
            split(d, 0.8, 0),
            Err(PipelineError::ClassTooSmall { count: 1, .. })
        ));
    }

    #[test]
    fn split_is_stratified_disjoint_and_seeded() {
        let d = synth_dataset(4, 10, 8, 1).unwrap();
        let a = split(d.clone(), 0.75, 3).unwrap();
        let b = split(d.clone(), 0.75, 3).unwrap();
        assert_eq!(a, b);
        for label in 0..4 {
            let train = a
                .records
                .iter()
                .filter(|r| r.label == label && r.split == Some(Split::Train))
                .count();
            let eval = a
                .records
                .iter()
                .filter(|r| r.label == label && r.split == Some(Split::Eval))
                .count();
            assert_eq!(train + eval, 10);
            assert!((train as f64 - 7.5).abs() <= 1.0);
        }
        assert!(a.records.iter().all(|r| r.split.is_some()));
        assert!(split(d.clone(), 1.0, 0).is_err());
        assert!(split(d, 0.0, 0).is_err());
    }

    #[test]
    fn ingest_sorts_identities_and_skips_bad_files() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["bob", "alice"] {
            fs::create_dir(dir.path().join(name)).unwrap();
            save_png(&Image::filled(4, 4, 9.0), dir.path().join(name).join("0.png")).unwrap();
        }
        fs::write(dir.path().join("bob").join("1.png"), b"not a png").unwrap();
        let ds = ingest_directory(dir.path()).unwrap();
        assert_eq!(ds.identities, vec!["alice", "bob"]);
        assert_eq!(ds.records.len(), 2);
        assert_eq!(ds.records[0].label, 0);
        assert_eq!(ds.warnings.len(), 1);
        assert_eq!(ingest_directory(dir.path()).unwrap(), ds);

        let empty = tempfile::tempdir().unwrap();
        assert!(matches!(
            ingest_directory(empty.path()),
            Err(PipelineError::NoIdentities(_))
        ));
    }

    #[test]
    fn write_then_ingest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = synth_dataset(2, 3, 8, 4).unwrap();
        write_directory(&ds, dir.path()).unwrap();
        let back = ingest_directory(dir.path()).unwrap();
        assert_eq!(back.identities, ds.identities);
        for (a, b) in back.records.iter().zip(&ds.records) {
            assert_eq!(a.image, b.image);
            assert_eq!(a.label, b.label);
        }
    }
}
