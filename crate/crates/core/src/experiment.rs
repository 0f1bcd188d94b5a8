//! Experiment configuration and the train -> attack -> evaluate -> report
//! driver.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::attacks::{self, AdvRecord, Method};
use crate::eval::{self, AttackParams, CellSettings, CraftedSet, EvalCell, MatrixConfig, TransferMatrix};
use crate::models::{
    self, build_model, load_checkpoint, save_checkpoint, ArchitectureDescriptor, Classifier, TrainConfig,
    STOCK_ARCHITECTURES,
};
use crate::pipeline::{self, ContrastDetector, Dataset, Detector, PassThrough, Split};
use crate::raster::{Image, Sample};
use crate::report;

/// Environment variable that replaces the global seed of any config.
pub const SEED_ENV: &str = "CLOAKBENCH_SEED";

pub const MATRIX_FILE: &str = "matrix.json";
pub const STORAGE_FILE: &str = "storage.json";
pub const ATTACK_INDEX_FILE: &str = "adversarial/index.json";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{stage} stage failed: {message}")]
    Stage { stage: &'static str, message: String },
}

impl ExperimentError {
    pub fn is_config(&self) -> bool {
        matches!(self, ExperimentError::Config(_))
    }

    fn stage(stage: &'static str, e: impl std::fmt::Display) -> Self {
        ExperimentError::Stage {
            stage,
            message: e.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Synthetic {
        #[serde(default = "default_classes")]
        num_classes: usize,
        #[serde(default = "default_per_class")]
        per_class: usize,
        #[serde(default = "default_image_size")]
        image_size: usize,
    },
    Directory {
        path: PathBuf,
    },
}

fn default_classes() -> usize {
    10
}
fn default_per_class() -> usize {
    80
}
fn default_image_size() -> usize {
    32
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Synthetic {
            num_classes: default_classes(),
            per_class: default_per_class(),
            image_size: default_image_size(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    pub lr: f32,
    pub momentum: f32,
    pub epochs: usize,
    pub batch: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            lr: t.lr,
            momentum: t.momentum,
            epochs: t.epochs,
            batch: t.batch,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// Stock architecture name.
    pub arch: String,
    /// Model id used in reports; defaults to `arch`.
    #[serde(default)]
    pub id: Option<String>,
    /// Initialisation and shuffling seed; defaults to a value derived from
    /// the global seed and the model's position.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub train: TrainSettings,
}

impl ModelSpec {
    pub fn stock(arch: &str) -> Self {
        Self {
            arch: arch.to_string(),
            id: None,
            seed: None,
            train: TrainSettings::default(),
        }
    }

    pub fn model_id(&self) -> &str {
        self.id.as_deref().unwrap_or(&self.arch)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DetectorSpec {
    PassThrough,
    Contrast { min_std: f32 },
}

impl DetectorSpec {
    pub fn build(&self) -> Arc<dyn Detector> {
        match *self {
            DetectorSpec::PassThrough => Arc::new(PassThrough),
            DetectorSpec::Contrast { min_std } => Arc::new(ContrastDetector { min_std }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub dataset: DatasetSpec,
    pub train_fraction: f64,
    pub models: Vec<ModelSpec>,
    pub methods: Vec<Method>,
    pub epsilons: Vec<f32>,
    pub alpha: f32,
    pub n_iter: Option<usize>,
    /// JPEG quality of the storage step; `null` skips compression.
    pub jpeg_quality: Option<u8>,
    /// Extra qualities re-evaluated for the storage report.
    pub jpeg_sweep: Vec<u8>,
    pub k_set: Vec<usize>,
    pub eval_samples: usize,
    pub detector: DetectorSpec,
    /// Images per (model, method) contact sheet.
    pub grid_samples: usize,
    pub output_dir: PathBuf,
    /// Worker threads; 0 uses every core.
    pub workers: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            dataset: DatasetSpec::default(),
            train_fraction: 0.8,
            models: STOCK_ARCHITECTURES.iter().map(|a| ModelSpec::stock(a)).collect(),
            methods: vec![Method::Bim, Method::Illc],
            epsilons: eval::DEFAULT_EPSILONS.to_vec(),
            alpha: 1.0,
            n_iter: None,
            jpeg_quality: Some(90),
            jpeg_sweep: vec![95, 75, 50],
            k_set: eval::DEFAULT_K_SET.to_vec(),
            eval_samples: 100,
            detector: DetectorSpec::PassThrough,
            grid_samples: 4,
            output_dir: PathBuf::from("cloakbench-out"),
            workers: 0,
        }
    }
}

/// Parses a JSON config. Unknown keys are rejected and errors name the key
/// path.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        ExperimentError::Config(format!("at `{path}`: {}", e.into_inner()))
    })?;
    Ok(cfg)
}

pub fn load_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)
        .map_err(|e| ExperimentError::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text)
}

impl ExperimentConfig {
    /// Applies `CLOAKBENCH_SEED` when set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| ExperimentError::Config(format!("{SEED_ENV}=`{v}` is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        if self.models.is_empty() {
            return bad("`models` must list at least one model".into());
        }
        let mut ids = std::collections::BTreeSet::new();
        for (i, m) in self.models.iter().enumerate() {
            if !STOCK_ARCHITECTURES.contains(&m.arch.as_str()) {
                return bad(format!(
                    "models[{i}].arch: unknown architecture `{}` (available: {})",
                    m.arch,
                    STOCK_ARCHITECTURES.join(", ")
                ));
            }
            if !ids.insert(m.model_id().to_string()) {
                return bad(format!("models[{i}]: duplicate model id `{}`", m.model_id()));
            }
            if m.train.batch == 0 || !(m.train.lr.is_finite() && m.train.lr >= 0.0) {
                return bad(format!("models[{i}].train: batch must be >= 1 and lr finite and >= 0"));
            }
        }
        if self.methods.is_empty() {
            return bad("`methods` must not be empty".into());
        }
        if self.epsilons.is_empty() {
            return bad("`epsilons` must not be empty".into());
        }
        for (i, &e) in self.epsilons.iter().enumerate() {
            if !(e.is_finite() && e > 0.0) {
                return bad(format!("epsilons[{i}]: budget must be positive, got {e}"));
            }
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return bad(format!("`alpha` must be finite and >= 0, got {}", self.alpha));
        }
        if self.n_iter == Some(0) {
            return bad("`n_iter` must be at least 1".into());
        }
        for q in self.jpeg_quality.iter().chain(&self.jpeg_sweep) {
            if !(1..=100).contains(q) {
                return bad(format!("JPEG quality {q} outside 1..=100"));
            }
        }
        if self.k_set.is_empty() || self.k_set.contains(&0) {
            return bad("`k_set` must be non-empty with every k >= 1".into());
        }
        if self.eval_samples == 0 {
            return bad("`eval_samples` must be at least 1".into());
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad(format!(
                "`train_fraction` must lie in (0, 1), got {}",
                self.train_fraction
            ));
        }
        if let DatasetSpec::Synthetic {
            num_classes,
            per_class,
            image_size,
        } = self.dataset
        {
            if num_classes < 2 || per_class < 2 || image_size < 4 {
                return bad("dataset: synthetic data needs >= 2 classes, >= 2 images per class, side >= 4".into());
            }
        }
        Ok(())
    }

    /// Creates the output directory and checks that it accepts files.
    pub fn prepare_output(&self) -> Result<()> {
        let probe = self.output_dir.join(".write-test");
        fs::create_dir_all(&self.output_dir)
            .and_then(|_| fs::write(&probe, b""))
            .and_then(|_| fs::remove_file(&probe))
            .map_err(|e| {
                ExperimentError::Config(format!("output_dir {} is not writable: {e}", self.output_dir.display()))
            })
    }

    pub fn model_seed(&self, index: usize) -> u64 {
        self.models[index]
            .seed
            .unwrap_or_else(|| self.seed.wrapping_mul(1_000_003).wrapping_add(101 + index as u64))
    }

    /// Hash of every setting that influences results (output location and
    /// worker count excluded).
    pub fn config_hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        c.workers = 0;
        sha256_hex(serde_json::to_string(&c).expect("config serialises").as_bytes())
    }

    /// Hash of the settings a trained checkpoint depends on.
    pub fn training_hash(&self, index: usize) -> String {
        let key = serde_json::json!({
            "dataset": self.dataset,
            "seed": self.seed,
            "train_fraction": self.train_fraction,
            "model": self.models[index],
            "model_seed": self.model_seed(index),
            "format": models::CHECKPOINT_VERSION,
        });
        sha256_hex(key.to_string().as_bytes())
    }

    fn out(&self, rel: &str) -> PathBuf {
        self.output_dir.join(rel)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Dataset with splits assigned.
pub fn prepare_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let ds = match &cfg.dataset {
        DatasetSpec::Synthetic {
            num_classes,
            per_class,
            image_size,
        } => pipeline::synth_dataset(*num_classes, *per_class, *image_size, cfg.seed),
        DatasetSpec::Directory { path } => pipeline::ingest_directory(path),
    }
    .map_err(|e| ExperimentError::stage("data", e))?;
    for w in &ds.warnings {
        log::warn!("{w}");
    }
    pipeline::split(ds, cfg.train_fraction, cfg.seed).map_err(|e| ExperimentError::stage("data", e))
}

/// The evaluation images, interleaved across classes so any prefix stays
/// balanced.
pub fn eval_slice(ds: &Dataset, n: usize) -> Vec<Sample> {
    let mut per_class: Vec<Vec<Sample>> = vec![Vec::new(); ds.num_classes()];
    for s in ds.samples(Split::Eval) {
        per_class[s.label].push(s);
    }
    let mut out = Vec::new();
    let longest = per_class.iter().map(Vec::len).max().unwrap_or(0);
    'outer: for rank in 0..longest {
        for class in &per_class {
            if out.len() == n {
                break 'outer;
            }
            if let Some(s) = class.get(rank) {
                out.push(s.clone());
            }
        }
    }
    if out.len() < n {
        log::warn!("only {} evaluation images available, {n} requested", out.len());
    }
    out
}

fn checkpoint_path(cfg: &ExperimentConfig, id: &str) -> PathBuf {
    cfg.out(&format!("checkpoints/{id}.ckpt"))
}

fn descriptor(cfg: &ExperimentConfig, index: usize, num_classes: usize) -> Result<ArchitectureDescriptor> {
    ArchitectureDescriptor::stock(&cfg.models[index].arch, num_classes)
        .map_err(|e| ExperimentError::Config(e.to_string()))
}

/// Loads the checkpoint for model `index` if it exists and was trained
/// under the current training hash.
fn reusable_checkpoint(cfg: &ExperimentConfig, index: usize) -> Option<Classifier> {
    let id = cfg.models[index].model_id();
    let path = checkpoint_path(cfg, id);
    if !path.exists() {
        return None;
    }
    match load_checkpoint(&path) {
        Ok(m) if m.provenance().config_hash.as_deref() == Some(cfg.training_hash(index).as_str()) => Some(m),
        Ok(_) => {
            log::info!("{id}: checkpoint was trained under different settings, retraining");
            None
        }
        Err(e) => {
            log::warn!("{id}: ignoring unreadable checkpoint: {e}");
            None
        }
    }
}

/// Outcome of the training stage for one model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainedModel {
    pub id: String,
    pub reused: bool,
    pub final_train_accuracy: Option<f64>,
    pub final_val_accuracy: Option<f64>,
}

/// Trains every configured model, reusing checkpoints whose training hash
/// matches.
pub fn stage_train(cfg: &ExperimentConfig, ds: &Dataset) -> Result<(Vec<Classifier>, Vec<TrainedModel>)> {
    fs::create_dir_all(cfg.out("checkpoints")).map_err(|e| ExperimentError::stage("train", e))?;
    let train_set = ds.samples(Split::Train);
    let val_set = ds.samples(Split::Eval);
    let mut models = Vec::new();
    let mut summary = Vec::new();
    for index in 0..cfg.models.len() {
        let spec = &cfg.models[index];
        let id = spec.model_id().to_string();
        if let Some(m) = reusable_checkpoint(cfg, index) {
            log::info!("{id}: reusing checkpoint");
            summary.push(TrainedModel {
                id,
                reused: true,
                final_train_accuracy: m.provenance().final_train_accuracy,
                final_val_accuracy: m.provenance().final_val_accuracy,
            });
            models.push(m);
            continue;
        }
        let seed = cfg.model_seed(index);
        let mut model = build_model(&descriptor(cfg, index, ds.num_classes())?, seed)
            .map_err(|e| ExperimentError::stage("train", e))?;
        model.rename(id.clone());
        let side = model.input_size();
        let tr = eval::samples_for(side, &train_set).map_err(|e| ExperimentError::stage("train", e))?;
        let va = eval::samples_for(side, &val_set).map_err(|e| ExperimentError::stage("train", e))?;
        let tc = TrainConfig {
            lr: spec.train.lr,
            momentum: spec.train.momentum,
            epochs: spec.train.epochs,
            batch: spec.train.batch,
            seed,
        };
        let report = attacks::with_workers(cfg.workers, || models::train(&mut model, &tr, &va, &tc))
            .map_err(|e| ExperimentError::stage("train", e))?
            .map_err(|e| ExperimentError::stage("train", format!("{id}: {e}")))?;
        let prov = model.provenance_mut();
        prov.dataset_id = ds.id();
        prov.config_hash = Some(cfg.training_hash(index));
        save_checkpoint(&model, checkpoint_path(cfg, &id)).map_err(|e| ExperimentError::stage("train", e))?;
        log::info!(
            "{id}: trained, train acc {:.3}, val acc {:?}",
            report.final_train_accuracy,
            report.final_val_accuracy
        );
        summary.push(TrainedModel {
            id,
            reused: false,
            final_train_accuracy: Some(report.final_train_accuracy),
            final_val_accuracy: report.final_val_accuracy,
        });
        models.push(model);
    }
    Ok((models, summary))
}

/// Loads every configured model from its checkpoint; the checkpoint must
/// match the current training settings.
pub fn load_models(cfg: &ExperimentConfig) -> Result<Vec<Classifier>> {
    (0..cfg.models.len())
        .map(|i| {
            reusable_checkpoint(cfg, i).ok_or_else(|| {
                ExperimentError::stage(
                    "load",
                    format!(
                        "no up-to-date checkpoint for `{}` in {}; run `train` first",
                        cfg.models[i].model_id(),
                        cfg.out("checkpoints").display()
                    ),
                )
            })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackIndexEntry {
    pub index: usize,
    pub y_true: usize,
    pub y_target: Option<usize>,
    pub n_iter: usize,
    pub max_deviation: f32,
    pub file: Option<String>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackIndexSet {
    pub source: String,
    pub method: Method,
    pub epsilon: f32,
    pub records: Vec<AttackIndexEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackIndex {
    pub eval_samples: usize,
    /// Clean inputs as seen by each source model.
    pub originals: BTreeMap<String, Vec<String>>,
    pub sets: Vec<AttackIndexSet>,
}

fn eps_dir(epsilon: f32) -> String {
    format!("eps{epsilon}")
}

fn method_dir(method: Method) -> String {
    method.as_str().to_ascii_lowercase()
}

/// Crafts the adversarial sets and stores them as lossless PNGs with a
/// JSON index.
pub fn stage_attack(cfg: &ExperimentConfig, models: &[Classifier], eval_set: &[Sample]) -> Result<Vec<CraftedSet>> {
    let st = |e: &dyn std::fmt::Display| ExperimentError::stage("attack", e);
    let params = AttackParams {
        alpha: cfg.alpha,
        n_iter: cfg.n_iter,
    };
    let sets = eval::craft(models, &cfg.methods, &cfg.epsilons, eval_set, &params, cfg.workers).map_err(|e| st(&e))?;

    let mut originals = BTreeMap::new();
    for m in models {
        let inputs = eval::samples_for(m.input_size(), eval_set).map_err(|e| st(&e))?;
        let mut files = Vec::new();
        for (i, s) in inputs.iter().enumerate() {
            let rel = format!("adversarial/{}/original/{i:04}.png", m.id());
            write_png(cfg, &rel, &s.image).map_err(|e| st(&e))?;
            files.push(rel);
        }
        originals.insert(m.id().to_string(), files);
    }
    let mut index_sets = Vec::new();
    for set in &sets {
        let mut entries = Vec::new();
        for (i, r) in set.records.iter().enumerate() {
            entries.push(match r {
                Ok(rec) => {
                    let rel = format!(
                        "adversarial/{}/{}/{}/{i:04}.png",
                        set.source,
                        method_dir(set.method),
                        eps_dir(set.epsilon)
                    );
                    write_png(cfg, &rel, &rec.x_adv).map_err(|e| st(&e))?;
                    AttackIndexEntry {
                        index: i,
                        y_true: rec.y_true,
                        y_target: rec.y_target,
                        n_iter: rec.n_iter_used,
                        max_deviation: rec.max_deviation,
                        file: Some(rel),
                        error: None,
                    }
                }
                Err(e) => AttackIndexEntry {
                    index: i,
                    y_true: eval_set[i].label,
                    y_target: None,
                    n_iter: 0,
                    max_deviation: 0.0,
                    file: None,
                    error: Some(e.clone()),
                },
            });
        }
        index_sets.push(AttackIndexSet {
            source: set.source.clone(),
            method: set.method,
            epsilon: set.epsilon,
            records: entries,
        });
    }
    let index = AttackIndex {
        eval_samples: eval_set.len(),
        originals,
        sets: index_sets,
    };
    write_json(cfg, ATTACK_INDEX_FILE, &index).map_err(|e| st(&e))?;
    Ok(sets)
}

fn write_png(cfg: &ExperimentConfig, rel: &str, image: &Image) -> std::result::Result<(), String> {
    let path = cfg.out(rel);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| format!("{}: {e}", parent.display()))?;
    }
    pipeline::save_png(image, &path).map_err(|e| e.to_string())
}

fn write_json<T: Serialize>(cfg: &ExperimentConfig, rel: &str, value: &T) -> std::result::Result<(), String> {
    let path = cfg.out(rel);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| format!("{}: {e}", parent.display()))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| e.to_string())?;
    fs::write(&path, text + "\n").map_err(|e| format!("{}: {e}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(cfg: &ExperimentConfig, rel: &str) -> std::result::Result<T, String> {
    let path = cfg.out(rel);
    let text = fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}

/// Rebuilds the crafted sets from the PNGs written by [`stage_attack`].
pub fn load_attacks(cfg: &ExperimentConfig) -> Result<Vec<CraftedSet>> {
    let st = |e: String| ExperimentError::stage("load", e);
    let index: AttackIndex = read_json(cfg, ATTACK_INDEX_FILE).map_err(|e| st(format!("{e}; run `attack` first")))?;
    let load = |rel: &str| pipeline::load_png(cfg.out(rel)).map_err(|e| st(e.to_string()));
    let mut sets = Vec::new();
    for set in &index.sets {
        let originals = index
            .originals
            .get(&set.source)
            .ok_or_else(|| st(format!("index has no originals for `{}`", set.source)))?;
        let mut records = Vec::new();
        for e in &set.records {
            records.push(match (&e.file, &e.error) {
                (Some(file), None) => {
                    let x = load(
                        originals
                            .get(e.index)
                            .ok_or_else(|| st(format!("missing original {}", e.index)))?,
                    )?;
                    Ok(AdvRecord {
                        index: e.index,
                        source: set.source.clone(),
                        method: set.method,
                        epsilon: set.epsilon,
                        n_iter_used: e.n_iter,
                        y_true: e.y_true,
                        y_target: e.y_target,
                        x,
                        x_adv: load(file)?,
                        losses: None,
                        max_deviation: e.max_deviation,
                    })
                }
                (_, err) => Err(err.clone().unwrap_or_else(|| "record has no image".into())),
            });
        }
        sets.push(CraftedSet {
            source: set.source.clone(),
            method: set.method,
            epsilon: set.epsilon,
            records,
        });
    }
    Ok(sets)
}

/// Per-image effect of storing one adversarial example as JPEG.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StorageImage {
    pub quality: u8,
    pub source: String,
    pub method: Method,
    pub epsilon: f32,
    pub index: usize,
    /// max |jpeg(q(x_adv)) - q(x_adv)|
    pub storage_delta: f32,
    /// max |jpeg(q(x_adv)) - x|; may exceed epsilon.
    pub deviation_after_storage: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StorageSweep {
    pub qualities: Vec<u8>,
    pub cells: Vec<(u8, EvalCell)>,
    pub images: Vec<StorageImage>,
}

pub fn storage_images(sets: &[CraftedSet], quality: u8) -> std::result::Result<Vec<StorageImage>, String> {
    let mut out = Vec::new();
    for set in sets {
        for r in set.successes() {
            let stored_in = pipeline::quantize_u8(&r.x_adv);
            let stored = pipeline::jpeg_roundtrip(&stored_in, quality).map_err(|e| e.to_string())?;
            out.push(StorageImage {
                quality,
                source: set.source.clone(),
                method: set.method,
                epsilon: set.epsilon,
                index: r.index,
                storage_delta: stored.max_abs_diff(&stored_in),
                deviation_after_storage: stored.max_abs_diff(&r.x),
            });
        }
    }
    Ok(out)
}

fn matrix_config(cfg: &ExperimentConfig, dataset_id: String, jpeg_quality: Option<u8>) -> MatrixConfig {
    MatrixConfig {
        methods: cfg.methods.clone(),
        epsilons: cfg.epsilons.clone(),
        attack: AttackParams {
            alpha: cfg.alpha,
            n_iter: cfg.n_iter,
        },
        cells: CellSettings {
            jpeg_quality,
            k_set: cfg.k_set.clone(),
            detector: cfg.detector.build(),
            workers: cfg.workers,
        },
        dataset_id,
        global_seed: cfg.seed,
    }
}

/// Evaluates the crafted sets on every model at the configured JPEG
/// quality and at each sweep quality; writes the matrix and storage data.
pub fn stage_evaluate(
    cfg: &ExperimentConfig,
    models: &[Classifier],
    sets: &[CraftedSet],
) -> Result<(TransferMatrix, StorageSweep)> {
    let st = |e: &dyn std::fmt::Display| ExperimentError::stage("evaluate", e);
    let first = models.first().ok_or_else(|| st(&"no models"))?;
    let dataset_id = first.provenance().dataset_id.clone();
    let eval_samples = sets.first().map_or(0, |s| s.records.len());
    let sizes: BTreeMap<String, usize> = models.iter().map(|m| (m.id().to_string(), m.input_size())).collect();

    let mc = matrix_config(cfg, dataset_id.clone(), cfg.jpeg_quality);
    let meta = eval::matrix_meta(models, eval_samples, first.num_classes(), &mc);
    let cells = eval::evaluate_sets(sets, &sizes, models, &mc.cells);
    let matrix = TransferMatrix { meta, cells };
    matrix.check_complete().map_err(|e| st(&e))?;
    write_json(cfg, MATRIX_FILE, &matrix).map_err(|e| st(&e))?;

    let mut sweep = StorageSweep {
        qualities: cfg.jpeg_sweep.clone(),
        cells: Vec::new(),
        images: Vec::new(),
    };
    for &q in &cfg.jpeg_sweep {
        let mc = matrix_config(cfg, dataset_id.clone(), Some(q));
        for cell in eval::evaluate_sets(sets, &sizes, models, &mc.cells) {
            sweep.cells.push((q, cell));
        }
        sweep.images.extend(storage_images(sets, q).map_err(|e| st(&e))?);
    }
    write_json(cfg, STORAGE_FILE, &sweep).map_err(|e| st(&e))?;
    Ok((matrix, sweep))
}

/// Writes every report file from the stored matrix, storage sweep and
/// adversarial images.
pub fn stage_report(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let st = |e: &dyn std::fmt::Display| ExperimentError::stage("report", e);
    let matrix: TransferMatrix = read_json(cfg, MATRIX_FILE).map_err(|e| st(&format!("{e}; run `evaluate` first")))?;
    let sweep: Option<StorageSweep> = read_json(cfg, STORAGE_FILE).ok();
    let sets = load_attacks(cfg)?;
    report::write_all(
        &cfg.output_dir.join("reports"),
        &matrix,
        sweep.as_ref(),
        &sets,
        cfg.grid_samples,
    )
    .map_err(|e| st(&e))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Ok,
    Failed,
    Skipped,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub status: StageStatus,
    pub seconds: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub stages: Vec<StageRecord>,
    pub total_seconds: f64,
    pub warnings: Vec<String>,
    pub artifacts: Vec<Artifact>,
}

impl RunManifest {
    pub fn failed(&self) -> bool {
        self.stages.iter().any(|s| s.status == StageStatus::Failed)
    }
}

fn collect_artifacts(root: &Path) -> std::result::Result<Vec<Artifact>, String> {
    let mut out = Vec::new();
    for entry in walkdir::WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| e.to_string())?;
        if !entry.file_type().is_file() {
            continue;
        }
        let rel = entry
            .path()
            .strip_prefix(root)
            .map_err(|e| e.to_string())?
            .to_string_lossy()
            .replace('\\', "/");
        if rel == MANIFEST_FILE || rel.ends_with(".tmp") {
            continue;
        }
        let bytes = fs::read(entry.path()).map_err(|e| format!("{rel}: {e}"))?;
        out.push(Artifact {
            path: rel,
            bytes: bytes.len() as u64,
            sha256: sha256_hex(&bytes),
        });
    }
    Ok(out)
}

/// Re-hashes every artifact listed in a manifest; returns the paths that
/// are missing or changed.
pub fn verify_manifest(output_dir: &Path) -> std::result::Result<Vec<String>, String> {
    let text = fs::read_to_string(output_dir.join(MANIFEST_FILE)).map_err(|e| e.to_string())?;
    let manifest: RunManifest = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    Ok(manifest
        .artifacts
        .iter()
        .filter(|a| {
            fs::read(output_dir.join(&a.path))
                .map(|b| sha256_hex(&b) != a.sha256)
                .unwrap_or(true)
        })
        .map(|a| a.path.clone())
        .collect())
}

/// Which stages a driver invocation runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stages {
    Train,
    Attack,
    Evaluate,
    Report,
    All,
}

impl Stages {
    fn includes(self, stage: &str) -> bool {
        match self {
            Stages::All => true,
            Stages::Train => stage == "train",
            Stages::Attack => stage == "attack",
            Stages::Evaluate => stage == "evaluate",
            Stages::Report => stage == "report",
        }
    }
}

struct Recorder {
    stages: Vec<StageRecord>,
    warnings: Vec<String>,
}

impl Recorder {
    fn run<T>(&mut self, name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let t = Instant::now();
        log::info!("stage {name} started");
        let r = f();
        self.stages.push(StageRecord {
            name: name.to_string(),
            status: if r.is_ok() {
                StageStatus::Ok
            } else {
                StageStatus::Failed
            },
            seconds: t.elapsed().as_secs_f64(),
            error: r.as_ref().err().map(ToString::to_string),
        });
        r
    }

    fn skip(&mut self, name: &str) {
        self.stages.push(StageRecord {
            name: name.to_string(),
            status: StageStatus::Skipped,
            seconds: 0.0,
            error: None,
        });
    }
}

fn pipeline_body(cfg: &ExperimentConfig, which: Stages, rec: &mut Recorder) -> Result<()> {
    let need_data = which.includes("train") || which.includes("attack");
    let ds = if need_data {
        Some(rec.run("data", || prepare_dataset(cfg))?)
    } else {
        None
    };
    let models = if which.includes("train") {
        let ds = ds.as_ref().expect("dataset loaded");
        let (models, summary) = rec.run("train", || stage_train(cfg, ds))?;
        for t in &summary {
            if let Some(acc) = t.final_val_accuracy {
                if acc < 0.5 {
                    rec.warnings.push(format!("{} validation accuracy only {acc:.3}", t.id));
                }
            }
        }
        Some(models)
    } else if which.includes("attack") || which.includes("evaluate") {
        Some(rec.run("load", || load_models(cfg))?)
    } else {
        None
    };
    let mut sets = None;
    if which.includes("attack") {
        let ds = ds.as_ref().expect("dataset loaded");
        let models = models.as_ref().expect("models loaded");
        let eval_set = eval_slice(ds, cfg.eval_samples);
        sets = Some(rec.run("attack", || stage_attack(cfg, models, &eval_set))?);
    } else {
        rec.skip("attack");
    }
    if which.includes("evaluate") {
        let models = models.as_ref().expect("models loaded");
        let sets = match sets.take() {
            Some(s) => s,
            None => rec.run("load-attacks", || load_attacks(cfg))?,
        };
        let (matrix, _) = rec.run("evaluate", || stage_evaluate(cfg, models, &sets))?;
        for c in matrix.errors() {
            rec.warnings.push(format!(
                "cell {} {} eps={} -> {}: {}",
                c.source,
                c.method,
                c.epsilon,
                c.target,
                c.error.as_deref().unwrap_or_default()
            ));
        }
    } else {
        rec.skip("evaluate");
    }
    if which.includes("report") {
        rec.run("report", || stage_report(cfg))?;
    } else {
        rec.skip("report");
    }
    Ok(())
}

/// Runs the selected stages and writes `manifest.json`, also when a stage
/// fails. The manifest is returned together with the first stage error.
pub fn run_stages(cfg: &ExperimentConfig, which: Stages) -> Result<(RunManifest, Option<ExperimentError>)> {
    cfg.validate()?;
    cfg.prepare_output()?;
    let t = Instant::now();
    let mut rec = Recorder {
        stages: Vec::new(),
        warnings: Vec::new(),
    };
    let outcome = pipeline_body(cfg, which, &mut rec);
    let err = match outcome {
        Ok(()) => None,
        Err(e) if e.is_config() => return Err(e),
        Err(e) => Some(e),
    };
    let artifacts = collect_artifacts(&cfg.output_dir).map_err(|e| ExperimentError::stage("manifest", e))?;
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: cfg.config_hash(),
        config: cfg.clone(),
        stages: rec.stages,
        total_seconds: t.elapsed().as_secs_f64(),
        warnings: rec.warnings,
        artifacts,
    };
    write_json(cfg, MANIFEST_FILE, &manifest).map_err(|e| ExperimentError::stage("manifest", e))?;
    Ok((manifest, err))
}

/// Full pipeline: train, attack, evaluate, report.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunManifest> {
    match run_stages(cfg, Stages::All)? {
        (m, None) => Ok(m),
        (_, Some(e)) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = parse_config("{}").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.epsilons, vec![4.0, 8.0, 16.0, 32.0, 64.0, 128.0]);
        assert_eq!(cfg.models.len(), 3);
        cfg.validate().unwrap();
        let cfg = parse_config(r#"{"seed": 3, "models": [{"arch": "cnn-c", "train": {"epochs": 2}}]}"#).unwrap();
        assert_eq!(cfg.models[0].train.epochs, 2);
        assert_eq!(cfg.models[0].train.lr, 0.01);
    }

    #[test]
    fn unknown_keys_name_their_path() {
        let e = parse_config(r#"{"models": [{"arch": "cnn-a", "train": {"lr": 0.1, "decay": 1}}]}"#).unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("models[0].train"), "{msg}");
        assert!(msg.contains("decay"), "{msg}");
        let e = parse_config(r#"{"epsilon": [4]}"#).unwrap_err();
        assert!(e.to_string().contains("epsilon"));
        let e = parse_config(r#"{"dataset": {"kind": "synthetic", "classes": 3}}"#).unwrap_err();
        assert!(e.to_string().contains("classes"), "{e}");
        assert!(e.is_config());
    }

    #[test]
    fn validation_rejects_bad_values() {
        for text in [
            r#"{"epsilons": [0]}"#,
            r#"{"epsilons": []}"#,
            r#"{"methods": []}"#,
            r#"{"models": [{"arch": "resnet"}]}"#,
            r#"{"models": [{"arch": "cnn-a"}, {"arch": "cnn-a"}]}"#,
            r#"{"jpeg_quality": 0}"#,
            r#"{"k_set": [0, 1]}"#,
            r#"{"train_fraction": 1.0}"#,
        ] {
            let cfg = parse_config(text).unwrap();
            assert!(cfg.validate().unwrap_err().is_config(), "{text}");
        }
        let cfg = parse_config(r#"{"models": [{"arch": "cnn-a"}, {"arch": "cnn-a", "id": "cnn-a2"}]}"#).unwrap();
        cfg.validate().unwrap();
    }

    #[test]
    fn config_hash_ignores_output_location() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.output_dir = "/elsewhere".into();
        b.workers = 8;
        assert_eq!(a.config_hash(), b.config_hash());
        b.seed += 1;
        assert_ne!(a.config_hash(), b.config_hash());
        assert_ne!(a.training_hash(0), a.training_hash(1));
    }

    #[test]
    fn eval_slice_interleaves_classes() {
        let ds = pipeline::split(pipeline::synth_dataset(3, 10, 8, 1).unwrap(), 0.5, 1).unwrap();
        let s = eval_slice(&ds, 6);
        let labels: Vec<usize> = s.iter().map(|s| s.label).collect();
        assert_eq!(labels, vec![0, 1, 2, 0, 1, 2]);
        assert_eq!(eval_slice(&ds, 100).len(), 15);
    }
}
