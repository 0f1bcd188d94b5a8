//! Protection success rate and the source x method x epsilon x target
//! transfer matrix.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attacks::{self, AdvRecord, AttackConfig, AttackError, Method};
use crate::models::{top_k, Classifier, ModelError};
use crate::pipeline::{self, ChainOutput, Detector, PipelineError, TransformChain};
use crate::raster::Sample;

pub const DEFAULT_K_SET: [usize; 5] = [1, 5, 10, 25, 50];
pub const DEFAULT_EPSILONS: [f32; 6] = [4.0, 8.0, 16.0, 32.0, 64.0, 128.0];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cannot compute PSR over zero samples")]
    Empty,
    #[error("no detectable samples: all {0} images failed the detection gate")]
    NoDetectableSamples(usize),
    #[error("{0}")]
    Mismatch(String),
    #[error("k = {k} is outside 1..={classes}")]
    InvalidK { k: usize, classes: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Attack(#[from] AttackError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// `100 - 100 * hits / n`, with the numerator formed in integers and a
/// single final division.
pub fn psr_from_counts(hits: usize, n: usize) -> Result<f64> {
    if n == 0 {
        return Err(EvalError::Empty);
    }
    if hits > n {
        return Err(EvalError::Mismatch(format!("{hits} hits out of {n} samples")));
    }
    Ok((100 * (n - hits) as u64) as f64 / n as u64 as f64)
}

/// PSR at `k` from ranked prediction lists (most probable label first).
pub fn psr(topk_lists: &[Vec<usize>], true_labels: &[usize], k: usize) -> Result<f64> {
    if topk_lists.len() != true_labels.len() {
        return Err(EvalError::Mismatch(format!(
            "{} prediction lists for {} labels",
            topk_lists.len(),
            true_labels.len()
        )));
    }
    if topk_lists.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut hits = 0;
    for (list, &y) in topk_lists.iter().zip(true_labels) {
        if k == 0 || list.len() < k {
            return Err(EvalError::InvalidK { k, classes: list.len() });
        }
        hits += usize::from(list[..k].contains(&y));
    }
    psr_from_counts(hits, topk_lists.len())
}

/// Keeps the k values in `1..=num_classes`, sorted and deduplicated; the
/// rest are returned separately.
pub fn effective_k_set(k_set: &[usize], num_classes: usize) -> (Vec<usize>, Vec<usize>) {
    let unique: BTreeSet<usize> = k_set.iter().copied().collect();
    unique.into_iter().partition(|&k| k >= 1 && k <= num_classes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCell {
    pub source: String,
    pub method: Method,
    pub epsilon: f32,
    pub target: String,
    /// PSR per k; empty when the cell failed.
    pub psr: BTreeMap<usize, f64>,
    /// Images that passed the gate and were classified.
    pub samples: usize,
    pub detect_failed: usize,
    pub error: Option<String>,
}

impl EvalCell {
    pub fn key(&self) -> (String, Method, u32, String) {
        (
            self.source.clone(),
            self.method,
            self.epsilon.to_bits(),
            self.target.clone(),
        )
    }

    pub fn top(&self, k: usize) -> Option<f64> {
        self.psr.get(&k).copied()
    }

    fn failed(source: &str, method: Method, epsilon: f32, target: &str, error: String) -> Self {
        Self {
            source: source.to_string(),
            method,
            epsilon,
            target: target.to_string(),
            psr: BTreeMap::new(),
            samples: 0,
            detect_failed: 0,
            error: Some(error),
        }
    }
}

fn common_key(records: &[AdvRecord]) -> Result<(String, Method, f32)> {
    let first = records.first().ok_or(EvalError::Empty)?;
    for r in records {
        if r.source != first.source || r.method != first.method || r.epsilon.to_bits() != first.epsilon.to_bits() {
            return Err(EvalError::Mismatch(format!(
                "records mix ({}, {}, {}) with ({}, {}, {})",
                first.source, first.method, first.epsilon, r.source, r.method, r.epsilon
            )));
        }
    }
    Ok((first.source.clone(), first.method, first.epsilon))
}

/// Per-record outcome after the transform chain: `None` when gated, else
/// the 0-based rank of the true label.
fn ranks(
    records: &[AdvRecord],
    target: &Classifier,
    chain: &TransformChain,
    kmax: usize,
) -> Result<Vec<Option<usize>>> {
    records
        .par_iter()
        .map(|r| match chain.apply(&r.x_adv)? {
            ChainOutput::Gated { .. } => Ok(None),
            ChainOutput::Image(img) => {
                let probs = target.predict(&img)?;
                let best = top_k(&probs, kmax)?;
                Ok(Some(best.iter().position(|&l| l == r.y_true).unwrap_or(kmax)))
            }
        })
        .collect()
}

/// Applies `chain` to every adversarial image, classifies the survivors
/// with `target` and reports PSR for each usable k.
pub fn evaluate_cell(
    records: &[AdvRecord],
    target: &Classifier,
    chain: &TransformChain,
    k_set: &[usize],
) -> Result<EvalCell> {
    let (source, method, epsilon) = common_key(records)?;
    let (ks, _) = effective_k_set(k_set, target.num_classes());
    let kmax = *ks.last().ok_or(EvalError::InvalidK {
        k: k_set.first().copied().unwrap_or(0),
        classes: target.num_classes(),
    })?;
    let ranks = ranks(records, target, chain, kmax)?;
    let survivors: Vec<usize> = ranks.iter().flatten().copied().collect();
    let detect_failed = ranks.len() - survivors.len();
    if survivors.is_empty() {
        return Err(EvalError::NoDetectableSamples(ranks.len()));
    }
    let mut psr = BTreeMap::new();
    for &k in &ks {
        let hits = survivors.iter().filter(|&&rank| rank < k).count();
        psr.insert(k, psr_from_counts(hits, survivors.len())?);
    }
    Ok(EvalCell {
        source,
        method,
        epsilon,
        target: target.id().to_string(),
        psr,
        samples: survivors.len(),
        detect_failed,
        error: None,
    })
}

/// Reference implementation of [`evaluate_cell`]: one image at a time, the
/// true label's rank found by counting the labels that beat it.
pub fn psr_oracle(
    records: &[AdvRecord],
    target: &Classifier,
    chain: &TransformChain,
    k_set: &[usize],
) -> Result<BTreeMap<usize, f64>> {
    if records.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut ranks = Vec::new();
    let mut total = 0usize;
    for r in records {
        total += 1;
        let img = match chain.apply(&r.x_adv)? {
            ChainOutput::Gated { .. } => continue,
            ChainOutput::Image(img) => img,
        };
        let probs = target.predict(&img)?;
        let y = r.y_true;
        let mut rank = 0usize;
        for (j, &p) in probs.iter().enumerate() {
            if p > probs[y] || (p == probs[y] && j < y) {
                rank += 1;
            }
        }
        ranks.push(rank);
    }
    if ranks.is_empty() {
        return Err(EvalError::NoDetectableSamples(total));
    }
    let mut out = BTreeMap::new();
    for &k in k_set {
        if k == 0 || k > target.num_classes() {
            continue;
        }
        let mut hits = 0usize;
        for &rank in &ranks {
            if rank < k {
                hits += 1;
            }
        }
        out.insert(
            k,
            (100 * (ranks.len() - hits) as u64) as f64 / ranks.len() as u64 as f64,
        );
    }
    Ok(out)
}

/// Adversarial records for one (source, method, epsilon) triple. Failed
/// images keep their error message.
#[derive(Debug, Clone)]
pub struct CraftedSet {
    pub source: String,
    pub method: Method,
    pub epsilon: f32,
    pub records: Vec<std::result::Result<AdvRecord, String>>,
}

impl CraftedSet {
    pub fn successes(&self) -> Vec<AdvRecord> {
        self.records.iter().filter_map(|r| r.as_ref().ok().cloned()).collect()
    }

    pub fn failures(&self) -> Vec<(usize, &str)> {
        self.records
            .iter()
            .enumerate()
            .filter_map(|(i, r)| r.as_ref().err().map(|e| (i, e.as_str())))
            .collect()
    }
}

/// Resizes clean samples to `side` where needed (originals are not
/// compressed).
pub fn samples_for(side: usize, samples: &[Sample]) -> Result<Vec<Sample>> {
    samples
        .iter()
        .map(|s| {
            Ok(Sample {
                image: pipeline::resize(&s.image, side)?,
                label: s.label,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackParams {
    pub alpha: f32,
    pub n_iter: Option<usize>,
}

impl Default for AttackParams {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            n_iter: None,
        }
    }
}

/// Crafts every (source, method, epsilon) set, in that nesting order.
pub fn craft(
    sources: &[Classifier],
    methods: &[Method],
    epsilons: &[f32],
    samples: &[Sample],
    params: &AttackParams,
    workers: usize,
) -> Result<Vec<CraftedSet>> {
    let mut sets = Vec::new();
    for model in sources {
        let inputs = samples_for(model.input_size(), samples)?;
        for &method in methods {
            for &epsilon in epsilons {
                let mut cfg = AttackConfig::new(method, epsilon).with_alpha(params.alpha);
                cfg.n_iter = params.n_iter;
                let records = attacks::attack_batch(model, &inputs, &cfg, workers)?
                    .into_iter()
                    .map(|r| r.map_err(|e| e.to_string()))
                    .collect();
                log::info!("crafted {} {} eps={}", model.id(), method, epsilon);
                sets.push(CraftedSet {
                    source: model.id().to_string(),
                    method,
                    epsilon,
                    records,
                });
            }
        }
    }
    Ok(sets)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub id: String,
    pub input_size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixMeta {
    pub dataset_id: String,
    pub num_classes: usize,
    pub eval_samples: usize,
    pub global_seed: u64,
    pub models: Vec<ModelInfo>,
    pub methods: Vec<Method>,
    pub epsilons: Vec<f32>,
    pub k_set: Vec<usize>,
    pub dropped_k: Vec<usize>,
    pub jpeg_quality: Option<u8>,
    pub alpha: f32,
    pub detector: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferMatrix {
    pub meta: MatrixMeta,
    pub cells: Vec<EvalCell>,
}

impl TransferMatrix {
    pub fn cell(&self, source: &str, method: Method, epsilon: f32, target: &str) -> Option<&EvalCell> {
        self.cells.iter().find(|c| {
            c.source == source && c.method == method && c.epsilon.to_bits() == epsilon.to_bits() && c.target == target
        })
    }

    pub fn errors(&self) -> Vec<&EvalCell> {
        self.cells.iter().filter(|c| c.error.is_some()).collect()
    }

    /// Checks that every (source, method, epsilon, target) appears exactly
    /// once.
    pub fn check_complete(&self) -> Result<()> {
        let m = &self.meta;
        let expected = m.models.len() * m.methods.len() * m.epsilons.len() * m.models.len();
        let keys: BTreeSet<_> = self.cells.iter().map(EvalCell::key).collect();
        if keys.len() != self.cells.len() {
            return Err(EvalError::Mismatch("duplicate cell keys".into()));
        }
        if self.cells.len() != expected {
            return Err(EvalError::Mismatch(format!(
                "{} cells, expected {expected}",
                self.cells.len()
            )));
        }
        Ok(())
    }
}

/// Settings shared by every cell of a matrix.
#[derive(Debug, Clone)]
pub struct CellSettings {
    pub jpeg_quality: Option<u8>,
    pub k_set: Vec<usize>,
    pub detector: Arc<dyn Detector>,
    pub workers: usize,
}

/// Evaluates every crafted set against every target. Cells that cannot be
/// computed carry an error instead of PSR values.
pub fn evaluate_sets(
    sets: &[CraftedSet],
    source_sizes: &BTreeMap<String, usize>,
    targets: &[Classifier],
    settings: &CellSettings,
) -> Vec<EvalCell> {
    let mut cells = Vec::with_capacity(sets.len() * targets.len());
    for set in sets {
        let records = set.successes();
        let failures = set.failures();
        for target in targets {
            let cell = if !failures.is_empty() {
                let (i, e) = failures[0];
                EvalCell::failed(
                    &set.source,
                    set.method,
                    set.epsilon,
                    target.id(),
                    format!(
                        "{} of {} attacks failed (first, image {i}: {e})",
                        failures.len(),
                        set.records.len()
                    ),
                )
            } else if records.is_empty() {
                EvalCell::failed(
                    &set.source,
                    set.method,
                    set.epsilon,
                    target.id(),
                    EvalError::Empty.to_string(),
                )
            } else {
                let source_size = source_sizes.get(&set.source).copied().unwrap_or(target.input_size());
                let chain = TransformChain::cross_model(
                    settings.jpeg_quality,
                    source_size,
                    target.input_size(),
                    settings.detector.clone(),
                );
                let result = attacks::with_workers(settings.workers, || {
                    evaluate_cell(&records, target, &chain, &settings.k_set)
                });
                match result {
                    Ok(Ok(cell)) => cell,
                    Ok(Err(e)) => EvalCell::failed(&set.source, set.method, set.epsilon, target.id(), e.to_string()),
                    Err(e) => EvalCell::failed(&set.source, set.method, set.epsilon, target.id(), e),
                }
            };
            if let Some(e) = &cell.error {
                log::warn!(
                    "cell {} {} eps={} -> {}: {e}",
                    cell.source,
                    cell.method,
                    cell.epsilon,
                    cell.target
                );
            }
            cells.push(cell);
        }
    }
    cells
}

/// Everything [`transfer_matrix`] needs beyond models and data.
#[derive(Debug, Clone)]
pub struct MatrixConfig {
    pub methods: Vec<Method>,
    pub epsilons: Vec<f32>,
    pub attack: AttackParams,
    pub cells: CellSettings,
    pub dataset_id: String,
    pub global_seed: u64,
}

/// Crafts on every source once per (method, epsilon) and evaluates each
/// crafted set on every target.
pub fn transfer_matrix(models: &[Classifier], eval: &[Sample], config: &MatrixConfig) -> Result<TransferMatrix> {
    let first = models
        .first()
        .ok_or_else(|| EvalError::Mismatch("transfer matrix needs at least one model".into()))?;
    if eval.is_empty() {
        return Err(EvalError::Empty);
    }
    if config.epsilons.is_empty() || config.methods.is_empty() {
        return Err(EvalError::Mismatch("empty method or epsilon set".into()));
    }
    let sets = craft(
        models,
        &config.methods,
        &config.epsilons,
        eval,
        &config.attack,
        config.cells.workers,
    )?;
    let meta = matrix_meta(models, eval.len(), first.num_classes(), config);
    let sizes = models.iter().map(|m| (m.id().to_string(), m.input_size())).collect();
    let cells = evaluate_sets(&sets, &sizes, models, &config.cells);
    Ok(TransferMatrix { meta, cells })
}

pub fn matrix_meta(
    models: &[Classifier],
    eval_samples: usize,
    num_classes: usize,
    config: &MatrixConfig,
) -> MatrixMeta {
    let (k_set, dropped_k) = effective_k_set(&config.cells.k_set, num_classes);
    if !dropped_k.is_empty() {
        log::warn!("dropping k values {dropped_k:?}: only {num_classes} classes");
    }
    MatrixMeta {
        dataset_id: config.dataset_id.clone(),
        num_classes,
        eval_samples,
        global_seed: config.global_seed,
        models: models
            .iter()
            .map(|m| ModelInfo {
                id: m.id().to_string(),
                input_size: m.input_size(),
                seed: m.provenance().seed,
            })
            .collect(),
        methods: config.methods.clone(),
        epsilons: config.epsilons.clone(),
        k_set,
        dropped_k,
        jpeg_quality: config.cells.jpeg_quality,
        alpha: config.attack.alpha,
        detector: config.cells.detector.name().to_string(),
    }
}
