//! Sign-gradient attacks under an L∞ pixel budget: FGSM, BIM and ILLC.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::{Classifier, ModelError};
use crate::raster::{Image, Sample, PIXEL_MAX};
use crate::tensor::{sign, TensorError};

#[derive(Debug, Error)]
pub enum AttackError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid attack configuration: {0}")]
    InvalidConfig(String),
    #[error("iteration {iteration}: pixel {pixel} left the budget (deviation {deviation}, epsilon {epsilon})")]
    BudgetViolation {
        iteration: usize,
        pixel: usize,
        deviation: f32,
        epsilon: f32,
    },
    #[error("could not build a worker pool: {0}")]
    Pool(String),
}

pub type Result<T> = std::result::Result<T, AttackError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Fgsm,
    Bim,
    Illc,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Fgsm, Method::Bim, Method::Illc];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Fgsm => "FGSM",
            Method::Bim => "BIM",
            Method::Illc => "ILLC",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "fgsm" => Ok(Method::Fgsm),
            "bim" => Ok(Method::Bim),
            "illc" => Ok(Method::Illc),
            other => Err(format!("unknown attack method `{other}` (expected fgsm, bim or illc)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub method: Method,
    /// Per-pixel budget in `[0, 255]` units.
    pub epsilon: f32,
    /// Step size in pixel units. Ignored by FGSM, which steps by `epsilon`.
    #[serde(default = "default_alpha")]
    pub alpha: f32,
    /// Iteration count; `None` uses [`schedule`]. Ignored by FGSM.
    #[serde(default)]
    pub n_iter: Option<usize>,
    #[serde(default)]
    pub record_trajectory: bool,
}

fn default_alpha() -> f32 {
    1.0
}

impl AttackConfig {
    pub fn new(method: Method, epsilon: f32) -> Self {
        Self {
            method,
            epsilon,
            alpha: default_alpha(),
            n_iter: None,
            record_trajectory: false,
        }
    }

    pub fn with_alpha(mut self, alpha: f32) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn with_n_iter(mut self, n_iter: usize) -> Self {
        self.n_iter = Some(n_iter);
        self
    }

    pub fn with_trajectory(mut self, record: bool) -> Self {
        self.record_trajectory = record;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(AttackError::InvalidConfig(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(AttackError::InvalidConfig(format!(
                "alpha must be finite and non-negative, got {}",
                self.alpha
            )));
        }
        if self.n_iter == Some(0) {
            return Err(AttackError::InvalidConfig("n_iter must be at least 1".into()));
        }
        Ok(())
    }

    /// Number of gradient steps the attack will take.
    pub fn iterations(&self) -> Result<usize> {
        match self.method {
            Method::Fgsm => Ok(1),
            Method::Bim | Method::Illc => match self.n_iter {
                Some(n) => Ok(n),
                None => schedule(self.epsilon),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdvRecord {
    /// Position of the image in the attacked slice.
    pub index: usize,
    pub source: String,
    pub method: Method,
    pub epsilon: f32,
    pub n_iter_used: usize,
    pub y_true: usize,
    /// Least likely class of the clean image (ILLC only).
    pub y_target: Option<usize>,
    pub x: Image,
    pub x_adv: Image,
    /// Loss against the attacked label at every iterate, starting with the
    /// clean image. Present when the trajectory was requested.
    pub losses: Option<Vec<f32>>,
    pub max_deviation: f32,
}

static BUDGET_CHECKS: AtomicU64 = AtomicU64::new(0);
static BUDGET_VIOLATIONS: AtomicU64 = AtomicU64::new(0);

/// Process-wide count of per-iteration budget checks performed and failed.
pub fn budget_check_counts() -> (u64, u64) {
    (
        BUDGET_CHECKS.load(Ordering::Relaxed),
        BUDGET_VIOLATIONS.load(Ordering::Relaxed),
    )
}

/// `min(max(c, x - eps, 0), x + eps, 255)` per pixel.
pub fn clip_eps(candidate: &Image, x: &Image, epsilon: f32) -> Result<Image> {
    candidate.check_same_shape(x, "clip_eps")?;
    let mut out = candidate.clone();
    for (o, &xv) in out.data_mut().iter_mut().zip(x.data()) {
        *o = clip_value(*o, xv, epsilon);
    }
    Ok(out)
}

fn clip_value(c: f32, x: f32, epsilon: f32) -> f32 {
    c.max(x - epsilon).max(0.0).min(x + epsilon).min(PIXEL_MAX)
}

/// `round(min(eps + 4, 1.25 eps))`, at least 1.
pub fn schedule(epsilon: f32) -> Result<usize> {
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(AttackError::InvalidConfig(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    let e = f64::from(epsilon);
    Ok(((e + 4.0).min(1.25 * e).round() as usize).max(1))
}

fn check_budget(x_adv: &Image, x: &Image, epsilon: f32, iteration: usize) -> Result<()> {
    BUDGET_CHECKS.fetch_add(1, Ordering::Relaxed);
    for (pixel, (&a, &o)) in x_adv.data().iter().zip(x.data()).enumerate() {
        let inside = a >= (o - epsilon).max(0.0) && a <= (o + epsilon).min(PIXEL_MAX);
        if !inside || !a.is_finite() {
            BUDGET_VIOLATIONS.fetch_add(1, Ordering::Relaxed);
            return Err(AttackError::BudgetViolation {
                iteration,
                pixel,
                deviation: (a - o).abs(),
                epsilon,
            });
        }
    }
    Ok(())
}

/// Direction of travel relative to the loss gradient.
#[derive(Clone, Copy)]
enum Direction {
    Ascend,
    Descend,
}

/// One attack run: the label whose loss is followed, and how.
struct Plan {
    method: Method,
    label: usize,
    direction: Direction,
    epsilon: f32,
    alpha: f32,
    n_iter: usize,
    record: bool,
}

struct Outcome {
    x_adv: Image,
    losses: Option<Vec<f32>>,
}

fn iterate(model: &Classifier, x: &Image, plan: &Plan) -> Result<Outcome> {
    let mut x_adv = x.clone();
    let mut losses = plan.record.then(|| Vec::with_capacity(plan.n_iter + 1));
    let step = match plan.direction {
        Direction::Ascend => plan.alpha,
        Direction::Descend => -plan.alpha,
    };
    for iteration in 1..=plan.n_iter {
        let g = model.loss_and_input_gradient(&x_adv, plan.label)?;
        if let Some(l) = losses.as_mut() {
            l.push(g.loss);
        }
        for ((a, &gv), &xv) in x_adv.data_mut().iter_mut().zip(g.grad.data()).zip(x.data()) {
            *a = clip_value(*a + step * sign(gv), xv, plan.epsilon);
        }
        check_budget(&x_adv, x, plan.epsilon, iteration)?;
    }
    if let Some(l) = losses.as_mut() {
        l.push(model.loss(&x_adv, plan.label)?);
    }
    Ok(Outcome { x_adv, losses })
}

fn run(model: &Classifier, x: &Image, y_true: usize, y_target: Option<usize>, plan: Plan) -> Result<AdvRecord> {
    let outcome = iterate(model, x, &plan)?;
    Ok(AdvRecord {
        index: 0,
        source: model.id().to_string(),
        method: plan.method,
        epsilon: plan.epsilon,
        n_iter_used: plan.n_iter,
        y_true,
        y_target,
        max_deviation: outcome.x_adv.max_abs_diff(x),
        x: x.clone(),
        x_adv: outcome.x_adv,
        losses: outcome.losses,
    })
}

/// Single step: `clip_eps(x + eps * sign(∇_x J(x, y_true)))`.
pub fn fgsm(model: &Classifier, x: &Image, y_true: usize, epsilon: f32) -> Result<AdvRecord> {
    AttackConfig::new(Method::Fgsm, epsilon).validate()?;
    let plan = Plan {
        method: Method::Fgsm,
        label: y_true,
        direction: Direction::Ascend,
        epsilon,
        alpha: epsilon,
        n_iter: 1,
        record: false,
    };
    run(model, x, y_true, None, plan)
}

/// Iterated ascent on `J(., y_true)`, clipping after every step.
pub fn bim(model: &Classifier, x: &Image, y_true: usize, config: &AttackConfig) -> Result<AdvRecord> {
    expect_method(config, Method::Bim)?;
    let plan = Plan {
        method: Method::Bim,
        label: y_true,
        direction: Direction::Ascend,
        epsilon: config.epsilon,
        alpha: config.alpha,
        n_iter: config.iterations()?,
        record: config.record_trajectory,
    };
    run(model, x, y_true, None, plan)
}

/// Iterated descent on `J(., y_llc)`, where `y_llc` is the least likely
/// class of the clean image and stays fixed for every iteration.
pub fn illc(model: &Classifier, x: &Image, y_true: usize, config: &AttackConfig) -> Result<AdvRecord> {
    expect_method(config, Method::Illc)?;
    let y_llc = model.least_likely_class(x, Some(y_true))?;
    let plan = Plan {
        method: Method::Illc,
        label: y_llc,
        direction: Direction::Descend,
        epsilon: config.epsilon,
        alpha: config.alpha,
        n_iter: config.iterations()?,
        record: config.record_trajectory,
    };
    run(model, x, y_true, Some(y_llc), plan)
}

fn expect_method(config: &AttackConfig, method: Method) -> Result<()> {
    config.validate()?;
    if config.method != method {
        return Err(AttackError::InvalidConfig(format!(
            "{method} called with a {} configuration",
            config.method
        )));
    }
    Ok(())
}

/// Runs the configured attack on one image.
pub fn attack(model: &Classifier, x: &Image, y_true: usize, config: &AttackConfig) -> Result<AdvRecord> {
    match config.method {
        Method::Fgsm => {
            config.validate()?;
            fgsm(model, x, y_true, config.epsilon)
        }
        Method::Bim => bim(model, x, y_true, config),
        Method::Illc => illc(model, x, y_true, config),
    }
}

/// Runs `f` on a dedicated rayon pool with `workers` threads (0 means the
/// global pool).
pub fn with_workers<R: Send>(workers: usize, f: impl FnOnce() -> R + Send) -> std::result::Result<R, String> {
    if workers == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| e.to_string())?;
    Ok(pool.install(f))
}

/// Attacks every sample, in input order. A failure on one image is
/// returned in its slot and does not stop the others.
pub fn attack_batch(
    model: &Classifier,
    samples: &[Sample],
    config: &AttackConfig,
    parallelism: usize,
) -> Result<Vec<Result<AdvRecord>>> {
    config.validate()?;
    with_workers(parallelism, || {
        samples
            .par_iter()
            .enumerate()
            .map(|(i, s)| {
                attack(model, &s.image, s.label, config).map(|mut r| {
                    r.index = i;
                    r
                })
            })
            .collect()
    })
    .map_err(AttackError::Pool)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_model, ArchitectureDescriptor};

    fn img(vals: &[f32]) -> Image {
        Image::new(1, vals.len() / 3, vals.to_vec()).unwrap()
    }

    #[test]
    fn clip_examples() {
        let x = img(&[100.0, 250.0, 10.0]);
        let c = img(&[140.0, 300.0, 12.0]);
        let out = clip_eps(&c, &x, 32.0).unwrap();
        assert_eq!(out.data(), &[132.0, 255.0, 12.0]);
        let low = clip_eps(&img(&[-50.0, 200.0, 0.0]), &x, 32.0).unwrap();
        assert_eq!(low.data(), &[68.0, 218.0, 0.0]);
        assert_eq!(clip_eps(&out, &x, 32.0).unwrap(), out);
        assert!(clip_eps(&Image::filled(2, 2, 0.0), &x, 1.0).is_err());
    }

    #[test]
    fn schedule_values() {
        let got: Vec<usize> = [4.0, 8.0, 16.0, 32.0, 64.0, 128.0]
            .iter()
            .map(|&e| schedule(e).unwrap())
            .collect();
        assert_eq!(got, vec![5, 10, 20, 36, 68, 132]);
        assert_eq!(schedule(1.0).unwrap(), 1);
        assert_eq!(schedule(0.2).unwrap(), 1);
        assert!(schedule(0.0).is_err());
        assert!(schedule(-3.0).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(AttackConfig::new(Method::Bim, 0.0).validate().is_err());
        assert!(AttackConfig::new(Method::Bim, 4.0).with_alpha(-1.0).validate().is_err());
        assert!(AttackConfig::new(Method::Bim, 4.0).with_n_iter(0).validate().is_err());
        assert_eq!(AttackConfig::new(Method::Bim, 16.0).iterations().unwrap(), 20);
        assert_eq!(AttackConfig::new(Method::Fgsm, 16.0).iterations().unwrap(), 1);
        let m = build_model(&ArchitectureDescriptor::cnn_a(3), 0).unwrap();
        let x = Image::filled(32, 32, 100.0);
        let wrong = AttackConfig::new(Method::Illc, 4.0);
        assert!(bim(&m, &x, 0, &wrong).is_err());
    }

    #[test]
    fn zero_model_does_not_move_pixels() {
        let mut m = build_model(&ArchitectureDescriptor::cnn_a(4), 1).unwrap();
        for p in m.params_mut() {
            p.value_mut().data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let x = Image::filled(32, 32, 90.0);
        assert_eq!(fgsm(&m, &x, 2, 8.0).unwrap().x_adv, x);
        let cfg = AttackConfig::new(Method::Illc, 8.0);
        let r = illc(&m, &x, 0, &cfg).unwrap();
        assert_eq!(r.x_adv, x);
        assert_eq!(r.y_target, Some(1));
    }

    #[test]
    fn alpha_zero_is_identity_and_method_names_parse() {
        let m = build_model(&ArchitectureDescriptor::cnn_a(3), 2).unwrap();
        let x = Image::filled(32, 32, 40.0);
        let r = bim(&m, &x, 1, &AttackConfig::new(Method::Bim, 8.0).with_alpha(0.0)).unwrap();
        assert_eq!(r.x_adv, x);
        assert_eq!(r.n_iter_used, 10);
        assert_eq!("IllC".parse::<Method>().unwrap(), Method::Illc);
        assert!("pgd".parse::<Method>().is_err());
    }

    #[test]
    fn trajectory_has_one_loss_per_iterate() {
        let m = build_model(&ArchitectureDescriptor::cnn_a(3), 2).unwrap();
        let x = Image::new(32, 32, (0..32 * 32 * 3).map(|i| (i * 7 % 256) as f32).collect()).unwrap();
        let cfg = AttackConfig::new(Method::Bim, 4.0).with_trajectory(true);
        let r = bim(&m, &x, 0, &cfg).unwrap();
        assert_eq!(r.losses.as_ref().unwrap().len(), 6);
        assert!(r.max_deviation <= 4.0);
    }

    #[test]
    fn empty_batch() {
        let m = build_model(&ArchitectureDescriptor::cnn_a(3), 2).unwrap();
        let out = attack_batch(&m, &[], &AttackConfig::new(Method::Bim, 4.0), 2).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn batch_records_per_image_failures() {
        let m = build_model(&ArchitectureDescriptor::cnn_a(3), 2).unwrap();
        let good = Sample {
            image: Image::filled(32, 32, 10.0),
            label: 0,
        };
        let bad = Sample {
            image: Image::filled(16, 16, 10.0),
            label: 0,
        };
        let out = attack_batch(&m, &[good.clone(), bad, good], &AttackConfig::new(Method::Fgsm, 4.0), 1).unwrap();
        assert!(out[0].is_ok() && out[1].is_err() && out[2].is_ok());
        assert_eq!(out[2].as_ref().unwrap().index, 2);
    }
}
