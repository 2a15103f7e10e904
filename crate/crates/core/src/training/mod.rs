//! Desk-scale training of every learned component.

pub mod data;
pub mod gradcheck;
pub mod loss;

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::entropy::DEFAULT_HALF_RANGE;
use crate::error::{Error, Result};
use crate::nn::tape::Tape;
use crate::nn::weights::{ModelWeights, Params};
use crate::sopa::{init_weights, validate_layout};
use crate::tensor::SparseTensor3;

pub use data::{hollow_cube, synthetic_sequence, ShapeKind, ShapeMotion};
pub use gradcheck::{grad_check, GradCase, GradReport};
pub use loss::{bce_loss, rate_loss, total_loss, Objective, Sample, Variant};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataKind {
    /// Moving synthetic shapes.
    Shapes,
    /// One static hollow cube repeated in every frame.
    Cube,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lambda: f64,
    pub learning_rate: f64,
    pub steps: usize,
    pub seed: u64,
    pub width: usize,
    pub latent_channels: usize,
    pub half_range: usize,
    pub bit_depth: u8,
    pub objective: Objective,
    pub data: DataKind,
    pub sequences: usize,
    pub frames: usize,
    pub min_lossy_steps: u8,
    pub max_lossy_steps: u8,
    pub intra_fraction: f64,
    pub residual_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            learning_rate: 1e-3,
            steps: 200,
            seed: 0,
            width: 8,
            latent_channels: 4,
            half_range: DEFAULT_HALF_RANGE,
            bit_depth: 6,
            objective: Objective::Joint,
            data: DataKind::Shapes,
            sequences: 8,
            frames: 4,
            min_lossy_steps: 1,
            max_lossy_steps: 3,
            intra_fraction: 0.5,
            residual_fraction: 0.0,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}` has an invalid value `{value}`")))
}

impl TrainConfig {
    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "lambda" => c.lambda = parse_value(key, value)?,
                "learning_rate" => c.learning_rate = parse_value(key, value)?,
                "steps" => c.steps = parse_value(key, value)?,
                "seed" => c.seed = parse_value(key, value)?,
                "width" => c.width = parse_value(key, value)?,
                "latent_channels" => c.latent_channels = parse_value(key, value)?,
                "half_range" => c.half_range = parse_value(key, value)?,
                "bit_depth" => c.bit_depth = parse_value(key, value)?,
                "sequences" => c.sequences = parse_value(key, value)?,
                "frames" => c.frames = parse_value(key, value)?,
                "min_lossy_steps" => c.min_lossy_steps = parse_value(key, value)?,
                "max_lossy_steps" => c.max_lossy_steps = parse_value(key, value)?,
                "intra_fraction" => c.intra_fraction = parse_value(key, value)?,
                "residual_fraction" => c.residual_fraction = parse_value(key, value)?,
                "objective" => {
                    c.objective = match value {
                        "lossless" => Objective::Lossless,
                        "lossy" => Objective::Lossy,
                        "joint" => Objective::Joint,
                        _ => return Err(Error::Config(format!("`objective` has an invalid value `{value}`"))),
                    }
                }
                "data" => {
                    c.data = match value {
                        "shapes" => DataKind::Shapes,
                        "cube" => DataKind::Cube,
                        _ => return Err(Error::Config(format!("`data` has an invalid value `{value}`"))),
                    }
                }
                _ => return Err(Error::Config(format!("unknown key `{key}`"))),
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("`lambda` must be a finite value >= 0, got {}", self.lambda));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("`learning_rate` must be positive".into());
        }
        if self.width < 4 || !self.width.is_multiple_of(4) {
            return bad("`width` must be a positive multiple of 4".into());
        }
        if self.latent_channels == 0 || self.half_range == 0 {
            return bad("`latent_channels` and `half_range` must be at least 1".into());
        }
        if self.bit_depth < 2 || self.bit_depth > 10 {
            return bad("`bit_depth` must lie in 2..=10 for toy training".into());
        }
        if self.sequences == 0 || self.frames == 0 {
            return bad("`sequences` and `frames` must be at least 1".into());
        }
        if self.objective != Objective::Lossless
            && (self.min_lossy_steps == 0
                || self.min_lossy_steps > self.max_lossy_steps
                || self.max_lossy_steps >= self.bit_depth)
        {
            return bad("lossy steps must satisfy 1 <= min <= max < bit_depth".into());
        }
        for (k, v) in [("intra_fraction", self.intra_fraction), ("residual_fraction", self.residual_fraction)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("`{k}` must lie in [0, 1]"));
            }
        }
        if self.intra_fraction + self.residual_fraction > 1.0 {
            return bad("`intra_fraction + residual_fraction` exceeds 1".into());
        }
        Ok(())
    }

    /// Training sequences implied by the config.
    pub fn dataset(&self) -> Vec<Vec<SparseTensor3>> {
        match self.data {
            DataKind::Shapes => (0..self.sequences as u64)
                .map(|i| synthetic_sequence(self.seed.wrapping_mul(1_000_003).wrapping_add(i), self.bit_depth, self.frames))
                .collect(),
            DataKind::Cube => {
                let side = 1u32 << self.bit_depth;
                let cube = hollow_cube(self.bit_depth, side / 4, side / 2);
                vec![vec![cube; self.frames]]
            }
        }
    }
}

/// Losses of one step (bits are per sample, `total` is per point).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepStats {
    pub bce_bits: f64,
    pub rate_bits: f64,
    pub total: f64,
    pub points: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub weights: ModelWeights,
    pub history: Vec<StepStats>,
}

/// Adam with bias correction.
struct Adam {
    lr: f64,
    b1: f64,
    b2: f64,
    eps: f64,
    t: i32,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    fn new(lr: f64) -> Self {
        Self { lr, b1: 0.9, b2: 0.999, eps: 1e-8, t: 0, moments: BTreeMap::new() }
    }

    fn update(&mut self, key: &str, params: &mut [f32], grad: &[f32]) {
        let (m, v) = self
            .moments
            .entry(key.to_string())
            .or_insert_with(|| (vec![0.0; params.len()], vec![0.0; params.len()]));
        let c1 = 1.0 - self.b1.powi(self.t);
        let c2 = 1.0 - self.b2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i] as f64;
            m[i] = self.b1 * m[i] + (1.0 - self.b1) * g;
            v[i] = self.b2 * v[i] + (1.0 - self.b2) * g * g;
            let step = self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            params[i] -= step as f32;
        }
    }
}

fn draw_sample(
    rng: &mut ChaCha8Rng,
    data: &[Vec<SparseTensor3>],
    config: &TrainConfig,
) -> Sample {
    let seq = &data[rng.gen_range(0..data.len())];
    let t = if seq.len() > 1 { rng.gen_range(1..seq.len()) } else { 0 };
    let reference = if seq.len() > 1 { seq[t - 1].clone() } else { seq[0].clone() };
    let u: f64 = rng.gen();
    let steps = rng.gen_range(config.min_lossy_steps.max(1)..=config.max_lossy_steps.max(1));
    let noise_seed = rng.gen();
    let variant = if u < config.intra_fraction {
        Variant::Intra
    } else if config.objective != Objective::Lossless
        && u < config.intra_fraction + config.residual_fraction
    {
        Variant::Residual
    } else {
        Variant::Conditional
    };
    Sample {
        current: seq[t].clone(),
        reference: Some(reference),
        variant,
        lossy_steps: steps.min(config.bit_depth - 1),
        noise_seed,
    }
}

/// Loss statistics of one sample without updating anything.
pub fn evaluate(weights: &ModelWeights, sample: &Sample, config: &TrainConfig) -> Result<StepStats> {
    let mut tape = Tape::<f32>::new();
    let mut params = Params::<f32>::new(weights);
    let v = loss::sample_loss(&mut tape, &mut params, sample, config.objective, config.lambda)?;
    Ok(StepStats {
        bce_bits: tape.value(v.bce).scalar() as f64,
        rate_bits: v.rate.map(|r| tape.value(r).scalar() as f64).unwrap_or(0.0),
        total: tape.value(v.total).scalar() as f64,
        points: v.points,
    })
}

/// One fixed sample per training sequence, for before/after comparisons.
pub fn probe_samples(config: &TrainConfig) -> Vec<Sample> {
    let data = config.dataset();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x05ee_d0f9_e0be);
    data.iter().map(|seq| draw_sample(&mut rng, std::slice::from_ref(seq), config)).collect()
}

/// Trains from a seeded initialization on the configured synthetic data.
pub fn train(config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let weights = init_weights(config.width, config.latent_channels, config.half_range, config.seed)?;
    train_from(weights, config, &config.dataset())
}

pub fn train_toy(config: &TrainConfig) -> Result<ModelWeights> {
    Ok(train(config)?.weights)
}

/// Continues training `weights` on `data` (a list of frame sequences).
pub fn train_from(
    mut weights: ModelWeights,
    config: &TrainConfig,
    data: &[Vec<SparseTensor3>],
) -> Result<TrainOutcome> {
    config.validate()?;
    validate_layout(&weights)?;
    if data.is_empty() || data.iter().any(|s| s.is_empty() || s.iter().any(|f| f.is_empty())) {
        return Err(Error::Config("training data needs non-empty sequences of non-empty frames".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7a11_5eed);
    let mut adam = Adam::new(config.learning_rate);
    let mut history = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let sample = draw_sample(&mut rng, data, config);
        let (stats, updates, entropy_grad) = {
            let mut tape = Tape::<f32>::new();
            let mut params = Params::<f32>::new(&weights);
            let v = loss::sample_loss(&mut tape, &mut params, &sample, config.objective, config.lambda)?;
            let total = tape.value(v.total).scalar();
            if !total.is_finite() {
                return Err(Error::Divergence { step, reason: format!("loss is {total}") });
            }
            let stats = StepStats {
                bce_bits: tape.value(v.bce).scalar() as f64,
                rate_bits: v.rate.map(|r| tape.value(r).scalar() as f64).unwrap_or(0.0),
                total: total as f64,
                points: v.points,
            };
            let grads = tape.backward(v.total)?;
            let mut updates = Vec::new();
            for (path, &(w, b)) in params.bound() {
                if let Some(g) = grads.get(w) {
                    updates.push((path.clone(), false, g.data.clone()));
                }
                if let Some(g) = b.and_then(|b| grads.get(b)) {
                    updates.push((path.clone(), true, g.data.clone()));
                }
            }
            let eg = params.bound_entropy().and_then(|e| grads.get(e)).map(|g| g.data.clone());
            (stats, updates, eg)
        };
        let finite = updates.iter().all(|(_, _, g)| g.iter().all(|v| v.is_finite()))
            && entropy_grad.as_ref().is_none_or(|g| g.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(Error::Divergence { step, reason: "non-finite gradient".into() });
        }
        adam.t += 1;
        for (path, bias, g) in updates {
            let k = weights.kernel_mut(&path)?;
            if bias {
                let b = k.bias.as_mut().expect("bias leaf implies a bias");
                adam.update(&format!("{path}:b"), b, &g);
            } else {
                adam.update(&format!("{path}:w"), &mut k.weights, &g);
            }
        }
        if let Some(g) = entropy_grad {
            adam.update("entropy", &mut weights.entropy.logits, &g);
            weights.entropy.invalidate();
        }
        history.push(stats);
    }
    weights.entropy.freeze();
    Ok(TrainOutcome { weights, history })
}
