//! Training objectives. The network graph is the one the codec runs, with
//! ground-truth occupancy fed to every stage and additive uniform noise in
//! place of latent rounding.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustc_hash::FxHashSet;

use crate::codec::base_scale;
use crate::entropy::FactorizedModel;
use crate::error::{Error, Result};
use crate::nn::layers::SameScaleMaps;
use crate::nn::real::Real;
use crate::nn::tape::{interp, softmax_rows, Mat, Tape, Var};
use crate::nn::weights::Params;
use crate::sopa::layout::{PREDICTOR, RESIDUAL_PREDICTOR};
use crate::sopa::nets::{self, CoordPyramid};
use crate::sopa::OccupancyPrediction;
use crate::tensor::{Coord3, SparseTensor3};

/// Which parts of the model a training step exercises.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    /// Eight-stage occupancy coding of every scale.
    Lossless,
    /// Eight-stage scales up to `m`, one-stage reconstruction and latent rate above.
    Lossy,
    /// Both: eight-stage over every scale plus the lossy terms.
    Joint,
}

/// How a sample uses its reference frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Intra,
    Conditional,
    Residual,
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub current: SparseTensor3,
    pub reference: Option<SparseTensor3>,
    pub variant: Variant,
    /// Lossy steps above the latent (ignored by the lossless objective).
    pub lossy_steps: u8,
    pub noise_seed: u64,
}

/// Occupancy cost in bits: `Σ -log2 p(b)`.
pub fn bce_loss(pred: &OccupancyPrediction, truth: &[bool]) -> Result<f64> {
    if pred.probs.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} probabilities for {} occupancy bits",
            pred.probs.len(),
            truth.len()
        )));
    }
    Ok(pred
        .probs
        .iter()
        .zip(truth)
        .map(|(&p, &b)| {
            let p = p as f64;
            -if b { p.log2() } else { (1.0 - p).log2() }
        })
        .sum())
}

/// Rate in bits of noisy (continuous) latents under the model's logits,
/// row-major with `model.channels` columns.
pub fn rate_loss(noisy: &[f32], model: &FactorizedModel) -> Result<f64> {
    if model.channels == 0 || !noisy.len().is_multiple_of(model.channels) {
        return Err(Error::Shape("latent values do not fill whole rows".into()));
    }
    let logits = Mat::new(
        model.channels,
        model.symbols(),
        model.logits.iter().map(|&v| v as f64).collect(),
    );
    let pmf = softmax_rows(&logits);
    let s = model.symbols();
    let mut bits = 0.0;
    for (i, &v) in noisy.iter().enumerate() {
        let c = i % model.channels;
        let (p, ..) = interp(&pmf[c * s..(c + 1) * s], v as f64, model.half_range);
        bits -= p.log2();
    }
    Ok(bits)
}

pub fn total_loss(bce: f64, rate: f64, lambda: f64) -> f64 {
    bce + lambda * rate
}

/// Loss terms recorded for one sample.
pub(crate) struct LossVars {
    pub bce: Var,
    pub rate: Option<Var>,
    /// `(bce + λ rate) / points`.
    pub total: Var,
    pub points: usize,
}

fn noise_leaf<T: Real>(tape: &mut Tape<T>, rows: usize, cols: usize, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| T::from_f32(rng.gen_range(-0.5f32..0.5))).collect();
    tape.leaf(Mat::new(rows, cols, data))
}

fn sum_scalars<T: Real>(tape: &mut Tape<T>, terms: &[Var]) -> Result<Var> {
    let mut acc = match terms.first() {
        Some(&v) => v,
        None => tape.leaf(Mat::zeros(1, 1)),
    };
    for &t in &terms[1.min(terms.len())..] {
        acc = tape.add(acc, t)?;
    }
    Ok(acc)
}

struct RefFeatures {
    pyr: CoordPyramid,
    feats: Vec<Var>,
}

impl RefFeatures {
    fn temporal<T: Real>(
        this: Option<&Self>,
        tape: &mut Tape<T>,
        params: &mut Params<'_, T>,
        scale: u8,
        coords: &[Coord3],
        width: usize,
    ) -> Result<Var> {
        match this {
            Some(r) => {
                let i = (r.pyr.top() - 1 - scale) as usize;
                nets::transfer(tape, params, PREDICTOR, r.feats[i], r.pyr.at(scale), coords)
            }
            None => Ok(nets::zeros(tape, coords.len(), width)),
        }
    }
}

fn truth_mask(cands: &[Coord3], truth: &FxHashSet<Coord3>) -> Rc<Vec<bool>> {
    Rc::new(cands.iter().map(|c| truth.contains(c)).collect())
}

pub(crate) fn sample_loss<T: Real>(
    tape: &mut Tape<T>,
    params: &mut Params<'_, T>,
    sample: &Sample,
    objective: Objective,
    lambda: f64,
) -> Result<LossVars> {
    let weights = params.weights();
    let width = weights.width;
    let cur = &sample.current;
    let n = cur.bit_depth();
    if cur.is_empty() {
        return Err(Error::Config("training frames must not be empty".into()));
    }
    let steps = match objective {
        Objective::Lossless => 0,
        _ => sample.lossy_steps,
    };
    if steps >= n.max(1) || (objective != Objective::Lossless && steps == 0) {
        return Err(Error::Config(format!("{steps} lossy steps do not fit bit depth {n}")));
    }
    let m = n - steps;
    let s0 = base_scale(m);
    let top8 = if objective == Objective::Lossy { m } else { n };
    let pyr = CoordPyramid::new(cur.coords().to_vec(), n, s0);

    let reference = match (sample.variant, &sample.reference) {
        (Variant::Intra, _) => None,
        (_, Some(r)) => Some(r),
        (_, None) => return Err(Error::Config("inter samples need a reference frame".into())),
    };
    let ctx = match (sample.variant, reference) {
        (Variant::Conditional, Some(r)) => {
            let rp = CoordPyramid::new(r.coords().to_vec(), n, s0);
            let feats = nets::extractor(tape, params, &rp)?;
            Some(RefFeatures { pyr: rp, feats })
        }
        _ => None,
    };

    let mut bce_terms = Vec::new();
    for s in s0..top8 {
        let coords = pyr.at(s);
        let maps = SameScaleMaps::new(coords);
        let sp = nets::spatial(tape, params, &maps)?;
        let tm = RefFeatures::temporal(ctx.as_ref(), tape, params, s, coords, width)?;
        let bundle = tape.concat(&[sp, tm])?;
        let truth: FxHashSet<Coord3> = pyr.at(s + 1).iter().copied().collect();
        let stages = nets::sopa8(tape, params, bundle, coords, &maps, |_, cands, _| {
            Ok(cands.iter().map(|c| truth.contains(c)).collect())
        })?;
        for st in stages {
            bce_terms.push(tape.bce_logits(st.logits, Rc::new(st.occupied))?);
        }
    }

    let mut rate = None;
    if steps > 0 {
        let enc_pyr = CoordPyramid::new(cur.coords().to_vec(), n, m);
        let coords_m = enc_pyr.at(m).clone();
        let y = nets::encoder(tape, params, &enc_pyr)?;
        let noise = noise_leaf(tape, coords_m.len(), weights.latent_channels, sample.noise_seed);
        let logits = params.entropy_logits(tape);
        let half = weights.entropy.half_range;
        let y_hat = match (sample.variant, reference) {
            (Variant::Residual, Some(r)) => {
                let rp = CoordPyramid::new(r.coords().to_vec(), n, m);
                let y_ref = nets::encoder(tape, params, &rp)?;
                let pred = nets::transfer(tape, params, RESIDUAL_PREDICTOR, y_ref, rp.at(m), &coords_m)?;
                let neg = tape.scale(pred, -T::one());
                let resid = tape.add(y, neg)?;
                let noisy = tape.add(resid, noise)?;
                rate = Some(tape.factorized_rate(noisy, logits, half)?);
                tape.add(pred, noisy)?
            }
            _ => {
                let noisy = tape.add(y, noise)?;
                rate = Some(tape.factorized_rate(noisy, logits, half)?);
                noisy
            }
        };
        for s in m..n {
            let coords = pyr.at(s);
            let maps = SameScaleMaps::new(coords);
            let sp = nets::spatial(tape, params, &maps)?;
            let lifted = nets::lift_latent(tape, y_hat, &coords_m, coords, s - m)?;
            let tm = RefFeatures::temporal(ctx.as_ref(), tape, params, s, coords, width)?;
            let bundle = tape.concat(&[sp, lifted, tm])?;
            let (cands, logits) = nets::sopa1(tape, params, bundle, coords, &maps)?;
            let truth: FxHashSet<Coord3> = pyr.at(s + 1).iter().copied().collect();
            bce_terms.push(tape.bce_logits(logits, truth_mask(&cands, &truth))?);
        }
    }

    let bce = sum_scalars(tape, &bce_terms)?;
    let mut total = bce;
    if let Some(r) = rate {
        let weighted = tape.scale(r, T::from_f64(lambda));
        total = tape.add(total, weighted)?;
    }
    let total = tape.scale(total, T::from_f64(1.0 / cur.len() as f64));
    Ok(LossVars { bce, rate, total, points: cur.len() })
}
