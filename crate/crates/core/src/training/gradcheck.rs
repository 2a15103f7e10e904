//! Central finite-difference checks of tape gradients, run in `f64`.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::entropy::FactorizedModel;
use crate::error::Result;
use crate::nn::conv::{ConvKernel, KernelMap};
use crate::nn::layers::{conv, irn_block, irn_layout, SameScaleMaps};
use crate::nn::tape::{Mat, Tape, Var};
use crate::nn::weights::{ModelWeights, Nudge, Params};
use crate::sopa::init_weights;
use crate::sopa::nets;
use crate::tensor::{child_candidates, downsample, Coord3};
use crate::training::data::hollow_cube;
use crate::training::loss::{sample_loss, Objective, Sample, Variant};

const STEPS: [f64; 3] = [1e-6, 1e-7, 1e-8];
const PROBES: usize = 24;

/// Graphs whose gradients can be checked.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradCase {
    /// Same-scale convolution of side 1, 3 or 9, then ReLU and a 1³ head.
    Conv(usize),
    Down,
    Up,
    /// 9³ convolution onto a different coordinate set.
    Target,
    Irn,
    Sigmoid,
    /// Occupancy cross-entropy on convolution logits.
    Bce,
    /// Factorized latent rate of noisy convolution outputs.
    Rate,
    Lossless,
    Lossy,
    Residual,
}

impl GradCase {
    pub const ALL: [GradCase; 13] = [
        GradCase::Conv(1),
        GradCase::Conv(3),
        GradCase::Conv(9),
        GradCase::Down,
        GradCase::Up,
        GradCase::Target,
        GradCase::Irn,
        GradCase::Sigmoid,
        GradCase::Bce,
        GradCase::Rate,
        GradCase::Lossless,
        GradCase::Lossy,
        GradCase::Residual,
    ];
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub case: GradCase,
    pub checked: usize,
    pub max_rel_err: f64,
    /// Parameter with the largest error.
    pub worst: String,
}

fn random_coords(rng: &mut ChaCha8Rng, side: u32, n: usize) -> Vec<Coord3> {
    let mut v: Vec<Coord3> = (0..n)
        .map(|_| Coord3::new(rng.gen_range(0..side), rng.gen_range(0..side), rng.gen_range(0..side)))
        .collect();
    v.sort_unstable_by_key(|c| c.key_unchecked());
    v.dedup();
    v
}

fn random_kernel(rng: &mut ChaCha8Rng, k: usize, cin: usize, cout: usize) -> ConvKernel {
    let mut kern = ConvKernel::zeros(k, cin, cout, true);
    let bound = (3.0 / (kern.volume() * cin) as f32).sqrt();
    kern.weights.iter_mut().for_each(|v| *v = rng.gen_range(-bound..bound));
    if let Some(b) = kern.bias.as_mut() {
        b.iter_mut().for_each(|v| *v = rng.gen_range(-0.3..0.3));
    }
    kern
}

fn random_entropy(rng: &mut ChaCha8Rng, channels: usize, half_range: usize) -> FactorizedModel {
    let n = channels * (2 * half_range + 1);
    let logits = (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    FactorizedModel::from_logits(channels, half_range, logits).expect("valid shape")
}

/// Fixed inputs of one case.
struct Instance {
    weights: ModelWeights,
    coords: Vec<Coord3>,
    other: Vec<Coord3>,
    input: Vec<f64>,
    cin: usize,
    targets: Rc<Vec<bool>>,
    sample: Option<Sample>,
}

fn instance(case: GradCase, seed: u64) -> Result<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = 4;
    let mut weights = ModelWeights::new(width, 2, random_entropy(&mut rng, 2, 3));
    let coords = random_coords(&mut rng, 6, 40);
    let mut other = random_coords(&mut rng, 6, 30);
    let mut cin = 3;
    let mut sample = None;
    let rows = match case {
        GradCase::Conv(k) => {
            weights.insert("layer", random_kernel(&mut rng, k, cin, 3));
            weights.insert("head", random_kernel(&mut rng, 1, 3, 2));
            coords.len() * 2
        }
        GradCase::Sigmoid | GradCase::Bce => {
            weights.insert("layer", random_kernel(&mut rng, 3, cin, 2));
            weights.insert("head", random_kernel(&mut rng, 1, 2, 2));
            coords.len() * 2
        }
        GradCase::Down => {
            other = downsample(&coords);
            weights.insert("layer", random_kernel(&mut rng, 2, cin, 2));
            other.len() * 2
        }
        GradCase::Up => {
            other = child_candidates(&coords);
            weights.insert("layer", random_kernel(&mut rng, 2, cin, 1));
            other.len()
        }
        GradCase::Target => {
            weights.insert("layer", random_kernel(&mut rng, 9, cin, 2));
            other.len() * 2
        }
        GradCase::Irn => {
            cin = width;
            for (s, k, i, o) in irn_layout(width) {
                weights.insert(format!("blk.{s}"), random_kernel(&mut rng, k, i, o));
            }
            weights.insert("head", random_kernel(&mut rng, 1, width, 1));
            coords.len()
        }
        GradCase::Rate => {
            weights.insert("layer", random_kernel(&mut rng, 3, cin, 2));
            0
        }
        GradCase::Lossless | GradCase::Lossy | GradCase::Residual => {
            let mut w = init_weights(width, 2, 3, seed)?;
            w.entropy = random_entropy(&mut rng, 2, 3);
            for (_, k) in w.kernels_mut() {
                if let Some(b) = k.bias.as_mut() {
                    b.iter_mut().for_each(|v| *v = rng.gen_range(-0.2..0.2));
                }
            }
            weights = w;
            let (variant, steps) = match case {
                GradCase::Lossless => (Variant::Conditional, 0),
                GradCase::Lossy => (Variant::Conditional, 1),
                _ => (Variant::Residual, 1),
            };
            let off = rng.gen_range(0..3);
            sample = Some(Sample {
                current: hollow_cube(4, 2 + off, 6),
                reference: Some(hollow_cube(4, 3, 6)),
                variant,
                lossy_steps: steps,
                noise_seed: rng.gen(),
            });
            0
        }
    };
    let input = (0..coords.len() * cin).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let targets = Rc::new((0..rows).map(|_| rng.gen_bool(0.4)).collect());
    Ok(Instance { weights, coords, other, input, cin, targets, sample })
}

fn build(case: GradCase, inst: &Instance, tape: &mut Tape<f64>, params: &mut Params<'_, f64>) -> Result<Var> {
    let x = tape.leaf(Mat::new(inst.coords.len(), inst.cin, inst.input.clone()));
    let same = |k| Rc::new(KernelMap::same_scale(&inst.coords, &inst.coords, k));
    match case {
        GradCase::Conv(k) => {
            let y = conv(tape, params, "layer", x, &same(k))?;
            let y = tape.relu(y);
            let y = conv(tape, params, "head", y, &same(1))?;
            tape.bce_logits(y, inst.targets.clone())
        }
        GradCase::Sigmoid => {
            let y = conv(tape, params, "layer", x, &same(3))?;
            let y = tape.sigmoid(y);
            let y = conv(tape, params, "head", y, &same(1))?;
            tape.bce_logits(y, inst.targets.clone())
        }
        GradCase::Bce => {
            let y = conv(tape, params, "layer", x, &same(3))?;
            let y = tape.scale(y, 2.5);
            let y = conv(tape, params, "head", y, &same(1))?;
            tape.bce_logits(y, inst.targets.clone())
        }
        GradCase::Down => {
            let map = Rc::new(KernelMap::down(&inst.coords, &inst.other));
            let y = conv(tape, params, "layer", x, &map)?;
            tape.bce_logits(y, inst.targets.clone())
        }
        GradCase::Up => {
            let map = Rc::new(KernelMap::up(&inst.coords, &inst.other));
            let y = conv(tape, params, "layer", x, &map)?;
            tape.bce_logits(y, inst.targets.clone())
        }
        GradCase::Target => {
            let map = Rc::new(KernelMap::same_scale(&inst.coords, &inst.other, 9));
            let y = conv(tape, params, "layer", x, &map)?;
            tape.bce_logits(y, inst.targets.clone())
        }
        GradCase::Irn => {
            let maps = SameScaleMaps::new(&inst.coords);
            let y = irn_block(tape, params, "blk", x, &maps)?;
            let y = conv(tape, params, "head", y, &maps.k1)?;
            tape.bce_logits(y, inst.targets.clone())
        }
        GradCase::Rate => {
            let y = conv(tape, params, "layer", x, &same(3))?;
            let y = tape.scale(y, 2.0);
            let lifted = nets::lift_latent(tape, y, &inst.coords, &inst.coords, 0)?;
            let noise = (0..inst.coords.len() * 2).map(|i| ((i * 7919) % 1000) as f64 / 1000.0 - 0.5).collect();
            let n = tape.leaf(Mat::new(inst.coords.len(), 2, noise));
            let noisy = tape.add(lifted, n)?;
            let logits = params.entropy_logits(tape);
            tape.factorized_rate(noisy, logits, 3)
        }
        GradCase::Lossless | GradCase::Lossy | GradCase::Residual => {
            let sample = inst.sample.as_ref().expect("network cases carry a sample");
            let objective = if case == GradCase::Lossless { Objective::Lossless } else { Objective::Joint };
            Ok(sample_loss(tape, params, sample, objective, 0.7)?.total)
        }
    }
}

fn loss_with(case: GradCase, inst: &Instance, nudge: Nudge) -> Result<f64> {
    let mut tape = Tape::<f64>::new();
    let mut params = Params::<f64>::with_nudge(&inst.weights, nudge);
    let l = build(case, inst, &mut tape, &mut params)?;
    Ok(tape.value(l).scalar())
}

/// Compares analytic gradients with central differences at a seeded sample
/// of parameters (every bound tensor is probed at least once).
pub fn grad_check(case: GradCase, seed: u64) -> Result<GradReport> {
    let inst = instance(case, seed)?;
    let mut tape = Tape::<f64>::new();
    let mut params = Params::<f64>::new(&inst.weights);
    let loss = build(case, &inst, &mut tape, &mut params)?;
    let grads = tape.backward(loss)?;

    let mut tensors: Vec<(String, bool, Var)> = Vec::new();
    for (path, &(w, b)) in params.bound() {
        tensors.push((path.clone(), false, w));
        if let Some(b) = b {
            tensors.push((path.clone(), true, b));
        }
    }
    if let Some(e) = params.bound_entropy() {
        tensors.push(("entropy".into(), false, e));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfd);
    let mut probes: Vec<(usize, usize)> = Vec::new();
    for (t, (_, _, v)) in tensors.iter().enumerate() {
        probes.push((t, rng.gen_range(0..tape.value(*v).data.len())));
    }
    while probes.len() < PROBES.max(tensors.len()) {
        let t = rng.gen_range(0..tensors.len());
        probes.push((t, rng.gen_range(0..tape.value(tensors[t].2).data.len())));
    }

    let base = tape.value(loss).scalar();
    let mut report = GradReport { case, checked: 0, max_rel_err: 0.0, worst: String::new() };
    for (t, index) in probes {
        let (path, bias, var) = &tensors[t];
        let analytic = grads.get(*var).map(|g| g.data[index]).unwrap_or(0.0);
        let nudge = |delta| Nudge { path: path.clone(), bias: *bias, index, delta };
        let numeric = numeric_derivative(base, |d| loss_with(case, &inst, nudge(d)))?;
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        report.checked += 1;
        if err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst = format!("{path}{}[{index}]", if *bias { ":b" } else { ":w" });
        }
    }
    Ok(report)
}

/// Central difference at the largest step whose one-sided differences agree
/// up to roundoff. A ReLU kink inside the stencil shows up as disagreement
/// and forces a smaller step.
fn numeric_derivative(base: f64, mut loss: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    let mut best = (f64::INFINITY, 0.0);
    for h in STEPS {
        let (plus, minus) = (loss(h)?, loss(-h)?);
        let (fwd, bwd) = ((plus - base) / h, (base - minus) / h);
        let central = (plus - minus) / (2.0 * h);
        let roundoff = 256.0 * f64::EPSILON * base.abs().max(1.0) / h;
        let spread = (fwd - bwd).abs();
        if spread <= 1e-3 * fwd.abs().max(bwd.abs()) + roundoff {
            return Ok(central);
        }
        if spread < best.0 {
            best = (spread, central);
        }
    }
    Ok(best.1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shrinks_step_across_kink() {
        let x0 = 4e-7;
        let f = |d: f64| Ok((x0 + d).max(0.0_f64) * 3.0 + d);
        let d = numeric_derivative(f(0.0).unwrap(), f).unwrap();
        assert!((d - 4.0).abs() < 1e-6, "{d}");
        let smooth = |d: f64| Ok((1.0 + d).powi(3));
        let d = numeric_derivative(1.0, smooth).unwrap();
        assert!((d - 3.0).abs() < 1e-6, "{d}");
    }

    #[test]
    fn every_case_passes_for_one_seed() {
        for case in GradCase::ALL {
            let r = grad_check(case, 1).unwrap();
            assert!(r.max_rel_err < 1e-3, "{r:?}");
            assert!(r.checked >= PROBES);
        }
    }
}
