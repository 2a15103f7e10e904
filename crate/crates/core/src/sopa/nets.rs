//! Network graphs recorded on a tape. The codec runs them in `f32`; training
//! and gradient checks reuse the same functions so every path shares one
//! definition.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::nn::conv::{CoordIndex, KernelMap};
use crate::nn::layers::{conv, irn_stack, SameScaleMaps};
use crate::nn::real::{sigmoid, Real};
use crate::nn::tape::{Mat, Tape, Var};
use crate::nn::weights::Params;
use crate::sopa::layout::{
    ENCODER, ENCODER_LATENT, EXTRACTOR, IRN_BLOCKS, PREDICTOR_KERNEL, SOPA1, SOPA8, SPATIAL,
};
use crate::tensor::{child_candidates, downsample, octant_index, Coord3};

/// Lower clamp applied to every coded occupancy probability.
pub const P_MIN: f64 = 1.0 / 32768.0;

pub(crate) fn clamp_prob<T: Real>(p: T) -> T {
    let lo = T::from_f64(P_MIN);
    let hi = T::from_f64(1.0 - P_MIN);
    p.max(lo).min(hi)
}

/// Coordinate sets of one frame from scale `top` down to `lowest`.
#[derive(Clone, Debug)]
pub struct CoordPyramid {
    top: u8,
    levels: Vec<Rc<Vec<Coord3>>>,
}

impl CoordPyramid {
    /// `coords` must be Morton-sorted and unique at scale `top`.
    pub fn new(coords: Vec<Coord3>, top: u8, lowest: u8) -> Self {
        debug_assert!(lowest <= top);
        let mut levels = vec![Rc::new(coords)];
        for _ in lowest..top {
            let next = downsample(levels.last().unwrap());
            levels.push(Rc::new(next));
        }
        Self { top, levels }
    }

    pub fn top(&self) -> u8 {
        self.top
    }

    pub fn lowest(&self) -> u8 {
        self.top + 1 - self.levels.len() as u8
    }

    pub fn at(&self, scale: u8) -> &Rc<Vec<Coord3>> {
        &self.levels[(self.top - scale) as usize]
    }
}

pub(crate) fn ones<T: Real>(tape: &mut Tape<T>, rows: usize) -> Var {
    tape.leaf(Mat::new(rows, 1, vec![T::one(); rows]))
}

pub(crate) fn zeros<T: Real>(tape: &mut Tape<T>, rows: usize, cols: usize) -> Var {
    tape.leaf(Mat::zeros(rows, cols))
}

/// Extractor or encoder trunk: `steps` stride-2 downsamplings starting from
/// the geometry at the pyramid top, each followed by ReLU and an IRN stack.
/// Entry `i` of the result holds features at scale `top - 1 - i`.
pub(crate) fn feature_pyramid<T: Real>(
    tape: &mut Tape<T>,
    params: &mut Params<'_, T>,
    prefix: &str,
    pyr: &CoordPyramid,
    steps: usize,
) -> Result<Vec<Var>> {
    let top = pyr.top();
    let mut x = ones(tape, pyr.at(top).len());
    let mut out = Vec::with_capacity(steps);
    for i in 0..steps {
        let s = top - 1 - i as u8;
        let map = Rc::new(KernelMap::down(pyr.at(s + 1), pyr.at(s)));
        let path = if i == 0 { format!("{prefix}.down0") } else { format!("{prefix}.down") };
        x = conv(tape, params, &path, x, &map)?;
        x = tape.relu(x);
        let maps = SameScaleMaps::new(pyr.at(s));
        x = irn_stack(tape, params, prefix, IRN_BLOCKS, x, &maps)?;
        out.push(x);
    }
    Ok(out)
}

pub(crate) fn extractor<T: Real>(
    tape: &mut Tape<T>,
    params: &mut Params<'_, T>,
    pyr: &CoordPyramid,
) -> Result<Vec<Var>> {
    let steps = (pyr.top() - pyr.lowest()) as usize;
    feature_pyramid(tape, params, EXTRACTOR, pyr, steps)
}

/// Continuous latent at the pyramid's lowest scale.
pub(crate) fn encoder<T: Real>(
    tape: &mut Tape<T>,
    params: &mut Params<'_, T>,
    pyr: &CoordPyramid,
) -> Result<Var> {
    let steps = (pyr.top() - pyr.lowest()) as usize;
    if steps == 0 {
        return Err(Error::Config("the latent encoder needs at least one downscaling step".into()));
    }
    let feats = feature_pyramid(tape, params, ENCODER, pyr, steps)?;
    let low = pyr.at(pyr.lowest());
    let k1 = Rc::new(KernelMap::same_scale(low, low, 1));
    conv(tape, params, ENCODER_LATENT, *feats.last().unwrap(), &k1)
}

/// Target-coordinate convolution with a 9³ window from `src` onto `dst`.
pub(crate) fn transfer<T: Real>(
    tape: &mut Tape<T>,
    params: &mut Params<'_, T>,
    path: &str,
    src: Var,
    src_coords: &[Coord3],
    dst_coords: &[Coord3],
) -> Result<Var> {
    let map = Rc::new(KernelMap::same_scale(src_coords, dst_coords, PREDICTOR_KERNEL));
    conv(tape, params, path, src, &map)
}

/// Spatial prior of the current frame at one scale.
pub(crate) fn spatial<T: Real>(
    tape: &mut Tape<T>,
    params: &mut Params<'_, T>,
    maps: &SameScaleMaps,
) -> Result<Var> {
    let x = ones(tape, maps.k3.n_out);
    let y = conv(tape, params, SPATIAL, x, &maps.k3)?;
    Ok(tape.relu(y))
}

/// Gathers, for each coordinate at scale `s`, the latent row of its ancestor
/// at the latent scale.
pub(crate) fn lift_latent<T: Real>(
    tape: &mut Tape<T>,
    latent: Var,
    latent_coords: &[Coord3],
    coords: &[Coord3],
    levels_up: u8,
) -> Result<Var> {
    let index = CoordIndex::new(latent_coords);
    let rows = coords
        .iter()
        .map(|c| {
            let a = Coord3::new(c.x >> levels_up, c.y >> levels_up, c.z >> levels_up);
            index
                .get(a)
                .ok_or_else(|| Error::Protocol(format!("{a:?} has no latent ancestor")))
        })
        .collect::<Result<Vec<u32>>>()?;
    tape.gather(latent, Rc::new(rows))
}

/// Everything after the prior bundle up to the upsampled candidate features.
fn sopa_trunk<T: Real>(
    tape: &mut Tape<T>,
    params: &mut Params<'_, T>,
    prefix: &str,
    bundle: Var,
    coords: &[Coord3],
    maps: &SameScaleMaps,
) -> Result<(Vec<Coord3>, Var, SameScaleMaps)> {
    let x = conv(tape, params, &format!("{prefix}.fuse"), bundle, &maps.k1)?;
    let x = tape.relu(x);
    let x = irn_stack(tape, params, &format!("{prefix}.pre"), IRN_BLOCKS, x, maps)?;
    let cands = child_candidates(coords);
    let up = Rc::new(KernelMap::up(coords, &cands));
    let x = conv(tape, params, &format!("{prefix}.up"), x, &up)?;
    let x = tape.relu(x);
    let cmaps = SameScaleMaps::new(&cands);
    let x = irn_stack(tape, params, &format!("{prefix}.post"), IRN_BLOCKS, x, &cmaps)?;
    Ok((cands, x, cmaps))
}

fn head<T: Real>(
    tape: &mut Tape<T>,
    params: &mut Params<'_, T>,
    prefix: &str,
    x: Var,
    k1: &Rc<KernelMap>,
) -> Result<Var> {
    let x = tape.relu(x);
    let x = conv(tape, params, &format!("{prefix}.head0"), x, k1)?;
    let x = tape.relu(x);
    conv(tape, params, &format!("{prefix}.head1"), x, k1)
}

pub(crate) fn probs_of<T: Real>(tape: &Tape<T>, logits: Var) -> Vec<T> {
    tape.value(logits).data.iter().map(|&z| clamp_prob(sigmoid(z))).collect()
}

/// One-shot prediction of all child candidates.
pub(crate) fn sopa1<T: Real>(
    tape: &mut Tape<T>,
    params: &mut Params<'_, T>,
    bundle: Var,
    coords: &[Coord3],
    maps: &SameScaleMaps,
) -> Result<(Vec<Coord3>, Var)> {
    let (cands, x, cmaps) = sopa_trunk(tape, params, SOPA1, bundle, coords, maps)?;
    let logits = head(tape, params, SOPA1, x, &cmaps.k1)?;
    Ok((cands, logits))
}

/// Output of one octant group.
pub(crate) struct Stage<T> {
    pub coords: Vec<Coord3>,
    pub logits: Var,
    pub probs: Vec<T>,
    pub occupied: Vec<bool>,
}

/// Eight-stage prediction. After stage `g` the callback reports which of the
/// stage's candidates are occupied; later stages see those voxels through a
/// per-stage 3³ convolution over everything decided so far.
pub(crate) fn sopa8<T, F>(
    tape: &mut Tape<T>,
    params: &mut Params<'_, T>,
    bundle: Var,
    coords: &[Coord3],
    maps: &SameScaleMaps,
    mut decide: F,
) -> Result<Vec<Stage<T>>>
where
    T: Real,
    F: FnMut(u8, &[Coord3], &[T]) -> Result<Vec<bool>>,
{
    let (cands, x, _) = sopa_trunk(tape, params, SOPA8, bundle, coords, maps)?;
    let mut decided: Vec<Coord3> = Vec::new();
    let mut stages = Vec::with_capacity(8);
    for g in 0..8u8 {
        let rows: Vec<u32> = (g as usize..cands.len()).step_by(8).map(|i| i as u32).collect();
        let stage_coords: Vec<Coord3> = rows.iter().map(|&i| cands[i as usize]).collect();
        debug_assert!(stage_coords.iter().all(|&c| octant_index(c) == g));
        let feats = tape.gather(x, Rc::new(rows))?;
        let known = ones(tape, decided.len());
        let cmap = Rc::new(KernelMap::same_scale(&decided, &stage_coords, 3));
        let cond = conv(tape, params, &format!("{SOPA8}.stage{g}.cond"), known, &cmap)?;
        let feats = tape.add(feats, cond)?;
        let k1 = Rc::new(KernelMap::same_scale(&stage_coords, &stage_coords, 1));
        let logits = head(tape, params, SOPA8, feats, &k1)?;
        let probs = probs_of(tape, logits);
        let occupied = decide(g, &stage_coords, &probs)?;
        if occupied.len() != stage_coords.len() {
            return Err(Error::Protocol(format!(
                "stage {g} has {} candidates but {} decisions",
                stage_coords.len(),
                occupied.len()
            )));
        }
        decided.extend(stage_coords.iter().zip(&occupied).filter(|(_, &o)| o).map(|(c, _)| *c));
        decided.sort_unstable_by_key(|c| c.key_unchecked());
        stages.push(Stage { coords: stage_coords, logits, probs, occupied });
    }
    Ok(stages)
}
