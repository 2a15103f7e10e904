//! Occupancy-probability networks: feature pyramids of the reference frame,
//! the predictor that carries them onto current coordinates, and the one-
//! and eight-stage occupancy heads.

pub mod layout;
pub(crate) mod nets;

use rustc_hash::FxHashMap;

use crate::error::{Error, Result};
use crate::nn::layers::{leaf_from_tensor, tensor_from_var, SameScaleMaps};
use crate::nn::tape::{Tape, Var};
use crate::nn::weights::{ModelWeights, Params};
use crate::tensor::{Coord3, SparseTensor3};

pub use layout::{init_weights, model_layout, validate_layout, zero_weights, LayerKind, LayerSpec};
pub use nets::{CoordPyramid, P_MIN};

/// Multiscale features of a reference reconstruction, highest scale first.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameContext {
    scales: Vec<SparseTensor3>,
}

impl FrameContext {
    pub fn new(scales: Vec<SparseTensor3>) -> Result<Self> {
        for w in scales.windows(2) {
            if w[1].bit_depth() + 1 != w[0].bit_depth() {
                return Err(Error::Shape("context scales must be contiguous, highest first".into()));
            }
        }
        Ok(Self { scales })
    }

    pub fn scales(&self) -> &[SparseTensor3] {
        &self.scales
    }

    pub fn get(&self, scale: u8) -> Option<&SparseTensor3> {
        let top = self.scales.first()?.bit_depth();
        if scale > top {
            return None;
        }
        self.scales.get((top - scale) as usize)
    }

    pub fn is_empty(&self) -> bool {
        self.scales.is_empty()
    }
}

/// Spatial features of the current frame, optionally with aligned temporal
/// features from the predictor.
#[derive(Clone, Debug)]
pub struct PriorBundle {
    spatial: SparseTensor3,
    temporal: Option<SparseTensor3>,
}

impl PriorBundle {
    pub fn new(spatial: SparseTensor3, temporal: Option<SparseTensor3>) -> Result<Self> {
        if let Some(t) = &temporal {
            if !t.same_coords(&spatial) {
                return Err(Error::Shape(
                    "temporal prior is not aligned with the spatial coordinates".into(),
                ));
            }
        }
        Ok(Self { spatial, temporal })
    }

    pub fn intra(spatial: SparseTensor3) -> Self {
        Self { spatial, temporal: None }
    }

    pub fn spatial(&self) -> &SparseTensor3 {
        &self.spatial
    }

    pub fn temporal(&self) -> Option<&SparseTensor3> {
        self.temporal.as_ref()
    }

    pub fn coords(&self) -> &[Coord3] {
        self.spatial.coords()
    }

    fn concat(&self, tape: &mut Tape<f32>, width: usize) -> Result<Var> {
        let s = leaf_from_tensor(tape, &self.spatial);
        let t = match &self.temporal {
            Some(t) => leaf_from_tensor(tape, t),
            None => nets::zeros(tape, self.spatial.len(), width),
        };
        tape.concat(&[s, t])
    }
}

/// Occupancy probabilities of a set of Morton-sorted candidate voxels.
#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyPrediction {
    pub coords: Vec<Coord3>,
    pub probs: Vec<f32>,
}

/// Features of `recon` at every scale from `N - 1` down to `lowest`.
pub fn extract_pyramid(
    recon: &SparseTensor3,
    weights: &ModelWeights,
    lowest: u8,
) -> Result<FrameContext> {
    if recon.channels() != 1 {
        return Err(Error::Shape("reference reconstruction must be geometry-only".into()));
    }
    let top = recon.bit_depth();
    if lowest >= top {
        return Ok(FrameContext { scales: Vec::new() });
    }
    let pyr = CoordPyramid::new(recon.coords().to_vec(), top, lowest);
    let mut tape = Tape::<f32>::new();
    let mut params = Params::<f32>::new(weights);
    let vars = nets::extractor(&mut tape, &mut params, &pyr)?;
    let scales = vars
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            let s = top - 1 - i as u8;
            tensor_from_var(&tape, v, pyr.at(s).to_vec(), s)
        })
        .collect();
    Ok(FrameContext { scales })
}

/// Spatial prior (3³ convolution of the occupancy, then ReLU) at one scale.
pub fn spatial_prior(coords: &[Coord3], bit_depth: u8, weights: &ModelWeights) -> Result<SparseTensor3> {
    let mut tape = Tape::<f32>::new();
    let mut params = Params::<f32>::new(weights);
    let maps = SameScaleMaps::new(coords);
    let v = nets::spatial(&mut tape, &mut params, &maps)?;
    Ok(tensor_from_var(&tape, v, coords.to_vec(), bit_depth))
}

/// Carries reference features onto the current frame's coordinates with a
/// 9³ target-coordinate convolution.
pub fn predictor_transfer(
    ref_feats: &SparseTensor3,
    target_coords: &[Coord3],
    weights: &ModelWeights,
) -> Result<SparseTensor3> {
    transfer_with(layout::PREDICTOR, ref_feats, target_coords, weights)
}

pub(crate) fn transfer_with(
    path: &str,
    ref_feats: &SparseTensor3,
    target_coords: &[Coord3],
    weights: &ModelWeights,
) -> Result<SparseTensor3> {
    if !crate::tensor::is_canonical(target_coords) {
        return Err(Error::Shape("target coordinates must be Morton-sorted and unique".into()));
    }
    let mut tape = Tape::<f32>::new();
    let mut params = Params::<f32>::new(weights);
    let x = leaf_from_tensor(&mut tape, ref_feats);
    let y = nets::transfer(&mut tape, &mut params, path, x, ref_feats.coords(), target_coords)?;
    Ok(tensor_from_var(&tape, y, target_coords.to_vec(), ref_feats.bit_depth()))
}

/// Probabilities of all eight children of every bundle coordinate at once.
pub fn sopa_1stage(prior: &PriorBundle, weights: &ModelWeights) -> Result<OccupancyPrediction> {
    let mut tape = Tape::<f32>::new();
    let mut params = Params::<f32>::new(weights);
    let bundle = prior.concat(&mut tape, weights.width)?;
    let maps = SameScaleMaps::new(prior.coords());
    let (coords, logits) = nets::sopa1(&mut tape, &mut params, bundle, prior.coords(), &maps)?;
    Ok(OccupancyPrediction { coords, probs: nets::probs_of(&tape, logits) })
}

/// Eight-stage prediction in octant order 0..7. After each stage the
/// callback names the stage's occupied candidates.
pub fn sopa_8stage<F>(
    prior: &PriorBundle,
    weights: &ModelWeights,
    mut callback: F,
) -> Result<Vec<OccupancyPrediction>>
where
    F: FnMut(u8, &OccupancyPrediction) -> Result<Vec<Coord3>>,
{
    let mut tape = Tape::<f32>::new();
    let mut params = Params::<f32>::new(weights);
    let bundle = prior.concat(&mut tape, weights.width)?;
    let maps = SameScaleMaps::new(prior.coords());
    let stages = nets::sopa8(&mut tape, &mut params, bundle, prior.coords(), &maps, |g, coords, probs| {
        let pred = OccupancyPrediction { coords: coords.to_vec(), probs: probs.to_vec() };
        let occupied = callback(g, &pred)?;
        let pos: FxHashMap<Coord3, usize> = coords.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        let mut mask = vec![false; coords.len()];
        for c in occupied {
            match pos.get(&c) {
                Some(&i) if !mask[i] => mask[i] = true,
                Some(_) => return Err(Error::Protocol(format!("{c:?} reported twice in stage {g}"))),
                None => {
                    return Err(Error::Protocol(format!("{c:?} is not a stage {g} candidate")))
                }
            }
        }
        Ok(mask)
    })?;
    Ok(stages
        .into_iter()
        .map(|s| OccupancyPrediction { coords: s.coords, probs: s.probs })
        .collect())
}
