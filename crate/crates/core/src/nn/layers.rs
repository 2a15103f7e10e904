//! Layer building blocks recorded on a [`Tape`].

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::nn::conv::KernelMap;
use crate::nn::real::{sigmoid as sigmoid_scalar, Real};
use crate::nn::tape::{Mat, Tape, Var};
use crate::nn::weights::{ModelWeights, Params};
use crate::tensor::{Coord3, SparseTensor3};

/// Kernel maps for the `K = 1` and `K = 3` convolutions on one coordinate set.
#[derive(Clone)]
pub struct SameScaleMaps {
    pub k1: Rc<KernelMap>,
    pub k3: Rc<KernelMap>,
}

impl SameScaleMaps {
    pub fn new(coords: &[Coord3]) -> Self {
        Self {
            k1: Rc::new(KernelMap::same_scale(coords, coords, 1)),
            k3: Rc::new(KernelMap::same_scale(coords, coords, 3)),
        }
    }
}

/// Convolution with the kernel stored at `path`.
pub fn conv<T: Real>(
    tape: &mut Tape<T>,
    params: &mut Params<'_, T>,
    path: &str,
    x: Var,
    map: &Rc<KernelMap>,
) -> Result<Var> {
    let (kernel, w, b) = params.conv(tape, path)?;
    if kernel.volume() != map.volume() {
        return Err(Error::Shape(format!(
            "`{path}` has kernel size {} but the map has {} offsets",
            kernel.kernel_size,
            map.volume()
        )));
    }
    if tape.value(x).cols != kernel.in_channels {
        return Err(Error::Shape(format!(
            "`{path}` expects {} input channels, got {}",
            kernel.in_channels,
            tape.value(x).cols
        )));
    }
    tape.conv(x, w, b, map.clone())
}

/// Paths of the six convolutions inside one Inception-ResNet block.
pub fn irn_paths(prefix: &str) -> [String; 6] {
    ["a", "b1", "b2", "c1", "c2", "c3"].map(|s| format!("{prefix}.{s}"))
}

/// `(suffix, kernel size, in, out)` of each block convolution for `width`.
pub fn irn_layout(width: usize) -> [(&'static str, usize, usize, usize); 6] {
    let q = width / 4;
    [
        ("a", 1, width, q),
        ("b1", 1, width, q),
        ("b2", 3, q, q),
        ("c1", 1, width, q),
        ("c2", 3, q, q),
        ("c3", 3, q, width / 2),
    ]
}

/// Inception-ResNet block: three branches (1³ | 1³→3³ | 1³→3³→3³) with
/// widths W/4, W/4 and W/2, concatenated and added to the input. ReLU sits
/// between convolutions inside a branch; nothing follows the residual sum.
pub fn irn_block<T: Real>(
    tape: &mut Tape<T>,
    params: &mut Params<'_, T>,
    prefix: &str,
    x: Var,
    maps: &SameScaleMaps,
) -> Result<Var> {
    let [a, b1, b2, c1, c2, c3] = irn_paths(prefix);
    let ya = conv(tape, params, &a, x, &maps.k1)?;

    let yb = conv(tape, params, &b1, x, &maps.k1)?;
    let yb = tape.relu(yb);
    let yb = conv(tape, params, &b2, yb, &maps.k3)?;

    let yc = conv(tape, params, &c1, x, &maps.k1)?;
    let yc = tape.relu(yc);
    let yc = conv(tape, params, &c2, yc, &maps.k3)?;
    let yc = tape.relu(yc);
    let yc = conv(tape, params, &c3, yc, &maps.k3)?;

    let cat = tape.concat(&[ya, yb, yc])?;
    if tape.value(cat).cols != tape.value(x).cols {
        return Err(Error::Shape(format!(
            "block `{prefix}` branches sum to {} channels, input has {}",
            tape.value(cat).cols,
            tape.value(x).cols
        )));
    }
    tape.add(x, cat)
}

pub fn irn_stack<T: Real>(
    tape: &mut Tape<T>,
    params: &mut Params<'_, T>,
    prefix: &str,
    blocks: usize,
    mut x: Var,
    maps: &SameScaleMaps,
) -> Result<Var> {
    for i in 0..blocks {
        x = irn_block(tape, params, &format!("{prefix}.irn{i}"), x, maps)?;
    }
    Ok(x)
}

pub(crate) fn leaf_from_tensor<T: Real>(tape: &mut Tape<T>, t: &SparseTensor3) -> Var {
    let data = t.feats().iter().map(|&v| T::from_f32(v)).collect();
    tape.leaf(Mat::new(t.len(), t.channels(), data))
}

pub(crate) fn tensor_from_var(
    tape: &Tape<f32>,
    v: Var,
    coords: Vec<Coord3>,
    bit_depth: u8,
) -> SparseTensor3 {
    let m = tape.value(v);
    SparseTensor3::from_sorted(coords, m.data.clone(), m.cols, bit_depth)
}

/// Runs one Inception-ResNet block stored under `prefix`.
pub fn irn_forward(
    input: &SparseTensor3,
    weights: &ModelWeights,
    prefix: &str,
) -> Result<SparseTensor3> {
    let mut tape = Tape::<f32>::new();
    let mut params = Params::<f32>::new(weights);
    let x = leaf_from_tensor(&mut tape, input);
    let maps = SameScaleMaps::new(input.coords());
    let y = irn_block(&mut tape, &mut params, prefix, x, &maps)?;
    Ok(tensor_from_var(&tape, y, input.coords().to_vec(), input.bit_depth()))
}

pub fn relu(input: &SparseTensor3) -> SparseTensor3 {
    map_feats(input, |v| v.max(0.0))
}

pub fn sigmoid(input: &SparseTensor3) -> SparseTensor3 {
    map_feats(input, sigmoid_scalar)
}

fn map_feats(input: &SparseTensor3, f: impl Fn(f32) -> f32) -> SparseTensor3 {
    let feats = input.feats().iter().map(|&v| f(v)).collect();
    SparseTensor3::from_sorted(input.coords().to_vec(), feats, input.channels(), input.bit_depth())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entropy::FactorizedModel;
    use crate::nn::conv::ConvKernel;
    use proptest::prelude::*;

    fn zero_block(width: usize) -> ModelWeights {
        let mut w = ModelWeights::new(width, 1, FactorizedModel::uniform(1, 1));
        for (s, k, i, o) in irn_layout(width) {
            w.insert(format!("blk.{s}"), ConvKernel::zeros(k, i, o, true));
        }
        w
    }

    #[test]
    fn relu_and_sigmoid_values() {
        let t = SparseTensor3::canonicalize(
            vec![Coord3::new(0, 0, 0), Coord3::new(1, 0, 0)],
            vec![-1.0, 2.0],
            1,
            2,
        )
        .unwrap();
        assert_eq!(relu(&t).feats(), &[0.0, 2.0]);
        let z = SparseTensor3::canonicalize(vec![Coord3::new(0, 0, 0)], vec![0.0], 1, 2).unwrap();
        assert_eq!(sigmoid(&z).feats(), &[0.5]);
    }

    proptest! {
        #[test]
        fn sigmoid_is_monotone(a in -50f32..50.0, b in -50f32..50.0) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(sigmoid_scalar(lo) <= sigmoid_scalar(hi));
        }
    }

    #[test]
    fn zero_block_is_identity() {
        let w = zero_block(8);
        let coords = vec![Coord3::new(0, 0, 0), Coord3::new(0, 1, 0), Coord3::new(3, 3, 3)];
        let feats: Vec<f32> = (0..24).map(|i| (i as f32 * 0.3).cos()).collect();
        let t = SparseTensor3::canonicalize(coords, feats, 8, 2).unwrap();
        let out = irn_forward(&t, &w, "blk").unwrap();
        assert_eq!(out, t);
    }

    #[test]
    fn width_mismatch_is_shape_error() {
        let w = zero_block(8);
        let t = SparseTensor3::canonicalize(vec![Coord3::new(0, 0, 0)], vec![0.0; 4], 4, 2).unwrap();
        assert!(matches!(irn_forward(&t, &w, "blk"), Err(Error::Shape(_))));
    }
}
