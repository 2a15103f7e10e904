//! Generalized sparse convolution.
//!
//! `f_out[u] = b + sum_k W_k f_in[u + k]` for every `u` in a caller-chosen
//! output coordinate set, where the sum only runs over offsets whose input
//! voxel exists. Resampling layers use the same machinery with a kernel map
//! that relates voxels across scales.

use rustc_hash::FxHashMap;

use crate::error::{Error, Result};
use crate::nn::real::Real;
use crate::tensor::{self, Coord3, SparseTensor3};

/// Weights of one convolution, laid out `[offset][in_channel][out_channel]`.
///
/// Offsets of a kernel with odd side `K` cover `-(K-1)/2 ..= (K-1)/2` on each
/// axis and are enumerated lexicographically with `dx` slowest. For `K = 2`
/// the offsets are `{0,1}^3` in the same order, so the offset index equals
/// the octant index of the child voxel.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvKernel {
    pub kernel_size: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub weights: Vec<f32>,
    pub bias: Option<Vec<f32>>,
}

impl ConvKernel {
    pub fn zeros(kernel_size: usize, in_channels: usize, out_channels: usize, bias: bool) -> Self {
        Self {
            kernel_size,
            in_channels,
            out_channels,
            weights: vec![0.0; kernel_size.pow(3) * in_channels * out_channels],
            bias: bias.then(|| vec![0.0; out_channels]),
        }
    }

    /// `K = 1` kernel holding the identity matrix.
    pub fn identity(channels: usize) -> Self {
        let mut k = Self::zeros(1, channels, channels, false);
        for i in 0..channels {
            k.weights[i * channels + i] = 1.0;
        }
        k
    }

    pub fn volume(&self) -> usize {
        self.kernel_size.pow(3)
    }

    pub fn weight(&self, offset: usize, cin: usize, cout: usize) -> f32 {
        self.weights[(offset * self.in_channels + cin) * self.out_channels + cout]
    }

    pub fn weight_mut(&mut self, offset: usize, cin: usize, cout: usize) -> &mut f32 {
        &mut self.weights[(offset * self.in_channels + cin) * self.out_channels + cout]
    }

    pub fn validate(&self) -> Result<()> {
        let expect = self.volume() * self.in_channels * self.out_channels;
        if self.weights.len() != expect {
            return Err(Error::Shape(format!(
                "kernel holds {} weights, expected {expect}",
                self.weights.len()
            )));
        }
        if let Some(b) = &self.bias {
            if b.len() != self.out_channels {
                return Err(Error::Shape(format!(
                    "bias has {} entries for {} output channels",
                    b.len(),
                    self.out_channels
                )));
            }
        }
        let finite = self.weights.iter().chain(self.bias.iter().flatten()).all(|v| v.is_finite());
        if !finite {
            return Err(Error::Shape("kernel contains non-finite values".into()));
        }
        Ok(())
    }
}

/// Offsets of a same-scale kernel with odd side `k`, lexicographic.
pub fn centered_offsets(k: usize) -> Vec<[i32; 3]> {
    assert!(k % 2 == 1, "same-scale kernels have odd size");
    let r = (k / 2) as i32;
    let mut out = Vec::with_capacity(k * k * k);
    for dx in -r..=r {
        for dy in -r..=r {
            for dz in -r..=r {
                out.push([dx, dy, dz]);
            }
        }
    }
    out
}

/// Morton-keyed lookup from coordinate to row index.
pub struct CoordIndex {
    map: FxHashMap<u64, u32>,
}

impl CoordIndex {
    pub fn new(coords: &[Coord3]) -> Self {
        let mut map = FxHashMap::with_capacity_and_hasher(coords.len(), Default::default());
        for (i, c) in coords.iter().enumerate() {
            map.insert(c.key_unchecked(), i as u32);
        }
        Self { map }
    }

    pub fn get(&self, c: Coord3) -> Option<u32> {
        if c.max_component() >= 1 << tensor::MAX_BIT_DEPTH {
            return None;
        }
        self.map.get(&c.key_unchecked()).copied()
    }
}

/// For each kernel offset, the `(input row, output row)` pairs it connects.
#[derive(Debug, Clone)]
pub struct KernelMap {
    pub n_in: usize,
    pub n_out: usize,
    pub pairs: Vec<Vec<(u32, u32)>>,
}

impl KernelMap {
    pub fn volume(&self) -> usize {
        self.pairs.len()
    }

    /// Same-scale (or target-coordinate) map for an odd kernel side.
    pub fn same_scale(input: &[Coord3], output: &[Coord3], kernel_size: usize) -> Self {
        if kernel_size == 1 && input == output {
            let pairs = vec![(0..input.len() as u32).map(|i| (i, i)).collect()];
            return Self { n_in: input.len(), n_out: output.len(), pairs };
        }
        let index = CoordIndex::new(input);
        let offsets = centered_offsets(kernel_size);
        let mut pairs: Vec<Vec<(u32, u32)>> = vec![Vec::new(); offsets.len()];
        for (o, u) in output.iter().enumerate() {
            for (k, d) in offsets.iter().enumerate() {
                if let Some(i) = u.offset(d[0], d[1], d[2]).and_then(|v| index.get(v)) {
                    pairs[k].push((i, o as u32));
                }
            }
        }
        Self { n_in: input.len(), n_out: output.len(), pairs }
    }

    /// Stride-2 downsampling: each parent in `output` gathers its children in
    /// `input`, weighted by the child's octant.
    pub fn down(input: &[Coord3], output: &[Coord3]) -> Self {
        let index = CoordIndex::new(output);
        let mut pairs: Vec<Vec<(u32, u32)>> = vec![Vec::new(); 8];
        for (i, c) in input.iter().enumerate() {
            if let Some(o) = index.get(c.parent()) {
                pairs[tensor::octant_index(*c) as usize].push((i as u32, o));
            }
        }
        for p in &mut pairs {
            p.sort_unstable_by_key(|&(_, o)| o);
        }
        Self { n_in: input.len(), n_out: output.len(), pairs }
    }

    /// Stride-2 transposed convolution: child `2u + d` in `output` receives
    /// `W_d f_u` from its parent `u` in `input`.
    pub fn up(input: &[Coord3], output: &[Coord3]) -> Self {
        let index = CoordIndex::new(input);
        let mut pairs: Vec<Vec<(u32, u32)>> = vec![Vec::new(); 8];
        for (o, c) in output.iter().enumerate() {
            if let Some(i) = index.get(c.parent()) {
                pairs[tensor::octant_index(*c) as usize].push((i, o as u32));
            }
        }
        Self { n_in: input.len(), n_out: output.len(), pairs }
    }
}

/// Forward pass over row-major matrices. Each output row accumulates its bias
/// first, then offsets in enumeration order, then input channels in order, so
/// the result is bit-reproducible.
pub fn conv_forward<T: Real>(
    x: &[T],
    cin: usize,
    w: &[T],
    bias: Option<&[T]>,
    cout: usize,
    map: &KernelMap,
) -> Vec<T> {
    let mut out = vec![T::zero(); map.n_out * cout];
    if let Some(b) = bias {
        for row in out.chunks_exact_mut(cout) {
            row.copy_from_slice(b);
        }
    }
    for (k, pairs) in map.pairs.iter().enumerate() {
        let wk = &w[k * cin * cout..(k + 1) * cin * cout];
        for &(i, o) in pairs {
            let xi = &x[i as usize * cin..(i as usize + 1) * cin];
            let yo = &mut out[o as usize * cout..(o as usize + 1) * cout];
            for (c, &xv) in xi.iter().enumerate() {
                if xv == T::zero() {
                    continue;
                }
                let wrow = &wk[c * cout..(c + 1) * cout];
                for (y, &wv) in yo.iter_mut().zip(wrow) {
                    *y += xv * wv;
                }
            }
        }
    }
    out
}

/// Accumulates input, weight and bias gradients for one convolution.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward<T: Real>(
    x: &[T],
    cin: usize,
    w: &[T],
    cout: usize,
    map: &KernelMap,
    grad_out: &[T],
    grad_x: Option<&mut [T]>,
    grad_w: Option<&mut [T]>,
    grad_b: Option<&mut [T]>,
) {
    if let Some(gb) = grad_b {
        for row in grad_out.chunks_exact(cout) {
            for (g, &v) in gb.iter_mut().zip(row) {
                *g += v;
            }
        }
    }
    if let Some(gw) = grad_w {
        for (k, pairs) in map.pairs.iter().enumerate() {
            let gwk = &mut gw[k * cin * cout..(k + 1) * cin * cout];
            for &(i, o) in pairs {
                let xi = &x[i as usize * cin..(i as usize + 1) * cin];
                let go = &grad_out[o as usize * cout..(o as usize + 1) * cout];
                for (c, &xv) in xi.iter().enumerate() {
                    if xv == T::zero() {
                        continue;
                    }
                    for (g, &gv) in gwk[c * cout..(c + 1) * cout].iter_mut().zip(go) {
                        *g += xv * gv;
                    }
                }
            }
        }
    }
    if let Some(gx) = grad_x {
        for (k, pairs) in map.pairs.iter().enumerate() {
            let wk = &w[k * cin * cout..(k + 1) * cin * cout];
            for &(i, o) in pairs {
                let go = &grad_out[o as usize * cout..(o as usize + 1) * cout];
                let gxi = &mut gx[i as usize * cin..(i as usize + 1) * cin];
                for (c, g) in gxi.iter_mut().enumerate() {
                    let wrow = &wk[c * cout..(c + 1) * cout];
                    let mut acc = T::zero();
                    for (&wv, &gv) in wrow.iter().zip(go) {
                        acc += wv * gv;
                    }
                    *g += acc;
                }
            }
        }
    }
}

fn check_channels(input: &SparseTensor3, kernel: &ConvKernel) -> Result<()> {
    kernel.validate()?;
    if input.channels() != kernel.in_channels {
        return Err(Error::Shape(format!(
            "input has {} channels, kernel expects {}",
            input.channels(),
            kernel.in_channels
        )));
    }
    Ok(())
}

fn apply(
    input: &SparseTensor3,
    kernel: &ConvKernel,
    map: &KernelMap,
    out_coords: Vec<Coord3>,
    bit_depth: u8,
) -> SparseTensor3 {
    let feats = conv_forward(
        input.feats(),
        kernel.in_channels,
        &kernel.weights,
        kernel.bias.as_deref(),
        kernel.out_channels,
        map,
    );
    SparseTensor3::from_sorted(out_coords, feats, kernel.out_channels, bit_depth)
}

/// Same-scale convolution evaluated on arbitrary target coordinates.
pub fn sparse_conv(
    input: &SparseTensor3,
    kernel: &ConvKernel,
    out_coords: &[Coord3],
) -> Result<SparseTensor3> {
    check_channels(input, kernel)?;
    if kernel.kernel_size.is_multiple_of(2) {
        return Err(Error::Shape("same-scale convolution needs an odd kernel size".into()));
    }
    if !tensor::is_canonical(out_coords) {
        return Err(Error::Shape("output coordinates must be Morton-sorted and unique".into()));
    }
    let map = KernelMap::same_scale(input.coords(), out_coords, kernel.kernel_size);
    Ok(apply(input, kernel, &map, out_coords.to_vec(), input.bit_depth()))
}

/// Stride-2 convolution onto the parent coordinate set.
pub fn down_conv_s2(input: &SparseTensor3, kernel: &ConvKernel) -> Result<SparseTensor3> {
    check_channels(input, kernel)?;
    if kernel.kernel_size != 2 {
        return Err(Error::Shape("down convolution needs kernel size 2".into()));
    }
    let out_coords = input.downsample_coords();
    let map = KernelMap::down(input.coords(), &out_coords);
    Ok(apply(input, kernel, &map, out_coords, input.bit_depth().saturating_sub(1)))
}

/// Stride-2 transposed convolution onto all eight children of each voxel.
pub fn up_conv_s2(input: &SparseTensor3, kernel: &ConvKernel) -> Result<SparseTensor3> {
    check_channels(input, kernel)?;
    if kernel.kernel_size != 2 {
        return Err(Error::Shape("up convolution needs kernel size 2".into()));
    }
    let out_coords = tensor::child_candidates(input.coords());
    let map = KernelMap::up(input.coords(), &out_coords);
    Ok(apply(input, kernel, &map, out_coords, input.bit_depth() + 1))
}
