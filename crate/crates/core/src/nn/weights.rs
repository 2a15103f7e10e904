//! Learned parameter sets and their on-disk format.
//!
//! File layout (all little-endian):
//!
//! ```text
//! "SDPC"  u32 version  u32 record_count
//! record*: u16 path_len, path (utf-8), u8 ndims, u32 dims[ndims], f32 data[prod(dims)]
//! u32 crc32 of every preceding byte
//! ```
//!
//! A convolution at path `P` is stored as `P:w` with dims `[K, K, K, in, out]`
//! and, when present, `P:b` with dims `[out]`. The `meta` record holds
//! `[width, latent_channels, half_range]`; the factorized entropy model is
//! stored as `entropy:logits` and its frozen frequency table as
//! `entropy:freq`, both with dims `[channels, 2L + 1]`.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::marker::PhantomData;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::entropy::FactorizedModel;
use crate::error::{Error, Result};
use crate::nn::conv::ConvKernel;
use crate::nn::real::Real;
use crate::nn::tape::{Mat, Tape, Var};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"SDPC";
pub const WEIGHTS_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    pub width: usize,
    pub latent_channels: usize,
    kernels: BTreeMap<String, ConvKernel>,
    pub entropy: FactorizedModel,
}

impl ModelWeights {
    pub fn new(width: usize, latent_channels: usize, entropy: FactorizedModel) -> Self {
        Self { width, latent_channels, kernels: BTreeMap::new(), entropy }
    }

    pub fn insert(&mut self, path: impl Into<String>, kernel: ConvKernel) {
        self.kernels.insert(path.into(), kernel);
    }

    pub fn kernel(&self, path: &str) -> Result<&ConvKernel> {
        self.kernels.get(path).ok_or_else(|| Error::MissingPath(path.to_string()))
    }

    pub fn kernel_mut(&mut self, path: &str) -> Result<&mut ConvKernel> {
        self.kernels.get_mut(path).ok_or_else(|| Error::MissingPath(path.to_string()))
    }

    pub fn kernels(&self) -> impl Iterator<Item = (&String, &ConvKernel)> {
        self.kernels.iter()
    }

    pub fn kernels_mut(&mut self) -> impl Iterator<Item = (&String, &mut ConvKernel)> {
        self.kernels.iter_mut()
    }

    pub fn remove(&mut self, path: &str) -> Option<ConvKernel> {
        self.kernels.remove(path)
    }

    pub fn parameter_count(&self) -> usize {
        self.kernels
            .values()
            .map(|k| k.weights.len() + k.bias.as_ref().map_or(0, Vec::len))
            .sum::<usize>()
            + self.entropy.logits.len()
    }

    /// Serialized bytes. The entropy table is frozen from the current logits
    /// if it is not already.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entropy = self.entropy.clone();
        if entropy.table().is_err() {
            entropy.freeze();
        }
        let mut records: Vec<(String, Vec<u32>, Vec<f32>)> = Vec::new();
        records.push((
            "meta".into(),
            vec![3],
            vec![self.width as f32, self.latent_channels as f32, entropy.half_range as f32],
        ));
        for (path, k) in &self.kernels {
            let ks = k.kernel_size as u32;
            records.push((
                format!("{path}:w"),
                vec![ks, ks, ks, k.in_channels as u32, k.out_channels as u32],
                k.weights.clone(),
            ));
            if let Some(b) = &k.bias {
                records.push((format!("{path}:b"), vec![k.out_channels as u32], b.clone()));
            }
        }
        let dims = vec![entropy.channels as u32, entropy.symbols() as u32];
        records.push(("entropy:logits".into(), dims.clone(), entropy.logits.clone()));
        let freq = entropy.frequencies().expect("frozen above");
        records.push(("entropy:freq".into(), dims, freq.iter().map(|&f| f as f32).collect()));

        let mut out = Vec::new();
        out.extend_from_slice(WEIGHTS_MAGIC);
        out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
        out.extend_from_slice(&(records.len() as u32).to_le_bytes());
        for (path, dims, data) in records {
            out.extend_from_slice(&(path.len() as u16).to_le_bytes());
            out.extend_from_slice(path.as_bytes());
            out.push(dims.len() as u8);
            for d in dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != WEIGHTS_MAGIC {
            return Err(Error::Format("not a weight file (bad magic)".into()));
        }
        if bytes.len() < 16 {
            return Err(Error::Format("weight file truncated".into()));
        }
        let mut r = Reader::new(&bytes[4..]);
        let version = r.u32()?;
        if version != WEIGHTS_VERSION {
            return Err(Error::Version { found: version, expected: WEIGHTS_VERSION });
        }
        let body_end = bytes.len() - 4;
        let stored = u32::from_le_bytes(bytes[body_end..].try_into().expect("4 bytes"));
        let count = r.u32()? as usize;
        let mut records: HashMap<String, (Vec<u32>, Vec<f32>)> = HashMap::new();
        let mut order = Vec::new();
        for _ in 0..count {
            let len = r.u16()? as usize;
            let path = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Format("record path is not utf-8".into()))?;
            let nd = r.u8()? as usize;
            let dims = (0..nd).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d as usize));
            let n = n.ok_or_else(|| Error::Format("record dims overflow".into()))?;
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Format("record too large".into()))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            order.push(path.clone());
            records.insert(path, (dims, data));
        }
        if 4 + r.pos != body_end {
            return Err(Error::Format("trailing bytes after last record".into()));
        }
        if crc32fast::hash(&bytes[..body_end]) != stored {
            return Err(Error::Format("checksum mismatch".into()));
        }

        let (_, meta) = records.remove("meta").ok_or_else(|| Error::MissingPath("meta".into()))?;
        if meta.len() != 3 {
            return Err(Error::Format("meta record must hold 3 values".into()));
        }
        let (width, latent, half_range) = (meta[0] as usize, meta[1] as usize, meta[2] as usize);
        let (ldims, logits) = records
            .remove("entropy:logits")
            .ok_or_else(|| Error::MissingPath("entropy:logits".into()))?;
        let (_, freq) = records
            .remove("entropy:freq")
            .ok_or_else(|| Error::MissingPath("entropy:freq".into()))?;
        if ldims.len() != 2 || ldims[1] as usize != 2 * half_range + 1 {
            return Err(Error::Format("entropy logits have the wrong shape".into()));
        }
        let mut entropy = FactorizedModel::from_logits(ldims[0] as usize, half_range, logits)?;
        entropy.set_frequencies(freq.iter().map(|&f| f as u32).collect())?;

        let mut weights = ModelWeights::new(width, latent, entropy);
        for path in order {
            let Some(stem) = path.strip_suffix(":w") else { continue };
            let (dims, data) = records.remove(&path).expect("recorded");
            if dims.len() != 5 || dims[0] != dims[1] || dims[1] != dims[2] {
                return Err(Error::Format(format!("kernel record `{path}` has bad dims")));
            }
            let bias = records.remove(&format!("{stem}:b")).map(|(_, b)| b);
            let kernel = ConvKernel {
                kernel_size: dims[0] as usize,
                in_channels: dims[3] as usize,
                out_channels: dims[4] as usize,
                weights: data,
                bias,
            };
            kernel.validate()?;
            weights.insert(stem, kernel);
        }
        Ok(weights)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// SHA-256 of the serialized form.
    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.to_bytes()).into()
    }

    /// Fails with the first path in `paths` that is not present.
    pub fn require<'a>(&self, paths: impl IntoIterator<Item = &'a str>) -> Result<()> {
        for p in paths {
            self.kernel(p)?;
        }
        Ok(())
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        // last four bytes of the file are the checksum
        if self.pos + n > self.buf.len().saturating_sub(4) {
            return Err(Error::Format("weight file truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Binds convolution parameters of a [`ModelWeights`] onto a tape, creating
/// each leaf the first time a path is used.
pub struct Params<'w, T: Real> {
    weights: &'w ModelWeights,
    bound: BTreeMap<String, (Var, Option<Var>)>,
    entropy: Option<Var>,
    nudge: Option<Nudge>,
    _scalar: PhantomData<T>,
}

/// A single-parameter perturbation applied while binding, used by
/// finite-difference checks so the step is exact in the tape's precision.
#[derive(Clone, Debug)]
pub struct Nudge {
    pub path: String,
    pub bias: bool,
    pub index: usize,
    pub delta: f64,
}

impl<'w, T: Real> Params<'w, T> {
    pub fn new(weights: &'w ModelWeights) -> Self {
        Self { weights, bound: BTreeMap::new(), entropy: None, nudge: None, _scalar: PhantomData }
    }

    pub fn with_nudge(weights: &'w ModelWeights, nudge: Nudge) -> Self {
        Self { weights, bound: BTreeMap::new(), entropy: None, nudge: Some(nudge), _scalar: PhantomData }
    }

    pub fn weights(&self) -> &'w ModelWeights {
        self.weights
    }

    fn to_mat(&self, path: &str, bias: bool, data: &[f32], rows: usize, cols: usize) -> Mat<T> {
        let mut v: Vec<T> = data.iter().map(|&x| T::from_f32(x)).collect();
        if let Some(n) = &self.nudge {
            if n.path == path && n.bias == bias {
                v[n.index] += T::from_f64(n.delta);
            }
        }
        Mat::new(rows, cols, v)
    }

    /// Weight and bias leaves of the convolution at `path`.
    pub fn conv(&mut self, tape: &mut Tape<T>, path: &str) -> Result<(&'w ConvKernel, Var, Option<Var>)> {
        let kernel = self.weights.kernel(path)?;
        if let Some(&(w, b)) = self.bound.get(path) {
            return Ok((kernel, w, b));
        }
        let rows = kernel.volume() * kernel.in_channels;
        let w = tape.leaf(self.to_mat(path, false, &kernel.weights, rows, kernel.out_channels));
        let b = kernel
            .bias
            .as_ref()
            .map(|b| tape.leaf(self.to_mat(path, true, b, 1, kernel.out_channels)));
        self.bound.insert(path.to_string(), (w, b));
        Ok((kernel, w, b))
    }

    pub fn entropy_logits(&mut self, tape: &mut Tape<T>) -> Var {
        if let Some(v) = self.entropy {
            return v;
        }
        let e = &self.weights.entropy;
        let m = self.to_mat("entropy", false, &e.logits, e.channels, e.symbols());
        let v = tape.leaf(m);
        self.entropy = Some(v);
        v
    }

    pub fn bound(&self) -> impl Iterator<Item = (&String, &(Var, Option<Var>))> {
        self.bound.iter()
    }

    pub fn bound_entropy(&self) -> Option<Var> {
        self.entropy
    }
}
