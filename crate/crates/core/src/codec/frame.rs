use rustc_hash::FxHashSet;

use crate::codec::bitstream::{Bitstream, EncodedFrame, FrameHeader, FrameType};
use crate::codec::{EncodeConfig, InterScheme, Mode};
use crate::entropy::{decode_latents, encode_latents, QuantProb, RangeDecoder, RangeEncoder};
use crate::error::{Error, Result};
use crate::nn::layers::{leaf_from_tensor, SameScaleMaps};
use crate::nn::tape::{Mat, Tape, Var};
use crate::nn::weights::{ModelWeights, Params};
use crate::sopa::layout::{PREDICTOR, RESIDUAL_PREDICTOR};
use crate::sopa::nets::{self, CoordPyramid};
use crate::sopa::{extract_pyramid, FrameContext};
use crate::tensor::{morton_decode, Coord3, MortonKey, SparseTensor3};

/// Lowest coded scale for geometry coded losslessly up to bit depth `top`.
pub fn base_scale(top: u8) -> u8 {
    top.min(3)
}

/// What a P-frame may draw on: features of the previous reconstruction
/// (conditional scheme) or the reconstruction itself (residual scheme).
#[derive(Clone, Copy, Debug, Default)]
pub struct Reference<'a> {
    pub context: Option<&'a FrameContext>,
    pub recon: Option<&'a SparseTensor3>,
}

impl<'a> Reference<'a> {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn context(ctx: &'a FrameContext) -> Self {
        Self { context: Some(ctx), recon: None }
    }

    pub fn recon(recon: &'a SparseTensor3) -> Self {
        Self { context: None, recon: Some(recon) }
    }

    fn is_some(&self) -> bool {
        self.context.is_some() || self.recon.is_some()
    }
}

/// Side information recorded while coding, for symmetry checks.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Trace {
    /// Quantized probability of every geometry bit, in coding order.
    pub probs: Vec<u16>,
    /// Latent symbols in coding order.
    pub symbols: Vec<i32>,
    /// Reconstructed count of each lossy scale `m + 1 ..= N`.
    pub recon_counts: Vec<u32>,
}

enum Side<'a> {
    Encode(RangeEncoder),
    Decode(RangeDecoder<'a>),
}

struct GeomCoder<'a, 't> {
    side: Side<'a>,
    trace: Option<&'t mut Trace>,
}

impl GeomCoder<'_, '_> {
    fn bit(&mut self, p: f64, truth: impl FnOnce() -> bool) -> Result<bool> {
        let q = QuantProb::new(p)?;
        if let Some(t) = self.trace.as_deref_mut() {
            t.probs.push(q.raw());
        }
        match &mut self.side {
            Side::Encode(e) => {
                let b = truth();
                e.encode_bit(q, b);
                Ok(b)
            }
            Side::Decode(d) => d.decode_bit(q),
        }
    }
}

fn temporal_var(
    tape: &mut Tape<f32>,
    params: &mut Params<'_, f32>,
    ctx: Option<&FrameContext>,
    scale: u8,
    coords: &[Coord3],
    width: usize,
) -> Result<Var> {
    match ctx {
        Some(ctx) => {
            let feats = ctx
                .get(scale)
                .ok_or_else(|| Error::Shape(format!("reference context lacks scale {scale}")))?;
            let x = leaf_from_tensor(tape, feats);
            nets::transfer(tape, params, PREDICTOR, x, feats.coords(), coords)
        }
        None => Ok(nets::zeros(tape, coords.len(), width)),
    }
}

fn membership(coords: &[Coord3]) -> FxHashSet<Coord3> {
    coords.iter().copied().collect()
}

/// Base grid plus eight-stage scales up to bit depth `top`.
fn lossless_phase(
    coder: &mut GeomCoder<'_, '_>,
    weights: &ModelWeights,
    top: u8,
    truth: Option<&CoordPyramid>,
    ctx: Option<&FrameContext>,
) -> Result<Vec<Coord3>> {
    let s0 = base_scale(top);
    let base_truth = truth.map(|p| membership(p.at(s0)));
    let mut coords = Vec::new();
    for key in 0..1u64 << (3 * s0) {
        let c = morton_decode(MortonKey(key));
        if coder.bit(0.5, || base_truth.as_ref().is_some_and(|t| t.contains(&c)))? {
            coords.push(c);
        }
    }
    for s in s0..top {
        let maps = SameScaleMaps::new(&coords);
        let mut tape = Tape::<f32>::new();
        let mut params = Params::<f32>::new(weights);
        let sp = nets::spatial(&mut tape, &mut params, &maps)?;
        let tm = temporal_var(&mut tape, &mut params, ctx, s, &coords, weights.width)?;
        let bundle = tape.concat(&[sp, tm])?;
        let next_truth = truth.map(|p| membership(p.at(s + 1)));
        let stages = nets::sopa8(&mut tape, &mut params, bundle, &coords, &maps, |_, cands, probs| {
            cands
                .iter()
                .zip(probs)
                .map(|(c, &p)| {
                    coder.bit(p as f64, || next_truth.as_ref().is_some_and(|t| t.contains(c)))
                })
                .collect()
        })?;
        let mut next: Vec<Coord3> = stages
            .iter()
            .flat_map(|st| st.coords.iter().zip(&st.occupied).filter(|(_, &o)| o).map(|(c, _)| *c))
            .collect();
        next.sort_unstable_by_key(|c| c.key_unchecked());
        coords = next;
    }
    Ok(coords)
}

/// Continuous latent of a geometry at bit depth `n`, placed at depth `m`.
fn latent_of(weights: &ModelWeights, coords: &[Coord3], n: u8, m: u8) -> Result<(Vec<Coord3>, Vec<f32>)> {
    let pyr = CoordPyramid::new(coords.to_vec(), n, m);
    let mut tape = Tape::<f32>::new();
    let mut params = Params::<f32>::new(weights);
    let y = nets::encoder(&mut tape, &mut params, &pyr)?;
    Ok((pyr.at(m).to_vec(), tape.value(y).data.clone()))
}

/// Reference latent carried onto the current depth-`m` coordinates.
fn residual_prediction(
    weights: &ModelWeights,
    reference: &SparseTensor3,
    coords_m: &[Coord3],
    n: u8,
    m: u8,
) -> Result<Vec<f32>> {
    let (ref_coords, ref_latent) = latent_of(weights, reference.coords(), n, m)?;
    let mut tape = Tape::<f32>::new();
    let mut params = Params::<f32>::new(weights);
    let x = tape.leaf(Mat::new(ref_coords.len(), weights.latent_channels, ref_latent));
    let y = nets::transfer(&mut tape, &mut params, RESIDUAL_PREDICTOR, x, &ref_coords, coords_m)?;
    Ok(tape.value(y).data.clone())
}

/// One-stage reconstruction of scales `m + 1 ..= N` keeping `counts[i]`
/// candidates at scale `m + 1 + i`.
fn lossy_phase(
    weights: &ModelWeights,
    config: &EncodeConfig,
    coords_m: Vec<Coord3>,
    latent: &[f32],
    counts: &[u32],
    ctx: Option<&FrameContext>,
    mut trace: Option<&mut Trace>,
) -> Result<Vec<Coord3>> {
    let m = config.m;
    let mut coords = coords_m.clone();
    for s in m..config.bit_depth {
        let maps = SameScaleMaps::new(&coords);
        let mut tape = Tape::<f32>::new();
        let mut params = Params::<f32>::new(weights);
        let sp = nets::spatial(&mut tape, &mut params, &maps)?;
        let lat = tape.leaf(Mat::new(coords_m.len(), weights.latent_channels, latent.to_vec()));
        let lifted = nets::lift_latent(&mut tape, lat, &coords_m, &coords, s - m)?;
        let tm = temporal_var(&mut tape, &mut params, ctx, s, &coords, weights.width)?;
        let bundle = tape.concat(&[sp, lifted, tm])?;
        let (cands, logits) = nets::sopa1(&mut tape, &mut params, bundle, &coords, &maps)?;
        let k = counts[(s - m) as usize] as usize;
        if k > cands.len() {
            return Err(Error::Decode(format!(
                "scale {} keeps {k} voxels but has only {} candidates",
                s + 1,
                cands.len()
            )));
        }
        coords = top_k(&cands, &tape.value(logits).data, k);
        if let Some(t) = trace.as_deref_mut() {
            t.recon_counts.push(coords.len() as u32);
        }
    }
    Ok(coords)
}

/// The `k` highest-scoring candidates in Morton order; equal scores go to
/// the lower Morton key.
pub(crate) fn top_k(cands: &[Coord3], scores: &[f32], k: usize) -> Vec<Coord3> {
    let mut order: Vec<usize> = (0..cands.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    order.sort_unstable();
    order.into_iter().map(|i| cands[i]).collect()
}

fn check_frame(frame: &SparseTensor3, config: &EncodeConfig) -> Result<()> {
    config.validate()?;
    if frame.bit_depth() != config.bit_depth {
        return Err(Error::Config(format!(
            "frame has bit depth {}, config expects {}",
            frame.bit_depth(),
            config.bit_depth
        )));
    }
    if frame.len() > u32::MAX as usize {
        return Err(Error::Config("frame has too many points".into()));
    }
    Ok(())
}

/// Context used by the occupancy models and reference used for the latent.
fn split_reference<'a>(
    reference: Reference<'a>,
    config: &EncodeConfig,
) -> Result<(Option<&'a FrameContext>, Option<&'a SparseTensor3>)> {
    match config.scheme {
        InterScheme::Conditional => {
            if reference.is_some() && reference.context.is_none() {
                return Err(Error::Config("conditional P-frames need a reference context".into()));
            }
            Ok((reference.context, None))
        }
        InterScheme::Residual => {
            if reference.is_some() && reference.recon.is_none() {
                return Err(Error::Config("residual P-frames need the reference reconstruction".into()));
            }
            Ok((None, reference.recon))
        }
    }
}

/// Codes one frame. Returns the coded frame and the decoder's reconstruction.
pub fn encode_frame(
    frame: &SparseTensor3,
    reference: Reference<'_>,
    weights: &ModelWeights,
    config: &EncodeConfig,
    index: u32,
    mut trace: Option<&mut Trace>,
) -> Result<(EncodedFrame, SparseTensor3)> {
    check_frame(frame, config)?;
    let (ctx, ref_recon) = split_reference(reference, config)?;
    let frame_type = if reference.is_some() { FrameType::Predicted } else { FrameType::Intra };
    let n = config.bit_depth;
    let mut header = FrameHeader {
        index,
        frame_type,
        point_count: frame.len() as u32,
        scale_counts: Vec::new(),
        geometry_len: 0,
        latent_len: 0,
    };
    let lowest = base_scale(config.m);
    let pyr = CoordPyramid::new(frame.coords().to_vec(), n, lowest);
    if config.mode == Mode::Lossy {
        header.scale_counts = (config.m + 1..=n).map(|s| pyr.at(s).len() as u32).collect();
    }
    if frame.is_empty() {
        if let Some(t) = trace.as_deref_mut() {
            t.recon_counts.extend(&header.scale_counts);
        }
        return Ok((EncodedFrame { header, geometry: Vec::new(), latent: Vec::new() }, SparseTensor3::empty(1, n)));
    }

    let mut coder = GeomCoder { side: Side::Encode(RangeEncoder::new()), trace: trace.as_deref_mut() };
    let coords_m = lossless_phase(&mut coder, weights, config.m, Some(&pyr), ctx)?;
    let Side::Encode(enc) = coder.side else { unreachable!() };
    let geometry = enc.finish();

    let (latent, recon) = match config.mode {
        Mode::Lossless => (Vec::new(), coords_m),
        Mode::Lossy => {
            let (lat_coords, y) = latent_of(weights, frame.coords(), n, config.m)?;
            debug_assert_eq!(lat_coords, coords_m);
            if y.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("latent features".into()));
            }
            let pred = match ref_recon {
                Some(r) => residual_prediction(weights, r, &coords_m, n, config.m)?,
                None => vec![0.0; y.len()],
            };
            let symbols: Vec<i32> = y.iter().zip(&pred).map(|(v, p)| (v - p).round() as i32).collect();
            let mut enc = RangeEncoder::new();
            encode_latents(&mut enc, &symbols, &weights.entropy)?;
            let y_hat: Vec<f32> = symbols.iter().zip(&pred).map(|(&s, p)| s as f32 + p).collect();
            if let Some(t) = trace.as_deref_mut() {
                t.symbols.extend(&symbols);
            }
            let recon = lossy_phase(weights, config, coords_m, &y_hat, &header.scale_counts, ctx, trace)?;
            (enc.finish(), recon)
        }
    };
    header.geometry_len = geometry.len() as u32;
    header.latent_len = latent.len() as u32;
    let recon = SparseTensor3::from_sorted(recon.clone(), vec![1.0; recon.len()], 1, n);
    Ok((EncodedFrame { header, geometry, latent }, recon))
}

pub fn decode_frame(
    frame: &EncodedFrame,
    reference: Reference<'_>,
    weights: &ModelWeights,
    config: &EncodeConfig,
    mut trace: Option<&mut Trace>,
) -> Result<SparseTensor3> {
    config.validate()?;
    let h = &frame.header;
    match (h.frame_type, reference.is_some()) {
        (FrameType::Predicted, false) => {
            return Err(Error::Format(format!("frame {} is predicted but has no reference", h.index)))
        }
        (FrameType::Intra, true) => {
            return Err(Error::Format(format!("frame {} is intra but got a reference", h.index)))
        }
        _ => {}
    }
    let (ctx, ref_recon) = split_reference(reference, config)?;
    let n = config.bit_depth;
    let expected_counts = match config.mode {
        Mode::Lossless => 0,
        Mode::Lossy => config.lossy_steps() as usize,
    };
    if h.scale_counts.len() != expected_counts {
        return Err(Error::Format(format!(
            "frame {} carries {} scale counts, expected {expected_counts}",
            h.index,
            h.scale_counts.len()
        )));
    }
    if h.point_count == 0 {
        if let Some(t) = trace.as_deref_mut() {
            t.recon_counts.extend(&h.scale_counts);
        }
        return Ok(SparseTensor3::empty(1, n));
    }
    let dec = RangeDecoder::new(&frame.geometry)?;
    let mut coder = GeomCoder { side: Side::Decode(dec), trace: trace.as_deref_mut() };
    let coords_m = lossless_phase(&mut coder, weights, config.m, None, ctx)?;
    let coords = match config.mode {
        Mode::Lossless => coords_m,
        Mode::Lossy => {
            let pred = match ref_recon {
                Some(r) => residual_prediction(weights, r, &coords_m, n, config.m)?,
                None => vec![0.0; coords_m.len() * weights.latent_channels],
            };
            let mut dec = RangeDecoder::new(&frame.latent)?;
            let symbols = decode_latents(&mut dec, coords_m.len(), &weights.entropy)?;
            if let Some(t) = trace.as_deref_mut() {
                t.symbols.extend(&symbols);
            }
            let y_hat: Vec<f32> = symbols.iter().zip(&pred).map(|(&s, p)| s as f32 + p).collect();
            lossy_phase(weights, config, coords_m, &y_hat, &h.scale_counts, ctx, trace)?
        }
    };
    if coords.len() != h.point_count as usize {
        return Err(Error::Decode(format!(
            "frame {} decoded {} points, header says {}",
            h.index,
            coords.len(),
            h.point_count
        )));
    }
    Ok(SparseTensor3::from_sorted(coords.clone(), vec![1.0; coords.len()], 1, n))
}

pub fn encode_frame_lossless(
    frame: &SparseTensor3,
    context: Option<&FrameContext>,
    weights: &ModelWeights,
    index: u32,
) -> Result<EncodedFrame> {
    let config = EncodeConfig::lossless(frame.bit_depth())?;
    let reference = Reference { context, recon: None };
    Ok(encode_frame(frame, reference, weights, &config, index, None)?.0)
}

pub fn decode_frame_lossless(
    frame: &EncodedFrame,
    context: Option<&FrameContext>,
    weights: &ModelWeights,
    bit_depth: u8,
) -> Result<SparseTensor3> {
    let config = EncodeConfig::lossless(bit_depth)?;
    decode_frame(frame, Reference { context, recon: None }, weights, &config, None)
}

fn require_lossy(config: &EncodeConfig, scheme: InterScheme) -> Result<EncodeConfig> {
    if config.mode != Mode::Lossy {
        return Err(Error::Config("lossy coding needs a lossy config".into()));
    }
    Ok(config.with_scheme(scheme))
}

pub fn encode_frame_lossy(
    frame: &SparseTensor3,
    context: Option<&FrameContext>,
    weights: &ModelWeights,
    config: &EncodeConfig,
    index: u32,
) -> Result<(EncodedFrame, SparseTensor3)> {
    let config = require_lossy(config, InterScheme::Conditional)?;
    encode_frame(frame, Reference { context, recon: None }, weights, &config, index, None)
}

pub fn decode_frame_lossy(
    frame: &EncodedFrame,
    context: Option<&FrameContext>,
    weights: &ModelWeights,
    config: &EncodeConfig,
) -> Result<SparseTensor3> {
    let config = require_lossy(config, InterScheme::Conditional)?;
    decode_frame(frame, Reference { context, recon: None }, weights, &config, None)
}

pub fn encode_frame_residual_baseline(
    frame: &SparseTensor3,
    reference: Option<&SparseTensor3>,
    weights: &ModelWeights,
    config: &EncodeConfig,
    index: u32,
) -> Result<(EncodedFrame, SparseTensor3)> {
    let config = require_lossy(config, InterScheme::Residual)?;
    encode_frame(frame, Reference { context: None, recon: reference }, weights, &config, index, None)
}

pub fn decode_frame_residual_baseline(
    frame: &EncodedFrame,
    reference: Option<&SparseTensor3>,
    weights: &ModelWeights,
    config: &EncodeConfig,
) -> Result<SparseTensor3> {
    let config = require_lossy(config, InterScheme::Residual)?;
    decode_frame(frame, Reference { context: None, recon: reference }, weights, &config, None)
}

enum Held {
    Context(FrameContext),
    Recon(SparseTensor3),
}

fn hold_reference(recon: &SparseTensor3, weights: &ModelWeights, config: &EncodeConfig) -> Result<Held> {
    Ok(match config.scheme {
        InterScheme::Conditional => {
            Held::Context(extract_pyramid(recon, weights, base_scale(config.m))?)
        }
        InterScheme::Residual => Held::Recon(recon.clone()),
    })
}

fn as_reference(held: Option<&Held>) -> Reference<'_> {
    match held {
        None => Reference::none(),
        Some(Held::Context(c)) => Reference::context(c),
        Some(Held::Recon(r)) => Reference::recon(r),
    }
}

/// Codes a sequence: frame 0 intra, then every frame predicted from the
/// previous reconstruction when inter coding is enabled. Returns the stream
/// and the decoder-side reconstructions.
pub fn encode_sequence_with_recon(
    frames: &[SparseTensor3],
    weights: &ModelWeights,
    config: &EncodeConfig,
) -> Result<(Bitstream, Vec<SparseTensor3>)> {
    config.validate()?;
    if frames.is_empty() {
        return Err(Error::Config("a sequence needs at least one frame".into()));
    }
    let mut held: Option<Held> = None;
    let mut coded = Vec::with_capacity(frames.len());
    let mut recons = Vec::with_capacity(frames.len());
    for (t, f) in frames.iter().enumerate() {
        let (ef, recon) = encode_frame(f, as_reference(held.as_ref()), weights, config, t as u32, None)?;
        if config.inter_enabled {
            held = Some(hold_reference(&recon, weights, config)?);
        }
        coded.push(ef);
        recons.push(recon);
    }
    let stream = Bitstream { config: *config, weight_hash: weights.hash(), frames: coded };
    Ok((stream, recons))
}

pub fn encode_sequence(frames: &[SparseTensor3], weights: &ModelWeights, config: &EncodeConfig) -> Result<Bitstream> {
    Ok(encode_sequence_with_recon(frames, weights, config)?.0)
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn decode_sequence(stream: &Bitstream, weights: &ModelWeights) -> Result<Vec<SparseTensor3>> {
    let found = weights.hash();
    if found != stream.weight_hash {
        return Err(Error::WeightMismatch { expected: hex(&stream.weight_hash), found: hex(&found) });
    }
    let config = &stream.config;
    let mut held: Option<Held> = None;
    let mut out = Vec::with_capacity(stream.frames.len());
    for (t, f) in stream.frames.iter().enumerate() {
        if f.header.index != t as u32 {
            return Err(Error::Format(format!("frame {t} is labelled {}", f.header.index)));
        }
        let reference = match f.header.frame_type {
            FrameType::Intra => Reference::none(),
            FrameType::Predicted => as_reference(held.as_ref()),
        };
        let recon = decode_frame(f, reference, weights, config, None)?;
        if config.inter_enabled {
            held = Some(hold_reference(&recon, weights, config)?);
        }
        out.push(recon);
    }
    Ok(out)
}
