//! Parameter layout of the full model and its seeded initialization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::entropy::FactorizedModel;
use crate::error::{Error, Result};
use crate::nn::conv::ConvKernel;
use crate::nn::layers::irn_layout;
use crate::nn::weights::ModelWeights;

/// Inception-ResNet blocks per stack.
pub const IRN_BLOCKS: usize = 3;

pub const SPATIAL: &str = "spatial";
pub const PREDICTOR: &str = "predictor";
pub const RESIDUAL_PREDICTOR: &str = "residual.predictor";
pub const EXTRACTOR: &str = "extractor";
pub const ENCODER: &str = "encoder";
pub const ENCODER_LATENT: &str = "encoder.latent";
pub const SOPA8: &str = "sopa8";
pub const SOPA1: &str = "sopa1";

/// Side length of the predictor window.
pub const PREDICTOR_KERNEL: usize = 9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    SameScale,
    Down,
    Up,
    Target,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub path: String,
    pub kind: LayerKind,
    pub kernel_size: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl LayerSpec {
    fn new(path: impl Into<String>, kind: LayerKind, k: usize, cin: usize, cout: usize) -> Self {
        Self { path: path.into(), kind, kernel_size: k, in_channels: cin, out_channels: cout }
    }
}

fn irn_stack_specs(out: &mut Vec<LayerSpec>, prefix: &str, width: usize) {
    for i in 0..IRN_BLOCKS {
        for (s, k, cin, cout) in irn_layout(width) {
            out.push(LayerSpec::new(format!("{prefix}.irn{i}.{s}"), LayerKind::SameScale, k, cin, cout));
        }
    }
}

fn pyramid_specs(out: &mut Vec<LayerSpec>, prefix: &str, width: usize) {
    out.push(LayerSpec::new(format!("{prefix}.down0"), LayerKind::Down, 2, 1, width));
    out.push(LayerSpec::new(format!("{prefix}.down"), LayerKind::Down, 2, width, width));
    irn_stack_specs(out, prefix, width);
}

fn sopa_specs(out: &mut Vec<LayerSpec>, prefix: &str, fuse_in: usize, width: usize) {
    out.push(LayerSpec::new(format!("{prefix}.fuse"), LayerKind::SameScale, 1, fuse_in, width));
    irn_stack_specs(out, &format!("{prefix}.pre"), width);
    out.push(LayerSpec::new(format!("{prefix}.up"), LayerKind::Up, 2, width, width));
    irn_stack_specs(out, &format!("{prefix}.post"), width);
    out.push(LayerSpec::new(format!("{prefix}.head0"), LayerKind::SameScale, 1, width, width));
    out.push(LayerSpec::new(format!("{prefix}.head1"), LayerKind::SameScale, 1, width, 1));
}

/// Every convolution of the model for a channel width and latent size.
pub fn model_layout(width: usize, latent_channels: usize) -> Vec<LayerSpec> {
    let mut out = Vec::new();
    out.push(LayerSpec::new(SPATIAL, LayerKind::SameScale, 3, 1, width));
    pyramid_specs(&mut out, EXTRACTOR, width);
    out.push(LayerSpec::new(PREDICTOR, LayerKind::Target, PREDICTOR_KERNEL, width, width));
    sopa_specs(&mut out, SOPA8, 2 * width, width);
    for g in 0..8 {
        out.push(LayerSpec::new(format!("{SOPA8}.stage{g}.cond"), LayerKind::SameScale, 3, 1, width));
    }
    pyramid_specs(&mut out, ENCODER, width);
    out.push(LayerSpec::new(ENCODER_LATENT, LayerKind::SameScale, 1, width, latent_channels));
    sopa_specs(&mut out, SOPA1, 2 * width + latent_channels, width);
    out.push(LayerSpec::new(
        RESIDUAL_PREDICTOR,
        LayerKind::Target,
        PREDICTOR_KERNEL,
        latent_channels,
        latent_channels,
    ));
    out
}

/// Checks that every layer of the layout is present with the right shape.
pub fn validate_layout(weights: &ModelWeights) -> Result<()> {
    if weights.width < 4 || !weights.width.is_multiple_of(4) {
        return Err(Error::Config(format!(
            "channel width {} must be a positive multiple of 4",
            weights.width
        )));
    }
    for spec in model_layout(weights.width, weights.latent_channels) {
        let k = weights.kernel(&spec.path)?;
        if k.kernel_size != spec.kernel_size
            || k.in_channels != spec.in_channels
            || k.out_channels != spec.out_channels
        {
            return Err(Error::Shape(format!(
                "`{}` is {}^3 x {} -> {}, expected {}^3 x {} -> {}",
                spec.path,
                k.kernel_size,
                k.in_channels,
                k.out_channels,
                spec.kernel_size,
                spec.in_channels,
                spec.out_channels
            )));
        }
    }
    if weights.entropy.channels != weights.latent_channels {
        return Err(Error::Shape("entropy model channels differ from latent channels".into()));
    }
    Ok(())
}

/// Uniform He initialization: weights in `±sqrt(6 / fan_in)`, zero biases.
pub fn init_weights(
    width: usize,
    latent_channels: usize,
    half_range: usize,
    seed: u64,
) -> Result<ModelWeights> {
    if width < 4 || !width.is_multiple_of(4) {
        return Err(Error::Config(format!("channel width {width} must be a positive multiple of 4")));
    }
    if latent_channels == 0 {
        return Err(Error::Config("latent channel count must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = ModelWeights::new(
        width,
        latent_channels,
        FactorizedModel::uniform(latent_channels, half_range),
    );
    for spec in model_layout(width, latent_channels) {
        let mut k = ConvKernel::zeros(spec.kernel_size, spec.in_channels, spec.out_channels, true);
        let fan_in = (k.volume() * spec.in_channels) as f32;
        let bound = (6.0 / fan_in).sqrt();
        for v in &mut k.weights {
            *v = rng.gen_range(-bound..bound);
        }
        w.insert(spec.path, k);
    }
    Ok(w)
}

/// A model whose every weight and bias is zero (all probabilities 0.5).
pub fn zero_weights(width: usize, latent_channels: usize, half_range: usize) -> ModelWeights {
    let mut w = ModelWeights::new(
        width,
        latent_channels,
        FactorizedModel::uniform(latent_channels, half_range),
    );
    for spec in model_layout(width, latent_channels) {
        w.insert(
            spec.path,
            ConvKernel::zeros(spec.kernel_size, spec.in_channels, spec.out_channels, true),
        );
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_matches_layout_and_is_seeded() {
        let a = init_weights(8, 2, 8, 1).unwrap();
        validate_layout(&a).unwrap();
        assert_eq!(a, init_weights(8, 2, 8, 1).unwrap());
        assert_ne!(a, init_weights(8, 2, 8, 2).unwrap());
    }

    #[test]
    fn missing_or_misshapen_layers_are_rejected() {
        let mut w = zero_weights(8, 2, 4);
        validate_layout(&w).unwrap();
        w.remove(PREDICTOR);
        assert!(matches!(validate_layout(&w), Err(Error::MissingPath(p)) if p == PREDICTOR));
        let mut w = zero_weights(8, 2, 4);
        w.insert(PREDICTOR, ConvKernel::zeros(3, 8, 8, true));
        assert!(matches!(validate_layout(&w), Err(Error::Shape(_))));
    }

    #[test]
    fn bad_width_is_rejected() {
        assert!(init_weights(6, 2, 4, 0).is_err());
    }
}
