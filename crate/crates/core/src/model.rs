//! The full enhancement network: decomposition, U-shaped RCM backbone, and the
//! loss-side upsamplers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::colorspace::ImageRgb;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::icrr::{decompose, DecompositionOutput, IcrrParams};
use crate::losses::{rmc_loss, ThetaParams};
use crate::params::{Bound, Init, ParamBuilder, ParamStore};
use crate::rcm::{backbone_forward, BackboneConfig, BackboneParams, PyramidState, RcmConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    /// hidden width of the decomposition conv stacks
    pub icrr_width: usize,
    pub backbone: BackboneConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            icrr_width: 16,
            backbone: BackboneConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Desk-scale training architecture: `C = 16`, `J = 2`, one upsampler pair
    /// shared by both attention directions, the 3×3 upsampler conv applied
    /// before the deconv, and a depthwise middle FFN layer.
    pub fn desk() -> Self {
        let mut cfg = Self::default();
        cfg.backbone.rcm = RcmConfig {
            shared_ses: true,
            ses_conv_first: true,
            ffn_depthwise: true,
            ..RcmConfig::default()
        };
        cfg
    }

    pub fn channels(&self) -> usize {
        self.backbone.channels
    }

    pub fn depth(&self) -> usize {
        self.backbone.depth
    }

    pub fn rcm(&self) -> RcmConfig {
        self.backbone.rcm
    }

    pub fn validate(&self) -> Result<()> {
        let b = &self.backbone;
        if self.icrr_width == 0 || b.channels == 0 || b.units == 0 || b.rcm.s == 0 {
            return Err(Error::Config(
                "icrr_width, channels, units and s must all be at least 1".into(),
            ));
        }
        if b.depth > 8 {
            return Err(Error::Config(format!("depth {} exceeds 8", b.depth)));
        }
        Ok(())
    }
}

/// Parameter layout of the whole network.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub config: ModelConfig,
    pub icrr: IcrrParams,
    pub backbone: BackboneParams,
    pub theta: ThetaParams,
}

impl Network {
    /// Allocates every parameter in a fixed order.
    pub fn build<T: Scalar>(b: &mut ParamBuilder<'_, T>, config: ModelConfig) -> Self {
        Self {
            config,
            icrr: IcrrParams::new(b, config.icrr_width, config.channels(), Init::KaimingUniform),
            backbone: BackboneParams::new(b, config.backbone),
            theta: ThetaParams::new(b, config.depth()),
        }
    }
}

/// Network layout together with its parameter values.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub net: Network,
    pub params: ParamStore<T>,
}

/// Everything a forward pass produces.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ForwardOutput {
    pub decomposition: DecompositionOutput,
    pub pyramid: PyramidState,
}

/// Concrete decomposition of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Decomposition<T> {
    /// `[H, W, 1]`
    pub illum_map: Tensor<T>,
    /// `[H, W, 3]`
    pub reflect_img: Tensor<T>,
    /// `L_0`, `[H, W, C]`
    pub illum_features: Tensor<T>,
    /// `R_0`, `[H, W, C]`
    pub reflect_features: Tensor<T>,
}

impl<T: Scalar> Model<T> {
    /// Fresh model with parameters drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Network::build(&mut ParamBuilder::new(&mut params, &mut rng), config);
        Ok(Self { net, params })
    }

    /// Empty layout for `config`, to be filled from a checkpoint.
    pub fn skeleton(config: ModelConfig) -> Result<Self> {
        Self::new(config, 0)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.net.config
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        self.net.config.backbone.check_extent(h, w)
    }

    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, img: Var) -> Result<ForwardOutput> {
        match *g.shape(img) {
            [h, w, 3] => self.check_input(h, w)?,
            _ => return Err(Error::dim("model input", g.shape(img), &[0, 0, 3])),
        }
        let decomposition = decompose(g, p, img, &self.net.icrr)?;
        let pyramid = backbone_forward(
            g,
            p,
            &self.net.backbone,
            decomposition.illum_features,
            decomposition.reflect_features,
        )?;
        Ok(ForwardOutput {
            decomposition,
            pyramid,
        })
    }

    /// Training loss of one low/clean pair.
    pub fn loss(&self, g: &mut Graph<T>, p: &Bound, low: Var, clean: Var) -> Result<Var> {
        let out = self.forward(g, p, low)?;
        rmc_loss(g, p, &out.pyramid.images(), clean, &self.net.theta)
    }

    /// Full-resolution reconstruction `I_0`, clamped to `[0, 1]`.
    pub fn enhance(&self, img: &ImageRgb<T>) -> Result<ImageRgb<T>> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let x = g.constant(img.tensor().clone());
        let out = self.forward(&mut g, &p, x)?;
        let i0 = out.pyramid.levels[0].image;
        ImageRgb::clamped(g.value(i0).clone())
    }

    pub fn decompose(&self, img: &ImageRgb<T>) -> Result<Decomposition<T>> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let x = g.constant(img.tensor().clone());
        let d = decompose(&mut g, &p, x, &self.net.icrr)?;
        Ok(Decomposition {
            illum_map: g.value(d.illum_map).clone(),
            reflect_img: g.value(d.reflect_img).clone(),
            illum_features: g.value(d.illum_features).clone(),
            reflect_features: g.value(d.reflect_features).clone(),
        })
    }

    /// Same layout with values converted to another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            net: self.net.clone(),
            params: self.params.cast(),
        }
    }
}
