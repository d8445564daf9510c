//! Inter-component residual reduction: decomposes a low-light image into a
//! one-channel illumination map and a three-channel reflectance image, then
//! lifts both to `C` feature channels for the enhancement backbone.
//!
//! Illumination is estimated from the image concatenated with two priors (RGB
//! channel mean and HSV value). Reflectance is estimated from the image
//! concatenated with a per-pixel softmax of `image / (illumination + eps)`.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Bound, Conv, Init, ParamBuilder};
use crate::scalar::Scalar;

/// Offset added after the softplus so the illumination map stays positive.
pub const ILLUM_FLOOR: f64 = 1e-4;

/// `1×1 → 5×5 → 1×1` convolution stack.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvStack {
    pub pre: Conv,
    pub spatial: Conv,
    pub post: Conv,
}

impl ConvStack {
    fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, name: &str, cin: usize, width: usize, cout: usize, init: Init) -> Self {
        b.scoped(name, |b| Self {
            pre: Conv::new(b, "pre", cin, width, 1, 1, init),
            spatial: Conv::new(b, "spatial", width, width, 5, 1, init),
            post: Conv::new(b, "post", width, cout, 1, 1, init),
        })
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.pre.forward(g, p, x)?;
        let h = self.spatial.forward(g, p, h)?;
        self.post.forward(g, p, h)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IcrrParams {
    pub illum: ConvStack,
    pub reflect: ConvStack,
    /// 3×3, 1 → C
    pub embed_illum: Conv,
    /// 3×3, 3 → C
    pub embed_reflect: Conv,
}

impl IcrrParams {
    /// `width` is the hidden width of both stacks, `channels` the feature width `C`.
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, width: usize, channels: usize, init: Init) -> Self {
        b.scoped("icrr", |b| Self {
            illum: ConvStack::new(b, "illum", 5, width, 1, init),
            reflect: ConvStack::new(b, "reflect", 6, width, 3, init),
            embed_illum: Conv::new(b, "embed_illum", 1, channels, 3, 1, init),
            embed_reflect: Conv::new(b, "embed_reflect", 3, channels, 3, 1, init),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecompositionOutput {
    /// `[H, W, 1]`, strictly positive
    pub illum_map: Var,
    /// `[H, W, 3]`
    pub reflect_img: Var,
    /// `L_0`, `[H, W, C]`
    pub illum_features: Var,
    /// `R_0`, `[H, W, C]`
    pub reflect_features: Var,
}

fn check_rgb<T: Scalar>(g: &Graph<T>, img: Var) -> Result<()> {
    match g.shape(img) {
        [_, _, 3] => Ok(()),
        s => Err(Error::dim("icrr input", s, &[0, 0, 3])),
    }
}

/// Illumination map from the image and its RGB-mean / HSV-value priors.
pub fn init_illumination<T: Scalar>(g: &mut Graph<T>, p: &Bound, img: Var, params: &IcrrParams) -> Result<Var> {
    check_rgb(g, img)?;
    let mean = g.mean_channels(img)?;
    let value = g.max_channels(img)?;
    let stacked = g.concat_channels(&[img, mean, value])?;
    let raw = params.illum.forward(g, p, stacked)?;
    let pos = g.softplus(raw);
    Ok(g.add_const(pos, T::lit(ILLUM_FLOOR)))
}

/// Reflectance image from the image and the softmax-normalized ratio prior.
pub fn init_reflectance<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    img: Var,
    illum: Var,
    params: &IcrrParams,
) -> Result<Var> {
    check_rgb(g, img)?;
    if let Some(i) = g.value(illum).data().iter().position(|&v| v <= T::zero()) {
        return Err(Error::Contract(format!(
            "illumination must be positive, found {} at index {i}",
            g.value(illum).data()[i]
        )));
    }
    let ratio = g.div_eps(img, illum)?;
    let prior = g.softmax(ratio, 2)?;
    let stacked = g.concat_channels(&[img, prior])?;
    params.reflect.forward(g, p, stacked)
}

/// Runs both initializations, then embeds each component into `C` channels.
pub fn decompose<T: Scalar>(g: &mut Graph<T>, p: &Bound, img: Var, params: &IcrrParams) -> Result<DecompositionOutput> {
    let illum_map = init_illumination(g, p, img, params)?;
    let reflect_img = init_reflectance(g, p, img, illum_map, params)?;
    let illum_features = params.embed_illum.forward(g, p, illum_map)?;
    let reflect_features = params.embed_reflect.forward(g, p, reflect_img)?;
    Ok(DecompositionOutput {
        illum_map,
        reflect_img,
        illum_features,
        reflect_features,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::colorspace::ImageRgb;
    use crate::gradcheck::grad_check_many;
    use crate::params::ParamStore;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(width: usize, c: usize, init: Init) -> (ParamStore<f64>, IcrrParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut b = ParamBuilder::new(&mut store, &mut rng);
        let params = IcrrParams::new(&mut b, width, c, init);
        (store, params)
    }

    fn random_image(h: usize, w: usize, seed: u64) -> ImageRgb<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageRgb::from_fn(h, w, |_, _, _| rng.gen_range(0.05..0.95))
    }

    #[test]
    fn zero_weights_give_constant_softplus_map() {
        let (store, params) = setup(4, 3, Init::Zeros);
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let img = g.constant(random_image(5, 7, 1).into_tensor());
        let l = init_illumination(&mut g, &p, img, &params).unwrap();
        assert_eq!(g.shape(l), &[5, 7, 1]);
        let expect = 2f64.ln() + ILLUM_FLOOR;
        assert!(g.value(l).data().iter().all(|&v| (v - expect).abs() < 1e-15));
    }

    #[test]
    fn gray_image_gives_uniform_prior() {
        let (store, params) = setup(4, 3, Init::KaimingUniform);
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let img = g.constant(ImageRgb::<f64>::filled(4, 4, [0.4; 3]).into_tensor());
        let illum = g.constant(Tensor::full(vec![4, 4, 1], 0.7));
        let ratio = g.div_eps(img, illum).unwrap();
        let prior = g.softmax(ratio, 2).unwrap();
        assert!(g.value(prior).data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        let r = init_reflectance(&mut g, &p, img, illum, &params).unwrap();
        assert_eq!(g.shape(r), &[4, 4, 3]);
    }

    #[test]
    fn non_positive_illumination_is_rejected() {
        let (store, params) = setup(4, 3, Init::KaimingUniform);
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let img = g.constant(random_image(2, 2, 3).into_tensor());
        let illum = g.constant(Tensor::zeros(vec![2, 2, 1]));
        assert!(matches!(
            init_reflectance(&mut g, &p, img, illum, &params),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn decompose_shapes_positivity_and_determinism() {
        let (store, params) = setup(8, 6, Init::KaimingUniform);
        let img = random_image(32, 32, 4);
        let run = || {
            let mut g = Graph::new();
            let p = store.bind_frozen(&mut g);
            let x = g.constant(img.tensor().clone());
            let d = decompose(&mut g, &p, x, &params).unwrap();
            (g, d)
        };
        let (g, d) = run();
        assert_eq!(g.shape(d.illum_map), &[32, 32, 1]);
        assert_eq!(g.shape(d.reflect_img), &[32, 32, 3]);
        assert_eq!(g.shape(d.illum_features), &[32, 32, 6]);
        assert_eq!(g.shape(d.reflect_features), &[32, 32, 6]);
        assert!(g.value(d.illum_map).data().iter().all(|&v| v > 0.0));
        let (g2, d2) = run();
        assert_eq!(g.value(d.reflect_features), g2.value(d2.reflect_features));
    }

    #[test]
    fn outputs_finite_across_intensity_scales() {
        let (store, params) = setup(8, 4, Init::KaimingUniform);
        let base = random_image(8, 8, 5);
        for scale in [0.01, 0.1, 1.0] {
            let img = ImageRgb::new(base.tensor().map(|v| v * scale)).unwrap();
            let mut g = Graph::new();
            let p = store.bind_frozen(&mut g);
            let x = g.constant(img.into_tensor());
            let d = decompose(&mut g, &p, x, &params).unwrap();
            for v in [d.illum_map, d.reflect_img, d.illum_features, d.reflect_features] {
                assert!(g.value(v).first_non_finite().is_none(), "scale {scale}");
            }
        }
    }

    #[test]
    fn illumination_gradient_matches_finite_differences() {
        let (store, params) = setup(3, 2, Init::KaimingUniform);
        let img = random_image(6, 6, 6).into_tensor();
        let report = grad_check_many(
            |g, vars| {
                let p = Bound::from_vars(vars[1..].to_vec());
                let l = init_illumination(g, &p, vars[0], &params)?;
                Ok(g.sum(l))
            },
            &std::iter::once(img).chain(store.values().iter().cloned()).collect::<Vec<_>>(),
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
