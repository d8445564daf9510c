//! Residual mitigation and component enhancement.
//!
//! An RCM unit updates the illumination and reflectance features of one pyramid
//! level with each other's help. For the illumination branch:
//!
//! ```text
//! R_sup, L_sup = SES(norm(R)), SES(norm(L))
//! eps_L = softmax(φq(R_sup)ᵀ φk(L_sup) / d) applied to φv(norm(R))
//! h = L + eps_L
//! L_next = h + FFN(norm(h))
//! ```
//!
//! The reflectance branch is the mirror image. Attention is over channels, so
//! the similarity matrix is `C × C` and the cost is linear in pixel count.
//!
//! [`backbone_forward`] stacks RCM units into a U-shaped encoder/decoder and
//! emits an RGB reconstruction at every decoder level.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Bound, Conv, Deconv, DeconvInit, DepthwiseConv, Init, LayerNorm, ParamBuilder, ParamId, ParamKind};
use crate::scalar::Scalar;

/// Knobs of a single RCM unit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RcmConfig {
    /// SES upsampling factor
    pub s: usize,
    /// one SES pair per unit instead of one per direction
    pub shared_ses: bool,
    /// apply the SES 3×3 conv before the deconvolution (at input resolution)
    pub ses_conv_first: bool,
    /// depthwise instead of dense 3×3 in the middle of the FFN
    pub ffn_depthwise: bool,
}

impl Default for RcmConfig {
    fn default() -> Self {
        Self {
            s: 2,
            shared_ses: false,
            ses_conv_first: false,
            ffn_depthwise: false,
        }
    }
}

/// Super-resolution upsampler: stride-`s` deconvolution and a 3×3 conv.
#[derive(Clone, Debug, PartialEq)]
pub struct Ses {
    pub deconv: Deconv,
    pub conv: Conv,
    pub conv_first: bool,
}

impl Ses {
    /// Starts as nearest-neighbour upsampling (replicating deconv, identity conv).
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, name: &str, channels: usize, s: usize, conv_first: bool) -> Self {
        assert!(s >= 1, "SES factor must be at least 1");
        b.scoped(name, |b| Self {
            deconv: Deconv::new(b, "deconv", channels, channels, s, DeconvInit::Replicate),
            conv: Conv::new(b, "conv", channels, channels, 3, 1, Init::Identity),
            conv_first,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        if self.conv_first {
            let h = self.conv.forward(g, p, x)?;
            self.deconv.forward(g, p, h)
        } else {
            let h = self.deconv.forward(g, p, x)?;
            self.conv.forward(g, p, h)
        }
    }
}

/// Upsamples both features with their own SES networks.
pub fn ses_lift<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    src: Var,
    other: Var,
    ses_src: &Ses,
    ses_other: &Ses,
) -> Result<(Var, Var)> {
    if g.shape(src) != g.shape(other) {
        return Err(Error::dim("ses_lift", g.shape(src), g.shape(other)));
    }
    Ok((ses_src.forward(g, p, src)?, ses_other.forward(g, p, other)?))
}

/// Channel attention: `A = softmax_rows(Qᵀ K / d)`, output `V Aᵀ`.
///
/// `q`, `k` are `[h', w', C]` with equal token counts; `v` is `[H, W, C]`.
/// Returns the output and the `C × C` attention matrix.
pub fn mres_with_attention<T: Scalar>(g: &mut Graph<T>, q: Var, k: Var, v: Var, d: Var) -> Result<(Var, Var)> {
    let dv = g.value(d);
    if dv.numel() != 1 {
        return Err(Error::dim("mres scale", dv.shape(), &[1]));
    }
    let dval = dv.data()[0];
    if dval.is_nan() || dval <= T::zero() {
        return Err(Error::Contract(format!("mres scale d must be positive, got {dval}")));
    }
    let (sq, sk, sv) = (g.shape(q).to_vec(), g.shape(k).to_vec(), g.shape(v).to_vec());
    let (tq, c) = tokens(&sq, "mres query")?;
    let (tk, ck) = tokens(&sk, "mres key")?;
    let (_, cv) = tokens(&sv, "mres value")?;
    if tq != tk || c != ck {
        return Err(Error::dim("mres query/key", &sq, &sk));
    }
    if cv != c {
        return Err(Error::dim("mres value", &sv, &sq));
    }
    let sim = g.gram(q, k)?;
    let sim = g.div(sim, d)?;
    let attn = g.softmax(sim, 1)?;
    let out = g.mix_channels(v, attn)?;
    Ok((out, attn))
}

pub fn mres<T: Scalar>(g: &mut Graph<T>, q: Var, k: Var, v: Var, d: Var) -> Result<Var> {
    mres_with_attention(g, q, k, v, d).map(|(out, _)| out)
}

fn tokens(shape: &[usize], op: &'static str) -> Result<(usize, usize)> {
    match shape {
        [h, w, c] => Ok((h * w, *c)),
        s => Err(Error::dim(op, s, &[0, 0, 0])),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum FfnMid {
    Dense(Conv),
    Depthwise(DepthwiseConv),
}

/// `1×1 (C→2C) – GELU – 3×3 – GELU – 1×1 (2C→C)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Ffn {
    pub expand: Conv,
    pub mid: FfnMid,
    pub project: Conv,
}

impl Ffn {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, name: &str, channels: usize, depthwise: bool) -> Self {
        let hidden = 2 * channels;
        b.scoped(name, |b| Self {
            expand: Conv::new(b, "expand", channels, hidden, 1, 1, Init::KaimingUniform),
            mid: if depthwise {
                FfnMid::Depthwise(DepthwiseConv::new(b, "mid", hidden, 3, Init::KaimingUniform))
            } else {
                FfnMid::Dense(Conv::new(b, "mid", hidden, hidden, 3, 1, Init::KaimingUniform))
            },
            project: Conv::new(b, "project", hidden, channels, 1, 1, Init::KaimingUniform),
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.expand.forward(g, p, x)?;
        let h = g.gelu(h);
        let h = match &self.mid {
            FfnMid::Dense(c) => c.forward(g, p, h)?,
            FfnMid::Depthwise(c) => c.forward(g, p, h)?,
        };
        let h = g.gelu(h);
        self.project.forward(g, p, h)
    }
}

/// Parameters that update one component using the other.
#[derive(Clone, Debug, PartialEq)]
pub struct Direction {
    pub norm_attn: LayerNorm,
    pub norm_ffn: LayerNorm,
    pub query: Conv,
    pub key: Conv,
    pub value: Conv,
    /// attention temperature, `[1]`
    pub d: ParamId,
    pub ffn: Ffn,
    /// `(upsampler for the query source, upsampler for the key source)`
    pub ses: Option<(Ses, Ses)>,
}

impl Direction {
    fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, name: &str, channels: usize, cfg: &RcmConfig) -> Self {
        b.scoped(name, |b| Self {
            norm_attn: LayerNorm::new(b, "norm_attn", channels),
            norm_ffn: LayerNorm::new(b, "norm_ffn", channels),
            query: Conv::new(b, "query", channels, channels, 1, 1, Init::KaimingUniform),
            key: Conv::new(b, "key", channels, channels, 1, 1, Init::KaimingUniform),
            value: Conv::new(b, "value", channels, channels, 1, 1, Init::KaimingUniform),
            d: b.tensor(
                "d",
                &[1],
                1,
                Init::Constant((channels as f64).sqrt()),
                ParamKind::Scale,
            ),
            ffn: Ffn::new(b, "ffn", channels, cfg.ffn_depthwise),
            ses: (!cfg.shared_ses).then(|| {
                (
                    Ses::new(b, "ses_query", channels, cfg.s, cfg.ses_conv_first),
                    Ses::new(b, "ses_key", channels, cfg.s, cfg.ses_conv_first),
                )
            }),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RcmParams {
    pub channels: usize,
    /// updates illumination from reflectance
    pub to_illum: Direction,
    /// updates reflectance from illumination
    pub to_reflect: Direction,
    /// `(reflectance upsampler, illumination upsampler)` when shared
    pub shared_ses: Option<(Ses, Ses)>,
}

impl RcmParams {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, name: &str, channels: usize, cfg: &RcmConfig) -> Self {
        b.scoped(name, |b| Self {
            channels,
            to_illum: Direction::new(b, "to_illum", channels, cfg),
            to_reflect: Direction::new(b, "to_reflect", channels, cfg),
            shared_ses: cfg.shared_ses.then(|| {
                (
                    Ses::new(b, "ses_reflect", channels, cfg.s, cfg.ses_conv_first),
                    Ses::new(b, "ses_illum", channels, cfg.s, cfg.ses_conv_first),
                )
            }),
        })
    }
}

/// Attention branch and FFN of one direction. `src` supplies queries and
/// values, `other` supplies keys, `target` receives the residual.
fn direction_forward<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    dir: &Direction,
    target: Var,
    src_norm: Var,
    src_sup: Var,
    other_sup: Var,
) -> Result<Var> {
    let q = dir.query.forward(g, p, src_sup)?;
    let k = dir.key.forward(g, p, other_sup)?;
    let v = dir.value.forward(g, p, src_norm)?;
    let residual = mres(g, q, k, v, p.var(dir.d))?;
    let h = g.add(target, residual)?;
    let hn = dir.norm_ffn.forward(g, p, h)?;
    let f = dir.ffn.forward(g, p, hn)?;
    g.add(h, f)
}

/// One RCM unit; returns `(L_next, R_next)`.
pub fn rcm_unit<T: Scalar>(g: &mut Graph<T>, p: &Bound, params: &RcmParams, l: Var, r: Var) -> Result<(Var, Var)> {
    let (sl, sr) = (g.shape(l), g.shape(r));
    if sl != sr {
        return Err(Error::dim("rcm_unit", sl, sr));
    }
    match sl {
        [_, _, c] if *c == params.channels => {}
        s => return Err(Error::dim("rcm_unit channels", s, &[0, 0, params.channels])),
    }
    let ln_l = params.to_illum.norm_attn.forward(g, p, l)?;
    let ln_r = params.to_reflect.norm_attn.forward(g, p, r)?;

    let (l_next, r_next) = match &params.shared_ses {
        Some((ses_r, ses_l)) => {
            let (r_sup, l_sup) = ses_lift(g, p, ln_r, ln_l, ses_r, ses_l)?;
            let l_next = direction_forward(g, p, &params.to_illum, l, ln_r, r_sup, l_sup)?;
            let r_next = direction_forward(g, p, &params.to_reflect, r, ln_l, l_sup, r_sup)?;
            (l_next, r_next)
        }
        None => {
            fn up(dir: &Direction) -> (&Ses, &Ses) {
                let (q, k) = dir.ses.as_ref().expect("per-direction SES present");
                (q, k)
            }
            let (sq, sk) = up(&params.to_illum);
            let (r_sup, l_sup) = ses_lift(g, p, ln_r, ln_l, sq, sk)?;
            let l_next = direction_forward(g, p, &params.to_illum, l, ln_r, r_sup, l_sup)?;
            let (sq, sk) = up(&params.to_reflect);
            let (l_sup, r_sup) = ses_lift(g, p, ln_l, ln_r, sq, sk)?;
            let r_next = direction_forward(g, p, &params.to_reflect, r, ln_l, l_sup, r_sup)?;
            (l_next, r_next)
        }
    };
    Ok((l_next, r_next))
}

/// Architecture of the U-shaped enhancement network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    /// feature width `C` at full resolution
    pub channels: usize,
    /// number of downsampling steps `J`
    pub depth: usize,
    /// RCM units per branch per level
    pub units: usize,
    pub rcm: RcmConfig,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            channels: 16,
            depth: 2,
            units: 1,
            rcm: RcmConfig::default(),
        }
    }
}

impl BackboneConfig {
    /// Width at level `j`: `C·2^j`, capped at `8·C`.
    pub fn width(&self, level: usize) -> usize {
        self.channels * (1usize << level.min(3))
    }

    /// Rejects spatial extents that do not halve cleanly `depth` times.
    pub fn check_extent(&self, h: usize, w: usize) -> Result<()> {
        let f = 1usize << self.depth;
        if h == 0 || w == 0 || h % f != 0 || w % f != 0 {
            return Err(Error::Config(format!(
                "image extent {h}x{w} must be a positive multiple of 2^{} = {f}",
                self.depth
            )));
        }
        Ok(())
    }
}

/// Encoder stage at level `j < J`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLevel {
    pub units: Vec<RcmParams>,
    pub down_l: Conv,
    pub down_r: Conv,
}

/// Decoder stage at level `j < J`.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLevel {
    pub up_l: Deconv,
    pub up_r: Deconv,
    pub fuse_l: Conv,
    pub fuse_r: Conv,
    pub units: Vec<RcmParams>,
}

/// Initial bias of the reflectance head. Both heads start with zero weights, so
/// every `I_j` begins as a mid-grey constant and the illumination head as a
/// unit gain.
pub const HEAD_REFLECT_BIAS: f64 = 0.5;

/// Reconstruction heads `ζ_r`, `ζ_l` of one level.
#[derive(Clone, Debug, PartialEq)]
pub struct Heads {
    pub reflect: Conv,
    pub illum: Conv,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams {
    pub config: BackboneConfig,
    pub encoder: Vec<EncoderLevel>,
    pub bottleneck: Vec<RcmParams>,
    /// indexed by level, `0..J`
    pub decoder: Vec<DecoderLevel>,
    /// indexed by level, `0..=J`
    pub heads: Vec<Heads>,
}

impl BackboneParams {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, config: BackboneConfig) -> Self {
        assert!(config.units >= 1, "at least one RCM unit per level");
        let units = |b: &mut ParamBuilder<'_, T>, c: usize| {
            (0..config.units)
                .map(|u| RcmParams::new(b, &format!("rcm{u}"), c, &config.rcm))
                .collect::<Vec<_>>()
        };
        b.scoped("backbone", |b| {
            let encoder = (0..config.depth)
                .map(|j| {
                    let (c, cn) = (config.width(j), config.width(j + 1));
                    b.scoped(&format!("enc{j}"), |b| EncoderLevel {
                        units: units(b, c),
                        down_l: Conv::new(b, "down_l", c, cn, 4, 2, Init::KaimingUniform),
                        down_r: Conv::new(b, "down_r", c, cn, 4, 2, Init::KaimingUniform),
                    })
                })
                .collect();
            let bottleneck = b.scoped("bottleneck", |b| units(b, config.width(config.depth)));
            let decoder = (0..config.depth)
                .map(|j| {
                    let (c, cn) = (config.width(j), config.width(j + 1));
                    b.scoped(&format!("dec{j}"), |b| DecoderLevel {
                        up_l: Deconv::new(b, "up_l", cn, c, 2, DeconvInit::KaimingUniform),
                        up_r: Deconv::new(b, "up_r", cn, c, 2, DeconvInit::KaimingUniform),
                        fuse_l: Conv::new(b, "fuse_l", 2 * c, c, 1, 1, Init::KaimingUniform),
                        fuse_r: Conv::new(b, "fuse_r", 2 * c, c, 1, 1, Init::KaimingUniform),
                        units: units(b, c),
                    })
                })
                .collect();
            let heads = (0..=config.depth)
                .map(|j| {
                    let c = config.width(j);
                    b.scoped(&format!("head{j}"), |b| Heads {
                        reflect: Conv::with_bias(b, "reflect", c, 3, 3, 1, Init::Zeros, Init::Constant(HEAD_REFLECT_BIAS)),
                        illum: Conv::with_bias(b, "illum", c, 3, 3, 1, Init::Zeros, Init::Constant(1.0)),
                    })
                })
                .collect();
            Self {
                config,
                encoder,
                bottleneck,
                decoder,
                heads,
            }
        })
    }
}

/// Features and reconstruction at one pyramid level.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LevelState {
    pub illum: Var,
    pub reflect: Var,
    /// `ζ_r(R) ⊙ ζ_l(L)`, `[H/2^j, W/2^j, 3]`
    pub image: Var,
}

/// Decoder outputs, indexed by level `0..=J`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PyramidState {
    pub levels: Vec<LevelState>,
}

impl PyramidState {
    pub fn images(&self) -> Vec<Var> {
        self.levels.iter().map(|s| s.image).collect()
    }
}

fn run_units<T: Scalar>(g: &mut Graph<T>, p: &Bound, units: &[RcmParams], mut l: Var, mut r: Var) -> Result<(Var, Var)> {
    for u in units {
        (l, r) = rcm_unit(g, p, u, l, r)?;
    }
    Ok((l, r))
}

fn emit<T: Scalar>(g: &mut Graph<T>, p: &Bound, heads: &Heads, l: Var, r: Var) -> Result<LevelState> {
    let zr = heads.reflect.forward(g, p, r)?;
    let zl = heads.illum.forward(g, p, l)?;
    let image = g.mul(zr, zl)?;
    Ok(LevelState {
        illum: l,
        reflect: r,
        image,
    })
}

/// Runs the U-shaped network on the decomposed features `L_0`, `R_0`.
pub fn backbone_forward<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    params: &BackboneParams,
    l0: Var,
    r0: Var,
) -> Result<PyramidState> {
    let cfg = &params.config;
    let shape = g.shape(l0).to_vec();
    if g.shape(r0) != shape.as_slice() {
        return Err(Error::dim("backbone", &shape, g.shape(r0)));
    }
    let (h, w) = match shape[..] {
        [h, w, c] if c == cfg.channels => (h, w),
        _ => return Err(Error::dim("backbone input", &shape, &[0, 0, cfg.channels])),
    };
    cfg.check_extent(h, w)?;

    let (mut l, mut r) = (l0, r0);
    let mut skips = Vec::with_capacity(cfg.depth);
    for enc in &params.encoder {
        (l, r) = run_units(g, p, &enc.units, l, r)?;
        skips.push((l, r));
        l = enc.down_l.forward(g, p, l)?;
        r = enc.down_r.forward(g, p, r)?;
    }
    (l, r) = run_units(g, p, &params.bottleneck, l, r)?;

    let mut levels = vec![emit(g, p, &params.heads[cfg.depth], l, r)?];
    for j in (0..cfg.depth).rev() {
        let dec = &params.decoder[j];
        let (sl, sr) = skips[j];
        let ul = dec.up_l.forward(g, p, l)?;
        let ur = dec.up_r.forward(g, p, r)?;
        let cl = g.concat_channels(&[ul, sl])?;
        let cr = g.concat_channels(&[ur, sr])?;
        l = dec.fuse_l.forward(g, p, cl)?;
        r = dec.fuse_r.forward(g, p, cr)?;
        (l, r) = run_units(g, p, &dec.units, l, r)?;
        levels.push(emit(g, p, &params.heads[j], l, r)?);
    }
    levels.reverse();
    Ok(PyramidState { levels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check_many;
    use crate::params::ParamStore;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
    }

    fn build<R>(seed: u64, f: impl FnOnce(&mut ParamBuilder<'_, f64>) -> R) -> (ParamStore<f64>, R) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = f(&mut ParamBuilder::new(&mut store, &mut rng));
        (store, r)
    }

    fn zero_params(store: &mut ParamStore<f64>, matches: impl Fn(&str) -> bool) {
        let ids: Vec<_> = store.ids().filter(|&id| matches(store.name(id))).collect();
        for id in ids {
            store.get_mut(id).data_mut().fill(0.0);
        }
    }

    #[test]
    fn ses_identity_at_unit_scale_and_shape_at_two() {
        let (store, ses) = build(1, |b| Ses::new(b, "ses", 3, 1, false));
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let x = random(&[5, 6, 3], 2);
        let xv = g.constant(x.clone());
        let y = ses.forward(&mut g, &p, xv).unwrap();
        assert_eq!(g.value(y), &x);

        let (store, ses) = build(1, |b| Ses::new(b, "ses", 4, 2, false));
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let xv = g.constant(random(&[8, 8, 4], 3));
        let y = ses.forward(&mut g, &p, xv).unwrap();
        assert_eq!(g.shape(y), &[16, 16, 4]);
    }

    #[test]
    fn ses_gradient_matches_finite_differences() {
        for conv_first in [false, true] {
            let (mut store, ses) = build(4, |b| Ses::new(b, "ses", 2, 2, conv_first));
            // move away from the structured initialization
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let ids: Vec<_> = store.ids().collect();
            for id in ids {
                store.get_mut(id).data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.3..0.3));
            }
            let inputs: Vec<_> = std::iter::once(random(&[3, 3, 2], 6))
                .chain(store.values().iter().cloned())
                .collect();
            let w = random(&[6, 6, 2], 7);
            let report = grad_check_many(
                |g, v| {
                    let p = Bound::from_vars(v[1..].to_vec());
                    let y = ses.forward(g, &p, v[0])?;
                    let wv = g.constant(w.clone());
                    let y = g.mul(y, wv)?;
                    Ok(g.sum(y))
                },
                &inputs,
                1e-5,
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "{report:?}");
        }
    }

    fn attention(c: usize, tq: usize, hv: usize, d: f64) -> (Graph<f64>, Result<(Var, Var)>) {
        let mut g = Graph::new();
        let q = g.constant(random(&[tq, tq, c], 10));
        let k = g.constant(random(&[tq, tq, c], 11));
        let v = g.constant(random(&[hv, hv, c], 12));
        let d = g.constant(Tensor::new(vec![1], vec![d]).unwrap());
        let r = mres_with_attention(&mut g, q, k, v, d);
        (g, r)
    }

    #[test]
    fn mres_single_channel_returns_value() {
        let mut g = Graph::new();
        let q = g.constant(random(&[4, 4, 1], 1));
        let k = g.constant(random(&[4, 4, 1], 2));
        let vt = random(&[2, 2, 1], 3);
        let v = g.constant(vt.clone());
        let d = g.constant(Tensor::new(vec![1], vec![0.7]).unwrap());
        let out = mres(&mut g, q, k, v, d).unwrap();
        assert_eq!(g.value(out), &vt);
    }

    #[test]
    fn mres_attention_rows_are_distributions() {
        let (g, r) = attention(6, 4, 2, 1.3);
        let (out, a) = r.unwrap();
        assert_eq!(g.shape(out), &[2, 2, 6]);
        assert_eq!(g.shape(a), &[6, 6]);
        for row in g.value(a).data().chunks(6) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn mres_output_matches_loop_oracle() {
        let (g, r) = attention(3, 2, 3, 0.9);
        let (out, _) = r.unwrap();
        let (q, k, v) = (random(&[2, 2, 3], 10), random(&[2, 2, 3], 11), random(&[3, 3, 3], 12));
        let (q, k, v) = (q.data(), k.data(), v.data());
        let (c, t) = (3, 4);
        let mut a = vec![0.0; c * c];
        for i in 0..c {
            let s: Vec<f64> = (0..c)
                .map(|j| (0..t).map(|n| q[n * c + i] * k[n * c + j]).sum::<f64>() / 0.9)
                .collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = s.iter().map(|x| (x - m).exp()).sum();
            for j in 0..c {
                a[i * c + j] = (s[j] - m).exp() / z;
            }
        }
        for n in 0..9 {
            for i in 0..c {
                let want: f64 = (0..c).map(|j| a[i * c + j] * v[n * c + j]).sum();
                assert!((g.value(out).data()[n * c + i] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mres_flops_follow_closed_form() {
        let count = |h: usize, c: usize, s: usize| {
            let mut g = Graph::<f32>::new();
            let q = g.constant(Tensor::zeros(vec![s * h, s * h, c]));
            let k = g.constant(Tensor::zeros(vec![s * h, s * h, c]));
            let v = g.constant(Tensor::zeros(vec![h, h, c]));
            let d = g.constant(Tensor::new(vec![1], vec![1.0]).unwrap());
            mres(&mut g, q, k, v, d).unwrap();
            g.matmul_flops()
        };
        assert_eq!(count(16, 32, 2), 2_621_440);
        assert_eq!(count(32, 32, 2), 4 * count(16, 32, 2));
        assert_eq!(count(5, 1, 1), 4 * 25);
    }

    #[test]
    fn mres_rejects_bad_scale_and_token_mismatch() {
        let (_, r) = attention(2, 3, 3, 0.0);
        assert!(matches!(r, Err(Error::Contract(_))));
        let (_, r) = attention(2, 3, 3, -1.0);
        assert!(matches!(r, Err(Error::Contract(_))));
        let mut g = Graph::new();
        let q = g.constant(random(&[4, 4, 2], 1));
        let k = g.constant(random(&[4, 2, 2], 2));
        let v = g.constant(random(&[2, 2, 2], 3));
        let d = g.constant(Tensor::new(vec![1], vec![1.0]).unwrap());
        assert!(matches!(mres(&mut g, q, k, v, d), Err(Error::Dimension { .. })));
    }

    fn unit_configs() -> [RcmConfig; 3] {
        let base = RcmConfig::default();
        [
            base,
            RcmConfig {
                shared_ses: true,
                ..base
            },
            RcmConfig {
                shared_ses: true,
                ses_conv_first: true,
                ffn_depthwise: true,
                ..base
            },
        ]
    }

    #[test]
    fn zeroed_value_and_ffn_output_pass_inputs_through() {
        for cfg in unit_configs() {
            let (mut store, unit) = build(3, |b| RcmParams::new(b, "rcm", 4, &cfg));
            zero_params(&mut store, |n| n.contains(".value.") || n.contains(".ffn.project."));
            let mut g = Graph::new();
            let p = store.bind_frozen(&mut g);
            let (lt, rt) = (random(&[4, 4, 4], 1), random(&[4, 4, 4], 2));
            let l = g.constant(lt.clone());
            let r = g.constant(rt.clone());
            let (ln, rn) = rcm_unit(&mut g, &p, &unit, l, r).unwrap();
            assert_eq!(g.value(ln), &lt);
            assert_eq!(g.value(rn), &rt);
        }
    }

    #[test]
    fn rcm_unit_rejects_mismatched_branches() {
        let (store, unit) = build(3, |b| RcmParams::new(b, "rcm", 4, &RcmConfig::default()));
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let l = g.constant(random(&[4, 4, 4], 1));
        let r = g.constant(random(&[4, 2, 4], 2));
        assert!(matches!(rcm_unit(&mut g, &p, &unit, l, r), Err(Error::Dimension { .. })));
    }

    #[test]
    fn rcm_unit_gradient_matches_finite_differences() {
        for cfg in unit_configs() {
            let (mut store, unit) = build(8, |b| RcmParams::new(b, "rcm", 4, &cfg));
            // keep the 64-token attention away from saturation
            for dir in [&unit.to_illum, &unit.to_reflect] {
                store.get_mut(dir.d).data_mut()[0] = 24.0;
            }
            let inputs: Vec<_> = [random(&[4, 4, 4], 20), random(&[4, 4, 4], 21)]
                .into_iter()
                .chain(store.values().iter().cloned())
                .collect();
            let (wl, wr) = (random(&[4, 4, 4], 22), random(&[4, 4, 4], 23));
            let report = grad_check_many(
                |g, v| {
                    let p = Bound::from_vars(v[2..].to_vec());
                    let (l, r) = rcm_unit(g, &p, &unit, v[0], v[1])?;
                    let (a, b) = (g.constant(wl.clone()), g.constant(wr.clone()));
                    let l = g.mul(l, a)?;
                    let r = g.mul(r, b)?;
                    let s = g.add(l, r)?;
                    Ok(g.sum(s))
                },
                &inputs,
                1e-5,
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "{cfg:?}: {report:?}");
        }
    }

    fn backbone(config: BackboneConfig, seed: u64) -> (ParamStore<f64>, BackboneParams) {
        build(seed, |b| BackboneParams::new(b, config))
    }

    #[test]
    fn pyramid_shapes_and_widths() {
        let cfg = BackboneConfig {
            channels: 4,
            depth: 2,
            ..Default::default()
        };
        let (store, params) = backbone(cfg, 1);
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let l = g.constant(random(&[32, 32, 4], 1));
        let r = g.constant(random(&[32, 32, 4], 2));
        let pyr = backbone_forward(&mut g, &p, &params, l, r).unwrap();
        let shapes: Vec<_> = pyr.images().iter().map(|&v| g.shape(v).to_vec()).collect();
        assert_eq!(shapes, vec![vec![32, 32, 3], vec![16, 16, 3], vec![8, 8, 3]]);
        assert_eq!(g.shape(pyr.levels[2].illum), &[8, 8, 16]);
        assert_eq!(cfg.width(5), 32);
    }

    #[test]
    fn indivisible_extent_is_a_config_error() {
        let cfg = BackboneConfig {
            channels: 2,
            depth: 2,
            ..Default::default()
        };
        let (store, params) = backbone(cfg, 1);
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let l = g.constant(random(&[12, 10, 2], 1));
        let r = g.constant(random(&[12, 10, 2], 2));
        let n = g.len();
        assert!(matches!(
            backbone_forward(&mut g, &p, &params, l, r),
            Err(Error::Config(_))
        ));
        assert_eq!(g.len(), n);
    }

    #[test]
    fn bias_only_heads_give_constant_images() {
        let cfg = BackboneConfig {
            channels: 2,
            depth: 1,
            ..Default::default()
        };
        let (mut store, params) = backbone(cfg, 2);
        zero_params(&mut store, |n| n.contains(".head") && n.ends_with(".weight"));
        let bias = |store: &mut ParamStore<f64>, id: ParamId, v: [f64; 3]| {
            store.get_mut(id).data_mut().copy_from_slice(&v);
        };
        for h in &params.heads {
            bias(&mut store, h.reflect.bias, [0.5, 0.2, 0.9]);
            bias(&mut store, h.illum.bias, [0.4, 1.5, 0.1]);
        }
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let l = g.constant(random(&[8, 8, 2], 1));
        let r = g.constant(random(&[8, 8, 2], 2));
        let pyr = backbone_forward(&mut g, &p, &params, l, r).unwrap();
        let want = [0.5 * 0.4, 0.2 * 1.5, 0.9 * 0.1];
        for img in pyr.images() {
            for px in g.value(img).data().chunks(3) {
                assert_eq!(px, want);
            }
        }
    }

    #[test]
    fn backbone_gradient_wrt_features_at_16x16() {
        let cfg = BackboneConfig {
            channels: 4,
            depth: 1,
            rcm: RcmConfig {
                shared_ses: true,
                ses_conv_first: true,
                ffn_depthwise: true,
                ..Default::default()
            },
            ..Default::default()
        };
        let (store, params) = backbone(cfg, 9);
        let weights: Vec<_> = [[16, 16, 3], [8, 8, 3]]
            .iter()
            .enumerate()
            .map(|(i, s)| random(s, 30 + i as u64))
            .collect();
        let report = grad_check_many(
            |g, v| {
                let p = store.bind_frozen(g);
                let pyr = backbone_forward(g, &p, &params, v[0], v[1])?;
                let mut total = None;
                for (img, w) in pyr.images().into_iter().zip(&weights) {
                    let wv = g.constant(w.clone());
                    let t = g.mul(img, wv)?;
                    let t = g.sum(t);
                    total = Some(match total {
                        None => t,
                        Some(acc) => g.add(acc, t)?,
                    });
                }
                Ok(total.expect("at least one level"))
            },
            &[random(&[16, 16, 4], 40), random(&[16, 16, 4], 41)],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn backbone_is_deterministic_and_finite() {
        let cfg = BackboneConfig {
            channels: 4,
            depth: 2,
            ..Default::default()
        };
        let (store, params) = backbone(cfg, 5);
        let store = store.cast::<f32>();
        let run = || {
            let mut g = Graph::<f32>::new();
            let p = store.bind_frozen(&mut g);
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let l = g.constant(Tensor::from_fn(vec![16, 16, 4], |_| rng.gen_range(0.0..1.0)));
            let r = g.constant(Tensor::from_fn(vec![16, 16, 4], |_| rng.gen_range(0.0..1.0)));
            let pyr = backbone_forward(&mut g, &p, &params, l, r).unwrap();
            pyr.images().iter().map(|&v| g.value(v).clone()).collect::<Vec<_>>()
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        assert!(a.iter().all(|t| t.first_non_finite().is_none()));
    }
}
