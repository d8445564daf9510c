//! The gradient suite: every differentiable graph op and the composite
//! network stages, checked in 64-bit against central differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::gradcheck::{grad_check_many, GradCheckReport};
use crate::graph::{Graph, Var};
use crate::icrr::{init_illumination, init_reflectance, IcrrParams};
use crate::losses::{rmc_loss, ThetaParams};
use crate::params::{Bound, Init, ParamBuilder, ParamStore};
use crate::rcm::{backbone_forward, rcm_unit, BackboneConfig, BackboneParams, RcmConfig, RcmParams};
use crate::tensor::Tensor;

/// Pass threshold on the maximum relative error.
pub const SUITE_TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteEntry {
    /// owning module: `tensor_core`, `icrr`, `rcm` or `losses`
    pub module: &'static str,
    pub name: &'static str,
    pub report: GradCheckReport,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < SUITE_TOLERANCE
    }
}

fn random(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

fn signed(shape: &[usize], seed: u64) -> Tensor<f64> {
    random(shape, seed, -1.0, 1.0)
}

/// Contracts `out` against fixed random weights so no gradient is trivially zero.
fn readout(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let w = g.constant(signed(g.shape(out), seed));
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

type Case = (&'static str, &'static str, Box<dyn Fn() -> Result<GradCheckReport>>);

fn op_case(
    name: &'static str,
    inputs: Vec<Tensor<f64>>,
    f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static,
) -> Case {
    (
        "tensor_core",
        name,
        Box::new(move || {
            grad_check_many(
                |g, v| {
                    let out = f(g, v)?;
                    readout(g, out, 999)
                },
                &inputs,
                STEP,
            )
        }),
    )
}

fn build<R>(seed: u64, f: impl FnOnce(&mut ParamBuilder<'_, f64>) -> R) -> (ParamStore<f64>, R) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = f(&mut ParamBuilder::new(&mut store, &mut rng));
    (store, r)
}

/// Inputs followed by every parameter, each jittered by `U(-0.1, 0.1)` so
/// zero-initialized weights (heads, biases) are exercised away from zero.
fn with_params(inputs: &[Tensor<f64>], store: &ParamStore<f64>) -> Vec<Tensor<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5EED);
    let mut out = inputs.to_vec();
    for t in store.values() {
        let data = t.data().iter().map(|v| v + rng.gen_range(-0.1..0.1)).collect();
        out.push(Tensor::new(t.shape().to_vec(), data).expect("same shape"));
    }
    out
}

fn cases() -> Vec<Case> {
    let s = |shape: &[usize], seed| signed(shape, seed);
    let pos = |shape: &[usize], seed| random(shape, seed, 0.2, 1.5);
    let mut v: Vec<Case> = vec![
        op_case("add", vec![s(&[3, 4, 2], 1), s(&[3, 4, 1], 2)], |g, v| g.add(v[0], v[1])),
        op_case("sub", vec![s(&[3, 4, 2], 3), s(&[1], 4)], |g, v| g.sub(v[0], v[1])),
        op_case("mul", vec![s(&[3, 4, 2], 5), s(&[3, 4, 2], 6)], |g, v| g.mul(v[0], v[1])),
        op_case("div", vec![s(&[3, 4, 2], 7), pos(&[3, 4, 1], 8)], |g, v| g.div(v[0], v[1])),
        op_case("div_eps", vec![s(&[3, 4, 3], 9), pos(&[3, 4, 1], 10)], |g, v| g.div_eps(v[0], v[1])),
        op_case("add_const", vec![s(&[5, 3], 11)], |g, v| Ok(g.add_const(v[0], 0.7))),
        op_case("scale", vec![s(&[5, 3], 12)], |g, v| Ok(g.scale(v[0], -1.3))),
        op_case("matmul", vec![s(&[4, 5], 13), s(&[5, 3], 14)], |g, v| g.matmul(v[0], v[1])),
        op_case("gram", vec![s(&[3, 4, 2], 15), s(&[3, 4, 3], 16)], |g, v| g.gram(v[0], v[1])),
        op_case("mix_channels", vec![s(&[3, 4, 2], 17), s(&[3, 2], 18)], |g, v| {
            g.mix_channels(v[0], v[1])
        }),
        op_case("transpose", vec![s(&[4, 6], 19)], |g, v| g.transpose(v[0])),
        op_case("reshape", vec![s(&[4, 6], 20)], |g, v| g.reshape(v[0], &[2, 3, 4])),
        op_case("softmax", vec![s(&[3, 4, 5], 21)], |g, v| g.softmax(v[0], 2)),
        op_case("conv2d_k3", vec![s(&[5, 6, 2], 22), s(&[3, 3, 2, 3], 23), s(&[3], 24)], |g, v| {
            g.conv2d(v[0], v[1], Some(v[2]), 1)
        }),
        op_case("conv2d_k4_s2", vec![s(&[6, 6, 2], 25), s(&[4, 4, 2, 3], 26)], |g, v| {
            g.conv2d(v[0], v[1], None, 2)
        }),
        op_case("deconv2d", vec![s(&[3, 3, 3], 27), s(&[2, 2, 2, 3], 28), s(&[2], 29)], |g, v| {
            g.deconv2d(v[0], v[1], Some(v[2]), 2)
        }),
        op_case("depthwise_conv2d", vec![s(&[5, 5, 3], 30), s(&[3, 3, 3], 31), s(&[3], 32)], |g, v| {
            g.depthwise_conv2d(v[0], v[1], Some(v[2]))
        }),
        op_case("layer_norm", vec![s(&[3, 4, 5], 33), s(&[5], 34), s(&[5], 35)], |g, v| {
            g.layer_norm(v[0], v[1], v[2])
        }),
        op_case("gelu", vec![random(&[4, 6], 36, -3.0, 3.0)], |g, v| Ok(g.gelu(v[0]))),
        op_case("softplus", vec![random(&[4, 6], 37, -4.0, 4.0)], |g, v| Ok(g.softplus(v[0]))),
        op_case("concat_channels", vec![s(&[3, 4, 2], 38), s(&[3, 4, 1], 39)], |g, v| {
            g.concat_channels(&[v[0], v[1]])
        }),
        op_case("mean_channels", vec![s(&[3, 4, 3], 40)], |g, v| g.mean_channels(v[0])),
        op_case("max_channels", vec![s(&[3, 4, 3], 41)], |g, v| g.max_channels(v[0])),
        op_case("sum", vec![s(&[3, 4], 42)], |g, v| Ok(g.sum(v[0]))),
        op_case("mean", vec![s(&[3, 4], 43)], |g, v| Ok(g.mean(v[0]))),
        op_case("l1", vec![s(&[3, 4, 3], 44), s(&[3, 4, 3], 45)], |g, v| g.l1(v[0], v[1])),
    ];

    v.push((
        "icrr",
        "icrr_decomposition",
        Box::new(|| {
            let (store, params) = build(50, |b| IcrrParams::new(b, 3, 2, Init::KaimingUniform));
            let img = random(&[6, 6, 3], 51, 0.05, 0.95);
            grad_check_many(
                |g, v| {
                    let p = Bound::from_vars(v[1..].to_vec());
                    let l = init_illumination(g, &p, v[0], &params)?;
                    let r = init_reflectance(g, &p, v[0], l, &params)?;
                    let a = readout(g, l, 52)?;
                    let b = readout(g, r, 53)?;
                    g.add(a, b)
                },
                &with_params(&[img], &store),
                STEP,
            )
        }),
    ));

    v.push((
        "rcm",
        "rcm_unit",
        Box::new(|| {
            let (mut store, unit) = build(60, |b| RcmParams::new(b, "rcm", 4, &RcmConfig::default()));
            // keep the 64-token attention away from saturation
            for dir in [&unit.to_illum, &unit.to_reflect] {
                store.get_mut(dir.d).data_mut()[0] = 24.0;
            }
            let inputs = [signed(&[4, 4, 4], 61), signed(&[4, 4, 4], 62)];
            grad_check_many(
                |g, v| {
                    let p = Bound::from_vars(v[2..].to_vec());
                    let (l, r) = rcm_unit(g, &p, &unit, v[0], v[1])?;
                    let a = readout(g, l, 63)?;
                    let b = readout(g, r, 64)?;
                    g.add(a, b)
                },
                &with_params(&inputs, &store),
                STEP,
            )
        }),
    ));

    v.push((
        "rcm",
        "backbone_j1",
        Box::new(|| {
            let cfg = BackboneConfig {
                channels: 2,
                depth: 1,
                ..Default::default()
            };
            let (store, params) = build(70, |b| BackboneParams::new(b, cfg));
            let inputs = [signed(&[4, 4, 2], 71), signed(&[4, 4, 2], 72)];
            grad_check_many(
                |g, v| {
                    let p = Bound::from_vars(v[2..].to_vec());
                    let pyr = backbone_forward(g, &p, &params, v[0], v[1])?;
                    let mut total = g.constant(Tensor::scalar(0.0));
                    for (j, img) in pyr.images().into_iter().enumerate() {
                        let t = readout(g, img, 73 + j as u64)?;
                        total = g.add(total, t)?;
                    }
                    Ok(total)
                },
                &with_params(&inputs, &store),
                STEP,
            )
        }),
    ));

    v.push((
        "losses",
        "rmc_loss",
        Box::new(|| {
            let (store, theta) = build(80, |b| ThetaParams::new(b, 1));
            let inputs = [random(&[4, 4, 3], 81, 0.0, 1.0), random(&[2, 2, 3], 82, 0.0, 1.0)];
            let gt = random(&[4, 4, 3], 83, 0.0, 1.0);
            grad_check_many(
                |g, v| {
                    let p = Bound::from_vars(v[2..].to_vec());
                    let gt = g.constant(gt.clone());
                    rmc_loss(g, &p, &v[..2], gt, &theta)
                },
                &with_params(&inputs, &store),
                STEP,
            )
        }),
    ));
    v
}

/// Names of every suite entry as `(module, name)`.
pub fn suite_names() -> Vec<(&'static str, &'static str)> {
    cases().into_iter().map(|(m, n, _)| (m, n)).collect()
}

/// Runs the entries whose module or name equals `filter` (all when `None`).
pub fn run_suite(filter: Option<&str>) -> Result<Vec<SuiteEntry>> {
    cases()
        .into_iter()
        .filter(|(m, n, _)| filter.is_none_or(|f| f == *m || f == *n))
        .map(|(module, name, run)| {
            Ok(SuiteEntry {
                module,
                name,
                report: run()?,
            })
        })
        .collect()
}
