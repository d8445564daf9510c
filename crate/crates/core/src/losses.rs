//! Retinex reconstruction and the multi-scale consistency loss.
//!
//! Every pyramid level `j` reconstructs an image at `1/2^j` resolution. The
//! loss upsamples each reconstruction back to full resolution with a small
//! learned network `θ_j` and sums the mean absolute errors against the ground
//! truth. `θ_0` is the identity.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Bound, Conv, Deconv, DeconvInit, Init, ParamBuilder};
use crate::scalar::Scalar;

/// `I = L ⊙ R`; a one-channel `L` broadcasts over the channels of `R`.
pub fn synthesize<T: Scalar>(g: &mut Graph<T>, l: Var, r: Var) -> Result<Var> {
    g.mul(l, r)
}

/// One ×2 step of `θ_j`: deconvolution followed by a 3×3 conv.
#[derive(Clone, Debug, PartialEq)]
pub struct UpStep {
    pub deconv: Deconv,
    pub conv: Conv,
}

/// Upsampling networks `θ_1 ..= θ_J` (index 0 holds `θ_1`).
#[derive(Clone, Debug, PartialEq)]
pub struct ThetaParams {
    pub levels: Vec<Vec<UpStep>>,
}

impl ThetaParams {
    /// Each step starts as exact nearest-neighbour upsampling.
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, depth: usize) -> Self {
        b.scoped("theta", |b| Self {
            levels: (1..=depth)
                .map(|j| {
                    (0..j)
                        .map(|step| {
                            b.scoped(&format!("level{j}.step{step}"), |b| UpStep {
                                deconv: Deconv::new(b, "deconv", 3, 3, 2, DeconvInit::Replicate),
                                conv: Conv::new(b, "conv", 3, 3, 3, 1, Init::Identity),
                            })
                        })
                        .collect()
                })
                .collect(),
        })
    }

    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    /// Applies `θ_level` to `img`.
    pub fn upsample<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, level: usize, img: Var) -> Result<Var> {
        if level == 0 {
            return Ok(img);
        }
        let steps = self.levels.get(level - 1).ok_or_else(|| {
            Error::Contract(format!("no upsampler for level {level} (depth {})", self.depth()))
        })?;
        let mut x = img;
        for s in steps {
            x = s.deconv.forward(g, p, x)?;
            x = s.conv.forward(g, p, x)?;
        }
        Ok(x)
    }
}

/// Per-level terms `mean|gt − θ_j(I_j)|` for the pyramid images `I_0 ..= I_J`.
pub fn rmc_terms<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    images: &[Var],
    gt: Var,
    theta: &ThetaParams,
) -> Result<Vec<Var>> {
    if images.is_empty() {
        return Err(Error::Contract("rmc_loss needs at least one pyramid level".into()));
    }
    let gt_shape = g.shape(gt).to_vec();
    images
        .iter()
        .enumerate()
        .map(|(j, &img)| {
            let up = theta.upsample(g, p, j, img)?;
            if g.shape(up) != gt_shape.as_slice() {
                return Err(Error::Dimension {
                    op: format!("rmc_loss level {j}"),
                    lhs: g.shape(up).to_vec(),
                    rhs: gt_shape.clone(),
                });
            }
            g.l1(gt, up)
        })
        .collect()
}

/// Sum of [`rmc_terms`].
pub fn rmc_loss<T: Scalar>(g: &mut Graph<T>, p: &Bound, images: &[Var], gt: Var, theta: &ThetaParams) -> Result<Var> {
    let terms = rmc_terms(g, p, images, gt, theta)?;
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    Ok(total)
}
