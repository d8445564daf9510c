//! Dihedral augmentation applied identically to both images of a pair.

use rand::Rng;

use crate::colorspace::ImageRgb;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Element of the dihedral group of the square: an optional horizontal flip
/// followed by `quarter_turns` counter-clockwise rotations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Dihedral {
    pub quarter_turns: u8,
    pub flip: bool,
}

impl Dihedral {
    pub const IDENTITY: Self = Self {
        quarter_turns: 0,
        flip: false,
    };

    pub fn apply<T: Scalar>(&self, img: &ImageRgb<T>) -> Result<ImageRgb<T>> {
        let (h, w) = (img.height(), img.width());
        let turns = self.quarter_turns % 4;
        if turns % 2 == 1 && h != w {
            return Err(Error::Config(format!("quarter-turn rotation needs a square image, got {h}x{w}")));
        }
        Ok(ImageRgb::from_fn(h, w, |y, x, c| {
            // output (y, x) reads the source pixel that lands here
            let (mut sy, mut sx) = (y, x);
            for _ in 0..turns {
                (sy, sx) = (sx, w - 1 - sy);
            }
            if self.flip {
                sx = w - 1 - sx;
            }
            img.get(sy, sx, c)
        }))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentConfig {
    pub rotate: bool,
    pub flip: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rotate: true,
            flip: true,
        }
    }
}

/// Draws one group element and applies it to both members of the pair.
pub fn augment<T: Scalar>(
    pair: (&ImageRgb<T>, &ImageRgb<T>),
    cfg: AugmentConfig,
    rng: &mut impl Rng,
) -> Result<(ImageRgb<T>, ImageRgb<T>)> {
    let (a, b) = pair;
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::dim(
            "augment pair",
            &[a.height(), a.width()],
            &[b.height(), b.width()],
        ));
    }
    if cfg.rotate && a.height() != a.width() {
        return Err(Error::Config(format!(
            "rotation augmentation needs square patches, got {}x{}",
            a.height(),
            a.width()
        )));
    }
    let t = Dihedral {
        quarter_turns: if cfg.rotate { rng.gen_range(0..4) } else { 0 },
        flip: cfg.flip && rng.gen_bool(0.5),
    };
    Ok((t.apply(a)?, t.apply(b)?))
}
