//! RGB images and the two illumination priors computed from them.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `H × W × 3` image with every value finite and inside `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRgb<T> {
    pixels: Tensor<T>,
}

impl<T: Scalar> ImageRgb<T> {
    /// Wraps an `[H, W, 3]` tensor, rejecting out-of-range or non-finite values.
    pub fn new(pixels: Tensor<T>) -> Result<Self> {
        Self::check_shape(&pixels)?;
        if let Some(index) = pixels.first_non_finite() {
            return Err(Error::NonFinite {
                what: "image".into(),
                index,
            });
        }
        if let Some(i) = pixels
            .data()
            .iter()
            .position(|&v| v < T::zero() || v > T::one())
        {
            return Err(Error::Contract(format!(
                "image value {} at index {i} outside [0, 1]",
                pixels.data()[i]
            )));
        }
        Ok(Self { pixels })
    }

    /// Clamps into `[0, 1]`; non-finite values are still rejected.
    pub fn clamped(pixels: Tensor<T>) -> Result<Self> {
        Self::check_shape(&pixels)?;
        if let Some(index) = pixels.first_non_finite() {
            return Err(Error::NonFinite {
                what: "image".into(),
                index,
            });
        }
        Ok(Self {
            pixels: pixels.map(|v| v.max(T::zero()).min(T::one())),
        })
    }

    /// Builds an image from `f(y, x, channel)`, clamping the result.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let pixels = Tensor::from_fn(vec![height, width, 3], |i| {
            let (px, c) = (i / 3, i % 3);
            f(px / width, px % width, c).max(T::zero()).min(T::one())
        });
        Self { pixels }
    }

    pub fn filled(height: usize, width: usize, rgb: [T; 3]) -> Self {
        Self::from_fn(height, width, |_, _, c| rgb[c])
    }

    fn check_shape(t: &Tensor<T>) -> Result<()> {
        match t.shape() {
            [_, _, 3] => Ok(()),
            s => Err(Error::dim("image", s, &[0, 0, 3])),
        }
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> T {
        self.pixels.data()[(y * self.width() + x) * 3 + c]
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.pixels
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.pixels
    }

    pub fn cast<U: Scalar>(&self) -> ImageRgb<U> {
        ImageRgb {
            pixels: self.pixels.cast(),
        }
    }

    /// Copies the `h × w` window whose top-left corner is `(y, x)`.
    pub fn crop(&self, y: usize, x: usize, h: usize, w: usize) -> Result<Self> {
        if y + h > self.height() || x + w > self.width() {
            return Err(Error::dim(
                "crop",
                &[self.height(), self.width()],
                &[y + h, x + w],
            ));
        }
        Ok(Self::from_fn(h, w, |yy, xx, c| self.get(y + yy, x + xx, c)))
    }
}

/// Per-pixel arithmetic mean of the three channels, `[H, W, 1]`.
pub fn rgb_mean_prior<T: Scalar>(img: &ImageRgb<T>) -> Tensor<T> {
    let third = T::one() / T::lit(3.0);
    let data = img
        .tensor()
        .data()
        .chunks_exact(3)
        .map(|p| (p[0] + p[1] + p[2]) * third)
        .collect();
    Tensor::new(vec![img.height(), img.width(), 1], data).expect("shape from image")
}

/// HSV value channel (max over RGB), `[H, W, 1]`.
pub fn hsv_value_prior<T: Scalar>(img: &ImageRgb<T>) -> Tensor<T> {
    let data = img
        .tensor()
        .data()
        .chunks_exact(3)
        .map(|p| p[0].max(p[1]).max(p[2]))
        .collect();
    Tensor::new(vec![img.height(), img.width(), 1], data).expect("shape from image")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pixel(rgb: [f64; 3]) -> ImageRgb<f64> {
        ImageRgb::filled(1, 1, rgb)
    }

    #[test]
    fn mean_prior_examples() {
        assert!((rgb_mean_prior(&pixel([0.3, 0.6, 0.9])).data()[0] - 0.6).abs() < 1e-15);
        let black = ImageRgb::<f64>::filled(4, 5, [0.0; 3]);
        let m = rgb_mean_prior(&black);
        assert_eq!(m.shape(), &[4, 5, 1]);
        assert!(m.data().iter().all(|&v| v == 0.0));
        assert!((rgb_mean_prior(&pixel([1.0, 0.0, 0.0])).data()[0] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn value_prior_examples() {
        assert_eq!(hsv_value_prior(&pixel([0.2, 0.5, 0.8])).data()[0], 0.8);
        assert_eq!(hsv_value_prior(&pixel([0.4, 0.4, 0.4])).data()[0], 0.4);
        assert_eq!(hsv_value_prior(&pixel([1.0, 0.0, 1.0])).data()[0], 1.0);
    }

    #[test]
    fn rejects_out_of_range_and_clamps() {
        let t = Tensor::<f64>::new(vec![1, 1, 3], vec![0.5, 1.5, -0.1]).unwrap();
        assert!(ImageRgb::new(t.clone()).is_err());
        let img = ImageRgb::clamped(t).unwrap();
        assert_eq!(img.tensor().data(), &[0.5, 1.0, 0.0]);
        let nan = Tensor::<f64>::new(vec![1, 1, 3], vec![0.5, f64::NAN, 0.0]).unwrap();
        assert!(matches!(ImageRgb::clamped(nan), Err(Error::NonFinite { .. })));
        assert!(ImageRgb::new(Tensor::<f64>::zeros(vec![2, 2, 4])).is_err());
    }

    proptest! {
        #[test]
        fn priors_ordered_permutation_invariant_and_bounded(
            px in prop::collection::vec(0.0f64..=1.0, 3 * 6),
        ) {
            let img = ImageRgb::new(Tensor::new(vec![2, 3, 3], px.clone()).unwrap()).unwrap();
            let permuted: Vec<f64> = px.chunks(3).flat_map(|p| [p[2], p[0], p[1]]).collect();
            let perm = ImageRgb::new(Tensor::new(vec![2, 3, 3], permuted).unwrap()).unwrap();
            let (m, v) = (rgb_mean_prior(&img), hsv_value_prior(&img));
            let (mp, vp) = (rgb_mean_prior(&perm), hsv_value_prior(&perm));
            for i in 0..6 {
                prop_assert!(v.data()[i] >= m.data()[i] - 1e-15);
                prop_assert!((m.data()[i] - mp.data()[i]).abs() < 1e-15);
                prop_assert_eq!(v.data()[i], vp.data()[i]);
                prop_assert!((0.0..=1.0).contains(&m.data()[i]));
                prop_assert!((0.0..=1.0).contains(&v.data()[i]));
            }
        }
    }
}
