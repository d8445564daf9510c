use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use iretinex_core::colorspace::ImageRgb;
use iretinex_core::losses::synthesize;
use iretinex_core::metrics::{cosine_similarity, psnr, rgb_histogram, ssim};
use iretinex_core::training::{cosine_lr, Dihedral, DegradeConfig, TrainConfig};
use iretinex_core::{Graph, Tensor};

fn image(h: usize, w: usize) -> impl Strategy<Value = ImageRgb<f64>> {
    prop::collection::vec(0.0f64..=1.0, h * w * 3)
        .prop_map(move |d| ImageRgb::new(Tensor::new(vec![h, w, 3], d).unwrap()).unwrap())
}

fn sized_image() -> impl Strategy<Value = ImageRgb<f64>> {
    (1usize..8, 1usize..8).prop_flat_map(|(h, w)| image(h, w))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn softmax_slices_sum_to_one(
        data in prop::collection::vec(-30.0f64..30.0, 24),
        axis in 0usize..3,
    ) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2, 3, 4], data).unwrap());
        let y = g.softmax(x, axis).unwrap();
        let out = g.value(y);
        let shape = [2usize, 3, 4];
        let stride: usize = shape[axis + 1..].iter().product();
        for base in 0..24 {
            if (base / stride) % shape[axis] != 0 {
                continue;
            }
            let s: f64 = (0..shape[axis]).map(|i| out.data()[base + i * stride]).sum();
            prop_assert!((s - 1.0).abs() < 1e-6, "slice sum {s}");
        }
    }

    #[test]
    fn unit_illumination_reproduces_reflectance(r in sized_image()) {
        let (h, w) = (r.height(), r.width());
        let mut g = Graph::new();
        let l = g.constant(Tensor::ones(vec![h, w, 1]));
        let rv = g.constant(r.tensor().clone());
        let i = synthesize(&mut g, l, rv).unwrap();
        prop_assert_eq!(g.value(i), r.tensor());
    }

    #[test]
    fn psnr_is_symmetric_and_ssim_bounded(a in image(12, 12), b in image(12, 12)) {
        let ab = psnr(&a, &b).unwrap();
        let ba = psnr(&b, &a).unwrap();
        prop_assert!(ab == ba);
        prop_assert!(ab >= 0.0);
        let s = ssim(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0 + 1e-12).contains(&s));
        prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn cosine_stays_in_unit_interval(
        x in prop::collection::vec(-1e3f64..1e3, 30),
        y in prop::collection::vec(-1e3f64..1e3, 30),
    ) {
        let c = cosine_similarity(
            &Tensor::new(vec![30], x).unwrap(),
            &Tensor::new(vec![30], y).unwrap(),
        ).unwrap();
        prop_assert!((-1.0..=1.0).contains(&c.value));
    }

    #[test]
    fn histogram_counts_every_pixel(img in sized_image()) {
        let hist = rgb_histogram(&img);
        let n = (img.height() * img.width()) as u64;
        for channel in &hist {
            prop_assert_eq!(channel.iter().sum::<u64>(), n);
        }
    }

    #[test]
    fn dihedral_transforms_preserve_pixel_mass(
        img in image(5, 5),
        quarter_turns in 0u8..4,
        flip: bool,
    ) {
        let out = Dihedral { quarter_turns, flip }.apply(&img).unwrap();
        prop_assert_eq!(rgb_histogram(&out), rgb_histogram(&img));
    }

    #[test]
    fn degradation_stays_in_range(img in sized_image(), seed: u64, poisson: bool) {
        let cfg = DegradeConfig { poisson, ..DegradeConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let low = cfg.sample(&mut rng).unwrap().apply(&img, &mut rng).unwrap();
        prop_assert!(low.tensor().data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn cosine_schedule_is_nonincreasing(total in 1usize..5000, t in 0usize..5000) {
        let cfg = TrainConfig { total_iters: total, ..TrainConfig::default() };
        let (a, b) = (cosine_lr(t, &cfg), cosine_lr(t + 1, &cfg));
        prop_assert!(b <= a);
        prop_assert!((cfg.lr_min..=cfg.lr_max).contains(&a));
    }
}
