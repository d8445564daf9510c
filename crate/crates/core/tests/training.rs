use iretinex_core::model::{Model, ModelConfig};
use iretinex_core::rcm::BackboneConfig;
use iretinex_core::training::{bundled_textures, train, Dataset, DegradeConfig, TraceRow, TrainConfig};

fn moving_average(trace: &[TraceRow], window: usize) -> Vec<f64> {
    let losses: Vec<f64> = trace.iter().map(|r| r.loss).collect();
    losses.windows(window).map(|w| w.iter().sum::<f64>() / window as f64).collect()
}

/// One clean texture, desk architecture and batch, 500 iterations.
#[test]
fn single_image_overfit() {
    let seed = 11;
    let clean = bundled_textures::<f32>(64, 64, seed).remove(0);
    let data = Dataset::from_clean(vec![clean], &DegradeConfig::default(), seed).unwrap();
    let cfg = TrainConfig {
        total_iters: 500,
        seed,
        ..TrainConfig::default()
    };
    let mut model = Model::<f32>::new(ModelConfig::desk(), seed).unwrap();
    let trace = train(&mut model, &data, &cfg, |_| Ok(())).unwrap();
    assert_eq!(trace.len(), 500);

    let initial = trace[0].loss;
    let tail = &trace[trace.len() - 20..];
    let last = tail.iter().map(|r| r.loss).sum::<f64>() / tail.len() as f64;
    eprintln!("initial loss {initial:.5}, mean of last 20 {last:.5}");
    assert!(last < initial / 5.0, "final {last} vs initial {initial}");

    // window ending at iteration 200 onwards
    let ma = moving_average(&trace, 200);
    for pair in ma.windows(2) {
        assert!(pair[1] <= pair[0], "moving average rose: {} -> {}", pair[0], pair[1]);
    }
}

#[test]
fn ten_steps_are_bit_identical() {
    let cfg = ModelConfig {
        icrr_width: 4,
        backbone: BackboneConfig {
            channels: 4,
            depth: 1,
            ..ModelConfig::desk().backbone
        },
    };
    let run = || {
        let tex = bundled_textures::<f32>(16, 16, 3);
        let data = Dataset::from_clean(tex[..3].to_vec(), &DegradeConfig::default(), 3).unwrap();
        let tc = TrainConfig {
            total_iters: 10,
            batch: 2,
            patch: 8,
            seed: 3,
            ..TrainConfig::default()
        };
        let mut model = Model::<f32>::new(cfg, 3).unwrap();
        let trace = train(&mut model, &data, &tc, |_| Ok(())).unwrap();
        (model, trace)
    };
    let (m1, t1) = run();
    let (m2, t2) = run();
    assert_eq!(t1.len(), 10);
    for (a, b) in t1.iter().zip(&t2) {
        assert_eq!(a.loss.to_bits(), b.loss.to_bits());
    }
    assert_eq!(m1, m2);
}

#[test]
fn nan_loss_aborts_with_iteration() {
    let cfg = ModelConfig {
        icrr_width: 4,
        backbone: BackboneConfig {
            channels: 4,
            depth: 1,
            ..ModelConfig::desk().backbone
        },
    };
    let tex = bundled_textures::<f32>(8, 8, 0);
    let data = Dataset::from_clean(tex[..1].to_vec(), &DegradeConfig::default(), 0).unwrap();
    let tc = TrainConfig {
        total_iters: 5,
        batch: 1,
        patch: 8,
        lr_max: 1e30,
        lr_min: 1e29,
        ..TrainConfig::default()
    };
    let mut model = Model::<f32>::new(cfg, 0).unwrap();
    let mut seen = Vec::new();
    let result = train(&mut model, &data, &tc, |p| {
        seen.push(p.row.iter);
        Ok(())
    });
    match result {
        Err(iretinex_core::Error::Diverged { iter, .. }) => assert_eq!(iter, seen.len() + 1),
        Err(iretinex_core::Error::NonFinite { .. }) => {}
        other => panic!("expected divergence, got {other:?}"),
    }
}
