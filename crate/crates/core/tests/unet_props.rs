use myoseg::tensor::Tensor;
use myoseg::trainer::loss_and_grads;
use myoseg::losses::LossConfig;
use myoseg::unet::{read_checkpoint, write_checkpoint, Model, UNetConfig, CHECKPOINT_MAGIC};
use myoseg::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config(levels: usize, base: usize) -> UNetConfig {
    UNetConfig {
        levels,
        base_channels: base,
        ..UNetConfig::default()
    }
}

fn random_input(seed: u64, shape: &[usize]) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn output_shape_follows_input_for_every_depth() {
    for levels in 2..=5 {
        let model = Model::<f32>::build(config(levels, 2), levels as u64).unwrap();
        for (batch, s) in [(2, 16), (1, 32)] {
            let out = model.forward(&random_input(1, &[batch, 1, s, s, s])).unwrap();
            assert_eq!(out.shape(), [batch, 5, s, s, s], "levels {levels}, {s}^3");
            assert!(out.data().iter().all(|v| v.is_finite()));
        }
    }
}

#[test]
fn extents_must_be_divisible() {
    let model = Model::<f32>::build(config(3, 2), 0).unwrap();
    let err = model.forward(&random_input(1, &[1, 1, 8, 8, 6])).unwrap_err();
    assert!(matches!(err, Error::Indivisible { divisor: 4, .. }), "{err}");
    let err = model.forward(&random_input(1, &[1, 2, 8, 8, 8])).unwrap_err();
    assert!(matches!(err, Error::Shape(_)), "{err}");
}

#[test]
fn parameter_count_matches_hand_count() {
    // Two levels, base 4, three classes, one input channel, two 3³ convs per block:
    //   enc0: 4·1·27 + 8, 4·4·27 + 8          = 556
    //   enc1: 8·4·27 + 16, 8·8·27 + 16        = 2624
    //   dec0 up: 8·4·8 + 4                    = 260
    //   dec0: 4·8·27 + 8, 4·4·27 + 8          = 1312
    //   head: 3·4 + 3                         = 15
    let cfg = UNetConfig {
        num_classes: 3,
        ..config(2, 4)
    };
    assert_eq!(cfg.parameter_count(), 4767);
    assert_eq!(Model::<f64>::build(cfg, 0).unwrap().parameter_count(), 4767);
}

#[test]
fn build_and_forward_are_deterministic() {
    let a = Model::<f32>::build(config(3, 4), 9).unwrap();
    let b = Model::<f32>::build(config(3, 4), 9).unwrap();
    let c = Model::<f32>::build(config(3, 4), 10).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    let x = random_input(3, &[1, 1, 16, 16, 16]);
    let (ya, yb) = (a.forward(&x).unwrap(), b.forward(&x).unwrap());
    let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&ya), bits(&yb));
}

#[test]
fn probabilities_sum_to_one() {
    let model = Model::<f64>::build(config(2, 2), 4).unwrap();
    let p = model.predict_proba(&random_input(2, &[1, 1, 4, 4, 4]).cast()).unwrap();
    let vox = 64;
    for v in 0..vox {
        let s: f64 = (0..5).map(|k| p.data()[k * vox + v]).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}

#[test]
fn every_parameter_receives_gradient() {
    // Three levels on 8³ leaves a 2³ bottleneck, enough for instance norm to pass signal.
    let model = Model::<f64>::build(config(3, 2), 1).unwrap();
    let x = random_input(5, &[2, 1, 8, 8, 8]).cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let labels: Vec<u8> = (0..2 * 512).map(|_| rng.gen_range(0..5)).collect();
    let r = loss_and_grads(&model, &x, &labels, &LossConfig::default()).unwrap();
    let layout = model.config().parameter_layout();
    assert_eq!(r.grads.len(), layout.len());
    for (g, spec) in r.grads.iter().zip(&layout) {
        assert!(g.iter().any(|&v| v != 0.0), "{} has an all-zero gradient", spec.name);
    }
}

#[test]
fn checkpoint_round_trip() {
    let model = Model::<f32>::build(config(3, 3), 2).unwrap();
    let bytes = model.to_checkpoint_bytes();
    assert_eq!(&bytes[..4], CHECKPOINT_MAGIC);
    assert_eq!(bytes.len(), 64 + 4 * model.parameter_count());
    assert_eq!(Model::<f32>::from_checkpoint_bytes(&bytes).unwrap(), model);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    write_checkpoint(&model, &path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    assert_eq!(read_checkpoint::<f32>(&path).unwrap(), model);
    // Widening to f64 is exact.
    assert_eq!(read_checkpoint::<f64>(&path).unwrap(), model.cast::<f64>());
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let bytes = Model::<f32>::build(config(2, 2), 0).unwrap().to_checkpoint_bytes();
    for cut in [0, 3, 40, 63, 64, bytes.len() - 1] {
        assert!(Model::<f32>::from_checkpoint_bytes(&bytes[..cut]).is_err(), "cut {cut}");
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(Model::<f32>::from_checkpoint_bytes(&bad).is_err());
    let mut extra = bytes;
    extra.push(0);
    assert!(Model::<f32>::from_checkpoint_bytes(&extra).is_err());
}
