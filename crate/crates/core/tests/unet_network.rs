use proptest::prelude::*;
use tracernet_core::tensor::{Mode, Tensor};
use tracernet_core::unet::{read_checkpoint, write_checkpoint, UNet, UNetConfig};

fn config(in_channels: usize, base: usize, depth: usize, seed: u64) -> UNetConfig {
    UNetConfig { in_channels, out_channels: 2, base_features: base, depth, seed }
}

fn input(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut s = seed | 1;
    Tensor::from_fn(shape, |_| {
        s ^= s << 13;
        s ^= s >> 7;
        s ^= s << 17;
        (s % 1000) as f32 / 1000.0
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn output_keeps_spatial_extent(c in 1usize..5, depth in 1usize..3, b in 1usize..3, k in 1usize..3, seed in any::<u64>()) {
        let net = UNet::<f32>::new(config(c, 4, depth, seed)).unwrap();
        let side = 16 * k;
        let y = net.infer(&input(&[b, c, side, side], seed)).unwrap();
        prop_assert_eq!(y.shape(), &[b, 2, side, side]);
        prop_assert!(y.all_finite());
    }
}

#[test]
fn same_seed_builds_identical_networks() {
    let a = UNet::<f32>::new(config(2, 4, 2, 9)).unwrap();
    let b = UNet::<f32>::new(config(2, 4, 2, 9)).unwrap();
    let c = UNet::<f32>::new(config(2, 4, 2, 10)).unwrap();
    assert_eq!(a.store(), b.store());
    assert_ne!(a.store(), c.store());
}

#[test]
fn eval_inference_is_pure() {
    let mut net = UNet::<f32>::new(config(2, 4, 2, 1)).unwrap();
    let x = input(&[2, 2, 32, 32], 5);
    let before = net.store().clone();
    let y1 = net.infer(&x).unwrap();
    let y2 = net.infer(&x).unwrap();
    assert_eq!(y1, y2);
    let (y3, _) = net.forward(&x, Mode::Eval).unwrap();
    assert_eq!(y1, y3);
    assert_eq!(net.store(), &before);
}

#[test]
fn train_forward_updates_running_statistics_only() {
    let mut net = UNet::<f32>::new(config(2, 4, 1, 1)).unwrap();
    let before = net.store().clone();
    net.forward(&input(&[2, 2, 16, 16], 3), Mode::Train).unwrap();
    for (p, q) in net.store().params().iter().zip(before.params()) {
        if p.trainable {
            assert_eq!(p.value, q.value, "{}", p.name);
        }
    }
    assert_ne!(net.store(), &before);
}

#[test]
fn widths_double_per_level() {
    let cfg = config(1, 8, 3, 0);
    assert_eq!((0..=3).map(|l| cfg.width(l)).collect::<Vec<_>>(), vec![8, 16, 32, 64]);
}

#[test]
fn wrong_channels_or_extent_are_rejected() {
    let net = UNet::<f32>::new(config(3, 4, 2, 0)).unwrap();
    assert!(net.infer(&input(&[1, 2, 16, 16], 1)).is_err());
    assert!(net.infer(&input(&[1, 3, 18, 18], 1)).is_err());
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let mut net = UNet::<f32>::new(config(2, 4, 2, 4)).unwrap();
    net.forward(&input(&[2, 2, 16, 16], 8), Mode::Train).unwrap();
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, &net).unwrap();
    assert_eq!(&buf[..4], b"GLCK");
    let back: UNet<f32> = read_checkpoint(&mut buf.as_slice(), *net.config()).unwrap();
    for (p, q) in back.store().params().iter().zip(net.store().params()) {
        assert_eq!(p.name, q.name);
        assert!(p.value.data().iter().zip(q.value.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
    let x = input(&[1, 2, 16, 16], 2);
    assert_eq!(back.infer(&x).unwrap(), net.infer(&x).unwrap());
    let mut again = Vec::new();
    write_checkpoint(&mut again, &back).unwrap();
    assert_eq!(again, buf);
}

#[test]
fn checkpoint_with_other_config_is_rejected() {
    let net = UNet::<f32>::new(config(2, 4, 2, 4)).unwrap();
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, &net).unwrap();
    assert!(read_checkpoint::<f32, _>(&mut buf.as_slice(), config(2, 8, 2, 4)).is_err());
    assert!(read_checkpoint::<f32, _>(&mut &buf[..buf.len() - 3], *net.config()).is_err());
}
