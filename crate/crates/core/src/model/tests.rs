use super::*;

fn random_sequence(seed: u64, n: usize) -> SegmentSequence {
    let mut r = rng::stream(seed, "test-seq", 0);
    let data = (0..n * 48 * 15).map(|_| r.gen_range(-90.0f32..-10.0)).collect();
    SegmentSequence { data, n, n_mels: 48, frames: 15 }
}

fn expected_chain(n: usize) -> Vec<(&'static str, Vec<usize>)> {
    vec![
        ("input", vec![n, 1, 48, 15]),
        ("conv1", vec![n, 16, 48, 15]),
        ("pool1", vec![n, 16, 24, 8]),
        ("conv2", vec![n, 32, 24, 8]),
        ("pool2", vec![n, 32, 12, 4]),
        ("conv3", vec![n, 64, 12, 4]),
        ("conv4", vec![n, 64, 12, 4]),
        ("pool3", vec![n, 64, 6, 2]),
        ("conv5", vec![n, 64, 6, 2]),
        ("conv6", vec![n, 64, 6, 2]),
        ("fc", vec![n, 20]),
        ("score", vec![1]),
    ]
}

#[test]
fn shape_chain_matches_layer_table() {
    let net = Network::<f32>::initialized(FeatureConfig::default(), 1);
    for n in [1, 7, 85] {
        let audit = net.shape_audit(n).unwrap();
        let got: Vec<(&str, Vec<usize>)> = audit.iter().map(|r| (r.layer.as_str(), r.shape.clone())).collect();
        assert_eq!(got, expected_chain(n));
    }
}

#[test]
fn parameter_shapes_and_count() {
    let net = Network::<f32>::zeroed(FeatureConfig::default());
    assert_eq!(net.arch.flatten_dim(), 64 * 6 * 2);
    let convs = [(16, 1), (32, 16), (64, 32), (64, 64), (64, 64), (64, 64)];
    let conv: usize = convs.iter().map(|(o, i)| o * i * 9 + 2 * o).sum();
    let fc = 768 * 20 + 20;
    let lstm = 2 * (4 * 128 * 20 + 4 * 128 * 128 + 4 * 128);
    let head = 256 + 1;
    assert_eq!(net.param_count(), conv + fc + lstm + head);
    assert_eq!(net.params.get("cnn.conv3.weight").unwrap().shape(), [64, 32, 3, 3]);
    assert_eq!(net.params.get("lstm.bwd.w_hh").unwrap().shape(), [512, 128]);
    assert!(!net.params.get("cnn.bn1.running_var").unwrap().requires_grad());
}

#[test]
fn initialization_follows_the_documented_scheme() {
    let net = Network::<f32>::initialized(FeatureConfig::default(), 5);
    let bound = (6.0f32 / 9.0).sqrt();
    let w = net.params.get("cnn.conv1.weight").unwrap().data();
    assert!(w.iter().all(|v| v.abs() <= bound));
    assert!(w.iter().any(|v| v.abs() > 0.5 * bound));
    let b = net.params.get("lstm.fwd.bias").unwrap().data();
    assert!(b[..128].iter().all(|&v| v == 0.0));
    assert!(b[128..256].iter().all(|&v| v == 1.0));
    assert!(b[256..].iter().all(|&v| v == 0.0));
    let lim = 1.0 / 128f32.sqrt();
    assert!(net.params.get("lstm.bwd.w_hh").unwrap().data().iter().all(|v| v.abs() <= lim));
    assert_eq!(net.params.get("head.bias").unwrap().data(), [0.0]);
    assert_eq!(net, Network::<f32>::initialized(FeatureConfig::default(), 5));
    assert_ne!(net, Network::<f32>::initialized(FeatureConfig::default(), 6));
}

#[test]
fn zero_model_returns_head_bias() {
    let mut net = Network::<f32>::zeroed(FeatureConfig::default());
    assert_eq!(net.predict_segments(&random_sequence(1, 9)).unwrap(), 0.0);
    net.params.get_mut("head.bias").unwrap().data_mut()[0] = 3.25;
    assert_eq!(net.predict_segments(&random_sequence(2, 4)).unwrap(), 3.25);
}

#[test]
fn eval_is_repeatable_and_single_segment_is_finite() {
    let net = Network::<f32>::initialized(FeatureConfig::default(), 2);
    let seq = random_sequence(3, 12);
    let a = net.segment_features(&seq).unwrap();
    let b = net.segment_features(&seq).unwrap();
    assert_eq!(a.shape(), [12, 20]);
    assert_eq!(a.data(), b.data());
    assert!(net.predict_segments(&random_sequence(4, 1)).unwrap().is_finite());
}

#[test]
fn reversing_segments_changes_the_score() {
    let net = Network::<f32>::initialized(FeatureConfig::default(), 3);
    let seq = random_sequence(5, 10);
    let mut rev = seq.clone();
    let size = 48 * 15;
    for i in 0..10 {
        rev.data[i * size..(i + 1) * size].copy_from_slice(seq.segment(9 - i));
    }
    assert_ne!(net.predict_segments(&seq).unwrap(), net.predict_segments(&rev).unwrap());
}

#[test]
fn padding_does_not_change_a_sequence_score() {
    let net = Network::<f32>::initialized(FeatureConfig::default(), 4);
    let short = random_sequence(6, 3);
    let long = random_sequence(7, 8);
    let alone = net.predict_segments(&short).unwrap();
    let batch = PackedBatch::new(&[&short, &long]).unwrap();
    let both = net.predict_batch(&batch).unwrap();
    assert!((both[0] - alone).abs() < 1e-5, "{} {}", both[0], alone);
}

#[test]
fn wrong_input_shape_is_rejected() {
    let net = Network::<f32>::zeroed(FeatureConfig::default());
    let bad = SegmentSequence { data: vec![0.0; 2 * 40 * 15], n: 2, n_mels: 40, frames: 15 };
    assert!(matches!(net.predict_segments(&bad), Err(ModelError::InputShape { .. })));
}

#[test]
fn every_parameter_receives_gradient() {
    let mut net = Network::<f32>::initialized(FeatureConfig::default(), 7);
    let a = random_sequence(8, 6);
    let b = random_sequence(9, 4);
    let batch = PackedBatch::new(&[&a, &b]).unwrap();
    let mut r = rng::stream(1, "dropout", 0);
    let loss = net.loss_and_grads(&batch, &[3.0, 4.0], &mut r).unwrap();
    assert!(loss.is_finite());
    for (name, t) in net.params.iter() {
        if t.requires_grad() {
            assert!(t.grad().unwrap().iter().any(|&g| g != 0.0), "{name} has zero gradient");
        }
    }
    let rm = net.params.get("cnn.bn1.running_mean").unwrap().data();
    assert!(rm.iter().any(|&v| v != 0.0));
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let net = Network::<f32>::initialized(FeatureConfig::default(), 11);
    let mut meta = std::collections::BTreeMap::new();
    meta.insert("stage".to_string(), "pretrain".to_string());
    let mut adam = crate::autograd::Adam::new(crate::autograd::AdamConfig::default());
    let mut trained = net.clone();
    for t in trained.params.iter_mut() {
        if t.1.requires_grad() {
            let g = vec![0.5; t.1.len()];
            t.1.set_grad(g).unwrap();
        }
    }
    adam.step(&mut trained.params).unwrap();
    trained.params.zero_grads();
    let ckpt = Checkpoint::new(trained.clone(), 11, meta).with_optimizer(adam.clone());
    let bytes = encode_checkpoint(&ckpt);
    let back = decode_checkpoint(&bytes).unwrap();
    for ((n1, t1), (n2, t2)) in trained.params.iter().zip(back.network.params.iter()) {
        assert_eq!(n1, n2);
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(t1), bits(t2));
        assert_eq!(t1.requires_grad(), t2.requires_grad());
    }
    assert_eq!(back.optimizer.as_ref().unwrap(), &adam);
    assert_eq!(back.header.metadata["stage"], "pretrain");
    assert_eq!(encode_checkpoint(&back), bytes);

    let mut bad = bytes.clone();
    let mid = bytes.len() / 2;
    bad[mid] ^= 0x10;
    assert!(matches!(decode_checkpoint(&bad), Err(CheckpointError::DigestMismatch { .. })));
    assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 3]), Err(CheckpointError::Truncated(_))));
    let mut v2 = bytes.clone();
    v2[4] = 2;
    assert!(matches!(decode_checkpoint(&v2), Err(CheckpointError::VersionMismatch { found: 2 })));
    assert!(matches!(decode_checkpoint(b"RIFF\0\0\0\0\0\0\0\0"), Err(CheckpointError::BadMagic)));
}
