use biasprobe::tinynn::{grad_check, GradCheckOptions, LayerSpec, ModelConfig, ModelFamily, Profile};

fn single_conv() -> ModelConfig {
    ModelConfig {
        name: "single-conv".into(),
        layers: vec![
            LayerSpec::Conv { kernel: 3, stride: 1, out_channels: 4 },
            LayerSpec::GlobalAvgPool,
            LayerSpec::FullyConnected { out_features: 3 },
        ],
        num_classes: 3,
        input_size: 6,
    }
}

#[test]
fn single_conv_layer_gradients_are_tight() {
    let opts = GradCheckOptions { input_size: 6, samples_per_tensor: None, tolerance: 1e-6, ..Default::default() };
    let report = grad_check(&single_conv(), &opts).unwrap();
    assert!(report.passed, "{report:#?}");
}

#[test]
fn scaled_resnet_gradients_at_16px() {
    let cfg = ModelFamily::ResNet.build(4, Profile::Desk).unwrap();
    let report = grad_check(&cfg, &GradCheckOptions::default()).unwrap();
    assert!(report.passed, "{report:#?}");
    // Every parameter tensor plus the input was probed.
    let net = biasprobe::tinynn::Network::<f64>::new(&cfg, 0).unwrap();
    let trainable = net.store().params.iter().filter(|p| p.trainable).count();
    assert_eq!(report.tensors.len(), trainable + 1);
}

#[test]
fn scaled_densenet_gradients_at_16px() {
    let cfg = ModelFamily::DenseNet.build(4, Profile::Desk).unwrap();
    let report = grad_check(&cfg, &GradCheckOptions::default()).unwrap();
    assert!(report.passed, "{report:#?}");
}

#[test]
fn a_wrong_backward_pass_is_caught() {
    let opts = GradCheckOptions { input_size: 6, flip_analytic_sign: true, ..Default::default() };
    let report = grad_check(&single_conv(), &opts).unwrap();
    assert!(!report.passed);
    assert!(report.max_rel_error > 1.0);
}

#[test]
fn kink_signature_tracks_activation_patterns() {
    use biasprobe::tinynn::{Mode, Network, Tensor4};
    let cfg = single_conv();
    let net = Network::<f64>::new(&cfg, 3).unwrap();
    let data: Vec<f64> = (0..2 * 3 * 36).map(|i| ((i * 37 % 101) as f64 / 50.0) - 1.0).collect();
    let x = Tensor4::from_vec(2, 3, 6, 6, data.clone()).unwrap();
    let signature = |x: &Tensor4<f64>| net.forward(x, Mode::Train).unwrap().1.kink_signature();
    assert_eq!(signature(&x), signature(&x.clone()));
    let flipped = Tensor4::from_vec(2, 3, 6, 6, data.iter().map(|v| -v).collect()).unwrap();
    assert_ne!(signature(&x), signature(&flipped));
}
