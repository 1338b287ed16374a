use super::*;
use crate::tensor::Tensor;
use rand::Rng;

/// Central-difference gradient of the loss wrt the input, step `h`.
/// Independent oracle for input_gradient.
fn fd_input_gradient(model: &LayerGraph, x: &Tensor, label: usize, h: f64) -> Tensor {
    let opts = ForwardOpts::default();
    let loss_of = |x: &Tensor| -> f64 {
        let (logits, _) = model.forward(x, &opts).unwrap();
        model.loss_and_logit_grad(&logits, label).unwrap().0
    };
    let mut g = vec![0.0; x.len()];
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[i] += h;
        let mut xm = x.clone();
        xm.data_mut()[i] -= h;
        g[i] = (loss_of(&xp) - loss_of(&xm)) / (2.0 * h);
    }
    Tensor::from_vec(x.shape().to_vec(), g).unwrap()
}

fn relative_l2_error(a: &Tensor, b: &Tensor) -> f64 {
    let num: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let den: f64 = b.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    num / den.max(1e-12)
}

/// Smallest distance of any relu input to 0 and any maxpool window's top-2
/// gap. Finite differences are only trustworthy away from those kinks.
fn kink_margin(model: &LayerGraph, tape: &GradientTape, x: &Tensor) -> f64 {
    let mut margin = f64::INFINITY;
    for (i, layer) in model.layers.iter().enumerate() {
        let input = if i == 0 { x } else { tape.post_hook(i - 1) };
        match layer.kind {
            LayerKind::Relu => {
                for &v in input.data() {
                    margin = margin.min(v.abs());
                }
            }
            LayerKind::MaxPool => {
                let [c, h, w] = *input.shape() else { continue };
                let k = layer.window;
                for ci in 0..c {
                    for oy in 0..h / k {
                        for ox in 0..w / k {
                            let mut vals: Vec<f64> = Vec::with_capacity(k * k);
                            for dy in 0..k {
                                for dx in 0..k {
                                    vals.push(
                                        input.data()[(ci * h + oy * k + dy) * w + ox * k + dx],
                                    );
                                }
                            }
                            vals.sort_by(|a, b| b.partial_cmp(a).unwrap());
                            margin = margin.min(vals[0] - vals[1]);
                        }
                    }
                }
            }
            _ => {}
        }
    }
    margin
}

fn random_tensor(shape: Vec<usize>, rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

fn randomize_weights(model: &mut LayerGraph, seed: u64) {
    model.init_weights(seed);
    // add biases so layers are not centered at the relu kink
    let mut rng = crate::rng::substream(seed, &["bias"]);
    for layer in &mut model.layers {
        if let Some(b) = &mut layer.bias {
            for v in b.data_mut() {
                *v = rng.gen_range(-0.1..0.1);
            }
        }
    }
}

#[test]
fn identity_fc_forward() {
    let mut model = LayerGraph::build(
        vec![2],
        &[LayerSpec::Fc { out_features: 2 }],
        LossKind::SoftmaxXent,
    )
    .unwrap();
    model.layers[0].weights =
        Some(Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let x = Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap();
    let (y, _) = model.forward(&x, &ForwardOpts::default()).unwrap();
    assert_eq!(y.data(), &[1.0, 2.0]);
}

#[test]
fn forward_without_hooks_equals_empty_hookset() {
    let mut model = LayerGraph::build(
        vec![4],
        &[
            LayerSpec::Fc { out_features: 5 },
            LayerSpec::Relu,
            LayerSpec::Fc { out_features: 3 },
        ],
        LossKind::SoftmaxXent,
    )
    .unwrap();
    randomize_weights(&mut model, 1);
    let x = Tensor::from_vec(vec![4], vec![0.1, -0.4, 0.9, 0.3]).unwrap();
    let empty = HookSet::new(vec![]).unwrap();
    let a = model.infer(&x, &ForwardOpts::default()).unwrap();
    let b = model
        .infer(
            &x,
            &ForwardOpts {
                hooks: Some(&empty),
                ..Default::default()
            },
        )
        .unwrap();
    assert_eq!(a, b);
}

#[test]
fn forward_matches_naive_conv_reference() {
    // independent straightforward per-layer evaluation
    let mut model = LayerGraph::build(
        vec![2, 6, 6],
        &[
            LayerSpec::Conv2d { out_channels: 3, kernel: 3 },
            LayerSpec::Relu,
            LayerSpec::AvgPool { window: 2 },
            LayerSpec::Flatten,
            LayerSpec::Fc { out_features: 4 },
        ],
        LossKind::SoftmaxXent,
    )
    .unwrap();
    randomize_weights(&mut model, 7);
    let mut rng = crate::rng::substream(99, &["x"]);
    let x = random_tensor(vec![2, 6, 6], &mut rng);

    // naive reference
    let w = model.layers[0].weights.clone().unwrap();
    let b = model.layers[0].bias.clone().unwrap();
    let mut conv = vec![0.0; 3 * 4 * 4];
    for oc in 0..3 {
        for oy in 0..4 {
            for ox in 0..4 {
                let mut s = b.data()[oc];
                for ic in 0..2 {
                    for dy in 0..3 {
                        for dx in 0..3 {
                            s += w.data()[((oc * 2 + ic) * 3 + dy) * 3 + dx]
                                * x.data()[(ic * 6 + oy + dy) * 6 + ox + dx];
                        }
                    }
                }
                conv[(oc * 4 + oy) * 4 + ox] = s;
            }
        }
    }
    let relu: Vec<f64> = conv.iter().map(|v| v.max(0.0)).collect();
    let mut pooled = vec![0.0; 3 * 2 * 2];
    for c in 0..3 {
        for oy in 0..2 {
            for ox in 0..2 {
                let mut s = 0.0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        s += relu[(c * 4 + oy * 2 + dy) * 4 + ox * 2 + dx];
                    }
                }
                pooled[(c * 2 + oy) * 2 + ox] = s / 4.0;
            }
        }
    }
    let wf = model.layers[4].weights.clone().unwrap();
    let bf = model.layers[4].bias.clone().unwrap();
    let mut expected = vec![0.0; 4];
    for o in 0..4 {
        let mut s = bf.data()[o];
        for (i, &p) in pooled.iter().enumerate() {
            s += wf.data()[o * 12 + i] * p;
        }
        expected[o] = s;
    }

    let (logits, _) = model.forward(&x, &ForwardOpts::default()).unwrap();
    for (a, e) in logits.data().iter().zip(&expected) {
        assert!((a - e).abs() < 1e-12, "got {a}, expected {e}");
    }
}

#[test]
fn degenerate_single_class_loss_has_zero_gradient() {
    let mut model = LayerGraph::build(
        vec![3],
        &[LayerSpec::Fc { out_features: 1 }],
        LossKind::SoftmaxXent,
    )
    .unwrap();
    randomize_weights(&mut model, 3);
    let x = Tensor::from_vec(vec![3], vec![0.2, -0.7, 0.5]).unwrap();
    let (_, tape) = model.forward(&x, &ForwardOpts::default()).unwrap();
    let g = model.input_gradient(&x, 0, tape).unwrap();
    for &v in g.data() {
        assert_eq!(v, 0.0);
    }
}

#[test]
fn fc_softmax_gradient_matches_closed_form() {
    // single fc + softmax-xent on 2 classes: dL/dx = W^T (p - onehot)
    let mut model = LayerGraph::build(
        vec![3],
        &[LayerSpec::Fc { out_features: 2 }],
        LossKind::SoftmaxXent,
    )
    .unwrap();
    let w = Tensor::from_vec(vec![2, 3], vec![0.3, -0.2, 0.5, -0.1, 0.4, 0.2]).unwrap();
    model.layers[0].weights = Some(w.clone());
    let x = Tensor::from_vec(vec![3], vec![0.7, -0.3, 0.1]).unwrap();
    let (logits, tape) = model.forward(&x, &ForwardOpts::default()).unwrap();
    let z = logits.data();
    let m = z[0].max(z[1]);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s = e[0] + e[1];
    let p = [e[0] / s, e[1] / s];
    let label = 1usize;
    let delta = [p[0], p[1] - 1.0];
    let mut expected = [0.0; 3];
    for i in 0..3 {
        expected[i] = delta[0] * w.data()[i] + delta[1] * w.data()[3 + i];
    }
    let g = model.input_gradient(&x, label, tape).unwrap();
    for (a, e) in g.data().iter().zip(&expected) {
        assert!((a - e).abs() < 1e-12);
    }
}

#[test]
fn input_gradient_matches_finite_differences_per_layer_kind() {
    // one model exercising every layer kind
    let mut model = LayerGraph::build(
        vec![2, 8, 8],
        &[
            LayerSpec::Conv2d { out_channels: 4, kernel: 3 },
            LayerSpec::Relu,
            LayerSpec::MaxPool { window: 2 },
            LayerSpec::Conv2d { out_channels: 6, kernel: 2 },
            LayerSpec::Relu,
            LayerSpec::AvgPool { window: 2 },
            LayerSpec::Flatten,
            LayerSpec::Fc { out_features: 8 },
            LayerSpec::Relu,
            LayerSpec::Fc { out_features: 3 },
        ],
        LossKind::SoftmaxXent,
    )
    .unwrap();
    randomize_weights(&mut model, 11);
    let mut rng = crate::rng::substream(17, &["fd"]);
    let mut checked = 0;
    let mut attempts = 0;
    while checked < 3 && attempts < 200 {
        attempts += 1;
        let x = random_tensor(vec![2, 8, 8], &mut rng);
        let label = rng.gen_range(0..3);
        let (_, tape) = model.forward(&x, &ForwardOpts::default()).unwrap();
        if kink_margin(&model, &tape, &x) < 5e-3 {
            continue; // finite differences are unreliable near relu/max kinks
        }
        let g = model.input_gradient(&x, label, tape).unwrap();
        let g_fd = fd_input_gradient(&model, &x, label, 1e-3);
        let err = relative_l2_error(&g, &g_fd);
        assert!(err < 1e-4, "relative error {err}");
        checked += 1;
    }
    assert_eq!(checked, 3, "could not find enough kink-free instances");
}

#[test]
fn forward_is_pure() {
    let mut model = LayerGraph::build(
        vec![1, 12, 12],
        &[
            LayerSpec::Conv2d { out_channels: 4, kernel: 3 },
            LayerSpec::Relu,
            LayerSpec::MaxPool { window: 2 },
            LayerSpec::Flatten,
            LayerSpec::Fc { out_features: 4 },
        ],
        LossKind::SoftmaxXent,
    )
    .unwrap();
    randomize_weights(&mut model, 5);
    let mut rng = crate::rng::substream(5, &["x"]);
    let x = random_tensor(vec![1, 12, 12], &mut rng);
    let a = model.infer(&x, &ForwardOpts::default()).unwrap();
    let b = model.infer(&x, &ForwardOpts::default()).unwrap();
    assert_eq!(a, b);
}

struct AddOneHook {
    layer: usize,
}

impl ActivationHook for AddOneHook {
    fn layer_id(&self) -> usize {
        self.layer
    }
    fn apply(
        &self,
        activation: &Tensor,
        _act_quant: Option<&QuantParams>,
        _sample: u64,
    ) -> Result<Tensor> {
        Ok(activation.map(|v| v + 1.0))
    }
}

#[test]
fn hook_leaves_earlier_layers_untouched() {
    let mut model = LayerGraph::build(
        vec![6],
        &[
            LayerSpec::Fc { out_features: 6 },
            LayerSpec::Relu,
            LayerSpec::Fc { out_features: 4 },
            LayerSpec::Relu,
            LayerSpec::Fc { out_features: 3 },
        ],
        LossKind::SoftmaxXent,
    )
    .unwrap();
    randomize_weights(&mut model, 21);
    let mut rng = crate::rng::substream(21, &["x"]);
    let x = random_tensor(vec![6], &mut rng);
    let hooks = HookSet::new(vec![Arc::new(AddOneHook { layer: 2 })]).unwrap();
    let (_, clean) = model.forward(&x, &ForwardOpts::default()).unwrap();
    let (_, noisy) = model
        .forward(
            &x,
            &ForwardOpts {
                hooks: Some(&hooks),
                ..Default::default()
            },
        )
        .unwrap();
    for i in 0..2 {
        assert_eq!(clean.pre_hook(i), noisy.pre_hook(i), "layer {i} changed");
    }
    assert_ne!(clean.post_hook(2), noisy.post_hook(2));
}

#[test]
fn hooked_tape_is_rejected_for_gradients() {
    let mut model = LayerGraph::build(
        vec![4],
        &[LayerSpec::Fc { out_features: 2 }],
        LossKind::SoftmaxXent,
    )
    .unwrap();
    randomize_weights(&mut model, 2);
    let x = Tensor::from_vec(vec![4], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
    let hooks = HookSet::new(vec![Arc::new(AddOneHook { layer: 0 })]).unwrap();
    let (_, tape) = model
        .forward(
            &x,
            &ForwardOpts {
                hooks: Some(&hooks),
                ..Default::default()
            },
        )
        .unwrap();
    let err = model.input_gradient(&x, 0, tape).unwrap_err();
    assert!(matches!(err, Error::Usage(_)));
}

#[test]
fn stale_tape_is_rejected() {
    let mut model = LayerGraph::build(
        vec![4],
        &[LayerSpec::Fc { out_features: 2 }],
        LossKind::SoftmaxXent,
    )
    .unwrap();
    randomize_weights(&mut model, 2);
    let x = Tensor::from_vec(vec![4], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
    let y = Tensor::from_vec(vec![4], vec![0.5, 0.2, 0.3, 0.4]).unwrap();
    let (_, tape) = model.forward(&x, &ForwardOpts::default()).unwrap();
    let err = model.input_gradient(&y, 0, tape).unwrap_err();
    assert!(matches!(err, Error::Usage(_)));
}

#[test]
fn shape_mismatch_is_config_error() {
    let model = LayerGraph::build(
        vec![4],
        &[LayerSpec::Fc { out_features: 2 }],
        LossKind::SoftmaxXent,
    )
    .unwrap();
    let x = Tensor::zeros(vec![5]);
    assert!(matches!(
        model.infer(&x, &ForwardOpts::default()),
        Err(Error::Config(_))
    ));
}

#[test]
fn hook_on_flatten_is_config_error() {
    let mut model = LayerGraph::build(
        vec![1, 4, 4],
        &[
            LayerSpec::Conv2d { out_channels: 2, kernel: 3 },
            LayerSpec::Flatten,
            LayerSpec::Fc { out_features: 2 },
        ],
        LossKind::SoftmaxXent,
    )
    .unwrap();
    randomize_weights(&mut model, 2);
    let x = Tensor::zeros(vec![1, 4, 4]);
    let hooks = HookSet::new(vec![Arc::new(AddOneHook { layer: 1 })]).unwrap();
    let out = model.infer(
        &x,
        &ForwardOpts {
            hooks: Some(&hooks),
            ..Default::default()
        },
    );
    assert!(matches!(out, Err(Error::Config(_))));

    let hooks = HookSet::new(vec![Arc::new(AddOneHook { layer: 9 })]).unwrap();
    let out = model.infer(
        &x,
        &ForwardOpts {
            hooks: Some(&hooks),
            ..Default::default()
        },
    );
    assert!(matches!(out, Err(Error::Config(_))));
}

#[test]
fn desk_cnn_builds_with_expected_shapes() {
    let model = LayerGraph::desk_cnn(vec![1, 28, 28], 10).unwrap();
    assert_eq!(model.num_classes(), 10);
    assert_eq!(model.output_shape(0), [16, 26, 26]);
    assert_eq!(model.output_shape(2), [16, 13, 13]);
    assert_eq!(model.output_shape(3), [32, 11, 11]);
    assert_eq!(model.output_shape(5), [32, 5, 5]);
    assert_eq!(model.output_shape(6), [800]);
    assert_eq!(model.output_shape(9), [10]);
}
