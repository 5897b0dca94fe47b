use angiophase_tensor::gradcheck::{analytic_gradients, compare_gradients, numerical_gradients, sampled_indices};
use angiophase_tensor::{
    adam_step, forward, grad_check, grad_check_sampled, grad_check_with, AdamConfig, AdamState, Graph, LayerSpec,
    Loss, Mode, Padding, ParamStore, Sequential, Tensor,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-3;

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn init(net: &Sequential, seed: u64) -> ParamStore {
    let mut p = ParamStore::new();
    net.init_params(&mut p, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    p
}

#[test]
fn dense_sigmoid_bce_toy_net_passes() {
    let net = Sequential::new()
        .push("fc", LayerSpec::Dense { inputs: 5, outputs: 3 })
        .push("sig", LayerSpec::Sigmoid);
    let params = init(&net, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random_tensor(&[4, 5], &mut rng);
    let y = Tensor::from_fn(&[4, 3], |_| rng.gen_range(0.0..1.0));
    let report = grad_check(&net, &params, &x, &Loss::Bce(y), H, TOL).unwrap();
    assert!(report.pass, "{report:?}");
    assert_eq!(report.checked, 5 * 3 + 3);
}

#[test]
fn sign_flipped_gradient_fails() {
    let net = Sequential::new()
        .push("fc", LayerSpec::Dense { inputs: 5, outputs: 3 })
        .push("sig", LayerSpec::Sigmoid);
    let params = init(&net, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random_tensor(&[4, 5], &mut rng);
    let y = Tensor::from_fn(&[4, 3], |_| rng.gen_range(0.0..1.0));
    let loss = Loss::Bce(y);
    let build = |g: &mut Graph, p: &ParamStore| {
        let xi = g.constant(x.clone())?;
        let out = net.apply(g, p, xi)?;
        loss.apply(g, out)
    };
    let mut analytic = analytic_gradients(&params, &build).unwrap();
    for t in analytic.values_mut() {
        t.scale(-1.0);
    }
    let numeric = numerical_gradients(&params, &build, H).unwrap();
    let report = compare_gradients(&analytic, &numeric, TOL);
    assert!(!report.pass);
    assert!(report.max_rel_err > 1.0);
}

#[test]
fn sampled_check_covers_small_tensors_and_strides_large_ones() {
    assert_eq!(sampled_indices(4, 10), vec![0, 1, 2, 3]);
    assert_eq!(sampled_indices(10, 4), vec![0, 2, 5, 7]);
    let net = Sequential::new()
        .push("fc", LayerSpec::Dense { inputs: 12, outputs: 5 })
        .push("sig", LayerSpec::Sigmoid);
    let params = init(&net, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random_tensor(&[3, 12], &mut rng);
    let y = Tensor::from_fn(&[3, 5], |_| rng.gen_range(0.0..1.0));
    let loss = Loss::Bce(y);
    let build = |g: &mut Graph, p: &ParamStore| {
        let xi = g.constant(x.clone())?;
        let out = net.apply(g, p, xi)?;
        loss.apply(g, out)
    };
    let full = grad_check_with(&params, build, H, TOL).unwrap();
    let sampled = grad_check_sampled(&params, build, H, TOL, 20).unwrap();
    assert!(full.pass && sampled.pass);
    assert_eq!(sampled.checked, 20 + 5);
    assert!(sampled.max_rel_err <= full.max_rel_err);
}

#[test]
fn random_three_layer_conv_net_passes() {
    let net = Sequential::new()
        .push("c1", LayerSpec::conv3x3(2, 3))
        .push("r1", LayerSpec::Relu)
        .push("p1", LayerSpec::MaxPool2d { kernel: 2, stride: 2 })
        .push("flat", LayerSpec::Flatten)
        .push("fc1", LayerSpec::Dense { inputs: 3 * 3 * 3, outputs: 6 })
        .push("r2", LayerSpec::Relu)
        .push("drop", LayerSpec::Dropout { rate: 0.3 })
        .push("fc2", LayerSpec::Dense { inputs: 6, outputs: 2 })
        .push("sig", LayerSpec::Sigmoid);
    for seed in 0..3 {
        let params = init(&net, 10 + seed);
        let mut rng = ChaCha8Rng::seed_from_u64(20 + seed);
        let x = random_tensor(&[2, 2, 6, 6], &mut rng);
        let y = Tensor::from_fn(&[2, 2], |_| rng.gen_range(0.0..1.0));
        let report = grad_check(&net, &params, &x, &Loss::Bce(y), H, TOL).unwrap();
        assert!(report.pass, "seed {seed}: {report:?}");
    }
}

#[test]
fn temporal_and_upsampling_ops_pass() {
    let mut params = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    params.insert("t.weight", random_tensor(&[4, 3], &mut rng)).unwrap();
    params.insert("t.bias", random_tensor(&[4], &mut rng)).unwrap();
    params.insert("c.weight", random_tensor(&[2, 2, 3, 3], &mut rng)).unwrap();
    params.insert("c.bias", random_tensor(&[2], &mut rng)).unwrap();
    let feats = random_tensor(&[7, 4], &mut rng);
    let img = random_tensor(&[1, 1, 4, 4], &mut rng);
    let weights_a = random_tensor(&[3, 3, 4], &mut rng);
    let weights_b = random_tensor(&[1, 2, 4, 4], &mut rng);
    let report = grad_check_with(
        &params,
        |g, p| {
            let f = g.constant(feats.clone())?;
            let win = g.frame_windows(f, 5)?;
            let w = g.param(p, "t.weight")?;
            let b = g.param(p, "t.bias")?;
            let t = g.depthwise_conv1d(win, w, b)?;
            let wa = g.constant(weights_a.clone())?;
            let la = g.weighted_sum(t, wa)?;

            let x = g.constant(img.clone())?;
            let pooled = g.max_pool2d(x, 2, 2)?;
            let up = g.upsample2x(pooled)?;
            let cat = g.concat_channels(up, x)?;
            let w = g.param(p, "c.weight")?;
            let b = g.param(p, "c.bias")?;
            let c = g.conv2d(cat, w, b, 1, 1)?;
            let wb = g.constant(weights_b.clone())?;
            let lb = g.weighted_sum(c, wb)?;
            let ia = g_scalar_image(g, la)?;
            let ib = g_scalar_image(g, lb)?;
            let both = g.concat_channels(ia, ib)?;
            let ones = g.constant(Tensor::full(&[1, 2, 1, 1], 1.0))?;
            g.weighted_sum(both, ones)
        },
        H,
        TOL,
    )
    .unwrap();
    assert!(report.pass, "{report:?}");
}

fn g_scalar_image(
    g: &mut Graph,
    s: angiophase_tensor::NodeId,
) -> angiophase_tensor::Result<angiophase_tensor::NodeId> {
    g.reshape(s, &[1, 1, 1, 1])
}

#[test]
fn input_gradient_matches_finite_differences() {
    let net = Sequential::new()
        .push(
            "c",
            LayerSpec::Conv2d {
                in_ch: 1,
                out_ch: 2,
                kernel: 3,
                stride: 2,
                padding: Padding::Same,
            },
        )
        .push("sig", LayerSpec::Sigmoid);
    let params = init(&net, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random_tensor(&[1, 1, 5, 5], &mut rng);
    let w = random_tensor(&net.output_shape(&[1, 1, 5, 5]).unwrap(), &mut rng);
    let mut work = params.clone();
    let f = forward(&net, &params, &x, Mode::Train, 0).unwrap();
    let dx = f.backward(&w, &mut work).unwrap();
    for i in 0..x.len() {
        let eval = |delta: f64| {
            let mut xp = x.clone();
            xp.data_mut()[i] += delta;
            let out = forward(&net, &params, &xp, Mode::Infer, 0).unwrap();
            out.output()
                .data()
                .iter()
                .zip(w.data())
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let numeric = (eval(H) - eval(-H)) / (2.0 * H);
        assert!((numeric - dx.data()[i]).abs() < 1e-7, "entry {i}");
    }
}

/// Direct-loop convolution used as an oracle for the im2col path.
fn naive_conv(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, k) = (w.shape()[0], w.shape()[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut y = Tensor::zeros(&[n, o, oh, ow]);
    for s in 0..n {
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.data()[oc];
                    for ic in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += w.data()[((oc * c + ic) * k + ky) * k + kx]
                                        * x.data()[((s * c + ic) * h + iy as usize) * wd
                                            + ix as usize];
                                }
                            }
                        }
                    }
                    y.data_mut()[((s * o + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    y
}

#[test]
fn conv_forward_matches_direct_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for &(n, c, h, w, o, k, stride, pad) in &[
        (2, 3, 7, 5, 4, 3, 1, 1),
        (1, 1, 8, 8, 2, 3, 2, 1),
        (3, 2, 6, 6, 3, 1, 1, 0),
        (1, 2, 5, 7, 2, 5, 1, 2),
    ] {
        let x = random_tensor(&[n, c, h, w], &mut rng);
        let wt = random_tensor(&[o, c, k, k], &mut rng);
        let b = random_tensor(&[o], &mut rng);
        let mut g = Graph::new(Mode::Infer, 0);
        let xi = g.constant(x.clone()).unwrap();
        let wi = g.constant(wt.clone()).unwrap();
        let bi = g.constant(b.clone()).unwrap();
        let y = g.conv2d(xi, wi, bi, stride, pad).unwrap();
        let expect = naive_conv(&x, &wt, &b, stride, pad);
        assert_eq!(g.value(y).shape(), expect.shape());
        for (a, e) in g.value(y).data().iter().zip(expect.data()) {
            assert!((a - e).abs() < 1e-12);
        }
    }
}

#[test]
fn dropout_mask_is_reproducible_per_seed() {
    let net = Sequential::new().push("d", LayerSpec::Dropout { rate: 0.5 });
    let x = Tensor::full(&[1, 64], 1.0);
    let p = ParamStore::new();
    let a = forward(&net, &p, &x, Mode::Train, 11).unwrap();
    let b = forward(&net, &p, &x, Mode::Train, 11).unwrap();
    let c = forward(&net, &p, &x, Mode::Train, 12).unwrap();
    assert_eq!(a.output(), b.output());
    assert_ne!(a.output(), c.output());
    let zero_rate = Sequential::new().push("d", LayerSpec::Dropout { rate: 0.0 });
    let inf = forward(&net, &p, &x, Mode::Infer, 11).unwrap();
    let z = forward(&zero_rate, &p, &x, Mode::Train, 11).unwrap();
    assert_eq!(inf.output(), z.output());
}

fn train_run(seed: u64, steps: usize) -> ParamStore {
    let net = Sequential::new()
        .push("c", LayerSpec::conv3x3(1, 2))
        .push("r", LayerSpec::Relu)
        .push("f", LayerSpec::Flatten)
        .push("d", LayerSpec::Dropout { rate: 0.2 })
        .push("fc", LayerSpec::Dense { inputs: 32, outputs: 1 })
        .push("s", LayerSpec::Sigmoid);
    let mut params = init(&net, seed);
    let mut state = AdamState::new(AdamConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for step in 0..steps {
        let x = random_tensor(&[3, 1, 4, 4], &mut rng);
        let y = Tensor::from_fn(&[3, 1], |_| rng.gen_range(0.0..1.0));
        let mut g = Graph::new(Mode::Train, seed ^ step as u64);
        let xi = g.constant(x).unwrap();
        let out = net.apply(&mut g, &params, xi).unwrap();
        let loss = Loss::Bce(y).apply(&mut g, out).unwrap();
        g.backward(loss, &Tensor::scalar(1.0), &mut params).unwrap();
        adam_step(&mut params, &mut state).unwrap();
    }
    params
}

#[test]
fn identical_seeds_give_bit_identical_training() {
    let a = train_run(42, 25);
    let b = train_run(42, 25);
    let c = train_run(43, 25);
    for ((_, pa), (_, pb)) in a.iter().zip(b.iter()) {
        let bits_a: Vec<u64> = pa.value.data().iter().map(|v| v.to_bits()).collect();
        let bits_b: Vec<u64> = pb.value.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits_a, bits_b);
    }
    assert_ne!(a, c);
}

fn arb_layer_case() -> impl Strategy<Value = (LayerSpec, Vec<usize>)> {
    prop_oneof![
        (1usize..3, 1usize..4, 1usize..5, 1usize..3, 3usize..9, 3usize..9, any::<bool>()).prop_map(
            |(n, c, o, stride, h, w, same)| {
                let kernel = if same { 3 } else { 1 };
                (
                    LayerSpec::Conv2d {
                        in_ch: c,
                        out_ch: o,
                        kernel,
                        stride,
                        padding: if same { Padding::Same } else { Padding::Valid },
                    },
                    vec![n, c, h, w],
                )
            }
        ),
        (1usize..3, 1usize..3, 2usize..9, 2usize..9, 1usize..3).prop_map(|(n, c, h, w, k)| {
            (LayerSpec::MaxPool2d { kernel: k, stride: k }, vec![n, c, h.max(k), w.max(k)])
        }),
        (1usize..4, 1usize..6, 1usize..6).prop_map(|(n, i, o)| {
            (LayerSpec::Dense { inputs: i, outputs: o }, vec![n, i])
        }),
        (1usize..3, 3usize..12, 1usize..5, 1usize..4).prop_map(|(n, t, c, k)| {
            (LayerSpec::DepthwiseConv1d { channels: c, kernel: k }, vec![n, t, c])
        }),
        (1usize..3, 1usize..3, 1usize..5, 1usize..5)
            .prop_map(|(n, c, h, w)| (LayerSpec::Upsample2x, vec![n, c, h, w])),
        (1usize..3, 1usize..3, 1usize..5)
            .prop_map(|(n, c, h)| (LayerSpec::Flatten, vec![n, c, h])),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn catalogue_shape_matches_forward((spec, shape) in arb_layer_case(), seed in 0u64..1000) {
        let net = Sequential::new().push("l", spec);
        let params = init(&net, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor(&shape, &mut rng);
        let predicted = net.output_shape(&shape).unwrap();
        let f = forward(&net, &params, &x, Mode::Infer, seed).unwrap();
        prop_assert_eq!(f.output().shape(), &predicted[..]);
    }

    #[test]
    fn small_random_dense_nets_have_correct_gradients(
        inputs in 1usize..5, hidden in 1usize..5, seed in 0u64..1000
    ) {
        let net = Sequential::new()
            .push("a", LayerSpec::Dense { inputs, outputs: hidden })
            .push("s1", LayerSpec::Sigmoid)
            .push("b", LayerSpec::Dense { inputs: hidden, outputs: 2 });
        let params = init(&net, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let x = random_tensor(&[3, inputs], &mut rng);
        let t = random_tensor(&[3, 2], &mut rng);
        let report = grad_check(&net, &params, &x, &Loss::Mse(t), H, TOL).unwrap();
        prop_assert!(report.pass, "{:?}", report);
    }
}
