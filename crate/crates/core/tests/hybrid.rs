use hfb::cost::evaluate;
use hfb::hybrid::{
    build_mobilenets_v1, build_tinynet, hybrid_forward, ArchSpec, ConvShape, HybridBankLayer,
    NetLayer, Network, QuantPlan,
};
use hfb::nn::{Binder, Mode};
use hfb::spn::{spn_conv2d, QuantizerConfig};
use hfb::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn input(seed: u64, n: usize) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(&[n, 3, 32, 32], -1.0, 1.0, &mut rng)
}

fn entries_bits(net: &Network<f64>) -> Vec<(String, Vec<u64>)> {
    net.state_entries()
        .into_iter()
        .map(|(name, r)| {
            let bits = match r {
                hfb::spn::StateRef::Real(t) => t.data().iter().map(|v| v.to_bits()).collect(),
                hfb::spn::StateRef::Ternary(m) => m.entries().iter().map(|&e| e as u64).collect(),
            };
            (name, bits)
        })
        .collect()
}

#[test]
fn alpha_one_is_fp16_bitwise() {
    let spec = build_tinynet(10).unwrap();
    for seed in 0..3 {
        let mut fp = Network::<f64>::new(&spec, &QuantPlan::fp16(), seed).unwrap();
        let mut hy = Network::<f64>::new(&spec, &QuantPlan::hybrid(1.0, 1.0), seed).unwrap();
        assert_eq!(entries_bits(&fp), entries_bits(&hy));
        let x = input(seed + 100, 4);
        let (a, b) = (fp.predict(&x).unwrap(), hy.predict(&x).unwrap());
        assert!(a
            .data()
            .iter()
            .zip(b.data())
            .all(|(p, q)| p.to_bits() == q.to_bits()));
    }
    let mb = build_mobilenets_v1(0.5, 224).unwrap();
    let (a, b) = (
        evaluate(&mb, &QuantPlan::fp16()).unwrap(),
        evaluate(&mb, &QuantPlan::hybrid(1.0, 1.0)).unwrap(),
    );
    assert_eq!(
        (a.muls, a.adds, a.macs, a.model_size_bits),
        (b.muls, b.adds, b.macs, b.model_size_bits)
    );
    assert_eq!(a.energy_normalized.to_bits(), b.energy_normalized.to_bits());
    assert_eq!(
        a.throughput_normalized.to_bits(),
        b.throughput_normalized.to_bits()
    );
}

#[test]
fn alpha_zero_is_strassen() {
    let spec = build_tinynet(10).unwrap();
    for rho in [0.5, 1.0, 2.0] {
        let mut st = Network::<f64>::new(&spec, &QuantPlan::strassen(rho), 7).unwrap();
        let mut hy = Network::<f64>::new(&spec, &QuantPlan::hybrid(0.0, rho), 7).unwrap();
        assert_eq!(entries_bits(&st), entries_bits(&hy));
        let x = input(3, 2);
        let (a, b) = (st.predict(&x).unwrap(), hy.predict(&x).unwrap());
        assert!(a
            .data()
            .iter()
            .zip(b.data())
            .all(|(p, q)| p.to_bits() == q.to_bits()));
        let mb = build_mobilenets_v1(0.5, 224).unwrap();
        let (ca, cb) = (
            evaluate(&mb, &QuantPlan::strassen(rho)).unwrap(),
            evaluate(&mb, &QuantPlan::hybrid(0.0, rho)).unwrap(),
        );
        assert_eq!(
            (ca.muls, ca.adds, ca.macs, ca.model_size_bits),
            (cb.muls, cb.adds, cb.macs, cb.model_size_bits)
        );
    }
}

#[test]
fn bank_splits_channels_in_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let shape = ConvShape {
        c_in: 64,
        c_out: 128,
        k: 1,
        stride: 1,
        pad: 0,
    };
    let bank =
        HybridBankLayer::<f64>::new(shape, 0.5, 1.0, QuantizerConfig::default(), &mut rng).unwrap();
    assert_eq!(bank.fp_channels(), 64);
    assert_eq!(bank.spn().unwrap().c_out(), 64);
    let x = Tensor::uniform(&[1, 64, 14, 14], -1.0, 1.0, &mut rng);
    let y = hybrid_forward(&bank, &x).unwrap();
    assert_eq!(y.shape(), &[1, 128, 14, 14]);

    // Leading block is the plain convolution, trailing block the SPN.
    let tape = Tape::new();
    let plain = tape
        .constant(x.clone())
        .conv2d(tape.constant(bank.fp_filters().unwrap().clone()), 1, 0)
        .unwrap()
        .value();
    let spn = spn_conv2d(bank.spn().unwrap(), &x).unwrap();
    let (lead, tail) = y.split_channels(64).unwrap();
    assert_eq!(lead, plain);
    assert_eq!(tail, spn);
}

#[test]
fn zero_a_hat_leaves_only_plain_channels() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let shape = ConvShape {
        c_in: 3,
        c_out: 8,
        k: 3,
        stride: 2,
        pad: 1,
    };
    let mut bank =
        HybridBankLayer::<f64>::new(shape, 0.375, 1.0, QuantizerConfig::default(), &mut rng)
            .unwrap();
    let spn = bank.spn_mut().unwrap();
    spn.activate_quantization().unwrap();
    spn.freeze_and_fold().unwrap();
    spn.a_hat_mut().unwrap().data_mut().fill(0.0);
    let x = Tensor::uniform(&[2, 3, 9, 9], -1.0, 1.0, &mut rng);
    let y = hybrid_forward(&bank, &x).unwrap();
    let tape = Tape::new();
    let plain = tape
        .constant(x.clone())
        .conv2d(tape.constant(bank.fp_filters().unwrap().clone()), 2, 1)
        .unwrap()
        .value();
    let (lead, tail) = y.split_channels(bank.fp_channels()).unwrap();
    assert_eq!(lead, plain);
    assert!(tail.data().iter().all(|&v| v == 0.0));
}

#[test]
fn gradients_reach_both_branches() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let shape = ConvShape {
        c_in: 4,
        c_out: 6,
        k: 3,
        stride: 1,
        pad: 1,
    };
    let bank =
        HybridBankLayer::<f64>::new(shape, 0.5, 1.0, QuantizerConfig::default(), &mut rng).unwrap();
    let x = Tensor::uniform(&[2, 4, 5, 5], -1.0, 1.0, &mut rng);
    let r = Tensor::uniform(&[2, 6, 5, 5], -1.0, 1.0, &mut rng);
    let loss_of = |bank: &HybridBankLayer<f64>| {
        let tape = Tape::new();
        let mut b = Binder::new(&tape, Mode::Train);
        let y = bank.forward(&mut b, "", tape.constant(x.clone())).unwrap();
        let l = y.mul(tape.constant(r.clone())).unwrap().sum().unwrap();
        tape.backward(l).unwrap();
        (l.item(), b.grads())
    };
    let (_, grads) = loss_of(&bank);
    for name in ["fp", "spn.filters", "spn.wa", "spn.wb", "spn.wc"] {
        let g = &grads[name];
        assert!(g.data().iter().any(|&v| v != 0.0), "{name} got no gradient");
    }
    // Spot-check one coordinate of each branch against central differences.
    for name in ["fp", "spn.wb"] {
        let eps = 1e-6;
        let shift = |d: f64| {
            let mut b2 = bank.clone();
            for p in b2.params_mut("") {
                if p.name == name {
                    p.tensor.data_mut()[0] += d;
                }
            }
            loss_of(&b2).0
        };
        let fd = (shift(eps) - shift(-eps)) / (2.0 * eps);
        let ad = grads[name].data()[0];
        assert!(
            (fd - ad).abs() <= 1e-5 * fd.abs().max(1.0),
            "{name}: {ad} vs {fd}"
        );
    }
}

#[test]
fn every_layer_keeps_baseline_shape() {
    let spec = build_tinynet(10).unwrap();
    let x = input(0, 2);
    let shapes = |plan: QuantPlan| {
        let mut net = Network::<f64>::new(&spec, &plan, 0).unwrap();
        let tape = Tape::new();
        let mut b = Binder::new(&tape, Mode::Eval);
        let y = net.forward(&mut b, tape.constant(x.clone())).unwrap();
        y.shape()
    };
    let base = shapes(QuantPlan::fp16());
    assert_eq!(base, vec![2, 10]);
    for alpha in [0.0, 0.25, 0.5, 0.75, 1.0] {
        assert_eq!(shapes(QuantPlan::hybrid(alpha, 1.0)), base);
    }
    let net = Network::<f64>::new(&spec, &QuantPlan::hybrid(0.5, 1.0), 0).unwrap();
    for (l, desc) in net.layers().iter().zip(&spec.layers) {
        if let NetLayer::Conv { bank, .. } = l {
            assert_eq!(bank.c_out(), desc.c_out);
            assert_eq!(
                bank.fp_channels(),
                hfb::hybrid::round_half_up(0.5 * desc.c_out as f64)
            );
        }
    }
}

#[test]
fn tinynet_is_deterministic_and_finite() {
    let a = build_tinynet(10).unwrap();
    let b = build_tinynet(10).unwrap();
    assert_eq!(a, b);
    let mut n1 = Network::<f64>::new(&a, &QuantPlan::hybrid(0.5, 1.0), 0).unwrap();
    let mut n2 = Network::<f64>::new(&b, &QuantPlan::hybrid(0.5, 1.0), 0).unwrap();
    assert_eq!(n1.num_params(), n2.num_params());
    let y = n1.predict(&Tensor::zeros(&[1, 3, 32, 32])).unwrap();
    assert!(y.all_finite());
    assert_eq!(y.shape(), &[1, 10]);
    assert!(build_tinynet(1).is_err());
    let _ = n2.predict(&Tensor::zeros(&[1, 3, 32, 32])).unwrap();
}

#[test]
fn width_multiplier_is_monotone() {
    let widths = [0.25, 0.5, 0.75, 1.0];
    let specs: Vec<ArchSpec> = widths
        .iter()
        .map(|&w| build_mobilenets_v1(w, 224).unwrap())
        .collect();
    for pair in specs.windows(2) {
        assert!(pair[0].total_macs() <= pair[1].total_macs());
        assert!(pair[0].weight_count() <= pair[1].weight_count());
    }
    assert!(build_mobilenets_v1(0.0, 224).is_err());
    assert!(build_mobilenets_v1(1.5, 224).is_err());
}

#[test]
fn lifecycle_walk_through_network() {
    let spec = build_tinynet(10).unwrap();
    let mut net = Network::<f64>::new(&spec, &QuantPlan::hybrid(0.5, 1.0), 4).unwrap();
    let x = input(4, 2);
    let fp = net.predict(&x).unwrap();
    net.activate_quantization().unwrap();
    let q = net.predict(&x).unwrap();
    assert!(q.max_rel_diff(&fp) > 0.0);
    net.freeze_and_fold().unwrap();
    let f = net.predict(&x).unwrap();
    assert!(f.max_rel_diff(&q) <= 1e-5);
    assert!(net.activate_quantization().is_err());
}

#[test]
fn invalid_plans_are_rejected() {
    let spec = build_tinynet(10).unwrap();
    assert!(Network::<f64>::new(&spec, &QuantPlan::hybrid(1.5, 1.0), 0).is_err());
    assert!(Network::<f64>::new(&spec, &QuantPlan::strassen(0.0), 0).is_err());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let shape = ConvShape {
        c_in: 2,
        c_out: 4,
        k: 3,
        stride: 1,
        pad: 1,
    };
    assert!(
        HybridBankLayer::<f64>::new(shape, -0.1, 1.0, QuantizerConfig::default(), &mut rng)
            .is_err()
    );
}
