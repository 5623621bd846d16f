mod support;

use hfb::nn::{Binder, Mode};
use hfb::spn::search::{search_with, FilterBankTemplate, SearchConfig};
use hfb::spn::{
    make_canonical_strassen, make_naive_expansion, spn_conv2d, spn_matmul, spn_matmul_counted,
    ternary_quantize, ternary_view, verify_spn_exact, BilinearMap, Lifecycle, OutputMixing,
    QuantizerConfig, SpnConvLayer, TernaryMatrix,
};
use hfb::{Error, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn naive2(a: &[i64], b: &[i64]) -> [i64; 4] {
    [
        a[0] * b[0] + a[1] * b[2],
        a[0] * b[1] + a[1] * b[3],
        a[2] * b[0] + a[3] * b[2],
        a[2] * b[1] + a[3] * b[3],
    ]
}

#[test]
fn canonical_strassen_is_exact_on_random_integers() {
    let spn = make_canonical_strassen::<f64>();
    assert_eq!(spn.h(), 7);
    assert!(verify_spn_exact(&spn, &BilinearMap::matmul(2, 2, 2)).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..1000 {
        let a: Vec<i64> = (0..4).map(|_| rng.random_range(-1000..=1000)).collect();
        let b: Vec<i64> = (0..4).map(|_| rng.random_range(-1000..=1000)).collect();
        assert_eq!(spn.apply_i64(&a, &b).unwrap(), naive2(&a, &b));
        // The floating-point path is exact too at this magnitude.
        let af = Tensor::from_vec(vec![2, 2], a.iter().map(|&v| v as f64).collect()).unwrap();
        let bf = Tensor::from_vec(vec![2, 2], b.iter().map(|&v| v as f64).collect()).unwrap();
        let c = spn_matmul(&spn, &af, &bf).unwrap();
        let want: Vec<f64> = naive2(&a, &b).iter().map(|&v| v as f64).collect();
        assert_eq!(c.data(), &want[..]);
    }
}

#[test]
fn canonical_identity_and_zero_cases() {
    let spn = make_canonical_strassen::<f64>();
    let b = Tensor::from_vec(vec![2, 2], vec![3.0, -1.5, 2.25, 7.0]).unwrap();
    assert_eq!(spn_matmul(&spn, &Tensor::eye(2), &b).unwrap(), b);
    let zero_c =
        hfb::spn::SpnTriple::new(spn.wa.clone(), spn.wb.clone(), TernaryMatrix::zeros(4, 7))
            .unwrap();
    let out = spn_matmul(&zero_c, &Tensor::eye(2), &b).unwrap();
    assert!(out.data().iter().all(|&v| v == 0.0));
    for m in [&spn.wa, &spn.wb, &spn.wc] {
        assert!(m.entries().iter().all(|e| (-1..=1).contains(e)));
    }
}

#[test]
fn one_multiplication_per_hidden_unit() {
    let spn = make_canonical_strassen::<f64>();
    let (_, count) = spn_matmul_counted(&spn, &Tensor::eye(2), &Tensor::eye(2)).unwrap();
    assert_eq!(count.muls, 7);
    let naive = make_naive_expansion::<f64>(2, 2, 2);
    let (_, count) = spn_matmul_counted(&naive, &Tensor::eye(2), &Tensor::eye(2)).unwrap();
    assert_eq!(count.muls, 8);
}

#[test]
fn verification_catches_single_flips() {
    let spn = make_canonical_strassen::<f64>();
    let reference = BilinearMap::matmul(2, 2, 2);
    for r in 0..4 {
        for c in 0..7 {
            let mut bad = spn.clone();
            let v = bad.wc.get(r, c);
            bad.wc.set(r, c, if v == 0 { 1 } else { 0 });
            assert!(
                !verify_spn_exact(&bad, &reference).unwrap(),
                "flip ({r},{c})"
            );
        }
    }
    assert!(verify_spn_exact(&make_naive_expansion::<f64>(2, 2, 2), &reference).unwrap());
}

#[test]
fn mismatched_dimensions_are_errors() {
    let spn = make_canonical_strassen::<f64>();
    let a = Tensor::<f64>::zeros(&[3, 3]);
    assert!(matches!(
        spn_matmul(&spn, &a, &Tensor::eye(2)),
        Err(Error::Shape { .. })
    ));
    assert!(verify_spn_exact(&spn, &BilinearMap::matmul(3, 3, 3)).is_err());
}

#[test]
fn quantizer_worked_example() {
    let w = Tensor::<f64>::from_vec(vec![4], vec![0.3, -0.8, 0.05, 0.6]).unwrap();
    let q = ternary_quantize(&w, &QuantizerConfig::default());
    assert_eq!(q.matrix.entries(), &[0, -1, 0, 1]);
    assert!((q.matrix.scale() - 0.7).abs() < 1e-12);
    assert!(!q.degenerate);
    let z = ternary_quantize(&Tensor::<f64>::zeros(&[2, 3]), &QuantizerConfig::default());
    assert!(z.degenerate);
    assert_eq!(z.matrix.scale(), 1.0);
    assert!(z.matrix.entries().iter().all(|&e| e == 0));
}

proptest! {
    #[test]
    fn quantizer_is_positively_homogeneous(
        vals in prop::collection::vec(-5.0f64..5.0, 1..40),
        c in 0.01f64..100.0,
    ) {
        let w = Tensor::from_vec(vec![vals.len()], vals.clone()).unwrap();
        let cfg = QuantizerConfig::default();
        let q = ternary_quantize(&w, &cfg);
        let qc = ternary_quantize(&w.map(|v| c * v), &cfg);
        // Entries sitting exactly at the threshold may flip under rounding.
        let mean: f64 = vals.iter().map(|v| v.abs()).sum::<f64>() / vals.len() as f64;
        prop_assume!(vals.iter().all(|v| (v.abs() - 0.7 * mean).abs() > 1e-9 * (1.0 + mean)));
        prop_assert_eq!(q.matrix.entries(), qc.matrix.entries());
        if !q.degenerate {
            prop_assert!((qc.matrix.scale() - c * q.matrix.scale()).abs() <= 1e-9 * c * q.matrix.scale());
        }
    }
}

fn masters_to_ternary(layer: &mut SpnConvLayer<f64>) {
    let cfg = *layer.quantizer();
    for p in layer.params_mut("") {
        if p.name != "filters" {
            let grad = p.tensor.requires_grad();
            *p.tensor = ternary_view(p.tensor, &cfg).with_requires_grad(grad);
        }
    }
}

#[test]
fn ste_forward_and_gradients_match_materialized_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10 {
        let fp = support::folding::random_layer(&mut rng);
        // random_layer returns QUANT_ACTIVE; rebuild a FULL_PRECISION twin.
        let mut materialized = SpnConvLayer::new(
            fp.c_in(),
            fp.c_out(),
            fp.kernel(),
            fp.stride(),
            fp.padding(),
            fp.h(),
            fp.mixing(),
            *fp.quantizer(),
            &mut rng,
        )
        .unwrap();
        {
            let src: Vec<_> = fp
                .clone()
                .params_mut("")
                .into_iter()
                .map(|p| (p.name, p.tensor.clone()))
                .collect();
            for (p, (_, t)) in materialized.params_mut("").into_iter().zip(src) {
                *p.tensor = t;
            }
        }
        masters_to_ternary(&mut materialized);
        let x = Tensor::uniform(&[2, fp.c_in(), 5, 5], -1.0, 1.0, &mut rng);
        let r = {
            let shape = spn_conv2d(&fp, &x).unwrap().shape().to_vec();
            Tensor::uniform(&shape, -1.0, 1.0, &mut rng)
        };
        let run = |layer: &SpnConvLayer<f64>, ste: bool| {
            let tape = Tape::new();
            let mut b = Binder::new(&tape, Mode::Train);
            let xv = tape.constant(x.clone());
            let y = if ste {
                layer.quantized_forward_ste(&mut b, "", xv).unwrap()
            } else {
                layer.forward(&mut b, "", xv).unwrap()
            };
            let loss = y.mul(tape.constant(r.clone())).unwrap().sum().unwrap();
            tape.backward(loss).unwrap();
            (loss.item(), b.grads())
        };
        let (l_ste, g_ste) = run(&fp, true);
        let (l_mat, g_mat) = run(&materialized, false);
        assert_eq!(l_ste.to_bits(), l_mat.to_bits());
        assert_eq!(
            g_ste.keys().collect::<Vec<_>>(),
            g_mat.keys().collect::<Vec<_>>()
        );
        for (name, g) in &g_ste {
            assert_eq!(g.data(), g_mat[name].data(), "{name}");
        }
    }
}

#[test]
fn already_ternary_masters_give_unquantized_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut layer = SpnConvLayer::<f64>::new(
        2,
        2,
        3,
        1,
        1,
        4,
        OutputMixing::Learned,
        QuantizerConfig::default(),
        &mut rng,
    )
    .unwrap();
    // Unit-magnitude ternary masters quantize to themselves.
    for p in layer.params_mut("") {
        if p.name != "filters" {
            let n = p.tensor.len();
            let vals: Vec<f64> = (0..n).map(|i| [1.0, -1.0, 0.0][i % 3]).collect();
            p.tensor.data_mut().copy_from_slice(&vals);
        }
    }
    let x = Tensor::uniform(&[1, 2, 4, 4], -1.0, 1.0, &mut rng);
    let grads = |l: &SpnConvLayer<f64>| {
        let tape = Tape::new();
        let mut b = Binder::new(&tape, Mode::Train);
        let y = l.forward(&mut b, "", tape.constant(x.clone())).unwrap();
        tape.backward(y.sum().unwrap()).unwrap();
        b.grads()
    };
    let g_fp = grads(&layer);
    layer.activate_quantization().unwrap();
    let g_q = grads(&layer);
    for (name, g) in &g_fp {
        assert_eq!(g.shape(), g_q[name].shape());
        assert_eq!(g.data(), g_q[name].data(), "{name}");
    }
}

#[test]
fn folding_preserves_outputs() {
    let worst = support::folding::worst_fold_change(17, 10, 20);
    assert!(worst <= 1e-5, "fold changed outputs by {worst:.3e}");
}

#[test]
fn folded_layer_has_unit_scales_and_trainable_a_hat() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut layer = support::folding::random_layer(&mut rng);
    layer.freeze_and_fold().unwrap();
    assert_eq!(layer.state(), Lifecycle::FrozenTernary);
    let (wb, wc) = layer.frozen_matrices().unwrap();
    assert_eq!((wb.scale(), wc.scale()), (1.0, 1.0));
    assert!(layer.a_hat().unwrap().requires_grad());
    let names: Vec<String> = layer.params_mut("l").into_iter().map(|p| p.name).collect();
    assert_eq!(names, ["l.a_hat"]);
}

#[test]
fn lifecycle_transitions_are_enforced() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut layer = SpnConvLayer::<f64>::new(
        1,
        2,
        1,
        1,
        0,
        3,
        OutputMixing::Learned,
        QuantizerConfig::default(),
        &mut rng,
    )
    .unwrap();
    assert!(matches!(
        layer.freeze_and_fold(),
        Err(Error::Lifecycle { .. })
    ));
    assert!(layer.ternary_triple().is_err());
    let tape = Tape::new();
    let mut b = Binder::new(&tape, Mode::Train);
    let x = tape.constant(Tensor::zeros(&[1, 1, 2, 2]));
    assert!(layer.quantized_forward_ste(&mut b, "", x).is_err());
    layer.activate_quantization().unwrap();
    assert!(layer.activate_quantization().is_err());
    layer.freeze_and_fold().unwrap();
    assert!(layer.freeze_and_fold().is_err());
    assert!(layer.activate_quantization().is_err());
}

#[test]
fn invalid_layer_parameters_are_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let q = QuantizerConfig::default();
    assert!(
        SpnConvLayer::<f64>::new(1, 2, 3, 1, 1, 0, OutputMixing::Learned, q, &mut rng).is_err()
    );
    assert!(SpnConvLayer::<f64>::new(1, 2, 3, 1, 1, 3, OutputMixing::Paired, q, &mut rng).is_err());
    assert!(QuantizerConfig::new(1.0).is_err());
    assert!(QuantizerConfig::new(0.0).is_err());
}

/// `[c_in k^2]` patch at output position `(oy, ox)`, zero-padded.
fn patch(
    x: &Tensor<f64>,
    s: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oy: usize,
    ox: usize,
) -> Vec<f64> {
    let (c, h, w) = (x.shape()[1], x.shape()[2], x.shape()[3]);
    let mut out = Vec::with_capacity(c * k * k);
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let iy = (oy * stride + ky) as isize - pad as isize;
                let ix = (ox * stride + kx) as isize - pad as isize;
                let inside = iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w;
                out.push(if inside {
                    x.data()[((s * c + ci) * h + iy as usize) * w + ix as usize]
                } else {
                    0.0
                });
            }
        }
    }
    out
}

#[test]
fn conv_equals_per_position_spn_matmul() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..10 {
        let layer = support::folding::random_layer(&mut rng);
        let triple = layer.ternary_triple().unwrap();
        let (k, stride, pad) = (layer.kernel(), layer.stride(), layer.padding());
        let x = Tensor::uniform(&[2, layer.c_in(), 6, 5], -1.0, 1.0, &mut rng);
        let y = spn_conv2d(&layer, &x).unwrap();
        let (co, oh, ow) = (y.shape()[1], y.shape()[2], y.shape()[3]);
        let a = layer.filters().unwrap();
        let mut want = Tensor::zeros(y.shape());
        for s in 0..2 {
            for oy in 0..oh {
                for ox in 0..ow {
                    let b = Tensor::from_vec(
                        vec![triple.wb.cols()],
                        patch(&x, s, k, stride, pad, oy, ox),
                    )
                    .unwrap();
                    let c = spn_matmul(&triple, a, &b).unwrap();
                    for o in 0..co {
                        want.data_mut()[((s * co + o) * oh + oy) * ow + ox] = c.data()[o];
                    }
                }
            }
        }
        assert!(y.max_rel_diff(&want) < 1e-5);
    }
}

#[test]
fn naive_expansion_reproduces_conv2d() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let (c_in, c_out, k) = (2, 3, 3);
    let p = c_in * k * k;
    let naive = make_naive_expansion::<f64>(c_out, p, 1);
    let filters = Tensor::uniform(&[c_out, c_in, k, k], -1.0, 1.0, &mut rng);
    let a_hat =
        Tensor::from_vec(vec![naive.h()], naive.fold_filter(filters.data()).unwrap()).unwrap();
    let layer = SpnConvLayer::from_frozen(
        c_in,
        k,
        1,
        1,
        naive.wb.clone(),
        naive.wc.clone(),
        a_hat,
        QuantizerConfig::default(),
    )
    .unwrap();
    let x = Tensor::uniform(&[2, c_in, 5, 4], -1.0, 1.0, &mut rng);
    let tape = Tape::new();
    let want = tape
        .constant(x.clone())
        .conv2d(tape.constant(filters), 1, 1)
        .unwrap()
        .value();
    assert!(spn_conv2d(&layer, &x).unwrap().max_rel_diff(&want) < 1e-12);

    let mut zero = layer.clone();
    zero.a_hat_mut().unwrap().data_mut().fill(0.0);
    assert!(spn_conv2d(&zero, &x)
        .unwrap()
        .data()
        .iter()
        .all(|&v| v == 0.0));
}

fn quick_search() -> SearchConfig {
    SearchConfig {
        train_steps: 1500,
        ..SearchConfig::default()
    }
}

#[test]
fn generic_bank_search_finds_seven_products() {
    let found = search_with(&FilterBankTemplate::generic(), 7, 50, 0, &quick_search()).unwrap();
    let found = found.expect("h = 7 exists for a generic bank");
    assert_eq!(found.spn.h(), 7);
    assert!(verify_spn_exact(&found.spn, &BilinearMap::matmul(2, 2, 2)).unwrap());
}

#[test]
fn single_product_cannot_cover_a_generic_bank() {
    let found = search_with(&FilterBankTemplate::generic(), 1, 5, 0, &quick_search()).unwrap();
    assert!(found.is_none());
}

#[test]
fn invalid_templates_are_rejected() {
    assert!(FilterBankTemplate::new(vec![0, 2, 0, 2]).is_err());
    assert!(FilterBankTemplate::new(vec![0, 1]).is_err());
    assert!(search_with(
        &FilterBankTemplate::generic(),
        0,
        1,
        0,
        &SearchConfig::default()
    )
    .is_err());
}
