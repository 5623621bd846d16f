//! Output change across `freeze_and_fold` on random layers.

use hfb::spn::{spn_conv2d, OutputMixing, QuantizerConfig, SpnConvLayer};
use hfb::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A random `QUANT_ACTIVE` layer of small shape.
pub fn random_layer(rng: &mut ChaCha8Rng) -> SpnConvLayer<f64> {
    let c_in = rng.random_range(1..=4);
    let c_out = rng.random_range(1..=4);
    let k = [1, 3][rng.random_range(0..2)];
    let stride = rng.random_range(1..=2);
    let pad = if k == 3 { rng.random_range(0..=1) } else { 0 };
    let (mixing, h) = if rng.random_bool(0.5) {
        (OutputMixing::Paired, 2 * c_out)
    } else {
        (OutputMixing::Learned, rng.random_range(1..=8))
    };
    let mut layer = SpnConvLayer::new(
        c_in,
        c_out,
        k,
        stride,
        pad,
        h,
        mixing,
        QuantizerConfig::default(),
        rng,
    )
    .unwrap();
    layer.activate_quantization().unwrap();
    layer
}

/// Worst relative output change over `layers` layers and `inputs` inputs
/// per layer.
pub fn worst_fold_change(seed: u64, layers: usize, inputs: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..layers {
        let layer = random_layer(&mut rng);
        let mut frozen = layer.clone();
        frozen.freeze_and_fold().unwrap();
        for _ in 0..inputs {
            let (h, w) = (rng.random_range(3..=7), rng.random_range(3..=7));
            let x = Tensor::uniform(&[1, layer.c_in(), h, w], -1.0, 1.0, &mut rng);
            let before = spn_conv2d(&layer, &x).unwrap();
            let after = spn_conv2d(&frozen, &x).unwrap();
            worst = worst.max(after.max_rel_diff(&before));
        }
    }
    worst
}
