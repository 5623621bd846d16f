//! Central finite-difference checks for every differentiable tape op.
//! Non-scalar outputs are reduced with a fixed random projection so each
//! check compares a full gradient against numerics.

use hfb::{Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-6;
pub const REL_TOL: f64 = 1e-4;

type Build = dyn for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>;

pub struct Case {
    pub name: String,
    inputs: Vec<Tensor<f64>>,
    build: Box<Build>,
}

fn project<'t>(y: Var<'t, f64>, seed: u64) -> Result<Var<'t, f64>> {
    if y.shape() == [1] {
        return Ok(y);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = Tensor::uniform(&y.shape(), -1.0, 1.0, &mut rng);
    y.mul(y.tape().constant(r))?.sum()
}

fn loss_at(case: &Case, inputs: &[Tensor<f64>]) -> f64 {
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    (case.build)(&tape, &vars).unwrap().item()
}

/// Worst `|g_ad - g_fd|_2 / max(|g_ad|_2, |g_fd|_2)` over the inputs.
pub fn check(case: &Case) -> f64 {
    let tape = Tape::new();
    let vars: Vec<_> = case
        .inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let loss = (case.build)(&tape, &vars).unwrap();
    loss.backward().unwrap();
    let mut worst = 0.0f64;
    for (i, v) in vars.iter().enumerate() {
        let ad = v
            .grad()
            .map(|g| g.into_data())
            .unwrap_or_else(|| vec![0.0; case.inputs[i].len()]);
        let mut fd = Vec::with_capacity(ad.len());
        for j in 0..ad.len() {
            let mut plus = case.inputs.clone();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = case.inputs.clone();
            minus[i].data_mut()[j] -= FD_STEP;
            fd.push((loss_at(case, &plus) - loss_at(case, &minus)) / (2.0 * FD_STEP));
        }
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = ad.iter().zip(&fd).map(|(a, b)| a - b).collect();
        let scale = norm(&ad).max(norm(&fd));
        if scale > 1e-12 {
            worst = worst.max(norm(&diff) / scale);
        }
    }
    worst
}

fn dim(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

/// Values bounded away from zero so ReLU kinks sit outside the FD stencil.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn case(name: &str, inputs: Vec<Tensor<f64>>, build: Box<Build>) -> Case {
    Case {
        name: name.to_string(),
        inputs,
        build,
    }
}

/// One case per differentiable op with shapes drawn from `seed`.
pub fn cases(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ps = seed.wrapping_mul(31).wrapping_add(7);
    let mut out = Vec::new();

    let (m, k, n) = (
        dim(&mut rng, 1, 5),
        dim(&mut rng, 1, 5),
        dim(&mut rng, 1, 5),
    );
    out.push(case(
        "matmul",
        vec![rand_t(&mut rng, &[m, k]), rand_t(&mut rng, &[k, n])],
        Box::new(move |_, v| project(v[0].matmul(v[1])?, ps)),
    ));

    let shape = [
        dim(&mut rng, 1, 4),
        dim(&mut rng, 1, 4),
        dim(&mut rng, 1, 3),
    ];
    for (name, which) in [("add", 0), ("sub", 1), ("mul", 2)] {
        out.push(case(
            name,
            vec![rand_t(&mut rng, &shape), rand_t(&mut rng, &shape)],
            Box::new(move |_, v| {
                let y = match which {
                    0 => v[0].add(v[1])?,
                    1 => v[0].sub(v[1])?,
                    _ => v[0].mul(v[1])?,
                };
                project(y, ps)
            }),
        ));
    }
    let c = rng.random_range(-2.0..2.0);
    out.push(case(
        "scale",
        vec![rand_t(&mut rng, &shape)],
        Box::new(move |_, v| project(v[0].scale(c)?, ps)),
    ));
    out.push(case(
        "relu",
        vec![away_from_zero(&mut rng, &shape)],
        Box::new(move |_, v| project(v[0].relu()?, ps)),
    ));

    let (nb, ci, co) = (
        dim(&mut rng, 1, 2),
        dim(&mut rng, 1, 3),
        dim(&mut rng, 1, 3),
    );
    let (hh, ww) = (dim(&mut rng, 3, 6), dim(&mut rng, 3, 6));
    let kk = [1, 3][dim(&mut rng, 0, 1)];
    let (stride, pad) = (dim(&mut rng, 1, 2), dim(&mut rng, 0, 1));
    out.push(case(
        &format!("conv2d(k{kk},s{stride},p{pad})"),
        vec![
            rand_t(&mut rng, &[nb, ci, hh, ww]),
            rand_t(&mut rng, &[co, ci, kk, kk]),
        ],
        Box::new(move |_, v| project(v[0].conv2d(v[1], stride, pad)?, ps)),
    ));
    out.push(case(
        "conv2d(1x1 fast path)",
        vec![
            rand_t(&mut rng, &[nb, ci, hh, ww]),
            rand_t(&mut rng, &[co, ci, 1, 1]),
        ],
        Box::new(move |_, v| project(v[0].conv2d(v[1], 1, 0)?, ps)),
    ));
    out.push(case(
        &format!("depthwise_conv2d(s{stride},p1)"),
        vec![
            rand_t(&mut rng, &[nb, ci, hh, ww]),
            rand_t(&mut rng, &[ci, 1, 3, 3]),
        ],
        Box::new(move |_, v| project(v[0].depthwise_conv2d(v[1], stride, 1)?, ps)),
    ));

    let x4 = [
        dim(&mut rng, 2, 3),
        dim(&mut rng, 1, 3),
        dim(&mut rng, 1, 3),
        dim(&mut rng, 1, 3),
    ];
    let ch = x4[1];
    out.push(case(
        "scale_channels",
        vec![rand_t(&mut rng, &x4), rand_t(&mut rng, &[ch])],
        Box::new(move |_, v| project(v[0].scale_channels(v[1])?, ps)),
    ));
    out.push(case(
        "add_channels",
        vec![rand_t(&mut rng, &x4), rand_t(&mut rng, &[ch])],
        Box::new(move |_, v| project(v[0].add_channels(v[1])?, ps)),
    ));
    let mut other = x4;
    other[1] = dim(&mut rng, 1, 3);
    out.push(case(
        "concat_channels",
        vec![rand_t(&mut rng, &x4), rand_t(&mut rng, &other)],
        Box::new(move |_, v| project(v[0].concat_channels(v[1])?, ps)),
    ));
    out.push(case(
        "batchnorm_train",
        vec![
            rand_t(&mut rng, &x4),
            rand_t(&mut rng, &[ch]),
            rand_t(&mut rng, &[ch]),
        ],
        Box::new(move |_, v| project(v[0].batchnorm_train(v[1], v[2], 1e-5)?.0, ps)),
    ));
    let mean: Vec<f64> = (0..ch).map(|_| rng.random_range(-0.5..0.5)).collect();
    let var: Vec<f64> = (0..ch).map(|_| rng.random_range(0.5..2.0)).collect();
    out.push(case(
        "batchnorm_eval",
        vec![
            rand_t(&mut rng, &x4),
            rand_t(&mut rng, &[ch]),
            rand_t(&mut rng, &[ch]),
        ],
        Box::new(move |_, v| project(v[0].batchnorm_eval(v[1], v[2], &mean, &var, 1e-5)?, ps)),
    ));
    out.push(case(
        "global_avg_pool",
        vec![rand_t(&mut rng, &x4)],
        Box::new(move |_, v| project(v[0].global_avg_pool()?, ps)),
    ));
    let flat = x4.iter().product::<usize>();
    out.push(case(
        "reshape",
        vec![rand_t(&mut rng, &x4)],
        Box::new(move |_, v| project(v[0].reshape(&[flat])?, ps)),
    ));

    let (rows, fin, fout) = (
        dim(&mut rng, 1, 4),
        dim(&mut rng, 1, 5),
        dim(&mut rng, 1, 5),
    );
    out.push(case(
        "linear",
        vec![
            rand_t(&mut rng, &[rows, fin]),
            rand_t(&mut rng, &[fout, fin]),
            rand_t(&mut rng, &[fout]),
        ],
        Box::new(move |_, v| project(v[0].linear(v[1], Some(v[2]))?, ps)),
    ));
    out.push(case(
        "linear(no bias)",
        vec![
            rand_t(&mut rng, &[rows, fin]),
            rand_t(&mut rng, &[fout, fin]),
        ],
        Box::new(move |_, v| project(v[0].linear(v[1], None)?, ps)),
    ));

    let classes = dim(&mut rng, 2, 6);
    let labels: Vec<usize> = (0..rows).map(|_| rng.random_range(0..classes)).collect();
    out.push(case(
        "softmax_cross_entropy",
        vec![rand_t(&mut rng, &[rows, classes]).map(|x| 3.0 * x)],
        Box::new(move |_, v| v[0].softmax_cross_entropy(&labels)),
    ));
    let p = {
        let raw = Tensor::<f64>::uniform(&[rows, classes], 0.01, 1.0, &mut rng);
        let mut d = raw.into_data();
        for row in d.chunks_mut(classes) {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|x| *x /= s);
        }
        Tensor::from_vec(vec![rows, classes], d).unwrap()
    };
    let t = rng.random_range(1.0..5.0);
    out.push(case(
        "soft_target_kl",
        vec![rand_t(&mut rng, &[rows, classes]).map(|x| 3.0 * x)],
        Box::new(move |_, v| v[0].soft_target_kl(&p, t)),
    ));
    out.push(case(
        "sum",
        vec![rand_t(&mut rng, &shape)],
        Box::new(|_, v| v[0].mul(v[0])?.sum()),
    ));
    out.push(case(
        "mean",
        vec![rand_t(&mut rng, &shape)],
        Box::new(|_, v| v[0].mul(v[0])?.mean()),
    ));
    out
}

/// `(op, worst relative error)` for every case at `seed`.
pub fn run(seed: u64) -> Vec<(String, f64)> {
    cases(seed)
        .iter()
        .map(|c| (c.name.clone(), check(c)))
        .collect()
}
