//! Reverse-mode gradients of every differentiable op against central finite
//! differences, in f64, over 20 random seeds each.

use mtscene_tensor::{grad_check, BnParams, ConvParams, GradCheckConfig, Graph, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 20;
const TOL: f64 = 1e-5;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0)).unwrap()
}

/// Contracts `y` with a fixed random tensor so that every output coordinate
/// influences the scalar.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let r = rand_tensor(&mut rng, g.shape(y));
    let rv = g.constant(r);
    let p = g.mul(y, rv)?;
    g.sum(p)
}

fn check<F>(name: &str, inputs: impl Fn(&mut ChaCha8Rng) -> Vec<(&'static str, Tensor<f64>)>, f: F)
where
    F: Fn(&mut Graph<f64>, &[Var], u64) -> Result<Var>,
{
    let mut worst = 0.0f64;
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ins = inputs(&mut rng);
        let report = grad_check(
            |g, v| f(g, v, seed),
            &ins,
            &GradCheckConfig {
                seed,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(
            report.passes(TOL),
            "{name} seed {seed}: max rel error {} at {:?}",
            report.max_rel_error,
            report.worst
        );
        worst = worst.max(report.max_rel_error);
    }
    println!("{name}: worst relative error {worst:.3e} over {SEEDS} seeds");
}

#[test]
fn conv2d_gradients() {
    for (k, s, p) in [((3, 3), (1, 1), (1, 1)), ((2, 2), (2, 2), (0, 0)), ((3, 1), (1, 1), (1, 0)), ((4, 4), (4, 4), (0, 0))] {
        check(
            "conv2d",
            |r| {
                vec![
                    ("x", rand_tensor(r, &[2, 2, 8, 8])),
                    ("w", rand_tensor(r, &[3, 2, k.0, k.1])),
                    ("b", rand_tensor(r, &[3])),
                ]
            },
            |g, v, seed| {
                let y = g.conv2d(
                    v[0],
                    &ConvParams {
                        weight: v[1],
                        bias: Some(v[2]),
                        stride: s,
                        padding: p,
                    },
                )?;
                project(g, y, seed)
            },
        );
    }
}

#[test]
fn batch_norm_gradients_train_and_eval() {
    for training in [true, false] {
        check(
            "batch_norm",
            |r| {
                vec![
                    ("x", rand_tensor(r, &[2, 3, 3, 2])),
                    ("gamma", rand_tensor(r, &[3])),
                    ("beta", rand_tensor(r, &[3])),
                ]
            },
            |g, v, seed| {
                let rm = [0.1, -0.2, 0.3];
                let rv = [1.0, 0.5, 2.0];
                let p = BnParams {
                    gamma: v[1],
                    beta: v[2],
                    running_mean: &rm,
                    running_var: &rv,
                    epsilon: 1e-5,
                    momentum: 0.1,
                };
                let (y, _) = g.batch_norm(v[0], &p, training)?;
                project(g, y, seed)
            },
        );
    }
}

#[test]
fn pooling_and_resampling_gradients() {
    check(
        "adaptive_avg_pool",
        |r| vec![("x", rand_tensor(r, &[1, 2, 10, 7]))],
        |g, v, seed| {
            let a = g.adaptive_avg_pool(v[0], 5, 5)?;
            let b = g.adaptive_avg_pool(v[0], 1, 1)?;
            let pa = project(g, a, seed)?;
            let pb = project(g, b, seed + 1)?;
            g.add(pa, pb)
        },
    );
    check(
        "upsample_bilinear",
        |r| vec![("x", rand_tensor(r, &[1, 2, 3, 5]))],
        |g, v, seed| {
            let y = g.upsample_bilinear(v[0], 7, 11)?;
            project(g, y, seed)
        },
    );
    check(
        "global_avg_pool",
        |r| vec![("x", rand_tensor(r, &[2, 3, 4, 2]))],
        |g, v, seed| {
            let y = g.global_avg_pool(v[0])?;
            project(g, y, seed)
        },
    );
}

#[test]
fn elementwise_gradients() {
    type Unary = fn(&mut Graph<f64>, Var) -> Result<Var>;
    let unary: [(&str, Unary); 6] = [
        ("relu", |g, x| g.relu(x)),
        ("sigmoid", |g, x| g.sigmoid(x)),
        ("exp", |g, x| g.exp(x)),
        ("abs", |g, x| g.abs(x)),
        ("square", |g, x| g.square(x)),
        ("scale_add", |g, x| {
            let s = g.scale(x, -1.7)?;
            g.add_scalar(s, 0.3)
        }),
    ];
    for (name, op) in unary {
        check(
            name,
            |r| vec![("x", rand_tensor(r, &[2, 3, 2, 2]))],
            |g, v, seed| {
                let y = op(g, v[0])?;
                project(g, y, seed)
            },
        );
    }
    check(
        "add_sub_mul",
        |r| vec![("a", rand_tensor(r, &[2, 5])), ("b", rand_tensor(r, &[2, 5]))],
        |g, v, seed| {
            let s = g.add(v[0], v[1])?;
            let d = g.sub(v[0], v[1])?;
            let m = g.mul(s, d)?;
            project(g, m, seed)
        },
    );
    check(
        "channel_scale",
        |r| vec![("x", rand_tensor(r, &[2, 3, 2, 2])), ("w", rand_tensor(r, &[3]))],
        |g, v, seed| {
            let y = g.channel_scale(v[0], v[1])?;
            project(g, y, seed)
        },
    );
}

#[test]
fn channel_and_reduction_gradients() {
    check(
        "log_softmax",
        |r| vec![("x", rand_tensor(r, &[2, 4, 2, 3]))],
        |g, v, seed| {
            let y = g.log_softmax(v[0])?;
            project(g, y, seed)
        },
    );
    check(
        "concat_slice",
        |r| vec![("a", rand_tensor(r, &[2, 2, 3, 3])), ("b", rand_tensor(r, &[2, 3, 3, 3]))],
        |g, v, seed| {
            let c = g.concat_channels(&[v[0], v[1], v[0]])?;
            let s = g.slice_channels(c, 1, 6)?;
            project(g, s, seed)
        },
    );
    check(
        "linear",
        |r| {
            vec![
                ("x", rand_tensor(r, &[3, 5])),
                ("w", rand_tensor(r, &[4, 5])),
                ("b", rand_tensor(r, &[4])),
            ]
        },
        |g, v, seed| {
            let y = g.linear(v[0], v[1], Some(v[2]))?;
            project(g, y, seed)
        },
    );
    check(
        "sum_channels_and_masked_mean",
        |r| vec![("x", rand_tensor(r, &[2, 3, 2, 3]))],
        |g, v, seed| {
            let s = g.sum_channels(v[0])?;
            let mask: Vec<f64> = (0..12).map(|i| (i % 3 != 0) as u8 as f64).collect();
            let m = g.masked_mean(s, &mask)?;
            let p = project(g, v[0], seed)?;
            g.add(m, p)
        },
    );
    check(
        "nll",
        |r| vec![("x", rand_tensor(r, &[2, 4, 3, 1]))],
        |g, v, _| {
            let l = g.log_softmax(v[0])?;
            let labels = [Some(0), None, Some(3), Some(2), Some(1), None];
            g.nll(l, &labels)
        },
    );
    check(
        "l2_normalize_channels",
        |r| vec![("x", rand_tensor(r, &[2, 2, 3, 3]))],
        |g, v, seed| {
            let y = g.l2_normalize_channels(v[0], 1e-6)?;
            project(g, y, seed)
        },
    );
    check(
        "abs_normalize",
        |r| vec![("x", rand_tensor(r, &[5]))],
        |g, v, seed| {
            let y = g.abs_normalize(v[0])?;
            project(g, y, seed)
        },
    );
}
