//! Finite-difference checks of every differentiable op and of the encoder,
//! semantic and instance sub-networks, run in f64.

use std::fmt::Write as _;

use mtscene_tensor::{grad_check, BnParams, ConvParams, GradCheckConfig, Graph, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::GradCheckSettings;
use crate::encoder::{self, EncoderConfig, EncoderOutput};
use crate::error::Result;
use crate::instance;
use crate::losses;
use crate::model::{init_params, ModelConfig};
use crate::params::{Ctx, ParamKind, ParamStore};
use crate::semantic::{self, CfilPosition};

type TResult<T> = std::result::Result<T, TensorError>;
type Inputs = Vec<(String, Tensor<f64>)>;

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteRow {
    pub name: String,
    pub seeds: u64,
    pub checked: usize,
    pub kinks: usize,
    pub max_rel_error: f64,
    /// Input coordinate and seed of the largest error.
    pub worst: Option<String>,
    pub passed: bool,
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0)).expect("nonempty shape")
}

/// Mean of `y` weighted by a fixed random tensor, so that every output
/// coordinate reaches the scalar and the scalar stays O(1).
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> TResult<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let r = rand_tensor(&mut rng, g.shape(y));
    let rv = g.constant(r);
    let p = g.mul(y, rv)?;
    g.mean(p)
}

fn lift(e: crate::error::Error) -> TensorError {
    match e {
        crate::error::Error::Tensor(t) => t,
        e => TensorError::InvalidArgument {
            op: "sub-network",
            detail: e.to_string(),
        },
    }
}

fn run_case<I, F>(name: &str, s: &GradCheckSettings, coords: Option<usize>, inputs: I, f: F) -> Result<SuiteRow>
where
    I: Fn(&mut ChaCha8Rng) -> Inputs,
    F: Fn(&mut Graph<f64>, &[Var], &[String], u64) -> TResult<Var>,
{
    let mut row = SuiteRow {
        name: name.to_string(),
        seeds: s.seeds,
        checked: 0,
        kinks: 0,
        max_rel_error: 0.0,
        worst: None,
        passed: true,
    };
    for seed in 0..s.seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ins = inputs(&mut rng);
        let names: Vec<String> = ins.iter().map(|(n, _)| n.clone()).collect();
        let borrowed: Vec<(&str, Tensor<f64>)> = ins.iter().map(|(n, t)| (n.as_str(), t.clone())).collect();
        let cfg = GradCheckConfig {
            seed,
            max_coords_per_input: coords,
            ..Default::default()
        };
        let rep = grad_check(|g, v| f(g, v, &names, seed), &borrowed, &cfg)?;
        row.checked += rep.checked;
        row.kinks += rep.kinks.len();
        if rep.max_rel_error >= row.max_rel_error {
            row.max_rel_error = rep.max_rel_error;
            row.worst = rep.worst.as_ref().map(|c| format!("{}[{}] seed {seed}", c.input, c.index));
        }
        row.passed &= rep.passes(s.tolerance);
    }
    Ok(row)
}

fn named(v: Vec<(&str, Tensor<f64>)>) -> Inputs {
    v.into_iter().map(|(n, t)| (n.to_string(), t)).collect()
}

/// One row per primitive op.
pub fn op_rows(s: &GradCheckSettings) -> Result<Vec<SuiteRow>> {
    let mut rows = Vec::new();
    for (label, k, stride, pad) in [("conv2d 3x3", (3, 3), 1, (1, 1)), ("conv2d 2x2/2", (2, 2), 2, (0, 0)), ("conv2d 3x1", (3, 1), 1, (1, 0))] {
        rows.push(run_case(
            label,
            s,
            None,
            |r| {
                named(vec![
                    ("x", rand_tensor(r, &[2, 2, 6, 6])),
                    ("w", rand_tensor(r, &[3, 2, k.0, k.1])),
                    ("b", rand_tensor(r, &[3])),
                ])
            },
            move |g, v, _, seed| {
                let p = ConvParams {
                    weight: v[1],
                    bias: Some(v[2]),
                    stride: (stride, stride),
                    padding: pad,
                };
                let y = g.conv2d(v[0], &p)?;
                project(g, y, seed)
            },
        )?);
    }
    rows.push(run_case(
        "partial_conv",
        s,
        None,
        |r| named(vec![("x", rand_tensor(r, &[2, 8, 4, 4])), ("w", rand_tensor(r, &[2, 2, 3, 3]))]),
        |g, v, _, seed| {
            let p = ConvParams {
                weight: v[1],
                bias: None,
                stride: (1, 1),
                padding: (1, 1),
            };
            let y = encoder::partial_conv(g, v[0], &p, 0.25).map_err(lift)?;
            project(g, y, seed)
        },
    )?);
    for training in [true, false] {
        rows.push(run_case(
            if training { "batch_norm train" } else { "batch_norm eval" },
            s,
            None,
            |r| {
                named(vec![
                    ("x", rand_tensor(r, &[2, 3, 3, 2])),
                    ("gamma", rand_tensor(r, &[3])),
                    ("beta", rand_tensor(r, &[3])),
                ])
            },
            move |g, v, _, seed| {
                let (rm, rv) = ([0.1, -0.2, 0.3], [1.0, 0.5, 2.0]);
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
        )?);
    }
    type Unary = fn(&mut Graph<f64>, Var) -> TResult<Var>;
    let unary: [(&str, Unary); 12] = [
        ("relu", |g, x| g.relu(x)),
        ("sigmoid", |g, x| g.sigmoid(x)),
        ("exp", |g, x| g.exp(x)),
        ("abs", |g, x| g.abs(x)),
        ("square", |g, x| g.square(x)),
        ("scale/add_scalar", |g, x| {
            let y = g.scale(x, -1.7)?;
            g.add_scalar(y, 0.3)
        }),
        ("log_softmax", |g, x| g.log_softmax(x)),
        ("softmax", |g, x| g.softmax(x)),
        ("adaptive_avg_pool", |g, x| {
            let a = g.adaptive_avg_pool(x, 5, 5)?;
            let b = g.adaptive_avg_pool(x, 1, 1)?;
            let b = g.upsample_bilinear(b, 5, 5)?;
            g.add(a, b)
        }),
        ("upsample_bilinear", |g, x| g.upsample_bilinear(x, 13, 11)),
        ("global_avg_pool", |g, x| g.global_avg_pool(x)),
        ("l2_normalize_channels", |g, x| g.l2_normalize_channels(x, 1e-6)),
    ];
    for (name, op) in unary {
        rows.push(run_case(
            name,
            s,
            None,
            |r| named(vec![("x", rand_tensor(r, &[2, 3, 7, 6]))]),
            move |g, v, _, seed| {
                let y = op(g, v[0])?;
                project(g, y, seed)
            },
        )?);
    }
    rows.push(run_case(
        "add/sub/mul",
        s,
        None,
        |r| named(vec![("a", rand_tensor(r, &[2, 5])), ("b", rand_tensor(r, &[2, 5]))]),
        |g, v, _, seed| {
            let a = g.add(v[0], v[1])?;
            let d = g.sub(v[0], v[1])?;
            let m = g.mul(a, d)?;
            project(g, m, seed)
        },
    )?);
    rows.push(run_case(
        "channel_scale/abs_normalize",
        s,
        None,
        |r| named(vec![("x", rand_tensor(r, &[2, 3, 2, 2])), ("w", rand_tensor(r, &[3]))]),
        |g, v, _, seed| {
            let n = g.abs_normalize(v[1])?;
            let y = g.channel_scale(v[0], n)?;
            project(g, y, seed)
        },
    )?);
    rows.push(run_case(
        "concat/slice_channels",
        s,
        None,
        |r| named(vec![("a", rand_tensor(r, &[2, 2, 3, 3])), ("b", rand_tensor(r, &[2, 3, 3, 3]))]),
        |g, v, _, seed| {
            let c = g.concat_channels(&[v[0], v[1], v[0]])?;
            let y = g.slice_channels(c, 1, 6)?;
            project(g, y, seed)
        },
    )?);
    rows.push(run_case(
        "linear",
        s,
        None,
        |r| {
            named(vec![
                ("x", rand_tensor(r, &[3, 5])),
                ("w", rand_tensor(r, &[4, 5])),
                ("b", rand_tensor(r, &[4])),
            ])
        },
        |g, v, _, seed| {
            let y = g.linear(v[0], v[1], Some(v[2]))?;
            project(g, y, seed)
        },
    )?);
    rows.push(run_case(
        "sum_channels/masked_mean/mean",
        s,
        None,
        |r| named(vec![("x", rand_tensor(r, &[2, 3, 2, 3]))]),
        |g, v, _, _| {
            let sc = g.sum_channels(v[0])?;
            let mask: Vec<f64> = (0..12).map(|i| f64::from(i % 3 != 0)).collect();
            let m = g.masked_mean(sc, &mask)?;
            let sq = g.square(v[0])?;
            let mean = g.mean(sq)?;
            g.add(m, mean)
        },
    )?);
    Ok(rows)
}

/// One row per task loss.
pub fn loss_rows(s: &GradCheckSettings) -> Result<Vec<SuiteRow>> {
    let mask: Vec<bool> = (0..2 * 4 * 4).map(|i| i % 5 != 2).collect();
    let mut rows = Vec::new();
    rows.push(run_case(
        "loss.semantic",
        s,
        None,
        |r| named(vec![("logits", rand_tensor(r, &[2, 4, 3, 3]))]),
        |g, v, _, _| {
            let labels: Vec<u32> = (0..18).map(|i| if i % 7 == 3 { 255 } else { i % 4 }).collect();
            losses::semantic_loss(g, v[0], &labels, 255).map_err(lift)
        },
    )?);
    rows.push(run_case(
        "loss.center",
        s,
        None,
        |r| named(vec![("pred", rand_tensor(r, &[2, 1, 4, 4])), ("target", rand_tensor(r, &[2, 1, 4, 4]))]),
        |g, v, _, _| losses::center_loss(g, v[0], v[1]).map_err(lift),
    )?);
    let m = mask.clone();
    rows.push(run_case(
        "loss.offset",
        s,
        None,
        |r| named(vec![("pred", rand_tensor(r, &[2, 2, 4, 4])), ("target", rand_tensor(r, &[2, 2, 4, 4]))]),
        move |g, v, _, _| losses::offset_loss(g, v[0], v[1], &m).map_err(lift),
    )?);
    rows.push(run_case(
        "loss.orientation",
        s,
        None,
        |r| {
            let pred = rand_tensor(r, &[2, 2, 4, 4]);
            let angles: Vec<f64> = (0..32).map(|_| r.gen_range(0.0..std::f64::consts::TAU)).collect();
            let mut t = vec![0.0; 64];
            for n in 0..2 {
                for p in 0..16 {
                    t[n * 32 + p] = angles[n * 16 + p].cos();
                    t[n * 32 + 16 + p] = angles[n * 16 + p].sin();
                }
            }
            named(vec![("pred", pred), ("target", Tensor::new(&[2, 2, 4, 4], t).expect("shape"))])
        },
        move |g, v, _, _| losses::orientation_loss_dense(g, v[0], v[1], &mask, 1.5).map_err(lift),
    )?);
    rows.push(run_case(
        "loss.scene",
        s,
        None,
        |r| named(vec![("logits", rand_tensor(r, &[3, 4]))]),
        |g, v, _, _| losses::scene_loss(g, v[0], &[1, 3, 0]).map_err(lift),
    )?);
    Ok(rows)
}

/// Random parameters for a prefix of the model, as named f64 inputs.
fn param_inputs(store: &ParamStore<f64>, prefix: &str, rng: &mut ChaCha8Rng) -> Inputs {
    store
        .iter()
        .filter(|(n, k, _)| *k == ParamKind::Trainable && n.starts_with(prefix))
        .map(|(n, _, t)| {
            let t = if n.ends_with(".gamma") {
                Tensor::from_fn(t.shape(), |_| rng.gen_range(0.5..1.5)).expect("shape")
            } else if n.ends_with(".bias") || n.ends_with(".beta") {
                Tensor::from_fn(t.shape(), |_| rng.gen_range(-0.2..0.2)).expect("shape")
            } else {
                t.clone()
            };
            (n.to_string(), t)
        })
        .collect()
}

fn stage_shapes(model: &ModelConfig, n: usize, size: usize) -> [Vec<usize>; 4] {
    std::array::from_fn(|i| {
        let f = EncoderConfig::stage_factor(i + 1);
        vec![n, model.encoder.widths[i], size / f, size / f]
    })
}

/// The three sub-network rows: encoder, semantic path with NFCL and CFIL,
/// and instance path.
pub fn subnetwork_rows(s: &GradCheckSettings, model: &ModelConfig) -> Result<Vec<SuiteRow>> {
    let mut model = model.clone();
    model.semantic.nfcl_layers = vec![1, 2, 3];
    model.cfil_position = CfilPosition::Semantic;
    let store = init_params::<f64>(&model, 7)?;
    let size = s.size;
    let n = 2;
    let coords = Some(s.coords);

    let mut rows = Vec::new();
    let st = &store;
    let m = &model;
    rows.push(run_case(
        "encoder",
        s,
        coords,
        |r| {
            let mut ins = named(vec![("input", Tensor::from_fn(&[n, 4, size, size], |_| r.gen_range(0.0..1.0)).expect("shape"))]);
            ins.extend(param_inputs(st, "encoder.", r));
            ins
        },
        |g, v, names, seed| {
            let mut ctx = Ctx::new(g, st, true, m.norm);
            for (name, &var) in names.iter().zip(v).skip(1) {
                ctx.bind(name.clone(), var);
            }
            let out = encoder::encode(&mut ctx, &m.encoder, v[0]).map_err(lift)?;
            let mut total = project(ctx.g, out.feats[0], seed)?;
            for (i, &f) in out.feats.iter().enumerate().skip(1) {
                let p = project(ctx.g, f, seed + i as u64)?;
                total = ctx.g.add(total, p)?;
            }
            Ok(total)
        },
    )?);
    let shapes = stage_shapes(&model, n, size);
    let feat_inputs = |r: &mut ChaCha8Rng| -> Inputs {
        (0..4)
            .map(|i| (format!("feat{}", i + 1), rand_tensor(r, &shapes[i])))
            .collect()
    };
    rows.push(run_case(
        "semantic path (NFCL + CFIL)",
        s,
        coords,
        |r| {
            let mut ins = feat_inputs(r);
            ins.extend(param_inputs(st, "semantic.", r));
            ins
        },
        |g, v, names, seed| {
            let mut ctx = Ctx::new(g, st, true, m.norm);
            for (name, &var) in names.iter().zip(v).skip(4) {
                ctx.bind(name.clone(), var);
            }
            let feats = EncoderOutput {
                feats: [v[0], v[1], v[2], v[3]],
            };
            let y = semantic::decode(&mut ctx, &m.semantic, &feats, true, size, size).map_err(lift)?;
            project(ctx.g, y, seed)
        },
    )?);
    rows.push(run_case(
        "instance path",
        s,
        coords,
        |r| {
            let mut ins = feat_inputs(r);
            ins.extend(param_inputs(st, "instance.", r));
            ins
        },
        |g, v, names, seed| {
            let mut ctx = Ctx::new(g, st, true, m.norm);
            for (name, &var) in names.iter().zip(v).skip(4) {
                ctx.bind(name.clone(), var);
            }
            let feats = EncoderOutput {
                feats: [v[0], v[1], v[2], v[3]],
            };
            let out = instance::decode(&mut ctx, &m.instance, &feats, false).map_err(lift)?;
            let mut total: Option<Var> = None;
            for (i, lv) in out.levels.iter().enumerate() {
                for (j, &h) in [lv.center, lv.offset, lv.orientation].iter().enumerate() {
                    let p = project(ctx.g, h, seed + (3 * i + j) as u64)?;
                    total = Some(match total {
                        Some(t) => ctx.g.add(t, p)?,
                        None => p,
                    });
                }
            }
            total.ok_or(TensorError::InvalidArgument {
                op: "instance path",
                detail: "no heads".into(),
            })
        },
    )?);
    Ok(rows)
}

pub fn run_all(s: &GradCheckSettings, model: &ModelConfig) -> Result<Vec<SuiteRow>> {
    let mut rows = op_rows(s)?;
    rows.extend(loss_rows(s)?);
    rows.extend(subnetwork_rows(s, model)?);
    Ok(rows)
}

pub fn table(rows: &[SuiteRow], tolerance: f64) -> String {
    let w = rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(4);
    let mut s = format!(
        "{:<w$}  {:>5}  {:>7}  {:>5}  {:>11}  result  worst\n",
        "case", "seeds", "checked", "kinks", "max_rel_err"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<w$}  {:>5}  {:>7}  {:>5}  {:>11.3e}  {:<6}  {}",
            r.name,
            r.seeds,
            r.checked,
            r.kinks,
            r.max_rel_error,
            if r.passed { "pass" } else { "FAIL" },
            r.worst.as_deref().unwrap_or("-")
        );
    }
    let _ = writeln!(s, "tolerance = {tolerance:e}");
    s
}
