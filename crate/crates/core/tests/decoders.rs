use mtscene::encoder::encode;
use mtscene::instance::{declare_nb1d, decode as instance_decode, nb1d_weight_counts, non_bottleneck_1d, param_savings};
use mtscene::losses::{declare_scene_head, scene_head};
use mtscene::model::{init_params, ModelConfig, NormConfig};
use mtscene::params::{Ctx, Init, ParamStore};
use mtscene::semantic::{cfil, declare_cfil, decode as semantic_decode, nfcl, nfcl_weights, CfilPosition};
use mtscene::tensor::{Graph, Tensor};
use mtscene::Config;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(shape, 1.0, &mut rng).unwrap()
}

fn zero_param(store: &mut ParamStore<f64>, name: &str) {
    store.get_mut(name).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
}

#[test]
fn nfcl_weights_normalize_absolute_gammas() {
    assert_eq!(nfcl_weights(&[1.0, 1.0, 2.0]).unwrap(), vec![0.25, 0.25, 0.5]);
    assert_eq!(nfcl_weights(&[-2.0, 2.0]).unwrap(), vec![0.5, 0.5]);
    assert_eq!(nfcl_weights(&[3.0; 8]).unwrap(), vec![0.125; 8]);
    assert!(nfcl_weights(&[0.0, 0.0]).is_err());
}

proptest! {
    #[test]
    fn nfcl_weights_form_a_distribution(g in prop::collection::vec(-5.0f64..5.0, 1..16)) {
        prop_assume!(g.iter().any(|v| v.abs() > 1e-6));
        let w = nfcl_weights(&g).unwrap();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(w.iter().all(|&v| v >= 0.0));
        let flipped: Vec<f64> = g.iter().map(|v| -2.0 * v).collect();
        let wf = nfcl_weights(&flipped).unwrap();
        for (a, b) in w.iter().zip(&wf) {
            prop_assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn savings_ratio_is_two_over_k(c in 1usize..64, k in 1usize..9, f in 1usize..64) {
        prop_assert_eq!(param_savings(c, k, f).unwrap(), 2.0 / k as f64);
    }
}

#[test]
fn nfcl_gates_the_input_with_bn_scaled_sigmoid() {
    let mut store = ParamStore::<f64>::new();
    let mut init = Init::new(&mut store, 4);
    init.conv("n.conv", 3, 3, 1, 1, false).unwrap();
    init.batch_norm("n.bn", 3).unwrap();
    store.get_mut("n.bn.gamma").unwrap().data_mut().copy_from_slice(&[1.0, -1.0, 2.0]);
    let x = random(&[1, 3, 2, 2], 1);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let mut ctx = Ctx::new(&mut g, &store, false, NormConfig::default());
    let y = nfcl(&mut ctx, "n", xv).unwrap();
    drop(ctx);
    let y = g.value(y);

    let w = store.get("n.conv.weight").unwrap();
    let gamma = [1.0, -1.0, 2.0];
    let cw = nfcl_weights(&gamma).unwrap();
    let scale = 1.0 / (1.0 + 1e-5f64).sqrt();
    for c in 0..3 {
        for p in 0..4 {
            let conv: f64 = (0..3).map(|ci| w.data()[c * 3 + ci] * x.plane(0, ci)[p]).sum();
            let bn = gamma[c] * conv * scale;
            let gate = 1.0 / (1.0 + (-cw[c] * bn).exp());
            let expect = gate * x.plane(0, c)[p];
            assert!((y.plane(0, c)[p] - expect).abs() < 1e-14);
        }
    }
}

#[test]
fn cfil_keeps_shape_and_pools_at_one_and_five() {
    let mut store = ParamStore::<f64>::new();
    declare_cfil(&mut Init::new(&mut store, 2), "c", 64, 3).unwrap();
    let mut g = Graph::new();
    let x = g.constant(random(&[1, 64, 32, 32], 3));
    let mut ctx = Ctx::new(&mut g, &store, false, NormConfig::default());
    ctx.enable_trace();
    let y = cfil(&mut ctx, "c", x).unwrap();
    let trace = ctx.trace().unwrap().clone();
    assert_eq!(ctx.g.shape(y), &[1, 64, 32, 32]);
    assert_eq!(ctx.g.shape(trace["c.concat"]), &[1, 128, 32, 32]);
    assert_eq!(ctx.g.shape(trace["c.pool1"]), &[1, 64, 1, 1]);
    assert_eq!(ctx.g.shape(trace["c.pool5"]), &[1, 64, 5, 5]);
    assert_eq!(store.get("c.branch1.weight").unwrap().shape(), &[32, 64, 1, 1]);
    assert_eq!(store.get("c.branch5.weight").unwrap().shape(), &[32, 64, 1, 1]);
}

#[test]
fn cfil_rejects_odd_channels_and_small_maps() {
    let mut store = ParamStore::<f64>::new();
    assert!(declare_cfil(&mut Init::new(&mut store, 0), "odd", 7, 3).is_err());
    declare_cfil(&mut Init::new(&mut store, 0), "c", 8, 3).unwrap();
    let mut g = Graph::new();
    let small = g.constant(random(&[1, 8, 4, 6], 0));
    let odd = g.constant(random(&[1, 7, 8, 8], 0));
    let mut ctx = Ctx::new(&mut g, &store, false, NormConfig::default());
    assert!(cfil(&mut ctx, "c", small).is_err());
    assert!(cfil(&mut ctx, "c", odd).is_err());
}

fn run_semantic(cfg: &ModelConfig, store: &ParamStore<f64>, input: &Tensor<f64>) -> (Tensor<f64>, Vec<String>) {
    let mut g = Graph::new();
    let x = g.constant(input.clone());
    let mut ctx = Ctx::new(&mut g, store, false, cfg.norm);
    ctx.enable_trace();
    let feats = encode(&mut ctx, &cfg.encoder, x).unwrap();
    let logits = semantic_decode(&mut ctx, &cfg.semantic, &feats, cfg.cfil_position.in_semantic(), 64, 64).unwrap();
    let names = ctx.trace().unwrap().keys().cloned().collect();
    drop(ctx);
    (g.value(logits).clone(), names)
}

#[test]
fn semantic_logits_cover_the_input_and_repeat() {
    let cfg = ModelConfig::default();
    let store = init_params::<f64>(&cfg, 1).unwrap();
    let input = random(&[1, 4, 64, 64], 2);
    let (a, names) = run_semantic(&cfg, &store, &input);
    let (b, _) = run_semantic(&cfg, &store, &input);
    assert_eq!(a.shape(), &[1, 6, 64, 64]);
    assert!(a.is_finite());
    assert_eq!(a.data(), b.data());
    for n in ["semantic.nfcl1", "semantic.nfcl2", "semantic.nfcl3", "semantic.cfil"] {
        assert!(names.iter().any(|k| k == n), "{n} missing");
    }
    assert!(!names.iter().any(|k| k == "semantic.nfcl4"));
}

#[test]
fn baseline_config_has_no_nfcl_or_cfil() {
    let cfg = Config::with(&[("semantic.nfcl_layers", "none"), ("semantic.cfil_position", "none")])
        .unwrap()
        .model;
    assert!(cfg.semantic.nfcl_layers.is_empty());
    assert_eq!(cfg.cfil_position, CfilPosition::None);
    let store = init_params::<f64>(&cfg, 1).unwrap();
    assert!(store.iter().all(|(n, _, _)| !n.contains("nfcl") && !n.contains("cfil")));
    let (logits, names) = run_semantic(&cfg, &store, &random(&[1, 4, 64, 64], 2));
    assert_eq!(logits.shape(), &[1, 6, 64, 64]);
    assert!(names.iter().all(|n| !n.contains("nfcl") && !n.contains("cfil")));
}

#[test]
fn nfcl_on_a_missing_stage_is_rejected() {
    assert!(Config::with(&[("semantic.nfcl_layers", "1,5")]).is_err());
    let mut cfg = ModelConfig::default();
    cfg.semantic.nfcl_layers = vec![0];
    assert!(cfg.validate().is_err());
}

#[test]
fn zeroed_nb1d_passes_nonnegative_input() {
    let mut store = ParamStore::<f64>::new();
    declare_nb1d(&mut Init::new(&mut store, 0), "nb", 6).unwrap();
    for i in 0..4 {
        zero_param(&mut store, &format!("nb.conv{i}.weight"));
    }
    let x = random(&[2, 6, 5, 4], 8).map(f64::abs);
    for training in [false, true] {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let mut ctx = Ctx::new(&mut g, &store, training, NormConfig::default());
        let y = non_bottleneck_1d(&mut ctx, "nb", xv).unwrap();
        drop(ctx);
        assert_eq!(g.value(y).data(), x.data());
    }
}

#[test]
fn nb1d_factorization_saves_a_third() {
    let mut store = ParamStore::<f64>::new();
    declare_nb1d(&mut Init::new(&mut store, 0), "instance.layer0.nb0", 10).unwrap();
    let shapes: Vec<(String, Vec<usize>)> = store.iter().map(|(n, _, t)| (n.to_string(), t.shape().to_vec())).collect();
    let (fact, full) = nb1d_weight_counts(shapes.iter().map(|(n, s)| (n.as_str(), s.as_slice())));
    assert_eq!(fact, 4 * 3 * 10 * 10);
    assert_eq!(full, 2 * 9 * 10 * 10);
    assert_eq!(3 * fact, 2 * full);

    assert_eq!(param_savings(8, 3, 4).unwrap(), 2.0 / 3.0);
    assert_eq!(param_savings(8, 2, 4).unwrap(), 1.0);
    assert_eq!(param_savings(8, 5, 4).unwrap(), 0.4);
    assert!(param_savings(8, 0, 4).is_err());
}

#[test]
fn whole_model_nb1d_ratio_is_two_thirds() {
    let store = init_params::<f32>(&ModelConfig::default(), 0).unwrap();
    let shapes: Vec<(String, Vec<usize>)> = store.iter().map(|(n, _, t)| (n.to_string(), t.shape().to_vec())).collect();
    let (fact, full) = nb1d_weight_counts(shapes.iter().map(|(n, s)| (n.as_str(), s.as_slice())));
    let widths = [64u64, 32, 16];
    assert_eq!(fact, widths.iter().map(|w| 3 * 12 * w * w).sum::<u64>());
    assert_eq!(3 * fact, 2 * full);
}

fn run_instance(cfg: &ModelConfig, store: &ParamStore<f64>) -> Vec<(Tensor<f64>, Tensor<f64>, Tensor<f64>)> {
    let mut g = Graph::new();
    let x = g.constant(random(&[1, 4, 64, 64], 5).map(f64::abs));
    let mut ctx = Ctx::new(&mut g, store, false, cfg.norm);
    let feats = encode(&mut ctx, &cfg.encoder, x).unwrap();
    let out = instance_decode(&mut ctx, &cfg.instance, &feats, cfg.cfil_position.in_instance()).unwrap();
    drop(ctx);
    out.levels
        .iter()
        .map(|l| (g.value(l.center).clone(), g.value(l.offset).clone(), g.value(l.orientation).clone()))
        .collect()
}

#[test]
fn instance_pyramid_extents_and_center_range() {
    let cfg = ModelConfig::default();
    let store = init_params::<f64>(&cfg, 6).unwrap();
    let levels = run_instance(&cfg, &store);
    assert_eq!(levels.len(), 3);
    for (l, (center, offset, orient)) in levels.iter().enumerate() {
        let e = 4 << l;
        assert_eq!(center.shape(), &[1, 1, e, e]);
        assert_eq!(offset.shape(), &[1, 2, e, e]);
        assert_eq!(orient.shape(), &[1, 2, e, e]);
        assert!(center.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    let mut single = cfg.clone();
    single.instance.pyramid_supervision = false;
    let store = init_params::<f64>(&single, 6).unwrap();
    let levels = run_instance(&single, &store);
    assert_eq!(levels.len(), 1);
    assert_eq!(levels[0].0.shape(), &[1, 1, 16, 16]);
}

#[test]
fn zero_heads_predict_zero_offsets_and_orientations() {
    let cfg = ModelConfig::default();
    let mut store = init_params::<f64>(&cfg, 6).unwrap();
    for l in 0..3 {
        for head in ["offset", "orientation"] {
            zero_param(&mut store, &format!("instance.layer{l}.{head}.weight"));
            zero_param(&mut store, &format!("instance.layer{l}.{head}.bias"));
        }
    }
    for (_, offset, orient) in run_instance(&cfg, &store) {
        assert!(offset.data().iter().all(|&v| v == 0.0));
        assert!(orient.data().iter().all(|&v| v == 0.0));
    }
}

fn run_scene(store: &ParamStore<f64>, x: Tensor<f64>) -> Tensor<f64> {
    let mut g = Graph::new();
    let xv = g.constant(x);
    let mut ctx = Ctx::new(&mut g, store, false, NormConfig::default());
    let y = scene_head(&mut ctx, xv).unwrap();
    drop(ctx);
    g.value(y).clone()
}

#[test]
fn scene_head_sees_only_channel_means() {
    let mut store = ParamStore::<f64>::new();
    declare_scene_head(&mut Init::new(&mut store, 3), 4, 5).unwrap();
    let means = [0.5, -1.0, 2.0, 0.0];
    let constant = Tensor::from_fn(&[1, 4, 3, 3], |i| means[i / 9]).unwrap();
    // same means, spatially varying
    let varying = Tensor::from_fn(&[1, 4, 3, 3], |i| means[i / 9] + [-1.0, 0.0, 1.0][i % 3]).unwrap();
    let a = run_scene(&store, constant);
    let b = run_scene(&store, varying);
    assert_eq!(a.shape(), &[1, 5]);
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() < 1e-14);
    }

    zero_param(&mut store, "scene.fc.weight");
    let z = run_scene(&store, random(&[2, 4, 3, 3], 1));
    assert_eq!(z.shape(), &[2, 5]);
    assert!(z.data().iter().all(|&v| v == 0.0));
}
