use mtscene::scheduler::{
    adaptive_weight, relative_losses, simulate_scheduler, update_history, update_weights, weighted_total, weighted_total_graph,
    SchedulerConfig, SchedulerMode, SchedulerState, StreamSpec, NUM_TASKS,
};
use mtscene::tensor::{Graph, Tensor};
use proptest::prelude::*;

fn state(window: usize) -> SchedulerState {
    SchedulerState::new(SchedulerConfig {
        window,
        ..SchedulerConfig::default()
    })
}

// x^a through exp and ln rather than powf
fn oracle_weight(base: f64, avg: f64, alpha: f64, w_min: f64) -> f64 {
    let v = base * (alpha * avg.ln()).exp();
    if v > w_min {
        v
    } else {
        w_min
    }
}

#[test]
fn relative_loss_examples() {
    assert_eq!(relative_losses(&[2.0, 3.0, 5.0, 0.0, 0.0]).unwrap(), [0.2, 0.3, 0.5, 0.0, 0.0]);
    assert_eq!(relative_losses(&[0.5; 5]).unwrap(), [0.2; 5]);
    assert!(relative_losses(&[0.0; 5]).is_err());
    assert!(relative_losses(&[1.0, -1.0, 0.0, 0.0, 0.0]).is_err());
    assert!(relative_losses(&[1.0, f64::NAN, 0.0, 0.0, 0.0]).is_err());
}

#[test]
fn history_averages() {
    let mut s = state(10);
    update_history(&mut s, &[0.2; 5]);
    assert_eq!(s.avg_relative_losses().unwrap(), [0.2; 5]);
    update_history(&mut s, &[0.4, 0.1, 0.2, 0.2, 0.1]);
    let avg = s.avg_relative_losses().unwrap();
    assert!((avg[0] - 0.3).abs() < 1e-15);
    assert!((avg[1] - 0.15).abs() < 1e-15);
}

#[test]
fn window_evicts_the_oldest_entries() {
    let mut s = state(3);
    let mut all: Vec<[f64; NUM_TASKS]> = Vec::new();
    for i in 0..9 {
        let raw: [f64; NUM_TASKS] = std::array::from_fn(|k| 1.0 + ((i * 7 + k * 3) % 5) as f64);
        let rl = relative_losses(&raw).unwrap();
        update_history(&mut s, &rl);
        all.push(rl);
        let tail = &all[all.len().saturating_sub(3)..];
        let avg = s.avg_relative_losses().unwrap();
        for k in 0..NUM_TASKS {
            assert_eq!(s.history(k).len(), tail.len());
            let expect = tail.iter().map(|r| r[k]).sum::<f64>() / tail.len() as f64;
            assert!((avg[k] - expect).abs() < 1e-15);
        }
    }
}

#[test]
fn weight_examples() {
    assert_eq!(adaptive_weight(1.0, 1.0, 0.01, 0.1), 1.0);
    let w = adaptive_weight(1.0, 0.2, 0.01, 0.1);
    assert!((w - 0.98404).abs() < 1e-5);
    assert!((w - (0.01 * 0.2f64.ln()).exp()).abs() < 1e-15);
    for avg in [1.0, 0.5, 0.2, 1e-6] {
        assert_eq!(adaptive_weight(0.05, avg, 0.01, 0.1), 0.1);
    }

    let mut s = state(10);
    update_history(&mut s, &[0.2; 5]);
    update_weights(&mut s).unwrap();
    for w in s.weights() {
        assert!((w - 0.2f64.powf(0.01)).abs() < 1e-15);
    }
}

#[test]
fn weights_need_positive_averages() {
    let mut s = state(10);
    assert!(update_weights(&mut s).is_err());
    update_history(&mut s, &[0.5, 0.5, 0.0, 0.0, 0.0]);
    assert!(update_weights(&mut s).is_err());
}

proptest! {
    #[test]
    fn relative_losses_sum_to_one(l in prop::array::uniform5(0.0f64..1e3)) {
        prop_assume!(l.iter().sum::<f64>() > 1e-9);
        let rl = relative_losses(&l).unwrap();
        prop_assert!((rl.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        prop_assert!(rl.iter().all(|&r| (0.0..=1.0).contains(&r)));
    }

    #[test]
    fn weights_match_the_oracle(
        stream in prop::collection::vec(prop::array::uniform5(1e-3f64..10.0), 1..30),
        alpha in 0.001f64..1.0,
        base in prop::array::uniform5(0.0f64..3.0),
        window in 1usize..12,
    ) {
        let mut s = SchedulerState::new(SchedulerConfig { alpha, base_weights: base, window, ..SchedulerConfig::default() });
        for l in &stream {
            s.observe(l).unwrap();
        }
        let tail = &stream[stream.len().saturating_sub(window)..];
        for k in 0..NUM_TASKS {
            let avg = tail.iter().map(|l| l[k] / l.iter().sum::<f64>()).sum::<f64>() / tail.len() as f64;
            let w = s.weights()[k];
            prop_assert!((w - oracle_weight(base[k], avg, alpha, 0.1)).abs() <= 1e-12);
            prop_assert!(w >= 0.1);
        }
    }

    #[test]
    fn common_scale_leaves_everything_unchanged(
        stream in prop::collection::vec(prop::array::uniform5(1e-3f64..10.0), 1..20),
        exp in -20i32..20,
    ) {
        let c = 2f64.powi(exp);
        let mut a = state(7);
        let mut b = state(7);
        for l in &stream {
            let scaled = l.map(|v| v * c);
            prop_assert_eq!(relative_losses(l).unwrap(), relative_losses(&scaled).unwrap());
            a.observe(l).unwrap();
            b.observe(&scaled).unwrap();
            prop_assert_eq!(a.avg_relative_losses(), b.avg_relative_losses());
            prop_assert_eq!(a.weights(), b.weights());
        }
    }
}

#[test]
fn fixed_mode_never_changes_weights() {
    let base = [1.0, 0.5, 2.0, 0.25, 1.5];
    let mut s = SchedulerState::new(SchedulerConfig {
        mode: SchedulerMode::Fixed,
        base_weights: base,
        ..SchedulerConfig::default()
    });
    for i in 0..50 {
        s.observe(&[1.0 + i as f64, 0.1, 3.0, 0.01, 2.0]).unwrap();
        assert_eq!(s.weights(), base);
    }
}

#[test]
fn weighted_total_examples() {
    assert_eq!(weighted_total(&[1.0, 2.0, 3.0, 4.0, 5.0], &[1.0; 5]).unwrap(), 15.0);
    assert_eq!(weighted_total(&[0.0; 5], &[0.1, 0.2, 0.3, 0.4, 0.5]).unwrap(), 0.0);
    assert_eq!(weighted_total(&[1.0, 2.0, 3.0, 4.0, 5.0], &[0.5; 5]).unwrap(), 7.5);
    assert!(weighted_total(&[1.0, 2.0], &[1.0]).is_err());
}

#[test]
fn weighted_total_gradient_is_the_weights() {
    let mut g = Graph::<f64>::new();
    let losses: Vec<_> = (1..=5).map(|i| g.param(Tensor::scalar(i as f64))).collect();
    let w = [0.1, 0.5, 1.0, 2.0, 0.3];
    let total = weighted_total_graph(&mut g, &losses, &w).unwrap();
    let expect: f64 = (1..=5).zip(w).map(|(i, w)| i as f64 * w).sum();
    assert!((g.value(total).item().unwrap() - expect).abs() < 1e-15);
    let grads = g.backward(total).unwrap();
    for (l, w) in losses.iter().zip(w) {
        assert_eq!(grads.get(*l).unwrap().data(), &[w]);
    }
}

fn quiet(spec: &mut StreamSpec) {
    spec.lr = 0.0;
    for t in spec.tasks.iter_mut() {
        t.grad_noise = 0.0;
        t.obs_noise = 0.0;
    }
}

#[test]
fn noiseless_streams_have_zero_variance() {
    let mut spec = StreamSpec::benchmark(6, 5, 0.05, 1.0);
    quiet(&mut spec);
    let r = simulate_scheduler(&spec, &SchedulerConfig::default(), &[1, 2, 3]).unwrap();
    // identical runs; only the rounding of the cross-seed mean remains
    for m in [&r.fixed, &r.adaptive] {
        for (v, t) in m.variance.iter().zip(&m.trace) {
            assert!(*v <= 1e-30 * t * t, "variance {v}");
        }
    }
    // after the first batch the adaptive weights are a fixed rescaling
    let ratios: Vec<f64> = r.adaptive.trace.iter().zip(&r.fixed.trace).skip(1).map(|(a, f)| a / f).collect();
    for q in &ratios {
        assert!((q - ratios[0]).abs() < 1e-12);
    }
}

#[test]
fn benchmark_report_shape() {
    let spec = StreamSpec::benchmark(12, 10, 0.05, 1.0);
    let r = simulate_scheduler(&spec, &SchedulerConfig::default(), &[0, 1, 2, 3, 4]).unwrap();
    assert_eq!(r.seeds.len(), 5);
    for m in [&r.fixed, &r.adaptive] {
        assert_eq!(m.trace.len(), 12);
        assert_eq!(m.variance.len(), 12);
        assert!(m.variance.iter().all(|v| v.is_finite() && *v >= 0.0));
    }
    assert_eq!(r.fixed.mode, SchedulerMode::Fixed);
    assert_eq!(r.adaptive.mode, SchedulerMode::Adaptive);
    assert!(r.adaptive.min_weight >= 0.1);
    assert!(simulate_scheduler(&spec, &SchedulerConfig::default(), &[]).is_err());
}

#[test]
fn floor_holds_under_tiny_base_weights() {
    let spec = StreamSpec::benchmark(4, 10, 0.05, 1.0);
    let sched = SchedulerConfig {
        base_weights: [0.01, 0.05, 1.0, 0.02, 0.0],
        ..SchedulerConfig::default()
    };
    let r = simulate_scheduler(&spec, &sched, &[7, 8]).unwrap();
    assert!(r.adaptive.min_weight >= 0.1);
}
