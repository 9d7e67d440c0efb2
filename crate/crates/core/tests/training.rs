use std::fs;

use mtscene::config::Config;
use mtscene::error::Error;
use mtscene::io::generate_dataset;
use mtscene::model::init_params;
use mtscene::scheduler::NUM_TASKS;
use mtscene::train::{epoch_means, evaluate, log_header, log_text, save_checkpoint, train, train_from};

fn cfg(pairs: &[(&str, &str)]) -> Config {
    let mut all = vec![("train.iterations", "6"), ("train.batch_size", "4")];
    all.extend_from_slice(pairs);
    Config::with(&all).unwrap()
}

#[test]
fn one_epoch_logs_every_batch() {
    let c = cfg(&[("train.iterations", "2")]);
    let data = generate_dataset(&c, 8, 0).unwrap();
    let out = train(&c, &data).unwrap();
    assert_eq!(out.log.len(), 2);
    for (i, r) in out.log.iter().enumerate() {
        assert_eq!(r.iteration, i);
        assert!(r.losses.iter().all(|l| l.is_finite() && *l >= 0.0));
        let expect: f64 = r.losses.iter().zip(&r.weights).map(|(l, w)| l * w).sum();
        assert!((r.total - expect).abs() <= 1e-4 * expect.abs().max(1.0));
    }
    let text = log_text(&out.log);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], log_header());
    assert_eq!(lines[0].split(',').count(), 2 + 2 * NUM_TASKS);
    assert_eq!(lines.len(), 3);
}

#[test]
fn fixed_mode_keeps_weights_constant() {
    let c = cfg(&[("scheduler.mode", "fixed"), ("scheduler.base_weights", "1,0.5,2,0.25,1")]);
    let data = generate_dataset(&c, 8, 1).unwrap();
    let out = train(&c, &data).unwrap();
    for r in &out.log {
        assert_eq!(r.weights, [1.0, 0.5, 2.0, 0.25, 1.0]);
    }
}

#[test]
fn adaptive_weights_respect_the_floor() {
    let c = cfg(&[("scheduler.base_weights", "0.05,1,0.01,1,0.2")]);
    let data = generate_dataset(&c, 8, 2).unwrap();
    let out = train(&c, &data).unwrap();
    for r in &out.log {
        assert!(r.weights.iter().all(|&w| w >= 0.1), "{:?}", r.weights);
    }
    // the weights move once history exists
    assert_ne!(out.log[1].weights, out.log[5].weights);
}

#[test]
fn untrained_model_gives_a_complete_report() {
    let c = cfg(&[]);
    let data = generate_dataset(&c, 5, 3).unwrap();
    let params = init_params(&c.model, 0).unwrap();
    let r = evaluate(&c, &params, &data).unwrap();
    assert_eq!(r.images, 5);
    assert_eq!(r.per_class_iou.len(), 6);
    assert_eq!(r.per_class_pq.len(), 6);
    for v in [r.miou, r.pq, r.sq, r.rq, r.pq_things, r.pq_stuff, r.bacc] {
        assert!(v.is_finite() && (0.0..=1.0).contains(&v), "{v}");
    }
    if let Some(m) = r.maae {
        assert!((0.0..=180.0).contains(&m));
    }
    assert_eq!(evaluate(&c, &params, &data).unwrap(), r);
}

#[test]
fn single_threaded_training_is_bit_deterministic() {
    let c = cfg(&[("train.threads", "1"), ("train.iterations", "3")]);
    let data = generate_dataset(&c, 8, 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = Vec::new();
    for i in 0..2 {
        let out = train(&c, &data).unwrap();
        let p = dir.path().join(format!("{i}.ckpt"));
        save_checkpoint(&p, &c, &out.params).unwrap();
        bytes.push((fs::read(&p).unwrap(), log_text(&out.log)));
    }
    assert_eq!(bytes[0], bytes[1]);
}

#[test]
fn class_count_mismatch_is_rejected() {
    let c = cfg(&[]);
    let data = generate_dataset(&c, 2, 0).unwrap();
    let other = cfg(&[("semantic.num_classes", "7"), ("semantic.stuff_classes", "3")]);
    let params = init_params(&other.model, 0).unwrap();
    let err = evaluate(&other, &params, &data).unwrap_err();
    assert!(err.is_validation(), "{err}");
    assert!(matches!(train(&other, &data), Err(e) if e.is_validation()));
}

#[test]
fn divergence_names_the_batch_and_loss() {
    let c = cfg(&[("train.lr", "1e12"), ("train.iterations", "40"), ("train.momentum", "0")]);
    let data = generate_dataset(&c, 8, 5).unwrap();
    match train(&c, &data) {
        Err(e @ Error::NonFiniteLoss { .. }) | Err(e @ Error::Diverged { .. }) => {
            let batch = match e {
                Error::NonFiniteLoss { batch, loss } => {
                    assert!(["se", "ce", "of", "or", "sc"].contains(&loss));
                    batch
                }
                Error::Diverged { batch, .. } => batch,
                _ => unreachable!(),
            };
            assert!(batch > 0 && batch < 40);
            assert!(e.to_string().starts_with(&format!("batch {batch}:")));
            assert!(!e.is_validation());
        }
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("training with lr 1e12 stayed finite"),
    }
}

#[test]
fn callback_sees_the_logged_rows() {
    let c = cfg(&[("train.iterations", "3")]);
    let data = generate_dataset(&c, 4, 6).unwrap();
    let mut seen = Vec::new();
    let out = train_from(&c, &data, init_params(&c.model, 0).unwrap(), |r| seen.push(r.clone())).unwrap();
    assert_eq!(seen, out.log);
    assert_eq!(epoch_means(&out.log, 2).len(), 2);
}
