use std::collections::BTreeMap;

use mtscene::grid::Grid;
use mtscene::losses::{center_loss, offset_loss, orientation_loss, orientation_loss_dense, scene_loss, semantic_loss};
use mtscene::targets::{centroids, encode_center_targets, orientation_targets, pyramid_targets};
use mtscene::tensor::{Graph, Tensor};
use proptest::prelude::*;

fn value(g: &Graph<f64>, v: mtscene::tensor::Var) -> f64 {
    g.value(v).item().unwrap()
}

fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape, data).unwrap()
}

#[test]
fn semantic_loss_examples() {
    let mut g = Graph::new();
    let x = g.constant(t(&[1, 2, 1, 1], vec![0.0, 0.0]));
    let l = semantic_loss(&mut g, x, &[0], 255).unwrap();
    assert!((value(&g, l) - 2f64.ln()).abs() < 1e-15);

    let x = g.constant(t(&[1, 2, 1, 1], vec![60.0, 0.0]));
    let l = semantic_loss(&mut g, x, &[0], 255).unwrap();
    assert!(value(&g, l) < 1e-25);

    let x = g.constant(t(&[1, 2, 1, 2], vec![0.0; 4]));
    assert!(semantic_loss(&mut g, x, &[255, 255], 255).is_err());
}

#[test]
fn semantic_loss_matches_log_sum_exp_oracle() {
    let logits: Vec<f64> = (0..3 * 4).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.7).collect();
    let labels = [2u32, 255, 0, 1];
    let mut g = Graph::new();
    let x = g.constant(t(&[1, 3, 2, 2], logits.clone()));
    let l = semantic_loss(&mut g, x, &labels, 255).unwrap();
    let mut sum = 0.0;
    let mut n = 0.0;
    for (p, &lab) in labels.iter().enumerate() {
        if lab == 255 {
            continue;
        }
        let z: Vec<f64> = (0..3).map(|c| logits[c * 4 + p]).collect();
        let lse = z.iter().map(|v| v.exp()).sum::<f64>().ln();
        sum += lse - z[lab as usize];
        n += 1.0;
    }
    assert!((value(&g, l) - sum / n).abs() < 1e-14);
}

#[test]
fn center_loss_examples() {
    let mut g = Graph::new();
    let a = g.constant(t(&[1, 1, 2, 2], vec![0.1, 0.2, 0.3, 0.4]));
    let b = g.constant(t(&[1, 1, 2, 2], vec![0.1, 0.2, 0.3, 0.4]));
    let l = center_loss(&mut g, a, b).unwrap();
    assert_eq!(value(&g, l), 0.0);

    let p = g.constant(t(&[1, 1, 2, 2], vec![0.0; 4]));
    let q = g.constant(t(&[1, 1, 2, 2], vec![0.0, 1.0, 0.0, 0.0]));
    let l = center_loss(&mut g, p, q).unwrap();
    assert_eq!(value(&g, l), 0.25);

    let bad = g.constant(t(&[1, 1, 1, 4], vec![0.0; 4]));
    assert!(center_loss(&mut g, p, bad).is_err());
}

#[test]
fn offset_loss_examples() {
    let mut g = Graph::new();
    let p = g.constant(t(&[1, 2, 1, 1], vec![0.0, 0.0]));
    let q = g.constant(t(&[1, 2, 1, 1], vec![3.0, -4.0]));
    let l = offset_loss(&mut g, p, q, &[true]).unwrap();
    assert_eq!(value(&g, l), 3.5);
    let l = offset_loss(&mut g, q, q, &[true]).unwrap();
    assert_eq!(value(&g, l), 0.0);
    assert!(offset_loss(&mut g, p, q, &[false]).is_err());

    // masked-out cells do not count
    let p = g.constant(t(&[1, 2, 1, 2], vec![1.0, 100.0, 1.0, 100.0]));
    let q = g.constant(t(&[1, 2, 1, 2], vec![0.0; 4]));
    let l = offset_loss(&mut g, p, q, &[true, false]).unwrap();
    assert_eq!(value(&g, l), 1.0);
}

#[test]
fn orientation_loss_examples() {
    assert_eq!(orientation_loss([1.0, 0.0], [1.0, 0.0], 1.0).unwrap(), 0.0);
    let opposite = orientation_loss([-1.0, 0.0], [1.0, 0.0], 1.0).unwrap();
    assert!((opposite - (1.0 - (-2f64).exp())).abs() < 1e-15);
    assert!((opposite - 0.8647).abs() < 1e-4);
    let right = orientation_loss([0.0, 1.0], [1.0, 0.0], 1.0).unwrap();
    assert!((right - (1.0 - (-1f64).exp())).abs() < 1e-15);
    assert!((right - 0.6321).abs() < 1e-4);
    assert!(orientation_loss([0.0, 0.0], [1.0, 0.0], 1.0).is_err());
}

proptest! {
    #[test]
    fn orientation_loss_is_bounded(a in 0.0f64..360.0, b in 0.0f64..360.0, kappa in 0.05f64..8.0, r in 0.1f64..10.0) {
        let f = [r * a.to_radians().cos(), r * a.to_radians().sin()];
        let tt = [b.to_radians().cos(), b.to_radians().sin()];
        let l = orientation_loss(f, tt, kappa).unwrap();
        prop_assert!(l >= -1e-15 && l <= 1.0 - (-2.0 * kappa).exp() + 1e-15);
    }

    #[test]
    fn dense_orientation_loss_averages_the_scalar_loss(angles in prop::collection::vec((0.0f64..360.0, 0.0f64..360.0, any::<bool>()), 1..12)) {
        prop_assume!(angles.iter().any(|a| a.2));
        let n = angles.len();
        let mut pred = vec![0.0; 2 * n];
        let mut target = vec![0.0; 2 * n];
        for (i, (a, b, _)) in angles.iter().enumerate() {
            pred[i] = 2.0 * a.to_radians().cos();
            pred[n + i] = 2.0 * a.to_radians().sin();
            target[i] = b.to_radians().cos();
            target[n + i] = b.to_radians().sin();
        }
        let mask: Vec<bool> = angles.iter().map(|a| a.2).collect();
        let mut g = Graph::new();
        let p = g.constant(t(&[1, 2, 1, n], pred.clone()));
        let q = g.constant(t(&[1, 2, 1, n], target.clone()));
        let l = orientation_loss_dense(&mut g, p, q, &mask, 1.5).unwrap();
        let mut sum = 0.0;
        let mut cnt = 0.0;
        for i in (0..n).filter(|&i| mask[i]) {
            sum += orientation_loss([pred[i], pred[n + i]], [target[i], target[n + i]], 1.5).unwrap();
            cnt += 1.0;
        }
        prop_assert!((value(&g, l) - sum / cnt).abs() < 1e-12);
    }

    #[test]
    fn constant_center_error_gives_its_square(e in -2.0f64..2.0, cells in 1usize..20) {
        let mut g = Graph::new();
        let p = g.constant(t(&[1, 1, 1, cells], vec![e + 0.25; cells]));
        let q = g.constant(t(&[1, 1, 1, cells], vec![0.25; cells]));
        let l = center_loss(&mut g, p, q).unwrap();
        prop_assert!((value(&g, l) - e * e).abs() < 1e-12);
    }

    #[test]
    fn uniform_offset_error_gives_its_magnitude(e in 0.0f64..5.0, cells in 1usize..20) {
        let mut g = Graph::new();
        let mut pred = vec![e; 2 * cells];
        for v in pred.iter_mut().skip(cells) {
            *v = -e;
        }
        let p = g.constant(t(&[1, 2, 1, cells], pred));
        let q = g.constant(t(&[1, 2, 1, cells], vec![0.0; 2 * cells]));
        let l = offset_loss(&mut g, p, q, &vec![true; cells]).unwrap();
        prop_assert!((value(&g, l) - e).abs() < 1e-12);
    }
}

#[test]
fn scene_loss_examples() {
    let mut g = Graph::new();
    let x = g.constant(t(&[1, 4], vec![0.3; 4]));
    let l = scene_loss(&mut g, x, &[2]).unwrap();
    assert!((value(&g, l) - 4f64.ln()).abs() < 1e-15);

    let x = g.constant(t(&[1, 3], vec![80.0, 0.0, 0.0]));
    let l = scene_loss(&mut g, x, &[0]).unwrap();
    assert!(value(&g, l) < 1e-30);

    let one = g.constant(t(&[1, 3], vec![0.2, -1.0, 0.7]));
    let two = g.constant(t(&[2, 3], vec![0.2, -1.0, 0.7, 0.2, -1.0, 0.7]));
    let a = scene_loss(&mut g, one, &[1]).unwrap();
    let b = scene_loss(&mut g, two, &[1, 1]).unwrap();
    assert!((value(&g, a) - value(&g, b)).abs() < 1e-15);

    assert!(scene_loss(&mut g, one, &[]).is_err());
}

#[test]
fn single_pixel_instance_targets() {
    let mut inst = Grid::filled(5, 5, 0u32);
    inst.set(2, 3, 1);
    let ct = encode_center_targets(&inst, 2.0);
    assert_eq!(ct.heat(2, 3), 1.0);
    assert_eq!(ct.offset(2, 3), (0.0, 0.0));
    assert_eq!(ct.valid.iter().filter(|&&v| v).count(), 1);
    // unit-peak Gaussian, sigma 2
    assert!((ct.heat(2, 4) - (-1.0f64 / 8.0).exp()).abs() < 1e-15);
}

#[test]
fn square_instance_offsets_point_to_its_centroid() {
    let mut inst = Grid::filled(4, 4, 0u32);
    for (r, c) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
        inst.set(r, c, 7);
    }
    let ct = encode_center_targets(&inst, 8.0);
    assert_eq!(ct.centroids[&7], (0.5, 0.5));
    assert_eq!(ct.offset(0, 0), (0.5, 0.5));
    assert_eq!(ct.offset(0, 1), (0.5, -0.5));
    assert_eq!(ct.offset(1, 0), (-0.5, 0.5));
    assert_eq!(ct.offset(1, 1), (-0.5, -0.5));
}

#[test]
fn empty_scene_has_zero_targets() {
    let ct = encode_center_targets(&Grid::filled(6, 4, 0u32), 3.0);
    assert!(ct.heatmap.iter().all(|&v| v == 0.0));
    assert!(ct.offsets.iter().all(|&v| v == 0.0));
    assert!(ct.valid.iter().all(|&v| !v));
    assert!(ct.centroids.is_empty());
}

// instance made of aligned 2x2 blocks
fn block_instance() -> Grid<u32> {
    let mut inst = Grid::filled(8, 8, 0u32);
    for (br, bc) in [(1, 1), (1, 2), (2, 1)] {
        for r in 0..2 {
            for c in 0..2 {
                inst.set(2 * br + r, 2 * bc + c, 3);
            }
        }
    }
    for r in 0..2 {
        for c in 0..2 {
            inst.set(r, 6 + c, 4);
        }
    }
    inst
}

#[test]
fn one_level_pyramid_is_the_plain_encoding() {
    let inst = block_instance();
    let levels = pyramid_targets(&inst, 4.0, 1).unwrap();
    assert_eq!(levels, vec![encode_center_targets(&inst, 4.0)]);
}

#[test]
fn halving_the_grid_halves_centroids_and_offsets() {
    let inst = block_instance();
    let levels = pyramid_targets(&inst, 4.0, 2).unwrap();
    let (full, half) = (&levels[0], &levels[1]);
    assert_eq!((half.height, half.width), (4, 4));
    // cell-center coordinates: pixel i covers [i, i + 1)
    for (id, &(r, c)) in &full.centroids {
        let (hr, hc) = half.centroids[id];
        assert_eq!(hr + 0.5, (r + 0.5) / 2.0);
        assert_eq!(hc + 0.5, (c + 0.5) / 2.0);
    }
    for r in 0..4 {
        for c in 0..4 {
            if !half.valid[r * 4 + c] {
                continue;
            }
            let mut mean = (0.0, 0.0);
            for (dr, dc) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let o = full.offset(2 * r + dr, 2 * c + dc);
                mean.0 += o.0 / 4.0;
                mean.1 += o.1 / 4.0;
            }
            let o = half.offset(r, c);
            assert!((o.0 - mean.0 / 2.0).abs() < 1e-12);
            assert!((o.1 - mean.1 / 2.0).abs() < 1e-12);
        }
    }
    assert!(pyramid_targets(&Grid::filled(2, 2, 0u32), 4.0, 3).is_err());
}

proptest! {
    #[test]
    fn centroids_match_a_direct_average(cells in prop::collection::vec(0u32..4, 36)) {
        let inst = Grid::from_vec(6, 6, cells.clone());
        let got = centroids(&inst);
        for id in 1..4u32 {
            let pts: Vec<(f64, f64)> = (0..36).filter(|&i| cells[i] == id).map(|i| ((i / 6) as f64, (i % 6) as f64)).collect();
            if pts.is_empty() {
                prop_assert!(!got.contains_key(&id));
                continue;
            }
            let n = pts.len() as f64;
            let (r, c) = got[&id];
            prop_assert!((r - pts.iter().map(|p| p.0).sum::<f64>() / n).abs() < 1e-12);
            prop_assert!((c - pts.iter().map(|p| p.1).sum::<f64>() / n).abs() < 1e-12);
        }
        let ct = encode_center_targets(&inst, 2.0);
        for i in 0..36 {
            prop_assert_eq!(ct.valid[i], cells[i] > 0);
            prop_assert!((0.0..=1.0).contains(&ct.heatmap[i]));
        }
    }
}

#[test]
fn orientation_targets_are_unit_vectors_on_instances() {
    let mut inst = Grid::filled(2, 2, 0u32);
    inst.set(0, 1, 1);
    inst.set(1, 1, 2);
    let o = BTreeMap::from([(1, 90.0), (2, 180.0)]);
    let (tgt, mask) = orientation_targets(&inst, &o);
    assert_eq!(mask, vec![false, true, false, true]);
    assert!((tgt[1] - 0.0).abs() < 1e-15 && (tgt[4 + 1] - 1.0).abs() < 1e-15);
    assert!((tgt[3] + 1.0).abs() < 1e-15 && tgt[4 + 3].abs() < 1e-15);
}
